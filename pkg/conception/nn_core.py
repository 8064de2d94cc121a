"""Substrat différentiable minimal (numpy, float64).

Fournit :
- MlpNetwork : couches denses (+ blocs résiduels) avec forward / backward manuels ;
- AdamState : optimiseur Adam à correction de biais ;
- pertes (MSE masquée, entropie croisée) et softmax stables ;
- format de checkpoint binaire little-endian (magic, version, table des couches,
  charge utile float64, somme de contrôle CRC32).

Aucun framework ML : le graphe est limité au feed-forward + résiduel.
"""
from __future__ import annotations
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, TrainingDivergenceError, UsageError

ACTIVATIONS = ("relu", "silu", "tanh", "identity")
_ACT_CODES = {name: code for code, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"RGNN"
CHECKPOINT_VERSION = 1
_KIND_NETWORK = 0
_KIND_ARRAY = 1


def as_tensor(data) -> np.ndarray:
    """Convertit en tableau float64 ; rejette NaN/Inf."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("tenseur contenant des valeurs non finies")
    return arr


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def activation_forward(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "silu":
        return z * _sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ContractError(f"activation inconnue: {kind}")


def activation_backward(kind: str, z: np.ndarray, a: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return grad * (z > 0)
    if kind == "silu":
        s = _sigmoid(z)
        return grad * (s * (1.0 + z * (1.0 - s)))
    if kind == "tanh":
        return grad * (1.0 - a * a)
    if kind == "identity":
        return grad
    raise ContractError(f"activation inconnue: {kind}")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Probabilités strictement positives : plancher au plus petit float64 normal."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return np.maximum(e / np.sum(e, axis=axis, keepdims=True), np.finfo(np.float64).tiny)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def mse_loss(pred: np.ndarray, target: np.ndarray,
             mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Moyenne des carrés (sur les entrées où mask vaut 1) et son gradient."""
    diff = pred - target
    if mask is None:
        mask = np.ones_like(diff)
    mask = np.broadcast_to(mask, diff.shape)
    count = max(float(np.sum(mask)), 1.0)
    loss = float(np.sum(mask * diff * diff) / count)
    return loss, 2.0 * mask * diff / count


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Entropie croisée moyenne sur le batch et gradient par rapport aux logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = float(-np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def sinusoidal_embedding(steps, dim: int) -> np.ndarray:
    """Plongement sinusoïdal de l'indice d'étape de diffusion, forme (n, dim)."""
    steps = np.atleast_1d(np.asarray(steps, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(steps), 1))], axis=1)
    return emb


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str
    residual: bool = False


class MlpNetwork:
    """Perceptron multicouche ; une couche résiduelle calcule h + act(hW + b)."""

    def __init__(self, widths: Sequence[int], activations: Sequence[str],
                 residual: Optional[Sequence[bool]] = None,
                 rng: Optional[np.random.Generator] = None, init: str = "he"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or len(activations) != len(widths) - 1:
            raise ContractError("il faut len(activations) == len(widths) - 1 ≥ 1")
        residual = list(residual) if residual is not None else [False] * (len(widths) - 1)
        self.layers: List[LayerSpec] = []
        for k, act in enumerate(activations):
            if act not in _ACT_CODES:
                raise ContractError(f"activation inconnue: {act}")
            if residual[k] and widths[k] != widths[k + 1]:
                raise ContractError(f"couche {k}: résiduel impossible ({widths[k]} → {widths[k + 1]})")
            self.layers.append(LayerSpec(widths[k], widths[k + 1], act, bool(residual[k])))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: List[np.ndarray] = []
        for spec in self.layers:
            if init == "zeros":
                w = np.zeros((spec.in_dim, spec.out_dim))
            else:
                gain = 2.0 if spec.activation in ("relu", "silu") else 1.0
                w = rng.normal(0.0, np.sqrt(gain / spec.in_dim), size=(spec.in_dim, spec.out_dim))
                if spec.residual:
                    w *= 0.1
            self.params.extend([w, np.zeros(spec.out_dim)])
        self._tape = None

    @classmethod
    def from_specs(cls, specs: Sequence[LayerSpec]) -> "MlpNetwork":
        widths = [specs[0].in_dim] + [s.out_dim for s in specs]
        return cls(widths, [s.activation for s in specs], [s.residual for s in specs], init="zeros")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params))

    def forward(self, x, record: bool = False) -> np.ndarray:
        """Pur vis-à-vis des paramètres ; `record` conserve les intermédiaires pour backward."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[-1] != self.in_dim:
            raise ContractError(f"largeur d'entrée {h.shape[-1]} ≠ {self.in_dim}")
        tape = []
        for k, spec in enumerate(self.layers):
            w, b = self.params[2 * k], self.params[2 * k + 1]
            z = h @ w + b
            a = activation_forward(spec.activation, z)
            out = h + a if spec.residual else a
            tape.append((h, z, a))
            h = out
        if record:
            self._tape = (tape, squeeze)
        return h[0] if squeeze else h

    def backward(self, loss_grad) -> Tuple[List[np.ndarray], np.ndarray]:
        """Gradients (dans l'ordre de `params`) et gradient par rapport à l'entrée."""
        if self._tape is None:
            raise UsageError("backward appelé sans forward(record=True) préalable")
        tape, squeeze = self._tape
        g = np.asarray(loss_grad, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        grads: List[np.ndarray] = [None] * len(self.params)
        for k in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[k]
            h, z, a = tape[k]
            gz = activation_backward(spec.activation, z, a, g)
            grads[2 * k] = h.T @ gz
            grads[2 * k + 1] = gz.sum(axis=0)
            g_in = gz @ self.params[2 * k].T
            if spec.residual:
                g_in = g_in + g
            g = g_in
        for idx, gr in enumerate(grads):
            if not np.all(np.isfinite(gr)):
                raise TrainingDivergenceError(f"gradient non fini (bloc {idx})", block=str(idx))
        return grads, (g[0] if squeeze else g)

    def copy(self) -> "MlpNetwork":
        clone = MlpNetwork.from_specs(self.layers)
        clone.params = [p.copy() for p in self.params]
        return clone

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.params) or any(p.shape != q.shape for p, q in zip(params, self.params)):
            raise ContractError("paramètres incompatibles avec l'architecture")
        self.params = [np.array(p, dtype=np.float64) for p in params]

    def soft_update(self, source: "MlpNetwork", rho: float) -> None:
        """θ̄ ← (1−ρ)·θ̄ + ρ·θ."""
        for target, src in zip(self.params, source.params):
            target *= (1.0 - rho)
            target += rho * src


class AdamState:
    """Moments d'Adam par paramètre ; met à jour la liste `params` sur place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, max_grad_norm: Optional[float] = None):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.max_grad_norm = max_grad_norm

    def step(self, params: List[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        if len(grads) != len(params):
            raise ContractError(f"{len(grads)} gradients pour {len(params)} paramètres")
        for idx, (p, g) in enumerate(zip(params, grads)):
            if g.shape != p.shape:
                raise ContractError(f"bloc {idx}: gradient {g.shape} ≠ paramètre {p.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"gradient non fini dans le bloc {idx}", block=str(idx),
                                              snapshot={"step": self.t})
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(state: AdamState, params: List[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
    return state.step(params, grads)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(networks: Dict[str, MlpNetwork],
                      arrays: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    """Sérialise réseaux et tableaux nommés.
    En-tête : magic(4) version(u16) n_entrées(u16) ; table des entrées ;
    charge utile '<f8' dans l'ordre de la table ; CRC32 (u32) final.
    """
    arrays = arrays or {}
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<HH", CHECKPOINT_VERSION, len(networks) + len(arrays))
    payload: List[np.ndarray] = []
    for name, net in networks.items():
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw + struct.pack("<BH", _KIND_NETWORK, len(net.layers))
        for spec in net.layers:
            header += struct.pack("<IIBB", spec.in_dim, spec.out_dim, _ACT_CODES[spec.activation], int(spec.residual))
        payload.extend(net.params)
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _KIND_ARRAY, arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload.append(arr)
    body = bytes(header) + b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, MlpNetwork], Dict[str, np.ndarray]]:
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError("checkpoint invalide: magic absent")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContractError("checkpoint corrompu: somme de contrôle invalide")
    version, count = struct.unpack_from("<HH", body, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"version de checkpoint non supportée: {version}")
    off = 8
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (kind,) = struct.unpack_from("<B", body, off)
        off += 1
        if kind == _KIND_NETWORK:
            (n_layers,) = struct.unpack_from("<H", body, off)
            off += 2
            specs = []
            for _ in range(n_layers):
                i, o, act, res = struct.unpack_from("<IIBB", body, off)
                off += 10
                specs.append(LayerSpec(i, o, ACTIVATIONS[act], bool(res)))
            entries.append((name, kind, specs))
        elif kind == _KIND_ARRAY:
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            entries.append((name, kind, tuple(shape)))
        else:
            raise ContractError(f"type d'entrée inconnu: {kind}")

    def take(shape) -> np.ndarray:
        nonlocal off
        n = int(np.prod(shape)) if len(shape) else 1
        if off + 8 * n > len(body):
            raise ContractError("checkpoint invalide: charge utile tronquée")
        try:
            arr = as_tensor(np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape))
        except ContractError as e:
            raise ContractError(f"checkpoint invalide: {e}") from e
        off += 8 * n
        return arr.copy()

    networks: Dict[str, MlpNetwork] = {}
    arrays: Dict[str, np.ndarray] = {}
    for name, kind, meta in entries:
        if kind == _KIND_NETWORK:
            net = MlpNetwork.from_specs(meta)
            params = []
            for spec in meta:
                params.append(take((spec.in_dim, spec.out_dim)))
                params.append(take((spec.out_dim,)))
            net.params = params
            networks[name] = net
        else:
            arrays[name] = take(meta)
    if off != len(body):
        raise ContractError("checkpoint invalide: taille de charge utile incohérente")
    return networks, arrays


def save_checkpoint(path: str | Path, networks: Dict[str, MlpNetwork],
                    arrays: Optional[Dict[str, np.ndarray]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(networks, arrays))
    return path


def load_checkpoint(path: str | Path) -> Tuple[Dict[str, MlpNetwork], Dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
