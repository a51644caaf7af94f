"""Content, positional and gated positional self-attention.

Per-head projection matrices are stored side by side: ``w_qry`` has shape
``(D_emb, N_h * D_h)`` and head ``h`` owns columns ``h*D_h:(h+1)*D_h``.
All attention functions accept inputs shaped ``(L, D_emb)`` or
``(B, L, D_emb)`` and return per-head maps shaped ``(..., N_h, L, L)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

INIT_STD = 0.02
# gate used by strict conv init: sigmoid(30) = 1 - 9.4e-14
STRICT_GATE = 30.0


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal samples truncated at two standard deviations."""
    return stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid extents must be positive, got {self.rows}x{self.cols}")

    @property
    def L(self) -> int:
        return self.rows * self.cols

    def position(self, i: int) -> tuple[int, int]:
        return divmod(i, self.cols)

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def coords(self) -> np.ndarray:
        r, c = np.divmod(np.arange(self.L), self.cols)
        return np.stack([r, c], axis=1)

    def offsets(self) -> np.ndarray:
        """``offsets()[i, j] = position(j) - position(i)``, shape (L, L, 2)."""
        xy = self.coords()
        return xy[None, :, :] - xy[:, None, :]

    def interior(self, margin: int = 1) -> np.ndarray:
        """Indices of patches at least ``margin`` cells from every edge."""
        r, c = self.coords().T
        keep = (r >= margin) & (r < self.rows - margin) & (c >= margin) & (c < self.cols - margin)
        return np.flatnonzero(keep)

    @property
    def diameter(self) -> float:
        return math.hypot(self.rows - 1, self.cols - 1)


@dataclass(frozen=True)
class RelPosTable:
    """Fixed relative encodings ``r_ij = (|d|^2, d_row, d_col)``, shape (L, L, 3)."""

    grid: PatchGrid
    entries: np.ndarray

    trainable = False

    @property
    def L(self) -> int:
        return self.grid.L


def build_relpos_table(grid: PatchGrid) -> RelPosTable:
    d = grid.offsets().astype(np.float64)
    entries = np.concatenate([(d * d).sum(-1, keepdims=True), d], axis=-1)
    entries.setflags(write=False)
    return RelPosTable(grid, entries)


class HeadPosParams:
    """Read-only view of one head's positional embedding ``v_pos``."""

    def __init__(self, v_pos):
        self.v_pos = np.asarray(v_pos, dtype=np.float64)

    def alpha(self) -> float:
        return -float(self.v_pos[0])

    def center(self) -> tuple[float, float]:
        a = self.alpha()
        if a <= 0:
            raise ContractError("center is only defined for positive locality strength")
        return (self.v_pos[1] / (2 * a), self.v_pos[2] / (2 * a))


class SaLayer:
    """Multi-head content self-attention."""

    kind = "sa"

    def __init__(self, num_heads: int, head_dim: int, rng: np.random.Generator | None = None,
                 scale: bool = True):
        if num_heads < 1 or head_dim < 1:
            raise ConfigError("num_heads and head_dim must be positive")
        rng = rng if rng is not None else np.random.default_rng()
        d = num_heads * head_dim
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.embed_dim = d
        self.scale = scale
        self.w_qry = T.parameter(trunc_normal(rng, (d, d)), "w_qry")
        self.w_key = T.parameter(trunc_normal(rng, (d, d)), "w_key")
        self.w_val = T.parameter(trunc_normal(rng, (d, d)), "w_val")
        self.w_out = T.parameter(trunc_normal(rng, (d, d)), "w_out")
        self.b_out = T.parameter(np.zeros(d), "b_out")

    def parameters(self) -> dict[str, Tensor]:
        return {"w_qry": self.w_qry, "w_key": self.w_key, "w_val": self.w_val,
                "w_out": self.w_out, "b_out": self.b_out}

    def attention(self, x: Tensor, table: RelPosTable | None = None) -> Tensor:
        return content_attention(x, self.w_qry, self.w_key, self.num_heads, self.scale)

    def __call__(self, x: Tensor, table: RelPosTable | None = None):
        attn = self.attention(x, table)
        return multi_head_forward(x, self, attn), attn


class GpsaLayer(SaLayer):
    """Gated positional self-attention; ``mode='psa'`` gives the ungated variant."""

    kind = "gpsa"

    def __init__(self, num_heads: int, head_dim: int, rng: np.random.Generator | None = None,
                 scale: bool = True, mode: str = "gpsa", gate_trainable: bool = True):
        rng = rng if rng is not None else np.random.default_rng()
        super().__init__(num_heads, head_dim, rng, scale)
        if mode not in ("gpsa", "psa"):
            raise ConfigError(f"unknown positional attention mode {mode!r}")
        self.mode = mode
        self.v_pos = T.parameter(trunc_normal(rng, (num_heads, 3)), "v_pos")
        self.gating = T.parameter(np.ones(num_heads), "gating")
        self.gate_trainable = gate_trainable
        # eval-time override of sigmoid(gating): None, 0.0 (no positional) or 1.0 (no content)
        self.gate_override: float | None = None

    def parameters(self) -> dict[str, Tensor]:
        params = super().parameters()
        params["v_pos"] = self.v_pos
        params["gating"] = self.gating
        return params

    def head_pos(self, h: int) -> HeadPosParams:
        return HeadPosParams(self.v_pos.data[h])

    def gate_values(self) -> np.ndarray:
        if self.gate_override is not None:
            return np.full(self.num_heads, float(self.gate_override))
        return 1.0 / (1.0 + np.exp(-self.gating.data))

    def attention(self, x: Tensor, table: RelPosTable | None = None) -> Tensor:
        if table is None:
            raise ContractError("positional attention needs a relative position table")
        if self.mode == "psa":
            return psa_attention(x, self, table)
        return gpsa_attention(x, self, table)


# -- attention maps -----------------------------------------------------------

def _split_heads(y: Tensor, num_heads: int) -> Tensor:
    """(..., L, H*Dh) -> (..., H, L, Dh)."""
    lead = y.shape[:-2]
    L, width = y.shape[-2:]
    y = T.reshape(y, lead + (L, num_heads, width // num_heads))
    n = len(lead)
    return T.transpose(y, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(y: Tensor) -> Tensor:
    """(..., H, L, Dh) -> (..., L, H*Dh)."""
    lead = y.shape[:-3]
    H, L, dh = y.shape[-3:]
    n = len(lead)
    y = T.transpose(y, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(y, lead + (L, H * dh))


def content_logits(x: Tensor, w_qry: Tensor, w_key: Tensor, num_heads: int = 1,
                   scale: bool = True) -> Tensor:
    x, w_qry, w_key = T.tensor(x), T.tensor(w_qry), T.tensor(w_key)
    if x.ndim < 2 or w_qry.shape != w_key.shape or x.shape[-1] != w_qry.shape[0]:
        raise ShapeError(f"content attention: X {x.shape}, W_qry {w_qry.shape}, W_key {w_key.shape}")
    if w_qry.shape[1] % num_heads:
        raise ShapeError(f"projection width {w_qry.shape[1]} not divisible by {num_heads} heads")
    q = _split_heads(T.matmul(x, w_qry), num_heads)
    k = _split_heads(T.matmul(x, w_key), num_heads)
    logits = T.matmul(q, T.swapaxes(k, -1, -2))
    if scale:
        logits = logits * (1.0 / math.sqrt(w_qry.shape[1] // num_heads))
    return logits


def content_attention(x, w_qry, w_key, num_heads: int = 1, scale: bool = True) -> Tensor:
    """``softmax(Q K^T / sqrt(D_h))`` for each head, shape (..., H, L', L')."""
    return T.softmax_rows(content_logits(x, w_qry, w_key, num_heads, scale))


def positional_scores(v_pos, table: RelPosTable) -> Tensor:
    """``v_pos . r_ij``; v_pos of shape (3,) gives (L, L), shape (H, 3) gives (H, L, L)."""
    v_pos = T.tensor(v_pos)
    if v_pos.shape[-1] != table.entries.shape[-1] or v_pos.ndim > 2:
        raise ShapeError(f"v_pos {v_pos.shape} does not match table width {table.entries.shape[-1]}")
    L = table.L
    flat = T.tensor(table.entries.reshape(L * L, 3))
    if v_pos.ndim == 1:
        return T.reshape(T.matmul(flat, T.reshape(v_pos, (3, 1))), (L, L))
    scores = T.matmul(flat, T.transpose(v_pos))
    return T.reshape(T.transpose(scores), (v_pos.shape[0], L, L))


def _check_length(x: Tensor, table: RelPosTable) -> None:
    if x.shape[-2] != table.L:
        raise ContractError(f"sequence length {x.shape[-2]} does not match the {table.L}-patch table")


def psa_attention(x, layer: GpsaLayer, table: RelPosTable) -> Tensor:
    """One softmax over content plus positional logits."""
    x = T.tensor(x)
    _check_length(x, table)
    logits = content_logits(x, layer.w_qry, layer.w_key, layer.num_heads, layer.scale)
    return T.softmax_rows(logits + positional_scores(layer.v_pos, table))


def _gate(layer: GpsaLayer) -> Tensor:
    if layer.gate_override is not None:
        return T.tensor(np.full(layer.num_heads, float(layer.gate_override)))
    return T.sigmoid(layer.gating)


def gpsa_attention(x, layer: GpsaLayer, table: RelPosTable) -> Tensor:
    """Gated mix of content and positional softmaxes, renormalized per row."""
    x = T.tensor(x)
    _check_length(x, table)
    H = layer.num_heads
    content = content_attention(x, layer.w_qry, layer.w_key, H, layer.scale)
    positional = T.softmax_rows(positional_scores(layer.v_pos, table))
    gate = T.reshape(_gate(layer), (H, 1, 1))
    mixed = (1.0 - gate) * content + gate * positional
    return mixed / T.sum(mixed, axis=-1, keepdims=True)


def multi_head_forward(x, layer: SaLayer, attn: Tensor) -> Tensor:
    """``concat_h(A^h X W_val^h) W_out + b_out``."""
    x, attn = T.tensor(x), T.tensor(attn)
    L = x.shape[-2]
    if attn.shape[-3:] != (layer.num_heads, L, L):
        raise ShapeError(f"attention {attn.shape} does not fit {layer.num_heads} heads over length {L}")
    values = _split_heads(T.matmul(x, layer.w_val), layer.num_heads)
    mixed = _merge_heads(T.matmul(attn, values))
    return T.matmul(mixed, layer.w_out) + layer.b_out


# -- convolutional initialization ----------------------------------------------

def kernel_offsets(k: int) -> list[int]:
    """Centered integer offsets for a k-wide kernel; even k skips zero."""
    if k < 1:
        raise ConfigError("kernel size must be positive")
    if k % 2:
        half = (k - 1) // 2
        return list(range(-half, half + 1))
    half = k // 2
    return list(range(-half, 0)) + list(range(1, half + 1))


def kernel_size(num_heads: int) -> int:
    k = math.isqrt(num_heads)
    if k * k != num_heads:
        raise ConfigError(f"convolutional init needs a perfect-square head count, got {num_heads}")
    return k


def head_centers(num_heads: int) -> list[tuple[int, int]]:
    offs = kernel_offsets(kernel_size(num_heads))
    return [(p, q) for p in offs for q in offs]


def conv_init(layer: GpsaLayer, locality_strength: float, strict: bool = False) -> None:
    """Point head h's positional attention at its kernel offset with sharpness alpha.

    Content projections keep their random init unless ``strict`` is set, in
    which case W_qry = W_key = 0, W_val = I and the gate saturates towards
    position so the layer is an exact (alpha -> inf) convolution.
    """
    if locality_strength <= 0:
        raise ConfigError("locality strength must be positive")
    centers = head_centers(layer.num_heads)
    a = float(locality_strength)
    layer.v_pos.data[...] = [[-a, 2 * a * d1, 2 * a * d2] for d1, d2 in centers]
    layer.gating.data[...] = 1.0
    if strict:
        layer.w_qry.data[...] = 0.0
        layer.w_key.data[...] = 0.0
        layer.w_val.data[...] = np.eye(layer.embed_dim)
        layer.gating.data[...] = STRICT_GATE


# -- parameter dump -----------------------------------------------------------

_PER_HEAD = {"w_qry", "w_key", "w_val", "v_pos", "gating"}


def dump_layers(layers, directory) -> Path:
    """Write every parameter as a tensor file plus ``layers.json`` naming each one."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for li, layer in enumerate(layers):
        for role, p in layer.parameters().items():
            if role in _PER_HEAD:
                for h in range(layer.num_heads):
                    part = _head_slice(layer, role, p.data, h)
                    fname = f"layer{li}_{role}_h{h}.bin"
                    T.save_tensor(directory / fname, part)
                    entries.append({"layer_index": li, "head": h, "role": role, "file": fname})
            else:
                fname = f"layer{li}_{role}.bin"
                T.save_tensor(directory / fname, p)
                entries.append({"layer_index": li, "head": None, "role": role, "file": fname})
    sidecar = directory / "layers.json"
    sidecar.write_text(json.dumps(entries, indent=1))
    return sidecar


def restore_layers(layers, directory) -> None:
    directory = Path(directory)
    entries = json.loads((directory / "layers.json").read_text())
    for e in entries:
        layer = layers[e["layer_index"]]
        target = layer.parameters()[e["role"]]
        arr = T.load_tensor(directory / e["file"]).data
        if e["head"] is None:
            if arr.shape != target.shape:
                raise ShapeError(f"{e['file']}: {arr.shape} vs {target.shape}")
            target.data[...] = arr
        else:
            view = _head_slice(layer, e["role"], target.data, e["head"])
            if arr.shape != view.shape:
                raise ShapeError(f"{e['file']}: {arr.shape} vs {view.shape}")
            view[...] = arr


def _head_slice(layer, role: str, data: np.ndarray, h: int) -> np.ndarray:
    if role == "v_pos":
        return data[h]
    if role == "gating":
        return data[h:h + 1]
    dh = layer.head_dim
    return data[:, h * dh:(h + 1) * dh]
