"""Nonlocality, gating summaries and attention-map export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import PatchGrid
from .errors import ContractError, FormatError, ShapeError

LOG_FLOOR = 1e-12


@dataclass
class AttentionRecord:
    """Attention maps captured on one forward pass.

    ``maps[l]`` has shape (H, L', L') for a single image or (B, H, L', L')
    for a batch; ``kinds[l]`` is ``"gpsa"`` (L' = L) or ``"sa"`` (L' = L + 1,
    class token first).
    """

    maps: list[np.ndarray]
    kinds: list[str]
    grid: PatchGrid

    def __post_init__(self):
        if len(self.maps) != len(self.kinds):
            raise ContractError("one kind tag per layer map is required")
        for m, kind in zip(self.maps, self.kinds):
            expected = self.grid.L + (kind == "sa")
            if m.shape[-1] != expected or m.shape[-2] != expected:
                raise ShapeError(f"{kind} map of shape {m.shape} does not fit a {self.grid.L}-patch grid")

    def __len__(self) -> int:
        return len(self.maps)

    def num_heads(self, layer: int) -> int:
        return self.maps[layer].shape[-3]

    def check_rows(self, tol: float = 1e-6) -> None:
        for i, m in enumerate(self.maps):
            if np.max(np.abs(m.sum(-1) - 1.0)) > tol:
                raise ContractError(f"layer {i} attention rows do not sum to 1")

    def patch_map(self, layer: int) -> np.ndarray:
        """Patch-to-patch attention of a layer, class token removed and rows renormalized."""
        m = self.maps[layer]
        if self.kinds[layer] == "sa":
            m = strip_class_token(m)
        return m


def strip_class_token(attn: np.ndarray) -> np.ndarray:
    """Drop row/column 0 and renormalize the remaining rows."""
    m = attn[..., 1:, 1:]
    return m / m.sum(-1, keepdims=True)


def _distances(grid: PatchGrid) -> np.ndarray:
    return np.sqrt((grid.offsets() ** 2).sum(-1))


def nonlocality_head(attn, grid: PatchGrid, queries=None) -> float:
    """Attention-weighted mean query-key distance, in patch units.

    ``queries`` restricts the average to a subset of query patches.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.shape != (grid.L, grid.L):
        raise ShapeError(f"attention of shape {attn.shape} does not fit a {grid.rows}x{grid.cols} grid")
    per_query = (attn * _distances(grid)).sum(-1)
    if queries is not None:
        per_query = per_query[np.asarray(queries)]
    return float(per_query.mean())


def nonlocality_heads(record: AttentionRecord, layer: int, queries=None) -> np.ndarray:
    """Per-head nonlocality of one layer, averaged over the batch if there is one."""
    m = record.patch_map(layer)
    m = m.reshape((-1,) + m.shape[-3:])
    per_query = (m * _distances(record.grid)).sum(-1)  # (B, H, L)
    if queries is not None:
        per_query = per_query[..., np.asarray(queries)]
    return per_query.mean(axis=(0, 2))


def nonlocality_layer(record: AttentionRecord, layer: int, queries=None) -> float:
    if not 0 <= layer < len(record):
        raise ContractError(f"layer {layer} not in record of {len(record)} layers")
    return float(nonlocality_heads(record, layer, queries).mean())


@dataclass
class NonlocalityReport:
    per_layer: list[float]
    per_head: list[list[float]]
    batch_averaged: bool = True
    kinds: list[str] = field(default_factory=list)


def nonlocality_report(record: AttentionRecord, queries=None) -> NonlocalityReport:
    heads = [nonlocality_heads(record, i, queries) for i in range(len(record))]
    return NonlocalityReport(
        per_layer=[float(h.mean()) for h in heads],
        per_head=[h.tolist() for h in heads],
        batch_averaged=record.maps[0].ndim == 4 if record.maps else False,
        kinds=list(record.kinds),
    )


def write_nonlocality_csv(path, rows) -> None:
    """``rows`` are (epoch, report) pairs; one CSV line per (layer, head)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "layer", "head", "d_loc"])
        for epoch, report in rows:
            for li, heads in enumerate(report.per_head):
                for h, v in enumerate(heads):
                    w.writerow([epoch, li, h, repr(float(v))])


def gating_summary(model) -> list[dict]:
    """Per GPSA layer: sigmoid of every head's gate and their mean."""
    layers = model.gpsa_layers()
    if not layers:
        raise ContractError("model has no GPSA layers")
    out = []
    for layer in layers:
        s = layer.gate_values()
        out.append({"heads": s.tolist(), "mean": float(s.mean())})
    return out


def write_gating_csv(path, summary: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "sigma_lambda"])
        for li, layer in enumerate(summary):
            for h, v in enumerate(layer["heads"]):
                w.writerow([li, h, repr(float(v))])


def quantize_log(row: np.ndarray) -> np.ndarray:
    """Log-scale a non-negative array into 0..255."""
    logs = np.log(np.maximum(row, LOG_FLOOR))
    lo, hi = logs.min(), logs.max()
    if hi == lo:
        return np.zeros(row.shape, dtype=np.uint8)
    return np.round(255.0 * (logs - lo) / (hi - lo)).astype(np.uint8)


def export_attention_map(record: AttentionRecord, layer: int, head: int, query_index: int,
                         path, batch_index: int = 0) -> np.ndarray:
    """Write one query's attention over the patch grid as a binary PGM; returns the pixels."""
    if not 0 <= layer < len(record):
        raise ContractError(f"layer {layer} out of range")
    m = record.patch_map(layer)
    if m.ndim == 4:
        m = m[batch_index]
    if not 0 <= head < m.shape[0]:
        raise ContractError(f"head {head} out of range (layer has {m.shape[0]})")
    if not 0 <= query_index < record.grid.L:
        raise ContractError(f"query {query_index} out of range")
    pixels = quantize_log(m[head, query_index]).reshape(record.grid.rows, record.grid.cols)
    write_pgm(path, pixels)
    return pixels


def write_pgm(path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM: {tokens[0]!r}", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    pos += 1
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise FormatError("truncated PGM payload", pos + len(body))
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
