"""Semantic embedding matrices: binary I/O, SVD reduction, SID files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

SEMB_MAGIC = b"SEMB"


class SemanticFormatError(ValueError):
    pass


def save_semantic_matrix(matrix: np.ndarray, path) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise SemanticFormatError("semantic matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(SEMB_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def load_semantic_matrix(path, n_items: Optional[int] = None) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SEMB_MAGIC:
        raise SemanticFormatError(f"{path}: bad magic {raw[:4]!r}, expected {SEMB_MAGIC!r}")
    if len(raw) < 12:
        raise SemanticFormatError(f"{path}: truncated header")
    count, dim = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * count * dim:
        raise SemanticFormatError(f"{path}: header declares {count}x{dim} floats, found {len(body) // 4}")
    if n_items is not None and count != n_items:
        raise SemanticFormatError(f"{path}: {count} rows but catalog has {n_items} items")
    m = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)
    if not np.isfinite(m).all():
        raise SemanticFormatError(f"{path}: NaN or Inf entries")
    return m


@dataclass
class ReducedMatrix:
    values: np.ndarray  # (n, d) float32
    components: np.ndarray  # (d, d_llm) right singular vectors
    explained_variance_ratio: np.ndarray  # (d,)
    mean: np.ndarray
    scale: float


def _fix_signs(vt: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(len(vt)), idx])
    signs[signs == 0] = 1.0
    return vt * signs[:, None]


def reduce_dims(matrix: np.ndarray, d: int) -> ReducedMatrix:
    """Mean-centred truncated SVD onto the top ``d`` right singular directions.

    Output is divided by ``s_max / sqrt(n)`` so the leading column has unit
    standard deviation and every other column is at most 1.
    """
    x = np.asarray(matrix, dtype=np.float64)
    n, d_llm = x.shape
    if not 1 <= d <= d_llm:
        raise ValueError(f"d must be in [1, {d_llm}], got {d}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    vt = _fix_signs(vt[:d])
    proj = xc @ vt.T
    scale = s[0] / np.sqrt(n) if s[0] > 0 else 1.0
    total = float((s**2).sum())
    ratio = (s[:d] ** 2) / total if total > 0 else np.zeros(d)
    return ReducedMatrix(
        values=(proj / scale).astype(np.float32),
        components=vt,
        explained_variance_ratio=ratio,
        mean=mean,
        scale=float(scale),
    )


def save_sids(assignment, path) -> None:
    codes = np.asarray(assignment.codes)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#L={assignment.levels} K={assignment.codebook_size} mech={assignment.mechanism}\n")
        for i, row in enumerate(codes):
            fh.write("\t".join([str(i)] + [str(int(c)) for c in row]) + "\n")


def load_sids(path):
    from .quantizer import SidAssignment

    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise SemanticFormatError(f"{path}: no items" if not lines else f"{path}: missing header line")
    try:
        fields = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        levels, k, mech = int(fields["L"]), int(fields["K"]), fields["mech"]
    except (KeyError, ValueError):
        raise SemanticFormatError(f"{path}: malformed header {lines[0]!r}") from None
    rows = lines[1:]
    if not rows:
        raise SemanticFormatError(f"{path}: no items")
    codes = np.empty((len(rows), levels), dtype=np.int64)
    seen = np.zeros(len(rows), dtype=bool)
    for lineno, line in enumerate(rows, start=2):
        parts = line.split("\t")
        if len(parts) != levels + 1:
            raise SemanticFormatError(f"{path}:{lineno}: expected {levels} codes, got {len(parts) - 1}")
        idx = int(parts[0])
        vals = [int(p) for p in parts[1:]]
        if not 0 <= idx < len(rows) or seen[idx]:
            raise SemanticFormatError(f"{path}:{lineno}: bad or duplicate item index {idx}")
        if any(not 0 <= v < k for v in vals):
            raise SemanticFormatError(f"{path}:{lineno}: code index out of range [0, {k})")
        codes[idx] = vals
        seen[idx] = True
    return SidAssignment.from_codes(codes, k, mech)
