"""Dual-branch HID/SID sequential recommender."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class ModelConfig:
    n_items: int
    levels: int
    codebook_size: int
    d: int = 64
    max_len: int = 50
    n_layers: int = 2
    n_heads: int = 2
    dropout: float = 0.2
    # ablation switches that change the forward pass
    no_fn: bool = False
    no_mca: bool = False
    hid_only: bool = False
    sid_only: bool = False


@dataclass
class ForwardOutput:
    alpha: Optional[torch.Tensor]  # (B, L)
    e_sid_seq: Optional[torch.Tensor]  # (B, T, d)
    e_fused_seq: Optional[torch.Tensor]  # (B, T, d)
    h_sid: Optional[torch.Tensor]  # (B, T, d) encoder states, SID branch
    h_hid: Optional[torch.Tensor]  # (B, T, d) encoder states, HID branch
    u_sid: Optional[torch.Tensor]  # (B, d)
    u_hid: Optional[torch.Tensor]  # (B, d)
    u_sid_masked: Optional[torch.Tensor] = None


def attention_mask(pad_mask: torch.Tensor) -> torch.Tensor:
    """Causal mask that also hides pad keys; every query may see itself.

    ``pad_mask`` is ``(B, T)`` with True on real items; returns ``(B, T, T)``
    with True where query ``t`` may attend key ``s``.
    """
    t = pad_mask.shape[1]
    causal = torch.ones(t, t, dtype=torch.bool, device=pad_mask.device).tril()
    allowed = causal[None] & pad_mask[:, None, :]
    return allowed | torch.eye(t, dtype=torch.bool, device=pad_mask.device)[None]


def masked_softmax(logits: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits.masked_fill(~allowed, float("-inf")), dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        w = self.drop(masked_softmax(logits, allowed[:, None]))
        return self.out((w @ v).transpose(1, 2).reshape(b, t, d))


class SequenceEncoder(nn.Module):
    """Causal pre-LN transformer with learned positions (SASRec-style)."""

    def __init__(self, d: int, max_len: int, n_layers: int = 2, n_heads: int = 2, dropout: float = 0.2):
        super().__init__()
        self.max_len = max_len
        self.pos = nn.Embedding(max_len, d)
        self.drop = nn.Dropout(dropout)
        self.attn_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(n_layers))
        self.attns = nn.ModuleList(SelfAttention(d, n_heads, dropout) for _ in range(n_layers))
        self.ffn_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(n_layers))
        self.ffns = nn.ModuleList(
            nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Dropout(dropout), nn.Linear(4 * d, d))
            for _ in range(n_layers)
        )
        self.final_norm = nn.LayerNorm(d)
        nn.init.normal_(self.pos.weight, std=0.02)

    def forward(self, seq: torch.Tensor, pad_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t = seq.shape[1]
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.max_len}")
        keep = pad_mask[..., None].to(seq.dtype)
        x = self.drop(seq + self.pos.weight[:t]) * keep
        allowed = attention_mask(pad_mask)
        for norm1, attn, norm2, ffn in zip(self.attn_norms, self.attns, self.ffn_norms, self.ffns):
            x = x + attn(norm1(x), allowed)
            x = (x + self.drop(ffn(norm2(x)))) * keep
        hidden = self.final_norm(x) * keep
        return hidden, hidden[:, -1]


class H2Rec(nn.Module):
    def __init__(self, cfg: ModelConfig, sids: np.ndarray):
        super().__init__()
        self.cfg = cfg
        n, levels, k, d = cfg.n_items, cfg.levels, cfg.codebook_size, cfg.d
        sids = np.asarray(sids, dtype=np.int64)
        if sids.shape != (n, levels):
            raise ValueError(f"sids shape {sids.shape} != ({n}, {levels})")
        if sids.min() < 0 or sids.max() >= k:
            raise ValueError("code index out of range")
        table = np.zeros((n + 1, levels), dtype=np.int64)
        table[:n] = sids
        self.register_buffer("sids", torch.from_numpy(table))

        self.item_emb = nn.Embedding(n + 1, d, padding_idx=n)
        self.code_emb = nn.Parameter(torch.randn(levels, k, d) * 0.02)
        self.fuse1 = nn.Linear(d + levels, d)
        self.fuse2 = nn.Linear(d, levels)
        self.b_prior = nn.Parameter(torch.linspace(0.5, -0.5, levels) if levels > 1 else torch.zeros(1))
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        self.enc_sid = SequenceEncoder(d, cfg.max_len, cfg.n_layers, cfg.n_heads, cfg.dropout)
        self.enc_hid = SequenceEncoder(d, cfg.max_len, cfg.n_layers, cfg.n_heads, cfg.dropout)

        nn.init.normal_(self.item_emb.weight, std=0.02)
        with torch.no_grad():
            self.item_emb.weight[n].zero_()
        for lin in (self.fuse1, self.fuse2):
            nn.init.normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    @property
    def pad_id(self) -> int:
        return self.cfg.n_items

    @property
    def uses_sid(self) -> bool:
        return not self.cfg.hid_only

    @property
    def uses_hid(self) -> bool:
        return not self.cfg.sid_only

    # ---------------------------------------------------------------- SID branch

    def granularity_sequences(self, seq: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """Per-level code embedding sequences ``(B, L, T, d)``; pads are zero."""
        codes = self.sids[seq]  # (B, T, L)
        levels = torch.arange(self.cfg.levels, device=seq.device)
        g = self.code_emb[levels, codes]  # (B, T, L, d)
        return g.permute(0, 2, 1, 3) * pad_mask[:, None, :, None].to(g.dtype)

    def fusion_weights(self, e_last: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Importance scores and softmax weights over the L granularities."""
        prior = self.b_prior.expand(e_last.shape[0], -1)
        hidden = F.gelu(self.fuse1(torch.cat([e_last, prior], dim=-1)))
        s = self.fuse2(hidden) + self.b_prior
        return s, torch.softmax(s, dim=-1)

    def uniform_alpha(self, batch: int, dtype=None) -> torch.Tensor:
        levels = self.cfg.levels
        return torch.full((batch, levels), 1.0 / levels, dtype=dtype or self.code_emb.dtype, device=self.code_emb.device)

    def alpha_for(self, seq: torch.Tensor) -> torch.Tensor:
        if self.cfg.no_fn:
            return self.uniform_alpha(seq.shape[0])
        return self.fusion_weights(self.item_emb(seq[:, -1]))[1]

    def masked_view(self, g: torch.Tensor, level: int, pad_mask: torch.Tensor) -> torch.Tensor:
        """Replace granularity ``level`` (0-based) with the mask token at real positions."""
        if not 0 <= level < g.shape[1]:
            raise ValueError(f"mask level {level} outside [0, {g.shape[1]})")
        masked = g.clone()
        masked[:, level] = self.mask_token * pad_mask[..., None].to(g.dtype)
        return masked

    # ---------------------------------------------------------------- HID branch

    def cross_attention(
        self, e_hid: torch.Tensor, g: torch.Tensor, alpha: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        """HID queries over every granularity's keys/values, alpha-weighted, plus residual."""
        d = e_hid.shape[-1]
        q = self.w_q(e_hid)  # (B, T, d)
        k = self.w_k(g)  # (B, L, T, d)
        v = self.w_v(g)
        logits = q[:, None] @ k.transpose(-1, -2) / math.sqrt(d)  # (B, L, T, T)
        w = masked_softmax(logits, attention_mask(pad_mask)[:, None])
        mixed = torch.einsum("bl,bltd->btd", alpha, w @ v)
        return mixed * pad_mask[..., None].to(mixed.dtype) + e_hid

    # ---------------------------------------------------------------- forward

    def forward(
        self, seq: torch.Tensor, pad_mask: torch.Tensor, mask_level: Optional[int] = None
    ) -> ForwardOutput:
        keep = pad_mask[..., None].to(self.item_emb.weight.dtype)
        e_hid = self.item_emb(seq) * keep
        alpha = e_sid = e_f = h_sid = h_hid = u_sid = u_hid = u_masked = None
        g = None
        if self.uses_sid:
            g = self.granularity_sequences(seq, pad_mask)
            alpha = self.alpha_for(seq)
            e_sid = fuse_sid_sequence(g, alpha)
            h_sid, u_sid = self.enc_sid(e_sid, pad_mask)
            if mask_level is not None:
                masked = fuse_sid_sequence(self.masked_view(g, mask_level, pad_mask), alpha)
                _, u_masked = self.enc_sid(masked, pad_mask)
        if self.uses_hid:
            if self.cfg.no_mca or g is None:
                e_f = e_hid
            else:
                e_f = self.cross_attention(e_hid, g, alpha, pad_mask)
            h_hid, u_hid = self.enc_hid(e_f, pad_mask)
        return ForwardOutput(alpha, e_sid, e_f, h_sid, h_hid, u_sid, u_hid, u_masked)

    # ---------------------------------------------------------------- scoring

    def item_sid_embeddings(self, items: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        """Alpha-weighted code embeddings of ``items``; alpha is per leading row."""
        codes = self.sids[items]  # (B, ..., L)
        levels = torch.arange(self.cfg.levels, device=items.device)
        emb = self.code_emb[levels, codes]  # (B, ..., L, d)
        w = alpha.reshape(alpha.shape[:1] + (1,) * (items.dim() - 1) + alpha.shape[1:])
        return (w[..., None] * emb).sum(-2)

    def score(self, out: ForwardOutput, items: torch.Tensor, states: str = "all") -> torch.Tensor:
        """Concatenated-dot scores.

        ``states="all"``: items ``(B, T, n)`` scored against every position.
        ``states="last"``: items ``(B, n)`` scored against the user vectors.
        """
        if (items == self.pad_id).any() and states == "last":
            raise ValueError("pad id is not a valid candidate")
        total = 0.0
        if self.uses_sid:
            user = out.h_sid[..., None, :] if states == "all" else out.u_sid[:, None, :]
            total = total + (self.item_sid_embeddings(items, out.alpha) * user).sum(-1)
        if self.uses_hid:
            user = out.h_hid[..., None, :] if states == "all" else out.u_hid[:, None, :]
            total = total + (self.item_emb(items) * user).sum(-1)
        return total

    @torch.no_grad()
    def score_candidates(self, seq: torch.Tensor, pad_mask: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        return self.score(self(seq, pad_mask), candidates, states="last")


def fuse_sid_sequence(g: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Convex combination of the ``(B, L, T, d)`` granularity sequences."""
    if g.shape[:2] != alpha.shape:
        raise ValueError(f"granularities {tuple(g.shape)} vs alpha {tuple(alpha.shape)}")
    return torch.einsum("bl,bltd->btd", alpha, g)


def score_items(
    u_sid: Optional[torch.Tensor],
    u_hid: Optional[torch.Tensor],
    e_sid: Optional[torch.Tensor],
    e_hid: Optional[torch.Tensor],
) -> torch.Tensor:
    """``[e_sid : e_hid] . [u_sid : u_hid]`` for matching leading shapes."""
    parts = []
    if u_sid is not None:
        parts.append((e_sid * u_sid).sum(-1))
    if u_hid is not None:
        parts.append((e_hid * u_hid).sum(-1))
    return sum(parts)


# -------------------------------------------------------------------- checkpoint file

CKPT_MAGIC = b"H2CK"


def write_tensor_file(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Sectioned binary: magic, JSON meta, then named f32 tensors."""
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)) + blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.array(arr, dtype="<f4", order="C")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensor_file(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not an H2CK checkpoint (bad magic)")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            size = int(np.prod(shape)) if rank else 1
            tensors[name] = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape).copy()
    return tensors, meta
