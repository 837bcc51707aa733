"""H@10 / N@10 with head/tail and popularity-bucket breakdowns."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import PopularityPartition, SplitDataset, pad_left

Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]

METRICS = ("hit_at_10", "ndcg_at_10")


def rank_of_target(scores, target, candidates) -> int:
    """1-based rank; candidates tied with the target count as ranked ahead."""
    scores = np.asarray(scores)
    candidates = np.asarray(candidates)
    hits = np.flatnonzero(candidates == target)
    if len(hits) == 0:
        raise ValueError(f"target {target} not among the candidates")
    pos = hits[0]
    s = scores[pos]
    others = np.delete(scores, pos)
    return 1 + int((others >= s).sum())


def hit_at_k(rank: int, k: int = 10) -> int:
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int = 10) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def ranks_from_scores(scores: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Pessimistic ranks of column 0 (the target) within each row."""
    target = scores[:, :1]
    ahead = scores[:, 1:] >= target
    if valid is not None:
        ahead &= valid[:, 1:]
    return 1 + ahead.sum(1)


@dataclass
class MetricsReport:
    groups: dict[str, dict[str, float]]
    seed: int
    protocol: str
    seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "protocol": self.protocol, "groups": self.groups}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "n", "hit_at_10", "ndcg_at_10"])
        for name, g in self.groups.items():
            w.writerow([name, g["n"], f"{g['hit_at_10']:.6f}", f"{g['ndcg_at_10']:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        # JSON files store groups with sorted keys; restore the canonical order
        groups = dict(sorted(d["groups"].items(), key=lambda kv: _group_order(kv[0])))
        return cls(groups=groups, seed=d["seed"], protocol=d["protocol"], seeds=[d["seed"]])


def _group_order(name: str) -> tuple[int, int]:
    fixed = {"overall": 0, "head": 1, "tail": 2}
    if name in fixed:
        return fixed[name], 0
    return 3, int(name[len("bucket"):]) if name.startswith("bucket") else 0


def _group_report(ranks: np.ndarray, targets: np.ndarray, partition: PopularityPartition, seed: int, protocol: str):
    hit = (ranks <= 10).astype(np.float64)
    ndcg = np.where(ranks <= 10, 1.0 / np.log2(ranks + 1.0), 0.0)
    head = partition.is_head[targets]
    bucket = partition.bucket_of()[targets]
    selectors = {"overall": np.ones(len(targets), dtype=bool), "head": head, "tail": ~head}
    for b in range(len(partition.buckets)):
        selectors[f"bucket{b + 1}"] = bucket == b
    groups = {}
    for name, sel in selectors.items():
        n = int(sel.sum())
        groups[name] = {
            "n": n,
            "hit_at_10": float(hit[sel].mean()) if n else 0.0,
            "ndcg_at_10": float(ndcg[sel].mean()) if n else 0.0,
        }
    return MetricsReport(groups=groups, seed=seed, protocol=protocol, seeds=[seed])


def evaluation_candidates(
    split: SplitDataset, n_eval_neg: int, seed: int, role: str = "test"
) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Prefixes, targets, and ``(U, 1 + n_eval_neg)`` candidate rows (target first)."""
    pairs = split.test if role == "test" else split.valid
    rng = np.random.default_rng(seed)
    all_items = np.arange(split.n_items)
    prefixes, targets, cands = [], [], []
    for (prefix, target), hist in zip(pairs, split.history):
        pool = np.setdiff1d(all_items, hist, assume_unique=True)
        neg = rng.choice(pool, size=min(n_eval_neg, len(pool)), replace=False)
        if len(neg) < n_eval_neg:
            raise ValueError(f"catalog too small for {n_eval_neg} negatives")
        prefixes.append(prefix)
        targets.append(target)
        cands.append(np.concatenate([[target], neg]))
    return prefixes, np.asarray(targets, dtype=np.int64), np.stack(cands)


def evaluate(
    scorer: Scorer,
    split: SplitDataset,
    partition: PopularityPartition,
    n_eval_neg: Optional[int] = 99,
    seed: int = 42,
    role: str = "test",
    max_len: int = 50,
    batch_size: int = 512,
) -> MetricsReport:
    """Rank each held-out target against sampled negatives (or the full catalog).

    ``scorer(sequences, candidates)`` receives left-padded ``(B, max_len)``
    prefixes and ``(B, C)`` candidate ids and returns ``(B, C)`` scores.
    ``n_eval_neg=None`` ranks against every item outside the user's history.
    """
    pad = split.pad_id
    if n_eval_neg is not None:
        if n_eval_neg < 1:
            raise ValueError("n_eval_neg must be >= 1")
        prefixes, targets, cands = evaluation_candidates(split, n_eval_neg, seed, role)
        ranks = []
        for start in range(0, len(targets), batch_size):
            seqs = pad_left(prefixes[start:start + batch_size], max_len, pad)
            ranks.append(ranks_from_scores(np.asarray(scorer(seqs, cands[start:start + batch_size]))))
        protocol = f"sampled-{n_eval_neg}"
    else:
        pairs = split.test if role == "test" else split.valid
        prefixes = [p for p, _ in pairs]
        targets = np.array([t for _, t in pairs], dtype=np.int64)
        ranks = []
        catalog = np.arange(split.n_items)
        for start in range(0, len(targets), batch_size):
            tgt = targets[start:start + batch_size]
            seqs = pad_left(prefixes[start:start + batch_size], max_len, pad)
            others = np.broadcast_to(catalog, (len(tgt), split.n_items))
            scores = np.asarray(scorer(seqs, np.concatenate([tgt[:, None], others], 1)))
            valid = np.ones_like(scores, dtype=bool)
            for r, u in enumerate(range(start, start + len(tgt))):
                valid[r, 1 + split.history[u]] = False
            ranks.append(ranks_from_scores(scores, valid))
        protocol = "full"
    ranks = np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)
    return _group_report(ranks, targets, partition, seed, protocol)


def model_scorer(model, max_len: Optional[int] = None) -> Scorer:
    """Adapt a trained ``H2Rec`` to the ``Scorer`` interface (eval mode, no grad)."""
    pad = model.pad_id

    def score(seqs: np.ndarray, cands: np.ndarray) -> np.ndarray:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            seq = torch.as_tensor(seqs)
            out = model.score_candidates(seq, seq != pad, torch.as_tensor(np.ascontiguousarray(cands)))
        model.train(was_training)
        return out.double().numpy()

    return score


def group_breakdown(reports: Sequence[MetricsReport]) -> list[dict]:
    """Mean and sample standard deviation across seed reports, per group and metric."""
    if not reports:
        raise ValueError("need at least one report")
    rows = []
    for name in reports[0].groups:
        row = {"group": name, "n": reports[0].groups[name]["n"]}
        for metric in METRICS:
            vals = np.array([r.groups[name][metric] for r in reports])
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows


def breakdown_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def format_table(rows_by_variant: dict[str, list[dict]], groups=("overall", "tail", "head")) -> str:
    """Plain-text Overall/Tail/Head table, one line per variant."""
    header = ["variant"] + [f"{g}:{m}" for g in groups for m in ("N@10", "H@10")]
    lines = ["  ".join(f"{h:>14}" for h in header)]
    for variant, rows in rows_by_variant.items():
        by = {r["group"]: r for r in rows}
        cells = [variant]
        for g in groups:
            cells += [f"{by[g]['ndcg_at_10_mean']:.4f}", f"{by[g]['hit_at_10_mean']:.4f}"]
        lines.append("  ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)
