"""Desk-scale head/tail benchmark on the synthetic corpus.

One function builds the shared artifacts (corpus, split, quantizer, SIDs),
another trains and scores a variant for a seed. The settings below keep a
single-seed sweep of the three headline variants inside a few minutes on one
CPU core.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .data import PopularityPartition, SplitDataset, leave_one_out_split, popularity_partition, synthesize_dataset
from .evaluation import MetricsReport, evaluate, model_scorer
from .quantizer import Codebooks, RqVaeConfig, SidAssignment, assign_sids, train_rqvae
from .trainer import ABLATIONS, TrainConfig, Trainer, init_model

log = logging.getLogger(__name__)

# small model, short sequences; beta is the top of the searched weight grid
BENCH_CONFIG = TrainConfig(
    d=32, L=3, K=32, p=1, o=3, max_len=20, epochs=60, eval_every=2, patience=10, beta=0.9, gamma=0.3,
)
BENCH_QUANTIZER = {"levels": 3, "k": 32, "epochs": 200, "seed": 0}


@dataclass
class BenchData:
    split: SplitDataset
    partition: PopularityPartition
    semantic: np.ndarray
    sids: SidAssignment
    codebooks: Codebooks


def prepare_bench(data_seed: int = 42, quantizer: Optional[dict] = None, **synth) -> BenchData:
    """Synthesize the corpus and fit the RQ-VAE once; shared by every run."""
    q = {**BENCH_QUANTIZER, **(quantizer or {})}
    ds, semantic, _ = synthesize_dataset(rng=np.random.default_rng(data_seed), **synth)
    split = leave_one_out_split(ds)
    rq = train_rqvae(semantic, q["levels"], q["k"], RqVaeConfig(epochs=q["epochs"]), np.random.default_rng(q["seed"]))
    sids = assign_sids(rq, semantic, "rq")
    log.info("SIDs %dx%d collision rate %.4f", q["levels"], q["k"], sids.collision_rate)
    return BenchData(split, popularity_partition(split), semantic, sids, rq.to_codebooks())


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    flags = {name: False for name in ABLATIONS}
    if variant != "full":
        for f in variant.split("+"):
            if f not in ABLATIONS:
                raise ValueError(f"unknown variant {f!r}")
            flags[f] = True
    return replace(base, seed=seed, **flags).validate()


def run_variant(data: BenchData, variant: str, seed: int, base: TrainConfig = BENCH_CONFIG) -> MetricsReport:
    """Train one variant from scratch and score it on the test split (99 negatives)."""
    cfg = variant_config(base, variant, seed)
    torch.manual_seed(seed)
    model = init_model(data.split, data.semantic, data.sids, data.codebooks, cfg)
    trainer = Trainer(model, data.split, cfg, np.random.default_rng(seed))
    trainer.fit()
    report = evaluate(model_scorer(model), data.split, data.partition, cfg.eval_negatives,
                      seed=seed, max_len=cfg.max_len)
    log.info("%s seed %d: best epoch %d, test N@10 %.4f", variant, seed, trainer.log.best_epoch,
             report.groups["overall"]["ndcg_at_10"])
    return report


def run_grid(
    data: BenchData, variants: Sequence[str], seeds: Sequence[int], base: TrainConfig = BENCH_CONFIG
) -> dict[str, list[MetricsReport]]:
    return {v: [run_variant(data, v, s, base) for s in seeds] for v in variants}


def mean_metric(reports: Sequence[MetricsReport], group: str, metric: str) -> float:
    return float(np.mean([r.groups[group][metric] for r in reports]))
