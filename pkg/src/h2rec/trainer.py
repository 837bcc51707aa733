"""Model initialisation from semantic artifacts, training loop, checkpoints, gradient checks."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch

from .data import Batch, SplitDataset, make_batches, popularity_partition
from .evaluation import evaluate, model_scorer
from .losses import (
    alignment_pool,
    code_guided_alignment_loss,
    masked_granularity_loss,
    positive_mask,
    rec_loss,
    total_loss,
)
from .model import H2Rec, ModelConfig, read_tensor_file, write_tensor_file
from .quantizer import Codebooks, SidAssignment
from .semantics import reduce_dims

log = logging.getLogger(__name__)

ABLATIONS = ("no_fn", "no_mca", "no_ca", "no_msg", "hid_only", "sid_only")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 256
    max_len: int = 50
    d: int = 64
    L: int = 4
    K: int = 128
    p: int = 3
    o: int = 3
    beta: float = 0.5
    gamma: float = 0.3
    tau: float = 0.1
    n_neg: int = 1
    seed: int = 42
    no_fn: bool = False
    no_mca: bool = False
    no_ca: bool = False
    no_msg: bool = False
    hid_only: bool = False
    sid_only: bool = False
    patience: int = 10
    n_layers: int = 2
    n_heads: int = 2
    dropout: float = 0.2
    grad_clip: float = 5.0
    pool_cap: int = 256
    eval_negatives: int = 99
    eval_every: int = 1
    hid_init_scale: float = 0.1

    def validate(self) -> "TrainConfig":
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be non-negative")
        if not 1 <= self.p <= self.L:
            raise ConfigError(f"p={self.p} must lie in [1, L={self.L}]")
        if self.o < 0:
            raise ConfigError("o must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.hid_only and self.sid_only:
            raise ConfigError("hid_only and sid_only are mutually exclusive")
        for name in ("epochs", "batch_size", "d", "L", "K", "n_neg", "n_layers", "n_heads", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        for name in ABLATIONS:
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a boolean")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    # effective switches
    @property
    def use_ca(self) -> bool:
        return not (self.no_ca or self.hid_only or self.sid_only) and self.beta > 0

    @property
    def use_msg(self) -> bool:
        return not (self.no_msg or self.hid_only) and self.gamma > 0

    def model_config(self, n_items: int) -> ModelConfig:
        return ModelConfig(
            n_items=n_items, levels=self.L, codebook_size=self.K, d=self.d, max_len=self.max_len,
            n_layers=self.n_layers, n_heads=self.n_heads, dropout=self.dropout,
            no_fn=self.no_fn, no_mca=self.no_mca, hid_only=self.hid_only, sid_only=self.sid_only,
        )


def project_codebooks(books: np.ndarray, d: int) -> np.ndarray:
    """Fit ``(L, K, d_code)`` codebooks into ``d`` columns.

    Wider codebooks are projected onto the top-``d`` right singular directions
    of all stacked code vectors; narrower ones are zero-padded.
    """
    books = np.asarray(books, dtype=np.float64)
    levels, k, d_code = books.shape
    if d_code == d:
        return books.copy()
    if d_code < d:
        out = np.zeros((levels, k, d))
        out[..., :d_code] = books
        return out
    flat = books.reshape(-1, d_code)
    _, _, vt = np.linalg.svd(flat, full_matrices=False)
    return (flat @ vt[:d].T).reshape(levels, k, d)


def init_model(
    split: SplitDataset,
    semantic: Optional[np.ndarray],
    sids: SidAssignment,
    codebooks: Optional[Codebooks],
    cfg: TrainConfig,
    seed: Optional[int] = None,
) -> H2Rec:
    """Build the network; HID rows from reduced semantics, code tables from the quantizer."""
    cfg.validate()
    n = split.n_items
    if sids.n_items != n:
        raise ConfigError(f"SID assignment covers {sids.n_items} items, catalog has {n}")
    if sids.levels != cfg.L or sids.codebook_size != cfg.K:
        raise ConfigError(f"SIDs are {sids.levels}x{sids.codebook_size}, config asks {cfg.L}x{cfg.K}")
    torch.manual_seed(cfg.seed if seed is None else seed)
    model = H2Rec(cfg.model_config(n), sids.codes)
    with torch.no_grad():
        if semantic is not None:
            if len(semantic) != n:
                raise ConfigError(f"semantic matrix has {len(semantic)} rows, catalog has {n}")
            reduced = reduce_dims(semantic, cfg.d).values * cfg.hid_init_scale
            model.item_emb.weight[:n] = torch.from_numpy(reduced)
        model.item_emb.weight[n].zero_()
        if codebooks is not None:
            if codebooks.levels != cfg.L or codebooks.size != cfg.K:
                raise ConfigError("codebook shape does not match config")
            model.code_emb.copy_(torch.from_numpy(project_codebooks(codebooks.books, cfg.d)).float())
    return model


@dataclass
class StepTerms:
    total: torch.Tensor
    l_rec: torch.Tensor
    l_ca: Optional[torch.Tensor]
    l_msg: Optional[torch.Tensor]


def compute_losses(
    model: H2Rec,
    batch: Batch,
    cfg: TrainConfig,
    mask_level: Optional[int],
    pool: Optional[np.ndarray],
) -> StepTerms:
    """All loss terms for one batch; skipped terms come back as ``None``."""
    seq = torch.as_tensor(batch.sequences)
    mask = torch.as_tensor(batch.pad_mask)
    out = model(seq, mask, mask_level if cfg.use_msg else None)
    items = torch.cat([torch.as_tensor(batch.targets)[..., None], torch.as_tensor(batch.negatives)], dim=-1)
    scores = model.score(out, items)
    l_rec = rec_loss(scores[..., 0], scores[..., 1:], mask)

    l_ca = None
    if cfg.use_ca and pool is not None and len(pool):
        positives = positive_mask(pool, batch.sequences, batch.pad_mask, model.sids.numpy(), cfg.p, cfg.o)
        pool_t = torch.as_tensor(pool)
        alpha_bar = out.alpha.mean(0, keepdim=True)
        e_sid = model.item_sid_embeddings(pool_t[None], alpha_bar)[0]
        e_hid = model.item_emb(pool_t)
        l_ca = code_guided_alignment_loss(e_sid, e_hid, torch.from_numpy(positives), cfg.tau)

    l_msg = None
    if cfg.use_msg and out.u_sid_masked is not None:
        l_msg = masked_granularity_loss(out.u_sid, out.u_sid_masked, cfg.tau)

    total, _ = total_loss(l_rec, l_ca, l_msg, cfg.beta, cfg.gamma)
    return StepTerms(total, l_rec, l_ca, l_msg)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_ndcg: float = -1.0

    def steps_csv(self) -> str:
        lines = ["step,l_rec,l_ca,l_msg,total"]
        for r in self.steps:
            lines.append(f"{r['step']},{r['l_rec']:.8f},{r['l_ca']:.8f},{r['l_msg']:.8f},{r['total']:.8f}")
        return "\n".join(lines) + "\n"


def _item(t: Optional[torch.Tensor]):
    return None if t is None else float(t.detach())


class Trainer:
    def __init__(self, model: H2Rec, split: SplitDataset, cfg: TrainConfig, rng: Optional[np.random.Generator] = None):
        self.model = model
        self.split = split
        self.cfg = cfg.validate()
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.epoch = 0
        self.step_count = 0
        self.log = TrainLog()
        self.partition = popularity_partition(split)
        self._best_state: Optional[dict] = None

    def sample_step_randomness(self, batch: Batch) -> tuple[Optional[int], Optional[np.ndarray]]:
        level = int(self.rng.integers(self.cfg.L)) if self.cfg.use_msg else None
        pool = alignment_pool(batch.sequences, batch.pad_mask, self.cfg.pool_cap, self.rng) if self.cfg.use_ca else None
        return level, pool

    def train_step(self, batch: Batch) -> dict:
        self.model.train()
        level, pool = self.sample_step_randomness(batch)
        terms = compute_losses(self.model, batch, self.cfg, level, pool)
        if not torch.isfinite(terms.total):
            raise TrainingDiverged(
                f"non-finite loss at epoch {self.epoch} step {self.step_count}: "
                f"l_rec={float(terms.l_rec.detach())} l_ca={_item(terms.l_ca)} l_msg={_item(terms.l_msg)}"
            )
        self.optimizer.zero_grad()
        terms.total.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        row = {
            "step": self.step_count,
            "l_rec": float(terms.l_rec.detach()),
            "l_ca": float(terms.l_ca.detach()) if terms.l_ca is not None else 0.0,
            "l_msg": float(terms.l_msg.detach()) if terms.l_msg is not None else 0.0,
            "total": float(terms.total.detach()),
        }
        self.log.steps.append(row)
        self.step_count += 1
        return row

    def run_epoch(self) -> dict:
        rows = [self.train_step(b) for b in make_batches(self.split, self.cfg.max_len, self.cfg.batch_size, self.cfg.n_neg, self.rng)]
        self.epoch += 1
        summary = {"epoch": self.epoch}
        for key in ("l_rec", "l_ca", "l_msg", "total"):
            summary[key] = float(np.mean([r[key] for r in rows])) if rows else 0.0
        return summary

    def validate(self) -> dict:
        report = evaluate(
            model_scorer(self.model), self.split, self.partition, self.cfg.eval_negatives,
            seed=self.cfg.seed, role="valid", max_len=self.cfg.max_len,
        )
        return report.groups["overall"]

    def fit(self) -> TrainLog:
        """Train with early stopping on validation N@10; restores the best weights."""
        while self.epoch < self.cfg.epochs:
            summary = self.run_epoch()
            if self.epoch % self.cfg.eval_every == 0 or self.epoch == self.cfg.epochs:
                val = self.validate()
                summary["val_hit_at_10"] = val["hit_at_10"]
                summary["val_ndcg_at_10"] = val["ndcg_at_10"]
                if val["ndcg_at_10"] > self.log.best_ndcg:
                    self.log.best_ndcg = val["ndcg_at_10"]
                    self.log.best_epoch = self.epoch
                    self._best_state = copy.deepcopy(self.model.state_dict())
                log.info("epoch %d loss %.4f val N@10 %.4f", self.epoch, summary["total"], val["ndcg_at_10"])
                self.log.epochs.append(summary)
                if self.epoch - self.log.best_epoch >= self.cfg.patience:
                    break
            else:
                self.log.epochs.append(summary)
        if self._best_state is not None:
            self.model.load_state_dict(self._best_state)
        return self.log

    # ------------------------------------------------------------ checkpoints

    def save_checkpoint(self, path) -> None:
        tensors = {f"model/{k}": v.detach().numpy() for k, v in self.model.state_dict().items()}
        opt_state = self.optimizer.state_dict()
        steps = {}
        for idx, st in opt_state["state"].items():
            tensors[f"optim/{idx}/exp_avg"] = st["exp_avg"].numpy()
            tensors[f"optim/{idx}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
            steps[str(idx)] = float(st["step"])
        meta = {
            "config": asdict(self.cfg),
            "config_hash": self.cfg.config_hash(),
            "n_items": self.split.n_items,
            "epoch": self.epoch,
            "step": self.step_count,
            "optim_steps": steps,
            "np_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
            "best_epoch": self.log.best_epoch,
            "best_ndcg": self.log.best_ndcg,
        }
        write_tensor_file(path, tensors, meta)

    @classmethod
    def from_checkpoint(cls, path, split: SplitDataset, cfg: Optional[TrainConfig] = None) -> "Trainer":
        ckpt = load_checkpoint(path, cfg)
        cfg = ckpt.config
        model = ckpt.build_model()
        trainer = cls(model, split, cfg)
        trainer.epoch = ckpt.meta["epoch"]
        trainer.step_count = ckpt.meta["step"]
        trainer.log.best_epoch = ckpt.meta["best_epoch"]
        trainer.log.best_ndcg = ckpt.meta["best_ndcg"]
        trainer.rng.bit_generator.state = ckpt.meta["np_rng"]
        torch.set_rng_state(torch.from_numpy(np.frombuffer(bytes.fromhex(ckpt.meta["torch_rng"]), dtype=np.uint8).copy()))
        opt_state = trainer.optimizer.state_dict()
        for idx_s, step in ckpt.meta["optim_steps"].items():
            idx = int(idx_s)
            opt_state["state"][idx] = {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(ckpt.tensors[f"optim/{idx}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim/{idx}/exp_avg_sq"]),
            }
        trainer.optimizer.load_state_dict(opt_state)
        return trainer


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    def build_model(self) -> H2Rec:
        cfg = self.config
        n = self.meta["n_items"]
        sids = self.tensors["model/sids"][:n].astype(np.int64)
        model = H2Rec(cfg.model_config(n), sids)
        state = {k[len("model/"):]: torch.from_numpy(v) for k, v in self.tensors.items() if k.startswith("model/")}
        state["sids"] = state["sids"].long()
        model.load_state_dict(state)
        return model


def load_checkpoint(path, cfg: Optional[TrainConfig] = None) -> Checkpoint:
    tensors, meta = read_tensor_file(path)
    if "config_hash" not in meta:
        raise ValueError(f"{path}: checkpoint carries no config hash")
    if cfg is not None and cfg.config_hash() != meta["config_hash"]:
        raise ConfigError(
            f"{path}: checkpoint config hash {meta['config_hash']} does not match supplied config {cfg.config_hash()}"
        )
    return Checkpoint(tensors, meta)


def train(
    split: SplitDataset,
    cfg: TrainConfig,
    semantic: Optional[np.ndarray],
    sids: SidAssignment,
    codebooks: Optional[Codebooks] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[H2Rec, TrainLog]:
    model = init_model(split, semantic, sids, codebooks, cfg)
    trainer = Trainer(model, split, cfg, rng)
    trainer.fit()
    return model, trainer.log


# ------------------------------------------------------------------ gradient checks

PARAM_GROUPS = {
    "item_emb": ("item_emb.",),
    "code_emb": ("code_emb",),
    "fusion": ("fuse1.", "fuse2.", "b_prior"),
    "cross_attention": ("w_q.", "w_k.", "w_v."),
    "mask_token": ("mask_token",),
    "enc_sid": ("enc_sid.",),
    "enc_hid": ("enc_hid.",),
}


def tiny_instance(seed: int = 0, n_items: int = 12, users: int = 2, t: int = 4, levels: int = 2, k: int = 4, d: int = 8):
    """Two-user fixture for gradient checks: model (float64, no dropout), batch, config."""
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(d=d, L=levels, K=k, p=1, o=1, max_len=t, n_heads=2, dropout=0.0, seed=seed, n_neg=2, beta=0.5, gamma=0.3, tau=0.5)
    torch.manual_seed(seed)
    sids = rng.integers(0, k, size=(n_items, levels))
    model = H2Rec(cfg.model_config(n_items), sids).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
        model.item_emb.weight[n_items].zero_()
    seqs = np.full((users, t), n_items, dtype=np.int64)
    seqs[0] = rng.choice(n_items, t, replace=False)
    seqs[1, 1:] = rng.choice(n_items, t - 1, replace=False)
    targets = np.where(seqs != n_items, rng.integers(0, n_items, size=(users, t)), n_items)
    mask = seqs != n_items
    from .data import sample_negatives

    negatives = sample_negatives(np.where(mask, targets, 0), n_items, cfg.n_neg, rng)
    negatives[~mask] = n_items
    batch = Batch(seqs, mask, targets, negatives, np.full(users, t - 1), np.arange(users))
    return model, batch, cfg


def grad_check(
    model: Optional[H2Rec] = None,
    batch: Optional[Batch] = None,
    cfg: Optional[TrainConfig] = None,
    term: str = "total",
    coords_per_group: int = 10,
    h: float = 1e-3,
    seed: int = 0,
    tol: float = 1e-3,
) -> dict:
    """Central finite differences vs autograd on a float64 model.

    Returns ``{group: max_relative_error}`` plus ``"failures"``. Coordinates
    are drawn among those the loss actually depends on (non-zero analytic
    gradient) when any exist, otherwise uniformly.
    """
    if model is None:
        model, batch, cfg = tiny_instance(seed)
    model.eval()
    rng = np.random.default_rng(seed + 1)
    level = 0 if cfg.use_msg else None
    pool = np.unique(batch.sequences[batch.pad_mask]) if cfg.use_ca else None

    def loss() -> torch.Tensor:
        t = compute_losses(model, batch, cfg, level, pool)
        value = {"total": t.total, "rec": t.l_rec, "ca": t.l_ca, "msg": t.l_msg}[term]
        if value is None:
            raise ValueError(f"loss term {term!r} is switched off in this config")
        return value

    model.zero_grad()
    loss().backward()
    named = dict(model.named_parameters())
    report: dict = {"failures": []}
    for group, prefixes in PARAM_GROUPS.items():
        params = [(n, p) for n, p in named.items() if n.startswith(prefixes)]
        if not params:
            continue
        flat = [(n, p, i) for n, p in params for i in range(p.numel())]
        grads = np.array([float(p.grad.reshape(-1)[i]) if p.grad is not None else 0.0 for n, p, i in flat])
        live = np.flatnonzero(np.abs(grads) > 1e-10)
        candidates = live if len(live) else np.arange(len(flat))
        picks = rng.choice(candidates, size=min(coords_per_group, len(candidates)), replace=False)
        worst = 0.0
        for j in picks:
            name, p, i = flat[j]
            view = p.data.reshape(-1)
            orig = float(view[i])
            with torch.no_grad():
                view[i] = orig + h
                up = float(loss())
                view[i] = orig - h
                down = float(loss())
                view[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[j]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
            if err > tol:
                report["failures"].append(f"{group}:{name}[{i}] analytic={analytic:.6g} numeric={numeric:.6g}")
        report[group] = worst
    return report
