"""VQ / PQ / RQ-VAE quantizers producing L-level semantic IDs."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

MECHANISMS = ("vq", "pq", "rq")
_MECH_TAG = {m: i for i, m in enumerate(MECHANISMS)}


class QuantizerError(ValueError):
    pass


class RqVaeDivergence(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"RQ-VAE loss diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


# --------------------------------------------------------------------------- k-means


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points**2).sum(1)[:, None] - 2.0 * points @ centers.T + (centers**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(points: np.ndarray, k: int, iters: int = 50, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations.

    An empty cluster is re-seeded at the point farthest from its assigned
    centroid. Runs in float64 and returns float64 centroids.
    """
    if k <= 0:
        raise QuantizerError(f"K must be positive, got {k}")
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise QuantizerError("kmeans needs a non-empty (M, d) array")
    if rng is None:
        rng = np.random.default_rng(0)
    m = len(x)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(m)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(m, p=closest / total)
        else:
            idx = rng.integers(m)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j:j + 1])[:, 0])

    for _ in range(iters):
        dist = _sq_dists(x, centers)
        assign = dist.argmin(1)
        new = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[assign == j].mean(0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            point_err = dist[np.arange(m), assign]
            for j in empty:
                far = int(point_err.argmax())
                new[j] = x[far]
                point_err[far] = -1.0
        if np.allclose(new, centers, atol=0.0, rtol=0.0):
            break
        centers = new
    return centers


# --------------------------------------------------------------------------- codebooks


@dataclass
class Codebooks:
    mechanism: str
    books: np.ndarray  # (L, K, d_code) float32

    def __post_init__(self):
        self.books = np.asarray(self.books, dtype=np.float32)
        if self.mechanism not in MECHANISMS:
            raise QuantizerError(f"unknown mechanism {self.mechanism!r}")
        if self.books.ndim != 3:
            raise QuantizerError("codebooks must be (L, K, d_code)")
        if self.mechanism == "vq" and self.levels != 1:
            raise QuantizerError("vq codebooks have exactly one level")

    @property
    def levels(self) -> int:
        return self.books.shape[0]

    @property
    def size(self) -> int:
        return self.books.shape[1]

    @property
    def dim(self) -> int:
        return self.books.shape[2]


def quantize_residual(x: np.ndarray, cb: Codebooks) -> tuple[tuple[int, ...], np.ndarray]:
    """Greedy residual quantization of one vector; ties go to the lower code."""
    if cb.mechanism != "rq":
        raise QuantizerError("quantize_residual needs rq codebooks")
    codes, residuals = rq_encode(np.asarray(x, dtype=np.float64)[None, :], cb.books)
    return tuple(int(c) for c in codes[0]), residuals[0, -1]


def rq_encode(z: np.ndarray, books: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch residual quantization.

    Returns codes ``(n, L)`` and the residual *after* each level ``(n, L, d)``.
    """
    z = np.asarray(z, dtype=np.float64)
    books = np.asarray(books, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != books.shape[2]:
        raise QuantizerError(f"dimension mismatch: vectors {z.shape}, codebooks {books.shape}")
    n, levels = len(z), books.shape[0]
    codes = np.empty((n, levels), dtype=np.int64)
    residuals = np.empty((n, levels, z.shape[1]))
    r = z.copy()
    for lvl in range(levels):
        c = _sq_dists(r, books[lvl]).argmin(1)
        r = r - books[lvl][c]
        codes[:, lvl] = c
        residuals[:, lvl] = r
    return codes, residuals


# --------------------------------------------------------------------------- RQ-VAE


@dataclass
class RqVaeConfig:
    d_code: int = 32
    hidden: Optional[int] = 128
    beta: float = 0.25
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 1024
    kmeans_iters: int = 50
    identity_init: bool = False
    reset_dead_codes: bool = True
    # code 0 of every level stays the zero vector, so a level can always
    # leave the residual unchanged and residual norms never grow
    zero_code: bool = True


def _mlp(d_in: int, hidden: Optional[int], d_out: int) -> nn.Module:
    if hidden is None:
        return nn.Linear(d_in, d_out)
    return nn.Sequential(nn.Linear(d_in, hidden), nn.SiLU(), nn.Linear(hidden, d_out))


class RqVae(nn.Module):
    def __init__(self, d_in: int, levels: int, k: int, cfg: RqVaeConfig):
        super().__init__()
        self.d_in, self.levels, self.k = d_in, levels, k
        self.cfg = cfg
        self.encoder = _mlp(d_in, cfg.hidden, cfg.d_code)
        self.decoder = _mlp(cfg.d_code, cfg.hidden, d_in)
        self.codebooks = nn.Parameter(torch.zeros(levels, k, cfg.d_code))
        self.history: list[dict] = []
        if cfg.identity_init:
            if cfg.hidden is not None or cfg.d_code != d_in:
                raise QuantizerError("identity_init needs hidden=None and d_code == d_in")
            with torch.no_grad():
                for lin in (self.encoder, self.decoder):
                    lin.weight.copy_(torch.eye(d_in))
                    lin.bias.zero_()

    def quantize(self, z: torch.Tensor, codes: Optional[torch.Tensor] = None):
        """Residual quantization with straight-through output.

        ``codes`` freezes the code choice (used by gradient checks).
        Returns ``(z_st, codes, codebook_loss, commitment_loss)``.
        """
        r = z
        quant = torch.zeros_like(z)
        chosen = []
        cb_loss = z.new_zeros(())
        commit = z.new_zeros(())
        for lvl in range(self.levels):
            book = self.codebooks[lvl]
            if codes is None:
                with torch.no_grad():
                    c = torch.cdist(r, book).argmin(1)
            else:
                c = codes[:, lvl]
            q = book[c]
            cb_loss = cb_loss + ((r.detach() - q) ** 2).sum(-1).mean()
            commit = commit + ((r - q.detach()) ** 2).sum(-1).mean()
            r = r - q
            quant = quant + q
            chosen.append(c)
        z_st = z + (quant - z).detach()
        return z_st, torch.stack(chosen, 1), cb_loss, commit

    def loss_terms(self, x: torch.Tensor, codes: Optional[torch.Tensor] = None) -> dict:
        z = self.encoder(x)
        z_st, c, cb_loss, commit = self.quantize(z, codes)
        x_hat = self.decoder(z_st)
        recon = ((x_hat - x) ** 2).mean()
        commitment = self.cfg.beta * commit
        return {
            "recon": recon,
            "codebook": cb_loss,
            "commitment": commitment,
            "total": recon + cb_loss + commitment,
            "codes": c,
        }

    @torch.no_grad()
    def encode(self, x: np.ndarray) -> np.ndarray:
        t = torch.as_tensor(np.asarray(x), dtype=self.codebooks.dtype)
        return self.encoder(t).double().numpy()

    def to_codebooks(self) -> Codebooks:
        return Codebooks("rq", self.codebooks.detach().float().numpy().copy())


@torch.no_grad()
def _level_inputs(model: RqVae, x: torch.Tensor) -> list[np.ndarray]:
    z = model.encoder(x).double().numpy()
    _, res = rq_encode(z, model.codebooks.detach().double().numpy())
    return [z] + [res[:, lvl] for lvl in range(model.levels - 1)]


def train_rqvae(
    matrix: np.ndarray,
    levels: int = 4,
    k: int = 128,
    cfg: Optional[RqVaeConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> RqVae:
    """Fit an RQ-VAE; per-epoch loss components land in ``model.history``."""
    cfg = cfg or RqVaeConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if levels < 1 or k < 1:
        raise QuantizerError("levels and K must be positive")
    x_np = np.asarray(matrix, dtype=np.float32)
    n, d_in = x_np.shape
    torch.manual_seed(int(rng.integers(2**31)))
    model = RqVae(d_in, levels, k, cfg)
    x = torch.from_numpy(x_np)

    first = x[torch.from_numpy(rng.permutation(n)[: cfg.batch_size])]
    with torch.no_grad():
        r = model.encoder(first).double().numpy()
        for lvl in range(levels):
            if cfg.zero_code:
                fitted = kmeans(r, k - 1, cfg.kmeans_iters, rng) if k > 1 else np.zeros((0, r.shape[1]))
                centers = np.concatenate([np.zeros((1, r.shape[1])), fitted])
            else:
                centers = kmeans(r, k, cfg.kmeans_iters, rng)
            model.codebooks[lvl] = torch.from_numpy(centers).float()
            r = r - centers[_sq_dists(r, centers).argmin(1)]

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    for epoch in range(cfg.epochs):
        usage = np.zeros((levels, k), dtype=np.int64)
        sums = {"recon": 0.0, "codebook": 0.0, "commitment": 0.0, "total": 0.0}
        order = rng.permutation(n)
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            terms = model.loss_terms(x[idx])
            loss = terms["total"]
            if not torch.isfinite(loss):
                raise RqVaeDivergence(epoch, float(loss.detach()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            if cfg.zero_code:
                with torch.no_grad():
                    model.codebooks[:, 0] = 0.0
            for lvl in range(levels):
                usage[lvl] += np.bincount(terms["codes"][:, lvl].numpy(), minlength=k)
            for key in sums:
                sums[key] += float(terms[key].detach())
            n_batches += 1
        model.history.append({key: v / n_batches for key, v in sums.items()})
        if cfg.reset_dead_codes and (usage == 0).any() and epoch < cfg.epochs - 1:
            inputs = _level_inputs(model, x)
            with torch.no_grad():
                for lvl in range(levels):
                    dead = np.flatnonzero(usage[lvl] == 0)
                    if cfg.zero_code:
                        dead = dead[dead != 0]
                    if len(dead):
                        pick = rng.choice(n, size=len(dead), replace=len(dead) > n)
                        seeds = inputs[lvl][pick] + 1e-4 * rng.normal(size=(len(dead), cfg.d_code))
                        model.codebooks[lvl, torch.from_numpy(dead)] = torch.from_numpy(seeds).float()
    return model


def train_vq(matrix: np.ndarray, k: int, rng: Optional[np.random.Generator] = None, iters: int = 50) -> Codebooks:
    return Codebooks("vq", kmeans(matrix, k, iters, rng)[None])


def train_pq(
    matrix: np.ndarray, levels: int, k: int, rng: Optional[np.random.Generator] = None, iters: int = 50
) -> Codebooks:
    x = np.asarray(matrix, dtype=np.float64)
    if x.shape[1] % levels:
        raise QuantizerError(f"pq needs d={x.shape[1]} divisible by L={levels}")
    parts = np.split(x, levels, axis=1)
    return Codebooks("pq", np.stack([kmeans(p, k, iters, rng) for p in parts]))


# --------------------------------------------------------------------------- assignment


@dataclass
class SidAssignment:
    codes: np.ndarray  # (n_items, L)
    codebook_size: int
    mechanism: str
    collision_rate: float = 0.0
    utilization_rate: float = 0.0
    item_utilization_rate: float = 0.0

    @property
    def levels(self) -> int:
        return self.codes.shape[1]

    @property
    def n_items(self) -> int:
        return self.codes.shape[0]

    @classmethod
    def from_codes(cls, codes: np.ndarray, k: int, mechanism: str) -> "SidAssignment":
        codes = np.asarray(codes, dtype=np.int64)
        a = cls(codes=codes, codebook_size=k, mechanism=mechanism)
        a.collision_rate = collision_rate(a)
        a.utilization_rate = utilization_rate(a, a.levels, k)
        a.item_utilization_rate = len(codes) / float(k) ** a.levels
        return a

    def __getitem__(self, item: int) -> tuple[int, ...]:
        return tuple(int(c) for c in self.codes[item])


def assign_sids(model: Union[RqVae, Codebooks], matrix: np.ndarray, mechanism: str) -> SidAssignment:
    """Map every row of ``matrix`` to an L-tuple of codes; collisions are kept."""
    if mechanism not in MECHANISMS:
        raise QuantizerError(f"unknown mechanism {mechanism!r}")
    x = np.asarray(matrix, dtype=np.float64)
    if mechanism == "rq":
        if not isinstance(model, RqVae):
            raise QuantizerError("rq assignment needs a trained RqVae")
        codes, _ = rq_encode(model.encode(x.astype(np.float32)), model.codebooks.detach().double().numpy())
        return SidAssignment.from_codes(codes, model.k, "rq")
    if not isinstance(model, Codebooks) or model.mechanism != mechanism:
        raise QuantizerError(f"{mechanism} assignment needs {mechanism} codebooks")
    books = model.books.astype(np.float64)
    if mechanism == "vq":
        if x.shape[1] != model.dim:
            raise QuantizerError("dimension mismatch")
        codes = _sq_dists(x, books[0]).argmin(1)[:, None]
    else:
        if x.shape[1] != model.levels * model.dim:
            raise QuantizerError("dimension mismatch")
        parts = np.split(x, model.levels, axis=1)
        codes = np.stack([_sq_dists(p, books[lvl]).argmin(1) for lvl, p in enumerate(parts)], 1)
    return SidAssignment.from_codes(codes, model.size, mechanism)


def collision_rate(a: SidAssignment) -> float:
    """Fraction of items whose full tuple is shared with another item."""
    codes = np.asarray(a.codes)
    if len(codes) == 0:
        raise QuantizerError("empty assignment")
    _, inverse, counts = np.unique(codes, axis=0, return_inverse=True, return_counts=True)
    return float((counts[inverse.ravel()] > 1).mean())


def utilization_rate(a: SidAssignment, levels: int, k: int) -> float:
    """Distinct used tuples over the combination capacity ``K**L``."""
    codes = np.asarray(a.codes)
    if len(codes) == 0:
        raise QuantizerError("empty assignment")
    return len(np.unique(codes, axis=0)) / float(k) ** levels


# --------------------------------------------------------------------------- files


def _write_tensors(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f4", order="C")
        raw = name.encode()
        fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_tensors(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        name = fh.read(n).decode()
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape).copy()
    return out


def save_codebooks(model: Union[RqVae, Codebooks], path) -> None:
    cb = model.to_codebooks() if isinstance(model, RqVae) else model
    with open(path, "wb") as fh:
        fh.write(b"SCBK")
        fh.write(struct.pack("<BIII", _MECH_TAG[cb.mechanism], cb.levels, cb.size, cb.dim))
        fh.write(np.ascontiguousarray(cb.books, dtype="<f4").tobytes())
        if isinstance(model, RqVae):
            fh.write(b"SRQW")
            meta = json.dumps({"d_in": model.d_in, **asdict(model.cfg)}).encode()
            fh.write(struct.pack("<I", len(meta)) + meta)
            state = {k: v.detach().float().numpy() for k, v in model.state_dict().items() if k != "codebooks"}
            _write_tensors(fh, state)


def load_codebooks(path) -> Union[RqVae, Codebooks]:
    with open(path, "rb") as fh:
        raw = fh.read()
    fh = io.BytesIO(raw)
    if fh.read(4) != b"SCBK":
        raise QuantizerError(f"{path}: bad magic")
    tag, levels, k, dim = struct.unpack("<BIII", fh.read(13))
    books = np.frombuffer(fh.read(4 * levels * k * dim), dtype="<f4").reshape(levels, k, dim).copy()
    cb = Codebooks(MECHANISMS[tag], books)
    section = fh.read(4)
    if not section:
        return cb
    if section != b"SRQW":
        raise QuantizerError(f"{path}: unexpected section {section!r}")
    (n,) = struct.unpack("<I", fh.read(4))
    meta = json.loads(fh.read(n))
    d_in = meta.pop("d_in")
    model = RqVae(d_in, levels, k, RqVaeConfig(**{**meta, "identity_init": False}))
    state = {name: torch.from_numpy(arr) for name, arr in _read_tensors(fh).items()}
    state["codebooks"] = torch.from_numpy(books)
    model.load_state_dict(state)
    return model


def collision_report(a: SidAssignment) -> list[tuple[str, float]]:
    return [
        ("collision_rate", a.collision_rate),
        ("utilization_rate", a.utilization_rate),
        ("item_utilization_rate", a.item_utilization_rate),
    ]
