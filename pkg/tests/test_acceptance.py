"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train the desk-scale benchmark (five variants, three seeds)
and take about 25 minutes on a single CPU core.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from h2rec.benchmark import mean_metric, prepare_bench, run_variant
from h2rec.cli import run
from h2rec.data import leave_one_out_split, popularity_partition, synthesize_dataset
from h2rec.evaluation import evaluate
from h2rec.losses import code_guided_alignment_loss, masked_granularity_loss, rec_loss, total_loss
from h2rec.model import H2Rec, ModelConfig, fuse_sid_sequence
from h2rec.quantizer import RqVaeConfig, SidAssignment, assign_sids, kmeans, rq_encode, train_rqvae
from h2rec.trainer import grad_check, tiny_instance

SEEDS = (42, 43, 44)


# ----------------------------------------------------------------- 1. gradients

def test_c1_gradient_suite(criterion):
    start = time.perf_counter()
    worst, failures, groups = 0.0, [], set()
    for term in ("rec", "ca", "msg", "total"):
        model, batch, cfg = tiny_instance(0)
        assert (batch.sequences.shape, cfg.L, cfg.K, cfg.d) == ((2, 4), 2, 4, 8)
        rep = grad_check(model, batch, cfg, term=term)
        failures += rep.pop("failures")
        groups |= set(rep)
        worst = max(worst, max(rep.values()))
    elapsed = time.perf_counter() - start
    needed = {"fusion", "cross_attention", "enc_sid", "enc_hid", "item_emb", "code_emb"}
    ok = not failures and worst <= 1e-3 and elapsed < 60 and needed <= groups
    criterion("C1", "gradient suite", ok, f"max rel err {worst:.2e} over {sorted(groups)}, {elapsed:.1f}s")


# ----------------------------------------------------------------- 2. loss identities

def _zeroed_fusion_model(levels=4):
    model = H2Rec(ModelConfig(n_items=6, levels=levels, codebook_size=3, d=8), np.zeros((6, levels), dtype=int))
    with torch.no_grad():
        for lin in (model.fuse1, model.fuse2):
            lin.weight.zero_()
            lin.bias.zero_()
        model.b_prior.zero_()
    return model.double()


def test_c2_loss_identities(criterion):
    rng = np.random.default_rng(0)
    t = lambda x: torch.as_tensor(np.asarray(x, dtype=np.float64))
    checks = {}

    s, alpha = _zeroed_fusion_model().fusion_weights(t(rng.normal(size=(5, 8))))
    checks["a"] = bool((s == 0).all()) and bool((alpha == 0.25).all())

    a, b = t(rng.normal(size=(6, 4))), t(rng.normal(size=(6, 4)))
    checks["b"] = abs(float(code_guided_alignment_loss(a, b, torch.ones(6, 6, dtype=torch.bool), 0.1))) < 1e-12

    u = t(rng.normal(size=(1, 4)))
    checks["c"] = float(masked_granularity_loss(u, t(rng.normal(size=(1, 4))), 0.1)) == 0.0

    scores = t(rng.normal(size=(3, 5)))
    checks["d"] = abs(float(rec_loss(scores, scores[..., None].repeat(1, 1, 4))) - math.log(2)) <= 1e-6

    lr, lc, lm = t(0.625), t(1.5), t(2.25)
    total, _ = total_loss(lr, lc, lm, 0.5, 0.25)
    checks["e"] = float(total) == 0.625 + 0.5 * 1.5 + 0.25 * 2.25

    criterion("C2", "loss identities", all(checks.values()), " ".join(f"({k}){'ok' if v else 'x'}" for k, v in checks.items()))


# ----------------------------------------------------------------- 3. architecture

def _random_model(t=8, seed=0):
    torch.manual_seed(seed)
    sids = np.random.default_rng(seed).integers(0, 5, size=(20, 3))
    model = H2Rec(ModelConfig(n_items=20, levels=3, codebook_size=5, d=8, max_len=t, dropout=0.0), sids).double().eval()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
        model.item_emb.weight[20].zero_()
    return model


def test_c3_architectural_equivalences(criterion):
    checks = {}
    rng = np.random.default_rng(3)

    model = _random_model()
    with torch.no_grad():
        model.w_v.weight.zero_()
    seq = torch.as_tensor(rng.integers(0, 20, size=(4, 8)))
    seq[0, :3] = 20
    mask = seq != 20
    checks["W^V=0"] = torch.equal(model(seq, mask).e_fused_seq, model.item_emb(seq) * mask[..., None])

    g = torch.randn(3, 3, 8, 8, dtype=torch.float64)
    one_hot = [torch.equal(fuse_sid_sequence(g, torch.eye(3, dtype=torch.float64)[[lvl] * 3]), g[:, lvl]) for lvl in range(3)]
    checks["one-hot alpha"] = all(one_hot)

    model = _random_model(seed=1)
    seq = torch.as_tensor(rng.integers(0, 20, size=(3, 8)))
    mask = torch.ones_like(seq, dtype=torch.bool)
    base = model(seq, mask)
    probes = rng.choice(7, size=5, replace=False)  # the last item drives alpha, so probe earlier slots
    causal = []
    for pos in probes:
        seq2 = seq.clone()
        seq2[:, pos] = (seq2[:, pos] + 1) % 20
        out = model(seq2, mask)
        same = torch.equal(base.h_sid[:, :pos], out.h_sid[:, :pos]) and torch.equal(base.h_hid[:, :pos], out.h_hid[:, :pos])
        moved = not torch.allclose(base.h_hid[:, pos:], out.h_hid[:, pos:])
        causal.append(same and moved)
    checks[f"causality@{sorted(probes.tolist())}"] = all(causal)

    criterion("C3", "architectural equivalences", all(checks.values()), ", ".join(f"{k} {'ok' if v else 'x'}" for k, v in checks.items()))


# ----------------------------------------------------------------- 4. quantizer

def test_c4_quantizer_suite(criterion):
    checks = {}
    rng = np.random.default_rng(0)

    ds, sem, truth = synthesize_dataset(n_users=50, n_items=400, n_clusters=20, d_sem=32, noise=0.0, rng=np.random.default_rng(1))
    model = train_rqvae(sem, 3, 24, RqVaeConfig(d_code=16, hidden=64, epochs=20), np.random.default_rng(0))
    books = model.codebooks.detach().double().numpy()
    z = np.concatenate([model.encode(rng.normal(size=(500, 32))), rng.normal(size=(500, 16))])
    _, res = rq_encode(z, books)
    norms = np.concatenate([np.linalg.norm(z, axis=1)[:, None], np.linalg.norm(res, axis=2)], 1)
    checks["residual norms"] = len(z) == 1000 and bool((np.diff(norms, axis=1) <= 1e-12).all())

    brute = True
    for levels, k, n in itertools.product((1, 2, 3), (2, 3), (1, 7, 25)):
        codes = rng.integers(0, k, size=(n, levels))
        a = SidAssignment.from_codes(codes, k, "rq")
        tuples = [tuple(r) for r in codes.tolist()]
        coll = sum(tuples.count(t) > 1 for t in tuples) / n
        util = len(set(tuples)) / len(list(itertools.product(range(k), repeat=levels)))
        brute &= math.isclose(a.collision_rate, coll) and math.isclose(a.utilization_rate, util)
    checks["collision/utilization"] = brute

    pts = rng.normal(size=(9, 3))
    centers = kmeans(pts, 9, rng=np.random.default_rng(0))
    gaps = np.linalg.norm(centers[:, None] - pts[None], axis=-1)
    same_set = gaps.min(0).max() <= 1e-6 and gaps.min(1).max() <= 1e-6
    mean_ok = np.abs(kmeans(pts, 1)[0] - pts.mean(0)).max() <= 1e-6
    checks["k-means closed forms"] = bool(same_set and mean_ok)

    a = assign_sids(model, sem, "rq")
    c1 = a.codes[:, 0]
    purity = sum(np.bincount(truth.item_cluster[c1 == c]).max() for c in np.unique(c1)) / len(c1)
    checks[f"purity {purity:.3f}"] = purity >= 0.95

    criterion("C4", "quantizer suite", all(checks.values()), ", ".join(f"{k} {'ok' if v else 'x'}" for k, v in checks.items()))


# ----------------------------------------------------------------- 5 + 6. benchmark

@pytest.fixture(scope="module")
def bench():
    torch.set_num_threads(1)
    start = time.perf_counter()
    data = prepare_bench()
    results = {v: {} for v in ("hid_only", "sid_only", "full", "no_ca", "no_mca")}
    for v in ("hid_only", "sid_only", "full"):
        results[v][42] = run_variant(data, v, 42)
    seed42_seconds = time.perf_counter() - start
    for seed in SEEDS[1:]:
        for v in ("hid_only", "sid_only", "full"):
            results[v][seed] = run_variant(data, v, seed)
    for v in ("no_ca", "no_mca"):
        for seed in SEEDS:
            results[v][seed] = run_variant(data, v, seed)
    return results, seed42_seconds


def _h(rep, group):
    return rep.groups[group]["hit_at_10"]


@pytest.mark.slow
def test_c5_directional_seesaw(bench, criterion):
    results, seconds = bench
    hid, sid, full = (results[v][42] for v in ("hid_only", "sid_only", "full"))
    checks = {
        "a": _h(hid, "head") > _h(sid, "head"),
        "b": _h(sid, "tail") > _h(hid, "tail"),
        "c-head": _h(full, "head") >= max(_h(hid, "head"), _h(sid, "head")) - 0.01,
        "c-tail": _h(full, "tail") >= max(_h(hid, "tail"), _h(sid, "tail")) - 0.01,
    }
    overall = {v: mean_metric(list(results[v].values()), "overall", "ndcg_at_10") for v in ("hid_only", "sid_only", "full")}
    checks["c-overall"] = overall["full"] > max(overall["hid_only"], overall["sid_only"])
    checks["time"] = seconds <= 15 * 60
    detail = (
        f"seed 42 head H@10 hid/sid/full {_h(hid, 'head'):.4f}/{_h(sid, 'head'):.4f}/{_h(full, 'head'):.4f}; "
        f"tail {_h(hid, 'tail'):.4f}/{_h(sid, 'tail'):.4f}/{_h(full, 'tail'):.4f}; "
        f"3-seed overall N@10 {overall['hid_only']:.4f}/{overall['sid_only']:.4f}/{overall['full']:.4f}; "
        f"seed-42 sweep {seconds:.0f}s; parts " + " ".join(f"{k}:{'ok' if v else 'x'}" for k, v in checks.items())
    )
    criterion("C5", "directional seesaw", all(checks.values()), detail)


@pytest.mark.slow
def test_c6_ablation_ordering(bench, criterion):
    results, _ = bench
    m = lambda v, g: mean_metric(list(results[v].values()), g, "ndcg_at_10")
    ca_gap = m("full", "tail") - m("no_ca", "tail")
    mca_gap = m("full", "head") - m("no_mca", "head")
    ok = ca_gap > 0.005 and mca_gap > 0.005
    criterion("C6", "ablation ordering", ok,
              f"3-seed tail N@10 full-no_ca {ca_gap:+.4f}; head N@10 full-no_mca {mca_gap:+.4f} (need > 0.005 each)")


# ----------------------------------------------------------------- 7. metric oracles

def test_c7_metric_oracles(criterion):
    ds, _, _ = synthesize_dataset(n_users=3000, n_items=500, n_clusters=10, d_sem=8, rng=np.random.default_rng(7))
    split = leave_one_out_split(ds)
    part = popularity_partition(split)
    rng = np.random.default_rng(0)
    rand = evaluate(lambda s, c: rng.random(c.shape), split, part, 99, seed=0).groups["overall"]
    oracle = evaluate(lambda s, c: (np.arange(c.shape[1]) == 0) * 1.0 + np.zeros(c.shape), split, part, 99, seed=0)
    perfect = all(g["hit_at_10"] == 1.0 and g["ndcg_at_10"] == 1.0 for g in oracle.groups.values() if g["n"])
    ok = rand["n"] >= 2000 and abs(rand["hit_at_10"] - 0.1) <= 0.02 and abs(rand["ndcg_at_10"] - 0.0454) <= 0.01 and perfect
    criterion("C7", "metric oracles", ok,
              f"random H@10 {rand['hit_at_10']:.4f} N@10 {rand['ndcg_at_10']:.4f} over {rand['n']} users; oracle all 1.0: {perfect}")


# ----------------------------------------------------------------- 8. determinism

def _pipeline(root, synth_cfg, train_cfg):
    root.mkdir()
    (root / "synth.json").write_text(json.dumps(synth_cfg))
    (root / "train.json").write_text(json.dumps(train_cfg))
    steps = [
        ["synth", "--config", str(root / "synth.json"), "--out", str(root / "data")],
        ["train-quantizer", "--emb", str(root / "data/semantic.semb"), "--L", "2", "--K", "8", "--epochs", "20",
         "--out", str(root / "sid")],
        ["ablate", "--config", str(root / "train.json"), "--data", str(root / "data"), "--sids", str(root / "sid/sids.tsv"),
         "--variants", "no_ca,no_mca,hid_only,sid_only", "--seeds", "42,43", "--out", str(root / "abl")],
        ["report", str(root / "abl/runs"), "--out", str(root / "report")],
    ]
    return all(run(argv) == 0 for argv in steps)


def test_c8_determinism(tmp_path, criterion):
    synth_cfg = {"n_users": 300, "n_items": 150, "n_clusters": 6, "d_sem": 16}
    train_cfg = {"d": 16, "L": 2, "K": 8, "p": 1, "max_len": 10, "epochs": 4, "eval_every": 2, "eval_negatives": 50}
    ok_runs = _pipeline(tmp_path / "a", synth_cfg, train_cfg) and _pipeline(tmp_path / "b", synth_cfg, train_cfg)
    files = ["report/report.csv", "report/report.json", "abl/ablation.csv", "sid/sids.tsv"]
    same = ok_runs and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    criterion("C8", "determinism", same, f"byte-identical {', '.join(files)} across two pipeline runs: {same}")
