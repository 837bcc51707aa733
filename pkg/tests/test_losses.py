import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from h2rec.losses import (
    alignment_pool,
    build_positive_set,
    code_guided_alignment_loss,
    masked_granularity_loss,
    pairwise_alignment_loss,
    positive_mask,
    rec_loss,
    total_loss,
)


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# ----------------------------------------------------------------- ranking loss

def test_equal_scores_give_ln2():
    s = t64(np.random.default_rng(0).normal(size=(4, 5)))
    assert float(rec_loss(s, s[..., None].repeat(1, 1, 3))) == pytest.approx(math.log(2), abs=1e-12)


def test_large_margin_goes_to_zero():
    assert float(rec_loss(t64([50.0]), t64([[0.0]]))) < 1e-20


def test_single_pair_margin_one():
    assert float(rec_loss(t64([1.0]), t64([[0.0]]))) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert math.log(1 + math.exp(-1)) == pytest.approx(0.3133, abs=1e-4)


def test_rec_loss_ignores_invalid_positions():
    pos = t64([[1.0, 5.0]])
    neg = t64([[[0.0], [-100.0]]])
    valid = torch.tensor([[True, False]])
    assert float(rec_loss(pos, neg, valid)) == pytest.approx(math.log(1 + math.exp(-1)))
    assert float(rec_loss(pos, neg, torch.zeros_like(valid))) == 0.0


# ----------------------------------------------------------------- 1-to-1 alignment

def test_pairwise_alignment_hand_value():
    e = t64(np.eye(2))
    assert float(pairwise_alignment_loss(e, e, tau=1.0)) == pytest.approx(-1.0, abs=1e-12)


def test_pairwise_alignment_scale_invariance_and_tau_limit():
    rng = np.random.default_rng(1)
    a, b = t64(rng.normal(size=(5, 4))), t64(rng.normal(size=(5, 4)))
    assert float(pairwise_alignment_loss(a, b, 0.3)) == pytest.approx(float(pairwise_alignment_loss(3 * a, 0.5 * b, 0.3)))
    assert float(pairwise_alignment_loss(a, b, 1e9)) == pytest.approx(math.log(4), abs=1e-6)


def test_pairwise_alignment_errors():
    with pytest.raises(ValueError):
        pairwise_alignment_loss(t64([[1.0, 0.0]]), t64([[1.0, 0.0]]), 0.1)
    with pytest.raises(ValueError):
        pairwise_alignment_loss(t64(np.eye(2)), t64(np.eye(2)), 0.0)


# ----------------------------------------------------------------- positive sets

def _window_oracle(anchor, sequences, pad_mask, o):
    found = set()
    for row, valid in zip(sequences, pad_mask):
        items = [int(x) for x, v in zip(row, valid) if v]
        for pos, x in enumerate(items):
            if x != anchor:
                continue
            for k in range(max(0, pos - o), min(len(items), pos + o + 1)):
                if k != pos:
                    found.add(items[k])
    return found


def test_window_example():
    a, i, b, c, z = 1, 2, 3, 4, 5
    seqs = np.array([[9, z, a, i, b, c, z]])
    mask = seqs != 9
    sids = np.arange(10)[:, None]  # all distinct codes, so P_C is empty
    got = build_positive_set(i, seqs, mask, sids, p=1, o=2)
    assert {a, b, c} <= got
    assert got == {i} | _window_oracle(i, seqs, mask, 2)
    assert got == {z, a, i, b, c}


def test_window_zero_gives_no_history_positives():
    seqs = np.array([[0, 1, 2, 3]])
    sids = np.arange(4)[:, None]
    assert build_positive_set(1, seqs, seqs >= 0, sids, p=1, o=0) == {1}


def test_full_prefix_match_is_collision_partners():
    sids = np.array([[0, 1], [0, 1], [0, 2], [1, 1]])
    seqs = np.array([[0, 5, 2, 5, 3, 5, 1]])
    mask = seqs != 5
    assert build_positive_set(0, seqs, mask, sids, p=2, o=0) == {0, 1}
    assert build_positive_set(0, seqs, mask, sids, p=1, o=0) == {0, 1, 2}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4), st.integers(1, 3))
def test_positive_mask_matches_exhaustive_scan(seed, o, p):
    rng = np.random.default_rng(seed)
    n_items, levels = 15, 3
    sids = rng.integers(0, 3, size=(n_items, levels))
    seqs = rng.integers(0, n_items, size=(4, 7))
    # batches are left-padded, so real items form a contiguous suffix
    mask = np.arange(7)[None, :] >= rng.integers(0, 7, size=(4, 1))
    pool = np.unique(seqs[mask])
    if len(pool) == 0:
        return
    got = positive_mask(pool, seqs, mask, sids, p, o)
    for r, anchor in enumerate(pool):
        expected = {int(anchor)} | _window_oracle(anchor, seqs, mask, o)
        expected |= {int(j) for j in pool if (sids[j, :p] == sids[anchor, :p]).all()}
        assert {int(x) for x in pool[got[r]]} == expected


def test_positive_mask_validates():
    sids = np.zeros((3, 2), dtype=int)
    seqs = np.array([[0, 1, 2]])
    with pytest.raises(ValueError):
        positive_mask(np.array([0]), seqs, seqs >= 0, sids, p=3, o=1)
    with pytest.raises(ValueError):
        positive_mask(np.array([0]), seqs, seqs >= 0, sids, p=1, o=-1)


def test_alignment_pool_cap():
    seqs = np.arange(40).reshape(4, 10)
    mask = np.ones_like(seqs, dtype=bool)
    mask[0, :5] = False
    pool = alignment_pool(seqs, mask, 100, np.random.default_rng(0))
    assert pool.tolist() == list(range(5, 40))
    capped = alignment_pool(seqs, mask, 8, np.random.default_rng(0))
    assert len(capped) == 8 and set(capped) <= set(pool)


# ----------------------------------------------------------------- code-guided alignment

def test_full_positive_set_gives_zero():
    rng = np.random.default_rng(0)
    a, b = t64(rng.normal(size=(6, 4))), t64(rng.normal(size=(6, 4)))
    loss = code_guided_alignment_loss(a, b, torch.ones(6, 6, dtype=torch.bool), 0.1)
    assert abs(float(loss)) < 1e-12


def test_singleton_positives_equal_similarity():
    e = t64(np.ones((5, 3)))
    loss = code_guided_alignment_loss(e, e, torch.eye(5, dtype=torch.bool), 1.0)
    assert float(loss) == pytest.approx(2 * math.log(5))


def test_alignment_matches_direct_formula():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    pos = rng.random((5, 5)) < 0.4
    np.fill_diagonal(pos, True)
    tau = 0.2
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    sim = np.exp(an @ bn.T / tau)
    one = -np.mean([np.log(sim[i, pos[i]].sum() / sim[i].sum()) for i in range(5)])
    two = -np.mean([np.log(sim[pos[:, i], i].sum() / sim[:, i].sum()) for i in range(5)])
    got = float(code_guided_alignment_loss(t64(a), t64(b), torch.from_numpy(pos), tau))
    assert got == pytest.approx(one + two, rel=1e-12)


def test_alignment_invariants():
    rng = np.random.default_rng(3)
    a, b = t64(rng.normal(size=(6, 4))), t64(rng.normal(size=(6, 4)))
    small = torch.eye(6, dtype=torch.bool)
    big = small.clone()
    big[0, 3] = big[2, 5] = True
    l_small = float(code_guided_alignment_loss(a, b, small, 0.1))
    l_big = float(code_guided_alignment_loss(a, b, big, 0.1))
    assert 0 <= l_big <= l_small
    assert l_small == pytest.approx(float(code_guided_alignment_loss(2 * a, 7 * b, small, 0.1)))
    with pytest.raises(ValueError):
        code_guided_alignment_loss(a[:0], b[:0], small[:0, :0], 0.1)


# ----------------------------------------------------------------- masked granularity

def test_single_user_gives_zero():
    u = t64([[1.0, 2.0]])
    assert float(masked_granularity_loss(u, 3 * u + 1, 0.1)) == 0.0


def test_identical_users_give_log_n():
    u = t64(np.ones((4, 3)))
    assert float(masked_granularity_loss(u, u, 0.1)) == pytest.approx(2 * math.log(4))


def test_two_user_hand_value():
    u = t64(np.eye(2))
    expected = 2 * math.log(1 + math.exp(-1))
    assert float(masked_granularity_loss(u, u, 1.0)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.6265, abs=1e-4)


def test_msg_rejects_empty():
    with pytest.raises(ValueError):
        masked_granularity_loss(t64(np.zeros((0, 2))), t64(np.zeros((0, 2))), 0.1)


# ----------------------------------------------------------------- total

def test_total_is_weighted_sum():
    total, rep = total_loss(t64(0.7), t64(1.3), t64(2.1), 0.5, 0.3)
    assert float(total) == 0.7 + 0.5 * 1.3 + 0.3 * 2.1
    assert rep.total == pytest.approx(rep.l_rec + rep.beta * rep.l_ca + rep.gamma * rep.l_msg, abs=1e-6)


def test_zero_weights_reduce_to_ranking_loss():
    total, _ = total_loss(t64(0.7), t64(1.3), t64(2.1), 0.0, 0.0)
    assert float(total) == 0.7
    total, rep = total_loss(t64(0.7), None, None, 0.5, 0.3)
    assert float(total) == 0.7 and rep.l_ca == 0.0 and rep.l_msg == 0.0


def test_doubling_beta_doubles_alignment_share():
    a, _ = total_loss(t64(0.5), t64(1.25), t64(0.0), 0.25, 0.0)
    b, _ = total_loss(t64(0.5), t64(1.25), t64(0.0), 0.5, 0.0)
    assert float(b) - 0.5 == 2 * (float(a) - 0.5)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        total_loss(t64(1.0), None, None, -0.1, 0.0)
