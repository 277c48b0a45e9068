import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from negcut import losses as L
from negcut.errors import InvalidInputError

from conftest import t64
from oracles import central_diff, naive_info_nce, naive_l1, naive_lsgan_d, naive_lsgan_g, random_unit, rel_err


def test_info_nce_uniform_single():
    q = t64([[1.0, 0.0]])
    k = t64([[0.0, 1.0]])
    neg = t64([[0.0, -1.0]])
    assert L.info_nce(q, k, neg, tau=1.0).item() == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("n", [1, 16, 255])
@pytest.mark.parametrize("tau", [0.07, 1.0, 3.0])
@pytest.mark.parametrize("s", [1, 5])
def test_info_nce_uniform_logits(n, tau, s, rng):
    # q orthogonal to every key -> all logits 0
    q = np.zeros((s, 3))
    q[:, 0] = 1.0
    keys = random_unit(rng, s + n, 2)
    keys = np.concatenate([np.zeros((s + n, 1)), keys], axis=1)
    val = L.info_nce(t64(q), t64(keys[:s]), t64(keys[s:]), tau).item()
    assert abs(val - math.log(n + 1)) < 1e-9


def test_info_nce_matches_oracle(rng):
    q, kp, kn = random_unit(rng, 4, 16), random_unit(rng, 4, 16), random_unit(rng, 8, 16)
    got = L.info_nce(t64(q), t64(kp), t64(kn), 0.07).item()
    assert abs(got - naive_info_nce(q, kp, kn, 0.07)) < 1e-10


def test_info_nce_sum_reduction(rng):
    q, kp, kn = random_unit(rng, 6, 8), random_unit(rng, 6, 8), random_unit(rng, 5, 8)
    got = L.info_nce(t64(q), t64(kp), t64(kn), 0.1, reduction="sum").item()
    assert abs(got - naive_info_nce(q, kp, kn, 0.1, reduction="sum")) < 1e-10


def test_info_nce_per_query_negatives(rng):
    q, kp, kn = random_unit(rng, 3, 8), random_unit(rng, 3, 8), random_unit(rng, 3, 4, 8)
    got = L.info_nce(t64(q), t64(kp), t64(kn), 0.2).item()
    assert abs(got - naive_info_nce(q, kp, kn, 0.2)) < 1e-10


def test_info_nce_batch_dims_average_images(rng):
    q, kp, kn = random_unit(rng, 2, 3, 8), random_unit(rng, 2, 3, 8), random_unit(rng, 2, 5, 8)
    got = L.info_nce(t64(q), t64(kp), t64(kn), 0.5).item()
    want = np.mean([naive_info_nce(q[b], kp[b], kn[b], 0.5) for b in range(2)])
    assert abs(got - want) < 1e-10


def test_info_nce_errors(rng):
    q, kp, kn = t64(random_unit(rng, 2, 4)), t64(random_unit(rng, 2, 4)), t64(random_unit(rng, 3, 4))
    with pytest.raises(InvalidInputError):
        L.info_nce(q, kp, kn, tau=0.0)
    with pytest.raises(InvalidInputError):
        L.info_nce(q, kp, kn, tau=-1.0)
    bad = q.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(InvalidInputError):
        L.info_nce(bad, kp, kn)
    inf = kn.clone()
    inf[1, 2] = float("inf")
    with pytest.raises(InvalidInputError):
        L.info_nce(q, kp, inf)
    with pytest.raises(InvalidInputError):
        L.info_nce(q, kp[:1], kn)
    with pytest.raises(InvalidInputError):
        L.info_nce(q, kp, kn[:, :3])


def test_info_nce_stable_at_small_tau():
    q = t64([[1.0, 0.0]])
    for pos, neg in [([1.0, 0.0], [-1.0, 0.0]), ([-1.0, 0.0], [1.0, 0.0]), ([1.0, 0.0], [1.0, 0.0])]:
        v = L.info_nce(q, t64([pos]), t64([neg] * 4), tau=0.01).item()
        assert math.isfinite(v)
    # positive at -1, negatives at +1: loss ~ 2/tau + log 4
    v = L.info_nce(q, t64([[-1.0, 0.0]]), t64([[1.0, 0.0]] * 4), tau=0.01).item()
    assert v == pytest.approx(200 + math.log(4), rel=1e-9)


def test_contrastive_batch_validate(rng):
    b = L.ContrastiveBatch(t64(random_unit(rng, 2, 4)), t64(random_unit(rng, 2, 4)), t64(random_unit(rng, 3, 4)))
    b.validate()
    b.q = b.q * 2
    with pytest.raises(InvalidInputError):
        b.validate()


def _batch(rng, s, n, m, tau=0.07):
    return L.ContrastiveBatch(t64(random_unit(rng, s, m)), t64(random_unit(rng, s, m)), t64(random_unit(rng, n, m)), tau)


def test_patch_nce_single_layer(rng):
    b = _batch(rng, 4, 6, 8)
    assert L.patch_nce([b]).item() == L.info_nce(b.q, b.k_pos, b.k_neg, b.tau).item()


def test_patch_nce_uniform_five_layers():
    q = t64([[1.0, 0.0]] * 3)
    k = t64([[0.0, 1.0]] * 3)
    neg = t64([[0.0, 1.0]] * 255)
    batches = [L.ContrastiveBatch(q, k, neg, 0.07) for _ in range(5)]
    assert abs(L.patch_nce(batches).item() - 5 * math.log(256)) < 1e-9


def test_patch_nce_oracle_two_layers(rng):
    bs = [_batch(rng, 4, 8, 16), _batch(rng, 3, 5, 16, tau=0.2)]
    want = sum(naive_info_nce(b.q.numpy(), b.k_pos.numpy(), b.k_neg.numpy(), b.tau) for b in bs)
    assert abs(L.patch_nce(bs).item() - want) < 1e-10


def test_patch_nce_empty():
    with pytest.raises(InvalidInputError):
        L.patch_nce([])


def test_diversity_examples(rng):
    a = t64([0.0, 0.0])
    assert L.diversity_loss(a, a).item() == 0.0
    assert L.diversity_loss(a, t64([1.0, 1.0])).item() == -2.0
    x, y = rng.standard_normal(256), rng.standard_normal(256)
    assert abs(L.diversity_loss(t64(x), t64(y)).item() + naive_l1(x, y)) < 1e-12
    assert L.diversity_loss(t64(x), t64(y), dim_power=1.0).item() == pytest.approx(-naive_l1(x, y) / 256, abs=1e-12)
    assert L.diversity_loss(t64(x), t64(y), dim_power=0.5).item() == pytest.approx(-naive_l1(x, y) / 16, abs=1e-12)
    with pytest.raises(InvalidInputError):
        L.diversity_loss(t64([1.0, 2.0]), t64([1.0]))
    with pytest.raises(InvalidInputError):
        L.diversity_loss(a, a, dim_power=-1.0)


def test_bank_diversity_pairs_consecutive():
    raw = t64([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [0.0, 3.0], [9.0, 9.0]])
    # pairs (0,1) -> 2, (2,3) -> 3; the odd one out is ignored
    assert L.bank_diversity_loss(raw).item() == -2.5
    assert L.bank_diversity_loss(raw[:1]).item() == 0.0


vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4)


@given(vec, vec, vec)
def test_diversity_symmetric_and_triangle(a, b, c):
    a, b, c = t64(a), t64(b), t64(c)
    assert L.diversity_loss(a, b).item() == L.diversity_loss(b, a).item()
    assert L.diversity_loss(a, c).item() >= L.diversity_loss(a, b).item() + L.diversity_loss(b, c).item() - 1e-9
    assert L.diversity_loss(a, b).item() <= 0


def test_lsgan_examples(rng):
    one, zero = t64([1.0]), t64([0.0])
    assert L.lsgan_d(L.GanScores(one, zero)).item() == 0.0
    assert L.lsgan_d(L.GanScores(zero, one)).item() == 2.0
    assert L.lsgan_g(L.GanScores(fake_scores=one)).item() == 0.0
    assert L.lsgan_g(L.GanScores(fake_scores=zero)).item() == 1.0
    r, f = rng.standard_normal((2, 1, 6, 6)), rng.standard_normal((3, 1, 6, 6))
    assert abs(L.lsgan_d(L.GanScores(t64(r), t64(f))).item() - naive_lsgan_d(r, f)) < 1e-12
    assert abs(L.lsgan_g(L.GanScores(None, t64(f))).item() - naive_lsgan_g(f)) < 1e-12


def test_lsgan_empty():
    with pytest.raises(InvalidInputError):
        L.lsgan_d(L.GanScores(t64([]), t64([1.0])))
    with pytest.raises(InvalidInputError):
        L.lsgan_g(L.GanScores(t64([1.0]), None))


def test_assemble_losses():
    b = L.assemble_losses(1.0, -0.5, 0.2, L.LossWeights(1, 1))
    assert (b.L_H, b.L_G, b.L_N) == (1.0, pytest.approx(1.2), -1.5)
    b = L.assemble_losses(0.7, -3.0, 0.4, L.LossWeights(0, 0))
    assert (b.L_G, b.L_N) == (0.7, -0.7)
    with pytest.raises(InvalidInputError):
        L.assemble_losses(float("nan"), 0.0, 0.0)
    with pytest.raises(InvalidInputError):
        L.LossWeights(-1.0, 1.0)


# -- properties --------------------------------------------------------------


def _logit_setup(pos_dot, neg_dots):
    """Unit vectors in 2-D with prescribed dot products against q = e1."""
    q = t64([[1.0, 0.0]])
    ang = lambda d: [d, math.sqrt(max(0.0, 1 - d * d))]
    return q, t64([ang(pos_dot)]), t64([ang(d) for d in neg_dots])


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.99, 0.98), st.lists(st.floats(-1, 1), min_size=1, max_size=6), st.floats(0.01, 0.5))
def test_monotone_in_positive(pos, negs, delta):
    q, kp, kn = _logit_setup(pos, negs)
    q2, kp2, _ = _logit_setup(min(pos + delta, 1.0), negs)
    assert L.info_nce(q2, kp2, kn, 0.5).item() < L.info_nce(q, kp, kn, 0.5).item()


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.lists(st.floats(-0.99, 0.98), min_size=1, max_size=6), st.integers(0, 5), st.floats(0.01, 0.5))
def test_monotone_in_negative(pos, negs, which, delta):
    which %= len(negs)
    q, kp, kn = _logit_setup(pos, negs)
    harder = list(negs)
    harder[which] = min(harder[which] + delta, 1.0)
    _, _, kn2 = _logit_setup(pos, harder)
    assert L.info_nce(q, kp, kn2, 0.5).item() > L.info_nce(q, kp, kn, 0.5).item()


def test_permutation_invariance(rng):
    q, kp, kn = random_unit(rng, 5, 8), random_unit(rng, 5, 8), random_unit(rng, 9, 8)
    a = L.info_nce(t64(q), t64(kp), t64(kn)).item()
    b = L.info_nce(t64(q), t64(kp), t64(kn[rng.permutation(9)])).item()
    assert abs(a - b) < 1e-12


# -- gradients -----------------------------------------------------------------


def _grad_check(fn, arrays, eps=1e-5, tol=1e-4):
    tensors = [t64(a).requires_grad_(True) for a in arrays]
    fn(*tensors).backward()
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [t64(b) for b in arrays]
            args[i] = t64(x)
            return fn(*args).item()

        fd = central_diff(f, a, eps)
        assert rel_err(tensors[i].grad.numpy(), fd, floor=1e-6) < tol


def test_info_nce_gradients(rng):
    arrays = [random_unit(rng, 3, 5), random_unit(rng, 3, 5), random_unit(rng, 4, 5)]
    _grad_check(lambda q, kp, kn: L.info_nce(q, kp, kn, 0.3), arrays)


def test_diversity_gradients(rng):
    _grad_check(L.diversity_loss, [rng.standard_normal(7), rng.standard_normal(7)])


def test_lsgan_gradients(rng):
    r, f = rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 1, 3, 3))
    _grad_check(lambda a, b: L.lsgan_d(L.GanScores(a, b)), [r, f])
    _grad_check(lambda b: L.lsgan_g(L.GanScores(None, b)), [f])
