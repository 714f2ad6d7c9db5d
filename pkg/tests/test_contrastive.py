import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastive_t2i.contrastive import (
    InvalidEmbeddingError,
    cosine_similarity,
    nt_xent_batch_loss,
    nt_xent_oracle,
    nt_xent_sample_loss,
    positive_index,
    stack_branches,
)


def rand_pair(rng, n, d):
    return torch.from_numpy(rng.normal(size=(n, d))), torch.from_numpy(rng.normal(size=(n, d)))


# --- cosine -----------------------------------------------------------------


def test_cosine_self_is_one():
    v = torch.tensor([0.3, -2.0, 5.0], dtype=torch.float64)
    assert cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal_and_scale():
    assert cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item() == 0.0
    assert cosine_similarity(torch.tensor([2.0, 0.0]), torch.tensor([1.0, 0.0])).item() == pytest.approx(1.0)


def test_cosine_symmetric():
    rng = np.random.default_rng(1)
    a, b = rand_pair(rng, 1, 7)
    assert cosine_similarity(a[0], b[0]).item() == pytest.approx(cosine_similarity(b[0], a[0]).item(), abs=1e-15)


def test_cosine_zero_vector_rejected():
    with pytest.raises(InvalidEmbeddingError):
        cosine_similarity(torch.zeros(3), torch.ones(3))


# --- per-sample loss --------------------------------------------------------


def test_sample_loss_n1_is_zero():
    u = torch.tensor([[1.0, 2.0], [-3.0, 0.5]])
    assert nt_xent_sample_loss(u, 0, 1, 0.5).item() == 0.0


def test_sample_loss_identical_rows_is_log3():
    u = torch.ones(4, 3, dtype=torch.float64)
    for tau in (0.1, 0.5, 2.0):
        assert nt_xent_sample_loss(u, 0, 2, tau).item() == pytest.approx(math.log(3), abs=1e-12)


def test_sample_loss_matches_enumeration():
    # e = e' = {[1,0],[0,1]}, tau = 0.5. Row 0 sees sims 0 (k=1), 1 (k=2, positive), 0 (k=3).
    u = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    expected = -math.log(math.exp(2.0) / (math.exp(0.0) + math.exp(2.0) + math.exp(0.0)))
    assert expected == pytest.approx(0.2395, abs=5e-5)
    for i in range(4):
        assert nt_xent_sample_loss(u, i, positive_index(i, 2), 0.5).item() == pytest.approx(expected, abs=1e-12)


def test_sample_loss_rejects_self_pair():
    with pytest.raises(ValueError):
        nt_xent_sample_loss(torch.ones(4, 2), 1, 1, 0.5)


# --- batch loss -------------------------------------------------------------


def test_batch_n1_is_zero():
    assert nt_xent_batch_loss(torch.tensor([[1.0, 2.0]]), torch.tensor([[0.0, 1.0]]), 0.5).item() == 0.0


@pytest.mark.parametrize("n", [2, 4, 8])
def test_batch_identical_rows(n):
    e = torch.full((n, 5), 0.7, dtype=torch.float64)
    assert nt_xent_batch_loss(e, e.clone(), 0.3).item() == pytest.approx(math.log(2 * n - 1), abs=1e-6)


def test_batch_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, d = int(rng.integers(1, 9)), int(rng.integers(2, 17))
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        e, ep = rand_pair(rng, n, d)
        got = nt_xent_batch_loss(e, ep, tau).item()
        want = nt_xent_oracle(e, ep, tau)
        assert got == pytest.approx(want, rel=1e-6, abs=1e-12)


def test_batch_is_mean_of_sample_losses():
    rng = np.random.default_rng(3)
    e, ep = rand_pair(rng, 3, 4)
    u = stack_branches(e, ep)
    per = [nt_xent_sample_loss(u, i, positive_index(i, 3), 0.5).item() for i in range(6)]
    assert nt_xent_batch_loss(e, ep, 0.5).item() == pytest.approx(sum(per) / 6, rel=1e-12)


def test_small_tau_is_stable():
    rng = np.random.default_rng(4)
    e, ep = rand_pair(rng, 6, 8)
    loss = nt_xent_batch_loss(e.float(), ep.float(), 1e-3)
    assert torch.isfinite(loss)


@pytest.mark.parametrize(
    "e, ep",
    [
        (torch.ones(2, 3), torch.ones(3, 3)),
        (torch.ones(2, 3), torch.ones(2, 4)),
        (torch.ones(0, 3), torch.ones(0, 3)),
    ],
)
def test_batch_shape_errors(e, ep):
    with pytest.raises(InvalidEmbeddingError):
        nt_xent_batch_loss(e, ep, 0.5)


def test_batch_rejects_zero_row_and_nan():
    e = torch.ones(2, 3)
    bad = e.clone()
    bad[1] = 0
    with pytest.raises(InvalidEmbeddingError, match="zero-norm"):
        nt_xent_batch_loss(e, bad, 0.5)
    bad[1, 0] = float("nan")
    with pytest.raises(InvalidEmbeddingError, match="non-finite"):
        nt_xent_batch_loss(e, bad, 0.5)


def test_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        nt_xent_batch_loss(torch.ones(2, 2), torch.ones(2, 2), 0.0)


def test_oracle_trivial_cases():
    assert nt_xent_oracle([[1.0, 0.0]], [[0.0, 1.0]], 0.5) == 0.0
    assert nt_xent_oracle([[1.0, 1.0]] * 2, [[1.0, 1.0]] * 2, 0.5) == pytest.approx(math.log(3), abs=1e-12)


# --- properties -------------------------------------------------------------


batches = st.tuples(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2**31 - 1))


@settings(max_examples=40, deadline=None)
@given(batches, st.sampled_from([0.1, 0.5, 1.0]))
def test_permutation_equivariance(shape, tau):
    n, d, seed = shape
    rng = np.random.default_rng(seed)
    e, ep = rand_pair(rng, n, d)
    perm = torch.from_numpy(rng.permutation(n))
    base = nt_xent_batch_loss(e, ep, tau).item()
    assert nt_xent_batch_loss(e[perm], ep[perm], tau).item() == pytest.approx(base, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(batches, st.sampled_from([0.1, 0.5, 1.0]))
def test_branch_symmetry(shape, tau):
    n, d, seed = shape
    e, ep = rand_pair(np.random.default_rng(seed), n, d)
    assert nt_xent_batch_loss(e, ep, tau).item() == pytest.approx(nt_xent_batch_loss(ep, e, tau).item(), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(batches, st.floats(0.01, 100.0))
def test_row_scale_invariance(shape, scale):
    n, d, seed = shape
    rng = np.random.default_rng(seed)
    e, ep = rand_pair(rng, n, d)
    row = int(rng.integers(n))
    scaled = e.clone()
    scaled[row] *= scale
    assert nt_xent_batch_loss(scaled, ep, 0.5).item() == pytest.approx(nt_xent_batch_loss(e, ep, 0.5).item(), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(batches, st.sampled_from([0.05, 0.5, 1.0, 5.0]))
def test_nonnegative(shape, tau):
    n, d, seed = shape
    e, ep = rand_pair(np.random.default_rng(seed), n, d)
    assert nt_xent_batch_loss(e, ep, tau).item() >= 0.0


def test_loss_falls_as_positives_align():
    rng = np.random.default_rng(5)
    e, noise = rand_pair(rng, 6, 8)
    losses = [nt_xent_batch_loss(e, e + s * noise, 0.5).item() for s in (2.0, 0.5, 0.0)]
    assert losses[0] > losses[1] > losses[2]


def central_difference(fn, x, h=1e-4):
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        up = fn().item()
        flat[k] = orig - h
        down = fn().item()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return grad


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(5):
        n, d = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        e, ep = rand_pair(rng, n, d)
        e.requires_grad_(True)
        ep.requires_grad_(True)
        nt_xent_batch_loss(e, ep, 0.5).backward()
        with torch.no_grad():
            fd_e = central_difference(lambda: nt_xent_batch_loss(e, ep, 0.5), e)
            fd_ep = central_difference(lambda: nt_xent_batch_loss(e, ep, 0.5), ep)
        for analytic, numeric in ((e.grad, fd_e), (ep.grad, fd_ep)):
            err = (analytic - numeric).norm() / max(numeric.norm().item(), 1e-8)
            assert err < 1e-4
