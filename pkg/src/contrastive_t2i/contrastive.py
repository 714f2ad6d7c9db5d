"""NT-Xent contrastive loss over two paired embedding branches.

The two branches ``e`` and ``e_prime`` are stacked as ``u = [e; e_prime]`` so
that row ``i`` and row ``i + N`` form a positive pair. Every other row in the
stacked batch acts as a negative. No projection head is applied.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import Tensor


class InvalidEmbeddingError(ValueError):
    """Raised for embeddings on which cosine similarity is undefined."""


def _check_rows(x: Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise InvalidEmbeddingError(f"{name} contains non-finite entries")
    norms = x.norm(dim=-1)
    if (norms == 0).any():
        bad = torch.nonzero(norms == 0).flatten().tolist()
        raise InvalidEmbeddingError(f"{name} has zero-norm rows at {bad}; cosine similarity is undefined")


def _check_temperature(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity ``a.b / (|a| |b|)`` of two vectors (or row-aligned batches)."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise InvalidEmbeddingError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    _check_rows(a, "a")
    _check_rows(b, "b")
    sim = (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))
    return sim.clamp(-1.0, 1.0)


def stack_branches(e: Tensor, e_prime: Tensor) -> Tensor:
    """Block-stack two branches into the ``2N x d`` matrix used by the loss."""
    if e.ndim != 2 or e_prime.ndim != 2:
        raise InvalidEmbeddingError("branches must be 2-D (N x d)")
    if e.shape != e_prime.shape:
        raise InvalidEmbeddingError(
            f"branch shapes differ: {tuple(e.shape)} vs {tuple(e_prime.shape)}"
        )
    if e.shape[0] == 0:
        raise InvalidEmbeddingError("empty batch (N = 0)")
    return torch.cat([e, e_prime], dim=0)


def positive_index(i: int, n: int) -> int:
    """Partner of stacked row ``i`` under the block convention."""
    return i + n if i < n else i - n


def _scaled_similarity(u: Tensor, tau: float) -> Tensor:
    _check_rows(u, "embeddings")
    unit = u / u.norm(dim=1, keepdim=True)
    return unit @ unit.T / tau


def _row_losses(u: Tensor, tau: float) -> Tensor:
    two_n = u.shape[0]
    n = two_n // 2
    logits = _scaled_similarity(u, tau)
    self_mask = torch.eye(two_n, dtype=torch.bool, device=u.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    # logsumexp subtracts the row max internally
    log_denominator = torch.logsumexp(logits, dim=1)
    partners = torch.cat([torch.arange(n, two_n), torch.arange(0, n)]).to(u.device)
    positives = logits.gather(1, partners[:, None]).squeeze(1)
    return log_denominator - positives


def nt_xent_sample_loss(u: Tensor, i: int, j: int, tau: float) -> Tensor:
    """Loss of stacked row ``i`` against its partner row ``j``.

    The denominator sums over every ``k != i``, so it contains the positive
    term as well as all negatives.
    """
    _check_temperature(tau)
    if i == j:
        raise ValueError(f"invalid pair: i == j == {i}")
    logits = _scaled_similarity(u, tau)
    row = torch.cat([logits[i, :i], logits[i, i + 1 :]])
    return torch.logsumexp(row, dim=0) - logits[i, j]


def nt_xent_batch_loss(e: Tensor, e_prime: Tensor, tau: float) -> Tensor:
    """Mean NT-Xent loss over all ``2N`` positive pairs of the two branches.

    Args:
        e: ``N x d`` first-branch embeddings.
        e_prime: ``N x d`` second-branch embeddings, row ``i`` paired with ``e[i]``.
        tau: softmax temperature, must be positive.

    Returns:
        Scalar tensor, differentiable w.r.t. both inputs. ``N = 1`` gives 0.

    Raises:
        InvalidEmbeddingError: on shape mismatch, ``N = 0``, non-finite or
            zero-norm rows.
    """
    _check_temperature(tau)
    u = stack_branches(e, e_prime)
    return _row_losses(u, tau).mean()


def nt_xent_oracle(e: Sequence[Sequence[float]], e_prime: Sequence[Sequence[float]], tau: float) -> float:
    """Reference NT-Xent written as explicit loops in float64 Python arithmetic.

    Intended for verification only; it is quadratic in Python and makes no
    attempt at numerical stabilisation beyond double precision.
    """
    _check_temperature(tau)
    e = torch.as_tensor(e, dtype=torch.float64).tolist()
    e_prime = torch.as_tensor(e_prime, dtype=torch.float64).tolist()
    if len(e) == 0 or len(e) != len(e_prime):
        raise InvalidEmbeddingError("branches must be nonempty with equal N")
    if any(len(r) != len(e[0]) for r in e + e_prime):
        raise InvalidEmbeddingError("all rows must share the same dimension")
    u = e + e_prime
    n = len(e)

    def norm(v):
        return math.sqrt(sum(x * x for x in v))

    def sim(a, b):
        na, nb = norm(a), norm(b)
        if na == 0 or nb == 0:
            raise InvalidEmbeddingError("zero-norm row")
        return sum(x * y for x, y in zip(a, b)) / (na * nb)

    total = 0.0
    for i in range(2 * n):
        j = i + n if i < n else i - n
        numerator = math.exp(sim(u[i], u[j]) / tau)
        denominator = 0.0
        for k in range(2 * n):
            if k != i:
                denominator += math.exp(sim(u[i], u[k]) / tau)
        total += -math.log(numerator / denominator)
    return total / (2 * n)


__all__ = [
    "InvalidEmbeddingError",
    "cosine_similarity",
    "stack_branches",
    "positive_index",
    "nt_xent_sample_loss",
    "nt_xent_batch_loss",
    "nt_xent_oracle",
]
