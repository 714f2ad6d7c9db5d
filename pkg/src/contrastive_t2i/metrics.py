"""Inception Score, Frechet distance and R-precision with pluggable extractors.

The formulas are extractor-agnostic. At desk scale the "Inception" role is
played by :class:`FeatureClassifier`, a small CNN trained on the synthetic
class labels; anything exposing ``features(x)`` and ``probs(x)`` works.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import Checkpoint, load_checkpoint
from .data import CaptionDataset, DatasetError, images_to_tensor, pad_captions

SIMPLEX_TOL = 1e-6
FID_EPS = 1e-6
NEG_EIG_TOL = 1e-10


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Inception Score


def check_probabilities(probs: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise MetricError(f"probabilities must be an M x C matrix, got shape {p.shape}")
    if not np.isfinite(p).all():
        raise MetricError("probabilities contain non-finite entries")
    if (p < 0).any():
        raise MetricError(f"negative probability at row {int(np.argwhere(p < 0)[0, 0])}")
    dev = np.abs(p.sum(axis=1) - 1.0)
    if (dev > tol).any():
        row = int(np.argmax(dev))
        raise MetricError(f"row {row} sums to {p[row].sum():.8f}, off the simplex by more than {tol}")
    return p


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # 0 log 0 = 0; q > 0 wherever p > 0 because q is the mean of the rows
    safe_p = np.where(p > 0, p, 1.0)
    safe_q = np.where(p > 0, q, 1.0)
    return np.sum(np.where(p > 0, p * (np.log(safe_p) - np.log(safe_q)), 0.0), axis=1)


def inception_score(probs: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """``exp(E_x KL(p(y|x) || p(y)))`` per split; mean and std over splits.

    Rows are split into ``splits`` contiguous, near-equal chunks and each
    chunk uses its own marginal ``p(y)``.
    """
    p = check_probabilities(probs)
    if not 1 <= splits <= len(p):
        raise MetricError(f"need 1 <= splits <= M, got splits={splits}, M={len(p)}")
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        scores.append(np.exp(_kl_rows(part, marginal).mean()))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# Frechet distance


def _check_features(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise MetricError(f"{name}: features must be M x F, got shape {x.shape}")
    if len(x) < 2:
        raise MetricError(f"{name}: need at least 2 samples for a covariance, got {len(x)}")
    if not np.isfinite(x).all():
        raise MetricError(f"{name}: features contain non-finite entries")
    return x


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -NEG_EIG_TOL * scale:
        raise MetricError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(sigma1: np.ndarray, sigma2: np.ndarray) -> float:
    """``Tr((sigma1 sigma2)^{1/2})`` via the symmetric form ``s1^{1/2} sigma2 s1^{1/2}``.

    The symmetrised product is similar to ``sigma1 sigma2`` so it has the same
    spectrum, and being symmetric PSD its eigenvalues are real.
    """
    root1 = _psd_sqrt(sigma1)
    m = root1 @ sigma2 @ root1
    w = np.linalg.eigvalsh((m + m.T) / 2)
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -NEG_EIG_TOL * scale:
        raise MetricError(
            f"covariance product has eigenvalue {w.min():.3e} below -{NEG_EIG_TOL} * {scale:.3e}; "
            "matrix square root is not real"
        )
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def _near_singular(sigma: np.ndarray) -> bool:
    w = np.linalg.eigvalsh(sigma)
    return w.min() <= FID_EPS * max(1.0, float(w.max()))


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise MetricError("mean/covariance shapes differ between the two sets")
    if _near_singular(sigma1) or _near_singular(sigma2):
        offset = FID_EPS * np.eye(len(sigma1))
        sigma1, sigma2 = sigma1 + offset, sigma2 + offset
    diff = mu1 - mu2
    tr = trace_sqrt_product(sigma1, sigma2)
    return float(max(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr, 0.0))


def fid(real: np.ndarray, fake: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two feature sets (M x F each)."""
    real = _check_features(real, "real")
    fake = _check_features(fake, "fake")
    if real.shape[1] != fake.shape[1]:
        raise MetricError(f"feature dimensions differ: {real.shape[1]} vs {fake.shape[1]}")
    return frechet_distance(
        real.mean(axis=0), np.cov(real, rowvar=False), fake.mean(axis=0), np.cov(fake, rowvar=False)
    )


# ---------------------------------------------------------------------------
# R-precision


def retrieval_hits(image_vecs: np.ndarray, true_vecs: np.ndarray, candidate_vecs: np.ndarray) -> np.ndarray:
    """Whether each image's true caption beats every mismatched candidate.

    Shapes: ``M x d``, ``M x d`` and ``M x P x d``. Ties count as misses.
    """
    def unit(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        if (n == 0).any():
            raise MetricError("zero-norm embedding in R-precision")
        return x / n

    img = unit(np.asarray(image_vecs, dtype=np.float64))
    true_sim = np.sum(img * unit(np.asarray(true_vecs, dtype=np.float64)), axis=1)
    cand_sim = np.einsum("md,mpd->mp", img, unit(np.asarray(candidate_vecs, dtype=np.float64)))
    return true_sim > cand_sim.max(axis=1)


def sample_candidate_pools(
    bank: Sequence[tuple[int, tuple[int, ...]]],
    owners: Sequence[int],
    true_captions: Sequence[Sequence[int]],
    n_mismatched: int,
    rng: np.random.Generator,
) -> list[list[tuple[int, ...]]]:
    """Draw ``n_mismatched`` captions per query from other images in ``bank``.

    ``bank`` holds ``(image index, caption)`` pairs; captions belonging to the
    query's own image or textually equal to its true caption are skipped.
    """
    pools = []
    for owner, true in zip(owners, true_captions):
        true = tuple(true)
        eligible = [k for k, (img, cap) in enumerate(bank) if img != owner and tuple(cap) != true]
        if len(eligible) < n_mismatched:
            raise MetricError(f"only {len(eligible)} mismatched captions available, need {n_mismatched}")
        picks = rng.choice(len(eligible), size=n_mismatched, replace=False)
        pools.append([tuple(bank[eligible[k]][1]) for k in picks])
    return pools


@torch.no_grad()
def r_precision(encoders, images: Tensor, true_captions, pools) -> float:
    """Fraction of images whose true caption ranks first in its pool (0..1)."""
    if len(images) != len(true_captions) or len(images) != len(pools):
        raise MetricError("images, true captions and pools must align")
    sizes = {len(p) for p in pools}
    if len(sizes) != 1:
        raise MetricError("all candidate pools must have the same size")
    for i, (true, pool) in enumerate(zip(true_captions, pools)):
        if any(tuple(c) == tuple(true) for c in pool):
            raise MetricError(f"candidate pool {i} contains a duplicate of the true caption")
    encoders.eval()
    p = sizes.pop()
    img = encoders.encode_image(images).global_vector.double().numpy()
    true_vecs = encoders.encode_text(*pad_captions(true_captions)).sentence.double().numpy()
    flat = [c for pool in pools for c in pool]
    cand = encoders.encode_text(*pad_captions(flat)).sentence.double().numpy().reshape(len(pools), p, -1)
    return float(retrieval_hits(img, true_vecs, cand).mean())


def caption_bank(dataset: CaptionDataset) -> list[tuple[int, tuple[int, ...]]]:
    return [(i, cap) for i, caps in enumerate(dataset.captions) for cap in caps]


def r_precision_repeated(
    encoders,
    images: Tensor,
    owners: Sequence[int],
    true_captions,
    dataset: CaptionDataset,
    pool_size: int = 100,
    repeats: int = 5,
    seed: int = 0,
    batch_size: int = 200,
) -> tuple[float, float]:
    """R-precision in percent, mean and std over ``repeats`` freshly drawn pools."""
    rng = np.random.default_rng(seed)
    bank = caption_bank(dataset)
    scores = []
    for _ in range(repeats):
        pools = sample_candidate_pools(bank, owners, true_captions, pool_size - 1, rng)
        hits = 0.0
        for s in range(0, len(images), batch_size):
            sl = slice(s, s + batch_size)
            n = len(images[sl])
            hits += n * r_precision(encoders, images[sl], list(true_captions[sl]), pools[sl])
        scores.append(100.0 * hits / len(images))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# desk-scale extractor


class Extractor(Protocol):
    def features(self, x: Tensor) -> Tensor: ...

    def probs(self, x: Tensor) -> Tensor: ...


class FeatureClassifier(nn.Module):
    """Small CNN classifier; its penultimate layer is the feature space."""

    def __init__(self, n_classes: int, resolution: int = 32, channels: int = 16, feature_dim: int = 32):
        super().__init__()
        self.hparams = dict(n_classes=n_classes, resolution=resolution, channels=channels, feature_dim=feature_dim)
        c = channels
        self.body = nn.Sequential(
            nn.Conv2d(3, c, 3, 2, 1),
            nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, 2, 1),
            nn.ReLU(),
            nn.Conv2d(2 * c, 4 * c, 3, 2, 1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(4 * c, feature_dim),
            nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, n_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.body(x))

    @torch.no_grad()
    def features(self, x: Tensor) -> Tensor:
        self.eval()
        return self.body(x)

    @torch.no_grad()
    def probs(self, x: Tensor) -> Tensor:
        self.eval()
        return torch.softmax(self.forward(x).double(), dim=1)

    def to_checkpoint(self, config: dict | None = None) -> Checkpoint:
        return Checkpoint(kind="classifier", models={"classifier": self.state_dict()}, config=config or {}, extra={"hparams": self.hparams})

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "FeatureClassifier":
        ckpt = load_checkpoint(path, kind="classifier")
        model = cls(**ckpt.extra["hparams"])
        model.load_state_dict(ckpt.models["classifier"])
        return model.eval()


def train_classifier(
    dataset: CaptionDataset, epochs: int = 5, seed: int = 0, batch_size: int = 32, lr: float = 1e-3
) -> tuple[FeatureClassifier, float]:
    """Fit the extractor on the dataset's class labels; returns (model, train accuracy)."""
    if (dataset.labels < 0).any():
        raise DatasetError("classifier training needs a class label for every image")
    n_classes = max(len(dataset.classes), int(dataset.labels.max()) + 1)
    torch.manual_seed(seed)
    model = FeatureClassifier(n_classes, dataset.resolution)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    x_all = images_to_tensor(dataset.images)
    y_all = torch.from_numpy(np.array(dataset.labels, dtype=np.int64))
    for _ in range(epochs):
        model.train()
        order = rng.permutation(len(dataset))
        for s in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[s : s + batch_size])
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        acc = (model(x_all).argmax(1) == y_all).double().mean().item()
    return model, acc


def batched(fn, x: Tensor, batch_size: int = 200) -> Tensor:
    return torch.cat([fn(x[s : s + batch_size]) for s in range(0, len(x), batch_size)])


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    checkpoint_id: str
    is_mean: float
    is_std: float
    fid: float
    rp_mean: float
    rp_std: float
    sample_count: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        raw = json.loads(Path(path).read_text())
        missing = [k for k in cls.__dataclass_fields__ if k not in raw]
        if missing:
            raise MetricError(f"{path}: report lacks fields {missing}")
        return cls(**{k: raw[k] for k in cls.__dataclass_fields__})


def evaluation_queries(dataset: CaptionDataset, n_samples: int) -> tuple[list[int], list[tuple[int, ...]]]:
    """Cycle over test images, then over their captions, until ``n_samples`` queries."""
    owners, captions = [], []
    m = len(dataset)
    for k in range(n_samples):
        i = k % m
        caps = dataset.captions[i]
        owners.append(i)
        captions.append(caps[(k // m) % len(caps)])
    return owners, captions


@torch.no_grad()
def generate_for_captions(G, encoders, captions, seed: int = 0, batch_size: int = 200) -> Tensor:
    G.eval()
    encoders.eval()
    noise = torch.Generator().manual_seed(seed)
    out = []
    for s in range(0, len(captions), batch_size):
        chunk = captions[s : s + batch_size]
        e = encoders.encode_text(*pad_captions(chunk)).sentence
        z = torch.randn(len(chunk), G.z_dim, generator=noise)
        out.append(G(z, e)[-1])
    return torch.cat(out)


def evaluate_images(
    fake: Tensor,
    owners: Sequence[int],
    captions,
    test: CaptionDataset,
    encoders,
    extractor: Extractor,
    checkpoint_id: str,
    is_splits: int = 10,
    pool_size: int = 100,
    repeats: int = 5,
    seed: int = 0,
    batch_size: int = 200,
) -> MetricsReport:
    """IS and FID through ``extractor``, R-precision through ``encoders``."""
    real = images_to_tensor(test.images)
    probs = batched(extractor.probs, fake, batch_size).numpy()
    is_mean, is_std = inception_score(probs, min(is_splits, len(fake)))
    fd = fid(batched(extractor.features, real, batch_size).double().numpy(), batched(extractor.features, fake, batch_size).double().numpy())
    rp_mean, rp_std = r_precision_repeated(encoders, fake, owners, captions, test, pool_size, repeats, seed, batch_size)
    return MetricsReport(checkpoint_id, is_mean, is_std, fd, rp_mean, rp_std, len(fake), seed)
