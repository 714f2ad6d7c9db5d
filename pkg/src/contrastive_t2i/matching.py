"""Image/text encoders, DAMSM matching loss and contrastive caption pretraining."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .checkpoint import Checkpoint, load_checkpoint
from .config import MatchingConfig
from .contrastive import nt_xent_batch_loss
from .data import CaptionDataset, DatasetError, TripletBatch, TripletSampler, pad_captions
from .history import LossHistory

log = logging.getLogger(__name__)


@dataclass
class ImageEmbedding:
    global_vector: Tensor  # B x d
    regions: Tensor  # B x R x d


@dataclass
class TextEmbedding:
    sentence: Tensor  # B x d
    words: Tensor  # B x T x d, zero past each length
    lengths: Tensor  # B

    def mask(self) -> Tensor:
        t = self.words.shape[1]
        return torch.arange(t)[None, :] < self.lengths[:, None]


class ImageEncoder(nn.Module):
    """Four conv blocks; the final feature-map cells are the image regions."""

    def __init__(self, embed_dim: int = 64, resolution: int = 32, channels: int = 32):
        super().__init__()
        if resolution % 8:
            raise ValueError(f"resolution must be a multiple of 8, got {resolution}")
        self.resolution = resolution
        c = channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 3, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 3, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 4 * c, 3, 1, 1),
            nn.LeakyReLU(0.2),
        )
        self.region_proj = nn.Conv2d(4 * c, embed_dim, 1)
        self.global_proj = nn.Linear(4 * c, embed_dim)

    def forward(self, x: Tensor) -> ImageEmbedding:
        if x.ndim != 4 or x.shape[1:] != (3, self.resolution, self.resolution):
            raise ValueError(
                f"expected images of shape (B, 3, {self.resolution}, {self.resolution}), got {tuple(x.shape)}"
            )
        h = self.features(x)
        regions = self.region_proj(h).flatten(2).transpose(1, 2)
        return ImageEmbedding(self.global_proj(h.mean(dim=(2, 3))), regions)


class TextEncoder(nn.Module):
    """Bidirectional LSTM; sentence vector = concatenated final hidden states."""

    def __init__(self, vocab_size: int, embed_dim: int = 64, word_dim: int = 32):
        super().__init__()
        if embed_dim % 2:
            raise ValueError("embed_dim must be even (two LSTM directions)")
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, word_dim, padding_idx=0)
        self.rnn = nn.LSTM(word_dim, embed_dim // 2, batch_first=True, bidirectional=True)

    def forward(self, tokens: Tensor, lengths: Tensor) -> TextEmbedding:
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            bad = tokens[(tokens < 0) | (tokens >= self.vocab_size)].unique().tolist()
            raise ValueError(f"token ids {bad} are outside the vocabulary of size {self.vocab_size}")
        lengths = lengths.to(torch.long)
        if (lengths < 1).any() or (lengths > tokens.shape[1]).any():
            raise ValueError("lengths must lie in [1, T]")
        packed = pack_padded_sequence(self.embedding(tokens), lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, (h, _) = self.rnn(packed)
        words, _ = pad_packed_sequence(out, batch_first=True, total_length=tokens.shape[1])
        sentence = torch.cat([h[0], h[1]], dim=1)
        return TextEmbedding(sentence, words, lengths)


class EncoderPair(nn.Module):
    """Image encoder ``f`` and the single shared text encoder ``g``."""

    def __init__(self, vocab_size: int, resolution: int, embed_dim: int = 64, word_dim: int = 32, image_channels: int = 32):
        super().__init__()
        self.hparams = dict(
            vocab_size=vocab_size,
            resolution=resolution,
            embed_dim=embed_dim,
            word_dim=word_dim,
            image_channels=image_channels,
        )
        self.image_encoder = ImageEncoder(embed_dim, resolution, image_channels)
        self.text_encoder = TextEncoder(vocab_size, embed_dim, word_dim)

    @property
    def embed_dim(self) -> int:
        return self.hparams["embed_dim"]

    def encode_image(self, x: Tensor) -> ImageEmbedding:
        return self.image_encoder(x)

    def encode_text(self, tokens: Tensor, lengths: Tensor) -> TextEmbedding:
        return self.text_encoder(tokens, lengths)

    def encode_captions(self, captions) -> TextEmbedding:
        return self.text_encoder(*pad_captions(captions))

    def freeze(self) -> "EncoderPair":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def is_frozen(self) -> bool:
        return not self.training and not any(p.requires_grad for p in self.parameters())

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "EncoderPair":
        ckpt = load_checkpoint(path, kind="encoders")
        pair = cls(**ckpt.extra["hparams"])
        pair.load_state_dict(ckpt.models["encoders"])
        return pair


# ---------------------------------------------------------------------------
# DAMSM


class DamsmTerms(NamedTuple):
    word_img2txt: Tensor
    word_txt2img: Tensor
    sent_img2txt: Tensor
    sent_txt2img: Tensor

    def total(self) -> Tensor:
        return self.word_img2txt + self.word_txt2img + self.sent_img2txt + self.sent_txt2img


def word_region_relevance(regions: Tensor, words: Tensor, lengths: Tensor, gamma1: float, gamma2: float) -> Tensor:
    """Attention-based relevance ``R[i, j]`` of image ``i`` and caption ``j``.

    Each word attends over the image regions: raw dot products are first
    normalised over the caption's words, then sharpened by ``gamma1`` and
    normalised over regions. Word/context cosines are pooled with a
    ``gamma2`` log-sum-exp.
    """
    t = words.shape[1]
    word_mask = torch.arange(t, device=words.device)[None, :] < lengths[:, None]  # J x T
    s = torch.einsum("jtd,ird->ijtr", words, regions)
    s = s.masked_fill(~word_mask[None, :, :, None], float("-inf"))
    s = torch.softmax(s, dim=2)
    s = s.masked_fill(~word_mask[None, :, :, None], 0.0)
    alpha = torch.softmax(gamma1 * s, dim=3)
    context = torch.einsum("ijtr,ird->ijtd", alpha, regions)
    cos = F.cosine_similarity(context, words[None].expand_as(context), dim=-1, eps=1e-8)
    cos = cos.masked_fill(~word_mask[None], float("-inf"))
    return torch.logsumexp(gamma2 * cos, dim=2) / gamma2


def _posterior_terms(scores: Tensor, gamma3: float) -> tuple[Tensor, Tensor]:
    target = torch.arange(scores.shape[0], device=scores.device)
    logits = gamma3 * scores
    return F.cross_entropy(logits, target), F.cross_entropy(logits.T, target)


def damsm_terms(
    img: ImageEmbedding, txt: TextEmbedding, gamma1: float = 4.0, gamma2: float = 5.0, gamma3: float = 10.0
) -> DamsmTerms:
    """The four DAMSM negative log posteriors, each averaged over the batch.

    Pair ``i`` (image ``i``, caption ``i``) is the match; all other batch
    members are the alternatives the posterior normalises over.
    """
    b = img.global_vector.shape[0]
    if txt.sentence.shape[0] != b:
        raise ValueError(f"batch sizes differ: {b} images vs {txt.sentence.shape[0]} captions")
    if b < 2:
        raise ValueError("DAMSM needs a batch of at least 2 pairs")
    word_scores = word_region_relevance(img.regions, txt.words, txt.lengths, gamma1, gamma2)
    g = F.normalize(img.global_vector, dim=1, eps=1e-8)
    s = F.normalize(txt.sentence, dim=1, eps=1e-8)
    sent_scores = g @ s.T
    w_i2t, w_t2i = _posterior_terms(word_scores, gamma3)
    s_i2t, s_t2i = _posterior_terms(sent_scores, gamma3)
    return DamsmTerms(w_i2t, w_t2i, s_i2t, s_t2i)


def damsm_loss(img: ImageEmbedding, txt: TextEmbedding, gammas=(4.0, 5.0, 10.0)) -> Tensor:
    return damsm_terms(img, txt, *gammas).total()


# ---------------------------------------------------------------------------
# pretraining


class StepLosses(NamedTuple):
    l1: float
    l2: float
    lc: float
    total: float


def pretrain_losses(encoders: EncoderPair, batch: TripletBatch, tau: float, gammas=(4.0, 5.0, 10.0)):
    """``(L1, L2, Lc, L)`` as tensors for one triplet batch; no parameter update."""
    (t, t_len), (tp, tp_len) = batch.padded()
    v = encoders.encode_image(batch.x)
    e = encoders.encode_text(t, t_len)
    e_prime = encoders.encode_text(tp, tp_len)
    l1 = damsm_loss(v, e, gammas)
    l2 = damsm_loss(v, e_prime, gammas)
    lc = nt_xent_batch_loss(e.sentence, e_prime.sentence, tau)
    return l1, l2, lc, l1 + l2 + lc


def pretrain_step(
    encoders: EncoderPair,
    batch: TripletBatch,
    optimizer: torch.optim.Optimizer,
    tau: float,
    gammas=(4.0, 5.0, 10.0),
) -> StepLosses:
    encoders.train()
    l1, l2, lc, total = pretrain_losses(encoders, batch, tau, gammas)
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite pretraining loss: L1={l1.item()} L2={l2.item()} Lc={lc.item()}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepLosses(l1.item(), l2.item(), lc.item(), total.item())


@dataclass
class PretrainResult:
    encoders: EncoderPair
    history: LossHistory
    optimizer: torch.optim.Optimizer
    epoch: int
    step: int
    checkpoints: list[Path]


def make_encoders(dataset: CaptionDataset, cfg: MatchingConfig) -> EncoderPair:
    return EncoderPair(len(dataset.vocab), dataset.resolution, cfg.embed_dim, cfg.word_dim, cfg.image_channels)


def make_optimizer(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.5, 0.999))


def encoder_checkpoint(result_or_encoders, optimizer, epoch: int, step: int, config: dict, history: LossHistory | None = None) -> Checkpoint:
    enc = result_or_encoders
    return Checkpoint(
        kind="encoders",
        models={"encoders": enc.state_dict()},
        optimizers={"encoders": optimizer.state_dict()},
        counters={"epoch": epoch, "step": step},
        config=config,
        extra={"hparams": dict(enc.hparams), "history": history.rows if history else []},
    )


def pretrain(
    dataset: CaptionDataset,
    cfg: MatchingConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    epochs: int | None = None,
) -> PretrainResult:
    """Contrastive caption-consistency pretraining of ``f`` and ``g``.

    Every epoch is one shuffled pass over the images; the history records the
    epoch means of ``L1``, ``L2`` and ``Lc``. With ``out_dir`` a checkpoint is
    written every ``cfg.checkpoint_every`` epochs and after the last one,
    along with ``pretrain_losses.csv``. ``resume`` continues from an encoder
    checkpoint, keeping its epoch/step counters and history.
    """
    for i, caps in enumerate(dataset.captions):
        if len(caps) < 2:
            raise DatasetError(f"image {i} has fewer than 2 captions")
    if cfg.batch_size > len(dataset):
        raise DatasetError(f"batch size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    epochs = cfg.epochs if epochs is None else epochs
    gammas = (cfg.gamma1, cfg.gamma2, cfg.gamma3)
    torch.manual_seed(seed)
    encoders = make_encoders(dataset, cfg)
    optimizer = make_optimizer(encoders.parameters(), cfg.lr)
    history = LossHistory(["epoch", "L1", "L2", "Lc"])
    start_epoch, step = 0, 0
    if resume is not None:
        ckpt = load_checkpoint(resume, kind="encoders")
        if ckpt.extra["hparams"] != encoders.hparams:
            raise DatasetError(f"{resume}: encoder shape {ckpt.extra['hparams']} does not match {encoders.hparams}")
        encoders.load_state_dict(ckpt.models["encoders"])
        optimizer.load_state_dict(ckpt.optimizers["encoders"])
        start_epoch, step = ckpt.counters["epoch"], ckpt.counters["step"]
        history.rows = [list(r) for r in ckpt.extra.get("history", [])]
    # the sampler stream is keyed by the epoch so resumed runs see fresh batches
    out = Path(out_dir) if out_dir is not None else None
    written: list[Path] = []
    config_snapshot = {"matching": asdict(cfg), "seed": seed}
    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        sampler = TripletSampler(dataset, seed=seed * 100_003 + epoch)
        sums = [0.0, 0.0, 0.0]
        batches = 0
        for batch in sampler.epoch(cfg.batch_size):
            losses = pretrain_step(encoders, batch, optimizer, cfg.tau, gammas)
            sums = [a + b for a, b in zip(sums, losses[:3])]
            batches += 1
            step += 1
        history.append(epoch, *(s / batches for s in sums))
        log.info("epoch %d  L1 %.4f  L2 %.4f  Lc %.4f", epoch, *history.rows[-1][1:])
        last = epoch == start_epoch + epochs
        if out is not None and (epoch % cfg.checkpoint_every == 0 or last):
            path = out / f"encoders_epoch{epoch:04d}.pt"
            encoder_checkpoint(encoders, optimizer, epoch, step, config_snapshot, history).save(path)
            written.append(path)
    if out is not None:
        history.to_csv(out / "pretrain_losses.csv")
    encoders.eval()
    return PretrainResult(encoders, history, optimizer, start_epoch + epochs, step, written)


@torch.no_grad()
def caption_pair_similarity(encoders: EncoderPair, dataset: CaptionDataset, n_pairs: int = 200, seed: int = 0) -> tuple[float, float]:
    """Mean cosine of same-image caption pairs vs. different-image caption pairs."""
    encoders.eval()
    sampler = TripletSampler(dataset, seed=seed)
    n = min(n_pairs, len(dataset))
    batch = sampler.sample(n)
    e = F.normalize(encoders.encode_captions(batch.t).sentence, dim=1)
    ep = F.normalize(encoders.encode_captions(batch.t_prime).sentence, dim=1)
    sims = e @ ep.T
    intra = sims.diagonal().mean().item()
    off = ~torch.eye(n, dtype=torch.bool)
    inter = sims[off].mean().item()
    return intra, inter
