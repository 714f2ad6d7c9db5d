"""Stacked conditional GAN with a Siamese contrastive term on generated images.

Both caption branches share one generator, one discriminator and the frozen
pretrained encoders. The contrastive term compares the image-encoder global
vectors of the final-stage images generated from two captions of the same
ground-truth image under a shared latent ``z``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import Checkpoint, load_checkpoint
from .config import GanConfig
from .contrastive import nt_xent_batch_loss
from .data import CaptionDataset, DatasetError, TripletSampler, pad_captions
from .history import LossHistory
from .matching import EncoderPair, TextEmbedding, damsm_loss

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "L_D", "L_G1", "L_G2", "L_c", "L_G"]


class EncoderNotFrozenError(RuntimeError):
    """The pretrained encoders must be in eval mode with gradients disabled."""


def _up_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(cin, cout, 3, 1, 1),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
    )


class Generator(nn.Module):
    """``G(z, e)`` producing one image per stage at doubling resolutions."""

    def __init__(self, z_dim: int, cond_dim: int, stage_resolutions=(16, 32), channels: int = 32, cond_channels: int = 16):
        super().__init__()
        res = list(stage_resolutions)
        if not res or res[0] < 4 or res[0] & (res[0] - 1):
            raise ValueError(f"first stage resolution must be a power of two >= 4, got {res}")
        if any(b != 2 * a for a, b in zip(res, res[1:])):
            raise ValueError(f"stage resolutions must double, got {res}")
        self.z_dim, self.cond_dim, self.stage_resolutions = z_dim, cond_dim, res
        c = channels
        self.project = nn.Sequential(nn.Linear(z_dim + cond_dim, c * 4 * 4), nn.BatchNorm1d(c * 4 * 4), nn.ReLU())
        ups, size = [], 4
        while size < res[0]:
            ups.append(_up_block(c, c))
            size *= 2
        self.initial = nn.Sequential(*ups)
        # later stages re-inject a compressed copy of e before upsampling
        self.cond_proj = nn.ModuleList(nn.Linear(cond_dim, cond_channels) for _ in res[1:])
        self.refine = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(c + cond_channels, c, 3, 1, 1),
                nn.BatchNorm2d(c),
                nn.ReLU(),
                _up_block(c, c),
            )
            for _ in res[1:]
        )
        self.to_rgb = nn.ModuleList(nn.Conv2d(c, 3, 3, 1, 1) for _ in res)
        self.channels = c

    def forward(self, z: Tensor, e: Tensor) -> list[Tensor]:
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ValueError(f"z must be (N, {self.z_dim}), got {tuple(z.shape)}")
        if e.ndim != 2 or e.shape[1] != self.cond_dim:
            raise ValueError(f"e must be (N, {self.cond_dim}), got {tuple(e.shape)}")
        if z.shape[0] != e.shape[0]:
            raise ValueError(f"z and e are not batch-aligned: {z.shape[0]} vs {e.shape[0]}")
        h = self.project(torch.cat([z, e], dim=1)).view(-1, self.channels, 4, 4)
        h = self.initial(h)
        images = [torch.tanh(self.to_rgb[0](h))]
        for k, (proj, block) in enumerate(zip(self.cond_proj, self.refine), start=1):
            cond = proj(e)[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
            h = block(torch.cat([h, cond], dim=1))
            images.append(torch.tanh(self.to_rgb[k](h)))
        return images


class StageDiscriminator(nn.Module):
    """Scores ``(image, e)`` pairs at one resolution; returns logits."""

    def __init__(self, resolution: int, cond_dim: int, channels: int = 32):
        super().__init__()
        layers, cin, c, size = [], 3, channels, resolution
        while size > 4:
            layers += [nn.Conv2d(cin, c, 4, 2, 1), nn.LeakyReLU(0.2)]
            cin, c, size = c, min(2 * c, 8 * channels), size // 2
        self.down = nn.Sequential(*layers)
        self.joint = nn.Sequential(
            nn.Conv2d(cin + cond_dim, cin, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(cin, 1, 4, 1, 0),
        )
        self.resolution = resolution

    def forward(self, x: Tensor, e: Tensor) -> Tensor:
        h = self.down(x)
        cond = e[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        return self.joint(torch.cat([h, cond], dim=1)).flatten()


class Discriminator(nn.Module):
    def __init__(self, cond_dim: int, stage_resolutions=(16, 32), channels: int = 32):
        super().__init__()
        self.stages = nn.ModuleList(StageDiscriminator(r, cond_dim, channels) for r in stage_resolutions)

    def forward(self, images: list[Tensor], e: Tensor) -> list[Tensor]:
        if len(images) != len(self.stages):
            raise ValueError(f"expected {len(self.stages)} stage images, got {len(images)}")
        return [d(x, e) for d, x in zip(self.stages, images)]


def generate(G: Generator, z: Tensor, e: Tensor) -> list[Tensor]:
    return G(z, e)


def real_pyramid(x: Tensor, stage_resolutions) -> list[Tensor]:
    """Real images downsampled to every stage resolution."""
    return [x if x.shape[-1] == r else F.interpolate(x, size=(r, r), mode="area") for r in stage_resolutions]


# ---------------------------------------------------------------------------
# objectives


def discriminator_branch_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Binary cross-entropy with real pairs labelled 1 and generated pairs 0.

    This is the negation of ``mean log D(x, e) + mean log(1 - D(G(z, e), e))``,
    so minimising it maximises the conditional GAN value for ``D``.
    """
    return F.binary_cross_entropy_with_logits(
        real_logits, torch.ones_like(real_logits)
    ) + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))


def generator_adversarial_loss(fake_logits: Tensor, saturating: bool = False) -> Tensor:
    if saturating:
        # mean log(1 - D) with D = sigmoid(logit)
        return -F.softplus(fake_logits).mean()
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def _require_frozen(encoders: EncoderPair) -> None:
    if not encoders.is_frozen:
        raise EncoderNotFrozenError(
            "pretrained encoders must be frozen (eval mode, requires_grad=False); call EncoderPair.freeze()"
        )


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _finite(name: str, value: Tensor, **parts) -> None:
    if not torch.isfinite(value):
        detail = ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items())
        raise FloatingPointError(f"non-finite {name}: {value.item()} ({detail})")


def discriminator_step(
    D: Discriminator,
    G: Generator,
    optimizer: torch.optim.Optimizer,
    x: Tensor,
    z: Tensor,
    e: Tensor,
    e_prime: Tensor,
) -> float:
    """One update of ``D`` on both caption branches, summed over stages."""
    D.train()
    with torch.no_grad():
        fake = G(z, e)
        fake_prime = G(z, e_prime)
    real = real_pyramid(x, G.stage_resolutions)
    _set_requires_grad(D, True)
    l_d1 = sum(discriminator_branch_loss(r, f) for r, f in zip(D(real, e), D(fake, e)))
    l_d2 = sum(discriminator_branch_loss(r, f) for r, f in zip(D(real, e_prime), D(fake_prime, e_prime)))
    l_d = l_d1 + l_d2
    _finite("discriminator loss", l_d, L_D1=l_d1, L_D2=l_d2)
    optimizer.zero_grad(set_to_none=True)
    l_d.backward()
    optimizer.step()
    return l_d.item()


class GeneratorLosses(NamedTuple):
    l_g1: float
    l_g2: float
    l_c: float
    l_g: float
    damsm: float


def generator_losses(
    G: Generator,
    D: Discriminator,
    encoders: EncoderPair,
    z: Tensor,
    e: TextEmbedding,
    e_prime: TextEmbedding,
    cfg: GanConfig,
    gammas=(4.0, 5.0, 10.0),
) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """``(L_G1, L_G2, L_c, L_G, damsm)`` tensors for one generator batch."""
    _require_frozen(encoders)
    fake = G(z, e.sentence)
    fake_prime = G(z, e_prime.sentence)
    l_g1 = sum(generator_adversarial_loss(s, cfg.saturating) for s in D(fake, e.sentence))
    l_g2 = sum(generator_adversarial_loss(s, cfg.saturating) for s in D(fake_prime, e_prime.sentence))
    # contrastive and matching terms use the final stage only
    v = encoders.encode_image(fake[-1])
    v_prime = encoders.encode_image(fake_prime[-1])
    l_c = nt_xent_batch_loss(v.global_vector, v_prime.global_vector, cfg.tau)
    l_g = l_g1 + l_g2
    if cfg.lambda_c > 0:
        l_g = l_g + cfg.lambda_c * l_c
    damsm = torch.zeros(())
    if cfg.use_damsm:
        damsm = damsm_loss(v, e, gammas) + damsm_loss(v_prime, e_prime, gammas)
        if cfg.lambda_damsm > 0:
            l_g = l_g + cfg.lambda_damsm * damsm
    return l_g1, l_g2, l_c, l_g, damsm


def generator_step(
    G: Generator,
    D: Discriminator,
    encoders: EncoderPair,
    optimizer: torch.optim.Optimizer,
    z: Tensor,
    e: TextEmbedding,
    e_prime: TextEmbedding,
    cfg: GanConfig,
    gammas=(4.0, 5.0, 10.0),
) -> GeneratorLosses:
    """One update of ``G``; ``D`` and the encoders only pass gradients through."""
    G.train()
    _set_requires_grad(D, False)
    try:
        l_g1, l_g2, l_c, l_g, damsm = generator_losses(G, D, encoders, z, e, e_prime, cfg, gammas)
        _finite("generator loss", l_g, L_G1=l_g1, L_G2=l_g2, L_c=l_c, damsm=damsm)
        optimizer.zero_grad(set_to_none=True)
        l_g.backward()
        optimizer.step()
    finally:
        _set_requires_grad(D, True)
    return GeneratorLosses(l_g1.item(), l_g2.item(), l_c.item(), l_g.item(), damsm.item())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class GanResult:
    G: Generator
    D: Discriminator
    history: LossHistory
    step: int
    checkpoints: list[Path]


def build_models(cfg: GanConfig, cond_dim: int) -> tuple[Generator, Discriminator]:
    G = Generator(cfg.z_dim, cond_dim, cfg.stage_resolutions, cfg.g_channels)
    D = Discriminator(cond_dim, cfg.stage_resolutions, cfg.d_channels)
    return G, D


def check_compatible(dataset: CaptionDataset, encoders: EncoderPair, cfg: GanConfig) -> None:
    hp = encoders.hparams
    problems = []
    if hp["resolution"] != dataset.resolution:
        problems.append(f"encoder resolution {hp['resolution']} != dataset resolution {dataset.resolution}")
    if hp["vocab_size"] != len(dataset.vocab):
        problems.append(f"encoder vocabulary {hp['vocab_size']} != dataset vocabulary {len(dataset.vocab)}")
    if cfg.stage_resolutions[-1] != dataset.resolution:
        problems.append(f"final stage {cfg.stage_resolutions[-1]} px != dataset resolution {dataset.resolution}")
    if cfg.batch_size > len(dataset):
        problems.append(f"batch size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    if problems:
        raise DatasetError("incompatible dataset/encoders: " + "; ".join(problems))


def _embed(encoders: EncoderPair, captions) -> TextEmbedding:
    with torch.no_grad():
        return encoders.encode_text(*pad_captions(captions))


def gan_checkpoint(G, D, opt_g, opt_d, step, cfg: GanConfig, seed: int, history: LossHistory) -> Checkpoint:
    return Checkpoint(
        kind="gan",
        models={"G": G.state_dict(), "D": D.state_dict()},
        optimizers={"G": opt_g.state_dict(), "D": opt_d.state_dict()},
        counters={"step": step},
        config={"gan": asdict(cfg), "seed": seed},
        extra={"cond_dim": G.cond_dim, "history": history.rows},
    )


def load_generator(path: str | Path) -> Generator:
    ckpt = load_checkpoint(path, kind="gan")
    cfg = GanConfig(**ckpt.config["gan"])
    G, _ = build_models(cfg, ckpt.extra["cond_dim"])
    G.load_state_dict(ckpt.models["G"])
    return G.eval()


def train_gan(
    dataset: CaptionDataset,
    encoders: EncoderPair,
    cfg: GanConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
    gammas=(4.0, 5.0, 10.0),
) -> GanResult:
    """Alternate discriminator and generator updates for ``cfg.steps`` steps.

    The encoders are frozen in place. Each step draws one triplet batch and
    latent batch for ``D`` and a fresh pair for ``G``. Loss rows are
    ``(step, L_D, L_G1, L_G2, L_c, L_G)``.
    """
    check_compatible(dataset, encoders, cfg)
    encoders.freeze()
    torch.manual_seed(seed)
    G, D = build_models(cfg, encoders.embed_dim)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=(0.5, 0.999))
    sampler = TripletSampler(dataset, seed=seed)
    noise = torch.Generator().manual_seed(seed)
    history = LossHistory(list(LOSS_COLUMNS))
    out = Path(out_dir) if out_dir is not None else None
    written: list[Path] = []
    n = cfg.batch_size
    for step in range(1, cfg.steps + 1):
        batch = sampler.sample(n)
        z = torch.randn(n, cfg.z_dim, generator=noise)
        e, e_prime = _embed(encoders, batch.t), _embed(encoders, batch.t_prime)
        l_d = discriminator_step(D, G, opt_d, batch.x, z, e.sentence, e_prime.sentence)

        batch = sampler.sample(n)
        z = torch.randn(n, cfg.z_dim, generator=noise)
        e, e_prime = _embed(encoders, batch.t), _embed(encoders, batch.t_prime)
        g = generator_step(G, D, encoders, opt_g, z, e, e_prime, cfg, gammas)
        history.append(step, l_d, g.l_g1, g.l_g2, g.l_c, g.l_g)
        if step % 100 == 0:
            log.info("step %d  L_D %.3f  L_G %.3f  L_c %.3f", step, l_d, g.l_g, g.l_c)
        if out is not None and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            path = out / f"gan_step{step:06d}.pt"
            gan_checkpoint(G, D, opt_g, opt_d, step, cfg, seed, history).save(path)
            written.append(path)
    if out is not None:
        history.to_csv(out / "gan_losses.csv")
    G.eval()
    D.eval()
    return GanResult(G, D, history, cfg.steps, written)


@torch.no_grad()
def branch_consistency(
    G: Generator, encoders: EncoderPair, dataset: CaptionDataset, n_pairs: int = 100, seed: int = 0
) -> float:
    """Mean cosine of ``f(G(z, e))`` and ``f(G(z, e'))`` over paraphrase caption pairs."""
    G.eval()
    encoders.eval()
    sampler = TripletSampler(dataset, seed=seed)
    noise = torch.Generator().manual_seed(seed)
    sims = []
    remaining = n_pairs
    while remaining > 0:
        n = min(remaining, len(dataset))
        batch = sampler.sample(n)
        z = torch.randn(n, G.z_dim, generator=noise)
        e = encoders.encode_captions(batch.t).sentence
        e_prime = encoders.encode_captions(batch.t_prime).sentence
        v = encoders.encode_image(G(z, e)[-1]).global_vector
        v_prime = encoders.encode_image(G(z, e_prime)[-1]).global_vector
        sims.append(F.cosine_similarity(v, v_prime, dim=1))
        remaining -= n
    return torch.cat(sims).mean().item()
