"""Command-line harness.

Subcommands: make-data, pretrain, train, train-classifier, evaluate, ab, plot.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .config import ConfigError, RunConfig, load_config
from .data import CaptionDataset, SyntheticSpec, generate_synthetic, load_caption_dataset, load_vocab, save_vocab
from .gan import branch_consistency, load_generator, train_gan
from .history import LossHistory
from .matching import EncoderPair, caption_pair_similarity, pretrain
from .metrics import (
    FeatureClassifier,
    MetricsReport,
    evaluate_images,
    evaluation_queries,
    generate_for_captions,
    train_classifier,
)

log = logging.getLogger("contrastive_t2i")


# ---------------------------------------------------------------------------
# helpers


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def data_root(cfg: RunConfig) -> Path:
    root = Path(cfg.data.root)
    return root if root.is_absolute() else Path(cfg.out) / root


def load_split(cfg: RunConfig, split: str) -> CaptionDataset:
    root = data_root(cfg)
    manifest = _require(root / split / "manifest.json", f"{split} manifest")
    vocab = load_vocab(_require(root / "vocab.json", "vocabulary file"))
    return load_caption_dataset(manifest, cfg.data.resolution, vocab)


def _summary(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_make_data(cfg: RunConfig) -> Path:
    d = cfg.data
    spec = SyntheticSpec(
        shapes=list(d.shapes),
        colors=list(d.colors),
        sizes=list(d.sizes),
        resolution=d.resolution,
        color_dropout=d.color_dropout,
        position_jitter=d.position_jitter,
    )
    try:
        spec.validate()
    except data_mod.DatasetError as exc:
        raise ConfigError(f"data.{exc}") from None
    syn = generate_synthetic(spec, d.n_train + d.n_test, d.captions_per_image, cfg.seed)
    root = data_root(cfg)
    train_idx = range(d.n_train)
    test_idx = range(d.n_train, d.n_train + d.n_test)
    data_mod.write_dataset(syn.dataset.subset(train_idx), root / "train", [syn.texts[i] for i in train_idx])
    data_mod.write_dataset(syn.dataset.subset(test_idx), root / "test", [syn.texts[i] for i in test_idx])
    save_vocab(syn.dataset.vocab, root / "vocab.json")
    log.info("wrote %d train / %d test images under %s", d.n_train, d.n_test, root)
    return root


def cmd_pretrain(cfg: RunConfig, resume: Path | None = None):
    if resume is not None:
        _require(resume, "encoder checkpoint")
    train = load_split(cfg, "train")
    out = Path(cfg.out) / "pretrain"
    result = pretrain(train, cfg.matching, seed=cfg.seed, out_dir=out, resume=resume)
    test = load_split(cfg, "test")
    intra, inter = caption_pair_similarity(result.encoders, test, n_pairs=len(test), seed=cfg.seed)
    _summary(out / "summary.json", {"epoch": result.epoch, "step": result.step, "intra_cosine": intra, "inter_cosine": inter})
    log.info("pretraining done: intra %.3f  inter %.3f", intra, inter)
    return result


def _load_encoders(path: Path | None) -> EncoderPair:
    if path is None:
        raise ConfigError("an encoder checkpoint is required (--checkpoint / --encoders)")
    return EncoderPair.from_checkpoint(_require(path, "encoder checkpoint"))


def cmd_train(cfg: RunConfig, encoders_path: Path | None, out_name: str = "gan"):
    encoders = _load_encoders(encoders_path)
    train = load_split(cfg, "train")
    m = cfg.matching
    return train_gan(train, encoders, cfg.gan, seed=cfg.seed, out_dir=Path(cfg.out) / out_name, gammas=(m.gamma1, m.gamma2, m.gamma3))


def cmd_train_classifier(cfg: RunConfig) -> Path:
    train = load_split(cfg, "train")
    model, acc = train_classifier(train, cfg.metrics.classifier_epochs, cfg.seed)
    test = load_split(cfg, "test")
    x = data_mod.images_to_tensor(test.images)
    test_acc = (model.probs(x).argmax(1).numpy() == test.labels).mean()
    path = model.to_checkpoint({"seed": cfg.seed}).save(Path(cfg.out) / "classifier.pt")
    log.info("classifier: train acc %.3f  test acc %.3f", acc, test_acc)
    return path


def _gan_checkpoints(path: Path) -> list[Path]:
    if path.is_dir():
        found = sorted(path.glob("gan_step*.pt"))
        if not found:
            raise ConfigError(f"no gan_step*.pt checkpoints in {path}")
        return found
    return [_require(path, "GAN checkpoint")]


def cmd_evaluate(
    cfg: RunConfig,
    checkpoint: Path | None,
    encoders_path: Path | None,
    classifier_path: Path | None,
    real_as_fake: bool = False,
) -> MetricsReport:
    """Evaluate one checkpoint, or sweep a directory and keep the best FID."""
    if classifier_path is None or not Path(classifier_path).exists():
        raise ConfigError(f"classifier checkpoint missing: {classifier_path} (run train-classifier first)")
    extractor = FeatureClassifier.from_checkpoint(classifier_path)
    encoders = _load_encoders(encoders_path).eval()
    test = load_split(cfg, "test")
    mc = cfg.metrics
    reports_dir = Path(cfg.out) / "reports"
    if real_as_fake:
        owners = list(range(len(test)))
        captions = [caps[0] for caps in test.captions]
        fake = data_mod.images_to_tensor(test.images)
        report = evaluate_images(
            fake, owners, captions, test, encoders, extractor, "real-test-images",
            mc.is_splits, mc.rp_pool_size, mc.rp_repeats, cfg.seed, mc.batch_size,
        )
        report.save(reports_dir / "real-test-images.json")
        return report
    if checkpoint is None:
        raise ConfigError("evaluate needs --checkpoint (a GAN checkpoint or a directory of them)")
    owners, captions = evaluation_queries(test, mc.n_samples)
    reports = []
    for path in _gan_checkpoints(Path(checkpoint)):
        G = load_generator(path)
        fake = generate_for_captions(G, encoders, captions, cfg.seed, mc.batch_size)
        report = evaluate_images(
            fake, owners, captions, test, encoders, extractor, path.stem,
            mc.is_splits, mc.rp_pool_size, mc.rp_repeats, cfg.seed, mc.batch_size,
        )
        report.save(reports_dir / f"{path.stem}.json")
        log.info("%s  IS %.3f±%.3f  FID %.3f  R %.2f±%.2f", path.stem, report.is_mean, report.is_std, report.fid, report.rp_mean, report.rp_std)
        reports.append(report)
    # model selection: lowest FID, report its IS and R-precision alongside
    best = min(reports, key=lambda r: r.fid)
    best.save(reports_dir / "best.json")
    return best


def lc_reduction(history: LossHistory, head: int = 20, tail: int = 100) -> tuple[float, float, float]:
    """Relative drop of ``L_c`` from the mean of its first ``head`` steps to its last ``tail``."""
    lc = np.asarray(history.column("L_c"))
    initial = float(lc[:head].mean())
    final = float(lc[-tail:].mean())
    return initial, final, (initial - final) / initial


def cmd_ab(cfg: RunConfig, encoders_path: Path | None, n_pairs: int = 100) -> dict:
    """Seeds-matched runs at ``lambda_c = 0`` and the configured ``lambda_c``."""
    if cfg.gan.lambda_c == 0:
        raise ConfigError("gan.lambda_c: the A/B treatment arm needs lambda_c > 0")
    test = load_split(cfg, "test")
    arms = {}
    for name, lam in (("baseline", 0.0), ("contrastive", cfg.gan.lambda_c)):
        arm_cfg = replace(cfg, gan=replace(cfg.gan, lambda_c=lam))
        result = cmd_train(arm_cfg, encoders_path, out_name=f"ab/{name}")
        encoders = _load_encoders(encoders_path).eval()
        initial, final, drop = lc_reduction(result.history)
        arms[name] = {
            "lambda_c": lam,
            "branch_cosine": branch_consistency(result.G, encoders, test, n_pairs, seed=cfg.seed),
            "lc_initial": initial,
            "lc_final": final,
            "lc_reduction": drop,
        }
    report = {
        "seed": cfg.seed,
        "steps": cfg.gan.steps,
        "tau": cfg.gan.tau,
        "n_pairs": n_pairs,
        "arms": arms,
        "contrastive_more_consistent": arms["contrastive"]["branch_cosine"] > arms["baseline"]["branch_cosine"],
    }
    _summary(Path(cfg.out) / "ab" / "comparison.json", report)
    return report


def cmd_plot(csvs: list[Path], reports: list[Path], out_dir: Path, labels: list[str] | None = None) -> list[Path]:
    from .plotting import plot_loss_csv, plot_overlay, plot_reports

    for p in csvs + reports:
        _require(p, "plot input")
    written = [plot_loss_csv(p, out_dir) for p in csvs]
    if len(csvs) > 1:
        written += plot_overlay(csvs, labels or [p.parent.name for p in csvs], out_dir, smooth=20)
    if reports:
        written.append(plot_reports(reports, out_dir))
    return written


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--lambda-c", dest="lambda_c", type=float, help="contrastive weight for GAN training")
    common.add_argument("--tau", type=float, help="NT-Xent temperature (pretraining and GAN training)")
    common.add_argument("--checkpoint", type=Path, help="checkpoint to resume from / consume")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")

    parser = argparse.ArgumentParser(prog="contrastive-t2i", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-data", parents=[common], help="render the synthetic captioned dataset")
    sub.add_parser("pretrain", parents=[common], help="contrastive image-text matching pretraining")
    p = sub.add_parser("train", parents=[common], help="GAN training with frozen encoders (--checkpoint = encoders)")
    p.add_argument("--steps", type=int)
    sub.add_parser("train-classifier", parents=[common], help="fit the desk-scale feature extractor")
    p = sub.add_parser("evaluate", parents=[common], help="IS / FID / R-precision of a GAN checkpoint or directory")
    p.add_argument("--encoders", type=Path, required=True)
    p.add_argument("--classifier", type=Path)
    p.add_argument("--real-as-fake", action="store_true", help="score the real test images instead of generated ones")
    p = sub.add_parser("ab", parents=[common], help="seeds-matched lambda_c = 0 vs lambda_c runs (--checkpoint = encoders)")
    p.add_argument("--steps", type=int)
    p.add_argument("--pairs", type=int, default=100)
    p = sub.add_parser("plot", parents=[common], help="loss curves and metric plots")
    p.add_argument("--csv", type=Path, nargs="*", default=[])
    p.add_argument("--reports", type=Path, nargs="*", default=[])
    p.add_argument("--labels", nargs="*")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    if args.lambda_c is not None:
        cfg.gan.lambda_c = args.lambda_c
    if args.tau is not None:
        cfg.matching.tau = args.tau
        cfg.gan.tau = args.tau
    if getattr(args, "steps", None) is not None:
        cfg.gan.steps = args.steps
    return cfg.validate()


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return 0
        torch.manual_seed(cfg.seed)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        if args.command == "make-data":
            cmd_make_data(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.checkpoint)
        elif args.command == "train":
            cmd_train(cfg, args.checkpoint)
        elif args.command == "train-classifier":
            cmd_train_classifier(cfg)
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, args.checkpoint, args.encoders, args.classifier or Path(cfg.out) / "classifier.pt", args.real_as_fake)
            sys.stdout.write(report.to_json())
        elif args.command == "ab":
            report = cmd_ab(cfg, args.checkpoint, args.pairs)
            sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
        elif args.command == "plot":
            for p in cmd_plot(args.csv, args.reports, Path(cfg.out) / "plots", args.labels):
                print(p)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary maps to exit code 2
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
