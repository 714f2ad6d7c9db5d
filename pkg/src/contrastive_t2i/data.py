"""Captioned-image datasets: synthetic shapes, manifest I/O and triplet sampling.

Manifest format (``manifest.json``), one JSON object::

    {
      "format_version": 1,
      "resolution": 32,                    # square side images are resized to
      "items": [
        {
          "image": "images/000000.png",    # path relative to the manifest
          "caption_file": "text/000000.txt",  # one caption per line
          "captions": ["a red circle", ...],  # optional inline alternative
          "label": 3                       # integer class id, -1 if unknown
        },
        ...
      ],
      "classes": ["red circle", ...]       # optional names for label ids
    }

Each item needs either ``caption_file`` or ``captions`` and at least two
captions after blank lines are dropped. CUB/COCO layouts are adapted by
writing one item per image pointing at its caption text file.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

MANIFEST_VERSION = 1
PAD, UNK = "<pad>", "<unk>"


class DatasetError(ValueError):
    """Malformed dataset, manifest or sampling request."""


# ---------------------------------------------------------------------------
# vocabulary


_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def normalize_caption(text: str) -> str:
    return " ".join(_TOKEN_RE.findall(text.lower()))


def split_tokens(text: str) -> list[str]:
    """Lowercased whitespace + punctuation tokenisation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise DatasetError("vocabulary must start with <pad>, <unk>")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, captions: Sequence[str]) -> "Vocabulary":
        words = sorted({w for c in captions for w in split_tokens(c)})
        return cls([PAD, UNK] + words)

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    def encode(self, text: str) -> list[int]:
        ids = [self.index.get(w, 1) for w in split_tokens(text)]
        if not ids:
            raise DatasetError(f"caption {text!r} has no tokens")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i != 0)


# ---------------------------------------------------------------------------
# dataset container


@dataclass(frozen=True)
class CaptionedImage:
    image: np.ndarray  # H x W x 3 in [-1, 1]
    captions: tuple[tuple[int, ...], ...]
    label: int = -1


@dataclass(frozen=True)
class CaptionDataset:
    """Immutable list of captioned images sharing a resolution and vocabulary."""

    images: np.ndarray  # M x H x W x 3, float32 in [-1, 1]
    captions: tuple[tuple[tuple[int, ...], ...], ...]
    labels: np.ndarray  # M, int64
    vocab: Vocabulary
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.images) != len(self.captions) or len(self.images) != len(self.labels):
            raise DatasetError("images, captions and labels must have equal length")
        for i, caps in enumerate(self.captions):
            if len(caps) < 2:
                raise DatasetError(f"image {i} has {len(caps)} caption(s); at least 2 are required")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i: int) -> CaptionedImage:
        return CaptionedImage(self.images[i], self.captions[i], int(self.labels[i]))

    @property
    def resolution(self) -> int:
        return int(self.images.shape[1])

    def caption_text(self, i: int, k: int) -> str:
        return self.vocab.decode(self.captions[i][k])

    def subset(self, indices: Sequence[int]) -> "CaptionDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return CaptionDataset(
            self.images[idx].copy(),
            tuple(self.captions[i] for i in idx),
            self.labels[idx].copy(),
            self.vocab,
            self.classes,
        )


# ---------------------------------------------------------------------------
# synthetic shapes


SHAPES = {
    "circle": ["circle", "disc", "round blob"],
    "square": ["square", "box", "block"],
    "triangle": ["triangle", "wedge"],
    "diamond": ["diamond", "rhombus"],
    "cross": ["cross", "plus sign"],
}
COLORS = {
    "red": ((220, 40, 40), ["red", "crimson", "scarlet"]),
    "green": ((40, 190, 60), ["green", "emerald"]),
    "blue": ((40, 80, 230), ["blue", "azure", "navy"]),
    "yellow": ((235, 215, 40), ["yellow", "golden"]),
    "purple": ((150, 50, 200), ["purple", "violet"]),
    "cyan": ((40, 210, 220), ["cyan", "teal"]),
}
SIZES = {
    "small": (0.45, ["small", "little", "tiny"]),
    "large": (0.8, ["large", "big", "huge"]),
}
BACKGROUND = (235, 235, 235)

_TEMPLATES = [
    "a {size} {color} {shape}",
    "a {color} {shape} that is {size}",
    "there is a {size} {color} {shape} in the picture",
    "this image shows a {color} {shape} , it is {size}",
    "the {shape} is {color} and {size}",
    "an image of a {size} {color} {shape} on a plain background",
]
# same templates with the colour slot removed
_TEMPLATES_NO_COLOR = [
    "a {size} {shape}",
    "a {shape} that is {size}",
    "there is a {size} {shape} in the picture",
    "this image shows a {shape} , it is {size}",
    "the {shape} is {size}",
    "an image of a {size} {shape} on a plain background",
]


@dataclass
class SyntheticSpec:
    """Attribute grid and paraphrase knobs for the synthetic dataset."""

    shapes: list[str] = field(default_factory=lambda: list(SHAPES))
    colors: list[str] = field(default_factory=lambda: list(COLORS))
    sizes: list[str] = field(default_factory=lambda: list(SIZES))
    resolution: int = 32
    color_dropout: float = 0.15
    position_jitter: float = 0.15

    def validate(self) -> None:
        for name, chosen, known in (
            ("shapes", self.shapes, SHAPES),
            ("colors", self.colors, COLORS),
            ("sizes", self.sizes, SIZES),
        ):
            if not chosen:
                raise DatasetError(f"{name}: grid must be nonempty")
            unknown = [c for c in chosen if c not in known]
            if unknown:
                raise DatasetError(f"{name}: unknown values {unknown}; choose from {sorted(known)}")
        if self.resolution < 8:
            raise DatasetError(f"resolution: must be >= 8, got {self.resolution}")
        if not 0.0 <= self.color_dropout <= 1.0:
            raise DatasetError(f"color_dropout: must lie in [0, 1], got {self.color_dropout}")
        if not 0.0 <= self.position_jitter < 0.5:
            raise DatasetError(f"position_jitter: must lie in [0, 0.5), got {self.position_jitter}")

    def class_names(self) -> list[str]:
        return [f"{c} {s}" for s, c in product(self.shapes, self.colors)]


def _shape_mask(shape: str, res: int, cx: float, cy: float, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    dx, dy = (xs - cx) / radius, (ys - cy) / radius
    if shape == "circle":
        return dx**2 + dy**2 <= 1.0
    if shape == "square":
        return (np.abs(dx) <= 0.8) & (np.abs(dy) <= 0.8)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.0
    if shape == "triangle":
        return (dy <= 0.8) & (dy >= -1.0 + 2 * np.abs(dx) * 0.9)
    if shape == "cross":
        return ((np.abs(dx) <= 0.3) & (np.abs(dy) <= 1.0)) | ((np.abs(dy) <= 0.3) & (np.abs(dx) <= 1.0))
    raise DatasetError(f"unknown shape {shape!r}")


def render_shape(shape: str, color: str, size: str, res: int, offset=(0.0, 0.0)) -> np.ndarray:
    """Render one shape as an ``res x res x 3`` uint8 array."""
    img = np.empty((res, res, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    radius = SIZES[size][0] * res / 2
    cx = res / 2 + offset[0] * res
    cy = res / 2 + offset[1] * res
    img[_shape_mask(shape, res, cx, cy, radius)] = COLORS[color][0]
    return img


def make_caption(shape: str, color: str, size: str, rng: np.random.Generator, color_dropout: float) -> str:
    drop = rng.random() < color_dropout
    templates = _TEMPLATES_NO_COLOR if drop else _TEMPLATES
    template = templates[rng.integers(len(templates))]
    words = {
        "shape": SHAPES[shape][rng.integers(len(SHAPES[shape]))],
        "color": COLORS[color][1][rng.integers(len(COLORS[color][1]))],
        "size": SIZES[size][1][rng.integers(len(SIZES[size][1]))],
    }
    return template.format(**words)


def decode_caption(text: str) -> tuple[str | None, str | None, str | None]:
    """Recover ``(shape, color, size)`` from a synthetic caption; ``None`` if absent."""
    text = " " + normalize_caption(text) + " "

    def find(table):
        hits = {key for key, syns in table.items() for s in syns if f" {s} " in text}
        if len(hits) > 1:
            raise DatasetError(f"caption {text.strip()!r} is ambiguous: {sorted(hits)}")
        return hits.pop() if hits else None

    return (
        find(SHAPES),
        find({k: v[1] for k, v in COLORS.items()}),
        find({k: v[1] for k, v in SIZES.items()}),
    )


def _synthetic_vocab() -> Vocabulary:
    texts = list(_TEMPLATES) + list(_TEMPLATES_NO_COLOR)
    texts += [s for v in SHAPES.values() for s in v]
    texts += [s for v in COLORS.values() for s in v[1]]
    texts += [s for v in SIZES.values() for s in v[1]]
    texts = [re.sub(r"\{\w+\}", " ", t) for t in texts]
    return Vocabulary.build(texts)


@dataclass
class SyntheticDataset:
    dataset: CaptionDataset
    texts: list[list[str]]
    attributes: list[tuple[str, str, str]]


def generate_synthetic(
    spec: SyntheticSpec | None = None,
    n_images: int = 500,
    captions_per_image: int = 4,
    seed: int = 0,
) -> SyntheticDataset:
    """Render ``n_images`` single-shape images with paraphrased captions.

    Class labels index ``(shape, color)`` pairs; size is left out of the label
    so the metrics classifier has a manageable number of classes.
    """
    spec = spec or SyntheticSpec()
    spec.validate()
    if captions_per_image < 2:
        raise DatasetError(f"captions_per_image: must be >= 2, got {captions_per_image}")
    if n_images < 1:
        raise DatasetError(f"n_images: must be >= 1, got {n_images}")
    rng = np.random.default_rng(seed)
    vocab = _synthetic_vocab()
    res = spec.resolution
    images = np.empty((n_images, res, res, 3), dtype=np.float32)
    captions, texts, attrs, labels = [], [], [], []
    for i in range(n_images):
        shape = spec.shapes[rng.integers(len(spec.shapes))]
        color = spec.colors[rng.integers(len(spec.colors))]
        size = spec.sizes[rng.integers(len(spec.sizes))]
        offset = rng.uniform(-spec.position_jitter, spec.position_jitter, size=2)
        images[i] = to_signed(render_shape(shape, color, size, res, tuple(offset)))
        caps: list[str] = []
        for _ in range(100 * captions_per_image):
            c = make_caption(shape, color, size, rng, spec.color_dropout)
            if c not in caps:
                caps.append(c)
            if len(caps) == captions_per_image:
                break
        else:
            raise DatasetError(
                f"captions_per_image: cannot draw {captions_per_image} distinct captions for {shape}/{color}/{size}"
            )
        texts.append(caps)
        captions.append(tuple(tuple(vocab.encode(c)) for c in caps))
        attrs.append((shape, color, size))
        labels.append(spec.shapes.index(shape) * len(spec.colors) + spec.colors.index(color))
    ds = CaptionDataset(images, tuple(captions), np.asarray(labels, dtype=np.int64), vocab, tuple(spec.class_names()))
    return SyntheticDataset(ds, texts, attrs)


def to_signed(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 127.5 - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# persistence


def write_dataset(ds: CaptionDataset, root: str | Path, texts: Sequence[Sequence[str]] | None = None) -> Path:
    """Write images as PNG, captions as text files and a manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "text").mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(len(ds)):
        img_rel, txt_rel = f"images/{i:06d}.png", f"text/{i:06d}.txt"
        Image.fromarray(to_uint8(ds.images[i])).save(root / img_rel, format="PNG")
        caps = texts[i] if texts is not None else [ds.vocab.decode(c) for c in ds.captions[i]]
        (root / txt_rel).write_text("\n".join(caps) + "\n")
        items.append({"image": img_rel, "caption_file": txt_rel, "label": int(ds.labels[i])})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "resolution": ds.resolution,
        "classes": list(ds.classes),
        "items": items,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_caption_dataset(
    manifest_path: str | Path,
    resolution: int | None = None,
    vocab: Vocabulary | None = None,
) -> CaptionDataset:
    """Load a manifest-described dataset.

    Images are converted to RGB and resized to ``resolution`` (default: the
    manifest's). Without ``vocab`` one is built from all captions; with one,
    unknown words map to ``<unk>``.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(
            f"{manifest_path}: unsupported format_version {manifest.get('format_version')!r}"
        )
    res = resolution or manifest.get("resolution")
    if not res:
        raise DatasetError(f"{manifest_path}: no resolution given")
    base = manifest_path.parent
    images, texts, labels = [], [], []
    for n, item in enumerate(manifest.get("items", [])):
        img_path = base / item["image"]
        if not img_path.is_file():
            raise DatasetError(f"missing image file: {img_path}")
        try:
            with Image.open(img_path) as im:
                im = im.convert("RGB")
                if im.size != (res, res):
                    im = im.resize((res, res), Image.BICUBIC)
                images.append(to_signed(np.asarray(im)))
        except (UnidentifiedImageError, OSError) as exc:
            raise DatasetError(f"cannot read image {img_path}: {exc}") from exc
        if "captions" in item:
            caps = list(item["captions"])
        elif "caption_file" in item:
            cap_path = base / item["caption_file"]
            if not cap_path.is_file():
                raise DatasetError(f"missing caption file: {cap_path}")
            caps = cap_path.read_text().splitlines()
        else:
            raise DatasetError(f"item {n} ({img_path}) has neither 'captions' nor 'caption_file'")
        # duplicates would break the t != t' constraint
        caps = list(dict.fromkeys(normalize_caption(c) for c in caps if c.strip()))
        if len(caps) < 2:
            raise DatasetError(f"image {img_path} has {len(caps)} caption(s); at least 2 are required")
        texts.append(caps)
        labels.append(int(item.get("label", -1)))
    if not images:
        raise DatasetError(f"{manifest_path}: manifest lists no items")
    vocab = vocab or Vocabulary.build([c for caps in texts for c in caps])
    captions = tuple(tuple(tuple(vocab.encode(c)) for c in caps) for caps in texts)
    return CaptionDataset(
        np.stack(images).astype(np.float32),
        captions,
        np.asarray(labels, dtype=np.int64),
        vocab,
        tuple(manifest.get("classes", ())),
    )


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(vocab.tokens) + "\n")


def load_vocab(path: str | Path) -> Vocabulary:
    return Vocabulary(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# triplet sampling


def pad_captions(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token sequences into a ``B x T`` LongTensor plus lengths."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), int(lengths.max())), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out, lengths


@dataclass
class TripletBatch:
    indices: np.ndarray
    x: torch.Tensor  # N x 3 x H x W
    t: list[tuple[int, ...]]
    t_prime: list[tuple[int, ...]]

    def __len__(self):
        return len(self.indices)

    def padded(self) -> tuple[tuple[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]:
        return pad_captions(self.t), pad_captions(self.t_prime)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


class TripletSampler:
    """Draws ``(x, t, t')`` batches from a private seeded stream.

    Not thread-safe; give each consumer its own sampler.
    """

    def __init__(self, dataset: CaptionDataset, seed: int = 0):
        if len(dataset) == 0:
            raise DatasetError("cannot sample from an empty dataset")
        self.dataset = dataset
        self.rng = np.random.default_rng(seed)

    def _batch(self, idx: np.ndarray) -> TripletBatch:
        t, tp = [], []
        for i in idx:
            caps = self.dataset.captions[i]
            a, b = self.rng.choice(len(caps), size=2, replace=False)
            t.append(caps[a])
            tp.append(caps[b])
        x = images_to_tensor(self.dataset.images[idx])
        return TripletBatch(idx, x, t, tp)

    def sample(self, n: int) -> TripletBatch:
        """N distinct images, each with two distinct captions of its own."""
        if n > len(self.dataset):
            raise DatasetError(f"batch size {n} exceeds dataset size {len(self.dataset)}")
        if n < 1:
            raise DatasetError(f"batch size must be >= 1, got {n}")
        return self._batch(self.rng.choice(len(self.dataset), size=n, replace=False))

    def epoch(self, n: int) -> Iterator[TripletBatch]:
        """One shuffled pass over the images; the ragged tail batch is dropped."""
        if n > len(self.dataset):
            raise DatasetError(f"batch size {n} exceeds dataset size {len(self.dataset)}")
        order = self.rng.permutation(len(self.dataset))
        for start in range(0, len(order) - n + 1, n):
            yield self._batch(order[start : start + n])
