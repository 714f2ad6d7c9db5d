import hashlib
import json
from collections import Counter

import numpy as np
import pytest

from contrastive_t2i.data import (
    CaptionDataset,
    DatasetError,
    SyntheticSpec,
    TripletSampler,
    Vocabulary,
    decode_caption,
    generate_synthetic,
    load_caption_dataset,
    normalize_caption,
    pad_captions,
    write_dataset,
)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_single_image_captions_share_label():
    syn = generate_synthetic(SyntheticSpec(color_dropout=0.0), n_images=1, captions_per_image=4, seed=3)
    labels = {decode_caption(c) for c in syn.texts[0]}
    assert labels == {syn.attributes[0]}


def test_captions_never_contradict_attributes():
    syn = generate_synthetic(n_images=200, seed=1)
    for attrs, caps in zip(syn.attributes, syn.texts):
        for c in caps:
            for got, want in zip(decode_caption(c), attrs):
                assert got in (None, want)
            assert decode_caption(c)[0] == attrs[0]


def test_captions_of_one_image_are_distinct_and_vary():
    syn = generate_synthetic(n_images=50, seed=2)
    for caps in syn.texts:
        assert len(set(caps)) == len(caps)


def test_label_encodes_shape_and_color():
    spec = SyntheticSpec()
    syn = generate_synthetic(spec, n_images=30, seed=4)
    for (shape, color, _), label in zip(syn.attributes, syn.dataset.labels):
        assert spec.class_names()[label] == f"{color} {shape}"


def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic(n_images=20, seed=7)
    b = generate_synthetic(n_images=20, seed=7)
    assert np.array_equal(a.dataset.images, b.dataset.images)
    assert a.texts == b.texts
    write_dataset(a.dataset, tmp_path / "a", a.texts)
    write_dataset(b.dataset, tmp_path / "b", b.texts)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    c = generate_synthetic(n_images=20, seed=8)
    assert c.texts != a.texts


def test_color_dropout_frequency():
    p = 0.3
    syn = generate_synthetic(SyntheticSpec(color_dropout=p), n_images=2500, captions_per_image=4, seed=0)
    caps = [c for cs in syn.texts for c in cs]
    dropped = sum(decode_caption(c)[1] is None for c in caps)
    n = len(caps)
    # distinctness resampling nudges the rate slightly; 4 binomial sigmas
    sigma = (p * (1 - p) / n) ** 0.5
    assert abs(dropped / n - p) < 4 * sigma + 0.01


def test_images_in_range_and_shape():
    syn = generate_synthetic(SyntheticSpec(resolution=16), n_images=5, seed=0)
    imgs = syn.dataset.images
    assert imgs.shape == (5, 16, 16, 3)
    assert imgs.min() >= -1.0 and imgs.max() <= 1.0


@pytest.mark.parametrize(
    "kwargs",
    [dict(captions_per_image=1), dict(n_images=0)],
)
def test_generation_rejects_bad_args(kwargs):
    with pytest.raises(DatasetError):
        generate_synthetic(**kwargs)


def test_spec_validation_names_field():
    with pytest.raises(DatasetError, match="shapes"):
        generate_synthetic(SyntheticSpec(shapes=["hexagon"]), n_images=2)
    with pytest.raises(DatasetError, match="colors"):
        generate_synthetic(SyntheticSpec(colors=[]), n_images=2)


def test_vocab_roundtrip():
    vocab = Vocabulary.build(["A red Circle, on a plain background!"])
    text = "A red Circle, on a plain background!"
    assert vocab.decode(vocab.encode(text)) == normalize_caption(text)
    assert vocab.encode("zebra") == [1]


def test_synthetic_vocab_size():
    syn = generate_synthetic(n_images=3, seed=0)
    assert 40 <= len(syn.dataset.vocab) <= 80


# --- manifest I/O -----------------------------------------------------------


def test_write_and_load_roundtrip(tmp_path):
    syn = generate_synthetic(n_images=6, seed=5)
    manifest = write_dataset(syn.dataset, tmp_path, syn.texts)
    ds = load_caption_dataset(manifest, vocab=syn.dataset.vocab)
    assert len(ds) == 6
    assert ds.captions == syn.dataset.captions
    assert np.array_equal(ds.labels, syn.dataset.labels)
    # PNG quantisation is at most half a grey level
    assert np.abs(ds.images - syn.dataset.images).max() <= 1.0 / 127.5 + 1e-6


def test_load_three_images_two_captions(tmp_path):
    from PIL import Image

    items = []
    for i in range(3):
        Image.new("RGB", (20, 20), (i * 40, 0, 0)).save(tmp_path / f"{i}.png")
        (tmp_path / f"{i}.txt").write_text(f"first caption {i}\nsecond caption {i}\n")
        items.append({"image": f"{i}.png", "caption_file": f"{i}.txt", "label": i})
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 1, "resolution": 8, "items": items}))
    ds = load_caption_dataset(tmp_path / "manifest.json")
    assert len(ds) == 3
    assert ds.images.shape == (3, 8, 8, 3)


def _manifest(tmp_path, item):
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 1, "resolution": 8, "items": [item]}))
    return tmp_path / "manifest.json"


def test_corrupt_image_names_path(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    m = _manifest(tmp_path, {"image": "bad.png", "captions": ["a b", "c d"]})
    with pytest.raises(DatasetError, match="bad.png"):
        load_caption_dataset(m)


def test_missing_file_names_path(tmp_path):
    m = _manifest(tmp_path, {"image": "nope.png", "captions": ["a b", "c d"]})
    with pytest.raises(DatasetError, match="nope.png"):
        load_caption_dataset(m)


def test_single_caption_rejected(tmp_path):
    from PIL import Image

    Image.new("RGB", (8, 8)).save(tmp_path / "x.png")
    m = _manifest(tmp_path, {"image": "x.png", "captions": ["only one", "Only one."[:-1]]})
    with pytest.raises(DatasetError, match="x.png"):
        load_caption_dataset(m)


def test_dataset_rejects_fewer_than_two_captions():
    with pytest.raises(DatasetError):
        CaptionDataset(np.zeros((1, 8, 8, 3), np.float32), (((2, 3),),), np.zeros(1, np.int64), Vocabulary.build(["a b"]))


# --- sampling ---------------------------------------------------------------


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(n_images=40, captions_per_image=4, seed=9).dataset


def test_triplet_constraints(small):
    sampler = TripletSampler(small, seed=0)
    for _ in range(200):
        b = sampler.sample(8)
        assert len(set(b.indices.tolist())) == 8
        for i, t, tp in zip(b.indices, b.t, b.t_prime):
            assert t != tp
            assert t in small.captions[i] and tp in small.captions[i]
        assert np.array_equal(b.x.permute(0, 2, 3, 1).numpy(), small.images[b.indices])


def test_two_caption_image_always_gives_that_pair():
    syn = generate_synthetic(n_images=5, captions_per_image=2, seed=0).dataset
    sampler = TripletSampler(syn, seed=1)
    for _ in range(50):
        b = sampler.sample(5)
        for i, t, tp in zip(b.indices, b.t, b.t_prime):
            assert {t, tp} == set(syn.captions[i])


def test_caption_frequency_uniform():
    syn = generate_synthetic(n_images=1, captions_per_image=4, seed=0).dataset
    sampler = TripletSampler(syn, seed=2)
    counts = Counter(sampler.sample(1).t[0] for _ in range(10_000))
    assert len(counts) == 4
    # binomial sd at p = 1/4, n = 10k is ~0.0043; allow 4 sd
    for c in counts.values():
        assert abs(c / 10_000 - 0.25) < 0.0175


def test_sampler_determinism(small):
    a, b = TripletSampler(small, seed=5), TripletSampler(small, seed=5)
    for _ in range(5):
        x, y = a.sample(6), b.sample(6)
        assert np.array_equal(x.indices, y.indices) and x.t == y.t and x.t_prime == y.t_prime


def test_epoch_is_a_permutation(small):
    seen = [i for b in TripletSampler(small, seed=0).epoch(8) for i in b.indices.tolist()]
    assert sorted(seen) == list(range(40))


def test_oversized_batch_rejected(small):
    with pytest.raises(DatasetError):
        TripletSampler(small).sample(41)


def test_pad_captions():
    tokens, lengths = pad_captions([(3, 4, 5), (6,)])
    assert tokens.tolist() == [[3, 4, 5], [6, 0, 0]]
    assert lengths.tolist() == [3, 1]
