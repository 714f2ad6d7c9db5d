import math

import numpy as np
import pytest
import torch

from contrastive_t2i.config import MatchingConfig
from contrastive_t2i.contrastive import nt_xent_batch_loss
from contrastive_t2i.data import DatasetError, TripletSampler, generate_synthetic, pad_captions
from contrastive_t2i.matching import (
    EncoderPair,
    ImageEmbedding,
    TextEmbedding,
    damsm_loss,
    damsm_terms,
    make_optimizer,
    pretrain,
    pretrain_losses,
    pretrain_step,
)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(n_images=48, seed=0).dataset


@pytest.fixture
def encoders(ds):
    torch.manual_seed(0)
    return EncoderPair(len(ds.vocab), ds.resolution, embed_dim=16, word_dim=8, image_channels=8)


# --- encoders ---------------------------------------------------------------


def test_zero_image_with_zero_projection_gives_bias(encoders):
    f = encoders.image_encoder
    with torch.no_grad():
        f.global_proj.weight.zero_()
    out = f(torch.zeros(2, 3, 32, 32)).global_vector
    assert torch.equal(out, f.global_proj.bias.expand(2, -1))


def test_image_encoder_shapes_and_determinism(encoders):
    encoders.eval()
    x = torch.randn(5, 3, 32, 32)
    a, b = encoders.encode_image(x), encoders.encode_image(x)
    assert a.global_vector.shape == (5, 16)
    assert a.regions.shape == (5, 16, 16)
    assert torch.equal(a.global_vector, b.global_vector) and torch.equal(a.regions, b.regions)
    single = encoders.encode_image(x[3:4]).global_vector
    assert torch.allclose(single[0], a.global_vector[3], atol=1e-6)


def test_image_encoder_rejects_wrong_resolution(encoders):
    with pytest.raises(ValueError, match="32"):
        encoders.encode_image(torch.zeros(1, 3, 16, 16))


def test_text_identical_captions_identical_vectors(encoders, ds):
    encoders.eval()
    cap = ds.captions[0][0]
    out = encoders.encode_captions([cap, cap]).sentence
    assert torch.equal(out[0], out[1])


def test_text_padding_does_not_leak(encoders, ds):
    encoders.eval()
    cap = ds.captions[0][0]
    tokens, lengths = pad_captions([cap])
    padded = torch.cat([tokens, torch.full((1, 5), 7)], dim=1)  # junk beyond the mask
    a = encoders.encode_text(tokens, lengths)
    b = encoders.encode_text(padded, lengths)
    assert torch.allclose(a.sentence, b.sentence, atol=1e-6)
    assert b.words[0, len(cap):].abs().max() == 0


def test_text_permutation(encoders, ds):
    encoders.eval()
    caps = [ds.captions[i][0] for i in range(6)]
    out = encoders.encode_captions(caps).sentence
    perm = [4, 2, 0, 5, 1, 3]
    out_p = encoders.encode_captions([caps[i] for i in perm]).sentence
    assert torch.allclose(out_p, out[perm], atol=1e-6)


def test_text_rejects_out_of_vocab(encoders):
    with pytest.raises(ValueError, match="vocabulary"):
        encoders.encode_text(torch.tensor([[1, 999]]), torch.tensor([2]))


def test_shared_text_encoder(encoders, ds):
    """Both caption branches go through the same module instance."""
    sampler = TripletSampler(ds, 0)
    batch = sampler.sample(4)
    before = pretrain_losses(encoders, batch, 0.5)
    with torch.no_grad():
        encoders.text_encoder.embedding.weight.mul_(2)
    after = pretrain_losses(encoders, batch, 0.5)
    assert after[0].item() != before[0].item() and after[1].item() != before[1].item()


# --- DAMSM ------------------------------------------------------------------


def damsm_oracle(glob, regions, sent, words, lengths, g1, g2, g3):
    """Straight-line loops over every (image, caption) pair."""
    b = len(glob)

    def cos(a, c):
        return float(a @ c / (np.linalg.norm(a) * np.linalg.norm(c)))

    def relevance(i, j):
        w = words[j][: lengths[j]]
        v = regions[i]
        s = w @ v.T  # T x R
        s = np.exp(s - s.max(axis=0, keepdims=True))
        s = s / s.sum(axis=0, keepdims=True)  # over words
        total = 0.0
        for t in range(len(w)):
            a = np.exp(g1 * s[t] - (g1 * s[t]).max())
            a = a / a.sum()  # over regions
            c = (a[:, None] * v).sum(axis=0)
            total += math.exp(g2 * cos(c, w[t]))
        return math.log(total) / g2

    def nll(scores):
        i2t = t2i = 0.0
        for i in range(b):
            i2t -= g3 * scores[i][i] - math.log(sum(math.exp(g3 * scores[i][j]) for j in range(b)))
            t2i -= g3 * scores[i][i] - math.log(sum(math.exp(g3 * scores[j][i]) for j in range(b)))
        return i2t / b, t2i / b

    word = [[relevance(i, j) for j in range(b)] for i in range(b)]
    sentence = [[cos(glob[i], sent[j]) for j in range(b)] for i in range(b)]
    return (*nll(word), *nll(sentence))


def random_embeddings(rng, b=4, r=5, t=6, d=8):
    lengths = rng.integers(1, t + 1, size=b)
    lengths[0] = t
    words = rng.normal(size=(b, t, d))
    for j in range(b):
        words[j, lengths[j]:] = 0
    return (
        rng.normal(size=(b, d)),
        rng.normal(size=(b, r, d)),
        rng.normal(size=(b, d)),
        words,
        lengths,
    )


def to_embeddings(glob, regions, sent, words, lengths):
    t = lambda a: torch.from_numpy(np.asarray(a))  # noqa: E731
    return ImageEmbedding(t(glob), t(regions)), TextEmbedding(t(sent), t(words), t(lengths))


def test_damsm_matches_oracle():
    rng = np.random.default_rng(0)
    for gammas in [(4.0, 5.0, 10.0), (1.0, 2.0, 3.0)]:
        for _ in range(5):
            raw = random_embeddings(rng)
            img, txt = to_embeddings(*raw)
            got = [x.item() for x in damsm_terms(img, txt, *gammas)]
            want = damsm_oracle(*raw, *gammas)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("b", [2, 3, 8])
def test_damsm_uniform_posterior(b):
    rng = np.random.default_rng(b)
    glob, regions, sent, words, lengths = random_embeddings(rng, b=1)
    raw = (
        np.repeat(glob, b, 0),
        np.repeat(regions, b, 0),
        np.repeat(sent, b, 0),
        np.repeat(words, b, 0),
        np.repeat(lengths, b, 0),
    )
    terms = damsm_terms(*to_embeddings(*raw))
    for term in terms:
        assert term.item() == pytest.approx(math.log(b), abs=1e-6)


def test_damsm_saturates_for_separated_pairs():
    d = 8
    basis = np.eye(d)
    b = 4
    glob = basis[:b] * 10
    regions = np.repeat(basis[:b, None, :], 3, axis=1) * 10
    sent = basis[:b] * 10
    words = np.repeat(basis[:b, None, :], 2, axis=1) * 10
    lengths = np.full(b, 2)
    terms = damsm_terms(*to_embeddings(glob, regions, sent, words, lengths), gamma3=50.0)
    assert sum(t.item() for t in terms) < 1e-6


def test_damsm_permutation_invariant():
    rng = np.random.default_rng(3)
    raw = random_embeddings(rng, b=5)
    perm = rng.permutation(5)
    permuted = tuple(np.asarray(a)[perm] for a in raw)
    a = damsm_loss(*to_embeddings(*raw)).item()
    b = damsm_loss(*to_embeddings(*permuted)).item()
    assert a == pytest.approx(b, rel=1e-10)


def test_damsm_rejects_batch_of_one():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="at least 2"):
        damsm_loss(*to_embeddings(*random_embeddings(rng, b=1)))


# --- pretraining ------------------------------------------------------------


def test_pretrain_step_components(encoders, ds):
    batch = TripletSampler(ds, 1).sample(8)
    opt = make_optimizer(encoders.parameters(), 2e-4)
    with torch.no_grad():
        l1, l2, lc, total = pretrain_losses(encoders, batch, 0.5)
        (t, tl), (tp, tpl) = batch.padded()
        expected_lc = nt_xent_batch_loss(encoders.encode_text(t, tl).sentence, encoders.encode_text(tp, tpl).sentence, 0.5)
    assert lc.item() == expected_lc.item()
    assert total.item() == pytest.approx(l1.item() + l2.item() + lc.item(), rel=1e-6)
    out = pretrain_step(encoders, batch, opt, 0.5)
    assert all(math.isfinite(v) and v >= 0 for v in out)
    assert out.lc == pytest.approx(lc.item(), rel=1e-6)


def test_pretrain_identical_branches_bounded_by_log(encoders, ds):
    batch = TripletSampler(ds, 2).sample(6)
    batch.t_prime = list(batch.t)
    with torch.no_grad():
        _, _, lc, _ = pretrain_losses(encoders, batch, 0.5)
    assert lc.item() <= math.log(2 * 6 - 1) + 1e-6
    # every caption identical: all similarities are 1
    batch.t = [batch.t[0]] * 6
    batch.t_prime = list(batch.t)
    encoders.eval()
    with torch.no_grad():
        _, _, lc, _ = pretrain_losses(encoders, batch, 0.5)
    assert lc.item() == pytest.approx(math.log(11), abs=1e-5)


def test_pretrain_updates_both_encoders(encoders, ds):
    batch = TripletSampler(ds, 3).sample(8)
    opt = make_optimizer(encoders.parameters(), 1e-3)
    f0 = encoders.image_encoder.global_proj.weight.clone()
    g0 = encoders.text_encoder.embedding.weight.clone()
    pretrain_step(encoders, batch, opt, 0.5)
    assert not torch.equal(f0, encoders.image_encoder.global_proj.weight)
    assert not torch.equal(g0, encoders.text_encoder.embedding.weight)


SMALL = MatchingConfig(embed_dim=16, word_dim=8, image_channels=8, batch_size=8, epochs=1)


def test_pretrain_one_epoch_writes_checkpoint(tmp_path):
    ds = generate_synthetic(n_images=32, seed=1).dataset
    res = pretrain(ds, SMALL, seed=0, out_dir=tmp_path)
    assert len(res.checkpoints) == 1 and res.checkpoints[0].exists()
    assert (tmp_path / "pretrain_losses.csv").read_text().splitlines()[0] == "epoch,L1,L2,Lc"
    assert len(res.history) == 1
    restored = EncoderPair.from_checkpoint(res.checkpoints[0])
    for a, b in zip(restored.state_dict().values(), res.encoders.state_dict().values()):
        assert torch.equal(a, b)


def test_pretrain_deterministic():
    ds = generate_synthetic(n_images=32, seed=1).dataset
    cfg = MatchingConfig(**{**SMALL.__dict__, "epochs": 2})
    a = pretrain(ds, cfg, seed=4)
    b = pretrain(ds, cfg, seed=4)
    assert a.history.rows == b.history.rows


def test_pretrain_resume_continues_counters(tmp_path):
    ds = generate_synthetic(n_images=32, seed=1).dataset
    first = pretrain(ds, SMALL, seed=0, out_dir=tmp_path / "a")
    second = pretrain(ds, SMALL, seed=0, out_dir=tmp_path / "b", resume=first.checkpoints[0])
    assert second.epoch == 2
    assert second.step == 2 * first.step
    assert [r[0] for r in second.history.rows] == [1, 2]


def test_pretrain_rejects_oversized_batch():
    ds = generate_synthetic(n_images=4, seed=1).dataset
    with pytest.raises(DatasetError):
        pretrain(ds, SMALL, seed=0)
