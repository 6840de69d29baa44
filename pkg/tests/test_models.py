import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cranisynth.errors import ArgumentError, StateError
from cranisynth.models import (
    LatentCode,
    NetworkConfig,
    ProbabilityMap,
    SegmentationModel,
    SynthesisModel,
    decode,
    discriminator_loss,
    discriminator_step,
    encode,
    feature_stack,
    heatmap_to_segmentation,
    kl_divergence,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    segment,
    segmentation_loss,
    synthesis_loss,
    synthesize,
)
from cranisynth.volume import LabelMap, Modality, Volume

from oracles import gradient_relative_error, kl_closed_form, kl_monte_carlo, loss_probes

SMALL = NetworkConfig(base_channels=4, latent_channels=2, downsampling_levels=2, discriminator_levels=2)


def _vol(rng, n=16, modality=Modality.MRI):
    return Volume(rng.random((n, n, n)).astype(np.float32), modality=modality)


def test_kl_examples():
    z = lambda m, lv: LatentCode(np.full((2, 3, 3, 3), m), np.full((2, 3, 3, 3), lv))
    assert kl_divergence(z(0.0, 0.0)) == 0.0
    assert kl_divergence(z(1.0, 0.0)) == pytest.approx(0.5, abs=1e-9)
    assert kl_divergence(z(0.0, math.log(4))) == pytest.approx(0.5 * (4 - 1 - math.log(4)), abs=1e-9)
    assert 0.5 * (4 - 1 - math.log(4)) == pytest.approx(0.8069, abs=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_kl_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    mu, lv = rng.normal(0, 1, 6), rng.normal(0, 0.7, 6)
    exact = kl_divergence(LatentCode(mu, lv))
    assert exact == pytest.approx(kl_closed_form(mu, lv) / 6, rel=1e-12)
    assert kl_monte_carlo(mu, lv, 100_000, rng) / 6 == pytest.approx(exact, rel=0.02)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_kl_nonnegative(mu, lv):
    n = min(len(mu), len(lv))
    assert kl_divergence(LatentCode(mu[:n], lv[:n])) >= -1e-12


def test_latent_clamped():
    z = LatentCode([0.0, 0.0], [-100.0, 100.0])
    assert z.log_variance.tolist() == [-30.0, 20.0]
    assert math.isfinite(kl_divergence(z))


@pytest.mark.parametrize("name", [p[0] for p in loss_probes()])
def test_gradient_matches_finite_differences(name):
    (_, f, x), = [p for p in loss_probes() if p[0] == name]
    assert gradient_relative_error(f, x, h=1e-3) < 1e-3


def test_synthesis_loss_examples(rng):
    cfg = NetworkConfig()
    a = rng.random((8, 8, 8))
    feats = [(np.ones((2, 4, 4, 4)), np.ones((2, 4, 4, 4)))]
    z0 = LatentCode(np.zeros(4), np.zeros(4))
    total, terms = synthesis_loss(a, a, z0, np.ones((1, 1, 2, 2, 2)), feats, cfg)
    assert total == 0.0 and set(terms) == {"reconstruction", "adversarial", "kl", "perceptual"}
    only_rec = NetworkConfig(lambda_adv=0, lambda_kl=0, lambda_perc=0, lambda_rec=2.0)
    total, _ = synthesis_loss(a + 0.1, a, LatentCode([1.0], [0.5]), np.zeros(3), feats, only_rec)
    assert total == pytest.approx(0.2, abs=1e-9)


def test_synthesis_loss_matches_recomputation(rng):
    cfg = NetworkConfig()
    sct, ct = rng.random((8, 8, 8)), rng.random((8, 8, 8))
    mu, lv = rng.normal(size=5), rng.normal(size=5)
    score = rng.random((1, 1, 3, 3, 3))
    fa, fb = rng.random((3, 4, 4, 4)), rng.random((3, 4, 4, 4))
    total, terms = synthesis_loss(sct, ct, LatentCode(mu, lv), score, [(fa, fb)], cfg)
    ref = (cfg.lambda_rec * np.abs(sct - ct).mean() + cfg.lambda_adv * ((score - 1) ** 2).mean()
           + cfg.lambda_kl * kl_closed_form(mu, lv) / 5 + cfg.lambda_perc * ((fa - fb) ** 2).mean())
    assert total == pytest.approx(ref, abs=1e-6)
    with pytest.raises(ArgumentError):
        synthesis_loss(sct, ct[:4], LatentCode(mu, lv), score, [], cfg)


def test_discriminator_loss_examples(rng):
    ones, zeros = np.ones((2, 2, 2)), np.zeros((2, 2, 2))
    assert discriminator_loss([ones, ones], [zeros, zeros]) == 0.0
    assert discriminator_loss(zeros, ones) == 1.0
    r = [rng.random((3, 3, 3)), rng.random((2, 2, 2))]
    f = [rng.random((3, 3, 3)), rng.random((2, 2, 2))]
    ref = np.mean([0.5 * (((ri - 1) ** 2).mean() + (fi ** 2).mean()) for ri, fi in zip(r, f)])
    assert discriminator_loss(r, f) == pytest.approx(ref, abs=1e-6)


def test_discriminator_step_updates(rng):
    m = SynthesisModel(SMALL)
    real, fake = _vol(rng, modality=Modality.CT), _vol(rng, modality=Modality.SCT)
    opt = torch.optim.Adam(m.discriminator.parameters(), 1e-2)
    first = discriminator_step(real, fake, m, opt)
    for _ in range(5):
        last = discriminator_step(real, fake, m, opt)
    assert last < first


def _onehot_pm(lab):
    return ProbabilityMap(LabelMap(lab).one_hot())


def test_segmentation_loss_examples(rng):
    lab = rng.integers(0, 9, (8, 8, 8)).astype(np.uint8)
    total, _ = segmentation_loss(_onehot_pm(lab), LabelMap(lab), NetworkConfig())
    assert abs(total) < 1e-6


def test_segmentation_loss_uniform_oracle():
    lab = np.zeros((8, 8, 8), np.uint8)
    lab[2:5, 2:6, 1:4] = 3
    lab[6, 6, 6] = 8
    gt = LabelMap(lab)
    p = ProbabilityMap(np.full((9, 8, 8, 8), 1 / 9))
    cfg = NetworkConfig()
    total, terms = segmentation_loss(p, gt, cfg)
    g = gt.one_hot().astype(np.float64)
    inter = (g / 9).sum(axis=(1, 2, 3))
    denom = g.sum(axis=(1, 2, 3)) + 512 / 9
    dice = np.mean(1 - (2 * inter + 1e-5) / (denom + 1e-5))
    focal = -((8 / 9) ** 2 * math.log(1 / 9))
    # uniform p is below 0.5 everywhere, so the thresholded prediction is empty and dt_p = 0
    from scipy import ndimage
    hd = 0.0
    for c in range(9):
        m = g[c] > 0.5
        dt = np.zeros(m.shape) if (not m.any() or m.all()) else (
            ndimage.distance_transform_edt(m) + ndimage.distance_transform_edt(~m))
        hd += np.sum((1 / 9 - g[c]) ** 2 * dt ** 2)
    hd /= 9 * 512
    assert terms["dice"] == pytest.approx(dice, abs=1e-6)
    assert terms["focal"] == pytest.approx(focal, abs=1e-6)
    assert terms["hausdorff"] == pytest.approx(hd, abs=1e-6)
    assert total == pytest.approx(dice + focal + 0.1 * hd, abs=1e-6)


def test_focal_gamma_zero_is_cross_entropy(rng):
    lab = rng.integers(0, 9, (8, 8, 8)).astype(np.uint8)
    raw = rng.random((9, 8, 8, 8)) + 0.05
    probs = raw / raw.sum(0)
    cfg = NetworkConfig(focal_gamma=0.0, lambda_hd=0.0)
    _, terms = segmentation_loss(ProbabilityMap(probs), LabelMap(lab), cfg)
    p32 = probs.astype(np.float32).astype(np.float64)
    ce = -np.mean(np.log(np.take_along_axis(p32, lab[None].astype(np.int64), 0)))
    assert terms["focal"] == pytest.approx(ce, abs=1e-6)


def test_segmentation_loss_grid_mismatch():
    with pytest.raises(ArgumentError):
        segmentation_loss(ProbabilityMap(np.full((9, 8, 8, 8), 1 / 9)), LabelMap(np.zeros((8, 8, 10))), NetworkConfig())


def test_heatmap_rules():
    lab = np.random.default_rng(0).integers(0, 9, (8, 8, 8)).astype(np.uint8)
    assert np.array_equal(heatmap_to_segmentation(_onehot_pm(lab)).data, lab)
    assert np.all(heatmap_to_segmentation(ProbabilityMap(np.full((9, 8, 8, 8), 1 / 9))).data == 0)
    probs = np.zeros((9, 8, 8, 8))
    probs[0] = 1.0
    probs[:, 1, 1, 1] = 0.0
    probs[0, 1, 1, 1], probs[8, 1, 1, 1], probs[3, 1, 1, 1] = 0.4, 0.55, 0.05
    out = heatmap_to_segmentation(ProbabilityMap(probs), 0.5, force_suture=True)
    assert out.data[1, 1, 1] == 8
    probs[0, 1, 1, 1], probs[8, 1, 1, 1], probs[1, 1, 1, 1], probs[3, 1, 1, 1] = 0.3, 0.45, 0.25, 0.0
    assert heatmap_to_segmentation(ProbabilityMap(probs), 0.4, force_suture=True).data[1, 1, 1] == 8
    with pytest.raises(ArgumentError):
        heatmap_to_segmentation(ProbabilityMap(probs), 1.5)


def test_probability_map_validation():
    with pytest.raises(ArgumentError):
        ProbabilityMap(np.full((9, 8, 8, 8), 0.2))
    with pytest.raises(ArgumentError):
        ProbabilityMap(np.full((8, 8, 8, 8), 1 / 8))


def test_encode_decode_shapes(rng):
    m = SynthesisModel(NetworkConfig(base_channels=4, latent_channels=4, downsampling_levels=3))
    v = _vol(rng, 64)
    z = encode(v, m)
    assert z.shape == (4, 8, 8, 8)
    out = decode(z.mean, m)
    assert out.shape == v.shape and 0.0 <= out.data.min() and out.data.max() <= 1.0
    with pytest.raises(ArgumentError):
        encode(Volume(np.zeros((20, 20, 20))), m)


def test_synthesize_contract(rng):
    m = SynthesisModel(SMALL)
    v = _vol(rng)
    with pytest.raises(StateError):
        synthesize(v, m)
    m.trained = True
    a, b = synthesize(v, m), synthesize(v, m)
    assert a.modality is Modality.SCT
    assert np.array_equal(a.data, b.data)
    s1, s2 = synthesize(v, m, deterministic=False, seed=1), synthesize(v, m, deterministic=False, seed=1)
    assert np.array_equal(s1.data, s2.data)
    assert not np.array_equal(s1.data, a.data)


def test_seeded_init_is_bit_stable(rng):
    v = _vol(rng)
    a, b = SynthesisModel(SMALL), SynthesisModel(SMALL)
    a.trained = b.trained = True
    assert np.array_equal(synthesize(v, a).data, synthesize(v, b).data)


def test_segment_contract(rng):
    m = SegmentationModel(SMALL)
    v = _vol(rng, modality=Modality.SCT)
    atlas = LabelMap(rng.integers(0, 9, (16, 16, 16)))
    with pytest.raises(StateError):
        segment(v, atlas, m)
    m.trained = True
    p = segment(v, atlas, m)
    assert p.shape == v.shape
    np.testing.assert_allclose(p.probs.sum(0), 1.0, atol=1e-5)
    assert np.array_equal(heatmap_to_segmentation(p).data, heatmap_to_segmentation(segment(v, atlas, m)).data)
    with pytest.raises(ArgumentError):
        segment(v, LabelMap(np.zeros((16, 16, 8))), m)


def test_feature_stack_is_seed_frozen():
    import subprocess
    import sys

    code = ("from cranisynth.models import feature_stack; import torch; "
            "print(float(sum(p.double().sum() for p in feature_stack(3).parameters())))")
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(outs) == 1
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    feature_stack(99)
    assert torch.rand(1) == before
    assert not any(p.requires_grad for p in feature_stack(0).parameters())


def test_checkpoint_roundtrip(tmp_path, rng):
    m = SynthesisModel(SMALL)
    m.trained = True
    digest = save_checkpoint(m, tmp_path / "synth", epoch=3, loss_history=[{"epoch": 0, "loss": np.float32(0.5)}])
    back, manifest = load_checkpoint(tmp_path / "synth")
    assert manifest["sha256"] == digest and manifest["epoch"] == 3 and back.trained
    v = _vol(rng)
    assert np.array_equal(synthesize(v, m).data, synthesize(v, back).data)
    child = save_checkpoint(back, tmp_path / "child.json", epoch=4, parent=digest, tag="ft")
    assert read_manifest(tmp_path / "child")["parent_sha256"] == digest and child == digest


def test_checkpoint_tamper_and_missing(tmp_path):
    m = SegmentationModel(SMALL)
    save_checkpoint(m, tmp_path / "seg", epoch=0)
    blob = tmp_path / "seg.bin"
    data = bytearray(blob.read_bytes())
    data[0] ^= 1
    blob.write_bytes(bytes(data))
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "seg")
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "nothing")


def test_config_validation():
    with pytest.raises(ArgumentError):
        NetworkConfig(downsampling_levels=1)
    with pytest.raises(ArgumentError):
        NetworkConfig(lambda_rec=0)
    with pytest.raises(ArgumentError):
        NetworkConfig.from_dict({"bogus": 1})
    assert NetworkConfig.from_dict(NetworkConfig().to_dict()) == NetworkConfig()
