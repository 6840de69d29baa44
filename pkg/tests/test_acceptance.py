"""Acceptance criteria, one test each, checked at their stated tolerances.

Each test records a pass/fail line that is printed in the terminal summary.
Criteria 9 and 10 read the artifacts of two default-config runs made with
``scripts/e2e.py`` under ``$CRANISYNTH_E2E_ROOT`` (default ``<repo>/e2e``),
tagged ``run1`` and ``run2``. With ``CRANISYNTH_RUN_E2E=1`` missing runs are
executed first (about two hours each on one CPU thread).
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from cranisynth.metrics import dice_per_label, fid, fid_from_moments, hd95, psnr_mae, ssim
from cranisynth.models import LatentCode, kl_divergence
from cranisynth.phantom import PhantomSpec, generate_subject
from cranisynth.preprocess import SimilarityTransform, apply_transform, register, remove_bed
from cranisynth.stats import PairedSample, run_region_panel, wilcoxon_signed_rank

from conftest import ACCEPTANCE
from oracles import (
    dice_bruteforce,
    gradient_relative_error,
    hd95_bruteforce,
    kl_closed_form,
    kl_monte_carlo,
    loss_probes,
    signed_rank_enumeration,
    ssim_direct,
)

REPO = Path(__file__).resolve().parents[1]
E2E_ROOT = Path(os.environ.get("CRANISYNTH_E2E_ROOT", REPO / "e2e"))
CPU_BUDGET_S = 4 * 3600


def record(number, ok, detail):
    ACCEPTANCE.append((number, bool(ok), detail))
    assert ok, f"criterion {number}: {detail}"


def test_criterion_01_dice_hd95_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    dice_mismatch, hd_err, pairs = 0, 0.0, 0
    for _ in range(50):
        shape = tuple(int(s) for s in rng.integers(4, 17, 3))
        spacing = tuple(rng.uniform(0.3, 2.0, 3))
        k = int(rng.integers(2, 5))
        pred = rng.integers(0, k, shape).astype(np.uint8)
        gt = rng.integers(0, k, shape).astype(np.uint8)
        labels = tuple(range(1, k))
        d = dice_per_label(pred, gt, labels=labels)
        for c in labels:
            dice_mismatch += d[c] != dice_bruteforce(pred, gt, c)
            if (pred == c).any() and (gt == c).any():
                hd_err = max(hd_err, abs(hd95(pred, gt, c, spacing) - hd95_bruteforce(pred, gt, c, spacing)))
        pairs += 1
    elapsed = time.perf_counter() - t0
    record(1, pairs == 50 and dice_mismatch == 0 and hd_err <= 1e-6 and elapsed < 10,
           f"{pairs} pairs, dice mismatches {dice_mismatch}, max hd95 error {hd_err:.2e} mm, {elapsed:.2f} s")


def test_criterion_02_ssim_psnr_mae():
    rng = np.random.default_rng(7)
    x = rng.random((16, 16, 16))
    self_err = abs(ssim(x, x) - 1.0)
    psnr, mae = psnr_mae(x + 0.1, x)
    worst = 0.0
    for _ in range(5):
        a = rng.random((16, 16, 16))
        b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.3), a.shape), 0, 1)
        worst = max(worst, abs(ssim(a, b) - ssim_direct(a, b)))
    ok = self_err <= 1e-9 and abs(mae - 0.1) <= 1e-9 and abs(psnr - 20.0) <= 1e-9 and worst <= 1e-6
    record(2, ok, f"|ssim(x,x)-1|={self_err:.1e}, mae={mae:.12f}, psnr={psnr:.12f} dB, "
                  f"max |ssim-direct|={worst:.1e}")


def test_criterion_03_fid_closed_forms():
    rng = np.random.default_rng(3)
    d = 8
    a = rng.normal(size=(500, d))
    same = abs(fid(a, a))
    cov = np.cov(a, rowvar=False)
    shift = rng.normal(size=d)
    shift_err = abs(fid_from_moments(np.zeros(d), cov, shift, cov) - shift @ shift)
    scale_err = abs(fid_from_moments(np.zeros(d), 4 * np.eye(d), np.zeros(d), np.eye(d)) - d)
    record(3, max(same, shift_err, scale_err) <= 1e-6,
           f"equal sets {same:.1e}, mean shift error {shift_err:.1e}, 4I vs I error {scale_err:.1e}")


def test_criterion_04_kl():
    z = lambda m, lv: LatentCode(np.full((4, 3, 3, 3), m), np.full((4, 3, 3, 3), lv))
    errs = [abs(kl_divergence(z(0.0, 0.0)) - 0.0),
            abs(kl_divergence(z(1.0, 0.0)) - 0.5),
            abs(kl_divergence(z(0.0, math.log(4))) - 0.5 * (4 - 1 - math.log(4)))]
    rng = np.random.default_rng(11)
    rel = []
    for _ in range(5):
        mu, lv = rng.normal(0, 1, 6), rng.normal(0, 0.7, 6)
        exact = kl_divergence(LatentCode(mu, lv))
        assert abs(exact - kl_closed_form(mu, lv) / mu.size) < 1e-12
        rel.append(abs(kl_monte_carlo(mu, lv, 100_000, rng) / mu.size - exact) / exact)
    record(4, max(errs) <= 1e-9 and max(rel) < 0.02,
           f"closed-form max error {max(errs):.1e}, Monte-Carlo max relative error {max(rel):.3%}")


def test_criterion_05_gradient_checks():
    torch.manual_seed(0)
    t0 = time.perf_counter()
    errors = {name: gradient_relative_error(f, x, h=1e-3) for name, f, x in loss_probes(seed=0, n=8)}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    record(5, max(errors.values()) < 1e-3 and elapsed < 60,
           f"{len(errors)} terms on 8^3, worst {worst} {errors[worst]:.1e}, {elapsed:.1f} s")


def test_criterion_06_wilcoxon_exact():
    fixture = wilcoxon_signed_rank(PairedSample([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])).p_value
    rng = np.random.default_rng(6)
    worst, cases = 0.0, 0
    # the test is defined from n = 5 pairs upward
    for n in range(5, 13):
        for _ in range(4):
            a = rng.normal(size=n)
            b = a + rng.normal(0.3, 1.0, n)
            b[1] = a[1] + (a[0] - b[0])  # a tie in |d|
            s = PairedSample(a, b)
            p = wilcoxon_signed_rank(s).p_value
            worst = max(worst, abs(p - signed_rank_enumeration(s.differences)))
            cases += 1
    record(6, fixture == 0.0625 and worst <= 1e-12,
           f"[1..5] p={fixture}, {cases} fixtures 5<=n<=12, max |p - enumeration| {worst:.1e}")


def test_criterion_07_tost_panel():
    rng = np.random.default_rng(7)
    table = {}
    for i in range(8):
        biased = i >= 6
        gt = rng.uniform(0.7, 0.9, 12)
        dice = gt + (0.08 if biased else 0.0) + rng.normal(0, 0.005, 12)
        hd_a = rng.uniform(2, 6, 12)
        hd_b = hd_a + (6.0 if biased else 0.0) + rng.normal(0, 0.5, 12)
        table[f"region_{i}"] = {"dice": PairedSample(dice, gt), "hd95_mm": PairedSample(hd_a, hd_b)}
    panel = run_region_panel(table, {"dice": 0.02, "hd95_mm": 3.0}, alpha=0.05)
    equivalent = panel["summary"]["equivalent_all_metrics"]
    record(7, equivalent == [f"region_{i}" for i in range(6)], f"equivalent regions: {equivalent}")


def test_criterion_08_registration_recovery():
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    shift_err, scale_err = [], []
    for seed in range(10):
        rec = generate_subject(PhantomSpec(seed=100 + seed, age_days=int(rng.integers(60, 700)), grid=48,
                                           misalign=False))
        fixed = remove_bed(rec.ct)
        sp = np.asarray(fixed.spacing_mm)
        vox = rng.uniform(-5, 5, 3)
        moving = apply_transform(fixed, SimilarityTransform(translation=tuple(vox * sp), mode="rigid6"))
        t = register(moving, fixed, mode="rigid6", metric="mse")
        shift_err.append(float(np.max(np.abs(np.asarray(t.translation) / sp + vox))))
        moving = apply_transform(fixed, SimilarityTransform(scale=(1.1, 1.1, 1.1)))
        t = register(moving, fixed, mode="similarity9", metric="mse")
        scale_err.append(float(np.max(np.abs(np.asarray(t.scale) - 1 / 1.1))))
    elapsed = time.perf_counter() - t0
    record(8, max(shift_err) <= 0.5 and max(scale_err) <= 0.02 and elapsed < 300,
           f"10 phantoms, max translation error {max(shift_err):.3f} voxel, "
           f"max scale error {max(scale_err):.4f}, {elapsed:.0f} s")


def _e2e(tag):
    base = E2E_ROOT / tag
    timing = base / "timing.json"
    if not timing.exists() and os.environ.get("CRANISYNTH_RUN_E2E") == "1":
        import runpy

        runpy.run_path(str(REPO / "scripts" / "e2e.py"), run_name="__not_main__")["main"]([str(E2E_ROOT), tag])
    if not timing.exists():
        return None
    info = json.loads(timing.read_text())
    evals = sorted((base / "runs").glob("eval-*/metrics.json"))
    if len(evals) != 1:
        return None
    info["metrics_path"] = evals[0]
    return info


def test_criterion_09_end_to_end():
    info = _e2e("run1")
    if info is None:
        record(9, False, f"no completed run under {E2E_ROOT / 'run1'}; run scripts/e2e.py")
    cfg = info["config"]
    scale_ok = cfg["n_subjects"] == 32 and cfg["grid"] == [48, 48, 48] and cfg["epochs"] == 200
    s = json.loads(info["metrics_path"].read_text())["summary"]
    sct, ft = s["sct"], s["sct_ft"]
    ok = (scale_ok and info["seconds"] <= CPU_BUDGET_S and sct["ssim"] >= 0.85
          and ft["mean_bone_dice"] >= 0.70 and ft["suture_dice"] >= 0.40
          and ft["suture_dice"] >= sct["suture_dice"])
    record(9, ok, f"{info['seconds'] / 3600:.2f} h CPU, sCT SSIM {sct['ssim']:.4f}, "
                  f"FT bone Dice {ft['mean_bone_dice']:.4f}, FT suture Dice {ft['suture_dice']:.4f} "
                  f"vs non-FT {sct['suture_dice']:.4f} (real CT: bone {s['ct']['mean_bone_dice']:.4f}, "
                  f"suture {s['ct']['suture_dice']:.4f})")


def test_criterion_10_determinism():
    a, b = _e2e("run1"), _e2e("run2")
    if a is None or b is None:
        record(10, False, f"needs completed run1 and run2 under {E2E_ROOT}")
    same = a["metrics_path"].read_bytes() == b["metrics_path"].read_bytes()
    record(10, same, f"metrics.json byte-identical across two executions: {same}")


def test_synthesis_loss_trend_on_recorded_run():
    """First 20 epochs of the default run: the 10-epoch moving average of the loss never rises."""

    logs = sorted((E2E_ROOT / "run1" / "runs").glob("synth-*/log.jsonl"))
    if not logs:
        pytest.skip("no recorded default run")
    totals = [json.loads(line)["total"] for line in logs[0].read_text().splitlines()][:20]
    avg = np.convolve(totals, np.ones(10) / 10, mode="valid")
    assert len(totals) == 20 and np.all(np.diff(avg) <= 0)
