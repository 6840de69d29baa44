"""Loss terms for the synthesis and segmentation networks.

Term functions take torch tensors shaped (B, C, D, H, W) and are
differentiable with respect to their prediction arguments. Distance maps in
the Hausdorff surrogate are computed from thresholded masks and enter as
constants.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy import ndimage

from ..errors import ArgumentError

DICE_SMOOTH = 1e-5
PROB_FLOOR = 1e-7


def l1_term(pred, target):
    return torch.mean(torch.abs(pred - target))


def kl_term(mu, logvar):
    """Mean over latent dimensions of KL(N(mu, exp(logvar)) || N(0, 1))."""
    return torch.mean(0.5 * (mu * mu + torch.exp(logvar) - 1.0 - logvar))


def _as_list(scores):
    if isinstance(scores, (list, tuple)):
        return list(scores)
    return [scores]


def adversarial_term(fake_scores):
    """Least-squares generator term: patches and scales averaged."""
    scores = _as_list(fake_scores)
    return sum(torch.mean((s - 1.0) ** 2) for s in scores) / len(scores)


def lsgan_discriminator_term(real_scores, fake_scores):
    real, fake = _as_list(real_scores), _as_list(fake_scores)
    if len(real) != len(fake):
        raise ArgumentError("real and fake score lists differ in length")
    per_scale = [0.5 * (torch.mean((r - 1.0) ** 2) + torch.mean(f ** 2)) for r, f in zip(real, fake)]
    return sum(per_scale) / len(per_scale)


def perceptual_term(feat_pairs):
    """Mean over layers of the mean squared activation difference."""
    pairs = list(feat_pairs)
    if not pairs:
        raise ArgumentError("perceptual term needs at least one feature pair")
    return sum(torch.mean((a - b) ** 2) for a, b in pairs) / len(pairs)


def channel_normalized_distance(feats_a, feats_b, eps=1e-10):
    """LPIPS-style distance: unit-normalize over channels, sum squared differences, average."""
    total = 0.0
    for a, b in zip(feats_a, feats_b):
        na = a / (torch.sqrt(torch.sum(a * a, dim=1, keepdim=True)) + eps)
        nb = b / (torch.sqrt(torch.sum(b * b, dim=1, keepdim=True)) + eps)
        total = total + torch.mean(torch.sum((na - nb) ** 2, dim=1))
    return total / len(feats_a)


def soft_dice_term(probs, onehot):
    dims = tuple(range(2, probs.ndim))
    inter = torch.sum(probs * onehot, dim=dims)
    denom = torch.sum(probs, dim=dims) + torch.sum(onehot, dim=dims)
    dice = (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return torch.mean(1.0 - dice)


def focal_term(probs, onehot, gamma):
    """Voxel mean of -sum_c g_c (1 - p_c)^gamma log p_c; gamma=0 gives cross-entropy."""
    p = probs.clamp_min(PROB_FLOOR)
    per_voxel = -torch.sum(onehot * (1.0 - p) ** gamma * torch.log(p), dim=1)
    return torch.mean(per_voxel)


def boundary_distance(mask, spacing=None):
    """Unsigned distance of every voxel to the mask boundary; zeros if the mask is empty or full."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        return np.zeros(mask.shape, dtype=np.float64)
    return (ndimage.distance_transform_edt(mask, sampling=spacing)
            + ndimage.distance_transform_edt(~mask, sampling=spacing))


def distance_fields(x, threshold=0.5):
    arr = x.detach().cpu().numpy() > threshold
    out = np.zeros(arr.shape, dtype=np.float64)
    for b in range(arr.shape[0]):
        for c in range(arr.shape[1]):
            out[b, c] = boundary_distance(arr[b, c])
    return torch.as_tensor(out, dtype=x.dtype, device=x.device)


def hausdorff_dt_term(probs, onehot, threshold=0.5, dt_target=None):
    """Distance-transform Hausdorff surrogate, mean over voxels and classes.

    ``dt_target`` may carry precomputed target distance fields (they depend
    only on the labels, so training loops cache them).
    """
    dt_g = distance_fields(onehot, threshold) if dt_target is None else dt_target
    dt_p = distance_fields(probs, threshold)
    return torch.mean((probs - onehot) ** 2 * (dt_g ** 2 + dt_p ** 2))


def synthesis_terms(sct, ct, mu, logvar, fake_scores, feat_pairs, cfg):
    """Weighted total plus the unweighted per-term breakdown."""
    if sct.shape != ct.shape:
        raise ArgumentError(f"sct {tuple(sct.shape)} and ct {tuple(ct.shape)} differ")
    terms = {
        "reconstruction": l1_term(sct, ct),
        "adversarial": adversarial_term(fake_scores) if fake_scores is not None else sct.new_zeros(()),
        "kl": kl_term(mu, logvar),
        "perceptual": perceptual_term(feat_pairs) if feat_pairs else sct.new_zeros(()),
    }
    total = (cfg.lambda_rec * terms["reconstruction"] + cfg.lambda_adv * terms["adversarial"]
             + cfg.lambda_kl * terms["kl"] + cfg.lambda_perc * terms["perceptual"])
    return total, terms


def segmentation_terms(probs, onehot, cfg, dt_target=None):
    if probs.shape != onehot.shape:
        raise ArgumentError(f"prediction {tuple(probs.shape)} and target {tuple(onehot.shape)} differ")
    terms = {
        "dice": soft_dice_term(probs, onehot),
        "focal": focal_term(probs, onehot, cfg.focal_gamma),
    }
    if cfg.lambda_hd > 0:
        terms["hausdorff"] = hausdorff_dt_term(probs, onehot, dt_target=dt_target)
    else:
        terms["hausdorff"] = probs.new_zeros(())
    total = cfg.lambda_dicefocal * (terms["dice"] + terms["focal"]) + cfg.lambda_hd * terms["hausdorff"]
    return total, terms
