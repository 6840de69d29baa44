"""Volume-level entry points for the synthesis and segmentation networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ArgumentError, StateError
from ..volume import NUM_LABELS, SUTURE_LABEL, LabelMap, Modality, Volume
from . import losses
from .networks import LOGVAR_RANGE, NetworkConfig, PatchDiscriminator, VAE3D, feature_stack


@dataclass
class LatentCode:
    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_variance = np.clip(np.asarray(self.log_variance, dtype=np.float64), *LOGVAR_RANGE)
        if self.mean.shape != self.log_variance.shape:
            raise ArgumentError("mean and log_variance shapes differ")

    @property
    def shape(self):
        return self.mean.shape


@dataclass
class ProbabilityMap:
    probs: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim != 4 or self.probs.shape[0] != NUM_LABELS:
            raise ArgumentError(f"probabilities must be shaped ({NUM_LABELS}, D, H, W)")
        if self.probs.min() < -1e-6 or self.probs.max() > 1 + 1e-6:
            raise ArgumentError("probabilities must lie in [0, 1]")
        if np.abs(self.probs.sum(axis=0, dtype=np.float64) - 1.0).max() > 1e-5:
            raise ArgumentError("class probabilities must sum to 1 per voxel")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def shape(self):
        return self.probs.shape[1:]

    @property
    def suture_heatmap(self):
        return self.probs[SUTURE_LABEL]


def _tensor(arr, dtype=torch.float32):
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)


def _vol_tensor(v):
    return _tensor(v.data)[None, None]


class SynthesisModel(torch.nn.Module):
    """MRI-to-CT variational autoencoder with its adversarial critic."""

    kind = "synthesis"

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        torch.manual_seed(self.cfg.seed)
        self.generator = VAE3D(1, 1, self.cfg)
        self.discriminator = PatchDiscriminator(1, 8, self.cfg.discriminator_levels)
        self.trained = False

    def forward(self, mri, sample=True, generator=None):
        logits, mu, logvar = self.generator(mri, sample=sample, generator=generator)
        return torch.sigmoid(logits), mu, logvar

    def decode(self, z):
        return torch.sigmoid(self.generator.decode(z))


class SegmentationModel(torch.nn.Module):
    """Atlas-conditioned segmentation autoencoder; deterministic latent, no critic."""

    kind = "segmentation"

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        torch.manual_seed(self.cfg.seed + 1)
        self.net = VAE3D(1 + NUM_LABELS, NUM_LABELS, self.cfg)
        self.trained = False

    def forward(self, image, atlas_onehot):
        x = torch.cat([image, atlas_onehot], dim=1)
        logits, mu, logvar = self.net(x, sample=False)
        return torch.softmax(logits, dim=1), mu, logvar


def _require_trained(model):
    if not getattr(model, "trained", False):
        raise StateError(f"{model.kind} model has no trained weights loaded")


def encode(v, model):
    """Latent mean and log-variance of ``v`` under the synthesis encoder."""
    model.generator.check_shape(v.shape)
    with torch.no_grad():
        mu, logvar = model.generator.encode(_vol_tensor(v))
    return LatentCode(mu[0].double().numpy(), logvar[0].double().numpy())


def decode(z, model, spacing_mm=(1.0, 1.0, 1.0)):
    """Decode a latent sample (C, d, h, w) to a volume squashed into [0, 1]."""
    z = _tensor(np.asarray(z))[None]
    with torch.no_grad():
        out = model.decode(z)
    return Volume(out[0, 0].numpy(), spacing_mm, Modality.SCT)


def synthesize(mri, model, deterministic=True, seed=0):
    """Synthetic CT from ``mri``; ``deterministic`` decodes the latent mean."""
    _require_trained(model)
    model.generator.check_shape(mri.shape)
    gen = torch.Generator().manual_seed(int(seed))
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out, _, _ = model(_vol_tensor(mri), sample=not deterministic, generator=gen)
    model.train(was_training)
    return Volume(out[0, 0].numpy(), mri.spacing_mm, Modality.SCT)


def segment(sct, atlas, model):
    """Nine-class probability map for ``sct`` conditioned on the one-hot ``atlas``."""
    _require_trained(model)
    if tuple(sct.shape) != tuple(atlas.shape):
        raise ArgumentError(f"image grid {sct.shape} differs from atlas grid {atlas.shape}")
    model.net.check_shape(sct.shape)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        probs, _, _ = model(_vol_tensor(sct), _tensor(atlas.one_hot())[None])
    model.train(was_training)
    return ProbabilityMap(probs[0].numpy(), sct.spacing_mm)


def heatmap_to_segmentation(p, suture_threshold=0.5, force_suture=False):
    """Argmax labels (ties to the lowest code); optionally force code 8 where the suture heatmap clears the threshold."""
    if not 0.0 <= suture_threshold <= 1.0:
        raise ArgumentError("suture_threshold must lie in [0, 1]")
    labels = np.argmax(p.probs, axis=0).astype(np.uint8)
    if force_suture:
        labels[p.probs[SUTURE_LABEL] >= suture_threshold] = SUTURE_LABEL
    return LabelMap(labels, p.spacing_mm)


# ---------------------------------------------------------------------------
# loss entry points on plain arrays / volumes


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def kl_divergence(z):
    return float(losses.kl_term(_tensor(z.mean, torch.float64), _tensor(z.log_variance, torch.float64)))


def synthesis_loss(sct, ct, z, disc_fake_score, feat_pairs, cfg):
    """Composite synthesis loss; returns (total, unweighted breakdown)."""
    a, b = _arr(sct), _arr(ct)
    if a.shape != b.shape:
        raise ArgumentError(f"sct {a.shape} and ct {b.shape} differ")
    t = lambda x: _tensor(np.asarray(x, dtype=np.float64), torch.float64)
    scores = None
    if disc_fake_score is not None:
        scores = [t(s) for s in disc_fake_score] if isinstance(disc_fake_score, (list, tuple)) else t(disc_fake_score)
    pairs = [(t(fa), t(fb)) for fa, fb in (feat_pairs or [])]
    total, terms = losses.synthesis_terms(t(a), t(b), t(z.mean), t(z.log_variance), scores, pairs, cfg)
    return float(total), {k: float(v) for k, v in terms.items()}


def discriminator_loss(real_scores, fake_scores):
    """Least-squares critic loss from precomputed patch scores."""
    t = lambda s: [_tensor(np.asarray(x, np.float64), torch.float64) for x in (s if isinstance(s, (list, tuple)) else [s])]
    return float(losses.lsgan_discriminator_term(t(real_scores), t(fake_scores)))


def discriminator_step(real, fake, model, optimizer=None):
    """Critic loss on a real/fake pair; takes an optimizer step when one is given."""
    r, f = _vol_tensor(real), _vol_tensor(fake)
    if r.shape != f.shape:
        raise ArgumentError("real and fake volumes differ in shape")
    loss = losses.lsgan_discriminator_term(model.discriminator(r), model.discriminator(f.detach()))
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def segmentation_loss(p, gt, cfg):
    """Dice-focal plus Hausdorff-surrogate loss; returns (total, unweighted breakdown)."""
    if tuple(p.shape) != tuple(gt.shape):
        raise ArgumentError(f"prediction grid {p.shape} differs from label grid {gt.shape}")
    probs = _tensor(p.probs, torch.float64)[None]
    onehot = _tensor(gt.one_hot(), torch.float64)[None]
    total, terms = losses.segmentation_terms(probs, onehot, cfg)
    return float(total), {k: float(v) for k, v in terms.items()}


def volume_features(v, seed=0):
    """Frozen-stack activations of ``v`` (list of (C, d, h, w) tensors)."""
    stack = feature_stack(seed)
    with torch.no_grad():
        return [f[0] for f in stack(_vol_tensor(v))]
