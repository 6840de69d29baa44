"""Experiment orchestration: cohort, preprocessing, both training stages, fine-tuning, evaluation.

Every stage writes into a directory named after a hash of the configuration
fields that influence it (plus its upstream hashes), and marks completion with
``stage.json``. Re-running a stage whose marker exists is a no-op.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .errors import ArgumentError, ConfigError, InsufficientDataError, NaNLossError, StateError
from .models import (
    NetworkConfig,
    SegmentationModel,
    SynthesisModel,
    feature_stack,
    heatmap_to_segmentation,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    segment,
    synthesize,
)
from .models.losses import distance_fields, lsgan_discriminator_term, segmentation_terms, synthesis_terms
from .phantom import generate_cohort
from .preprocess import preprocess_subject, remove_bed
from .stats import DEFAULT_BOUNDS, PairedSample, run_region_panel
from .volume import BONE_LABELS, LABEL_NAMES, SUTURE_LABEL, LabelMap, load_cohort, save_subject

log = logging.getLogger(__name__)

PARTITIONS = ("train", "val", "test")
MIN_COHORT = 10
STAGE_MARKER = "stage.json"
CONDITIONS = ("ct", "sct", "sct_ft")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    n_subjects: int = 32
    grid: tuple = (48, 48, 48)
    split: tuple = (0.8, 0.1, 0.1)
    epochs: int = 200
    finetune_epochs: int = 50
    finetune_lr_factor: float = 0.1
    lr_generator: float = 1e-4
    lr_discriminator: float = 4e-4
    lr_segmenter: float = 2e-4
    batch_size: int = 1
    seed: int = 0
    misalign: bool = True
    threads: int = 1
    device: str = "cpu"
    atlas_subject: str | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = _network_from_dict(self.network)
        grid = self.grid if isinstance(self.grid, (list, tuple)) else (self.grid,) * 3
        self.grid = tuple(int(g) for g in grid)
        self.split = tuple(float(f) for f in self.split)
        if len(self.grid) != 3:
            raise ConfigError("grid needs three sizes")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions {self.split} must be three non-negative values summing to 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")
        if min(self.lr_generator, self.lr_discriminator, self.lr_segmenter, self.finetune_lr_factor) <= 0:
            raise ConfigError("learning rates and the fine-tune factor must be positive")
        if self.batch_size < 1 or self.threads < 1:
            raise ConfigError("batch_size and threads must be >= 1")
        if self.n_subjects < MIN_COHORT:
            raise ConfigError(f"n_subjects must be >= {MIN_COHORT}")
        if self.device not in ("cpu", "gpu"):
            raise ConfigError("device must be cpu or gpu")
        f = 2 ** self.network.downsampling_levels
        if any(g % f for g in self.grid):
            raise ConfigError(f"grid {self.grid} must be divisible by {f}")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)


def _network_from_dict(d):
    try:
        return NetworkConfig.from_dict(d)
    except (ArgumentError, TypeError) as exc:
        raise ConfigError(f"network: {exc}") from exc


def load_config(path):
    """Read a YAML or JSON experiment config; unknown keys are rejected."""
    import yaml

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def _digest(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _torch_setup(cfg):
    torch.set_num_threads(cfg.threads)
    torch.use_deterministic_algorithms(True)
    if cfg.device == "gpu":
        if not torch.cuda.is_available():
            raise ConfigError("device gpu requested but CUDA is unavailable")
        return torch.device("cuda")
    return torch.device("cpu")


# ---------------------------------------------------------------------------
# stage bookkeeping


@dataclass
class Stage:
    name: str
    key: dict

    @property
    def digest(self):
        return _digest({"stage": self.name, **self.key})

    def path(self, root):
        return Path(root) / f"{self.name}-{self.digest}"

    def done(self, root):
        return (self.path(root) / STAGE_MARKER).exists()

    def finish(self, root, result=None):
        out = self.path(root)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"stage": self.name, "digest": self.digest, "key": self.key, "result": result or {}}
        (out / STAGE_MARKER).write_text(json.dumps(payload, indent=1, sort_keys=True))

    def require(self, root):
        if not self.done(root):
            raise StateError(f"stage {self.name} has not completed for this config (expected {self.path(root)})")
        return self.path(root)


def phantom_stage(cfg):
    return Stage("phantom", {"n": cfg.n_subjects, "grid": list(cfg.grid), "seed": cfg.seed, "misalign": cfg.misalign})


def preprocess_stage(cfg):
    return Stage("prep", {"upstream": phantom_stage(cfg).digest, "split": list(cfg.split), "seed": cfg.seed,
                          "atlas": cfg.atlas_subject})


def _train_key(cfg):
    return {"network": cfg.network.to_dict(), "seed": cfg.seed, "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, "threads": cfg.threads, "device": cfg.device}


def synth_stage(cfg):
    return Stage("synth", {"upstream": preprocess_stage(cfg).digest, **_train_key(cfg),
                           "lr_generator": cfg.lr_generator, "lr_discriminator": cfg.lr_discriminator})


def seg_stage(cfg):
    return Stage("seg", {"upstream": synth_stage(cfg).digest, **_train_key(cfg), "lr_segmenter": cfg.lr_segmenter})


def finetune_stage(cfg):
    return Stage("ft", {"upstream": seg_stage(cfg).digest, "epochs": cfg.finetune_epochs,
                        "lr_factor": cfg.finetune_lr_factor})


def eval_stage(cfg):
    return Stage("eval", {"upstream": finetune_stage(cfg).digest})


# ---------------------------------------------------------------------------
# cohort, split and atlas


@dataclass
class SplitAssignment:
    assignment: dict

    def __post_init__(self):
        bad = {p for p in self.assignment.values() if p not in PARTITIONS}
        if bad:
            raise ArgumentError(f"unknown partitions {sorted(bad)}")

    def ids(self, partition):
        return sorted(s for s, p in self.assignment.items() if p == partition)

    def counts(self):
        return {p: len(self.ids(p)) for p in PARTITIONS}

    def to_dict(self):
        return dict(sorted(self.assignment.items()))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split_dataset(cohort, fractions=(0.8, 0.1, 0.1), seed=0):
    """Sex x age-tercile stratified split.

    Within each stratum val and test each receive round(fraction * size)
    subjects (halves round up) and the rest go to train; membership within a
    stratum is shuffled by ``seed``. Small cohorts can round every stratum to
    zero; a partition with a positive fraction that ends up empty is then
    filled to round(fraction * n) (at least one) by taking one subject at a
    time from the largest strata.
    """
    if len(cohort) < MIN_COHORT:
        raise ArgumentError(f"cohort of {len(cohort)} is below the minimum of {MIN_COHORT}")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ArgumentError("fractions must be (train, val, test) summing to 1")
    by_age = sorted(cohort, key=lambda r: (r.age_days, r.subject_id))
    n = len(by_age)
    tercile = {r.subject_id: min(2, 3 * i // n) for i, r in enumerate(by_age)}
    strata = {}
    for r in cohort:
        strata.setdefault((r.sex, tercile[r.subject_id]), []).append(r.subject_id)
    rng = np.random.default_rng(seed)
    out, orders = {}, {}
    for key in sorted(strata):
        ids = sorted(strata[key])
        order = [ids[i] for i in rng.permutation(len(ids))]
        orders[key] = order
        n_test = min(_round_half_up(fractions[2] * len(ids)), len(ids))
        n_val = min(_round_half_up(fractions[1] * len(ids)), len(ids) - n_test)
        for i, sid in enumerate(order):
            out[sid] = "test" if i < n_test else "val" if i < n_test + n_val else "train"
    by_size = sorted(orders, key=lambda k: (-len(orders[k]), k))
    for part, frac in (("test", fractions[2]), ("val", fractions[1])):
        if frac <= 0 or part in out.values():
            continue
        need = max(1, _round_half_up(frac * n))
        while need > 0:
            moved = False
            for key in by_size:
                spare = [s for s in reversed(orders[key]) if out[s] == "train"]
                if need > 0 and len(spare) > 1:
                    out[spare[0]] = part
                    need -= 1
                    moved = True
            if not moved:
                break
    return SplitAssignment(out)


def atlas_record(cohort, explicit=None):
    """The explicit subject, else the youngest (ties to the smallest id)."""
    if not cohort:
        raise ArgumentError("empty cohort")
    if explicit is not None:
        match = [r for r in cohort if r.subject_id == explicit]
        if not match:
            raise ArgumentError(f"atlas subject {explicit!r} is not in the cohort")
        rec = match[0]
    else:
        rec = min(cohort, key=lambda r: (r.age_days, r.subject_id))
    return rec


def select_atlas(cohort, explicit=None):
    """(atlas labels, reference CT) of the atlas subject."""
    rec = atlas_record(cohort, explicit)
    return rec.labels, rec.ct


def run_phantom(cfg):
    stage = phantom_stage(cfg)
    root = Path(cfg.data_dir)
    if stage.done(root):
        return stage.path(root)
    out = stage.path(root)
    cohort = generate_cohort(cfg.n_subjects, cfg.seed, grid=cfg.grid, misalign=cfg.misalign)
    for rec in cohort:
        save_subject(rec, out / rec.subject_id)
    stage.finish(root, {"subjects": [r.subject_id for r in cohort]})
    log.info("phantom cohort of %d written to %s", len(cohort), out)
    return out


def run_preprocess(cfg):
    stage = preprocess_stage(cfg)
    root = Path(cfg.data_dir)
    if stage.done(root):
        return stage.path(root)
    cohort = load_cohort(phantom_stage(cfg).require(root))
    out = stage.path(root)
    atlas = atlas_record(cohort, cfg.atlas_subject)
    atlas_id = atlas.subject_id
    reference = remove_bed(atlas.ct)
    for rec in cohort:
        log.info("preprocessing %s", rec.subject_id)
        prepped = preprocess_subject(rec, None if rec.subject_id == atlas_id else reference)
        save_subject(prepped, out / rec.subject_id)
    split = split_dataset(cohort, cfg.split, cfg.seed)
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=1, sort_keys=True))
    (out / "atlas.json").write_text(json.dumps({"subject_id": atlas_id}, indent=1))
    stage.finish(root, {"atlas": atlas_id, "counts": split.counts()})
    return out


@dataclass
class PreparedData:
    subjects: dict
    split: SplitAssignment
    atlas_id: str

    @property
    def atlas(self):
        return self.subjects[self.atlas_id].labels

    def part(self, name):
        return [self.subjects[s] for s in self.split.ids(name)]


def load_prepared(cfg):
    prep = preprocess_stage(cfg).require(cfg.data_dir)
    split_path = prep / "split.json"
    if not split_path.exists():
        raise StateError(f"missing split file {split_path}")
    subjects = {r.subject_id: r for r in load_cohort(prep)}
    split = SplitAssignment(json.loads(split_path.read_text()))
    atlas_id = json.loads((prep / "atlas.json").read_text())["subject_id"]
    return PreparedData(subjects, split, atlas_id)


# ---------------------------------------------------------------------------
# training


def _stack(vols, device):
    return torch.from_numpy(np.stack([v.data for v in vols])[:, None]).to(device)


def _batches(ids, batch_size, rng):
    order = [ids[i] for i in rng.permutation(len(ids))]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _check_finite(total, terms, batch, epoch, stage_dir):
    if torch.isfinite(total):
        return
    dump = {"epoch": epoch, "batch": batch, "terms": {k: v.item() for k, v in terms.items()}}
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "nan_dump.json").write_text(json.dumps(M._finite(dump), indent=1))
    raise NaNLossError(f"non-finite loss at epoch {epoch}, batch {batch}", batch_id=batch)


def _append_log(path, entry):
    with open(path, "a") as fh:
        fh.write(json.dumps(M._finite(entry), sort_keys=True) + "\n")


def _mean_terms(acc):
    return {k: float(np.mean(v)) for k, v in acc.items()}


def train_synthesis(cfg):
    """Stage 1: alternating generator/critic updates on train MRI->CT pairs; best validation SSIM kept."""
    stage = synth_stage(cfg)
    root = Path(cfg.out_dir)
    if stage.done(root):
        return stage.path(root) / "best"
    device = _torch_setup(cfg)
    data = load_prepared(cfg)
    train, val = data.split.ids("train"), data.part("val")
    if not train or not val:
        raise StateError("synthesis training needs non-empty train and val partitions")
    out = stage.path(root)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.jsonl"
    log_path.write_text("")

    net_cfg = copy.deepcopy(cfg.network)
    model = SynthesisModel(net_cfg).to(device)
    stack = feature_stack(net_cfg.seed).to(device)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=cfg.lr_generator)
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.lr_discriminator)
    rng = np.random.default_rng(cfg.seed)
    sampler = torch.Generator(device=device).manual_seed(cfg.seed)
    best, history = -math.inf, []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        acc = {}
        for batch in _batches(train, cfg.batch_size, rng):
            mri = _stack([data.subjects[s].mri for s in batch], device)
            ct = _stack([data.subjects[s].ct for s in batch], device)
            sct, mu, logvar = model(mri, sample=True, generator=sampler)
            pairs = list(zip(stack(sct), [f.detach() for f in stack(ct)]))
            total, terms = synthesis_terms(sct, ct, mu, logvar, model.discriminator(sct), pairs, net_cfg)
            _check_finite(total, terms, batch, epoch, out)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            d_loss = lsgan_discriminator_term(model.discriminator(ct), model.discriminator(sct.detach()))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            for k, v in terms.items():
                acc.setdefault(k, []).append(v.item())
            acc.setdefault("total", []).append(total.item())
            acc.setdefault("discriminator", []).append(d_loss.item())
        model.trained = True
        val_ssim = float(np.mean([M.ssim(synthesize(r.mri, model), r.ct) for r in val]))
        entry = {"epoch": epoch, **_mean_terms(acc), "val_ssim": val_ssim}
        history.append(entry)
        _append_log(log_path, entry)
        log.info("synth epoch %d loss %.4f val ssim %.4f", epoch, entry["total"], val_ssim)
        if val_ssim > best:
            best = val_ssim
            save_checkpoint(model, out / "best", epoch, history, extra={"val_ssim": val_ssim})
    # the manifest of the kept checkpoint carries the full history
    manifest = read_manifest(out / "best")
    manifest["loss_history"] = [M._finite(h) for h in history]
    (out / "best.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    stage.finish(root, {"best_val_ssim": best, "best_epoch": manifest["epoch"]})
    return out / "best"


def _seg_inputs(data, ids, images, device):
    atlas = torch.from_numpy(data.atlas.one_hot())[None].to(device)
    x = _stack([images[s] for s in ids], device)
    return x, atlas.expand(len(ids), -1, -1, -1, -1)


def _seg_targets(data, ids, device, cache):
    onehot, dt = [], []
    for s in ids:
        if s not in cache:
            oh = torch.from_numpy(data.subjects[s].labels.one_hot())[None]
            cache[s] = (oh, distance_fields(oh))
        onehot.append(cache[s][0])
        dt.append(cache[s][1])
    return torch.cat(onehot).to(device), torch.cat(dt).to(device)


def selection_dice(pred, gt):
    """Mean Dice over codes 1-8 (bones and suture): the segmentation model-selection score."""
    d = M.dice_per_label(pred, gt)
    return float(np.mean([d[c] for c in range(1, 9)]))


def _validate_seg(model, data, images):
    scores = []
    for r in data.part("val"):
        pred = heatmap_to_segmentation(segment(images[r.subject_id], data.atlas, model))
        scores.append(selection_dice(pred, r.labels))
    return float(np.mean(scores))


def _synthesized(model, recs):
    return {r.subject_id: synthesize(r.mri, model) for r in recs}


def _fit_segmentation(model, cfg, data, train_images, val_images, epochs, lr, out, start_score=None,
                      parent=None, tag=None):
    device = next(model.parameters()).device
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(cfg.seed + 1)
    train = sorted(train_images)
    cache = {}
    log_path = out / "log.jsonl"
    log_path.write_text("")
    history = []
    best = -math.inf
    if start_score is not None:
        best = start_score
        history.append({"epoch": 0, "val_dice": start_score})
        _append_log(log_path, history[-1])
        save_checkpoint(model, out / "best", 0, history, parent=parent, tag=tag, extra={"val_dice": start_score})
    for epoch in range(1, epochs + 1):
        model.train()
        acc = {}
        for batch in _batches(train, cfg.batch_size, rng):
            x, atlas = _seg_inputs(data, batch, train_images, device)
            onehot, dt = _seg_targets(data, batch, device, cache)
            probs, _, _ = model(x, atlas)
            total, terms = segmentation_terms(probs, onehot, model.cfg, dt_target=dt)
            _check_finite(total, terms, batch, epoch, out)
            opt.zero_grad()
            total.backward()
            opt.step()
            for k, v in terms.items():
                acc.setdefault(k, []).append(v.item())
            acc.setdefault("total", []).append(total.item())
        model.trained = True
        score = _validate_seg(model, data, val_images)
        entry = {"epoch": epoch, **_mean_terms(acc), "val_dice": score}
        history.append(entry)
        _append_log(log_path, entry)
        log.info("%s epoch %d loss %.4f val dice %.4f", tag or "seg", epoch, entry["total"], score)
        if score > best:
            best = score
            save_checkpoint(model, out / "best", epoch, history, parent=parent, tag=tag, extra={"val_dice": score})
    manifest = read_manifest(out / "best")
    manifest["loss_history"] = [M._finite(h) for h in history]
    (out / "best.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return best, manifest


def train_segmentation(cfg):
    """Stage 2: atlas-conditioned segmentation trained on real CTs, selected on validation sCTs."""
    stage = seg_stage(cfg)
    root = Path(cfg.out_dir)
    if stage.done(root):
        return stage.path(root) / "best"
    device = _torch_setup(cfg)
    synth, _ = load_checkpoint(synth_stage(cfg).require(root) / "best")
    data = load_prepared(cfg)
    out = stage.path(root)
    out.mkdir(parents=True, exist_ok=True)
    train_images = {r.subject_id: r.ct for r in data.part("train")}
    val_images = _synthesized(synth, data.part("val"))
    model = SegmentationModel(copy.deepcopy(cfg.network)).to(device)
    best, manifest = _fit_segmentation(model, cfg, data, train_images, val_images, cfg.epochs,
                                       cfg.lr_segmenter, out)
    stage.finish(root, {"best_val_dice": best, "best_epoch": manifest["epoch"]})
    return out / "best"


def finetune_segmentation(cfg):
    """Continue the stage-2 model on training sCTs at a reduced learning rate; the manifest names its parent."""
    stage = finetune_stage(cfg)
    root = Path(cfg.out_dir)
    if stage.done(root):
        return stage.path(root) / "best"
    device = _torch_setup(cfg)
    base_path = seg_stage(cfg).require(root) / "best"
    base, base_manifest = load_checkpoint(base_path)
    base = base.to(device)
    synth, _ = load_checkpoint(synth_stage(cfg).require(root) / "best")
    data = load_prepared(cfg)
    out = stage.path(root)
    out.mkdir(parents=True, exist_ok=True)
    train_images = _synthesized(synth, data.part("train"))
    val_images = _synthesized(synth, data.part("val"))
    start = _validate_seg(base, data, val_images)
    best, manifest = _fit_segmentation(base, cfg, data, train_images, val_images, cfg.finetune_epochs,
                                       cfg.lr_segmenter * cfg.finetune_lr_factor, out, start_score=start,
                                       parent=base_manifest["sha256"], tag="FT")
    stage.finish(root, {"best_val_dice": best, "best_epoch": manifest["epoch"], "start_val_dice": start})
    return out / "best"


# ---------------------------------------------------------------------------
# inference and evaluation


def infer(mri, atlas, synth_model, seg_model, suture_threshold=0.5, force_suture=False):
    """(sCT, probability map, label map) for one preprocessed MRI."""
    sct = synthesize(mri, synth_model)
    probs = segment(sct, atlas, seg_model)
    return sct, probs, heatmap_to_segmentation(probs, suture_threshold, force_suture)


def _panel(report_a, report_b, bounds):
    return panel_from_rows(report_a.flat_rows(), report_b.flat_rows(), bounds)


def panel_from_rows(rows_a, rows_b, bounds=None):
    """Paired region panel over subjects present in both row lists (metrics.csv layout)."""
    rows_a = {r["subject_id"]: r for r in rows_a}
    rows_b = {r["subject_id"]: r for r in rows_b}
    ids = sorted(set(rows_a) & set(rows_b))
    table = {}
    for c in range(1, 9):
        entry = {}
        for metric, col in (("dice", f"dice_{c}"), ("hd95_mm", f"hd95_mm_{c}")):
            pairs = [(rows_a[s][col], rows_b[s][col]) for s in ids
                     if rows_a[s][col] is not None and rows_b[s][col] is not None]
            try:
                entry[metric] = PairedSample([p[0] for p in pairs], [p[1] for p in pairs], LABEL_NAMES[c])
            except InsufficientDataError as exc:
                entry[metric] = exc
        table[LABEL_NAMES[c]] = entry
    return run_region_panel(table, bounds)


def run_full_evaluation(cfg, bounds=None, figures=True):
    """Metrics for CT, sCT and fine-tuned sCT segmentation on the test split, paired statistics and figures."""
    stage = eval_stage(cfg)
    root = Path(cfg.out_dir)
    out = stage.path(root)
    if stage.done(root):
        return out
    _torch_setup(cfg)
    synth, _ = load_checkpoint(synth_stage(cfg).require(root) / "best")
    base, _ = load_checkpoint(seg_stage(cfg).require(root) / "best")
    ft, _ = load_checkpoint(finetune_stage(cfg).require(root) / "best")
    data = load_prepared(cfg)
    test = data.part("test")
    if not test:
        raise StateError("test partition is empty")
    seed = cfg.network.seed
    reports = {c: M.MetricsReport() for c in CONDITIONS}
    feats_sct, feats_ct, outputs = [], [], {}
    for r in test:
        sct = synthesize(r.mri, synth)
        fs, fc = M.patch_features(sct, seed=seed), M.patch_features(r.ct, seed=seed)
        feats_sct.append(fs)
        feats_ct.append(fc)
        psnr, mae = M.psnr_mae(sct, r.ct)
        image = {"fid": M.fid(fs, fc), "ssim": M.ssim(sct, r.ct),
                 "lpips_proxy": M.perceptual_distance(sct, r.ct, seed), "psnr_db": psnr, "mae": mae}
        probs = {"ct": segment(r.ct, data.atlas, base), "sct": segment(sct, data.atlas, base),
                 "sct_ft": segment(sct, data.atlas, ft)}
        for cond, p in probs.items():
            pred = heatmap_to_segmentation(p)
            entry = {"subject_id": r.subject_id, "age_days": r.age_days, "sex": r.sex, **image}
            entry.update(M.segmentation_scores(pred, r.labels))
            reports[cond].add(entry)
        outputs[r.subject_id] = (sct, probs["sct_ft"])
    cohort_fid = M.fid(np.concatenate(feats_sct), np.concatenate(feats_ct))
    for cond, rep in reports.items():
        rep.cohort_fid = cohort_fid
        rep.write(out / cond)
    bounds = dict(DEFAULT_BOUNDS if bounds is None else bounds)
    panels = {"ct_vs_sct": _panel(reports["ct"], reports["sct"], bounds),
              "ct_vs_sct_ft": _panel(reports["ct"], reports["sct_ft"], bounds)}
    write_json(out / "stats.json", panels)
    summary = summarize(reports)
    write_json(out / "metrics.json", {
        "config_digest": stage.digest,
        "summary": summary,
        "conditions": {c: rep.to_json() for c, rep in reports.items()},
    })
    if figures:
        from .figures import render_subject

        for r in test:
            sct, probs = outputs[r.subject_id]
            render_subject(out / "figures", r, sct, probs, heatmap_to_segmentation(probs))
    stage.finish(root, {"summary": summary})
    return out


def summarize(reports):
    """Headline numbers: test SSIM, mean bone Dice and suture Dice per condition."""
    out = {}
    for cond, rep in reports.items():
        rows = rep.flat_rows()
        out[cond] = {
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "mean_bone_dice": float(np.mean([r["mean_dice"] for r in rows])),
            "suture_dice": float(np.mean([r[f"dice_{SUTURE_LABEL}"] for r in rows])),
            "n": len(rows),
        }
    return out


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(M._finite(obj), indent=1, sort_keys=True))


def run_all(cfg):
    """Every stage in order; completed stages are skipped. Returns the evaluation directory."""
    run_phantom(cfg)
    run_preprocess(cfg)
    train_synthesis(cfg)
    train_segmentation(cfg)
    finetune_segmentation(cfg)
    return run_full_evaluation(cfg)


__all__ = [
    "BONE_LABELS", "ExperimentConfig", "PreparedData", "SplitAssignment", "Stage", "eval_stage",
    "finetune_segmentation", "finetune_stage", "infer", "load_config", "load_prepared", "phantom_stage",
    "preprocess_stage", "atlas_record", "run_all", "run_full_evaluation", "run_phantom", "run_preprocess", "seg_stage",
    "select_atlas", "selection_dice", "split_dataset", "summarize", "synth_stage", "train_segmentation",
    "train_synthesis", "write_json",
]
