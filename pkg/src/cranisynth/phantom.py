"""Procedural infant-skull phantoms: paired pseudo-MRI / pseudo-CT with bone and suture labels.

The skull is an ellipsoidal shell cut into seven plates by planes in
ellipsoid-normalized direction space. Sutures are the plate boundaries
dilated to an age-dependent width; young subjects also get an anterior
fontanelle. The CT shows bone bright and sutures as soft tissue; the MRI
renders bone and sutures at near-background intensity under a smooth
multiplicative bias field and multiplicative Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, GenerationError
from .volume import LabelMap, Modality, SubjectRecord, Volume

AGE_MIN_DAYS = 36
AGE_MAX_DAYS = 730
FONTANELLE_FORCED_BELOW_DAYS = 120
GRID_RANGE = (16, 160)
FOV_MM = 200.0

# tissue codes used internally
_BG, _SCALP, _SHELL, _BRAIN, _NECK = 0, 1, 2, 3, 4

MRI_LEVELS = {_BG: 0.0, _SCALP: 0.4, _SHELL: 0.05, _BRAIN: 0.6, _NECK: 0.4}
CT_SOFT = {_BG: 0.0, _SCALP: 0.35, _BRAIN: 0.3, _NECK: 0.35}
CT_SUTURE = 0.38
CT_BED = 0.5


@dataclass
class PhantomSpec:
    seed: int
    age_days: int
    sex: str = "F"
    grid: tuple = (64, 64, 64)
    suture_base_width_mm: float | None = None  # None: 2.6 voxels at this grid
    fontanelle: bool = False
    noise_sigma: float = 0.08
    bias_amplitude: float = 0.25
    shell_thickness_vox: float | None = None  # None: 2 voxels at 64^3, scaled, floor 2
    with_bed: bool = True
    misalign: bool = True

    def __post_init__(self):
        self.grid = tuple(int(g) for g in (self.grid if np.ndim(self.grid) else (self.grid,) * 3))
        if len(self.grid) != 3 or not all(GRID_RANGE[0] <= g <= GRID_RANGE[1] for g in self.grid):
            raise ArgumentError(f"grid must be 3 ints in {GRID_RANGE}, got {self.grid}")
        if not AGE_MIN_DAYS <= int(self.age_days) <= AGE_MAX_DAYS:
            raise ArgumentError(f"age_days must lie in [{AGE_MIN_DAYS}, {AGE_MAX_DAYS}]")
        if self.sex not in ("M", "F"):
            raise ArgumentError("sex must be 'M' or 'F'")
        if self.noise_sigma < 0 or self.bias_amplitude < 0:
            raise ArgumentError("noise_sigma and bias_amplitude must be non-negative")
        if self.suture_base_width_mm is not None and self.suture_base_width_mm <= 0:
            raise ArgumentError("suture_base_width_mm must be positive")
        if self.age_days < FONTANELLE_FORCED_BELOW_DAYS:
            self.fontanelle = True

    @property
    def spacing_mm(self):
        return tuple(FOV_MM / g for g in self.grid)


def suture_width_mm(age_days, base_width_mm, min_fraction=0.3):
    """Linear closure from ``base_width_mm`` at the youngest age to ``min_fraction`` of it at the oldest."""
    w_max = float(base_width_mm)
    w_min = min_fraction * w_max
    frac = (age_days - AGE_MIN_DAYS) / (AGE_MAX_DAYS - AGE_MIN_DAYS)
    return w_max - (w_max - w_min) * frac


def default_suture_base_width(spec):
    return 2.6 * float(np.mean(spec.spacing_mm))


def _rotation_zyx(angles):
    """Rotation matrix for Z-Y-X Euler angles acting on (z, y, x) coordinates."""
    az, ay, ax = angles
    cz, sz = math.cos(az), math.sin(az)
    cy, sy = math.cos(ay), math.sin(ay)
    cx, sx = math.cos(ax), math.sin(ax)
    # coordinates ordered (z, y, x); rotation about z mixes (y, x), etc.
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass
class _Anatomy:
    semi_axes: np.ndarray  # outer skull surface, mm, (z, y, x)
    thickness_mm: float
    scalp_mm: float
    base_cut: float
    temporal_z: float
    temporal_x: float
    coronal_y: float
    lambdoid_y: float
    midline_x: float
    fontanelle_radius: float
    pose_rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    pose_shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pose_scale: float = 1.0


def _build_anatomy(spec, rng):
    age_frac = (spec.age_days - AGE_MIN_DAYS) / (AGE_MAX_DAYS - AGE_MIN_DAYS)
    growth = 0.86 + 0.14 * age_frac
    if spec.sex == "M":
        growth *= 1.02
    base = np.array([0.30, 0.345, 0.30]) * FOV_MM
    axes = base * growth * (1.0 + rng.uniform(-0.03, 0.03, size=3))
    spacing = np.array(spec.spacing_mm)
    thick_vox = spec.shell_thickness_vox
    if thick_vox is None:
        thick_vox = max(2.0, 2.0 * min(spec.grid) / 64.0)
    jit = lambda scale: float(rng.uniform(-scale, scale))
    radius = 0.0
    if spec.fontanelle:
        radius = 0.24 * (1.0 - 0.8 * age_frac) + jit(0.01)
    return _Anatomy(
        semi_axes=axes,
        thickness_mm=float(thick_vox * spacing.min()),
        scalp_mm=float(2.0 * spacing.min()),
        base_cut=-0.25 + jit(0.03),
        temporal_z=0.12 + jit(0.03),
        temporal_x=0.62 + jit(0.03),
        coronal_y=0.28 + jit(0.03),
        lambdoid_y=-0.42 + jit(0.03),
        midline_x=jit(0.02),
        fontanelle_radius=radius,
    )


def _draw_pose(rng, max_deg, max_shift_mm, max_scale=0.0):
    rot = _rotation_zyx(np.deg2rad(rng.uniform(-max_deg, max_deg, size=3)))
    shift = rng.uniform(-max_shift_mm, max_shift_mm, size=3)
    scale = 1.0 + rng.uniform(-max_scale, max_scale)
    return rot, shift, scale


def _anatomical_coords(grid, spacing, rot, shift, scale):
    """Map grid voxel centres (mm about the grid centre) into the anatomical frame."""
    centre = (np.array(grid) - 1) / 2.0
    idx = np.indices(grid, dtype=np.float64).reshape(3, -1)
    pts = (idx - centre[:, None]) * np.array(spacing)[:, None]
    return (rot.T @ (pts - shift[:, None])) / scale


def _tissue_and_direction(anat, pts):
    a = anat.semi_axes[:, None]
    q = pts / a
    r = np.sqrt((q ** 2).sum(axis=0))
    r = np.maximum(r, 1e-9)
    norm_pt = np.sqrt((pts ** 2).sum(axis=0))
    # signed radial distance to the outer skull surface (mm, >0 outside)
    dist = norm_pt * (1.0 - 1.0 / r)
    u = q / r
    tissue = np.full(pts.shape[1], _BG, dtype=np.int8)
    tissue[dist <= anat.scalp_mm] = _SCALP
    in_cap = u[0] > anat.base_cut
    shell = (dist <= 0) & (dist > -anat.thickness_mm)
    tissue[shell & in_cap] = _SHELL
    tissue[shell & ~in_cap] = _NECK
    tissue[dist <= -anat.thickness_mm] = _BRAIN
    return tissue, u


def _plate_codes(anat, u):
    uz, uy, ux = u
    left = ux > anat.midline_x
    codes = np.where(left, 7, 6).astype(np.uint8)  # parietal by default
    frontal = uy > anat.coronal_y
    codes[frontal] = np.where(left[frontal], 2, 1)
    occipital = (uy + 0.35 * uz) < anat.lambdoid_y
    codes[occipital] = 5
    temporal = (uz < anat.temporal_z) & (np.abs(ux) > anat.temporal_x)
    codes[temporal] = np.where(ux[temporal] > 0, 4, 3)
    return codes


def _fontanelle_mask(anat, u):
    if anat.fontanelle_radius <= 0:
        return np.zeros(u.shape[1], dtype=bool)
    yc = anat.coronal_y
    centre = np.array([math.sqrt(max(1.0 - yc ** 2, 0.0)), yc, anat.midline_x])
    centre /= np.linalg.norm(centre)
    return np.sqrt(((u - centre[:, None]) ** 2).sum(axis=0)) < anat.fontanelle_radius


def _sutures(plates, spacing, width_mm, fontanelle):
    """Carve sutures along plate boundaries, one voxel deep on the lower-code side.

    The band is one voxel thick across the boundary so that every suture voxel
    touches both plates through its 26-neighbourhood; wider (younger) sutures
    reach further diagonally, up to the corner-neighbour distance.
    """
    sp = np.array(spacing)
    reach = min(max(width_mm, float(sp.min())), math.sqrt(3.0) * float(sp.max())) + 1e-6
    dist = {}
    for code in range(1, 8):
        mask = plates == code
        if mask.any():
            dist[code] = ndimage.distance_transform_edt(~mask, sampling=sp)
    suture = np.zeros(plates.shape, dtype=bool)
    for a in dist:
        side = plates == a
        for b in dist:
            if b > a:
                suture |= side & (dist[b] <= reach)

    labels = plates.copy()
    labels[suture] = 8
    present = np.zeros(plates.shape, dtype=np.int8)
    footprint = np.ones((3, 3, 3), dtype=bool)
    for code in range(1, 8):
        present += ndimage.binary_dilation(labels == code, structure=footprint).astype(np.int8)
    # reverting a voxel only adds bone neighbours to the others, so one pass suffices
    lonely = suture & (present < 2) & ~fontanelle
    labels[lonely] = plates[lonely]
    labels[fontanelle & (plates > 0)] = 8
    return labels


def _bias_field(grid, rng, amplitude, order=2):
    coords = [np.linspace(-1.0, 1.0, g) for g in grid]
    zz, yy, xx = np.meshgrid(*coords, indexing="ij")
    log_field = np.zeros(grid)
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                if i + j + k == 0:
                    continue
                log_field += rng.normal(0.0, 1.0) * zz ** i * yy ** j * xx ** k
    peak = np.abs(log_field).max()
    if peak > 0:
        log_field *= amplitude / peak
    return np.exp(log_field)


def generate_subject(spec, subject_id=None):
    """Build one paired MRI/CT/label subject; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    grid, spacing = spec.grid, spec.spacing_mm
    anat = _build_anatomy(spec, rng)
    base_width = spec.suture_base_width_mm or default_suture_base_width(spec)
    width = suture_width_mm(spec.age_days, base_width)
    if width >= 0.4 * anat.semi_axes.min():
        raise GenerationError(f"suture width {width:.1f} mm is not smaller than the plate size")

    if spec.misalign:
        ct_pose = _draw_pose(rng, 4.0, 2.0 * min(spacing))
        mri_extra = _draw_pose(rng, 3.0, 1.5 * min(spacing), 0.04)
    else:
        ct_pose = (np.eye(3), np.zeros(3), 1.0)
        mri_extra = (np.eye(3), np.zeros(3), 1.0)

    # CT frame: anatomy, plates, sutures, labels
    pts = _anatomical_coords(grid, spacing, *ct_pose)
    tissue, u = _tissue_and_direction(anat, pts)
    tissue = tissue.reshape(grid)
    plates = np.zeros(grid, dtype=np.uint8)
    shell = tissue == _SHELL
    plates[shell] = _plate_codes(anat, u[:, shell.ravel()])
    fontanelle = _fontanelle_mask(anat, u).reshape(grid) & shell
    labels = _sutures(plates, spacing, width, fontanelle)
    present = set(np.unique(labels).tolist())
    missing = set(range(9)) - present
    if missing:
        raise GenerationError(f"geometry leaves label codes {sorted(missing)} empty")

    ct = np.zeros(grid, dtype=np.float64)
    for code, level in CT_SOFT.items():
        ct[tissue == code] = level
    age_frac = (spec.age_days - AGE_MIN_DAYS) / (AGE_MAX_DAYS - AGE_MIN_DAYS)
    bone_level = 0.85 + 0.15 * age_frac
    ct[(labels >= 1) & (labels <= 7)] = bone_level
    ct[labels == 8] = CT_SUTURE
    head = tissue != _BG
    ct[head] += rng.normal(0.0, 0.01, size=int(head.sum()))
    if spec.with_bed:
        bed = np.zeros(grid, dtype=bool)
        h = grid[1]
        lo, hi = int(round(0.02 * h)), max(int(round(0.06 * h)), int(round(0.02 * h)) + 1)
        bed[:, lo:hi, int(0.1 * grid[2]):int(0.9 * grid[2])] = True
        bed &= ~ndimage.binary_dilation(head, iterations=2)
        ct[bed] = CT_BED
    ct = np.clip(ct, 0.0, None)
    # min-max over the field of view: air is the minimum, the head holds the maximum
    lo, hi = ct.min(), ct[head].max()
    ct = np.clip((ct - lo) / (hi - lo), 0.0, 1.0)

    # MRI frame: same anatomy under an extra similarity perturbation
    rot = mri_extra[0] @ ct_pose[0]
    shift = mri_extra[1] + mri_extra[2] * (mri_extra[0] @ ct_pose[1])
    scale = ct_pose[2] * mri_extra[2]
    mpts = _anatomical_coords(grid, spacing, rot, shift, scale)
    mtissue, _ = _tissue_and_direction(anat, mpts)
    mtissue = mtissue.reshape(grid)
    mri = np.zeros(grid, dtype=np.float64)
    for code, level in MRI_LEVELS.items():
        mri[mtissue == code] = level
    mri *= _bias_field(grid, rng, spec.bias_amplitude)
    mri *= 1.0 + rng.normal(0.0, spec.noise_sigma, size=grid) if spec.noise_sigma > 0 else 1.0
    mri = np.clip(mri, 0.0, None)

    sid = subject_id or f"phantom-{spec.seed}"
    meta = {"spec": _spec_dict(spec), "suture_width_mm": width}
    return SubjectRecord(
        subject_id=sid,
        age_days=int(spec.age_days),
        sex=spec.sex,
        mri=Volume(mri.astype(np.float32), spacing, Modality.MRI),
        ct=Volume(ct.astype(np.float32), spacing, Modality.CT),
        labels=LabelMap(labels, spacing),
        meta=meta,
    )


def _spec_dict(spec):
    d = asdict(spec)
    d["grid"] = list(spec.grid)
    return d


def cohort_specs(n, seed, grid=64, **overrides):
    """Per-subject specs for a cohort: uniform ages, exactly balanced sexes, spawned seeds."""
    if n < 4:
        raise ArgumentError(f"cohort needs at least 4 subjects, got {n}")
    rng = np.random.default_rng(seed)
    ages = rng.integers(AGE_MIN_DAYS, AGE_MAX_DAYS + 1, size=n)
    sexes = np.array(["M", "F"] * (n // 2) + (["M"] if n % 2 else []))
    rng.shuffle(sexes)
    children = np.random.SeedSequence(seed).spawn(n)
    seeds = [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]
    return [PhantomSpec(seed=s, age_days=int(a), sex=str(x), grid=grid, **overrides)
            for s, a, x in zip(seeds, ages, sexes)]


def generate_cohort(n, seed, grid=64, **overrides):
    specs = cohort_specs(n, seed, grid, **overrides)
    return [generate_subject(s, subject_id=f"sub-{i:03d}") for i, s in enumerate(specs)]
