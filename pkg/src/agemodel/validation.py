"""
Validation apparatus: Shepp-Logan phantoms, random smooth deformations,
simulated longitudinal cohorts, label transfer and Dice scoring, and the
aging-trend and topology sweeps run on a built model.
"""

from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, GridMismatchError
from .fields import (ScalarVolume, VelocityField, check_compatible, compose,
                     exp_field, interior_mask, jacobian_det, warp)

# Modified Shepp-Logan (Toft) ellipsoids: intensity, semi-axes (a, b, c),
# centre (x, y, z), rotation about z in degrees. The 2D phantom is the z=0
# section with the same in-plane parameters.
SHEPP_LOGAN_ELLIPSOIDS = (
    (1.0, 0.69, 0.92, 0.81, 0.0, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.78, 0.0, -0.0184, 0.0, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.22, 0.0, 0.0, -18.0),
    (-0.2, 0.16, 0.41, 0.28, -0.22, 0.0, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.41, 0.0, 0.35, -0.15, 0.0),
    (0.1, 0.046, 0.046, 0.05, 0.0, 0.1, 0.25, 0.0),
    (0.1, 0.046, 0.046, 0.05, 0.0, -0.1, 0.25, 0.0),
    (0.1, 0.046, 0.023, 0.05, -0.08, -0.605, 0.0, 0.0),
    (0.1, 0.023, 0.023, 0.02, 0.0, -0.606, 0.0, 0.0),
    (0.1, 0.023, 0.046, 0.02, 0.06, -0.605, 0.0, 0.0),
)

MIN_PHANTOM_SIZE = 32


def _normalized_axis(n):
    return (np.arange(n) + 0.5) / n * 2.0 - 1.0


def shepp_logan(grid):
    """Modified Shepp-Logan phantom with intensities in [0, 1].

    Voxel centres are mapped onto [-1, 1] along each axis. ``dims[2] == 1``
    gives the classic 2D phantom, otherwise the ellipsoid version.
    """
    if any(n > 1 and n < MIN_PHANTOM_SIZE for n in grid.dims) or grid.dims[0] == 1 \
            or grid.dims[1] == 1:
        raise DataError(f"phantom needs >= {MIN_PHANTOM_SIZE} voxels per axis, got {grid.dims}")
    x = _normalized_axis(grid.dims[0])
    y = _normalized_axis(grid.dims[1])
    z = _normalized_axis(grid.dims[2]) if grid.dims[2] > 1 else np.zeros(1)
    xx, yy, zz = np.meshgrid(x, y, z, indexing="ij")
    out = np.zeros(grid.dims)
    for amp, a, b, c, x0, y0, z0, deg in SHEPP_LOGAN_ELLIPSOIDS:
        th = np.deg2rad(deg)
        dx, dy = xx - x0, yy - y0
        xr = dx * np.cos(th) + dy * np.sin(th)
        yr = -dx * np.sin(th) + dy * np.cos(th)
        q = (xr / a) ** 2 + (yr / b) ** 2
        if grid.dims[2] > 1:
            q = q + ((zz - z0) / c) ** 2
        out[q <= 1.0] += amp
    return ScalarVolume(grid, np.clip(out, 0.0, 1.0))


def _taper(grid, margin, ramp):
    # zero within `margin` voxels of the boundary, smoothstep to 1 over `ramp`
    w = np.ones(grid.dims)
    for k, n in enumerate(grid.dims):
        if n == 1:
            continue
        i = np.arange(n)
        d = np.minimum(i, n - 1 - i).astype(np.float64)
        r = np.clip((d - margin) / ramp, 0.0, 1.0) if ramp > 0 else (d >= margin) * 1.0
        shape = [1, 1, 1]
        shape[k] = n
        w = w * (r * r * (3 - 2 * r)).reshape(shape)
    return w


def random_smooth_field(grid, amplitude_voxels, sigma_mm, seed, margin=2):
    """Gaussian-smoothed white-noise SVF with a given peak magnitude.

    The field is zero within ``margin`` voxels of the boundary and rises to
    full strength over a smoothstep ramp of two smoothing widths, so no hard
    edge is introduced. The peak voxel-space magnitude equals
    ``amplitude_voxels``. ``seed`` may be an int or a sequence of ints.
    """
    if amplitude_voxels < 0:
        raise ValueError("amplitude must be non-negative")
    if amplitude_voxels == 0:
        return VelocityField.zeros(grid)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(grid.dims + (3,))
    sigma = [sigma_mm / s if n > 1 else 0.0 for s, n in zip(grid.spacing, grid.dims)]
    vox = np.empty_like(noise)
    for c in range(3):
        vox[..., c] = gaussian_filter(noise[..., c], sigma)
    if grid.is_2d:
        vox[..., 2] = 0.0
    ramp = 2.0 * max(s for s, n in zip(sigma, grid.dims) if n > 1)
    vox *= _taper(grid, margin, ramp)[..., None]
    peak = np.sqrt(np.max(np.sum(vox ** 2, axis=-1)))
    if peak == 0:
        return VelocityField.zeros(grid)
    vox *= amplitude_voxels / peak
    field = VelocityField(grid, vox * np.asarray(grid.spacing))
    # rounding can leave the peak an ulp short, which changes exp_field's step count
    for _ in range(4):
        if field.max_voxel_norm() >= amplitude_voxels:
            break
        vox *= np.nextafter(1.0, 2.0)
        field = VelocityField(grid, vox * np.asarray(grid.spacing))
    return field


# ---------------------------------------------------------------------------
# labels

class LabelVolume:
    """Integer label map on a grid; label 0 is background."""

    def __init__(self, grid, labels):
        labels = np.asarray(labels)
        if labels.shape != grid.dims:
            raise DataError(f"labels have shape {labels.shape}, expected {grid.dims}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise DataError("labels must be integers")
        labels = labels.astype(np.int32)
        if labels.min(initial=0) < 0:
            raise DataError("labels must be non-negative")
        self.grid = grid
        self.labels = labels

    def present(self):
        return sorted(int(v) for v in np.unique(self.labels) if v != 0)


def dice(a, b, label):
    """``2|A & B| / (|A| + |B|)`` for voxels equal to ``label``; 1 when both are empty."""
    if not a.grid.compatible(b.grid):
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")
    ma = a.labels == label
    mb = b.labels == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def warp_labels(labels, phi):
    """Nearest-neighbour label transfer through ``phi``; outside the grid maps to 0."""
    check_compatible(labels, phi)
    g = labels.grid
    disp = np.moveaxis(phi.voxel_units(), -1, 0)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in g.dims], indexing="ij")) + disp
    near = np.floor(idx + 0.5).astype(np.intp)
    inside = np.ones(g.dims, dtype=bool)
    for k in range(3):
        inside &= (near[k] >= 0) & (near[k] < g.dims[k])
        near[k] = np.clip(near[k], 0, g.dims[k] - 1)
    out = labels.labels[near[0], near[1], near[2]]
    return LabelVolume(g, np.where(inside, out, 0))


# ---------------------------------------------------------------------------
# simulated longitudinal cohort

@dataclass(frozen=True)
class SimulationSpec:
    """Parameters of a simulated cross-sectional aging cohort.

    ``aging_amplitude_schedule`` holds the peak magnitude (voxels) of the
    shared aging deformation at each timepoint; ``ages`` defaults to
    ``0, 1, ..., timepoints - 1``. ``phantom_blur_mm`` softens the phantom
    edges before deforming it.
    """

    cohort_size: int = 50
    timepoints: int = 5
    subject_variation_amplitude: float = 1.0
    subject_variation_sigma: float = 8.0
    aging_amplitude_schedule: tuple = (0.0, 0.5, 1.0, 1.5, 2.0)
    aging_sigma_mm: float = 12.0
    phantom_blur_mm: float = 1.0
    template_iterations: int = 3
    ages: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "aging_amplitude_schedule",
                           tuple(float(a) for a in self.aging_amplitude_schedule))
        object.__setattr__(self, "ages", tuple(float(a) for a in self.ages))
        sched = self.aging_amplitude_schedule
        if self.cohort_size < 1 or self.timepoints < 1:
            raise DataError("cohort_size and timepoints must be positive")
        if len(sched) != self.timepoints:
            raise DataError(f"schedule has {len(sched)} entries for {self.timepoints} timepoints")
        if any(a < 0 for a in sched) or any(b < a for a, b in zip(sched, sched[1:])):
            raise DataError("schedule must be non-negative and non-decreasing")
        if self.ages and len(self.ages) != self.timepoints:
            raise DataError("ages must have one entry per timepoint")
        if self.subject_variation_amplitude < 0 or self.subject_variation_sigma <= 0 \
                or self.aging_sigma_mm <= 0 or self.phantom_blur_mm < 0:
            raise DataError("amplitudes must be >= 0 and smoothing widths > 0")
        if self.template_iterations < 1:
            raise DataError("template_iterations must be positive")

    @property
    def age_list(self):
        return list(self.ages) if self.ages else [float(i) for i in range(self.timepoints)]

    def to_dict(self):
        d = asdict(self)
        d["aging_amplitude_schedule"] = list(self.aging_amplitude_schedule)
        d["ages"] = list(self.ages)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown simulation parameters: {sorted(unknown)}")
        return cls(**d)


def base_phantom(spec, grid):
    img = shepp_logan(grid)
    if spec.phantom_blur_mm == 0:
        return img
    sigma = [spec.phantom_blur_mm / s if n > 1 else 0.0 for s, n in zip(grid.spacing, grid.dims)]
    return img.with_data(gaussian_filter(img.data, sigma, mode="constant"))


def aging_field(spec, grid):
    """The shared aging SVF with unit peak magnitude (voxels)."""
    return random_smooth_field(grid, 1.0, spec.aging_sigma_mm, [spec.seed, 0])


def subject_field(spec, grid, index):
    return random_smooth_field(grid, spec.subject_variation_amplitude,
                               spec.subject_variation_sigma, [spec.seed, 1, index])


@dataclass
class SimulationResult:
    series: object
    ground_truth: list
    subjects: list
    aging: VelocityField


def simulate_cohort(spec, grid):
    """Subject images per timepoint and the matching ground-truth templates.

    Subject ``k`` at timepoint ``t`` is
    ``phantom o exp(subject_k) o exp(aging * schedule[t])`` and the ground
    truth is ``phantom o exp(aging * schedule[t])``.
    """
    phantom = base_phantom(spec, grid)
    w = aging_field(spec, grid)
    subj = [exp_field(subject_field(spec, grid, k)) for k in range(spec.cohort_size)]
    cohorts, truth = [], []
    for amp in spec.aging_amplitude_schedule:
        phi_age = exp_field(w * amp)
        truth.append(warp(phantom, phi_age))
        cohorts.append([warp(phantom, compose(s, phi_age)) for s in subj])
    return cohorts, truth, w


def simulate_longitudinal(spec, grid, params=None, return_details=False):
    """Simulated age series: one groupwise template per timepoint.

    Returns ``(series, ground_truth)``, or a :class:`SimulationResult` when
    ``return_details`` is set.
    """
    from .model import AgeSeries
    from .registration import RegistrationParams
    from .template import build_groupwise_template

    params = RegistrationParams() if params is None else params
    cohorts, truth, w = simulate_cohort(spec, grid)
    templates = []
    for images in cohorts:
        if len(images) == 1:
            templates.append(images[0])
        else:
            templates.append(build_groupwise_template(images, params,
                                                      spec.template_iterations).template)
    series = AgeSeries(templates, spec.age_list)
    if return_details:
        return SimulationResult(series, truth, cohorts, w)
    return series, truth


# ---------------------------------------------------------------------------
# model diagnostics

def mse(a, b):
    check_compatible(a, b)
    return float(np.mean((a.data - b.data) ** 2))


def mse_trend(model, ts):
    """``MSE(T(t), T(ts[0]))`` for every ``t`` in ``ts``."""
    from .model import synthesize

    if len(ts) < 2:
        raise DataError("mse_trend needs at least two ages")
    first = synthesize(model, ts[0])
    return [mse(synthesize(model, t), first) for t in ts]


def topology_sweep(model, t_min, t_max, samples=20, margin=1):
    """Minimum interior Jacobian determinant of the applied deformation over ages.

    Non-positive values are reported, not raised.
    """
    from .model import applied_deformation

    if samples < 2:
        raise DataError("topology_sweep needs at least two samples")
    mask = interior_mask(model.G.grid, margin)
    out = []
    for t in np.linspace(t_min, t_max, samples):
        det = jacobian_det(applied_deformation(model, float(t)))
        out.append((float(t), float(det.data[mask].min())))
    return out
