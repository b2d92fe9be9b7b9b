"""
Affine pre-alignment and log-domain demons registration.

Direction convention used throughout the package: ``log_demons_register(fixed,
moving)`` returns ``v`` with ``warp(moving, exp_field(v)) ~= fixed``, and
``affine_register(fixed, moving)`` returns a transform ``A`` with
``resample_affine(moving, A) ~= fixed``.
"""

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import minimize

from .errors import DataError, NoGradientError, NumericalError
from .fields import (GridSpec, ScalarVolume, VelocityField, bch_accumulate,
                     check_compatible, exp_field, gaussian_smooth_field, interpolate,
                     spatial_gradient, warp)


@dataclass(frozen=True)
class RegistrationParams:
    """Settings shared by affine and demons registration.

    ``iterations_per_level`` is ordered coarsest level first.
    """

    levels: int = 3
    iterations_per_level: tuple = (50, 30, 20)
    update_sigma_mm: float = 2.0
    field_sigma_mm: float = 1.5
    step_scale: float = 1.0
    convergence_tol: float = 1e-4
    affine_iterations: int = 100

    def __post_init__(self):
        object.__setattr__(self, "iterations_per_level",
                           tuple(int(i) for i in self.iterations_per_level))
        if self.levels < 1:
            raise ValueError("levels must be positive")
        if len(self.iterations_per_level) != self.levels:
            raise ValueError("need one iteration count per level")
        if any(i < 1 for i in self.iterations_per_level):
            raise ValueError("iteration counts must be positive")
        if self.update_sigma_mm <= 0 or self.field_sigma_mm <= 0:
            raise ValueError("smoothing widths must be positive")
        if not 0 < self.step_scale <= 1:
            raise ValueError("step_scale must lie in (0, 1]")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")
        if self.affine_iterations < 1:
            raise ValueError("affine_iterations must be positive")

    def to_dict(self):
        d = asdict(self)
        d["iterations_per_level"] = list(self.iterations_per_level)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown registration parameters: {sorted(unknown)}")
        known = dict(d)
        if "iterations_per_level" in known:
            known["iterations_per_level"] = tuple(known["iterations_per_level"])
        return cls(**known)


# ---------------------------------------------------------------------------
# pyramid helpers

def _check_gradient(img, what):
    if np.ptp(img.data) == 0:
        raise NoGradientError(f"{what} image is constant; nothing to register")


def downsample(img):
    """Gaussian-smooth and take every second voxel along non-degenerate axes."""
    g = img.grid
    sigma = [1.0 if n > 1 else 0.0 for n in g.dims]
    smoothed = gaussian_filter(img.data, sigma, mode="nearest")
    sl = tuple(slice(None, None, 2) if n > 1 else slice(None) for n in g.dims)
    data = smoothed[sl]
    spacing = tuple(s * 2 if n > 1 else s for s, n in zip(g.spacing, g.dims))
    return ScalarVolume(GridSpec(data.shape, spacing, g.origin), data)


def build_pyramid(img, levels):
    """Image pyramid ordered coarsest first; no level is halved once an axis is below 16 voxels."""
    pyr = [img]
    for _ in range(levels - 1):
        top = pyr[-1]
        if any(n > 1 and n < 16 for n in top.grid.dims):
            break
        pyr.append(downsample(top))
    return pyr[::-1]


def resample_to_grid(values, src, dst, outside="clamp"):
    """Sample an array defined on grid ``src`` at the voxel centres of ``dst``."""
    pts = dst.physical_coordinates()
    coords = np.stack([(pts[..., k] - src.origin[k]) / src.spacing[k] for k in range(3)])
    return interpolate(values, coords, outside)


def upsample_field(v, grid):
    """Trilinear upsampling; vectors are in mm so magnitudes carry over unchanged."""
    return VelocityField(grid, resample_to_grid(v.vectors, v.grid, grid))


def ssd(a, b):
    return float(np.mean((a.data - b.data) ** 2))


# ---------------------------------------------------------------------------
# affine

@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Physical-space map ``y = matrix @ x + translation``."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(m)) <= 1e-8:
            raise NumericalError("affine matrix is singular")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def inverse(self):
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.translation)

    def apply(self, points):
        return points @ self.matrix.T + self.translation

    def to_dict(self):
        return {"matrix": self.matrix.tolist(), "translation": self.translation.tolist()}


def _affine_coords(grid, transform):
    pts = transform.apply(grid.physical_coordinates())
    return np.stack([(pts[..., k] - grid.origin[k]) / grid.spacing[k] for k in range(3)])


def resample_affine(img, transform):
    """``out(x) = img(A(x))`` with trilinear interpolation, zero-padded outside the grid."""
    if not isinstance(transform, AffineTransform):
        transform = AffineTransform(*transform)
    return ScalarVolume(img.grid, interpolate(img.data, _affine_coords(img.grid, transform), "zero"))


def center_of_mass(img):
    w = np.clip(img.data, 0, None)
    if w.sum() == 0:
        w = np.abs(img.data)
    pts = img.grid.physical_coordinates()
    return np.tensordot(w, pts, axes=(list(range(3)), list(range(3)))) / w.sum()


def affine_register(fixed, moving, params=RegistrationParams()):
    """Twelve-parameter affine minimising mean squared difference.

    Initialised by centre-of-mass alignment, then refined coarse to fine with
    L-BFGS on an analytic gradient. In 2D the z row and column stay fixed.
    """
    check_compatible(fixed, moving)
    _check_gradient(fixed, "fixed")
    _check_gradient(moving, "moving")

    grid = fixed.grid
    center = grid.center()
    radius = max(0.5 * s * (n - 1) for s, n in zip(grid.spacing, grid.dims))
    free = np.ones(12, dtype=bool)
    if grid.is_2d:
        for a in range(3):
            free[2 * 3 + a] = False
            free[a * 3 + 2] = False
        free[11] = False

    # theta = [radius * (A - I) row-major, shift]; y = center + A (x - center) + shift
    theta = np.zeros(12)
    theta[9:] = center_of_mass(moving) - center_of_mass(fixed)
    if grid.is_2d:
        theta[11] = 0.0

    def unpack(th):
        a = np.eye(3) + th[:9].reshape(3, 3) / radius
        return a, th[9:]

    for f_lvl, m_lvl in zip(build_pyramid(fixed, params.levels),
                            build_pyramid(moving, params.levels)):
        g = f_lvl.grid
        rel = g.physical_coordinates() - center
        grad_m = spatial_gradient(m_lvl.data, g)
        fdata = f_lvl.data
        origin = np.asarray(g.origin)
        spacing = np.asarray(g.spacing)

        def objective(th_free):
            th = theta.copy()
            th[free] = th_free
            a, shift = unpack(th)
            y = center + rel @ a.T + shift
            coords = np.moveaxis((y - origin) / spacing, -1, 0)
            resid = interpolate(m_lvl.data, coords, "zero") - fdata
            gm = interpolate(grad_m, coords, "zero")
            n = resid.size
            value = float(np.sum(resid ** 2)) / n
            weighted = 2.0 * resid[..., None] * gm / n
            g_shift = weighted.reshape(-1, 3).sum(axis=0)
            g_mat = weighted.reshape(-1, 3).T @ rel.reshape(-1, 3) / radius
            full = np.concatenate([g_mat.ravel(), g_shift])
            return value, full[free]

        res = minimize(objective, theta[free], jac=True, method="L-BFGS-B",
                       options={"maxiter": params.affine_iterations, "gtol": 1e-10,
                                "ftol": 1e-12})
        theta[free] = res.x

    a, shift = unpack(theta)
    return AffineTransform(a, center + shift - a @ center)


# ---------------------------------------------------------------------------
# demons

@dataclass
class DemonsResult:
    """Output of :func:`log_demons_register` with per-level diagnostics."""

    field: VelocityField
    initial_ssd: float
    final_ssd: float
    level_ssd: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    converged: list = field(default_factory=list)


def demons_force(fixed, warped, step_scale=1.0, diff_threshold=1e-3):
    """Demons update in mm: ``-d * grad / (|grad|^2 + d^2 / K)``, ``d = warped - fixed``.

    ``K`` is the mean squared voxel spacing so one step never exceeds half a
    voxel. Voxels whose difference is below ``diff_threshold`` times the
    fixed image's intensity range get no force.
    """
    g = fixed.grid
    diff = warped.data - fixed.data
    grad = spatial_gradient(warped.data, g)
    k = float(np.mean(np.square(g.spacing)))
    denom = np.sum(grad ** 2, axis=-1) + diff ** 2 / k
    scale = np.zeros_like(diff)
    ok = (denom > 1e-12) & (np.abs(diff) > diff_threshold * np.ptp(fixed.data))
    scale[ok] = -step_scale * diff[ok] / denom[ok]
    return VelocityField(g, grad * scale[..., None])


def _demons_level(fixed, moving, v, params, iterations, level_scale):
    update_sigma = params.update_sigma_mm * level_scale
    field_sigma = params.field_sigma_mm * level_scale
    history = []
    best_v, best_ssd = v, None
    prev = None
    converged = False
    for it in range(iterations + 1):
        warped = warp(moving, exp_field(v))
        cur = ssd(warped, fixed)
        history.append(cur)
        if best_ssd is None or cur < best_ssd:
            best_v, best_ssd = v, cur
        if prev is not None and prev > 0 and abs(prev - cur) / prev < params.convergence_tol:
            converged = True
            break
        if cur == 0.0 or it == iterations:
            converged = cur == 0.0
            break
        prev = cur
        update = gaussian_smooth_field(demons_force(fixed, warped, params.step_scale),
                                       update_sigma)
        v = bch_accumulate(v, update)
        v = gaussian_smooth_field(v, field_sigma)
    return best_v, history, converged


def log_demons_register(fixed, moving, params=RegistrationParams(), return_diagnostics=False):
    """Log-domain demons: SVF ``v`` with ``warp(moving, exp_field(v)) ~= fixed``.

    Each iteration computes the demons force on the current warped image,
    smooths it (``update_sigma_mm``), folds it into ``v`` through
    :func:`bch_accumulate` and smooths ``v`` (``field_sigma_mm``). Each level
    stops at its iteration cap or when the relative SSD change drops below
    ``convergence_tol`` and keeps its best iterate, so no level ends worse
    than it started. Non-convergence is reported, not raised.
    """
    check_compatible(fixed, moving)
    _check_gradient(fixed, "fixed")
    _check_gradient(moving, "moving")

    fixed_pyr = build_pyramid(fixed, params.levels)
    moving_pyr = build_pyramid(moving, params.levels)
    iters = params.iterations_per_level[-len(fixed_pyr):]
    v = VelocityField.zeros(fixed_pyr[0].grid)
    level_ssd, n_iter, conv = [], [], []
    for f_lvl, m_lvl, n in zip(fixed_pyr, moving_pyr, iters):
        if not v.grid.compatible(f_lvl.grid):
            v = upsample_field(v, f_lvl.grid)
        # kernels are specified in mm on the finest grid and keep their
        # width in voxels on coarser levels
        scale = max(a / b for a, b in zip(f_lvl.grid.spacing, fixed.grid.spacing))
        v, hist, ok = _demons_level(f_lvl, m_lvl, v, params, n, scale)
        level_ssd.append((hist[0], min(hist)))
        n_iter.append(len(hist) - 1)
        conv.append(ok)
    if not np.all(np.isfinite(v.vectors)):
        raise NumericalError("demons produced a non-finite field")
    if not return_diagnostics:
        return v
    return DemonsResult(field=v, initial_ssd=ssd(moving, fixed),
                        final_ssd=ssd(warp(moving, exp_field(v)), fixed),
                        level_ssd=level_ssd, iterations=n_iter, converged=conv)
