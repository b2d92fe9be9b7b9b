"""
Grid, image and stationary velocity field algebra.

Volumes are stored as numpy arrays indexed ``[x, y, z]`` with shape
``grid.dims``; vector fields carry a trailing axis of length 3 holding
(x, y, z) components in millimetres. A 2D image is a grid with
``dims[2] == 1``; its fields have zero z-components and every operator
below treats the degenerate axis as having zero derivative.

The deformation convention is ``phi(x) = x + u(x)`` and images are
resampled by pullback, ``(img o phi)(x) = img(phi(x))``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError, InvalidFieldError

# Largest voxel-space step allowed before a field must be split (scaling
# and squaring, BCH splitting).
HALF_VOXEL = 0.5


@dataclass(frozen=True)
class GridSpec:
    """Regular axis-aligned sampling grid."""

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("dims, spacing and origin must each have 3 entries")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"all spacings must be positive, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self):
        return self.dims

    @property
    def size(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def is_2d(self):
        return self.dims[2] == 1

    def compatible(self, other):
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.origin == other.origin)

    def physical_coordinates(self):
        """Physical (mm) coordinates of every voxel, shape ``dims + (3,)``."""
        axes = [self.origin[k] + self.spacing[k] * np.arange(self.dims[k])
                for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def center(self):
        return np.array([self.origin[k] + 0.5 * self.spacing[k] * (self.dims[k] - 1)
                         for k in range(3)])


def check_compatible(*objs):
    first = objs[0].grid
    for other in objs[1:]:
        if not first.compatible(other.grid):
            raise GridMismatchError(f"grid mismatch: {first} vs {other.grid}")


def _finite_array(arr, shape, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidFieldError(f"{what} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidFieldError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Intensity image on a grid; ``data`` has shape ``grid.dims``."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _finite_array(self.data, self.grid.dims, "volume"))

    @property
    def voxels(self):
        """Flat voxel array in x-fastest order."""
        return self.data.ravel(order="F")

    @classmethod
    def from_voxels(cls, grid, voxels):
        return cls(grid, np.asarray(voxels, dtype=np.float64).reshape(grid.dims, order="F"))

    def with_data(self, data):
        return ScalarVolume(self.grid, data)


class _VectorField:
    """Shared arithmetic for per-voxel 3-vector fields in millimetres."""

    __slots__ = ("grid", "vectors")

    def __init__(self, grid, vectors):
        self.grid = grid
        self.vectors = _finite_array(vectors, grid.dims + (3,), type(self).__name__)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.dims + (3,)))

    def voxel_units(self):
        """Vectors expressed in voxels rather than millimetres."""
        return self.vectors / np.asarray(self.grid.spacing)

    def max_voxel_norm(self):
        return float(np.sqrt(np.max(np.sum(self.voxel_units() ** 2, axis=-1))))

    def __mul__(self, c):
        return type(self)(self.grid, self.vectors * float(c))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return type(self)(self.grid, self.vectors / float(c))

    def __neg__(self):
        return type(self)(self.grid, -self.vectors)

    def __add__(self, other):
        check_compatible(self, other)
        return type(self)(self.grid, self.vectors + other.vectors)

    def __sub__(self, other):
        check_compatible(self, other)
        return type(self)(self.grid, self.vectors - other.vectors)

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.grid.dims}, max={self.max_voxel_norm():.3g} vox)"


class VelocityField(_VectorField):
    """Stationary velocity field; ``exp_field`` maps it to a deformation."""

    __slots__ = ()


class DeformationField(_VectorField):
    """Dense map ``phi(x) = x + displacements(x)``."""

    __slots__ = ()

    @property
    def displacements(self):
        return self.vectors

    @classmethod
    def identity(cls, grid):
        return cls.zeros(grid)


# ---------------------------------------------------------------------------
# interpolation

def _voxel_index_grid(grid):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in grid.dims],
                                indexing="ij"), axis=0)


def _target_coordinates(phi):
    """Voxel-index coordinates ``phi(x)`` for every voxel, shape ``(3,) + dims``."""
    disp = np.moveaxis(phi.voxel_units(), -1, 0)
    return _voxel_index_grid(phi.grid) + disp


def _lerp(a, b, t):
    # exact when a == b or t == 0
    return a + t * (b - a)


def interpolate(values, coords, outside="zero"):
    """Trilinear interpolation of ``values`` at voxel coordinates ``coords``.

    ``values`` has shape ``dims`` or ``dims + (C,)``; ``coords`` has shape
    ``(3,) + out_shape``. With ``outside="zero"`` the grid is padded by a
    layer of zeros, so samples more than one voxel beyond the edge are 0 and
    the result is continuous across the boundary; with ``outside="clamp"``
    coordinates are clamped to the edge. Integer coordinates inside the grid
    return grid values exactly.
    """
    if outside == "zero":
        # zero layer on every sampled axis; a single-sample axis stays as is
        pad = [(1, 1) if n > 1 else (0, 0) for n in values.shape[:3]]
        padded = np.pad(values, pad + [(0, 0)] * (values.ndim - 3))
        shifted = np.stack([coords[k] + pad[k][0] for k in range(3)])
        return interpolate(padded, shifted, "clamp")
    if outside != "clamp":
        raise ValueError(f"unknown outside mode {outside!r}")
    dims = values.shape[:3]
    trailing = values.shape[3:]
    flat_vals = values.reshape((-1,) + trailing)
    idx0, idx1, frac = [], [], []
    for k in range(3):
        n = dims[k]
        c = np.clip(coords[k], 0, n - 1)
        i0 = np.floor(c).astype(np.intp)
        idx0.append(i0)
        idx1.append(np.minimum(i0 + 1, n - 1))
        frac.append(c - i0)

    def gather(ix, iy, iz):
        return flat_vals[(ix * dims[1] + iy) * dims[2] + iz]

    def expand(f):
        return f.reshape(f.shape + (1,) * len(trailing))

    fx, fy, fz = (expand(f) for f in frac)
    x0, x1 = idx0[0], idx1[0]
    y0, y1 = idx0[1], idx1[1]

    def plane(iz):
        a = _lerp(gather(x0, y0, iz), gather(x1, y0, iz), fx)
        b = _lerp(gather(x0, y1, iz), gather(x1, y1, iz), fx)
        return _lerp(a, b, fy)

    if dims[2] == 1:
        return plane(idx0[2])
    return _lerp(plane(idx0[2]), plane(idx1[2]), fz)


def resample(values, phi, outside="zero"):
    """Pull ``values`` (array on ``phi.grid``) back through ``phi``."""
    return interpolate(values, _target_coordinates(phi), outside)


# ---------------------------------------------------------------------------
# group operations

def compose(outer, inner):
    """Return ``outer o inner``; ``outer`` is sampled at ``inner(x)`` with edge clamping."""
    check_compatible(outer, inner)
    sampled = resample(outer.displacements, inner, outside="clamp")
    return DeformationField(outer.grid, inner.displacements + sampled)


def warp(img, phi):
    """Resample ``img`` through ``phi``: ``out(x) = img(phi(x))``, zero-padded outside the grid."""
    check_compatible(img, phi)
    return ScalarVolume(img.grid, resample(img.data, phi, outside="zero"))


def squaring_steps(v):
    """Smallest ``s >= 0`` with ``max|v| / 2**s < 0.5`` voxel."""
    m = v.max_voxel_norm()
    s = 0
    while m / 2.0 ** s >= HALF_VOXEL:
        s += 1
    return s


def exp_field(v):
    """Group exponential of a stationary velocity field by scaling and squaring."""
    if not isinstance(v, _VectorField):
        raise InvalidFieldError(f"expected a VelocityField, got {type(v).__name__}")
    if not np.all(np.isfinite(v.vectors)):
        raise InvalidFieldError("velocity field contains non-finite values")
    s = squaring_steps(v)
    phi = DeformationField(v.grid, v.vectors / 2.0 ** s)
    for _ in range(s):
        phi = compose(phi, phi)
    return phi


# ---------------------------------------------------------------------------
# derivatives, brackets, BCH

def spatial_gradient(values, grid):
    """Central-difference gradient in mm, one-sided at the boundary.

    Returns an array with a new trailing axis of length 3 (d/dx, d/dy, d/dz);
    axes with a single sample get a zero derivative.
    """
    out = np.zeros(values.shape + (3,))
    for k in range(3):
        if grid.dims[k] > 1:
            out[..., k] = np.gradient(values, grid.spacing[k], axis=k)
    return out


def field_jacobian(v):
    """``J[..., a, b] = d v_a / d x_b`` for a vector field."""
    jac = np.zeros(v.grid.dims + (3, 3))
    for k in range(3):
        if v.grid.dims[k] > 1:
            jac[..., :, k] = np.gradient(v.vectors, v.grid.spacing[k], axis=k)
    return jac


def _apply(jac, vec):
    return np.einsum("...ab,...b->...a", jac, vec)


def lie_bracket(u, w):
    """Lie bracket ``[u, w] = (Ju) w - (Jw) u``.

    This sign makes ``u + w + [u, w] / 2`` the second-order approximation of
    ``log(exp(u) o exp(w))``.
    """
    check_compatible(u, w)
    return VelocityField(u.grid, _apply(field_jacobian(u), w.vectors)
                         - _apply(field_jacobian(w), u.vectors))


def _is_zero(v):
    return not np.any(v.vectors)


def bch(u, w):
    """Truncated Baker-Campbell-Hausdorff series for ``log(exp(u) o exp(w))``.

    ``u + w + [u,w]/2 + ([u,[u,w]] + [w,[w,u]])/12``. Exact when either
    argument is zero.
    """
    check_compatible(u, w)
    if _is_zero(w):
        return VelocityField(u.grid, u.vectors.copy())
    if _is_zero(u):
        return VelocityField(w.grid, w.vectors.copy())
    ju = field_jacobian(u)
    jw = field_jacobian(w)
    b1 = _apply(ju, w.vectors) - _apply(jw, u.vectors)
    jb1 = field_jacobian(VelocityField(u.grid, b1))
    u_uw = _apply(ju, b1) - _apply(jb1, u.vectors)
    # [w, [w, u]] = -[w, [u, w]]
    w_wu = -(_apply(jw, b1) - _apply(jb1, w.vectors))
    return VelocityField(u.grid, u.vectors + w.vectors + 0.5 * b1 + (u_uw + w_wu) / 12.0)


def split_count(w):
    """Smallest ``n >= 1`` with ``max|w| / n < 0.5`` voxel."""
    m = w.max_voxel_norm()
    n = max(1, int(np.floor(m / HALF_VOXEL)) + 1)
    while n > 1 and m / (n - 1) < HALF_VOXEL:
        n -= 1
    while m / n >= HALF_VOXEL:
        n += 1
    return n


def bch_accumulate(acc, w):
    """Fold ``w`` into ``acc`` through ``n`` BCH steps of ``w / n`` each."""
    check_compatible(acc, w)
    if _is_zero(w):
        return VelocityField(acc.grid, acc.vectors.copy())
    if _is_zero(acc):
        # log(exp(0) o exp(w)) = w without truncation error
        return VelocityField(w.grid, w.vectors.copy())
    n = split_count(w)
    piece = w / n
    for _ in range(n):
        acc = bch(acc, piece)
    return acc


# ---------------------------------------------------------------------------
# measurements

def field_norm(v):
    """Root-mean-square vector magnitude in mm."""
    if not np.all(np.isfinite(v.vectors)):
        raise InvalidFieldError("field contains non-finite values")
    sq = np.sum(v.vectors ** 2, axis=-1).ravel()
    return float(np.sqrt(np.sum(sq) / sq.size))


def jacobian_det(phi):
    """Per-voxel determinant of the spatial derivative of ``phi``."""
    jac = field_jacobian(phi) + np.eye(3)
    return ScalarVolume(phi.grid, np.linalg.det(jac))


def interior_mask(grid, margin=1):
    """Boolean mask excluding ``margin`` voxels at each non-degenerate boundary."""
    mask = np.zeros(grid.dims, dtype=bool)
    sl = tuple(slice(margin, n - margin) if n > 1 else slice(None) for n in grid.dims)
    mask[sl] = True
    return mask


def max_displacement_difference(a, b, mask=None):
    """Largest voxel-space distance between two deformations' displacements."""
    check_compatible(a, b)
    diff = np.sqrt(np.sum(((a.vectors - b.vectors) / np.asarray(a.grid.spacing)) ** 2, axis=-1))
    if mask is not None:
        diff = diff[mask]
    return float(diff.max())


def gaussian_smooth_field(v, sigma_mm):
    """Gaussian-smooth each component with a physical-unit width."""
    from scipy.ndimage import gaussian_filter

    sigma = [sigma_mm / s if n > 1 else 0.0 for s, n in zip(v.grid.spacing, v.grid.dims)]
    out = np.empty_like(v.vectors)
    for c in range(3):
        out[..., c] = gaussian_filter(v.vectors[..., c], sigma, mode="constant")
    return type(v)(v.grid, out)
