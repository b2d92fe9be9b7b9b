"""
Temporal reparameterisation curve fitted to normalised deformation ratios.

Each side of the reference age is fitted separately as a function of the
distance ``s = |t - M|`` from the reference age, with the value pinned to 0
at ``s = 0``. Samples are smoothed with a natural cubic smoothing spline,
extended linearly past the last sample with the end slope, clamped to the
running maximum (so the curve never decreases moving away from ``M``) and
clipped at 0.
"""

import numpy as np

from .errors import DataError


def _penalty_matrices(x):
    # Green & Silverman: Q^T f = R g links values f to interior second
    # derivatives g of the natural cubic interpolant; roughness = g^T R g.
    n = len(x)
    h = np.diff(x)
    q = np.zeros((n, n - 2))
    r = np.zeros((n - 2, n - 2))
    for j in range(1, n - 1):
        q[j - 1, j - 1] = 1.0 / h[j - 1]
        q[j, j - 1] = -1.0 / h[j - 1] - 1.0 / h[j]
        q[j + 1, j - 1] = 1.0 / h[j]
        r[j - 1, j - 1] = (h[j - 1] + h[j]) / 3.0
        if j < n - 2:
            r[j - 1, j] = r[j, j - 1] = h[j] / 6.0
    return q, r


def smoothing_spline(x, y, smoothing_weight):
    """Anchored natural cubic smoothing spline through ``(x, y)``.

    ``x[0]`` is the anchor and its value is held at exactly ``y[0]``.
    ``smoothing_weight`` in [0, 1) sets the roughness penalty
    ``lam = w / (1 - w) * hbar**3 / 6`` on abscissae rescaled to [0, 1],
    where ``hbar`` is the mean knot spacing; 0 interpolates.

    Returns ``(breaks, coefs)`` with ``coefs[i] = (c0, c1, c2, c3)`` for
    ``c0 + c1 d + c2 d**2 + c3 d**3``, ``d = x - breaks[i]``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 3:
        raise DataError("smoothing spline needs the anchor plus at least two samples")
    if np.any(np.diff(x) <= 0):
        raise DataError("spline abscissae must be strictly increasing")
    if not 0 <= smoothing_weight < 1:
        raise DataError("smoothing_weight must lie in [0, 1)")
    extent = x[-1] - x[0]
    xn = (x - x[0]) / extent
    hbar = 1.0 / (len(x) - 1)
    lam = smoothing_weight / (1.0 - smoothing_weight) * hbar ** 3 / 6.0
    q, r = _penalty_matrices(xn)
    k = q @ np.linalg.solve(r, q.T)
    # f[0] is fixed at y[0]; solve the normal equations for the rest
    a = np.eye(len(x) - 1) + lam * k[1:, 1:]
    rhs = y[1:] - lam * k[1:, 0] * y[0]
    f = np.concatenate([[y[0]], np.linalg.solve(a, rhs)])
    g = np.zeros(len(x))
    g[1:-1] = np.linalg.solve(r, q.T @ f)
    # back to original abscissa units
    h = np.diff(xn) * extent
    g = g / extent ** 2
    coefs = np.empty((len(x) - 1, 4))
    coefs[:, 0] = f[:-1]
    coefs[:, 1] = np.diff(f) / h - h * (2 * g[:-1] + g[1:]) / 6.0
    coefs[:, 2] = g[:-1] / 2.0
    coefs[:, 3] = np.diff(g) / (6.0 * h)
    return x.copy(), coefs


def linear_piece(s_end, value):
    """Straight line from the anchor through ``(s_end, value)``."""
    return np.array([0.0, float(s_end)]), np.array([[0.0, value / s_end, 0.0, 0.0]])


class _Branch:
    """One side of the curve as a function of distance from the reference age."""

    def __init__(self, breaks, coefs):
        self.breaks = np.asarray(breaks, dtype=np.float64)
        self.coefs = np.asarray(coefs, dtype=np.float64)
        self.end = self.breaks[-1]
        self.end_value = self._poly(len(self.coefs) - 1, self.end - self.breaks[-2])
        c = self.coefs[-1]
        d = self.end - self.breaks[-2]
        self.end_slope = c[1] + 2 * c[2] * d + 3 * c[3] * d * d
        self._candidates()

    def _poly(self, i, d):
        c = self.coefs[i]
        return c[0] + d * (c[1] + d * (c[2] + d * c[3]))

    def raw(self, s):
        s = np.asarray(s, dtype=np.float64)
        i = np.clip(np.searchsorted(self.breaks, s, side="right") - 1, 0, len(self.coefs) - 1)
        c = self.coefs[i]
        d = s - self.breaks[i]
        inside = c[..., 0] + d * (c[..., 1] + d * (c[..., 2] + d * c[..., 3]))
        return np.where(s > self.end, self.end_value + self.end_slope * (s - self.end), inside)

    def _candidates(self):
        # local maxima of the piecewise cubic plus the knots bound its running max
        pts = list(self.breaks)
        for i, c in enumerate(self.coefs):
            lo, hi = self.breaks[i], self.breaks[i + 1]
            roots = np.roots([3 * c[3], 2 * c[2], c[1]]) if np.any(c[1:]) else []
            for rt in np.atleast_1d(roots):
                if np.isreal(rt) and 0 < rt.real < hi - lo:
                    pts.append(lo + rt.real)
        pts = np.array(sorted(pts))
        self._cand_s = pts
        self._cand_max = np.maximum.accumulate(self.raw(pts))

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        val = self.raw(s)
        k = np.searchsorted(self._cand_s, s, side="right") - 1
        prior = np.where(k >= 0, self._cand_max[np.clip(k, 0, None)], -np.inf)
        return np.maximum(np.maximum(val, prior), 0.0)


class GammaCurve:
    """Piecewise temporal curve, zero at ``m_age`` and non-decreasing away from it.

    ``knots`` maps ``"forward"``/``"backward"`` to the raw (age, value)
    samples; ``pieces`` maps them to ``(breaks, coefs)`` in distance-from-M
    coordinates. ``ramp`` lists directions that fell back to a linear ramp.
    """

    def __init__(self, m_age, pieces, knots, smoothing_weight, ramp=()):
        self.m_age = float(m_age)
        self.pieces = {k: (np.asarray(b, dtype=np.float64), np.asarray(c, dtype=np.float64))
                       for k, (b, c) in pieces.items()}
        self.knots = {k: [(float(a), float(v)) for a, v in pts] for k, pts in knots.items()}
        self.smoothing_weight = float(smoothing_weight)
        self.ramp = tuple(ramp)
        self._branches = {k: _Branch(*p) for k, p in self.pieces.items()}

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        s = np.abs(t - self.m_age)
        fwd = self._branches["forward"](s)
        bwd = self._branches["backward"](s)
        out = np.where(t >= self.m_age, fwd, bwd)
        out = np.where(t == self.m_age, 0.0, out)
        return float(out) if out.ndim == 0 else out

    def to_dict(self):
        return {
            "m_age": self.m_age,
            "smoothing_weight": self.smoothing_weight,
            "ramp": list(self.ramp),
            "knots": {k: [list(p) for p in v] for k, v in self.knots.items()},
            "pieces": {k: {"breaks": b.tolist(), "coefs": c.tolist()}
                       for k, (b, c) in self.pieces.items()},
        }

    @classmethod
    def from_dict(cls, d):
        pieces = {k: (v["breaks"], v["coefs"]) for k, v in d["pieces"].items()}
        return cls(d["m_age"], pieces, d["knots"], d["smoothing_weight"], d.get("ramp", ()))


def _fit_branch(distances, values, smoothing_weight):
    if len(distances) == 1:
        return linear_piece(distances[0], values[0])
    return smoothing_spline(np.concatenate([[0.0], distances]),
                            np.concatenate([[0.0], values]), smoothing_weight)


def fit_gamma(ages, r_forward, r_backward, m_age, smoothing_weight=0.5, ramp=()):
    """Fit the two-sided curve to ratio samples.

    ``r_forward[j]`` belongs to the j-th age at or after ``m_age`` and
    ``r_backward[j]`` to the j-th age at or before it (walking backwards);
    both start with the reference itself, whose value is ignored in favour
    of the exact anchor at 0. A side with a single sample becomes a line
    through it; a side with none mirrors the other side's extent as a
    linear ramp. Directions listed in ``ramp`` are replaced by
    ``|t - M| / extent``.
    """
    ages = np.asarray(ages, dtype=np.float64)
    if np.any(np.diff(ages) <= 0):
        raise DataError("ages must be strictly increasing")
    after = ages[ages >= m_age]
    before = ages[ages <= m_age][::-1]
    if len(after) == 0 or len(before) == 0 or after[0] != m_age:
        raise DataError("m_age must be one of the ages")
    if len(r_forward) != len(after) or len(r_backward) != len(before):
        raise DataError("ratio samples do not match the ages on each side")

    sides = {"forward": (after[1:] - m_age, np.asarray(r_forward[1:], dtype=np.float64)),
             "backward": (m_age - before[1:], np.asarray(r_backward[1:], dtype=np.float64))}
    ramp = set(ramp)
    pieces, knots = {}, {}
    for name, (dist, vals) in sides.items():
        sign = 1.0 if name == "forward" else -1.0
        knots[name] = [(m_age, 0.0)] + [(m_age + sign * d, v) for d, v in zip(dist, vals)]
        if len(dist) and name in ramp:
            pieces[name] = linear_piece(dist[-1], 1.0)
        elif len(dist):
            pieces[name] = _fit_branch(dist, vals, smoothing_weight)
    for name in sides:
        if name not in pieces:
            other = "backward" if name == "forward" else "forward"
            extent = pieces[other][0][-1] if other in pieces else 1.0
            pieces[name] = linear_piece(extent, 1.0)
            ramp.add(name)
    return GammaCurve(m_age, pieces, knots, smoothing_weight, sorted(ramp))
