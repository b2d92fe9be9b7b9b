"""
Aging model construction and template synthesis.

Given age-specific templates ``T_1 .. T_N`` the model is a global template
``G``, two transported stationary velocity fields (forward and backward in
age from the reference template) and a temporal curve ``gamma``. The
template at age ``t`` is ``G o exp(field * gamma(t))``, using the forward
field for ``t >= M`` and the backward one otherwise.

Registration conventions (fixed for the whole package):

* ``G o exp(v_i) ~= T_i`` for the groupwise fields.
* Along a chain, ``T_near o exp(v_j) ~= T_far`` where ``T_near`` is the
  template closer to the reference.
"""

from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import AgeModelError, DataError, NumericalError, StageError
from .fields import (ScalarVolume, VelocityField, bch_accumulate, check_compatible,
                     exp_field, field_norm, warp)
from .gamma import GammaCurve, fit_gamma
from .registration import RegistrationParams, log_demons_register
from .template import affine_align_cohort, build_groupwise_template

FORWARD = "forward"
BACKWARD = "backward"


@dataclass
class AgeSeries:
    """Age-specific templates in ascending age order."""

    templates: list
    ages: list

    def __post_init__(self):
        self.ages = [float(a) for a in self.ages]
        if len(self.templates) != len(self.ages):
            raise DataError("number of templates and ages differ")
        if len(self.templates) < 3:
            raise DataError(f"an age series needs at least 3 templates, got {len(self.templates)}")
        if any(b <= a for a, b in zip(self.ages, self.ages[1:])):
            raise DataError("ages must be strictly increasing")
        check_compatible(*self.templates)

    def __len__(self):
        return len(self.templates)


@dataclass
class AgingModel:
    G: ScalarVolume
    v_f_transported: VelocityField
    v_b_transported: VelocityField
    gamma: GammaCurve
    m_index: int
    m_age: float
    ages: list
    provenance: dict = field(default_factory=dict)

    def branch_field(self, t):
        return self.v_f_transported if t >= self.m_age else self.v_b_transported


class DegenerateDirectionError(NumericalError):
    """A chain's total deformation has zero norm, so its ratios are undefined."""


def find_reference(result_or_norms, ages=None):
    """Index of the field with the smallest norm.

    Accepts a :class:`GroupwiseResult`, a list of fields or a list of norms.
    Exact ties go to the index closest to the middle of the series (the
    lower one when two are equally close).
    """
    items = getattr(result_or_norms, "fields", result_or_norms)
    if len(items) == 0:
        raise DataError("no fields to choose a reference from")
    norms = np.array([field_norm(v) if isinstance(v, VelocityField) else float(v)
                      for v in items])
    best = np.flatnonzero(norms == norms.min())
    middle = (len(norms) - 1) / 2.0
    return int(min(best, key=lambda i: (abs(i - middle), i)))


def chain_indices(n, m_index, direction):
    """Template index pairs ``(near, far)`` walking away from the reference."""
    if direction == FORWARD:
        return [(m_index + j - 1, m_index + j) for j in range(1, n - m_index)]
    if direction == BACKWARD:
        return [(m_index - j + 1, m_index - j) for j in range(1, m_index + 1)]
    raise ValueError(f"unknown direction {direction!r}")


def chain_compose(series, m_index, direction, params=RegistrationParams()):
    """Register adjacent pairs away from the reference and fold them with BCH.

    Returns every partial composite; element ``j`` parameterises the
    deformation from the reference to the ``j+1``-th template along the
    direction, and the last element is the full aging field. An empty list
    means the reference sits at that end of the series.
    """
    if not 0 <= m_index < len(series):
        raise DataError(f"reference index {m_index} out of range")
    partials = []
    acc = None
    for j, (near, far) in enumerate(chain_indices(len(series), m_index, direction)):
        try:
            v = log_demons_register(series.templates[far], series.templates[near], params)
        except AgeModelError as exc:
            raise type(exc)(f"{direction} pair {j} (templates {near}->{far}): {exc}") from exc
        acc = v if acc is None else bch_accumulate(acc, v)
        partials.append(acc)
    return partials


def parallel_transport(v, v_m):
    """Transport ``v`` along ``v_m``: BCH fold of ``v_m/2``, ``v``, ``-v_m/2``.

    ``exp`` of the result approximates ``exp(v_m/2) o exp(v) o exp(-v_m/2)``.
    """
    check_compatible(v, v_m)
    half = v_m * 0.5
    acc = bch_accumulate(VelocityField.zeros(v.grid), half)
    acc = bch_accumulate(acc, v)
    return bch_accumulate(acc, -half)


def compute_R(partials, direction_total=None):
    """Ratios ``|v_j| / |v_total|`` with a leading 0 for the reference itself."""
    if len(partials) == 0:
        raise DataError("no partial composites")
    total = partials[-1] if direction_total is None else direction_total
    denom = field_norm(total)
    if denom == 0:
        raise DegenerateDirectionError("direction has zero total deformation")
    return [0.0] + [field_norm(v) / denom for v in partials]


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (AgeModelError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def build_model(series, reg=RegistrationParams(), gw_iters=5, smoothing_weight=0.5,
                metadata=None):
    """Run the full model-building pipeline on an age series."""
    aligned, transforms = _stage("affine_align_cohort", affine_align_cohort, series.templates,
                                 reg, return_transforms=True)
    aligned_series = AgeSeries(aligned, series.ages)
    gw = _stage("build_groupwise_template", build_groupwise_template, aligned, reg, gw_iters)
    m = _stage("find_reference", find_reference, gw)
    m_age = series.ages[m]

    composites, ratios, ramp = {}, {}, []
    for direction in (FORWARD, BACKWARD):
        partials = _stage(f"chain_compose_{direction}", chain_compose, aligned_series, m,
                          direction, reg)
        composites[direction] = partials[-1] if partials else VelocityField.zeros(gw.template.grid)
        if not partials:
            ratios[direction] = [0.0]
            continue
        try:
            ratios[direction] = compute_R(partials)
        except DegenerateDirectionError:
            ratios[direction] = [0.0] * (len(partials) + 1)
            ramp.append(direction)

    v_m = gw.fields[m]
    pi_f = _stage("parallel_transport_forward", parallel_transport, composites[FORWARD], v_m)
    pi_b = _stage("parallel_transport_backward", parallel_transport, composites[BACKWARD], v_m)
    gamma = _stage("fit_gamma", fit_gamma, series.ages, ratios[FORWARD], ratios[BACKWARD],
                   m_age, smoothing_weight, ramp)

    provenance = {
        "tool_version": __version__,
        "registration": reg.to_dict(),
        "groupwise_iterations": gw_iters,
        "smoothing_weight": smoothing_weight,
        "groupwise_distance_trace": gw.mean_distance_trace,
        "groupwise_norms": [field_norm(v) for v in gw.fields],
        "ratios": {k: list(v) for k, v in ratios.items()},
        "degenerate_directions": ramp,
        "affine_transforms": [a.to_dict() for a in transforms],
    }
    if metadata:
        provenance.update(metadata)
    return AgingModel(G=gw.template, v_f_transported=pi_f, v_b_transported=pi_b, gamma=gamma,
                      m_index=m, m_age=m_age, ages=list(series.ages), provenance=provenance)


def applied_deformation(model, t):
    """The deformation ``exp(field * gamma(t))`` used to synthesise age ``t``."""
    return exp_field(model.branch_field(t) * model.gamma(t))


def synthesize(model, t):
    """Template at age ``t``; ages outside the data range are extrapolated."""
    t = float(t)
    if not np.isfinite(t):
        raise DataError("age must be finite")
    return warp(model.G, applied_deformation(model, t))
