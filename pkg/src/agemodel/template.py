"""
Unbiased groupwise template construction (register, average, de-bias).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .fields import ScalarVolume, VelocityField, check_compatible, exp_field, field_norm, warp
from .registration import RegistrationParams, affine_register, log_demons_register, resample_affine


@dataclass
class GroupwiseResult:
    """Template ``G`` with one field per input, ``warp(G, exp_field(fields[i])) ~= images[i]``."""

    template: ScalarVolume
    fields: list
    iterations_run: int
    mean_distance_trace: list = field(default_factory=list)


def _check_cohort(images):
    if len(images) < 2:
        raise DataError(f"need at least 2 images, got {len(images)}")
    check_compatible(*images)


def voxelwise_mean(images):
    return ScalarVolume(images[0].grid, np.mean([im.data for im in images], axis=0))


def mean_field(fields):
    return VelocityField(fields[0].grid, np.mean([v.vectors for v in fields], axis=0))


def build_groupwise_template(images, params=RegistrationParams(), outer_iters=5):
    """Iteratively estimate the image closest on average to every input.

    Starts from the voxelwise mean. Each outer iteration registers the
    current template to every image (``fixed = image``), then, except on
    the last pass, rebuilds the template as the mean of
    ``warp(T_i, exp(vbar - v_i))``. Subtracting the mean field ``vbar``
    recentres the template so the fields average toward zero. The returned
    fields belong to the returned template.
    """
    _check_cohort(images)
    if outer_iters < 1:
        raise ValueError("outer_iters must be positive")
    template = voxelwise_mean(images)
    trace = []
    fields = []
    for it in range(outer_iters):
        fields = [log_demons_register(img, template, params) for img in images]
        trace.append(float(np.mean([field_norm(v) for v in fields])))
        if it == outer_iters - 1:
            break
        vbar = mean_field(fields)
        template = voxelwise_mean([warp(img, exp_field(vbar - v)) for img, v in zip(images, fields)])
    return GroupwiseResult(template=template, fields=fields, iterations_run=outer_iters,
                           mean_distance_trace=trace)


def affine_align_cohort(images, params=RegistrationParams(), return_transforms=False):
    """Affinely align every image to the voxelwise mean of the cohort (one round).

    With ``return_transforms`` the per-image :class:`AffineTransform` list is
    returned as well; ``resample_affine(images[i], transforms[i])`` is the
    aligned image.
    """
    _check_cohort(images)
    reference = voxelwise_mean(images)
    transforms = [affine_register(reference, img, params) for img in images]
    aligned = [resample_affine(img, a) for img, a in zip(images, transforms)]
    if return_transforms:
        return aligned, transforms
    return aligned
