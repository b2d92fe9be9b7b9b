import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agemodel.errors import GridMismatchError, InvalidFieldError
from agemodel.fields import (DeformationField, GridSpec, ScalarVolume, VelocityField, bch,
                             bch_accumulate, check_compatible, compose, exp_field, field_norm,
                             interior_mask, interpolate, jacobian_det, lie_bracket,
                             max_displacement_difference, split_count, squaring_steps, warp)
from agemodel.validation import random_smooth_field

from oracles import compose_points, euler_flow, flow


def constant_field(grid, c, cls=VelocityField):
    return cls(grid, np.broadcast_to(np.asarray(c, dtype=float), grid.dims + (3,)).copy())


class TestGridSpec:
    def test_rejects_bad_dims_and_spacing(self):
        with pytest.raises(ValueError):
            GridSpec((0, 4, 4))
        with pytest.raises(ValueError):
            GridSpec((4, 4, 4), (1.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            GridSpec((4, 4))

    def test_compatibility_is_exact(self):
        a = GridSpec((4, 4, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        assert a.compatible(GridSpec((4, 4, 1)))
        assert not a.compatible(GridSpec((4, 4, 1), (1.0, 1.0 + 1e-12, 1.0)))
        assert not a.compatible(GridSpec((4, 4, 1), origin=(0.0, 0.0, 1e-9)))

    def test_check_compatible_raises(self):
        a = ScalarVolume(GridSpec((4, 4, 1)), np.zeros((4, 4, 1)))
        b = ScalarVolume(GridSpec((4, 5, 1)), np.zeros((4, 5, 1)))
        with pytest.raises(GridMismatchError):
            check_compatible(a, b)


class TestVolumes:
    def test_voxels_are_x_fastest(self):
        g = GridSpec((2, 3, 1))
        img = ScalarVolume(g, np.arange(6, dtype=float).reshape(2, 3, 1))
        assert img.voxels.tolist() == [0, 3, 1, 4, 2, 5]
        assert np.array_equal(ScalarVolume.from_voxels(g, img.voxels).data, img.data)

    def test_non_finite_rejected(self):
        g = GridSpec((2, 2, 1))
        with pytest.raises(InvalidFieldError):
            ScalarVolume(g, np.array([[[np.nan], [0]], [[0], [0]]]))
        with pytest.raises(InvalidFieldError):
            VelocityField(g, np.full((2, 2, 1, 3), np.inf))
        with pytest.raises(InvalidFieldError):
            VelocityField(g, np.zeros((2, 2, 3)))


class TestInterpolate:
    def test_exact_at_integer_coordinates(self, rng):
        vals = rng.standard_normal((5, 6, 4))
        coords = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in vals.shape],
                                      indexing="ij"))
        assert np.array_equal(interpolate(vals, coords), vals)

    def test_linear_data_reproduced(self):
        x, y, z = np.meshgrid(np.arange(6.0), np.arange(5.0), np.arange(4.0), indexing="ij")
        vals = 2 * x - 3 * y + 0.5 * z + 1
        pts = np.array([[1.3, 2.7, 4.9], [0.2, 3.5, 1.1], [2.5, 0.0, 2.9]])
        expected = 2 * pts[0] - 3 * pts[1] + 0.5 * pts[2] + 1
        assert np.allclose(interpolate(vals, pts), expected, atol=1e-12)

    def test_outside_modes(self):
        vals = np.ones((4, 4, 1))
        pts = np.array([[-0.5, 3.5, 1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
        assert interpolate(vals, pts, "zero").tolist() == [0.5, 0.5, 1.0]
        far = np.array([[-1.0, 4.0, 9.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
        assert interpolate(vals, far, "zero").tolist() == [0.0, 0.0, 0.0]
        assert interpolate(vals, pts, "clamp").tolist() == [1.0, 1.0, 1.0]


class TestExp:
    def test_zero_field_gives_identity(self, grid2d):
        phi = exp_field(VelocityField.zeros(grid2d))
        assert not np.any(phi.displacements)

    def test_constant_field_is_translation(self):
        g = GridSpec((24, 24, 1), (1.0, 1.0, 1.0))
        c = np.array([1.7, -0.9, 0.0])
        phi = exp_field(constant_field(g, c))
        m = interior_mask(g, 2)
        assert np.array_equal(phi.displacements[m], np.broadcast_to(c, phi.displacements[m].shape))

    def test_squaring_steps_rule(self):
        g = GridSpec((4, 4, 1))
        assert squaring_steps(constant_field(g, [0.49, 0, 0])) == 0
        assert squaring_steps(constant_field(g, [0.5, 0, 0])) == 1
        assert squaring_steps(constant_field(g, [2.0, 0, 0])) == 3

    def test_squaring_steps_use_voxel_units(self):
        g = GridSpec((4, 4, 1), (2.0, 2.0, 1.0))
        assert squaring_steps(constant_field(g, [0.9, 0, 0])) == 0

    def test_non_finite_input_rejected(self, grid2d):
        v = VelocityField.zeros(grid2d)
        v.vectors[3, 3, 0, 0] = np.nan
        with pytest.raises(InvalidFieldError):
            exp_field(v)

    @pytest.mark.parametrize("amplitude", [2.0, 1.9999])
    def test_matches_euler_flow(self, amplitude):
        # 1.9999 sits just under a squaring-step boundary, the least accurate case
        g = GridSpec((64, 64, 1))
        m = interior_mask(g, 2)
        for seed in range(4):
            v = random_smooth_field(g, amplitude, 8.0, seed)
            err = max_displacement_difference(exp_field(v), euler_flow(v, 1000), m)
            assert err < 0.05

    def test_anisotropic_spacing_matches_rk4(self):
        g = GridSpec((48, 40, 1), (1.5, 0.75, 1.0))
        v = random_smooth_field(g, 1.5, 6.0, 5)
        err = max_displacement_difference(exp_field(v), flow(v, 100), interior_mask(g, 2))
        assert err < 0.05

    def test_inverse(self):
        g = GridSpec((64, 64, 1))
        m = interior_mask(g, 2)
        for seed in range(5):
            v = random_smooth_field(g, 2.0, 8.0, seed)
            err = max_displacement_difference(compose(exp_field(v), exp_field(-v)),
                                              DeformationField.identity(g), m)
            assert err < 0.1

    def test_jacobian_positive(self):
        g = GridSpec((48, 48, 1))
        for seed in range(5):
            phi = exp_field(random_smooth_field(g, 2.0, 4.0, seed))
            assert jacobian_det(phi).data[interior_mask(g)].min() > 0


class TestCompose:
    def test_identity_is_neutral(self, grid2d):
        phi = exp_field(random_smooth_field(grid2d, 1.5, 5.0, 1))
        ident = DeformationField.identity(grid2d)
        assert np.array_equal(compose(ident, phi).displacements, phi.displacements)
        assert np.array_equal(compose(phi, ident).displacements, phi.displacements)

    def test_translations_add(self):
        g = GridSpec((20, 20, 1))
        a = constant_field(g, [1.25, 0.5, 0.0], DeformationField)
        b = constant_field(g, [-0.75, 2.0, 0.0], DeformationField)
        m = interior_mask(g, 3)
        out = compose(a, b).displacements[m]
        assert np.allclose(out, [0.5, 2.5, 0.0], atol=1e-14)

    def test_matches_independent_sampler(self, grid2d):
        a = exp_field(random_smooth_field(grid2d, 1.5, 5.0, 2))
        b = exp_field(random_smooth_field(grid2d, 1.5, 5.0, 3))
        ours = compose(a, b).displacements
        ref = compose_points(a, b).displacements
        assert np.allclose(ours, ref, atol=1e-10)

    def test_grid_mismatch(self, grid2d):
        with pytest.raises(GridMismatchError):
            compose(DeformationField.identity(grid2d),
                    DeformationField.identity(GridSpec((8, 8, 1))))


class TestWarp:
    def test_identity_exact(self, grid2d, rng):
        img = ScalarVolume(grid2d, rng.random(grid2d.dims))
        assert np.array_equal(warp(img, DeformationField.identity(grid2d)).data, img.data)

    def test_constant_image_preserved(self, grid2d):
        img = ScalarVolume(grid2d, np.full(grid2d.dims, 0.7))
        phi = exp_field(random_smooth_field(grid2d, 1.5, 5.0, 4))
        out = warp(img, phi)
        assert np.allclose(out.data[interior_mask(grid2d, 4)], 0.7, atol=1e-14)

    def test_one_voxel_shift_of_box(self):
        g = GridSpec((16, 16, 1))
        box = np.zeros(g.dims)
        box[4:9, 5:11] = 1.0
        out = warp(ScalarVolume(g, box), constant_field(g, [1.0, 0, 0], DeformationField))
        expected = np.zeros(g.dims)
        expected[3:8, 5:11] = 1.0
        assert np.array_equal(out.data, expected)

    def test_linear_in_intensity(self, grid2d, rng):
        a = ScalarVolume(grid2d, rng.random(grid2d.dims))
        b = ScalarVolume(grid2d, rng.random(grid2d.dims))
        phi = exp_field(random_smooth_field(grid2d, 1.5, 5.0, 6))
        lhs = warp(a.with_data(2 * a.data - 3 * b.data), phi).data
        rhs = 2 * warp(a, phi).data - 3 * warp(b, phi).data
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_continuous_at_boundary(self):
        g = GridSpec((8, 8, 1))
        img = ScalarVolume(g, np.ones(g.dims))
        out = warp(img, constant_field(g, [1e-9, 0, 0], DeformationField))
        assert np.allclose(out.data, 1.0, atol=1e-8)

    def test_outside_is_zero(self):
        g = GridSpec((8, 8, 1))
        img = ScalarVolume(g, np.ones(g.dims))
        out = warp(img, constant_field(g, [20.0, 0, 0], DeformationField))
        assert not np.any(out.data)


class TestBracket:
    def test_self_bracket_zero(self, grid2d):
        u = random_smooth_field(grid2d, 1.0, 5.0, 1)
        assert np.max(np.abs(lie_bracket(u, u).vectors)) < 1e-15

    def test_antisymmetry(self, grid2d):
        u = random_smooth_field(grid2d, 1.0, 5.0, 1)
        w = random_smooth_field(grid2d, 1.0, 5.0, 2)
        s = lie_bracket(u, w).vectors + lie_bracket(w, u).vectors
        assert np.max(np.abs(s)) == 0.0

    def test_constant_fields_commute(self, grid2d):
        b = lie_bracket(constant_field(grid2d, [1, 2, 0]), constant_field(grid2d, [0.3, -1, 0]))
        assert not np.any(b.vectors)

    def test_bilinear(self, grid2d):
        u = random_smooth_field(grid2d, 1.0, 5.0, 1)
        w = random_smooth_field(grid2d, 1.0, 5.0, 2)
        z = random_smooth_field(grid2d, 1.0, 5.0, 3)
        lhs = lie_bracket(u * 2.0 + z, w).vectors
        rhs = 2.0 * lie_bracket(u, w).vectors + lie_bracket(z, w).vectors
        assert np.allclose(lhs, rhs, atol=1e-14)

    def test_linear_fields_closed_form(self):
        # u = A x, w = B x  =>  (Ju) w - (Jw) u = (AB - BA) x
        g = GridSpec((9, 9, 9))
        x = g.physical_coordinates() - g.center()
        a = np.array([[0.0, 0.1, 0.0], [-0.1, 0.0, 0.05], [0.0, 0.02, 0.0]])
        b = np.array([[0.03, 0.0, 0.0], [0.0, 0.0, -0.04], [0.06, 0.0, 0.0]])
        u = VelocityField(g, x @ a.T)
        w = VelocityField(g, x @ b.T)
        expected = x @ (a @ b - b @ a).T
        assert np.allclose(lie_bracket(u, w).vectors, expected, atol=1e-13)


class TestBCH:
    def test_zero_argument_exact(self, grid2d):
        u = random_smooth_field(grid2d, 1.0, 5.0, 1)
        zero = VelocityField.zeros(grid2d)
        assert np.array_equal(bch(u, zero).vectors, u.vectors)
        assert np.array_equal(bch(zero, u).vectors, u.vectors)

    def test_commuting_fields(self, grid2d):
        u = random_smooth_field(grid2d, 1.0, 5.0, 1)
        assert np.allclose(bch(u, u * 0.5).vectors, 1.5 * u.vectors, atol=1e-15)

    def test_beats_naive_sum(self):
        g = GridSpec((48, 48, 1))
        m = interior_mask(g, 2)
        for seed in range(5):
            u = random_smooth_field(g, 0.4, 6.0, [seed, 0])
            w = random_smooth_field(g, 0.4, 6.0, [seed, 1])
            ref = compose(exp_field(u), exp_field(w))
            e_bch = max_displacement_difference(exp_field(bch(u, w)), ref, m)
            e_sum = max_displacement_difference(exp_field(u + w), ref, m)
            assert e_bch < e_sum

    def test_order_matches_composition(self):
        # swapping the arguments must do worse: the bracket sign is tied to exp(u) o exp(w)
        g = GridSpec((48, 48, 1))
        m = interior_mask(g, 2)
        u = random_smooth_field(g, 0.4, 6.0, 21)
        w = random_smooth_field(g, 0.4, 6.0, 22)
        ref = compose(exp_field(u), exp_field(w))
        good = max_displacement_difference(exp_field(bch(u, w)), ref, m)
        bad = max_displacement_difference(exp_field(bch(w, u)), ref, m)
        assert good < bad

    @pytest.mark.xfail(strict=True, reason="discretisation error floor dominates at small "
                       "scales; see the decisions ledger")
    def test_consistency_order(self):
        g = GridSpec((64, 64, 1))
        m = interior_mask(g, 2)
        u0 = random_smooth_field(g, 1.0, 6.0, 31)
        w0 = random_smooth_field(g, 1.0, 6.0, 32)
        ratios = []
        for eps in (0.5, 0.25, 0.125):
            u, w = u0 * eps, w0 * eps
            ref = flow(u, 100)
            ref = compose(ref, flow(w, 100))
            e_bch = max_displacement_difference(exp_field(bch(u, w)), ref, m)
            e_sum = max_displacement_difference(exp_field(u + w), ref, m)
            ratios.append(e_bch / e_sum)
        # quadratically faster: the ratio must fall by ~4x per halving of eps
        assert ratios[1] <= ratios[0] / 4 and ratios[2] <= ratios[1] / 4

    def test_split_count_rule(self):
        g = GridSpec((4, 4, 1))
        assert split_count(constant_field(g, [3.0, 0, 0])) == 7
        assert split_count(constant_field(g, [0.49, 0, 0])) == 1
        assert split_count(constant_field(g, [0.5, 0, 0])) == 2
        assert split_count(VelocityField.zeros(g)) == 1

    def test_accumulate_trivial_cases(self, grid2d):
        w = random_smooth_field(grid2d, 0.25, 5.0, 3)
        zero = VelocityField.zeros(grid2d)
        assert np.array_equal(bch_accumulate(zero, w).vectors, w.vectors)
        assert np.array_equal(bch_accumulate(w, zero).vectors, w.vectors)

    def test_accumulate_tracks_composition(self):
        g = GridSpec((48, 48, 1))
        m = interior_mask(g, 2)
        u = random_smooth_field(g, 1.0, 8.0, 41)
        w = random_smooth_field(g, 1.5, 8.0, 42)
        ref = compose(exp_field(u), exp_field(w))
        e_acc = max_displacement_difference(exp_field(bch_accumulate(u, w)), ref, m)
        e_sum = max_displacement_difference(exp_field(u + w), ref, m)
        assert e_acc < e_sum


class TestMeasurements:
    def test_norm_examples(self):
        g = GridSpec((4, 4, 1))
        assert field_norm(VelocityField.zeros(g)) == 0.0
        assert field_norm(constant_field(g, [3.0, 4.0, 0.0])) == pytest.approx(5.0, abs=1e-15)
        v = VelocityField.zeros(g)
        v.vectors[:2, :, :, 1] = 1.0
        assert field_norm(v) == pytest.approx(np.sqrt(0.5), abs=1e-15)

    def test_norm_direct_summation(self, rng):
        g = GridSpec((5, 3, 2), (0.5, 1.0, 2.0))
        vec = rng.standard_normal(g.dims + (3,))
        total = 0.0
        for i in range(5):
            for j in range(3):
                for k in range(2):
                    total += sum(c * c for c in vec[i, j, k])
        assert field_norm(VelocityField(g, vec)) == pytest.approx(np.sqrt(total / 30), rel=1e-14)

    def test_jacobian_identity_and_scaling(self):
        g = GridSpec((10, 10, 10), (1.0, 2.0, 0.5))
        assert np.array_equal(jacobian_det(DeformationField.identity(g)).data, np.ones(g.dims))
        alpha = 1.1
        x = g.physical_coordinates() - g.center()
        det = jacobian_det(DeformationField(g, (alpha - 1) * x))
        assert np.allclose(det.data, alpha ** 3, atol=1e-12)

    def test_jacobian_2d_scaling(self):
        g = GridSpec((10, 10, 1))
        x = g.physical_coordinates() - g.center()
        det = jacobian_det(DeformationField(g, -0.2 * x * np.array([1.0, 1.0, 0.0])))
        assert np.allclose(det.data, 0.64, atol=1e-12)


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-2, 2), b=st.floats(-2, 2), c=st.floats(-2, 2))
    def test_bracket_antisymmetric_and_bilinear(self, a, b, c):
        g = GridSpec((16, 16, 1))
        u = random_smooth_field(g, 1.0, 3.0, 1)
        w = random_smooth_field(g, 1.0, 3.0, 2)
        z = random_smooth_field(g, 1.0, 3.0, 3)
        assert np.array_equal(lie_bracket(u * a, w).vectors, -lie_bracket(w, u * a).vectors)
        lhs = lie_bracket(u * a + z * b, w * c).vectors
        rhs = a * c * lie_bracket(u, w).vectors + b * c * lie_bracket(z, w).vectors
        assert np.allclose(lhs, rhs, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), amp=st.floats(0.0, 2.0))
    def test_exp_jacobian_positive(self, seed, amp):
        g = GridSpec((32, 32, 1))
        phi = exp_field(random_smooth_field(g, amp, 4.0, seed))
        assert jacobian_det(phi).data[interior_mask(g)].min() > 0

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), amp=st.floats(0.0, 2.0))
    def test_exp_inverse(self, seed, amp):
        g = GridSpec((64, 64, 1))
        v = random_smooth_field(g, amp, 16.0, seed)
        err = max_displacement_difference(compose(exp_field(v), exp_field(-v)),
                                          DeformationField.identity(g), interior_mask(g, 2))
        assert err < 0.1

    @settings(max_examples=20, deadline=None)
    @given(c=st.floats(-3, 3), seed=st.integers(0, 1000))
    def test_norm_is_homogeneous(self, c, seed):
        g = GridSpec((8, 8, 1))
        v = random_smooth_field(g, 1.0, 2.0, seed)
        assert field_norm(v * c) == pytest.approx(abs(c) * field_norm(v), rel=1e-12, abs=1e-15)
