import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypformer import autodiff as ad
from hypformer.autodiff import Tensor
from hypformer.geometry import (
    CurvatureMismatchError,
    CurvatureParam,
    DomainError,
    InvalidCurvatureError,
    LorentzBatch,
    ManifoldError,
    distance,
    exp_map,
    lift_euclidean,
    log_map,
    lorentz_inner,
    lorentz_midpoint,
    normalize_to_manifold,
    origin,
    project_to_manifold,
)

from conftest import ball_points, max_residual, random_points

C1, S1 = np.cosh(1.0), np.sinh(1.0)


def batch(rows, k=-1.0):
    return LorentzBatch(Tensor(np.atleast_2d(np.asarray(rows, dtype=np.float64))), k)


class TestCurvatureParam:
    def test_value_is_negative_magnitude(self):
        for m in (0.5, 1.0, 3.0):
            assert float(CurvatureParam(m)) == pytest.approx(-m, rel=1e-12)

    def test_stays_negative_for_extreme_raw(self):
        k = CurvatureParam(1.0)
        for raw in (-50.0, -5.0, 0.0, 40.0):
            k.raw.data = np.array(raw)
            assert float(k.value().data) < 0

    def test_non_positive_magnitude_rejected(self):
        with pytest.raises(InvalidCurvatureError):
            CurvatureParam(0.0)

    def test_value_differentiable_in_raw(self):
        k = CurvatureParam(2.0)
        assert ad.grad_check(lambda: ad.sum(k.value() * 3.0), k.raw) < 1e-8


class TestOrigin:
    @pytest.mark.parametrize("d,k,expected", [(2, -1.0, [1, 0, 0]), (2, -4.0, [0.5, 0, 0]), (3, -1.0, [1, 0, 0, 0])])
    def test_values(self, d, k, expected):
        np.testing.assert_allclose(origin(d, k).numpy(), [expected], atol=0)

    @pytest.mark.parametrize("k", [0.0, 1.0])
    def test_non_negative_curvature_rejected(self, k):
        with pytest.raises(InvalidCurvatureError):
            origin(2, k)

    def test_on_manifold(self):
        assert max_residual(origin(5, -2.5)) <= 1e-15


class TestLorentzInner:
    def test_origin_self(self):
        np.testing.assert_allclose(lorentz_inner(batch([1, 0, 0]), batch([1, 0, 0])).data, [[-1.0]])

    def test_origin_with_lifted(self):
        out = lorentz_inner(batch([1, 0, 0]), batch([C1, S1, 0])).data
        np.testing.assert_allclose(out, [[-1.5430806348152437]], rtol=1e-15)

    def test_hand_value(self):
        x, y = batch([np.sqrt(2), 1, 0]), batch([np.sqrt(2), -1, 0])
        np.testing.assert_allclose(lorentz_inner(x, y).data, [[-3.0]], rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            lorentz_inner(batch([1, 0, 0]), batch([1, 0, 0, 0]))


class TestExpLog:
    def test_exp_zero_tangent_is_base(self):
        o = origin(2, -1.0)
        np.testing.assert_array_equal(exp_map(o, Tensor(np.zeros((1, 3)))).numpy(), o.numpy())

    def test_exp_unit_tangent(self):
        out = exp_map(origin(2, -1.0), Tensor([[0.0, 1.0, 0.0]]))
        np.testing.assert_allclose(out.numpy(), [[C1, S1, 0.0]], rtol=1e-15, atol=1e-16)

    def test_log_inverse_example(self):
        u = log_map(origin(2, -1.0), batch([C1, S1, 0]))
        np.testing.assert_allclose(u.data.data, [[0.0, 1.0, 0.0]], atol=1e-14)

    def test_log_of_self_is_zero(self, rng):
        x = random_points(rng, 10, 4, -2.0)
        np.testing.assert_allclose(log_map(x, x).data.data, 0.0, atol=1e-14)

    def test_roundtrip_1000_pairs(self, rng):
        worst = 0.0
        for d in (1, 2, 4, 8, 16):
            for k in (-0.5, -1.0, -3.0):
                x, y = ball_points(rng, 67, d, k), ball_points(rng, 67, d, k)
                back = exp_map(x, log_map(x, y))
                worst = max(worst, np.max(np.abs(back.numpy() - y.numpy())))
        assert worst < 1e-8

    def test_log_is_tangent(self, rng):
        for k in (-0.5, -1.0, -2.0):
            x, y = random_points(rng, 200, 6, k), random_points(rng, 200, 6, k)
            u = log_map(x, y)
            assert np.max(np.abs(lorentz_inner(u.data, x.data).data)) < 1e-8

    def test_non_spacelike_tangent_rejected(self):
        with pytest.raises(DomainError):
            exp_map(origin(2, -1.0), Tensor([[1.0, 0.0, 0.0]]))

    def test_log_curvature_mismatch(self, rng):
        with pytest.raises(CurvatureMismatchError):
            log_map(random_points(rng, 2, 3, -1.0), random_points(rng, 2, 3, -2.0))

    def test_log_from_shared_base(self, rng):
        y = random_points(rng, 5, 3, -1.0)
        u = log_map(origin(3, -1.0), y)
        assert u.data.shape == (5, 4)
        np.testing.assert_allclose(exp_map(u.base, u).numpy(), y.numpy(), atol=1e-12)


class TestDistance:
    def test_self_distance_zero(self, rng):
        x = random_points(rng, 50, 5, -1.5)
        np.testing.assert_allclose(distance(x, x).data, 0.0, atol=1e-6)

    def test_unit_geodesic(self):
        np.testing.assert_allclose(distance(origin(2, -1.0), batch([C1, S1, 0])).data, [[1.0]], rtol=1e-12)

    def test_symmetric_and_non_negative(self, rng):
        x, y = random_points(rng, 300, 6, -2.0), random_points(rng, 300, 6, -2.0)
        dxy, dyx = distance(x, y).data, distance(y, x).data
        assert np.all(dxy >= 0)
        np.testing.assert_allclose(dxy, dyx, rtol=1e-13)

    def test_triangle_inequality(self, rng):
        x, y, z = (random_points(rng, 1000, 4, -1.0, scale=1.0) for _ in range(3))
        lhs = distance(x, z).data
        rhs = distance(x, y).data + distance(y, z).data
        assert np.all(lhs <= rhs + 1e-9)

    def test_curvature_mismatch(self, rng):
        with pytest.raises(CurvatureMismatchError):
            distance(random_points(rng, 2, 3, -1.0), random_points(rng, 2, 3, -2.0))

    @pytest.mark.parametrize("ka,kb", [(-1.0, -4.0), (-2.0, -0.5), (-0.5, -1.0)])
    def test_curvature_scaling_oracle(self, rng, ka, kb):
        z = random_points(rng, 200, 5, ka)
        w = random_points(rng, 200, 5, ka)
        factor = np.sqrt(ka / kb)
        zb = LorentzBatch(Tensor(z.numpy() * factor), kb)
        wb = LorentzBatch(Tensor(w.numpy() * factor), kb)
        np.testing.assert_allclose(distance(zb, wb).data, factor * distance(z, w).data, rtol=1e-8)


class TestMidpoint:
    def test_single_point(self, rng):
        x = random_points(rng, 1, 3, -2.0)
        np.testing.assert_allclose(lorentz_midpoint(x, [1.0]).numpy(), x.numpy(), rtol=1e-13)

    def test_two_origins(self):
        o = batch([[1, 0, 0], [1, 0, 0]])
        np.testing.assert_allclose(lorentz_midpoint(o, [0.5, 0.5]).numpy(), [[1, 0, 0]], atol=1e-15)

    def test_symmetric_pair(self):
        pts = batch([[C1, S1, 0], [C1, -S1, 0]])
        np.testing.assert_allclose(lorentz_midpoint(pts, [0.5, 0.5]).numpy(), [[1, 0, 0]], atol=1e-15)

    def test_matrix_weights_on_manifold(self, rng):
        x = random_points(rng, 12, 4, -3.0)
        w = rng.uniform(0, 1, size=(7, 12))
        assert max_residual(lorentz_midpoint(x, w)) < 1e-12

    def test_all_zero_weights(self, rng):
        with pytest.raises(ValueError):
            lorentz_midpoint(random_points(rng, 3, 2), [0.0, 0.0, 0.0])

    def test_negative_weight(self, rng):
        with pytest.raises(ValueError):
            lorentz_midpoint(random_points(rng, 2, 2), [1.0, -0.5])


class TestProjectAndLift:
    @pytest.mark.parametrize("space,expected", [([0, 0], [1, 0, 0]), ([1, 0], [np.sqrt(2), 1, 0]), ([3, 4], [np.sqrt(26), 3, 4])])
    def test_project_examples(self, space, expected):
        np.testing.assert_allclose(project_to_manifold(Tensor([space], dtype=np.float64), -1.0).numpy(), [expected], rtol=1e-15)

    def test_project_residual(self, rng):
        out = project_to_manifold(Tensor(rng.standard_normal((100, 8))), -2.0)
        assert max_residual(out) <= 1e-12

    def test_lift_zero_is_origin(self):
        np.testing.assert_array_equal(lift_euclidean(np.zeros((1, 3)), -1.0).numpy(), [[1, 0, 0, 0]])

    def test_lift_example(self):
        np.testing.assert_allclose(lift_euclidean([[1.0, 0.0]], -1.0).numpy(), [[C1, S1, 0.0]], rtol=1e-15, atol=1e-16)

    def test_lift_residual(self, rng):
        for k in (-1.0, -2.0, -3.0):
            assert max_residual(lift_euclidean(rng.standard_normal((200, 16)) * 0.7, k)) < 1e-8

    def test_lift_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            lift_euclidean([[np.nan, 0.0]], -1.0)


class TestConstraintCheck:
    def test_detects_violation(self):
        with pytest.raises(ManifoldError, match="row 1"):
            batch([[1, 0, 0], [1, 1, 0]]).check()

    def test_normalize_restores_constraint(self, rng):
        x, y = random_points(rng, 20, 3), random_points(rng, 20, 3)
        u = x.data * 0.3 + y.data * 1.7
        assert max_residual(normalize_to_manifold(u, -1.0)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 64),
    st.sampled_from([-1.0, -2.0, -3.0]),
    st.integers(0, 2**32 - 1),
)
def test_closure_property(d, k, seed):
    rng = np.random.default_rng(seed)
    x = ball_points(rng, 4, d, k)
    y = ball_points(rng, 4, d, k)
    outs = [
        x,
        exp_map(x, log_map(x, y)),
        lorentz_midpoint(x, rng.uniform(0.1, 1, size=(3, 4))),
        project_to_manifold(Tensor(rng.standard_normal((4, d))), k),
        origin(d, k),
    ]
    for out in outs:
        assert max_residual(out) <= 1e-8
        assert np.all(out.numpy()[:, 0] > 0)
