import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porodiff import cell, geometry as geo, kinetics as kin
from porodiff.errors import MeshRequiredError, UnknownNameError


class TestBuiltins:
    def test_langmuir_spot_value(self):
        k = kin.builtin("langmuir_exchange", a=1, b=1)
        assert abs(k.h(2.0) - 2.0 / 3.0) < 1e-15
        assert k.l == 1.0
        assert k.lip == 1.0

    def test_mm_triple_spot_value(self):
        k = kin.builtin("mm_triple")
        assert abs(k.f1(None, 1.0, 1.0, 1.0) - 0.125) < 1e-15

    def test_zero(self):
        k = kin.builtin("zero")
        s = np.linspace(-2, 2, 5)
        assert np.abs(k.f1(None, s, s, s)).max() == 0.0
        assert np.abs(k.h(s)).max() == 0.0

    def test_unknown_name(self):
        with pytest.raises(UnknownNameError):
            kin.builtin("nope")
        with pytest.raises(UnknownNameError):
            kin.parse_kinetics("mm_triple+mm_mixed")

    @pytest.mark.parametrize("name", ["zero", "mm_triple", "mm_mixed"])
    def test_builtins_validate(self, name):
        assert kin.validate(kin.builtin(name)).passed

    def test_langmuir_validates(self):
        assert kin.validate(kin.builtin("langmuir", a=2, b=0.5)).passed

    def test_compose(self):
        k = kin.parse_kinetics("mm_triple+langmuir:a=2,b=1")
        assert abs(k.h(1.0) - 1.0) < 1e-15
        assert abs(k.f1(None, 1.0, 1.0, 1.0) - 0.125) < 1e-15
        assert k.l == 2.0


class TestValidationFixtures:
    def test_unbounded_exchange_fails_with_witness(self):
        bad = dataclasses.replace(kin.zero_kinetics(),
                                  h=lambda s: np.asarray(s, float))
        report = kin.validate(bad)
        check = report["exchange_rate_bounds"]
        assert not check.passed
        assert check.worst_point is not None
        assert not report.passed

    def test_exchange_not_zero_at_zero(self):
        bad = dataclasses.replace(kin.zero_kinetics(),
                                  h=lambda s: np.asarray(s, float) * 0 + 0.5)
        assert not kin.validate(bad)["exchange_rate_zero_at_zero"].passed

    def test_sign_condition_violation(self):
        bad = dataclasses.replace(
            kin.zero_kinetics(),
            f1=kin.Rate.of_s(lambda s1, s2, s3: -200.0 * np.asarray(s2, float)))
        report = kin.validate(bad)
        check = report["negative_orthant_sign_volume"]
        assert not check.passed
        assert check.measured_constant > 100.0
        assert check.worst_point is not None

    def test_volume_rate_nonzero_at_origin(self):
        bad = dataclasses.replace(
            kin.zero_kinetics(),
            f2=kin.Rate.of_s(lambda s1, s2, s3: np.ones_like(
                np.asarray(s1, float))))
        assert not kin.validate(bad)["volume_rate_zero_at_zero"].passed


class TestLangmuirShape:
    @settings(max_examples=40, deadline=None)
    @given(a=st.floats(min_value=0.1, max_value=5.0),
           b=st.floats(min_value=0.1, max_value=5.0),
           s=st.floats(min_value=-10.0, max_value=50.0),
           t=st.floats(min_value=-10.0, max_value=50.0))
    def test_bounds_and_lipschitz(self, a, b, s, t):
        h, l, lip = kin.langmuir(a, b)
        assert -1e-15 <= h(s) <= l + 1e-12
        assert abs(h(s) - h(t)) <= (lip + 1e-9) * abs(s - t) + 1e-15

    def test_monotone_concave(self):
        h, _, _ = kin.langmuir(1.0, 1.0)
        s = np.linspace(0.0, 10.0, 200)
        vals = h(s)
        d = np.diff(vals)
        assert np.all(d >= -1e-15)
        assert np.all(np.diff(d) <= 1e-12)


class TestAverages:
    def test_y_independent_is_pointwise(self, coarse_ctx):
        k = kin.builtin("mm_triple")
        v = kin.cell_average_f(k, 1, (1.0, 1.0, 1.0), coarse_ctx)
        assert abs(v - 0.125) < 1e-15
        assert abs(kin.cell_average_f(k, 1, (1.0, 1.0, 1.0)) - 0.125) < 1e-15

    def test_zero_average(self, coarse_ctx):
        k = kin.builtin("zero")
        assert kin.cell_average_f(k, 2, (1.0, 2.0, 3.0), coarse_ctx) == 0.0
        assert kin.surface_average_g3(k, (1.0, 2.0, 3.0), coarse_ctx) == 0.0

    def test_separable_against_fine_quadrature(self, cell_ctx):
        a0 = lambda y: 1.0 + 0.5 * np.cos(2 * np.pi * np.atleast_2d(y)[:, 0])
        k = kin.mm_triple_kinetics(a0=a0)
        v = kin.cell_average_f(k, 1, (1.0, 1.0, 1.0), cell_ctx)
        nq = 1500
        xs = (np.arange(nq) + 0.5) / nq
        gx, gy = np.meshgrid(xs, xs)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        outside = (pts[:, 0] - 0.5) ** 2 + (pts[:, 1] - 0.5) ** 2 > 0.25 ** 2
        oracle = a0(pts[outside]).mean() * 0.125
        assert abs(v - oracle) < 5e-4

    def test_general_path_matches_separable(self, coarse_ctx):
        a0 = lambda y: 1.0 + 0.5 * np.cos(2 * np.pi * np.atleast_2d(y)[:, 0])
        sep = kin.mm_triple_kinetics(a0=a0)
        gen = dataclasses.replace(
            sep, f1=kin.Rate.of_ys(
                lambda y, s1, s2, s3: a0(y) * kin._mm_triple(s1, s2, s3)))
        v1 = kin.cell_average_f(sep, 1, (1.0, 1.0, 1.0), coarse_ctx)
        v2 = kin.cell_average_f(gen, 1, (1.0, 1.0, 1.0), coarse_ctx)
        assert abs(v1 - v2) < 1e-14

    def test_mesh_required(self):
        a0 = lambda y: np.atleast_2d(y)[:, 0]
        k = kin.mm_triple_kinetics(a0=a0)
        with pytest.raises(MeshRequiredError):
            kin.cell_average_f(k, 1, (1.0, 1.0, 1.0), None)

    def test_linearity_and_homogeneity(self, coarse_ctx):
        a0 = lambda y: 1.0 + 0.5 * np.cos(2 * np.pi * np.atleast_2d(y)[:, 0])
        base = kin.Rate.separable(a0, kin._mm_triple)
        doubled = kin.Rate.separable(lambda y: 2.0 * a0(y), kin._mm_triple)
        s = (0.7, 1.3, 2.1)
        v1 = kin.cell_average_rate(base, s, coarse_ctx)
        v2 = kin.cell_average_rate(doubled, s, coarse_ctx)
        assert abs(v2 - 2.0 * v1) < 1e-14

    def test_surface_average_separable(self, cell_ctx):
        a0 = lambda y: 2.0 + np.atleast_2d(y)[:, 1]
        g3 = kin.Rate.separable(a0, lambda s1, s2, s3: np.asarray(s3, float))
        k = dataclasses.replace(kin.zero_kinetics(), g3=g3)
        v = kin.surface_average_g3(k, (0.0, 0.0, 1.0), cell_ctx)
        # boundary average of 2 + y over the centered circle is 2.5
        assert abs(v - 2.5) < 1e-3


def test_builtin_names_case_insensitive():
    assert kin.builtin("MM_TRIPLE").name == "mm_triple"
    assert abs(kin.builtin("LANGMUIR_EXCHANGE", a=1, b=1).h(2.0) - 2 / 3) < 1e-15
