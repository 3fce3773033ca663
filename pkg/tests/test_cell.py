import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porodiff import cell, fem, geometry as geo
from porodiff.errors import MeshMismatchError
from porodiff.interpolate import P1Interpolator

# Frozen oracle for the effective coefficient of the unit-coefficient cell
# with a centered disc of radius 0.25: fine-mesh solves at h = 0.005 and
# h = 0.0025 plus Richardson extrapolation at the observed second order.
D_EFF_ORACLE = 0.835720918926602


def reflect_map(mesh, fn):
    key = {(round(x * 1e10), round(y * 1e10)): i
           for i, (x, y) in enumerate(mesh.nodes)}
    pairs = []
    for i, p in enumerate(mesh.nodes):
        q = fn(p)
        j = key.get((round(q[0] * 1e10), round(q[1] * 1e10)))
        if j is not None:
            pairs.append((i, j))
    assert len(pairs) > 0.9 * mesh.n_nodes
    return pairs


class TestScalarCell:
    def test_no_inclusion_corrector_vanishes(self, aniso_field):
        mesh = geo.build_unit_cell_mesh(geo.InclusionSpec.none(), 0.1)
        ctx = cell.CellContext.from_mesh(mesh)
        sol = cell.solve_scalar_pair(ctx, aniso_field)
        assert max(np.abs(sol.directions[j]).max() for j in (0, 1)) < 1e-12
        t = cell.effective_tensor_scalar(ctx, sol, aniso_field,
                                         cell.TensorForm.SCALAR_FORM)
        assert np.abs(t.matrix - np.diag([2.0, 1.0])).max() < 1e-13

    def test_mean_zero_normalization(self, cell_ctx, identity_field):
        sol = cell.solve_scalar_pair(cell_ctx, identity_field)
        assert sol.mean_residual(cell_ctx.mean_weights, cell_ctx.area) <= 1e-10

    def test_periodic_trace_shared(self, cell_ctx, identity_field):
        sol = cell.solve_scalar_pair(cell_ctx, identity_field)
        pairs = cell_ctx.periodic.pairs
        for j in (0, 1):
            chi = sol.directions[j]
            assert np.array_equal(chi[pairs[:, 0]], chi[pairs[:, 1]])

    def test_reflection_symmetries(self, cell_ctx, identity_field):
        # x-direction corrector: odd across the forced axis, even across the
        # other one (centered disc)
        sol = cell.solve_scalar_pair(cell_ctx, identity_field)
        chi = sol.directions[0]
        odd = reflect_map(cell_ctx.mesh, lambda p: (1 - p[0], p[1]))
        even = reflect_map(cell_ctx.mesh, lambda p: (p[0], 1 - p[1]))
        assert max(abs(chi[i] + chi[j]) for i, j in odd) < 1e-10
        assert max(abs(chi[i] - chi[j]) for i, j in even) < 1e-10

    def test_self_convergence_order(self, disc_spec, identity_field):
        fine = geo.build_unit_cell_mesh(disc_spec, 1 / 64)
        fine_ctx = cell.CellContext.from_mesh(fine)
        chi_fine = cell.solve_scalar_pair(fine_ctx, identity_field).directions[0]
        errs = []
        hs = (1 / 8, 1 / 16, 1 / 32)
        for h in hs:
            mesh = geo.build_unit_cell_mesh(disc_spec, h)
            ctx = cell.CellContext.from_mesh(mesh)
            chi = cell.solve_scalar_pair(ctx, identity_field).directions[0]
            ref = P1Interpolator(fine, mesh.nodes)(chi_fine)
            diff = chi - ref
            diff -= ctx.mean_weights @ diff / ctx.area
            K = fem.assemble_stiffness(mesh, identity_field)
            errs.append(math.sqrt(max(diff @ (K @ diff), 0.0)))
        order = math.log(errs[0] / errs[2]) / math.log(4)
        assert order >= 0.9

    def test_frozen_oracle_value(self, disc_spec, identity_field):
        mesh = geo.build_unit_cell_mesh(disc_spec, 0.025)
        ctx = cell.CellContext.from_mesh(mesh)
        tensor, _ = cell.scalar_tensor_with_check(ctx, identity_field)
        d = tensor.matrix[0, 0]
        assert abs(d - D_EFF_ORACLE) <= 1.5 * 0.025 ** 2
        assert abs(tensor.matrix[0, 1]) <= 1e-8
        assert abs(tensor.matrix[0, 0] - tensor.matrix[1, 1]) <= 1e-8

    def test_form_equivalence(self, cell_ctx, identity_field):
        tensor, _ = cell.scalar_tensor_with_check(cell_ctx, identity_field)
        assert tensor.cross_check_err <= 1e-9

    def test_upper_bound(self, cell_ctx, aniso_field):
        tensor, _ = cell.scalar_tensor_with_check(cell_ctx, aniso_field)
        mean = cell.mean_coefficient(cell_ctx, aniso_field)
        for xi in (np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                   np.array([1.0, 1.0]) / math.sqrt(2)):
            assert xi @ tensor.matrix @ xi <= xi @ mean @ xi + 1e-12

    def test_mesh_mismatch(self, cell_ctx, coarse_ctx, identity_field):
        sol = cell.solve_scalar_pair(coarse_ctx, identity_field)
        with pytest.raises(MeshMismatchError):
            cell.effective_tensor_scalar(cell_ctx, sol, identity_field)


class TestCoupledCell:
    def test_zero_exchange_decouples(self, cell_ctx, identity_field,
                                     aniso_field):
        coupled = cell.solve_coupled_pair(cell_ctx, identity_field,
                                          aniso_field, 0.0)
        s1 = cell.solve_scalar_pair(cell_ctx, identity_field)
        s2 = cell.solve_scalar_pair(cell_ctx, aniso_field)
        for j in (0, 1):
            assert np.abs(coupled.first[j] - s1.directions[j]).max() < 1e-9
            assert np.abs(coupled.second[j] - s2.directions[j]).max() < 1e-9

    def test_decoupling_identity(self, cell_ctx, identity_field):
        two = fem.CoefficientField.isotropic(2.0)
        b0, _ = cell.coupled_tensor_with_check(cell_ctx, identity_field, two,
                                               0.0)
        t1, _ = cell.scalar_tensor_with_check(cell_ctx, identity_field)
        t2, _ = cell.scalar_tensor_with_check(cell_ctx, two)
        assert np.abs(b0.matrix - t1.matrix - t2.matrix).max() <= 1e-9

    def test_equal_coefficients_collapse(self, cell_ctx, identity_field):
        other = fem.CoefficientField.isotropic(1.0)
        t, _ = cell.scalar_tensor_with_check(cell_ctx, identity_field)
        for hv in (0.0, 0.5, 7.3):
            sol = cell.solve_coupled_pair(cell_ctx, identity_field, other, hv)
            for j in (0, 1):
                assert np.array_equal(sol.first[j], sol.second[j])
            b = cell.effective_tensor_coupled(cell_ctx, sol, identity_field,
                                              other,
                                              cell.TensorForm.COUPLED_ENERGY)
            assert np.abs(b.matrix - 2.0 * t.matrix).max() <= 1e-12

    def test_form_equivalence_active_coupling(self, cell_ctx, identity_field,
                                              aniso_field):
        for hv in (0.5, 1.0, 10.0):
            b, _ = cell.coupled_tensor_with_check(cell_ctx, identity_field,
                                                  aniso_field, hv)
            assert b.cross_check_err <= 1e-9
            assert b.min_eig > 0
            assert b.asymmetry <= 1e-10

    def test_monotone_limit_large_exchange(self, cell_ctx, identity_field,
                                           aniso_field):
        K = fem.assemble_stiffness(cell_ctx.mesh, identity_field)
        ref = cell.solve_coupled_pair(cell_ctx, identity_field, aniso_field,
                                      1e6)
        dists = []
        for hv in (0.1, 1.0, 10.0):
            sol = cell.solve_coupled_pair(cell_ctx, identity_field,
                                          aniso_field, hv)
            d = 0.0
            for j in (0, 1):
                for a, b in ((sol.first[j], ref.first[j]),
                             (sol.second[j], ref.second[j])):
                    diff = a - b
                    d += float(diff @ (K @ diff))
            dists.append(math.sqrt(d))
        assert dists[0] > dists[1] > dists[2]

    def test_langmuir_saturation(self, cell_ctx, identity_field, aniso_field):
        h_inf = 1.0  # a/b for a = b = 1
        h_100 = 100.0 / 101.0
        b_inf, _ = cell.coupled_tensor_with_check(cell_ctx, identity_field,
                                                  aniso_field, h_inf)
        b_100, _ = cell.coupled_tensor_with_check(cell_ctx, identity_field,
                                                  aniso_field, h_100)
        rel = np.abs(b_100.matrix - b_inf.matrix).max() \
            / np.abs(b_inf.matrix).max()
        assert rel <= 0.02

    def test_shared_constant_invariance(self, cell_ctx, identity_field,
                                        aniso_field):
        b, sol = cell.coupled_tensor_with_check(cell_ctx, identity_field,
                                                aniso_field, 1.0)
        shifted = cell.CoupledCellSolution(
            cell_ctx.mesh,
            {j: sol.first[j] + 0.37 for j in (0, 1)},
            {j: sol.second[j] + 0.37 for j in (0, 1)},
            sol.exchange_rate)
        b2 = cell.effective_tensor_coupled(cell_ctx, shifted, identity_field,
                                           aniso_field,
                                           cell.TensorForm.COUPLED_ENERGY)
        assert np.abs(b2.matrix - b.matrix).max() < 1e-12


class TestDispersionTable:
    def test_zero_exchange_constant_table(self, coarse_ctx, identity_field,
                                          aniso_field):
        table = cell.tabulate_b(coarse_ctx, identity_field, aniso_field,
                                lambda s: 0.0 * np.asarray(s, float),
                                (0.0, 1.0, 2.0))
        spread = np.abs(table.matrices - table.matrices[0]).max()
        assert spread < 1e-12

    def test_langmuir_surface_trend(self, cell_ctx, identity_field,
                                    aniso_field):
        # over the Langmuir range the boundary-energy share grows with s
        surf = []
        for s in (0.0, 0.5, 1.0, 2.0, 4.0):
            hv = s / (1.0 + s)
            _, sol = cell.coupled_tensor_with_check(cell_ctx, identity_field,
                                                    aniso_field, hv, s=s)
            val = 0.0
            for j in (0, 1):
                d = sol.first[j] - sol.second[j]
                val += hv * float(d @ (cell_ctx.gamma_mass @ d))
            surf.append(val / cell_ctx.area)
        assert all(b > a for a, b in zip(surf, surf[1:]))

    def test_table_entries_and_interpolation(self, coarse_ctx, identity_field,
                                             aniso_field):
        lang = lambda s: np.maximum(s, 0.0) / (1.0 + np.maximum(s, 0.0))
        table = cell.tabulate_b(coarse_ctx, identity_field, aniso_field, lang,
                                (0.0, 0.5, 1.0, 2.0, 4.0))
        for mat in table.matrices:
            assert np.abs(mat - mat.T).max() <= 1e-10
            assert np.linalg.eigvalsh(mat).min() > 0
        assert table.midpoint_error is not None
        assert table.cross_check_err <= 1e-9

    @settings(max_examples=25, deadline=None)
    @given(s=st.floats(min_value=-1.0, max_value=6.0, allow_nan=False))
    def test_interpolated_min_eig(self, s):
        mats = np.stack([np.diag([2.0, 1.0]), np.diag([1.5, 1.2]),
                         np.diag([1.1, 1.05])])
        table = cell.DispersionTable(np.array([0.0, 1.0, 3.0]), mats)
        val = table.evaluate(s)
        assert np.abs(val - val.T).max() <= 1e-12
        sc = min(max(s, 0.0), 3.0)
        idx = min(int(np.searchsorted(table.s, sc, side="right")) - 1, 1)
        neighbor_min = min(np.linalg.eigvalsh(mats[idx]).min(),
                           np.linalg.eigvalsh(mats[idx + 1]).min())
        assert np.linalg.eigvalsh(val).min() >= (1 - 1e-6) * neighbor_min

    def test_midpoint_refinement(self, coarse_ctx, identity_field,
                                 aniso_field):
        lang = lambda s: np.maximum(s, 0.0) / (1.0 + np.maximum(s, 0.0))
        rough = cell.tabulate_b(coarse_ctx, identity_field, aniso_field, lang,
                                (0.0, 2.0, 4.0))
        tol = rough.midpoint_error * 0.6
        refined = cell.tabulate_b(coarse_ctx, identity_field, aniso_field,
                                  lang, (0.0, 2.0, 4.0), midpoint_tol=tol)
        assert refined.midpoint_error <= tol
        assert len(refined.s) > len(rough.s)

    def test_grid_must_start_at_zero(self, coarse_ctx, identity_field,
                                     aniso_field):
        with pytest.raises(ValueError):
            cell.tabulate_b(coarse_ctx, identity_field, aniso_field,
                            lambda s: s, (0.5, 1.0))

    def test_json_schema(self, coarse_ctx, identity_field, aniso_field):
        table = cell.tabulate_b(coarse_ctx, identity_field, aniso_field,
                                lambda s: np.minimum(np.maximum(s, 0.0), 1.0),
                                (0.0, 1.0))
        doc = table.as_json_dict()
        assert {"interpolation", "midpoint_error", "entries"} <= set(doc)
        assert {"s", "matrix", "min_eig"} <= set(doc["entries"][0])
        tensor, _ = cell.scalar_tensor_with_check(coarse_ctx, identity_field)
        tdoc = tensor.as_json_dict()
        assert {"form", "h", "s", "matrix", "min_eig",
                "cross_check_err"} == set(tdoc)


class TestCoupledNormalization:
    def test_first_field_mean_zero(self, cell_ctx, identity_field,
                                   aniso_field):
        sol = cell.solve_coupled_pair(cell_ctx, identity_field, aniso_field,
                                      1.0)
        for j in (0, 1):
            res = abs(float(cell_ctx.mean_weights @ sol.first[j]))
            assert res / cell_ctx.area <= 1e-10

    def test_both_fields_mean_zero_at_zero_exchange(self, cell_ctx,
                                                    identity_field,
                                                    aniso_field):
        sol = cell.solve_coupled_pair(cell_ctx, identity_field, aniso_field,
                                      0.0)
        for j in (0, 1):
            for chi in (sol.first[j], sol.second[j]):
                assert abs(float(cell_ctx.mean_weights @ chi)) \
                    / cell_ctx.area <= 1e-10

    def test_negative_exchange_rejected(self, cell_ctx, identity_field,
                                        aniso_field):
        with pytest.raises(ValueError):
            cell.solve_coupled_pair(cell_ctx, identity_field, aniso_field,
                                    -1.0)
