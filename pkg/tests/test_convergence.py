import numpy as np
import pytest
import scipy.sparse as sp

from porodiff import cell, convergence as conv, fem, geometry as geo
from porodiff import kinetics as kin
from porodiff.errors import BudgetExceededError, DegenerateDataError


def bump(x, y):
    return 16.0 * x * (1 - x) * y * (1 - y)


class TestFitRate:
    def test_exact_first_order(self):
        slope, residual = conv.fit_rate([1, 0.5, 0.25], [1, 0.5, 0.25])
        assert abs(slope - 1.0) < 1e-12
        assert residual < 1e-12

    def test_exact_half_order(self):
        slope, _ = conv.fit_rate([1, 2 ** -0.5, 0.5], [1, 0.5, 0.25])
        assert abs(slope - 0.5) < 1e-12

    def test_flat(self):
        slope, _ = conv.fit_rate([1.0, 1.0, 1.0], [1, 0.5, 0.25])
        assert abs(slope) < 1e-12

    def test_degenerate(self):
        with pytest.raises(DegenerateDataError):
            conv.fit_rate([1.0, 0.5], [1.0, 0.5])
        with pytest.raises(DegenerateDataError):
            conv.fit_rate([1.0, 0.0, 0.1], [1, 0.5, 0.25])


class TestTensorSuite:
    def test_default_suite_passes(self):
        report = conv.tensor_suite(h=0.05)
        failed = [c for c in report["checks"] if not c["passed"]]
        assert report["passed"], failed

    def test_no_inclusion_mean_identity(self):
        report = conv.tensor_suite(inclusion=geo.InclusionSpec.none(), h=0.1)
        assert report["passed"]
        scalar = [c for c in report["checks"]
                  if c["name"] == "scalar_upper_bound"][0]
        # with no inclusion the corrector vanishes: bound is an identity
        assert abs(scalar["value"]) < 1e-12

    def test_broken_sign_detected(self, cell_ctx, identity_field, aniso_field):
        # flip the sign of the boundary coupling in the weak form; the two
        # tensor formulas then disagree far beyond the equivalence tolerance
        ctx = cell_ctx
        mesh = ctx.mesh
        n = mesh.n_nodes
        hv = 1.0
        K1 = fem.assemble_stiffness(mesh, identity_field)
        K2 = fem.assemble_stiffness(mesh, aniso_field)
        C = hv * ctx.gamma_mass
        broken = sp.bmat([[K1 - C, C], [C, K2 - C]], format="csr")
        loads1 = cell._direction_loads(mesh, identity_field)
        loads2 = cell._direction_loads(mesh, aniso_field)
        w = ctx.mean_weights
        zeros = np.zeros(n)
        cs = fem.ConstraintSet(
            periodic=cell._block_periodic(ctx.periodic, n),
            mean_zero=[np.concatenate([w, zeros]), np.concatenate([zeros, w])])
        reducer = fem.ConstraintReducer(2 * n, cs)
        first, second = {}, {}
        for j in range(2):
            b = np.concatenate([loads1[j], loads2[j]])
            A_r, b_r = reducer.reduce(broken, b)
            x = reducer.expand(fem.solve_sparse(A_r, b_r))
            first[j], second[j] = x[:n], x[n:]
        sol = cell.CoupledCellSolution(mesh, first, second, hv)
        te = cell.effective_tensor_coupled(ctx, sol, identity_field,
                                           aniso_field,
                                           cell.TensorForm.COUPLED_ENERGY)
        tf = cell.effective_tensor_coupled(ctx, sol, identity_field,
                                           aniso_field,
                                           cell.TensorForm.COUPLED_FORM)
        assert np.abs(te.matrix - tf.matrix).max() > 1e-6


class TestSweep:
    def make_problem(self, **kw):
        defaults = dict(
            inclusion=geo.InclusionSpec.disc((0.5, 0.5), 0.25),
            cell_h=1 / 8,
            d1=fem.CoefficientField.isotropic(1.0),
            d2=fem.CoefficientField.constant(np.diag([2.0, 1.0])),
            d3=fem.CoefficientField.isotropic(1.0),
            kinetics=kin.parse_kinetics("langmuir:a=1,b=1"),
            init_c1=bump, init_c2=bump, init_c3=bump,
            dt=2e-3, t_end=0.01, macro_h=1 / 16,
            s_grid=(0.0, 0.5, 1.0, 1.5), lambda_macro=1.5)
        defaults.update(kw)
        return conv.SweepProblem(**defaults)

    def test_zero_data_flags_rates(self):
        zero = lambda x, y: np.zeros_like(np.asarray(x, float))
        problem = self.make_problem(init_c1=zero, init_c2=zero, init_c3=zero,
                                    kinetics=kin.zero_kinetics())
        report = conv.run_sweep(problem, [1 / 4, 1 / 8])
        for vals in report.errors.values():
            assert max(vals) == 0.0
        assert all(r is None for r in report.rates.values())

    def test_budget_exceeded(self):
        problem = self.make_problem(node_budget=100)
        with pytest.raises(BudgetExceededError):
            conv.run_sweep(problem, [1 / 4])

    def test_heat_only_errors_decrease(self):
        problem = self.make_problem(
            kinetics=kin.zero_kinetics(),
            d2=fem.CoefficientField.isotropic(1.0), t_end=0.02)
        report = conv.run_sweep(problem, [1 / 4, 1 / 8, 1 / 16])
        for name in ("c1", "c2", "c3"):
            assert report.monotone[name], (name, report.errors[name])

    def test_thread_count_does_not_change_results(self):
        problem = self.make_problem()
        r1 = conv.run_sweep(problem, [1 / 4, 1 / 8], threads=1)
        r2 = conv.run_sweep(problem, [1 / 4, 1 / 8], threads=2)
        assert r1.as_json_dict() == r2.as_json_dict()

    def test_fingerprint_stable(self):
        problem = self.make_problem()
        r1 = conv.run_sweep(problem, [1 / 4])
        r2 = conv.run_sweep(problem, [1 / 4])
        assert r1.fingerprint == r2.fingerprint
        assert r1.errors == r2.errors

    def test_report_csv_shape(self):
        problem = self.make_problem()
        report = conv.run_sweep(problem, [1 / 4, 1 / 8])
        lines = report.csv_text().splitlines()
        assert lines[0].startswith("epsilon,err_")
        assert len(lines) == 3
