"""Periodic cell problems and the effective tensors built from them.

The scalar problem yields the constant effective diffusion tensor of the
slow species; the two-field problem, coupled through an exchange term on the
inclusion boundary, yields the concentration-dependent dispersion tensor of
the fast pair. Each tensor can be assembled from the volume-average formula
or the energy formula; on one discrete solution the two agree to solver
precision, which the tests pin at 1e-9.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import MeshMismatchError, NoMarkedBoundaryError, SingularSystemError
from .geometry import EdgeMarker, Mesh, PeriodicMap, pair_periodic_nodes


class TensorForm(str, Enum):
    SCALAR_FORM = "SCALAR_FORM"
    SCALAR_ENERGY = "SCALAR_ENERGY"
    COUPLED_FORM = "COUPLED_FORM"
    COUPLED_ENERGY = "COUPLED_ENERGY"


@dataclass
class CellContext:
    """Perforated unit-cell mesh with its periodic identification and measures."""

    mesh: Mesh
    periodic: PeriodicMap
    mean_weights: np.ndarray
    area: float
    gamma_length: float
    gamma_mass: sp.csr_matrix | None

    @classmethod
    def from_mesh(cls, mesh):
        periodic = pair_periodic_nodes(mesh)
        weights = fem.lumped_integral_weights(mesh)
        try:
            gamma_mass = fem.assemble_boundary_mass(mesh, EdgeMarker.GAMMA, 1.0)
            gamma_length = mesh.marked_length(EdgeMarker.GAMMA)
        except NoMarkedBoundaryError:
            gamma_mass = None
            gamma_length = 0.0
        return cls(mesh, periodic, weights, mesh.area, gamma_length, gamma_mass)


@dataclass
class CellSolution:
    """Corrector fields of the scalar cell problem, one per direction."""

    mesh: Mesh
    directions: dict[int, np.ndarray]

    def mean_residual(self, weights, area):
        return max(abs(float(weights @ corr)) / area
                   for corr in self.directions.values())


@dataclass
class CoupledCellSolution:
    """Corrector pair of the exchange-coupled cell problem."""

    mesh: Mesh
    first: dict[int, np.ndarray]
    second: dict[int, np.ndarray]
    exchange_rate: float
    s: float | None = None


def _direction_loads(mesh, coeff):
    """Load vectors f_j[i] = sum_T |T| (D_T e_j) . grad(phi_i), j = 0, 1."""
    areas, grads = fem.triangle_geometry(mesh)
    mats = np.asarray(coeff.matrix_at(mesh.centroids))
    loads = np.zeros((2, mesh.n_nodes))
    for j in range(2):
        contrib = np.einsum("m,mid,md->mi", areas, grads, mats[:, :, j])
        np.add.at(loads[j], mesh.triangles.reshape(-1), contrib.reshape(-1))
    return loads


def solve_scalar_cell(ctx, coeff, direction, tol=1e-10):
    """Corrector of the scalar cell problem for one coordinate direction."""
    sol = solve_scalar_pair(ctx, coeff, tol=tol)
    return CellSolution(ctx.mesh, {direction: sol.directions[direction]})


def solve_scalar_pair(ctx, coeff, tol=1e-10):
    """Correctors for both directions (one factorization, two loads)."""
    mesh = ctx.mesh
    K = fem.assemble_stiffness(mesh, coeff)
    loads = _direction_loads(mesh, coeff)
    cs = fem.ConstraintSet(periodic=ctx.periodic, mean_zero=ctx.mean_weights)
    reducer = fem.ConstraintReducer(mesh.n_nodes, cs)
    A_r, _ = reducer.reduce(K, np.zeros(mesh.n_nodes))
    handle = fem.splu_factor(A_r)
    out = {}
    for j in range(2):
        b_r = reducer.P.T @ loads[j]
        b_r = np.concatenate([b_r, np.zeros(reducer.n_multipliers)])
        x_r = handle.solve(b_r)
        res = np.linalg.norm(A_r @ x_r - b_r)
        scale = np.linalg.norm(b_r)
        if scale > 0 and res / scale > tol:
            raise SingularSystemError(
                f"cell solve residual {res / scale:.2e} above {tol:.1e}"
            )
        out[j] = reducer.expand(x_r)
    return CellSolution(mesh, out)


def _element_gradients(mesh, values):
    areas, grads = fem.triangle_geometry(mesh)
    return np.einsum("mid,mi->md", grads, values[mesh.triangles])


def _check_mesh(ctx, sol):
    if sol.mesh is not ctx.mesh:
        raise MeshMismatchError("solution was computed on a different mesh")


@dataclass
class EffectiveTensor:
    """2x2 effective matrix with its provenance and diagnostics."""

    matrix: np.ndarray
    form: TensorForm
    h: float
    s: float | None = None
    exchange_rate: float | None = None
    cross_check_err: float | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float).reshape(2, 2)

    @property
    def min_eig(self):
        return float(np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T))[0])

    @property
    def asymmetry(self):
        return float(np.abs(self.matrix - self.matrix.T).max())

    def as_json_dict(self):
        return {
            "form": self.form.value,
            "h": self.h,
            "s": self.s if self.s is not None else self.exchange_rate,
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "min_eig": self.min_eig,
            "cross_check_err": self.cross_check_err,
        }


def effective_tensor_scalar(ctx, sol, coeff, form=TensorForm.SCALAR_ENERGY):
    """Effective tensor from the scalar correctors, either formula."""
    _check_mesh(ctx, sol)
    if set(sol.directions) != {0, 1}:
        raise MeshMismatchError("both corrector directions are required")
    mesh = ctx.mesh
    areas = mesh.areas
    mats = np.asarray(coeff.matrix_at(mesh.centroids))
    grad = [_element_gradients(mesh, sol.directions[j]) for j in range(2)]
    eye = np.eye(2)
    t = np.empty((2, 2))
    if form == TensorForm.SCALAR_FORM:
        for j in range(2):
            flux = np.einsum("mde,me->md", mats, eye[j] - grad[j])
            t[:, j] = np.einsum("m,md->d", areas, flux) / ctx.area
    elif form == TensorForm.SCALAR_ENERGY:
        for i in range(2):
            for j in range(2):
                t[i, j] = np.einsum(
                    "m,md,mde,me->", areas, eye[i] - grad[i], mats,
                    eye[j] - grad[j]) / ctx.area
    else:
        raise ValueError(f"{form} is not a scalar tensor form")
    return EffectiveTensor(t, form, h=mesh.h)


def _block_periodic(pm, n):
    pairs = np.vstack([pm.pairs, pm.pairs + n])
    return PeriodicMap(pairs, 2 * n)


def solve_coupled_cell(ctx, coeff1, coeff2, exchange_rate, direction, tol=1e-10):
    """Coupled corrector pair for one coordinate direction."""
    sol = solve_coupled_pair(ctx, coeff1, coeff2, exchange_rate, tol=tol)
    return CoupledCellSolution(
        ctx.mesh,
        {direction: sol.first[direction]},
        {direction: sol.second[direction]},
        exchange_rate,
    )


def solve_coupled_pair(ctx, coeff1, coeff2, exchange_rate, tol=1e-10):
    """Coupled correctors for both directions.

    The boundary exchange enters as a symmetric positive-semidefinite
    coupling on the corrector difference; the first field is normalized to
    mean zero, and for exchange_rate == 0 the (then decoupled) second field
    is normalized independently.
    """
    if exchange_rate < 0:
        raise ValueError("exchange rate must be nonnegative")
    if coeff1.is_equal_constant(coeff2) or coeff1 is coeff2:
        scal = solve_scalar_pair(ctx, coeff1, tol=tol)
        return CoupledCellSolution(ctx.mesh, dict(scal.directions),
                                   dict(scal.directions), exchange_rate)
    mesh = ctx.mesh
    n = mesh.n_nodes
    K1 = fem.assemble_stiffness(mesh, coeff1)
    K2 = fem.assemble_stiffness(mesh, coeff2)
    if ctx.gamma_mass is not None and exchange_rate > 0:
        C = exchange_rate * ctx.gamma_mass
        A = sp.bmat([[K1 + C, -C], [-C, K2 + C]], format="csr")
    else:
        A = sp.block_diag([K1, K2], format="csr")
    loads1 = _direction_loads(mesh, coeff1)
    loads2 = _direction_loads(mesh, coeff2)
    w = ctx.mean_weights
    zeros = np.zeros(n)
    mean_zero = [np.concatenate([w, zeros])]
    if exchange_rate == 0 or ctx.gamma_mass is None:
        mean_zero.append(np.concatenate([zeros, w]))
    cs = fem.ConstraintSet(periodic=_block_periodic(ctx.periodic, n),
                           mean_zero=mean_zero)
    reducer = fem.ConstraintReducer(2 * n, cs)
    A_r, _ = reducer.reduce(A, np.zeros(2 * n))
    handle = fem.splu_factor(A_r)
    first, second = {}, {}
    for j in range(2):
        b = np.concatenate([loads1[j], loads2[j]])
        b_r = reducer.P.T @ b
        b_r = np.concatenate([b_r, np.zeros(reducer.n_multipliers)])
        x_r = handle.solve(b_r)
        res = np.linalg.norm(A_r @ x_r - b_r)
        scale = np.linalg.norm(b_r)
        if scale > 0 and res / scale > tol:
            raise SingularSystemError(
                f"coupled cell solve residual {res / scale:.2e} above {tol:.1e}"
            )
        x = reducer.expand(x_r)
        first[j] = x[:n]
        second[j] = x[n:]
    return CoupledCellSolution(mesh, first, second, exchange_rate)


def effective_tensor_coupled(ctx, sol, coeff1, coeff2,
                             form=TensorForm.COUPLED_ENERGY):
    """Dispersion tensor from the coupled correctors, either formula."""
    _check_mesh(ctx, sol)
    if set(sol.first) != {0, 1} or set(sol.second) != {0, 1}:
        raise MeshMismatchError("both corrector directions are required")
    mesh = ctx.mesh
    areas = mesh.areas
    eye = np.eye(2)
    mats1 = np.asarray(coeff1.matrix_at(mesh.centroids))
    mats2 = np.asarray(coeff2.matrix_at(mesh.centroids))
    g1 = [_element_gradients(mesh, sol.first[j]) for j in range(2)]
    g2 = [_element_gradients(mesh, sol.second[j]) for j in range(2)]
    t = np.empty((2, 2))
    if form == TensorForm.COUPLED_FORM:
        for j in range(2):
            flux = (np.einsum("mde,me->md", mats1, eye[j] - g1[j])
                    + np.einsum("mde,me->md", mats2, eye[j] - g2[j]))
            t[:, j] = np.einsum("m,md->d", areas, flux) / ctx.area
    elif form == TensorForm.COUPLED_ENERGY:
        diff = [sol.first[j] - sol.second[j] for j in range(2)]
        for i in range(2):
            for j in range(2):
                val = np.einsum("m,md,mde,me->", areas, eye[i] - g1[i],
                                mats1, eye[j] - g1[j])
                val += np.einsum("m,md,mde,me->", areas, eye[i] - g2[i],
                                 mats2, eye[j] - g2[j])
                if ctx.gamma_mass is not None and sol.exchange_rate > 0:
                    val += sol.exchange_rate * float(
                        diff[i] @ (ctx.gamma_mass @ diff[j]))
                t[i, j] = val / ctx.area
    else:
        raise ValueError(f"{form} is not a coupled tensor form")
    return EffectiveTensor(t, form, h=mesh.h, exchange_rate=sol.exchange_rate)


def scalar_tensor_with_check(ctx, coeff, tol=1e-10):
    """Energy-form tensor plus the cross-check against the volume form."""
    sol = solve_scalar_pair(ctx, coeff, tol=tol)
    te = effective_tensor_scalar(ctx, sol, coeff, TensorForm.SCALAR_ENERGY)
    tf = effective_tensor_scalar(ctx, sol, coeff, TensorForm.SCALAR_FORM)
    te.cross_check_err = float(np.abs(te.matrix - tf.matrix).max())
    return te, sol


def coupled_tensor_with_check(ctx, coeff1, coeff2, exchange_rate, s=None,
                              tol=1e-10):
    """Energy-form dispersion tensor plus its volume-form cross check."""
    sol = solve_coupled_pair(ctx, coeff1, coeff2, exchange_rate, tol=tol)
    te = effective_tensor_coupled(ctx, sol, coeff1, coeff2,
                                  TensorForm.COUPLED_ENERGY)
    tf = effective_tensor_coupled(ctx, sol, coeff1, coeff2,
                                  TensorForm.COUPLED_FORM)
    te.cross_check_err = float(np.abs(te.matrix - tf.matrix).max())
    te.s = s
    return te, sol


def mean_coefficient(ctx, coeff):
    """Volume average of the coefficient over the perforated cell."""
    mats = np.asarray(coeff.matrix_at(ctx.mesh.centroids))
    return np.einsum("m,mij->ij", ctx.mesh.areas, mats) / ctx.area


# ---------------------------------------------------------------------------
# dispersion table
# ---------------------------------------------------------------------------

@dataclass
class DispersionTable:
    """Sampled map s -> dispersion matrix with clamped linear interpolation."""

    s: np.ndarray
    matrices: np.ndarray  # (K, 2, 2)
    interpolation: str = "piecewise-linear-clamped"
    midpoint_error: float | None = None
    cross_check_err: float | None = None
    h: float | None = None

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.matrices = np.asarray(self.matrices, dtype=float)
        if np.any(np.diff(self.s) <= 0):
            raise ValueError("table abscissae must be strictly increasing")

    @property
    def s_max(self):
        return float(self.s[-1])

    def covers(self, lo, hi, tol=0.0):
        return self.s[0] - tol <= lo and hi <= self.s[-1] + tol

    def evaluate(self, s):
        return self.evaluate_many(np.asarray([s], dtype=float))[0]

    def evaluate_many(self, s):
        s = np.clip(np.asarray(s, dtype=float), self.s[0], self.s[-1])
        idx = np.clip(np.searchsorted(self.s, s, side="right") - 1,
                      0, len(self.s) - 2)
        left = self.s[idx]
        width = self.s[idx + 1] - left
        t = np.where(width > 0, (s - left) / np.where(width > 0, width, 1.0), 0.0)
        return ((1.0 - t)[:, None, None] * self.matrices[idx]
                + t[:, None, None] * self.matrices[idx + 1])

    @classmethod
    def constant(cls, matrix, s_max=1.0):
        matrix = np.asarray(matrix, dtype=float)
        return cls(np.array([0.0, float(s_max)]),
                   np.stack([matrix, matrix]), h=0.0)

    def as_json_dict(self):
        return {
            "interpolation": self.interpolation,
            "midpoint_error": self.midpoint_error,
            "cross_check_err": self.cross_check_err,
            "h": self.h,
            "entries": [
                {
                    "s": float(s),
                    "matrix": [[float(v) for v in row] for row in mat],
                    "min_eig": float(np.linalg.eigvalsh(
                        0.5 * (mat + mat.T))[0]),
                }
                for s, mat in zip(self.s, self.matrices)
            ],
        }


def tabulate_b(ctx, coeff1, coeff2, exchange_fn, s_grid,
               midpoint_tol=None, max_refine=1, tol=1e-10):
    """Tabulate the dispersion tensor over an s grid.

    The tensor only sees the exchange rate, so each sample solves the coupled
    cell problem at exchange_fn(s). The midpoint interpolation error between
    adjacent samples is measured with direct solves and attached; when
    ``midpoint_tol`` is given, midpoints are inserted (up to ``max_refine``
    rounds) until the estimate drops below it.
    """
    s_grid = np.asarray(sorted(float(s) for s in s_grid))
    if len(s_grid) < 2:
        raise ValueError("s grid needs at least two samples")
    if s_grid[0] != 0.0:
        raise ValueError("s grid must start at 0")

    cache = {}

    def tensor_at(s):
        if s not in cache:
            te, _ = coupled_tensor_with_check(
                ctx, coeff1, coeff2, float(exchange_fn(s)), s=s, tol=tol)
            cache[s] = te
        return cache[s]

    samples = list(s_grid)
    rounds = 0
    while True:
        mats = np.stack([tensor_at(s).matrix for s in samples])
        mids = [0.5 * (samples[k] + samples[k + 1])
                for k in range(len(samples) - 1)]
        errs = []
        for k, sm in enumerate(mids):
            direct = tensor_at(sm).matrix
            interp = 0.5 * (mats[k] + mats[k + 1])
            errs.append(float(np.abs(interp - direct).max()))
        midpoint_error = max(errs) if errs else 0.0
        if midpoint_tol is None or midpoint_error <= midpoint_tol \
                or rounds >= max_refine:
            break
        samples = sorted(set(samples) | set(mids))
        rounds += 1

    mats = np.stack([tensor_at(s).matrix for s in samples])
    cross = max(tensor_at(s).cross_check_err or 0.0 for s in samples)
    return DispersionTable(np.asarray(samples), mats,
                           midpoint_error=midpoint_error,
                           cross_check_err=cross, h=ctx.mesh.h)


def write_tensor_json(tensor, path):
    with open(path, "w") as f:
        json.dump(tensor.as_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_table_json(table, path):
    with open(path, "w") as f:
        json.dump(table.as_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
