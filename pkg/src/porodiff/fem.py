"""P1 finite-element assembly and constrained sparse linear algebra.

Stiffness uses one-point (centroid) quadrature for the coefficient, mass and
boundary mass use the exact P1 closed forms. Periodic identification is done
by slave elimination, Dirichlet rows/columns are eliminated with the right
hand side updated, and mean-zero conditions are enforced through Lagrange
multipliers, so reduced systems stay symmetric.

Assembly scatters element contributions in a fixed order and compresses
duplicates by sorted index, so assembled matrices are bit-reproducible and
independent of any caller-side parallelism.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConflictingConstraintsError,
    NoConvergenceError,
    NoMarkedBoundaryError,
    SingularSystemError,
)
from .geometry import EdgeMarker, PeriodicMap


@dataclass(frozen=True)
class CoefficientField:
    """Y-periodic symmetric 2x2 matrix field with ellipticity bounds.

    ``matrix_at`` maps points (P,2) to matrices (P,2,2); ``alpha`` and
    ``beta`` are the lower/upper ellipticity constants. Evaluators must be
    pure; fields are shareable across threads.
    """

    matrix_at: object
    alpha: float
    beta: float
    descriptor: str = "custom"

    @classmethod
    def constant(cls, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape == ():
            matrix = float(matrix) * np.eye(2)
        if matrix.shape != (2, 2):
            raise ValueError("constant coefficient must be scalar or 2x2")
        eigs = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
        mat = matrix.copy()
        mat.setflags(write=False)

        def evaluate(pts):
            pts = np.atleast_2d(pts)
            return np.broadcast_to(mat, (len(pts), 2, 2))

        return cls(evaluate, float(eigs[0]), float(eigs[-1]),
                   descriptor=f"constant:{matrix.tolist()}")

    @classmethod
    def isotropic(cls, value):
        return cls.constant(float(value) * np.eye(2))

    @classmethod
    def from_closure(cls, fn, alpha, beta, descriptor="closure"):
        return cls(fn, float(alpha), float(beta), descriptor)

    def at_fine_scale(self, epsilon):
        """The field x -> D(x/epsilon) on the epsilon-periodic domain."""
        base = self.matrix_at
        eps = float(epsilon)

        def evaluate(pts):
            return base(np.mod(np.atleast_2d(pts) / eps, 1.0))

        return CoefficientField(evaluate, self.alpha, self.beta,
                                descriptor=f"{self.descriptor}@eps={eps}")

    def validate(self, n=17, tol=1e-12):
        """Sample a grid and check symmetry and the eigenvalue bounds."""
        xs = (np.arange(n) + 0.5) / n
        gx, gy = np.meshgrid(xs, xs)
        mats = np.asarray(self.matrix_at(np.column_stack([gx.ravel(), gy.ravel()])))
        asym = np.abs(mats - np.swapaxes(mats, 1, 2)).max()
        if asym > tol:
            raise ValueError(f"coefficient not symmetric (deviation {asym:.2e})")
        eigs = np.linalg.eigvalsh(mats)
        if eigs.min() < self.alpha - 1e-9 or eigs.max() > self.beta + 1e-9:
            raise ValueError(
                f"coefficient eigenvalues [{eigs.min():.6f}, {eigs.max():.6f}] "
                f"violate the declared bounds [{self.alpha}, {self.beta}]"
            )
        return True

    def is_equal_constant(self, other):
        """True when both fields are the same constant matrix."""
        return (self.descriptor.startswith("constant:")
                and self.descriptor == other.descriptor)


def triangle_geometry(mesh):
    """Areas (M,) and P1 basis gradients (M,3,2) for every triangle."""
    p = mesh.nodes[mesh.triangles]
    areas = mesh.areas
    grads = np.empty((len(p), 3, 2))
    for k in range(3):
        pj = p[:, (k + 1) % 3]
        pk = p[:, (k + 2) % 3]
        grads[:, k, 0] = pj[:, 1] - pk[:, 1]
        grads[:, k, 1] = pk[:, 0] - pj[:, 0]
    grads /= (2.0 * areas)[:, None, None]
    return areas, grads


def _scatter(mesh, local):
    rows = np.repeat(mesh.triangles, 3, axis=1).reshape(-1)
    cols = np.tile(mesh.triangles, (1, 3)).reshape(-1)
    mat = sp.coo_matrix((local.reshape(-1), (rows, cols)),
                        shape=(mesh.n_nodes, mesh.n_nodes))
    return mat.tocsr()


def assemble_stiffness(mesh, coeff):
    """Stiffness matrix for -div(D grad u), D evaluated at element centroids."""
    mats = np.asarray(coeff.matrix_at(mesh.centroids))
    return assemble_stiffness_elementwise(mesh, mats)


def assemble_stiffness_elementwise(mesh, mats):
    """Stiffness matrix from per-element 2x2 coefficient matrices (M,2,2)."""
    areas, grads = triangle_geometry(mesh)
    local = np.einsum("m,mid,mde,mje->mij", areas, grads, mats, grads,
                      optimize=True)
    return _scatter(mesh, local)


_MASS_LOCAL = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def assemble_mass(mesh):
    """Consistent P1 mass matrix; entries sum to the mesh area."""
    local = mesh.areas[:, None, None] * _MASS_LOCAL
    return _scatter(mesh, local)


def assemble_weighted_mass(mesh, weights):
    """Mass matrix with a piecewise-constant element weight.

    ``weights`` is per-element (M,), or nodal (N,) in which case the element
    value is the vertex average.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape == (mesh.n_nodes,):
        weights = weights[mesh.triangles].mean(axis=1)
    local = (weights * mesh.areas)[:, None, None] * _MASS_LOCAL
    return _scatter(mesh, local)


_EDGE_MASS_LOCAL = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


def assemble_boundary_mass(mesh, marker=EdgeMarker.GAMMA, weight=1.0):
    """Boundary mass matrix on the marked edges, weight at edge midpoints.

    ``weight`` may be a scalar, a callable on midpoint coordinates, or a
    nodal array (averaged onto midpoints). The matrix is PSD for weight >= 0
    and 1'B1 equals the weighted marked length.
    """
    edges = mesh.edges_with(marker)
    if len(edges) == 0:
        raise NoMarkedBoundaryError(f"mesh has no {EdgeMarker(marker).name} edges")
    p0 = mesh.nodes[edges[:, 0]]
    p1 = mesh.nodes[edges[:, 1]]
    lengths = np.hypot(*(p1 - p0).T)
    if callable(weight):
        w = np.asarray(weight(0.5 * (p0 + p1)), dtype=float)
    else:
        w = np.asarray(weight, dtype=float)
        if w.shape == (mesh.n_nodes,):
            w = 0.5 * (w[edges[:, 0]] + w[edges[:, 1]])
        else:
            w = np.broadcast_to(w, (len(edges),))
    local = (w * lengths)[:, None, None] * _EDGE_MASS_LOCAL
    rows = np.repeat(edges, 2, axis=1).reshape(-1)
    cols = np.tile(edges, (1, 2)).reshape(-1)
    return sp.coo_matrix((local.reshape(-1), (rows, cols)),
                         shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()


def lumped_integral_weights(mesh):
    """Nodal weights w with w'u = integral of the P1 interpolant of u."""
    w = np.zeros(mesh.n_nodes)
    np.add.at(w, mesh.triangles.reshape(-1), np.repeat(mesh.areas / 3.0, 3))
    return w


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintSet:
    """Periodic pairs, Dirichlet values, and mean-zero functionals.

    ``mean_zero`` is a weight vector (or list of vectors) w with the
    constraint w'x = 0, each enforced through one Lagrange multiplier.
    """

    periodic: PeriodicMap | None = None
    dirichlet_nodes: np.ndarray | None = None
    dirichlet_values: object = 0.0
    mean_zero: object = None


class ConstraintReducer:
    """Reusable reduction full dofs -> constrained dofs for one ConstraintSet."""

    def __init__(self, n, constraints):
        self.n = int(n)
        cs = constraints
        master = np.arange(self.n, dtype=np.int64)
        slaves = np.zeros(self.n, dtype=bool)
        if cs.periodic is not None:
            pairs = cs.periodic.pairs
            master[pairs[:, 1]] = pairs[:, 0]
            slaves[pairs[:, 1]] = True

        dir_mask = np.zeros(self.n, dtype=bool)
        dir_vals = np.zeros(self.n)
        if cs.dirichlet_nodes is not None and len(cs.dirichlet_nodes):
            idx = np.asarray(cs.dirichlet_nodes, dtype=np.int64)
            vals = np.broadcast_to(np.asarray(cs.dirichlet_values, dtype=float),
                                   idx.shape)
            dir_mask[idx] = True
            dir_vals[idx] = vals
            if cs.periodic is not None:
                pairs = cs.periodic.pairs
                touched = dir_mask[pairs[:, 0]] | dir_mask[pairs[:, 1]]
                if touched.any():
                    raise ConflictingConstraintsError(
                        "a node is both periodic and Dirichlet"
                    )

        keep = ~(slaves | dir_mask)
        red_index = np.cumsum(keep) - 1
        self.n_reduced = int(keep.sum())
        rows = np.nonzero(~dir_mask)[0]
        targets = master[rows]
        if dir_mask[targets].any():
            raise ConflictingConstraintsError(
                "a periodic master node carries a Dirichlet value"
            )
        self.P = sp.coo_matrix(
            (np.ones(len(rows)), (rows, red_index[targets])),
            shape=(self.n, self.n_reduced),
        ).tocsr()
        self.dirichlet_values = dir_vals
        self.has_dirichlet = bool(dir_mask.any())
        self.dirichlet_mask = dir_mask

        mz = cs.mean_zero
        if mz is None:
            mz_list = []
        elif isinstance(mz, (list, tuple)):
            mz_list = [np.asarray(w, dtype=float) for w in mz]
        else:
            mz_list = [np.asarray(mz, dtype=float)]
        self.mean_zero_reduced = [self.P.T @ w for w in mz_list]
        self.n_multipliers = len(mz_list)

    def reduce(self, A, b):
        """Reduced, symmetric (A_r, b_r); multiplier rows appended last."""
        b = np.asarray(b, dtype=float)
        if self.has_dirichlet:
            b = b - A @ self.dirichlet_values
        A_r = (self.P.T @ A @ self.P).tocsr()
        b_r = self.P.T @ b
        if self.n_multipliers:
            cols = sp.hstack([sp.csr_matrix(w.reshape(-1, 1))
                              for w in self.mean_zero_reduced])
            zero = sp.csr_matrix((self.n_multipliers, self.n_multipliers))
            A_r = sp.bmat([[A_r, cols], [cols.T, zero]], format="csr")
            b_r = np.concatenate([b_r, np.zeros(self.n_multipliers)])
        return A_r, b_r

    def expand(self, x_reduced):
        """Full nodal vector from a reduced solution (multipliers dropped)."""
        if self.n_multipliers:
            x_reduced = x_reduced[: self.n_reduced]
        x = self.P @ x_reduced
        if self.has_dirichlet:
            x = x + self.dirichlet_values
        return x


def apply_constraints(A, b, constraints):
    """One-shot reduction; returns (A_reduced, b_reduced, reducer)."""
    reducer = ConstraintReducer(A.shape[0], constraints)
    A_r, b_r = reducer.reduce(A, b)
    return A_r, b_r, reducer


# ---------------------------------------------------------------------------
# solving
# ---------------------------------------------------------------------------

def solve_sparse(A, b, tol=1e-10, method="direct", maxiter=None, x0=None):
    """Solve A x = b with a relative-residual contract.

    ``direct`` uses sparse LU, ``cg`` a Jacobi-preconditioned conjugate
    gradient (A must be symmetric positive definite); ``auto`` picks cg for
    large systems. Raises SingularSystemError or NoConvergenceError when the
    contract fails.
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if method == "auto":
        method = "cg" if A.shape[0] > 20000 else "direct"
    if method == "direct":
        try:
            x = splu_factor(A).solve(b)
        except (RuntimeError, ValueError) as exc:
            raise SingularSystemError(str(exc)) from exc
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("factorization produced non-finite values")
        res = np.linalg.norm(A @ x - b) / bnorm
        if res > tol:
            raise NoConvergenceError(1, res)
        return x
    if method == "cg":
        diag = A.diagonal()
        if np.any(diag <= 0):
            raise SingularSystemError("nonpositive diagonal in CG path")
        M = sp.diags(1.0 / diag)
        iters = 0

        def count(_):
            nonlocal iters
            iters += 1

        x, info = spla.cg(A, b, rtol=tol * 0.1, atol=0.0, M=M, x0=x0,
                          maxiter=maxiter or 20 * A.shape[0], callback=count)
        res = np.linalg.norm(A @ x - b) / bnorm
        if info != 0 or res > tol:
            raise NoConvergenceError(iters, res)
        return x
    raise ValueError(f"unknown solve method {method!r}")


class _LUHandle:
    __slots__ = ("lu",)

    def __init__(self, lu):
        self.lu = lu

    def solve(self, b):
        return self.lu.solve(b)


_factor_cache: OrderedDict[bytes, _LUHandle] = OrderedDict()
_FACTOR_CACHE_SIZE = 8


def _matrix_key(A):
    h = hashlib.sha1()
    h.update(np.asarray(A.shape, dtype=np.int64).tobytes())
    h.update(A.indptr.tobytes())
    h.update(A.indices.tobytes())
    h.update(A.data.tobytes())
    return h.digest()


def splu_factor(A):
    """LU factorization memoized on the matrix content."""
    A_csc = A.tocsc()
    key = _matrix_key(A_csc)
    handle = _factor_cache.get(key)
    if handle is None:
        handle = _LUHandle(spla.splu(A_csc))
        _factor_cache[key] = handle
        while len(_factor_cache) > _FACTOR_CACHE_SIZE:
            _factor_cache.popitem(last=False)
    else:
        _factor_cache.move_to_end(key)
    return handle


def solve_constrained(A, b, constraints, tol=1e-10, method="direct"):
    """Reduce by the constraints, solve, and expand back to full dofs."""
    A_r, b_r, reducer = apply_constraints(A, b, constraints)
    x_r = solve_sparse(A_r, b_r, tol=tol, method=method)
    return reducer.expand(x_r)


def mass_norm(M, u):
    """L2 norm of the P1 field u via the mass matrix."""
    return float(np.sqrt(max(u @ (M @ u), 0.0)))


def solve_exchange_block(A1, A2, C, b1, b2, reducer, tol=1e-10, equal=False,
                         method="direct", x0=None):
    """Solve the symmetric exchange block [[A1+C, -C], [-C, A2+C]].

    ``reducer`` is the single-field constraint reduction, applied to both
    fields. The block is SPD whenever A1, A2 are SPD and C is PSD, so either
    solve path honours the same residual contract. With ``equal=True`` (A1
    and A2 are the same operator) the system decouples exactly into sum and
    difference variables, which keeps symmetric data exactly symmetric:
    equal right-hand sides give bitwise-equal fields.
    """
    P = reducer.P
    if reducer.n_multipliers:
        raise ConflictingConstraintsError(
            "exchange block solve does not support mean-zero multipliers"
        )
    b1r = P.T @ (b1 - A1 @ reducer.dirichlet_values) if reducer.has_dirichlet \
        else P.T @ b1
    b2r = P.T @ (b2 - A2 @ reducer.dirichlet_values) if reducer.has_dirichlet \
        else P.T @ b2
    A1r = (P.T @ A1 @ P).tocsr()
    Cr = (P.T @ C @ P).tocsr() if C is not None else None
    if equal:
        x_sum = solve_sparse(A1r, b1r + b2r, tol=tol, method=method)
        if Cr is not None:
            x_diff = solve_sparse((A1r + 2.0 * Cr).tocsr(), b1r - b2r,
                                  tol=tol, method=method)
        else:
            x_diff = solve_sparse(A1r, b1r - b2r, tol=tol, method=method)
        x1r = 0.5 * (x_sum + x_diff)
        x2r = 0.5 * (x_sum - x_diff)
    else:
        A2r = (P.T @ A2 @ P).tocsr()
        if Cr is not None:
            block = sp.bmat([[A1r + Cr, -Cr], [-Cr, A2r + Cr]], format="csr")
        else:
            block = sp.block_diag([A1r, A2r], format="csr")
        b = np.concatenate([b1r, b2r])
        x0r = None
        if x0 is not None:
            x0r = np.concatenate([P.T @ x0[0], P.T @ x0[1]])
        x = solve_sparse(block, b, tol=tol, method=method, x0=x0r)
        x1r, x2r = x[: len(b1r)], x[len(b1r):]
    return reducer.expand(x1r), reducer.expand(x2r)


def write_matrixmarket(A, path):
    """Debug dump in MatrixMarket coordinate real symmetric layout."""
    A = sp.coo_matrix(A)
    mask = A.row >= A.col
    rows, cols, data = A.row[mask], A.col[mask], A.data[mask]
    order = np.lexsort((rows, cols))
    with open(path, "w") as f:
        f.write("%%MatrixMarket matrix coordinate real symmetric\n")
        f.write(f"{A.shape[0]} {A.shape[1]} {mask.sum()}\n")
        for k in order:
            f.write(f"{rows[k] + 1} {cols[k] + 1} {float(data[k])!r}\n")
