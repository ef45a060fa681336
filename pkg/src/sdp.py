"""
Block semidefinite programs and the backends that solve them.

Problem form (maximisation):

    maximize    <c, x>
    subject to  <a_k, x> = b_k          for every equality k
                X_b is PSD              for every block b
                u free

Variables are indexed globally: the upper-triangle entries (i <= j, row major) of
each block in order, then the free scalars. A functional coefficient on an
off-diagonal entry (i, j) multiplies Q_ij + Q_ji jointly, so as a matrix it sits
in both symmetric positions. This convention is used by every module.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sparse

from src.logger import logger
from src.settings import SolverOptions


SYMMETRY_TOLERANCE = 1e-9
RANK_TOLERANCE = 1e-10
STEP_FRACTION = 0.98


class SdpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_TROUBLE = "numerical_trouble"
    ITERATION_LIMIT = "iteration_limit"


class SdpStructureError(ValueError):
    pass


class AsymmetricMatrixError(ValueError):
    pass


class SdpBackendUnavailable(RuntimeError):
    pass


@dataclass
class Equality:
    coefficients: Dict[int, float]
    rhs: float


@dataclass
class SdpProblem:
    psd_blocks: List[int]
    free_scalars: int = 0
    equalities: List[Equality] = field(default_factory=list)
    objective: Dict[int, float] = field(default_factory=dict)

    @property
    def block_offsets(self) -> List[int]:
        offsets, total = [], 0
        for k in self.psd_blocks:
            offsets.append(total)
            total += k * (k + 1) // 2
        return offsets

    @property
    def num_block_entries(self) -> int:
        return sum(k * (k + 1) // 2 for k in self.psd_blocks)

    @property
    def num_variables(self) -> int:
        return self.num_block_entries + self.free_scalars

    def entry_index(self, block: int, i: int, j: int) -> int:
        k = self.psd_blocks[block]
        if i > j:
            i, j = j, i
        if not 0 <= i <= j < k:
            raise SdpStructureError(f"Entry ({i}, {j}) outside block {block} of size {k}.")
        return self.block_offsets[block] + i * k - i * (i - 1) // 2 + (j - i)

    def scalar_index(self, k: int) -> int:
        if not 0 <= k < self.free_scalars:
            raise SdpStructureError(f"Free scalar {k} out of range ({self.free_scalars}).")
        return self.num_block_entries + k

    def add_equality(self, coefficients: Dict[int, float], rhs: float) -> None:
        self.equalities.append(Equality(dict(coefficients), float(rhs)))

    def validate(self) -> None:
        if any((not isinstance(k, (int, np.integer))) or k < 1 for k in self.psd_blocks):
            raise SdpStructureError(f"Block sizes must be positive integers: {self.psd_blocks}.")
        if self.free_scalars < 0:
            raise SdpStructureError("Negative number of free scalars.")
        n = self.num_variables
        for row, eq in enumerate(self.equalities):
            if not math.isfinite(eq.rhs):
                raise SdpStructureError(f"Equality {row} has a non-finite right-hand side.")
            for index, coef in eq.coefficients.items():
                if not 0 <= index < n:
                    raise SdpStructureError(f"Equality {row} references variable {index} outside [0, {n}).")
                if not math.isfinite(coef):
                    raise SdpStructureError(f"Equality {row} has a non-finite coefficient.")
        for index, coef in self.objective.items():
            if not 0 <= index < n or not math.isfinite(coef):
                raise SdpStructureError(f"Objective term {index}: {coef} is invalid.")

    def constraint_matrix(self) -> sparse.csr_matrix:
        rows, cols, vals = [], [], []
        for r, eq in enumerate(self.equalities):
            for index, coef in eq.coefficients.items():
                if coef != 0.0:
                    rows.append(r)
                    cols.append(index)
                    vals.append(coef)
        return sparse.csr_matrix(
            (vals, (rows, cols)), shape=(len(self.equalities), self.num_variables)
        )

    def rhs_vector(self) -> np.ndarray:
        return np.array([eq.rhs for eq in self.equalities], dtype=float)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.num_variables)
        for index, coef in self.objective.items():
            c[index] += coef
        return c

    def pack(self, block_values: Sequence[np.ndarray], scalar_values: np.ndarray) -> np.ndarray:
        """Global variable vector (upper triangles, then scalars) from matrices."""
        parts = []
        for k, value in zip(self.psd_blocks, block_values):
            iu, ju = np.triu_indices(k)
            parts.append(np.asarray(value)[iu, ju])
        parts.append(np.asarray(scalar_values, dtype=float).reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def evaluate_functional(
        self, functional: Dict[int, float], block_values: Sequence[np.ndarray], scalar_values: np.ndarray
    ) -> float:
        """Value of a functional, off-diagonal coefficients counted for both Q_ij and Q_ji."""
        x = self.pack(block_values, scalar_values)
        weights = self._symmetric_weights()
        return float(sum(coef * weights[i] * x[i] for i, coef in functional.items()))

    def _symmetric_weights(self) -> np.ndarray:
        w = np.ones(self.num_variables)
        for b, k in enumerate(self.psd_blocks):
            iu, ju = np.triu_indices(k)
            off = self.block_offsets[b]
            w[off:off + len(iu)] = np.where(iu == ju, 1.0, 2.0)
        return w


@dataclass
class SdpSolution:
    status: SdpStatus
    block_values: List[np.ndarray]
    scalar_values: np.ndarray
    objective_value: float
    iterations: int = 0
    primal_residual: float = math.nan
    dual_residual: float = math.nan
    relative_gap: float = math.nan
    backend: str = "ipm"


def min_eigenvalue(matrix: np.ndarray) -> float:
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise AsymmetricMatrixError(f"Matrix of shape {m.shape} is not square.")
    if m.size == 0:
        return math.inf
    if np.max(np.abs(m - m.T)) > SYMMETRY_TOLERANCE * max(1.0, np.max(np.abs(m))):
        raise AsymmetricMatrixError("Matrix is not symmetric within tolerance.")
    sym = (m + m.T) / 2
    return float(la.eigvalsh(sym, subset_by_index=[0, 0])[0])


def write_sparse_dump(problem: SdpProblem, path: Path) -> None:
    """Plain-text dump for cross-checking against external solvers."""
    lines = [
        f"blocks {' '.join(str(k) for k in problem.psd_blocks)}",
        f"free {problem.free_scalars}",
        "objective " + " ".join(f"{i}:{c!r}" for i, c in sorted(problem.objective.items())),
    ]
    for row, eq in enumerate(problem.equalities):
        terms = " ".join(f"{i}:{c!r}" for i, c in sorted(eq.coefficients.items()))
        lines.append(f"eq {row} rhs {eq.rhs!r} {terms}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class _Presolved:
    rows: np.ndarray
    infeasible: bool
    dropped_free: np.ndarray
    unbounded: bool


def _presolve(problem: SdpProblem, a: sparse.csr_matrix, b: np.ndarray, c: np.ndarray) -> _Presolved:
    nnz_rows = np.flatnonzero(np.diff(a.indptr) > 0)
    empty_rows = np.setdiff1d(np.arange(a.shape[0]), nnz_rows)
    if empty_rows.size and np.any(np.abs(b[empty_rows]) > RANK_TOLERANCE * (1 + np.abs(b).max())):
        return _Presolved(nnz_rows, True, np.zeros(0, dtype=int), False)

    free_start = problem.num_block_entries
    free_cols = np.arange(free_start, problem.num_variables)
    col_nnz = np.diff(a.tocsc().indptr)
    dropped = free_cols[col_nnz[free_cols] == 0] if free_cols.size else np.zeros(0, dtype=int)
    unbounded = bool(dropped.size and np.any(c[dropped] != 0.0))

    if nnz_rows.size == 0:
        return _Presolved(nnz_rows, False, dropped, unbounded)

    dense = a[nnz_rows].toarray()
    scale = np.maximum(np.abs(dense).max(axis=1), 1e-300)
    dense = dense / scale[:, None]
    rhs = b[nnz_rows] / scale
    _, r_a, piv = la.qr(dense.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_a))
    rank = int(np.sum(diag > RANK_TOLERANCE * diag[0])) if diag.size else 0
    keep = np.sort(piv[:rank])
    if rank < nnz_rows.size:
        # dependent rows must be consistent with the kept ones
        w, *_ = la.lstsq(dense[keep].T, dense.T)
        mismatch = np.abs(w.T @ rhs[keep] - rhs)
        if np.any(mismatch > 1e-8 * (1 + np.abs(rhs).max())):
            return _Presolved(nnz_rows, True, dropped, unbounded)
    return _Presolved(nnz_rows[keep], False, dropped, unbounded)


class _BlockData:
    """Constraint data restricted to one PSD block of size > 1."""

    def __init__(self, size: int, rows: np.ndarray, coeffs: np.ndarray, cost: np.ndarray):
        self.size = size
        self.rows = rows
        self.mats = coeffs  # (len(rows), k, k), full symmetric
        self.flat = coeffs.reshape(len(rows), -1)
        self.cost = cost

    def apply(self, x: np.ndarray, m: int) -> np.ndarray:
        out = np.zeros(m)
        if self.rows.size:
            out[self.rows] = self.flat @ x.ravel()
        return out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        k = self.size
        if not self.rows.size:
            return np.zeros((k, k))
        return (self.flat.T @ y[self.rows]).reshape(k, k)


def _expand_block(flat_upper: np.ndarray, k: int) -> np.ndarray:
    iu, ju = np.triu_indices(k)
    out = np.zeros(flat_upper.shape[:-1] + (k, k))
    out[..., iu, ju] = flat_upper
    out[..., ju, iu] = flat_upper
    return out


def _max_step(x: np.ndarray, dx: np.ndarray) -> float:
    lower = la.cholesky(x, lower=True)
    tmp = la.solve_triangular(lower, dx, lower=True)
    scaled = la.solve_triangular(lower, tmp.T, lower=True)
    lam = la.eigvalsh((scaled + scaled.T) / 2, subset_by_index=[0, 0])[0]
    return math.inf if lam >= 0 else -1.0 / lam


def _max_step_lp(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return math.inf
    return float(np.min(-x[neg] / dx[neg]))


class InteriorPointBackend:
    """
    Homogeneous self-dual primal-dual interior-point method with HKM scaling.

    Internally solves  min <c~, x>  with c~ = -c. Blocks of size 1 are treated as
    a nonnegative orthant; free scalars enter through a saddle-point Newton system.
    """

    name = "ipm"

    def solve(self, problem: SdpProblem, options: SolverOptions) -> SdpSolution:
        a_full = problem.constraint_matrix()
        b_full = problem.rhs_vector()
        c_max = problem.objective_vector()
        weights = problem._symmetric_weights()
        # functional -> inner-product coefficients on upper-triangle storage
        a_full = a_full @ sparse.diags(weights)
        c_inner = c_max * weights

        pre = _presolve(problem, a_full, b_full, c_inner)
        if pre.infeasible:
            return self._trivial(problem, SdpStatus.INFEASIBLE)
        if pre.unbounded:
            return self._trivial(problem, SdpStatus.UNBOUNDED)

        a = a_full[pre.rows].tocsc()
        b = b_full[pre.rows]
        c = -c_inner
        m = a.shape[0]
        offsets = problem.block_offsets

        blocks: List[Tuple[int, _BlockData]] = []
        lp_cols, lp_blocks = [], []
        for index, (k, off) in enumerate(zip(problem.psd_blocks, offsets)):
            if k == 1:
                lp_cols.append(off)
                lp_blocks.append(index)
                continue
            width = k * (k + 1) // 2
            sub = a[:, off:off + width]
            rows = np.flatnonzero(np.diff(sub.tocsr().indptr) > 0)
            dense = sub.tocsr()[rows].toarray()
            mats = _expand_block(dense, k)
            iu, ju = np.triu_indices(k)
            # off-diagonal storage coefficients already carry both positions
            mats[:, iu[iu != ju], ju[iu != ju]] *= 0.5
            mats[:, ju[iu != ju], iu[iu != ju]] *= 0.5
            cost = _expand_block(c[off:off + width], k)
            cost[iu[iu != ju], ju[iu != ju]] *= 0.5
            cost[ju[iu != ju], iu[iu != ju]] *= 0.5
            blocks.append((index, _BlockData(k, rows, mats, cost)))

        lp_cols_arr = np.array(lp_cols, dtype=int)
        a_lp = a[:, lp_cols_arr].tocsr() if lp_cols else sparse.csr_matrix((m, 0))
        c_lp = c[lp_cols_arr] if lp_cols else np.zeros(0)
        free_start = problem.num_block_entries
        dropped = set(pre.dropped_free.tolist())
        free_cols = np.array([j for j in range(free_start, problem.num_variables) if j not in dropped], dtype=int)
        a_f = a[:, free_cols].toarray() if free_cols.size else np.zeros((m, 0))
        c_f = c[free_cols] if free_cols.size else np.zeros(0)

        if m == 0:
            return self._no_equalities(problem, blocks, c_lp, c_f)

        state = _HsdState.start(blocks, len(lp_cols), a_f.shape[1], m)
        result = self._iterate(state, blocks, a_lp, c_lp, a_f, c_f, b, options)
        status, iterations, best = result

        block_values: List[np.ndarray] = [np.zeros((k, k)) for k in problem.psd_blocks]
        for (index, _), xb in zip(blocks, best.x_blocks):
            block_values[index] = xb / best.tau
        for pos, index in enumerate(lp_blocks):
            block_values[index] = np.array([[best.x_lp[pos] / best.tau]])
        scalars = np.zeros(problem.free_scalars)
        for pos, col in enumerate(free_cols):
            scalars[col - free_start] = best.x_f[pos] / best.tau
        objective = problem.evaluate_functional(problem.objective, block_values, scalars)
        solution = SdpSolution(
            status=status,
            block_values=block_values,
            scalar_values=scalars,
            objective_value=objective,
            iterations=iterations,
            primal_residual=best.pinf,
            dual_residual=best.dinf,
            relative_gap=best.gap,
            backend=self.name,
        )
        return solution

    def _trivial(self, problem: SdpProblem, status: SdpStatus) -> SdpSolution:
        return SdpSolution(
            status=status,
            block_values=[np.zeros((k, k)) for k in problem.psd_blocks],
            scalar_values=np.zeros(problem.free_scalars),
            objective_value=math.nan,
            backend=self.name,
        )

    def _no_equalities(self, problem, blocks, c_lp, c_f) -> SdpSolution:
        # minimise <c~, x> over the cone alone: bounded only if c~ is in the dual cone
        unbounded = bool(np.any(c_f != 0) or np.any(c_lp < 0))
        for _, data in blocks:
            if la.eigvalsh(data.cost, subset_by_index=[0, 0])[0] < 0:
                unbounded = True
        status = SdpStatus.UNBOUNDED if unbounded else SdpStatus.OPTIMAL
        solution = self._trivial(problem, status)
        solution.objective_value = math.nan if unbounded else 0.0
        return solution

    def _iterate(self, state, blocks, a_lp, c_lp, a_f, c_f, b, options: SolverOptions):
        m = b.size
        nu = sum(data.size for _, data in blocks) + c_lp.size
        norm_b = float(np.linalg.norm(b))
        norm_c = math.sqrt(
            sum(np.sum(data.cost ** 2) for _, data in blocks) + float(c_lp @ c_lp) + float(c_f @ c_f)
        )
        infeas_tol = max(options.feas_tol, 1e-9)
        best: Optional[_HsdState] = None
        stalls = 0

        def a_op(xs, x_lp, x_f):
            out = a_lp @ x_lp + a_f @ x_f
            for (_, data), xb in zip(blocks, xs):
                out += data.apply(xb, m)
            return out

        for iteration in range(options.max_iters + 1):
            s = state
            ax = a_op(s.x_blocks, s.x_lp, s.x_f)
            r_p = b * s.tau - ax
            r_d = [data.cost * s.tau - data.adjoint(s.y) - zb for (_, data), zb in zip(blocks, s.z_blocks)]
            r_d_lp = c_lp * s.tau - a_lp.T @ s.y - s.z_lp
            r_f = c_f * s.tau - a_f.T @ s.y
            cx = sum(float(np.sum(data.cost * xb)) for (_, data), xb in zip(blocks, s.x_blocks))
            cx += float(c_lp @ s.x_lp) + float(c_f @ s.x_f)
            by = float(b @ s.y)
            r_g = s.kappa + cx - by
            mu = (
                sum(float(np.sum(xb * zb)) for xb, zb in zip(s.x_blocks, s.z_blocks))
                + float(s.x_lp @ s.z_lp)
                + s.tau * s.kappa
            ) / (nu + 1)

            dnorm = math.sqrt(sum(float(np.sum(r ** 2)) for r in r_d) + float(r_d_lp @ r_d_lp) + float(r_f @ r_f))
            s.pinf = float(np.linalg.norm(r_p)) / s.tau / (1 + norm_b)
            s.dinf = dnorm / s.tau / (1 + norm_c)
            pobj, dobj = cx / s.tau, by / s.tau
            s.gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
            if best is None or s.score() < best.score():
                best = s.copy()

            if s.pinf <= options.feas_tol and s.dinf <= options.feas_tol and s.gap <= options.duality_gap_tol:
                return SdpStatus.OPTIMAL, iteration, s
            if by > 0:
                ray = math.sqrt(
                    sum(float(np.sum((data.adjoint(s.y) + zb) ** 2)) for (_, data), zb in zip(blocks, s.z_blocks))
                    + float(np.sum((a_lp.T @ s.y + s.z_lp) ** 2))
                    + float(np.sum((a_f.T @ s.y) ** 2))
                )
                if ray <= infeas_tol * by and s.tau < 1e-3 * s.kappa:
                    return SdpStatus.INFEASIBLE, iteration, best
            if cx < 0:
                if float(np.linalg.norm(ax)) <= infeas_tol * (-cx) and s.tau < 1e-3 * s.kappa:
                    return SdpStatus.UNBOUNDED, iteration, best
            if iteration == options.max_iters:
                break

            try:
                direction = _NewtonSystem(s, blocks, a_lp, c_lp, a_f, c_f, b)
                aff = direction.solve(0.0, 1.0, mu, r_p, r_d, r_d_lp, r_f, r_g)
                alpha_aff = min(1.0, s.step_limit(aff))
                mu_aff = s.complementarity_after(aff, alpha_aff) / (nu + 1)
                sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0
                step = direction.solve(sigma, 1.0 - sigma, mu, r_p, r_d, r_d_lp, r_f, r_g)
                alpha = min(1.0, STEP_FRACTION * s.step_limit(step))
            except (la.LinAlgError, ValueError, FloatingPointError) as exc:
                logger.log_warning("Interior-point linear algebra failed", {"iteration": iteration, "error": str(exc)})
                return SdpStatus.NUMERICAL_TROUBLE, iteration, best
            if not math.isfinite(alpha) or alpha < 1e-10:
                stalls += 1
                if stalls >= 3:
                    return SdpStatus.NUMERICAL_TROUBLE, iteration, best
                alpha = max(alpha, 1e-10) if math.isfinite(alpha) else 1e-10
            else:
                stalls = 0
            state = s.advance(step, alpha)
            if not state.is_interior():
                return SdpStatus.NUMERICAL_TROUBLE, iteration, best

        return SdpStatus.ITERATION_LIMIT, options.max_iters, best


@dataclass
class _Direction:
    dx_blocks: List[np.ndarray]
    dz_blocks: List[np.ndarray]
    dx_lp: np.ndarray
    dz_lp: np.ndarray
    dx_f: np.ndarray
    dy: np.ndarray
    dtau: float
    dkappa: float


@dataclass
class _HsdState:
    x_blocks: List[np.ndarray]
    z_blocks: List[np.ndarray]
    x_lp: np.ndarray
    z_lp: np.ndarray
    x_f: np.ndarray
    y: np.ndarray
    tau: float
    kappa: float
    pinf: float = math.inf
    dinf: float = math.inf
    gap: float = math.inf

    @classmethod
    def start(cls, blocks, n_lp: int, n_free: int, m: int) -> "_HsdState":
        return cls(
            x_blocks=[np.eye(data.size) for _, data in blocks],
            z_blocks=[np.eye(data.size) for _, data in blocks],
            x_lp=np.ones(n_lp),
            z_lp=np.ones(n_lp),
            x_f=np.zeros(n_free),
            y=np.zeros(m),
            tau=1.0,
            kappa=1.0,
        )

    def score(self) -> float:
        return max(self.pinf, self.dinf, self.gap)

    def copy(self) -> "_HsdState":
        return _HsdState(
            [x.copy() for x in self.x_blocks],
            [z.copy() for z in self.z_blocks],
            self.x_lp.copy(),
            self.z_lp.copy(),
            self.x_f.copy(),
            self.y.copy(),
            self.tau,
            self.kappa,
            self.pinf,
            self.dinf,
            self.gap,
        )

    def step_limit(self, d: _Direction) -> float:
        alpha = math.inf
        for x, dx in zip(self.x_blocks, d.dx_blocks):
            alpha = min(alpha, _max_step(x, dx))
        for z, dz in zip(self.z_blocks, d.dz_blocks):
            alpha = min(alpha, _max_step(z, dz))
        alpha = min(alpha, _max_step_lp(self.x_lp, d.dx_lp), _max_step_lp(self.z_lp, d.dz_lp))
        if d.dtau < 0:
            alpha = min(alpha, -self.tau / d.dtau)
        if d.dkappa < 0:
            alpha = min(alpha, -self.kappa / d.dkappa)
        return alpha

    def complementarity_after(self, d: _Direction, alpha: float) -> float:
        total = 0.0
        for x, dx, z, dz in zip(self.x_blocks, d.dx_blocks, self.z_blocks, d.dz_blocks):
            total += float(np.sum((x + alpha * dx) * (z + alpha * dz)))
        total += float((self.x_lp + alpha * d.dx_lp) @ (self.z_lp + alpha * d.dz_lp))
        total += (self.tau + alpha * d.dtau) * (self.kappa + alpha * d.dkappa)
        return total

    def advance(self, d: _Direction, alpha: float) -> "_HsdState":
        def sym(mat):
            return (mat + mat.T) / 2

        return _HsdState(
            [sym(x + alpha * dx) for x, dx in zip(self.x_blocks, d.dx_blocks)],
            [sym(z + alpha * dz) for z, dz in zip(self.z_blocks, d.dz_blocks)],
            self.x_lp + alpha * d.dx_lp,
            self.z_lp + alpha * d.dz_lp,
            self.x_f + alpha * d.dx_f,
            self.y + alpha * d.dy,
            self.tau + alpha * d.dtau,
            self.kappa + alpha * d.dkappa,
        )

    def is_interior(self) -> bool:
        if self.tau <= 0 or self.kappa <= 0:
            return False
        if np.any(self.x_lp <= 0) or np.any(self.z_lp <= 0):
            return False
        try:
            for mat in self.x_blocks + self.z_blocks:
                la.cholesky(mat, lower=True)
        except la.LinAlgError:
            return False
        return all(np.all(np.isfinite(mat)) for mat in self.x_blocks + self.z_blocks)


class _NewtonSystem:
    """Factorised HKM Newton system for one iterate; solved twice per iteration."""

    def __init__(self, s: _HsdState, blocks, a_lp, c_lp, a_f, c_f, b):
        self.s = s
        self.blocks = blocks
        self.a_lp, self.c_lp, self.a_f, self.c_f, self.b = a_lp, c_lp, a_f, c_f, b
        m = b.size
        self.m = m
        self.z_inv = [la.cho_solve(la.cho_factor(z), np.eye(z.shape[0])) for z in s.z_blocks]
        self.d_lp = s.x_lp / s.z_lp

        schur = np.zeros((m, m))
        for (_, data), x, zi in zip(blocks, s.x_blocks, self.z_inv):
            if not data.rows.size:
                continue
            w = np.matmul(np.matmul(x, data.mats), zi)
            contrib = data.flat @ w.reshape(len(data.rows), -1).T
            schur[np.ix_(data.rows, data.rows)] += (contrib + contrib.T) / 2
        if a_lp.shape[1]:
            schur += (a_lp @ sparse.diags(self.d_lp) @ a_lp.T).toarray()
        nf = a_f.shape[1]
        kkt = np.zeros((m + nf, m + nf))
        kkt[:m, :m] = schur
        kkt[:m, m:] = a_f
        kkt[m:, :m] = a_f.T
        reg = 1e-14 * (1.0 + float(np.max(np.abs(np.diag(schur)))))
        kkt[:m, :m] += reg * np.eye(m)
        kkt[m:, m:] -= reg * np.eye(nf)
        self.lu = la.lu_factor(kkt, check_finite=True)

        e_cost = [self.scale(i, data.cost) for i, (_, data) in enumerate(blocks)]
        g = self.a_k(e_cost, self.d_lp * c_lp)
        self.u2 = la.lu_solve(self.lu, np.concatenate([b + g, c_f]))
        self.q = np.concatenate([b - g, -c_f])
        self.c_e_c = sum(float(np.sum(data.cost * e)) for (_, data), e in zip(blocks, e_cost))
        self.c_e_c += float(c_lp @ (self.d_lp * c_lp))

    def scale(self, index: int, v: np.ndarray) -> np.ndarray:
        x = self.s.x_blocks[index]
        prod = x @ v @ self.z_inv[index]
        return (prod + prod.T) / 2

    def a_k(self, mats: List[np.ndarray], v_lp: np.ndarray) -> np.ndarray:
        out = self.a_lp @ v_lp if self.a_lp.shape[1] else np.zeros(self.m)
        for (_, data), mat in zip(self.blocks, mats):
            out = out + data.apply(mat, self.m)
        return out

    def solve(self, sigma, eta, mu, r_p, r_d, r_d_lp, r_f, r_g) -> _Direction:
        s = self.s
        target = sigma * mu
        r_c = [target * zi - x for zi, x in zip(self.z_inv, s.x_blocks)]
        r_c_lp = target / s.z_lp - s.x_lp
        e_rd = [self.scale(i, rd) for i, rd in enumerate(r_d)]
        e_rd_lp = self.d_lp * r_d_lp

        h1_top = eta * r_p - self.a_k(r_c, r_c_lp) + eta * self.a_k(e_rd, e_rd_lp)
        u1 = la.lu_solve(self.lu, np.concatenate([h1_top, eta * r_f]))

        c_rc = sum(float(np.sum(data.cost * rc)) for (_, data), rc in zip(self.blocks, r_c))
        c_rc += float(self.c_lp @ r_c_lp)
        c_erd = sum(float(np.sum(data.cost * e)) for (_, data), e in zip(self.blocks, e_rd))
        c_erd += float(self.c_lp @ e_rd_lp)
        rhs_tau = eta * r_g + c_rc - eta * c_erd + (target - s.tau * s.kappa) / s.tau
        denom = float(self.q @ self.u2) + self.c_e_c + s.kappa / s.tau
        dtau = (rhs_tau - float(self.q @ u1)) / denom

        v = u1 + dtau * self.u2
        dy, dx_f = v[:self.m], v[self.m:]
        dz_blocks, dx_blocks = [], []
        for i, ((_, data), rd) in enumerate(zip(self.blocks, r_d)):
            dz = eta * rd - data.adjoint(dy) + data.cost * dtau
            dz = (dz + dz.T) / 2
            dz_blocks.append(dz)
            dx_blocks.append(r_c[i] - self.scale(i, dz))
        dz_lp = eta * r_d_lp - self.a_lp.T @ dy + self.c_lp * dtau
        dx_lp = r_c_lp - self.d_lp * dz_lp
        dkappa = (target - s.tau * s.kappa) / s.tau - (s.kappa / s.tau) * dtau
        return _Direction(dx_blocks, dz_blocks, dx_lp, dz_lp, dx_f, dy, dtau, dkappa)


_CVXPY_STATUS = {
    "optimal": SdpStatus.OPTIMAL,
    "optimal_inaccurate": SdpStatus.NUMERICAL_TROUBLE,
    "infeasible": SdpStatus.INFEASIBLE,
    "infeasible_inaccurate": SdpStatus.INFEASIBLE,
    "unbounded": SdpStatus.UNBOUNDED,
    "unbounded_inaccurate": SdpStatus.UNBOUNDED,
    "user_limit": SdpStatus.ITERATION_LIMIT,
}


class CvxpyBackend:
    """Adapter to an external conic solver through cvxpy."""

    name = "cvxpy"

    def solve(self, problem: SdpProblem, options: SolverOptions) -> SdpSolution:
        try:
            import cvxpy as cp
        except ImportError as exc:
            raise SdpBackendUnavailable("cvxpy is not installed; use the 'ipm' backend.") from exc

        blocks = [cp.Variable((k, k), symmetric=True) for k in problem.psd_blocks]
        free = cp.Variable(problem.free_scalars) if problem.free_scalars else None
        # map upper-triangle storage onto column-major full vectors
        full_sizes = [k * k for k in problem.psd_blocks]
        full_offsets = np.concatenate([[0], np.cumsum(full_sizes)]).astype(int)
        n_full = int(full_offsets[-1]) + problem.free_scalars
        col_map: List[List[int]] = []
        for b, k in enumerate(problem.psd_blocks):
            iu, ju = np.triu_indices(k)
            for i, j in zip(iu, ju):
                cols = [int(full_offsets[b] + j * k + i)]
                if i != j:
                    cols.append(int(full_offsets[b] + i * k + j))
                col_map.append(cols)
        for s_index in range(problem.free_scalars):
            col_map.append([int(full_offsets[-1]) + s_index])

        def expand(functional: Dict[int, float]) -> Dict[int, float]:
            out: Dict[int, float] = {}
            for index, coef in functional.items():
                for col in col_map[index]:
                    out[col] = out.get(col, 0.0) + coef
            return out

        rows, cols, vals = [], [], []
        for r, eq in enumerate(problem.equalities):
            for col, coef in expand(eq.coefficients).items():
                rows.append(r)
                cols.append(col)
                vals.append(coef)
        a = sparse.csr_matrix((vals, (rows, cols)), shape=(len(problem.equalities), n_full))
        c = np.zeros(n_full)
        for col, coef in expand(problem.objective).items():
            c[col] += coef

        parts = [cp.reshape(x, (x.shape[0] * x.shape[1],), order="F") for x in blocks]
        if free is not None:
            parts.append(free)
        v = cp.hstack(parts) if parts else None
        constraints = [x >> 0 for x in blocks]
        if problem.equalities and v is not None:
            constraints.append(a @ v == problem.rhs_vector())
        cvx_problem = cp.Problem(cp.Maximize(c @ v), constraints)
        try:
            if options.cvxpy_solver:
                cvx_problem.solve(solver=options.cvxpy_solver)
            else:
                cvx_problem.solve()
            status = _CVXPY_STATUS.get(cvx_problem.status, SdpStatus.NUMERICAL_TROUBLE)
        except cp.SolverError as exc:
            logger.log_warning("External solver failed", {"error": str(exc)})
            status = SdpStatus.NUMERICAL_TROUBLE

        block_values = [
            np.asarray(x.value, dtype=float) if x.value is not None else np.zeros((k, k))
            for x, k in zip(blocks, problem.psd_blocks)
        ]
        scalars = (
            np.asarray(free.value, dtype=float).reshape(-1)
            if free is not None and free.value is not None
            else np.zeros(problem.free_scalars)
        )
        objective = problem.evaluate_functional(problem.objective, block_values, scalars)
        return SdpSolution(status, block_values, scalars, objective, backend=self.name)


_BACKENDS = {"ipm": InteriorPointBackend, "cvxpy": CvxpyBackend}


def solve(problem: SdpProblem, options: Optional[SolverOptions] = None) -> SdpSolution:
    """Solve with the configured backend; structural errors are raised before any iteration."""
    options = options or SolverOptions()
    problem.validate()
    backend = _BACKENDS[options.backend]()
    solution = backend.solve(problem, options)
    logger.log_solve(
        backend=backend.name,
        status=solution.status.value,
        iterations=solution.iterations,
        objective=solution.objective_value,
        blocks=len(problem.psd_blocks),
        equalities=len(problem.equalities),
    )
    return solution
