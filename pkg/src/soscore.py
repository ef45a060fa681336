"""
Sum-of-squares constraint systems compiled to block SDPs, and a posteriori
certificate verification.

Unknowns live inside `PolyExpr` values: polynomials whose coefficients are affine
functionals of the unknowns. Keys of those functionals:

    ("sos", name, a, b)     Gram entry of SOS unknown `name`, a <= b; an off-diagonal
                            coefficient multiplies Q_ab + Q_ba jointly
    ("coef", name, alpha)   coefficient of x^alpha in free polynomial `name`
    ("scalar", name)        free scalar
    None                    the known constant part
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.logger import logger
from src.polycore import (
    AffineTransform,
    Box,
    DimensionMismatchError,
    Monomial,
    Polynomial,
    add_monomials,
    compose_affine,
    max_abs_coefficient,
    monomial_basis,
    monomial_box_integral,
    monomial_sort_key,
    polynomial_to_dict,
    total_degree,
)
from src.sdp import SdpProblem, SdpSolution, min_eigenvalue, solve
from src.settings import SolverOptions, VerificationTolerances


SOS = "sos"
COEF = "coef"
SCALAR = "scalar"

VarKey = Tuple[Any, ...]
LinearForm = Dict[Optional[VarKey], float]


class SosStructureError(ValueError):
    pass


def _merge(target: LinearForm, form: Mapping[Optional[VarKey], float], factor: float = 1.0) -> None:
    for key, coef in form.items():
        target[key] = target.get(key, 0.0) + factor * coef


def _clean(terms: Dict[Monomial, LinearForm]) -> Dict[Monomial, LinearForm]:
    out: Dict[Monomial, LinearForm] = {}
    for alpha, form in terms.items():
        kept = {key: coef for key, coef in form.items() if coef != 0.0}
        if kept:
            out[alpha] = kept
    return out


class PolyExpr:
    """Polynomial with coefficients affine in the unknowns."""

    __slots__ = ("dimension", "terms")
    __array_ufunc__ = None

    def __init__(self, dimension: int, terms: Optional[Dict[Monomial, LinearForm]] = None):
        self.dimension = dimension
        self.terms = _clean(terms or {})

    @classmethod
    def zero(cls, dimension: int) -> "PolyExpr":
        return cls(dimension)

    @classmethod
    def known(cls, p: Polynomial) -> "PolyExpr":
        return cls(p.dimension, {alpha: {None: coef} for alpha, coef in p.terms.items()})

    @classmethod
    def from_form(cls, dimension: int, form: Mapping[Optional[VarKey], float]) -> "PolyExpr":
        """Degree-0 expression carrying a linear functional."""
        return cls(dimension, {(0,) * dimension: dict(form)})

    @property
    def degree(self) -> int:
        return max((total_degree(alpha) for alpha in self.terms), default=0)

    def unknowns(self) -> set:
        return {key for form in self.terms.values() for key in form if key is not None}

    def is_known(self) -> bool:
        return not self.unknowns()

    def known_part(self) -> Polynomial:
        return Polynomial(self.dimension, {alpha: form.get(None, 0.0) for alpha, form in self.terms.items()})

    def form(self, alpha: Monomial) -> LinearForm:
        return dict(self.terms.get(tuple(alpha), {}))

    def coefficient_scale(self) -> float:
        """Largest absolute coefficient appearing anywhere in the expression."""
        return max((abs(c) for form in self.terms.values() for c in form.values()), default=0.0)

    def _coerce(self, other) -> "PolyExpr":
        if isinstance(other, PolyExpr):
            expr = other
        elif isinstance(other, Polynomial):
            expr = PolyExpr.known(other)
        elif isinstance(other, (int, float, np.floating, np.integer)):
            expr = PolyExpr.known(Polynomial.constant(self.dimension, float(other)))
        else:
            return NotImplemented
        if expr.dimension != self.dimension:
            raise DimensionMismatchError(f"Dimension mismatch: {self.dimension} vs {expr.dimension}.")
        return expr

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        terms = {alpha: dict(form) for alpha, form in self.terms.items()}
        for alpha, form in other.terms.items():
            _merge(terms.setdefault(alpha, {}), form)
        return PolyExpr(self.dimension, terms)

    __radd__ = __add__

    def __neg__(self) -> "PolyExpr":
        return self.scaled(-1.0)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + other.scaled(-1.0)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return other + self.scaled(-1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scaled(float(other))
        if isinstance(other, Polynomial):
            return self.times_known(other)
        if isinstance(other, PolyExpr):
            if other.is_known():
                return self.times_known(other.known_part())
            if self.is_known():
                return other.times_known(self.known_part())
            raise SosStructureError("Product of two expressions that both contain unknowns is not linear.")
        return NotImplemented

    __rmul__ = __mul__

    def scaled(self, k: float) -> "PolyExpr":
        return PolyExpr(
            self.dimension,
            {alpha: {key: k * c for key, c in form.items()} for alpha, form in self.terms.items()},
        )

    def times_known(self, p: Polynomial) -> "PolyExpr":
        if p.dimension != self.dimension:
            raise DimensionMismatchError(f"Dimension mismatch: {self.dimension} vs {p.dimension}.")
        terms: Dict[Monomial, LinearForm] = {}
        for alpha, form in self.terms.items():
            for beta, c in p.terms.items():
                _merge(terms.setdefault(add_monomials(alpha, beta), {}), form, c)
        return PolyExpr(self.dimension, terms)

    def derivative(self, index: int) -> "PolyExpr":
        if not 0 <= index < self.dimension:
            raise ValueError(f"Variable index {index} out of range for dimension {self.dimension}.")
        terms: Dict[Monomial, LinearForm] = {}
        for alpha, form in self.terms.items():
            a = alpha[index]
            if a:
                lowered = alpha[:index] + (a - 1,) + alpha[index + 1:]
                _merge(terms.setdefault(lowered, {}), form, float(a))
        return PolyExpr(self.dimension, terms)

    def gradient(self) -> List["PolyExpr"]:
        return [self.derivative(i) for i in range(self.dimension)]

    def hessian(self) -> List[List["PolyExpr"]]:
        grad = self.gradient()
        n = self.dimension
        rows: List[List[Optional[PolyExpr]]] = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                rows[i][j] = rows[j][i] = grad[i].derivative(j)
        return rows  # type: ignore[return-value]

    def evaluate_at(self, point: Sequence[float]) -> LinearForm:
        if len(point) != self.dimension:
            raise DimensionMismatchError(f"Point has length {len(point)}, expression dimension is {self.dimension}.")
        out: LinearForm = {}
        for alpha, form in self.terms.items():
            _merge(out, form, math.prod(float(x) ** a for x, a in zip(point, alpha)))
        return out

    def evaluate_many(self, points: np.ndarray) -> List[LinearForm]:
        """One linear form per row of an (N, n) array, computed with dense monomial tables."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dimension:
            raise DimensionMismatchError(f"Points have {pts.shape[1]} columns, expression dimension is {self.dimension}.")
        monomials = list(self.terms)
        if not monomials:
            return [{} for _ in range(pts.shape[0])]
        keys = sorted({key for form in self.terms.values() for key in form}, key=repr)
        key_pos = {key: i for i, key in enumerate(keys)}
        table = np.zeros((len(monomials), len(keys)))
        for row, alpha in enumerate(monomials):
            for key, c in self.terms[alpha].items():
                table[row, key_pos[key]] = c
        exps = np.array(monomials, dtype=int)
        values = np.ones((pts.shape[0], len(monomials)))
        for k in range(self.dimension):
            values *= pts[:, k:k + 1] ** exps[:, k]
        combined = values @ table
        return [
            {keys[j]: float(row[j]) for j in np.flatnonzero(row)}
            for row in combined
        ]

    def integrate_box(self, box: Box) -> LinearForm:
        if box.dimension != self.dimension:
            raise DimensionMismatchError(f"Box dimension {box.dimension} vs expression dimension {self.dimension}.")
        out: LinearForm = {}
        for alpha, form in self.terms.items():
            _merge(out, form, monomial_box_integral(alpha, box))
        return out

    def compose_affine(self, t: AffineTransform) -> "PolyExpr":
        """Expression e(S (x - v)), one composed monomial per distinct exponent."""
        terms: Dict[Monomial, LinearForm] = {}
        for alpha, form in self.terms.items():
            image = compose_affine(Polynomial.monomial(alpha), t)
            for beta, c in image.terms.items():
                _merge(terms.setdefault(beta, {}), form, c)
        return PolyExpr(self.dimension, terms)

    def lift(self, total_dimension: int, offset: int = 0) -> "PolyExpr":
        if offset < 0 or offset + self.dimension > total_dimension:
            raise DimensionMismatchError(
                f"Cannot place {self.dimension} variables at offset {offset} in dimension {total_dimension}."
            )
        before = (0,) * offset
        after = (0,) * (total_dimension - offset - self.dimension)
        return PolyExpr(total_dimension, {before + alpha + after: dict(form) for alpha, form in self.terms.items()})

    def substitute(self, value_of: Callable[[VarKey], float]) -> Polynomial:
        """Known polynomial obtained by fixing every unknown."""
        acc: Dict[Monomial, float] = {}
        for alpha, form in self.terms.items():
            total = 0.0
            for key, coef in form.items():
                total += coef if key is None else coef * value_of(key)
            acc[alpha] = total
        return Polynomial(self.dimension, acc)

    def __repr__(self) -> str:
        return f"PolyExpr(dim={self.dimension}, degree={self.degree}, unknowns={len(self.unknowns())})"


ExprLike = Union[PolyExpr, Polynomial, float, int]


def as_expr(value: ExprLike, dimension: int) -> PolyExpr:
    if isinstance(value, PolyExpr):
        return value
    if isinstance(value, Polynomial):
        return PolyExpr.known(value)
    return PolyExpr.known(Polynomial.constant(dimension, float(value)))


def gram_expand(name: str, degree: int, dimension: int, basis: Optional[Sequence[Monomial]] = None) -> PolyExpr:
    """z(x)^T Q z(x) over z = monomial_basis(dimension, degree / 2), or over an explicit basis."""
    if degree < 0 or degree % 2:
        raise SosStructureError(f"SOS unknown '{name}' needs an even non-negative degree, got {degree}.")
    z = list(basis) if basis is not None else list(monomial_basis(dimension, degree // 2))
    terms: Dict[Monomial, LinearForm] = {}
    for a in range(len(z)):
        for b in range(a, len(z)):
            terms.setdefault(add_monomials(z[a], z[b]), {})[(SOS, name, a, b)] = 1.0
    return PolyExpr(dimension, terms)


@dataclass
class SosUnknown:
    name: str
    degree: int
    dimension: int
    basis: Tuple[Monomial, ...]


@dataclass
class FreePolynomialUnknown:
    name: str
    degree: int
    dimension: int
    monomials: Tuple[Monomial, ...]


@dataclass
class Identity:
    label: str
    expr: PolyExpr


@dataclass
class SystemLayout:
    blocks: Dict[str, int]
    scalar_slots: Dict[VarKey, int]
    num_scalars: int


@dataclass
class Certificate:
    gamma: Optional[float]
    multipliers: Dict[str, Polynomial]
    gram_matrices: Dict[str, np.ndarray]
    identity_residual: float
    min_gram_eig: float
    verified: bool
    solver_status: str = ""

    def to_dict(self) -> Dict[str, Any]:
        def finite(v):
            return v if v is not None and math.isfinite(v) else None

        return {
            "gamma": finite(self.gamma),
            "verified": self.verified,
            "identity_residual": finite(self.identity_residual),
            "min_gram_eig": finite(self.min_gram_eig),
            "multipliers": {name: polynomial_to_dict(p) for name, p in self.multipliers.items()},
            "solver_status": self.solver_status,
        }


@dataclass
class SosConstraintSystem:
    dimension: int
    sos_unknowns: Dict[str, SosUnknown] = field(default_factory=dict)
    free_polynomials: Dict[str, FreePolynomialUnknown] = field(default_factory=dict)
    scalars: List[str] = field(default_factory=list)
    identities: List[Identity] = field(default_factory=list)
    objective: LinearForm = field(default_factory=dict)
    gamma_name: Optional[str] = None

    def _claim(self, name: str) -> None:
        if name in self.sos_unknowns or name in self.free_polynomials or name in self.scalars:
            raise SosStructureError(f"Unknown '{name}' is already declared.")

    def declare_sos(
        self,
        name: str,
        degree: int,
        dimension: Optional[int] = None,
        basis: Optional[Sequence[Monomial]] = None,
    ) -> PolyExpr:
        self._claim(name)
        n = dimension or self.dimension
        expr = gram_expand(name, degree, n, basis)
        z = tuple(basis) if basis is not None else monomial_basis(n, degree // 2)
        self.sos_unknowns[name] = SosUnknown(name, degree, n, z)
        return expr

    def declare_free_polynomial(self, name: str, degree: int, dimension: Optional[int] = None) -> PolyExpr:
        self._claim(name)
        if degree < 0:
            raise SosStructureError(f"Free polynomial '{name}' needs a non-negative degree.")
        n = dimension or self.dimension
        monomials = monomial_basis(n, degree)
        self.free_polynomials[name] = FreePolynomialUnknown(name, degree, n, monomials)
        return PolyExpr(n, {alpha: {(COEF, name, alpha): 1.0} for alpha in monomials})

    def declare_scalar(self, name: str, gamma: bool = False) -> PolyExpr:
        self._claim(name)
        self.scalars.append(name)
        if gamma:
            self.gamma_name = name
        return PolyExpr.from_form(self.dimension, {(SCALAR, name): 1.0})

    def add_identity(self, lhs: ExprLike, rhs: ExprLike, label: Optional[str] = None) -> int:
        """Equate lhs and rhs coefficient-wise; returns the number of equalities this adds."""
        dimension = next(
            (side.dimension for side in (lhs, rhs) if isinstance(side, (PolyExpr, Polynomial))), self.dimension
        )
        left = as_expr(lhs, dimension)
        right = as_expr(rhs, dimension)
        expr = left - right
        self._check_declared(expr)
        self.identities.append(Identity(label or f"identity{len(self.identities)}", expr))
        return len(monomial_basis(expr.dimension, expr.degree))

    def add_nonnegative(self, expr: ExprLike, name: str) -> PolyExpr:
        """expr = s with s a 1x1 slack for constants, an SOS of the next even degree otherwise."""
        e = as_expr(expr, self.dimension)
        degree = e.degree + (e.degree % 2)
        slack = self.declare_sos(name, degree, dimension=e.dimension)
        self.add_identity(e, slack, label=name)
        return slack

    def add_sos_matrix_constraint(self, h: Sequence[Sequence[ExprLike]], name: str) -> PolyExpr:
        """
        y^T H(x) y is SOS in (x, y), with the Gram basis restricted to monomials of
        degree exactly one in y.
        """
        n = len(h)
        if any(len(row) != n for row in h):
            raise SosStructureError("Matrix constraint needs a square matrix.")
        entries = [[as_expr(h[i][j], self.dimension) for j in range(n)] for i in range(n)]
        dim = entries[0][0].dimension
        for i in range(n):
            for j in range(i + 1, n):
                if not _same_expr(entries[i][j], entries[j][i]):
                    raise SosStructureError(f"Matrix constraint '{name}' is not symmetric at ({i}, {j}).")
        total = dim + n
        w = PolyExpr.zero(total)
        for i in range(n):
            for j in range(n):
                y = [0] * total
                y[dim + i] += 1
                y[dim + j] += 1
                w = w + entries[i][j].lift(total, 0).times_known(Polynomial.monomial(tuple(y)))
        half = (max(e.degree for row in entries for e in row) + 1) // 2
        basis = sorted(
            (beta + tuple(1 if k == i else 0 for k in range(n)) for i in range(n) for beta in monomial_basis(dim, half)),
            key=monomial_sort_key,
        )
        slack = self.declare_sos(name, 2 * half + 2, dimension=total, basis=basis)
        self.add_identity(w, slack, label=name)
        return slack

    def add_putinar_constraint(
        self, f: ExprLike, gs: Sequence[Polynomial], degree: int, name: str
    ) -> Dict[str, PolyExpr]:
        """f - sum_i s_i g_i = s_0 with s_i SOS of degree 2 floor((d - deg g_i) / 2) and s_0 of degree 2 floor(d / 2)."""
        expr = as_expr(f, self.dimension)
        multipliers: Dict[str, PolyExpr] = {}
        for i, g in enumerate(gs, start=1):
            m_degree = 2 * ((degree - g.degree) // 2)
            if m_degree < 0:
                logger.log_warning(
                    "Multiplier omitted: constraint degree exceeds certification degree",
                    {"constraint": name, "multiplier": i, "degree": degree, "g_degree": g.degree},
                )
                continue
            s_name = f"{name}.s{i}"
            multipliers[s_name] = self.declare_sos(s_name, m_degree, dimension=g.dimension)
            expr = expr - multipliers[s_name].times_known(g)
        s0_name = f"{name}.s0"
        multipliers[s0_name] = self.declare_sos(s0_name, 2 * (degree // 2), dimension=expr.dimension)
        self.add_identity(expr, multipliers[s0_name], label=name)
        return multipliers

    def maximize(self, functional: Union[PolyExpr, Mapping[Optional[VarKey], float]]) -> None:
        if isinstance(functional, PolyExpr):
            if functional.degree > 0:
                raise SosStructureError("Objective must be a scalar functional, got a non-constant expression.")
            form = functional.form((0,) * functional.dimension)
        else:
            form = dict(functional)
        form.pop(None, None)
        self._check_declared(PolyExpr.from_form(self.dimension, form))
        self.objective = form

    def _check_declared(self, expr: PolyExpr) -> None:
        for key in expr.unknowns():
            kind, name = key[0], key[1]
            known = (
                (kind == SOS and name in self.sos_unknowns)
                or (kind == COEF and name in self.free_polynomials)
                or (kind == SCALAR and name in self.scalars)
            )
            if not known:
                raise SosStructureError(f"Expression references undeclared unknown {key!r}.")

    def layout(self) -> SystemLayout:
        blocks = {name: i for i, name in enumerate(self.sos_unknowns)}
        slots: Dict[VarKey, int] = {}
        for unknown in self.free_polynomials.values():
            for alpha in unknown.monomials:
                slots[(COEF, unknown.name, alpha)] = len(slots)
        for name in self.scalars:
            slots[(SCALAR, name)] = len(slots)
        return SystemLayout(blocks, slots, len(slots))

    def assignment(self, solution: SdpSolution) -> Callable[[VarKey], float]:
        layout = self.layout()
        grams = [_symmetrize(q) for q in solution.block_values]

        def value_of(key: VarKey) -> float:
            if key[0] == SOS:
                q = grams[layout.blocks[key[1]]]
                a, b = key[2], key[3]
                return float(q[a, a]) if a == b else float(q[a, b] + q[b, a])
            return float(solution.scalar_values[layout.scalar_slots[key]])

        return value_of


def _same_expr(left: PolyExpr, right: PolyExpr, tol: float = 1e-12) -> bool:
    diff = left - right
    return diff.coefficient_scale() <= tol * max(1.0, left.coefficient_scale())


def _symmetrize(q: np.ndarray) -> np.ndarray:
    m = np.atleast_2d(np.asarray(q, dtype=float))
    return (m + m.T) / 2


def gram_polynomial(basis: Sequence[Monomial], q: np.ndarray) -> Polynomial:
    """s(x) = z(x)^T Q z(x)."""
    q = _symmetrize(q)
    dimension = len(basis[0])
    return Polynomial.from_terms(
        dimension,
        ((add_monomials(basis[a], basis[b]), q[a, b]) for a in range(len(basis)) for b in range(len(basis))),
    )


def compile(system: SosConstraintSystem) -> SdpProblem:
    layout = system.layout()
    problem = SdpProblem(
        psd_blocks=[len(u.basis) for u in system.sos_unknowns.values()],
        free_scalars=layout.num_scalars,
    )

    def index_of(key: VarKey) -> int:
        if key[0] == SOS:
            return problem.entry_index(layout.blocks[key[1]], key[2], key[3])
        return problem.scalar_index(layout.scalar_slots[key])

    for identity in system.identities:
        expr = identity.expr
        for alpha in monomial_basis(expr.dimension, expr.degree):
            form = expr.terms.get(alpha, {})
            coefficients: Dict[int, float] = {}
            for key, coef in form.items():
                if key is not None:
                    idx = index_of(key)
                    coefficients[idx] = coefficients.get(idx, 0.0) + coef
            problem.add_equality(coefficients, -form.get(None, 0.0))
    problem.objective = {index_of(key): coef for key, coef in system.objective.items() if key is not None}
    return problem


def solve_system(system: SosConstraintSystem, options: Optional[SolverOptions] = None) -> SdpSolution:
    return solve(compile(system), options or SolverOptions())


def verify_certificate(
    system: SosConstraintSystem,
    solution: SdpSolution,
    tolerances: Optional[VerificationTolerances] = None,
) -> Certificate:
    """
    Re-check a solver answer with exact polynomial arithmetic.

    identity_residual is the largest coefficient mismatch over all identities, each
    divided by max(1, largest coefficient of that identity's data).
    """
    tol = tolerances or VerificationTolerances()
    layout = system.layout()
    unknowns = list(system.sos_unknowns.values())
    if len(solution.block_values) != len(unknowns):
        raise SosStructureError(
            f"Solution has {len(solution.block_values)} blocks, system declares {len(unknowns)} SOS unknowns."
        )
    for unknown, q in zip(unknowns, solution.block_values):
        size = len(unknown.basis)
        if np.shape(np.atleast_2d(q)) != (size, size):
            raise SosStructureError(f"Gram block '{unknown.name}' has shape {np.shape(q)}, expected {(size, size)}.")
    if np.size(solution.scalar_values) != layout.num_scalars:
        raise SosStructureError(
            f"Solution has {np.size(solution.scalar_values)} scalars, system declares {layout.num_scalars}."
        )

    value_of = system.assignment(solution)
    grams = {u.name: _symmetrize(q) for u, q in zip(unknowns, solution.block_values)}
    multipliers: Dict[str, Polynomial] = {u.name: gram_polynomial(u.basis, grams[u.name]) for u in unknowns}
    for poly in system.free_polynomials.values():
        multipliers[poly.name] = Polynomial(
            poly.dimension, {alpha: value_of((COEF, poly.name, alpha)) for alpha in poly.monomials}
        )

    residual = 0.0
    for identity in system.identities:
        mismatch = max_abs_coefficient(identity.expr.substitute(value_of))
        residual = max(residual, mismatch / max(1.0, identity.expr.coefficient_scale()))

    min_eig = min((min_eigenvalue(q) for q in grams.values()), default=math.inf)
    gamma = value_of((SCALAR, system.gamma_name)) if system.gamma_name else None
    verified = residual <= tol.tol_res and min_eig >= -tol.tol_psd
    if gamma is not None:
        verified = verified and gamma - tol.margin_safety > 0
    if not math.isfinite(residual):
        verified = False
    return Certificate(
        gamma=gamma,
        multipliers=multipliers,
        gram_matrices=grams,
        identity_residual=residual,
        min_gram_eig=min_eig,
        verified=bool(verified),
        solver_status=solution.status.value,
    )
