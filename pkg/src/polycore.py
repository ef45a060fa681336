"""
Sparse multivariate polynomials and their exact coefficient algebra.

Polynomials are immutable maps from exponent tuples to float coefficients with no
stored zeros. Every ordering of monomials in the package (Gram indexing, file
formats, equality rows) goes through `monomial_sort_key`: graded lexicographic,
total degree first and then the exponent tuple ascending.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from types import MappingProxyType
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np


Monomial = Tuple[int, ...]
Scalar = Union[int, float]

RIGID_TOLERANCE = 1e-9
SINGULAR_TOLERANCE = 1e-12
_EVAL_CHUNK = 16384


class DimensionMismatchError(ValueError):
    pass


def total_degree(alpha: Monomial) -> int:
    return sum(alpha)


def monomial_sort_key(alpha: Monomial) -> Tuple[int, Monomial]:
    return total_degree(alpha), tuple(alpha)


@lru_cache(maxsize=256)
def monomial_basis(n: int, d: int) -> Tuple[Monomial, ...]:
    """All exponent vectors in n variables with total degree <= d, graded-lex ordered."""
    if n < 1:
        raise ValueError(f"Dimension must be positive, got {n}.")
    if d < 0:
        raise ValueError(f"Degree must be non-negative, got {d}.")
    monomials: List[Monomial] = []
    for degree in range(d + 1):
        for combo in combinations_with_replacement(range(n), degree):
            alpha = [0] * n
            for index in combo:
                alpha[index] += 1
            monomials.append(tuple(alpha))
    return tuple(sorted(monomials, key=monomial_sort_key))


def add_monomials(left: Monomial, right: Monomial) -> Monomial:
    return tuple(a + b for a, b in zip(left, right))


class Polynomial:
    """Immutable sparse polynomial in `dimension` variables."""

    __slots__ = ("dimension", "_terms")
    # numpy scalars on the left defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, dimension: int, terms: Optional[Mapping[Monomial, float]] = None):
        if dimension < 1:
            raise ValueError(f"Polynomial dimension must be positive, got {dimension}.")
        clean: Dict[Monomial, float] = {}
        for alpha, coef in (terms or {}).items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != dimension:
                raise DimensionMismatchError(
                    f"Exponent {alpha} has length {len(alpha)}, expected {dimension}."
                )
            if any(a < 0 for a in alpha):
                raise ValueError(f"Negative exponent in {alpha}.")
            value = float(coef)
            if value != 0.0:
                clean[alpha] = value
        object.__setattr__(self, "dimension", dimension)
        object.__setattr__(self, "_terms", clean)

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("Polynomial is immutable.")

    @classmethod
    def zero(cls, dimension: int) -> "Polynomial":
        return cls(dimension)

    @classmethod
    def constant(cls, dimension: int, value: Scalar) -> "Polynomial":
        return cls(dimension, {(0,) * dimension: float(value)})

    @classmethod
    def variable(cls, dimension: int, index: int) -> "Polynomial":
        if not 0 <= index < dimension:
            raise ValueError(f"Variable index {index} out of range for dimension {dimension}.")
        alpha = [0] * dimension
        alpha[index] = 1
        return cls(dimension, {tuple(alpha): 1.0})

    @classmethod
    def monomial(cls, alpha: Monomial, coef: float = 1.0) -> "Polynomial":
        return cls(len(alpha), {tuple(alpha): coef})

    @classmethod
    def from_terms(cls, dimension: int, terms: Iterable[Tuple[Monomial, float]]) -> "Polynomial":
        """Build from (exponent, coefficient) pairs, summing repeated exponents."""
        acc: Dict[Monomial, float] = {}
        for alpha, coef in terms:
            key = tuple(alpha)
            acc[key] = acc.get(key, 0.0) + float(coef)
        return cls(dimension, acc)

    @property
    def terms(self) -> Mapping[Monomial, float]:
        return MappingProxyType(self._terms)

    @property
    def degree(self) -> int:
        if not self._terms:
            return 0
        return max(total_degree(alpha) for alpha in self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def coefficient(self, alpha: Monomial) -> float:
        return self._terms.get(tuple(alpha), 0.0)

    def sorted_terms(self) -> List[Tuple[Monomial, float]]:
        return sorted(self._terms.items(), key=lambda item: monomial_sort_key(item[0]))

    def _coerce(self, other: Union["Polynomial", Scalar]) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.dimension != self.dimension:
                raise DimensionMismatchError(
                    f"Dimension mismatch: {self.dimension} vs {other.dimension}."
                )
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.dimension, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        acc = dict(self._terms)
        for alpha, coef in other._terms.items():
            acc[alpha] = acc.get(alpha, 0.0) + coef
        return Polynomial(self.dimension, acc)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.dimension, {alpha: -coef for alpha, coef in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return other + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            k = float(other)
            return Polynomial(self.dimension, {alpha: k * coef for alpha, coef in self._terms.items()})
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        acc: Dict[Monomial, float] = {}
        for a1, c1 in self._terms.items():
            for a2, c2 in other._terms.items():
                key = add_monomials(a1, a2)
                acc[key] = acc.get(key, 0.0) + c1 * c2
        return Polynomial(self.dimension, acc)

    __rmul__ = __mul__

    def __pow__(self, exponent: int) -> "Polynomial":
        if exponent < 0:
            raise ValueError("Negative powers are not polynomials.")
        result = Polynomial.constant(self.dimension, 1.0)
        base = self
        while exponent:
            if exponent & 1:
                result = result * base
            base = base * base
            exponent >>= 1
        return result

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.dimension == other.dimension and self._terms == other._terms

    def __hash__(self) -> int:
        return hash((self.dimension, frozenset(self._terms.items())))

    def __call__(self, x: Sequence[float]) -> float:
        return evaluate(self, x)

    def __repr__(self) -> str:
        if not self._terms:
            return f"Polynomial(dim={self.dimension}, 0)"
        parts = []
        for alpha, coef in self.sorted_terms():
            factors = [f"x{i + 1}" + (f"^{a}" if a > 1 else "") for i, a in enumerate(alpha) if a]
            parts.append(f"{coef:+.6g}" + ("*" + "*".join(factors) if factors else ""))
        return f"Polynomial(dim={self.dimension}, {' '.join(parts)})"


def _check_same(p: Polynomial, q: Polynomial) -> None:
    if p.dimension != q.dimension:
        raise DimensionMismatchError(f"Dimension mismatch: {p.dimension} vs {q.dimension}.")


def add(p: Polynomial, q: Polynomial) -> Polynomial:
    _check_same(p, q)
    return p + q


def subtract(p: Polynomial, q: Polynomial) -> Polynomial:
    _check_same(p, q)
    return p - q


def multiply(p: Polynomial, q: Polynomial) -> Polynomial:
    _check_same(p, q)
    return p * q


def scale(p: Polynomial, k: Scalar) -> Polynomial:
    return p * float(k)


def negate(p: Polynomial) -> Polynomial:
    return -p


def power(p: Polynomial, exponent: int) -> Polynomial:
    return p ** exponent


def norm_squared(dimension: int) -> Polynomial:
    """||x||^2 in `dimension` variables."""
    return Polynomial.from_terms(
        dimension,
        ((tuple(2 if j == i else 0 for j in range(dimension)), 1.0) for i in range(dimension)),
    )


def max_abs_coefficient(p: Polynomial) -> float:
    return max((abs(c) for c in p.terms.values()), default=0.0)


def evaluate(p: Polynomial, x: Sequence[float]) -> float:
    if len(x) != p.dimension:
        raise DimensionMismatchError(f"Point has length {len(x)}, polynomial dimension is {p.dimension}.")
    point = [float(v) for v in x]
    values = []
    for alpha, coef in p.terms.items():
        term = coef
        for xi, a in zip(point, alpha):
            if a:
                term *= xi ** a
        values.append(term)
    return math.fsum(values)


def evaluate_many(p: Polynomial, points: np.ndarray) -> np.ndarray:
    """Evaluate at every row of an (N, n) array."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != p.dimension:
        raise DimensionMismatchError(f"Points have {pts.shape[1]} columns, polynomial dimension is {p.dimension}.")
    if p.is_zero():
        return np.zeros(pts.shape[0])
    exps = np.array(list(p.terms.keys()), dtype=int)
    coefs = np.array(list(p.terms.values()), dtype=float)
    max_exp = int(exps.max())
    powers_range = np.arange(max_exp + 1)
    out = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], _EVAL_CHUNK):
        chunk = pts[start:start + _EVAL_CHUNK]
        vals = np.ones((chunk.shape[0], exps.shape[0]))
        for k in range(p.dimension):
            table = chunk[:, k:k + 1] ** powers_range
            vals *= table[:, exps[:, k]]
        out[start:start + _EVAL_CHUNK] = vals @ coefs
    return out


def derivative(p: Polynomial, index: int) -> Polynomial:
    if not 0 <= index < p.dimension:
        raise ValueError(f"Variable index {index} out of range for dimension {p.dimension}.")
    acc: Dict[Monomial, float] = {}
    for alpha, coef in p.terms.items():
        a = alpha[index]
        if a == 0:
            continue
        lowered = alpha[:index] + (a - 1,) + alpha[index + 1:]
        acc[lowered] = coef * a
    return Polynomial(p.dimension, acc)


def gradient(p: Polynomial) -> List[Polynomial]:
    return [derivative(p, i) for i in range(p.dimension)]


def hessian(p: Polynomial) -> List[List[Polynomial]]:
    """Second derivatives; entries (i, j) and (j, i) are the same object."""
    n = p.dimension
    grad = gradient(p)
    rows: List[List[Optional[Polynomial]]] = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            entry = derivative(grad[i], j)
            rows[i][j] = entry
            rows[j][i] = entry
    return rows  # type: ignore[return-value]


def lift(p: Polynomial, total_dimension: int, offset: int = 0) -> Polynomial:
    """Embed p into `total_dimension` variables, variable i becoming i + offset."""
    if offset < 0 or offset + p.dimension > total_dimension:
        raise DimensionMismatchError(
            f"Cannot place {p.dimension} variables at offset {offset} in dimension {total_dimension}."
        )
    pad_before = (0,) * offset
    pad_after = (0,) * (total_dimension - offset - p.dimension)
    return Polynomial(total_dimension, {pad_before + alpha + pad_after: c for alpha, c in p.terms.items()})


@dataclass(frozen=True)
class Box:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper) or not self.lower:
            raise DimensionMismatchError("Box bounds must be non-empty and of equal length.")
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        for lo, hi in zip(self.lower, self.upper):
            if not lo < hi:
                raise ValueError(f"Box requires lower < upper on every axis, got [{lo}, {hi}].")

    @classmethod
    def cube(cls, lower: float, upper: float, dimension: int) -> "Box":
        return cls((lower,) * dimension, (upper,) * dimension)

    @property
    def dimension(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return math.prod(hi - lo for lo, hi in zip(self.lower, self.upper))

    @property
    def center(self) -> Tuple[float, ...]:
        return tuple((lo + hi) / 2 for lo, hi in zip(self.lower, self.upper))

    def max_norm_squared(self) -> float:
        """Largest ||x||^2 over the box."""
        return sum(max(lo * lo, hi * hi) for lo, hi in zip(self.lower, self.upper))

    def inner_radius(self) -> float:
        """Radius of the largest origin-centred ball inside the box (0 if the origin is outside)."""
        return max(0.0, min(min(-lo, hi) for lo, hi in zip(self.lower, self.upper)))

    def contains_strictly(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.all((pts > np.array(self.lower)) & (pts < np.array(self.upper)), axis=1)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"lower": list(self.lower), "upper": list(self.upper)}


def integrate_box(p: Polynomial, box: Box) -> float:
    """Closed-form integral of p over an axis-aligned box."""
    if box.dimension != p.dimension:
        raise DimensionMismatchError(f"Box dimension {box.dimension} vs polynomial dimension {p.dimension}.")
    return math.fsum(coef * monomial_box_integral(alpha, box) for alpha, coef in p.terms.items())


def monomial_box_integral(alpha: Monomial, box: Box) -> float:
    value = 1.0
    for a, lo, hi in zip(alpha, box.lower, box.upper):
        value *= (hi ** (a + 1) - lo ** (a + 1)) / (a + 1)
    return value


@dataclass(frozen=True)
class AffineTransform:
    """
    Inverse placement map T^-1(x) = S (x - v).

    The forward map T(y) = S^-1 y + v places object coordinates y into the world.
    """

    linear: Tuple[Tuple[float, ...], ...]
    offset: Tuple[float, ...]
    rigid: bool = False

    def __post_init__(self):
        matrix = np.array(self.linear, dtype=float)
        n = len(self.offset)
        if matrix.shape != (n, n) or n == 0:
            raise DimensionMismatchError(f"Linear part {matrix.shape} does not match offset length {n}.")
        if abs(np.linalg.det(matrix)) <= SINGULAR_TOLERANCE:
            raise ValueError("Linear part of the transform is singular.")
        if self.rigid and np.max(np.abs(matrix.T @ matrix - np.eye(n))) > RIGID_TOLERANCE:
            raise ValueError("Transform flagged rigid but its linear part is not orthogonal.")
        object.__setattr__(self, "linear", tuple(tuple(float(v) for v in row) for row in matrix))
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))

    @property
    def dimension(self) -> int:
        return len(self.offset)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.linear)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.offset)

    @classmethod
    def identity(cls, dimension: int) -> "AffineTransform":
        return cls(tuple(map(tuple, np.eye(dimension))), (0.0,) * dimension, True)

    @classmethod
    def translation(cls, center: Sequence[float]) -> "AffineTransform":
        """Object placed with its origin at `center`: T^-1(x) = x - center."""
        n = len(center)
        return cls(tuple(map(tuple, np.eye(n))), tuple(center), True)

    @classmethod
    def linear_map(cls, matrix: Sequence[Sequence[float]]) -> "AffineTransform":
        a = np.array(matrix, dtype=float)
        orthogonal = bool(np.max(np.abs(a.T @ a - np.eye(a.shape[0]))) <= RIGID_TOLERANCE)
        return cls(tuple(map(tuple, a)), (0.0,) * a.shape[0], orthogonal)

    @classmethod
    def placement(
        cls,
        rotation: Optional[Sequence[Sequence[float]]],
        center: Sequence[float],
        scale: float = 1.0,
    ) -> "AffineTransform":
        """Rotate by R, enlarge by 1/scale, move to center: T^-1(x) = scale * R^T (x - center)."""
        n = len(center)
        r = np.eye(n) if rotation is None else np.array(rotation, dtype=float)
        linear = scale * r.T
        return cls(tuple(map(tuple, linear)), tuple(center), scale == 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """T^-1 applied to a point or to every row of an (N, n) array."""
        pts = np.asarray(points, dtype=float)
        return (pts - self.vector) @ self.matrix.T

    def forward(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.linalg.solve(self.matrix, pts.T).T + self.vector

    def inverse_norm(self) -> float:
        """Spectral norm of S^-1, the stretch factor of the forward map."""
        return float(np.linalg.norm(np.linalg.inv(self.matrix), 2))

    def to_dict(self) -> Dict[str, Any]:
        return {"linear": [list(row) for row in self.linear], "offset": list(self.offset), "rigid": self.rigid}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AffineTransform":
        return cls(tuple(map(tuple, data["linear"])), tuple(data["offset"]), bool(data.get("rigid", False)))


def rotation_2d(theta: float) -> np.ndarray:
    return np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])


def compose_transforms(first: AffineTransform, second: AffineTransform) -> AffineTransform:
    """
    The inverse map x -> first(second(x)), i.e. S1 (S2 (x - v2) - v1).

    compose_affine(compose_affine(p, first), second) == compose_affine(p, compose_transforms(first, second)).
    """
    if first.dimension != second.dimension:
        raise DimensionMismatchError("Transforms have different dimensions.")
    s1, s2 = first.matrix, second.matrix
    v = second.vector + np.linalg.solve(s2, first.vector)
    linear = s1 @ s2
    rigid = first.rigid and second.rigid
    return AffineTransform(tuple(map(tuple, linear)), tuple(v), rigid)


def compose_affine(p: Polynomial, t: AffineTransform) -> Polynomial:
    """q(x) = p(S (x - v)), expanded by Horner substitution one variable at a time."""
    if t.dimension != p.dimension:
        raise DimensionMismatchError(f"Transform dimension {t.dimension} vs polynomial dimension {p.dimension}.")
    n = p.dimension
    s = t.matrix
    shift = s @ t.vector
    forms = []
    for i in range(n):
        terms = {tuple(1 if k == j else 0 for k in range(n)): s[i, j] for j in range(n)}
        terms[(0,) * n] = -shift[i]
        forms.append(Polynomial(n, terms))
    return _horner_substitute(dict(p.terms), 0, forms, n)


def _horner_substitute(terms: Dict[Monomial, float], var: int, forms: List[Polynomial], n: int) -> Polynomial:
    if not terms:
        return Polynomial.zero(n)
    if var == n:
        return Polynomial.constant(n, sum(terms.values()))
    groups: Dict[int, Dict[Monomial, float]] = {}
    for alpha, coef in terms.items():
        groups.setdefault(alpha[var], {})[alpha] = coef
    result = Polynomial.zero(n)
    for power_ in range(max(groups), -1, -1):
        result = result * forms[var]
        if power_ in groups:
            result = result + _horner_substitute(groups[power_], var + 1, forms, n)
    return result


def polynomial_to_dict(p: Polynomial) -> Dict[str, Any]:
    return {
        "dim": p.dimension,
        "terms": [{"exp": list(alpha), "coef": coef} for alpha, coef in p.sorted_terms()],
    }


def polynomial_from_dict(data: Mapping[str, Any]) -> Polynomial:
    dimension = int(data["dim"])
    return Polynomial.from_terms(dimension, ((tuple(t["exp"]), float(t["coef"])) for t in data["terms"]))
