"""
Schema validation for every JSON file the toolkit reads.
Ensures shape, scene and certificate files conform before they reach the math.
"""

import math
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


VALID_PRIORS = {"symmetry", "star", "convex"}


class TermModel(BaseModel):
    exp: List[int]
    coef: float

    @field_validator("exp")
    @classmethod
    def validate_exp(cls, v):
        if any(a < 0 for a in v):
            raise ValueError("Exponents must be non-negative")
        return v

    @field_validator("coef")
    @classmethod
    def validate_coef(cls, v):
        if not math.isfinite(v):
            raise ValueError("Coefficients must be finite")
        return v


class PolynomialModel(BaseModel):
    dim: int = Field(gt=0)
    terms: List[TermModel] = []

    @model_validator(mode="after")
    def check_lengths(self):
        for term in self.terms:
            if len(term.exp) != self.dim:
                raise ValueError(f"Exponent {term.exp} does not have length {self.dim}")
        return self


class TransformModel(BaseModel):
    linear: List[List[float]]
    offset: List[float]
    rigid: bool = False

    @model_validator(mode="after")
    def check_square(self):
        n = len(self.offset)
        if n == 0 or len(self.linear) != n or any(len(row) != n for row in self.linear):
            raise ValueError(f"Linear part must be {n}x{n} to match the offset")
        return self


class BoxModel(BaseModel):
    lower: List[float]
    upper: List[float]

    @model_validator(mode="after")
    def check_bounds(self):
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("Box bounds must be non-empty and of equal length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("Box requires lower < upper on every axis")
        return self


class PriorModel(BaseModel):
    kind: str
    matrix: Optional[List[List[float]]] = None

    @field_validator("kind")
    @classmethod
    def validate_kind(cls, v):
        if v.lower() not in VALID_PRIORS:
            raise ValueError(f"Prior kind must be one of {sorted(VALID_PRIORS)}")
        return v.lower()


class LearnConfigModel(BaseModel):
    degree: int
    box: BoxModel
    radius: float = Field(gt=0)
    margin: float = Field(gt=0)
    priors: List[PriorModel] = []
    domain_radius: float = Field(gt=0)
    multiplier_degree: Optional[int] = None


class CertificateModel(BaseModel):
    gamma: Optional[float] = None
    verified: bool
    identity_residual: Optional[float] = None
    min_gram_eig: Optional[float] = None
    multipliers: Dict[str, PolynomialModel] = {}
    solver_status: str = ""


class ShapeFileModel(PolynomialModel):
    radius: float = Field(gt=0)
    config: Optional[LearnConfigModel] = None
    certificate: Optional[CertificateModel] = None


class ContainerModel(BaseModel):
    c: PolynomialModel
    F0: Optional[PolynomialModel] = None


class SceneObjectModel(BaseModel):
    label: str
    p: PolynomialModel
    F: Optional[PolynomialModel] = None
    transform: TransformModel


class SceneModel(BaseModel):
    dim: int = Field(gt=0)
    container: ContainerModel
    objects: List[SceneObjectModel] = Field(min_length=1)
    degree: int = Field(gt=0)
    gamma_cap: float = Field(default=1.0, gt=0)
    search_box: Optional[BoxModel] = None
    ground_truth: Optional[str] = None

    @field_validator("ground_truth")
    @classmethod
    def validate_ground_truth(cls, v):
        if v is not None and v not in {"correct", "incorrect"}:
            raise ValueError("ground_truth must be 'correct' or 'incorrect'")
        return v


def _validate(model, data: Dict[str, Any], kind: str):
    try:
        return model(**data)
    except Exception as e:
        raise ValueError(f"Invalid {kind} schema: {str(e)}")


def validate_polynomial(data: Dict[str, Any]) -> PolynomialModel:
    """Validate a polynomial JSON object."""
    return _validate(PolynomialModel, data, "polynomial")


def validate_shape(data: Dict[str, Any]) -> ShapeFileModel:
    """Validate a shape JSON file."""
    return _validate(ShapeFileModel, data, "shape")


def validate_scene(data: Dict[str, Any]) -> SceneModel:
    """Validate a scene JSON file."""
    return _validate(SceneModel, data, "scene")
