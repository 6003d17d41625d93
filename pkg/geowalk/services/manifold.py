"""
Manifold Service - kernels for the three constant-curvature spaces
Euclidean space, the Lorentz hyperboloid (c < 0) and the sphere (c > 0), plus the
Poincare-ball maps at the origin used by the hyperbolic expert.

All kernels broadcast over leading dimensions; the last dimension is the ambient
coordinate axis. Curved points live in d+1 ambient coordinates, tangent-chart
vectors at the origin in d.
"""

import enum
import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch

from geowalk.core.errors import (
    DimensionError,
    InvalidSpecError,
    InvalidTangentError,
    OutOfDomainError,
    UndefinedLogarithmError,
)

TensorLike = Union[torch.Tensor, Sequence[float], float]

# Clamping safety
MIN_NORM_SQ = 1e-30
SERIES_CUTOFF = 1e-6
# largest k|h| the hyperboloid origin chart maps; longer chart vectors are rescaled to it
MAX_CHART_ANGLE = 15.0
# Tolerances
POINT_TOL = 1e-9
TANGENT_TOL = 1e-6
ANTIPODAL_TOL = 1e-9
# Ball safety border for exp0 outputs and expert inputs
BALL_EPS = 1e-5
BALL_BOUNDARY_TOL = 1e-12


class ManifoldKind(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    HYPERBOLIC = "hyperbolic"
    SPHERICAL = "spherical"


@dataclass(frozen=True)
class ManifoldSpec:
    """Which geometry and its curvature; the sign of c must match the kind"""

    kind: ManifoldKind
    curvature: float = 0.0

    def __post_init__(self):
        try:
            kind = ManifoldKind(self.kind)
        except ValueError:
            raise InvalidSpecError(f"unknown manifold kind: {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "curvature", float(self.curvature))
        c = self.curvature
        if not math.isfinite(c):
            raise InvalidSpecError(f"curvature must be finite, got {c}")
        if kind is ManifoldKind.EUCLIDEAN and c != 0.0:
            raise InvalidSpecError(f"euclidean spec requires curvature 0, got {c}")
        if kind is ManifoldKind.HYPERBOLIC and not c < 0.0:
            raise InvalidSpecError(f"hyperbolic spec requires curvature < 0, got {c}")
        if kind is ManifoldKind.SPHERICAL and not c > 0.0:
            raise InvalidSpecError(f"spherical spec requires curvature > 0, got {c}")

    @classmethod
    def euclidean(cls) -> "ManifoldSpec":
        return cls(ManifoldKind.EUCLIDEAN, 0.0)

    @classmethod
    def hyperbolic(cls, curvature: float = -1.0) -> "ManifoldSpec":
        return cls(ManifoldKind.HYPERBOLIC, curvature)

    @classmethod
    def spherical(cls, curvature: float = 1.0) -> "ManifoldSpec":
        return cls(ManifoldKind.SPHERICAL, curvature)

    @property
    def is_curved(self) -> bool:
        return self.kind is not ManifoldKind.EUCLIDEAN

    def ambient_dim(self, dim: int) -> int:
        return dim + 1 if self.is_curved else dim

    def __str__(self):
        return f"{self.kind.value}(c={self.curvature!r})"


# NUMERICAL HELPERS ############################################################


def _as_tensor(x: TensorLike, like: torch.Tensor = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    return sq.clamp_min(MIN_NORM_SQ).sqrt()


def _sinc(u):
    return torch.where(u < SERIES_CUTOFF, 1 - u * u / 6, torch.sin(u) / u)


def _sinhc(u):
    return torch.where(u < SERIES_CUTOFF, 1 + u * u / 6, torch.sinh(u) / u)


def _tanhc(u):
    return torch.where(u < SERIES_CUTOFF, 1 - u * u / 3, torch.tanh(u) / u)


def _artanhc(u):
    return torch.where(u < SERIES_CUTOFF, 1 + u * u / 3, torch.atanh(u) / u)


def _asinhc(u):
    return torch.where(u < SERIES_CUTOFF, 1 - u * u / 6, torch.asinh(u) / u)


def _dot(x, y):
    return (x * y).sum(dim=-1)


def _check_same_width(x: torch.Tensor, y: torch.Tensor, minimum: int = 1):
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    if x.shape[-1] < minimum:
        raise DimensionError(f"vectors need at least {minimum} coordinates, got {x.shape[-1]}")


def lorentz_inner(x: TensorLike, y: TensorLike) -> torch.Tensor:
    """<x,y>_L = -x_1 y_1 + sum_{j>=2} x_j y_j"""
    x = _as_tensor(x)
    y = _as_tensor(y, like=x)
    _check_same_width(x, y, minimum=2)
    return -x[..., 0] * y[..., 0] + _dot(x[..., 1:], y[..., 1:])


# MANIFOLDS ####################################################################


class Manifold:
    """Batched kernels for one ManifoldSpec"""

    def __init__(self, spec: ManifoldSpec):
        self.spec = spec
        self.c = spec.curvature

    def origin(self, dim: int, dtype=torch.float64) -> torch.Tensor:
        raise NotImplementedError

    def inner(self, x, y):
        return _dot(x, y)

    def norm(self, v):
        """Metric norm of tangent vectors"""
        return _safe_norm(self.inner(v, v).clamp_min(0))

    def proj_tangent(self, p, w):
        return w

    def expmap(self, p, v):
        raise NotImplementedError

    def logmap(self, p, x, check: bool = True):
        raise NotImplementedError

    def dist(self, x, y):
        raise NotImplementedError

    def expmap0_chart(self, h):
        """Tangent-chart coordinates at the origin (width d) -> ambient point"""
        raise NotImplementedError

    def logmap0_chart(self, x):
        """Ambient point -> tangent-chart coordinates at the origin (width d)"""
        raise NotImplementedError

    def point_residual(self, x):
        return torch.zeros(x.shape[:-1], dtype=x.dtype)

    def tangent_residual(self, p, v):
        return torch.zeros(v.shape[:-1], dtype=v.dtype)


class EuclideanManifold(Manifold):
    def origin(self, dim, dtype=torch.float64):
        return torch.zeros(dim, dtype=dtype)

    def expmap(self, p, v):
        return p + v

    def logmap(self, p, x, check=True):
        return x - p

    def dist(self, x, y):
        return torch.linalg.vector_norm(x - y, dim=-1)

    def norm(self, v):
        return torch.linalg.vector_norm(v, dim=-1)

    def expmap0_chart(self, h):
        return h

    def logmap0_chart(self, x):
        return x


class LorentzManifold(Manifold):
    """Upper sheet of <x,x>_L = 1/c, c < 0"""

    def __init__(self, spec):
        super().__init__(spec)
        self.k = math.sqrt(-self.c)

    def origin(self, dim, dtype=torch.float64):
        o = torch.zeros(dim + 1, dtype=dtype)
        o[0] = 1.0 / self.k
        return o

    def inner(self, x, y):
        return -x[..., 0] * y[..., 0] + _dot(x[..., 1:], y[..., 1:])

    def proj_tangent(self, p, w):
        return w - (self.c * self.inner(p, w)).unsqueeze(-1) * p

    def expmap(self, p, v):
        theta = (self.k * self.norm(v)).unsqueeze(-1)
        return torch.cosh(theta) * p + _sinhc(theta) * v

    def logmap(self, p, x, check=True):
        a = (self.c * self.inner(p, x)).unsqueeze(-1)
        u = x - a * p
        z = (self.k * self.norm(u)).unsqueeze(-1)
        return _asinhc(z) * u

    def dist(self, x, y):
        diff = x - y
        q = self.inner(diff, diff).clamp_min(0)
        return 2.0 * torch.asinh(self.k * q.sqrt() / 2.0) / self.k

    def expmap0_chart(self, h):
        n = _safe_norm(_dot(h, h)).unsqueeze(-1)
        scale = (MAX_CHART_ANGLE / (self.k * n)).clamp_max(1.0)
        h = h * scale
        theta = self.k * n * scale
        return torch.cat([torch.cosh(theta) / self.k, _sinhc(theta) * h], dim=-1)

    def logmap0_chart(self, x):
        rest = x[..., 1:]
        z = (self.k * _safe_norm(_dot(rest, rest))).unsqueeze(-1)
        return _asinhc(z) * rest

    def point_residual(self, x):
        scale = 1.0 + (-self.c) * _dot(x, x)
        return (self.c * self.inner(x, x) - 1.0).abs() / scale

    def tangent_residual(self, p, v):
        scale = 1.0 + torch.linalg.vector_norm(p, dim=-1) * torch.linalg.vector_norm(v, dim=-1)
        return self.inner(p, v).abs() / scale


class SphereManifold(Manifold):
    """Sphere <x,x> = 1/c, c > 0"""

    def __init__(self, spec):
        super().__init__(spec)
        self.k = math.sqrt(self.c)

    def origin(self, dim, dtype=torch.float64):
        o = torch.zeros(dim + 1, dtype=dtype)
        o[0] = 1.0 / self.k
        return o

    def proj_tangent(self, p, w):
        return w - (self.c * self.inner(p, w)).unsqueeze(-1) * p

    def norm(self, v):
        return _safe_norm(_dot(v, v))

    def expmap(self, p, v):
        theta = (self.k * self.norm(v)).unsqueeze(-1)
        return torch.cos(theta) * p + _sinc(theta) * v

    def logmap(self, p, x, check=True):
        if check:
            antipodal = self.dist(p, x) >= math.pi / self.k - ANTIPODAL_TOL
            if bool(antipodal.any()):
                raise UndefinedLogarithmError(
                    "logarithm undefined for antipodal points on the sphere (direction is not unique)"
                )
        a = (self.c * self.inner(p, x)).unsqueeze(-1)
        u = x - a * p
        z = (self.k * self.norm(u)).unsqueeze(-1)
        return torch.atan2(z, a) / z * u

    def dist(self, x, y):
        chord = torch.linalg.vector_norm(x - y, dim=-1)
        across = torch.linalg.vector_norm(x + y, dim=-1)
        return 2.0 * torch.atan2(chord, across) / self.k

    def expmap0_chart(self, h):
        n = _safe_norm(_dot(h, h)).unsqueeze(-1)
        theta = self.k * n
        return torch.cat([torch.cos(theta) / self.k, _sinc(theta) * h], dim=-1)

    def logmap0_chart(self, x):
        rest = x[..., 1:]
        z = (self.k * _safe_norm(_dot(rest, rest))).unsqueeze(-1)
        a = self.k * x[..., :1]
        return torch.atan2(z, a) / z * rest

    def point_residual(self, x):
        return (self.c * _dot(x, x) - 1.0).abs()

    def tangent_residual(self, p, v):
        scale = 1.0 + torch.linalg.vector_norm(p, dim=-1) * torch.linalg.vector_norm(v, dim=-1)
        return _dot(p, v).abs() / scale


_MANIFOLDS = {
    ManifoldKind.EUCLIDEAN: EuclideanManifold,
    ManifoldKind.HYPERBOLIC: LorentzManifold,
    ManifoldKind.SPHERICAL: SphereManifold,
}


def get_manifold(spec: ManifoldSpec) -> Manifold:
    return _MANIFOLDS[spec.kind](spec)


# TYPED POINT API ##############################################################


@dataclass(frozen=True)
class Point:
    """One point (or a batch of points along leading dims) on spec's manifold"""

    coords: torch.Tensor
    spec: ManifoldSpec


@dataclass(frozen=True)
class Tangent:
    base: Point
    vec: torch.Tensor


def check_point(coords: torch.Tensor, spec: ManifoldSpec, tol: float = POINT_TOL) -> torch.Tensor:
    """Largest violation of the on-manifold constraint over the batch"""
    m = get_manifold(spec)
    residual = m.point_residual(coords)
    worst = residual.max() if residual.numel() else torch.zeros((), dtype=coords.dtype)
    if spec.kind is ManifoldKind.HYPERBOLIC and bool((coords[..., 0] <= 0).any()):
        return torch.full((), float("inf"), dtype=coords.dtype)
    return worst


def check_tangent(p: Point, v: torch.Tensor) -> torch.Tensor:
    """Largest violation of the tangency constraint at p over the batch"""
    residual = get_manifold(p.spec).tangent_residual(p.coords, v)
    return residual.max() if residual.numel() else torch.zeros((), dtype=v.dtype)


def as_point(coords: TensorLike, spec: ManifoldSpec, tol: float = 1e-7) -> Point:
    """Wrap coordinates as a Point after checking the manifold constraint"""
    coords = _as_tensor(coords)
    worst = float(check_point(coords, spec))
    if worst > tol:
        raise OutOfDomainError(f"coordinates are not on {spec} (residual {worst:.3e})")
    return Point(coords, spec)


def origin(spec: ManifoldSpec, dim: int, dtype=torch.float64) -> Point:
    if not isinstance(spec, ManifoldSpec):
        raise InvalidSpecError(f"expected a ManifoldSpec, got {type(spec).__name__}")
    if dim < 1:
        raise DimensionError(f"origin dimension must be >= 1, got {dim}")
    return Point(get_manifold(spec).origin(dim, dtype=dtype), spec)


def project_to_tangent(p: Point, w: TensorLike) -> Tangent:
    w = _as_tensor(w, like=p.coords)
    _check_same_width(p.coords, w)
    return Tangent(p, get_manifold(p.spec).proj_tangent(p.coords, w))


def exp_map(p: Point, v: Union[Tangent, TensorLike]) -> Point:
    if isinstance(v, Tangent):
        if v.base.spec != p.spec:
            raise InvalidTangentError(f"tangent based on {v.base.spec}, point on {p.spec}")
        vec = v.vec
    else:
        vec = _as_tensor(v, like=p.coords)
    _check_same_width(p.coords, vec)
    m = get_manifold(p.spec)
    violation = float(check_tangent(p, vec))
    if violation > TANGENT_TOL:
        raise InvalidTangentError(f"vector is not tangent at its base point (residual {violation:.3e})")
    if not bool(vec.any()):
        return Point(p.coords.clone(), p.spec)
    return Point(m.expmap(p.coords, vec), p.spec)


def log_map(p: Point, x: Point) -> Tangent:
    if p.spec != x.spec:
        raise InvalidSpecError(f"points live on different manifolds: {p.spec} vs {x.spec}")
    _check_same_width(p.coords, x.coords)
    return Tangent(p, get_manifold(p.spec).logmap(p.coords, x.coords))


def geodesic_distance(x: Point, y: Point) -> torch.Tensor:
    if x.spec != y.spec:
        raise InvalidSpecError(f"points live on different manifolds: {x.spec} vs {y.spec}")
    _check_same_width(x.coords, y.coords)
    return get_manifold(x.spec).dist(x.coords, y.coords)


def tangent_norm(v: Tangent) -> torch.Tensor:
    return get_manifold(v.base.spec).norm(v.vec)


def expmap0_chart(h: torch.Tensor, spec: ManifoldSpec) -> torch.Tensor:
    return get_manifold(spec).expmap0_chart(h)


def logmap0_chart(x: torch.Tensor, spec: ManifoldSpec) -> torch.Tensor:
    return get_manifold(spec).logmap0_chart(x)


# POINCARE BALL ################################################################


def _ball_scale(c: float) -> float:
    if not c < 0:
        raise InvalidSpecError(f"Poincare ball requires curvature < 0, got {c}")
    return math.sqrt(-c)


def _curvature_value(c) -> float:
    return float(c.detach()) if isinstance(c, torch.Tensor) else float(c)


def _ball_k(c):
    """sqrt(|c|) as a tensor when c is learnable, else as a float"""
    if isinstance(c, torch.Tensor):
        _ball_scale(_curvature_value(c))
        return (-c).sqrt()
    return _ball_scale(c)


def _check_in_ball(y: torch.Tensor, c, name: str):
    k = _ball_scale(_curvature_value(c))
    scaled = k * torch.linalg.vector_norm(y.detach(), dim=-1)
    if scaled.numel() and float(scaled.max()) >= 1.0 - BALL_BOUNDARY_TOL:
        raise OutOfDomainError(
            f"{name} lies outside or on the boundary of the Poincare ball of radius {1 / k:.6g}"
        )


def clamp_to_ball(x: torch.Tensor, c) -> torch.Tensor:
    """Rescale rows to norm <= (1 - BALL_EPS)/sqrt|c|, keeping direction"""
    k = _ball_k(c)
    max_norm = (1.0 - BALL_EPS) / k
    norm = _safe_norm(_dot(x, x)).unsqueeze(-1)
    return torch.where(norm > max_norm, x / norm * max_norm, x)


def poincare_exp0(v: TensorLike, c) -> torch.Tensor:
    v = _as_tensor(v)
    k = _ball_k(c)
    n = _safe_norm(_dot(v, v)).unsqueeze(-1)
    return clamp_to_ball(_tanhc(k * n) * v, c)


def poincare_log0(y: TensorLike, c, check: bool = True) -> torch.Tensor:
    y = _as_tensor(y)
    if check:
        _check_in_ball(y, c, "point")
    k = _ball_k(c)
    z = (k * _safe_norm(_dot(y, y))).clamp_max(1.0 - BALL_BOUNDARY_TOL).unsqueeze(-1)
    return _artanhc(z) * y


def mobius_add(x: TensorLike, y: TensorLike, c, check: bool = True) -> torch.Tensor:
    x = _as_tensor(x)
    y = _as_tensor(y, like=x)
    _check_same_width(x, y)
    if check:
        _check_in_ball(x, c, "left operand")
        _check_in_ball(y, c, "right operand")
    x2 = _dot(x, x).unsqueeze(-1)
    y2 = _dot(y, y).unsqueeze(-1)
    xy = _dot(x, y).unsqueeze(-1)
    num = (1 - 2 * c * xy - c * y2) * x + (1 + c * x2) * y
    denom = 1 - 2 * c * xy + c * c * x2 * y2
    return clamp_to_ball(num / denom.clamp_min(MIN_NORM_SQ), c)


def mobius_matvec(m: TensorLike, x: TensorLike, c, check: bool = True) -> torch.Tensor:
    """exp0(M log0(x)); M is (out, in), x is (..., in)"""
    x = _as_tensor(x)
    m = _as_tensor(m, like=x)
    if m.shape[-1] != x.shape[-1]:
        raise DimensionError(f"matrix expects width {m.shape[-1]}, got {x.shape[-1]}")
    return poincare_exp0(poincare_log0(x, c, check=check) @ m.transpose(-1, -2), c)
