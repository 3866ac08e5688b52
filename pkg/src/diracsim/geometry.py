"""Geometry of the time-extended phase bundles.

The base space is Y = R x Q with coordinates (t, x), x of dimension n. On top
of it sit the extended cotangent bundle T*Y with coordinates (t, x, pt, p) and
the mixed bundle P = (R x TQ) x_Y T*Y with coordinates (t, x, v, pt, p). Here
`pt` is the scalar momentum conjugate to time and `p` the momentum conjugate
to x.

A constraint set holds m covector rows A(t, x, v) and offsets B(t, x, v), m < n,
defining the affine velocity constraint A(t,x,v) v + B(t,x,v) = 0 and the linear
variational constraint A dx + B dt = 0. From these the module builds the induced
Dirac structure on P: the distribution lifted to P, the presymplectic flat map,
the annihilator, and membership tests for candidate (tangent, cotangent) pairs.
All checks are numerical with explicit tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import null_space

__all__ = [
    "DegenerateConstraintError",
    "ExtendedPoint",
    "TangentY",
    "CotangentY",
    "PhasePoint",
    "PontryaginState",
    "TangentP",
    "CotangentP",
    "TangentTstarY",
    "CotangentTstarY",
    "ConstraintSet",
    "unconstrained",
    "pair_Y",
    "pair_P",
    "pair_TstarY",
    "variational_constraint_residual",
    "kinematic_constraint_residual",
    "annihilator_basis",
    "presymplectic_apply",
    "presymplectic_flat",
    "lift_annihilator",
    "dirac_pairing",
    "MembershipReport",
    "dirac_membership_P",
    "dirac_membership_TstarY",
    "distribution_basis",
    "random_dirac_element",
    "dirac_generators",
    "dirac_rank",
]

# Relative singular value threshold for all rank decisions in this module.
RANK_RTOL = 1e-10


class DegenerateConstraintError(RuntimeError):
    """Raised when the constraint rows A(t, x, v) are rank deficient."""


def _vec(a, n: int | None = None) -> np.ndarray:
    out = np.atleast_1d(np.asarray(a, dtype=float))
    if out.ndim != 1:
        raise ValueError(f"expected a 1-d array, got shape {out.shape}")
    if n is not None and out.shape[0] != n:
        raise ValueError(f"expected length {n}, got {out.shape[0]}")
    return out


@dataclass(frozen=True)
class ExtendedPoint:
    """Point (t, x) of the time-extended configuration space Y."""

    t: float
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "x", _vec(self.x))

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class TangentY:
    """Tangent vector (dt, dx) to Y."""

    dt: float
    dx: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "dx", _vec(self.dx))


@dataclass(frozen=True)
class CotangentY:
    """Covector (pt, p) on Y; pt pairs with dt, p with dx."""

    pt: float
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pt", float(self.pt))
        object.__setattr__(self, "p", _vec(self.p))


@dataclass(frozen=True)
class PhasePoint:
    """Point (t, x, pt, p) of the extended cotangent bundle T*Y."""

    t: float
    x: np.ndarray
    pt: float
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "x", _vec(self.x))
        object.__setattr__(self, "pt", float(self.pt))
        object.__setattr__(self, "p", _vec(self.p, self.x.shape[0]))

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class PontryaginState:
    """Point (t, x, v, pt, p) of the bundle P carrying velocity and momenta."""

    t: float
    x: np.ndarray
    v: np.ndarray
    pt: float
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "x", _vec(self.x))
        n = self.x.shape[0]
        object.__setattr__(self, "v", _vec(self.v, n))
        object.__setattr__(self, "pt", float(self.pt))
        object.__setattr__(self, "p", _vec(self.p, n))

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class TangentP:
    """Tangent vector (dt, dx, dv, dpt, dp) to the bundle P."""

    dt: float
    dx: np.ndarray
    dv: np.ndarray
    dpt: float
    dp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "dx", _vec(self.dx))
        n = self.dx.shape[0]
        object.__setattr__(self, "dv", _vec(self.dv, n))
        object.__setattr__(self, "dpt", float(self.dpt))
        object.__setattr__(self, "dp", _vec(self.dp, n))

    @property
    def n(self) -> int:
        return self.dx.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.dt], self.dx, self.dv, [self.dpt], self.dp))


@dataclass(frozen=True)
class CotangentP:
    """Covector (pi, alpha, beta, gamma, w) on the bundle P.

    pi pairs with dt, alpha with dx, beta with dv, gamma with dpt, w with dp.
    """

    pi: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: float
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi", float(self.pi))
        object.__setattr__(self, "alpha", _vec(self.alpha))
        n = self.alpha.shape[0]
        object.__setattr__(self, "beta", _vec(self.beta, n))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "w", _vec(self.w, n))

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            ([self.pi], self.alpha, self.beta, [self.gamma], self.w)
        )


@dataclass(frozen=True)
class TangentTstarY:
    """Tangent vector (dt, dx, dpt, dp) to T*Y."""

    dt: float
    dx: np.ndarray
    dpt: float
    dp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "dx", _vec(self.dx))
        object.__setattr__(self, "dpt", float(self.dpt))
        object.__setattr__(self, "dp", _vec(self.dp, self.dx.shape[0]))


@dataclass(frozen=True)
class CotangentTstarY:
    """Covector (pi, alpha, gamma, w) on T*Y.

    pi pairs with dt, alpha with dx, gamma with dpt, w with dp.
    """

    pi: float
    alpha: np.ndarray
    gamma: float
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi", float(self.pi))
        object.__setattr__(self, "alpha", _vec(self.alpha))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "w", _vec(self.w, self.alpha.shape[0]))


@dataclass(frozen=True)
class ConstraintSet:
    """Affine velocity constraints on Y given by rows A and offsets B.

    eval_A(t, x, w) returns an (m, n) array and eval_B(t, x, w) an (m,) array,
    where the third argument is the velocity (or, for momentum-side constraint
    sets, the momentum) the coefficients may depend on. The kinematic condition
    is A w + B = 0 and the variational one is A dx + B dt = 0.
    """

    n: int
    m: int
    eval_A: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    eval_B: Callable[[float, np.ndarray, np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("state dimension n must be at least 1")
        if not 0 <= self.m < self.n:
            raise ValueError(f"need 0 <= m < n, got m={self.m}, n={self.n}")

    def A(self, t: float, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        out = np.asarray(self.eval_A(t, x, w), dtype=float)
        out = out.reshape(self.m, self.n)
        return out

    def B(self, t: float, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        out = np.atleast_1d(np.asarray(self.eval_B(t, x, w), dtype=float))
        out = out.reshape(self.m)
        return out


def unconstrained(n: int) -> ConstraintSet:
    """Constraint set with no rows (free dynamics on an n-dimensional Q)."""

    return ConstraintSet(
        n=n,
        m=0,
        eval_A=lambda t, x, w: np.zeros((0, n)),
        eval_B=lambda t, x, w: np.zeros(0),
    )


def pair_Y(a: CotangentY, u: TangentY) -> float:
    """Canonical pairing of a covector and a tangent vector on Y."""

    return a.pt * u.dt + float(a.p @ u.dx)


def pair_P(a: CotangentP, u: TangentP) -> float:
    """Canonical pairing of a covector and a tangent vector on the bundle P."""

    return (
        a.pi * u.dt
        + float(a.alpha @ u.dx)
        + float(a.beta @ u.dv)
        + a.gamma * u.dpt
        + float(a.w @ u.dp)
    )


def pair_TstarY(a: CotangentTstarY, u: TangentTstarY) -> float:
    """Canonical pairing on T*Y."""

    return (
        a.pi * u.dt + float(a.alpha @ u.dx) + a.gamma * u.dpt + float(a.w @ u.dp)
    )


def variational_constraint_residual(
    constraints: ConstraintSet, t: float, x: np.ndarray, v: np.ndarray,
    dt: float, dx: np.ndarray,
) -> np.ndarray:
    """Residual A(t,x,v) dx + B(t,x,v) dt of the variational constraint.

    The coefficients are frozen at the state velocity v while (dt, dx) is the
    displacement being tested. Returns an (m,) array.
    """

    x = _vec(x, constraints.n)
    dx = _vec(dx, constraints.n)
    A = constraints.A(t, x, v)
    B = constraints.B(t, x, v)
    return A @ dx + B * float(dt)


def kinematic_constraint_residual(
    constraints: ConstraintSet, t: float, x: np.ndarray,
    tdot: float, xdot: np.ndarray,
) -> np.ndarray:
    """Residual A(t,x,xdot) xdot + B(t,x,xdot) tdot of the kinematic constraint.

    This is the variational residual evaluated along an actual velocity, with
    the coefficients depending on that same velocity.
    """

    x = _vec(x, constraints.n)
    xdot = _vec(xdot, constraints.n)
    A = constraints.A(t, x, xdot)
    B = constraints.B(t, x, xdot)
    return A @ xdot + B * float(tdot)


def _check_full_rank(A: np.ndarray, B: np.ndarray) -> None:
    # Rank decision on the combined rows [B | A]; a dependent combination of
    # rows means the annihilator loses a dimension and lstsq multipliers stop
    # being well defined.
    if A.shape[0] == 0:
        return
    M = np.hstack([B[:, None], A])
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0 or s[-1] <= RANK_RTOL * s[0]:
        raise DegenerateConstraintError(
            f"constraint rows are rank deficient: singular values {s}"
        )


def annihilator_basis(
    constraints: ConstraintSet, t: float, x: np.ndarray, v: np.ndarray
) -> list[CotangentY]:
    """Basis of the annihilator of the variational distribution on Y.

    The distribution at (t, x) consists of displacements (dt, dx) with
    A dx + B dt = 0, so its annihilator is spanned by the raw covector rows
    (pt, p) = (B_r, A_r). Rows are returned unnormalized, one per constraint.

    Raises DegenerateConstraintError when the rows are dependent.
    """

    x = _vec(x, constraints.n)
    A = constraints.A(t, x, v)
    B = constraints.B(t, x, v)
    _check_full_rank(A, B)
    return [CotangentY(pt=B[r], p=A[r].copy()) for r in range(constraints.m)]


def presymplectic_apply(u: TangentP, w: TangentP) -> float:
    """Canonical presymplectic 2-form on P applied to two tangent vectors.

    The form pairs dx with dp and dt with dpt; the dv directions are in its
    kernel.
    """

    return (
        float(u.dx @ w.dp)
        - float(w.dx @ u.dp)
        + u.dt * w.dpt
        - w.dt * u.dpt
    )


def presymplectic_flat(u: TangentP) -> CotangentP:
    """Covector Omega-flat(u), so that pair_P(flat(u), w) = Omega(u, w)."""

    n = u.n
    return CotangentP(
        pi=-u.dpt,
        alpha=-u.dp.copy(),
        beta=np.zeros(n),
        gamma=u.dt,
        w=u.dx.copy(),
    )


def lift_annihilator(row: CotangentY, n: int) -> CotangentP:
    """Pull an annihilator covector on Y back to the bundle P.

    Only the dt and dx slots are populated; the covector ignores the fiber
    directions (dv, dpt, dp).
    """

    return CotangentP(
        pi=row.pt,
        alpha=row.p.copy(),
        beta=np.zeros(n),
        gamma=0.0,
        w=np.zeros(n),
    )


def dirac_pairing(
    e1: tuple[TangentP, CotangentP], e2: tuple[TangentP, CotangentP]
) -> float:
    """Symmetrized pairing of two (tangent, cotangent) pairs on P.

    The pairing is <a2, u1> + <a1, u2>; it vanishes pairwise on any isotropic
    family, in particular on the Dirac structure itself.
    """

    u1, a1 = e1
    u2, a2 = e2
    return pair_P(a2, u1) + pair_P(a1, u2)


@dataclass(frozen=True)
class MembershipReport:
    """Outcome of a Dirac membership test.

    residuals maps condition names to their violation magnitudes, multiplier
    is the least squares estimate of the constraint multipliers, and violated
    lists the condition names exceeding the tolerance.
    """

    member: bool
    multiplier: np.ndarray
    residuals: dict[str, float]
    tol: float
    violated: tuple[str, ...] = field(default_factory=tuple)

    def worst(self) -> tuple[str, float]:
        name = max(self.residuals, key=lambda k: self.residuals[k])
        return name, self.residuals[name]


def _span_condition(
    M: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, float]:
    # Least squares multipliers for target = M lam; M has one column per
    # constraint row, so with m < n + 1 the system is overdetermined and the
    # residual measures distance from the span.
    if M.shape[1] == 0:
        return np.zeros(0), float(np.max(np.abs(target), initial=0.0))
    lam, *_ = np.linalg.lstsq(M, target, rcond=None)
    res = float(np.max(np.abs(M @ lam - target), initial=0.0))
    return lam, res


def dirac_membership_P(
    point: PontryaginState,
    constraints: ConstraintSet,
    u: TangentP,
    a: CotangentP,
    tol: float = 1e-9,
) -> MembershipReport:
    """Test whether (u, a) belongs to the induced Dirac structure on P.

    Membership at the given point requires, with A, B evaluated at
    (t, x, v) of the point:

    * velocity_matches_dx: w = dx
    * time_matches_dt:     gamma = dt
    * beta_vanishes:       beta = 0
    * variational_constraint: A dx + B dt = 0
    * momentum_in_annihilator_span: (dpt + pi, dp + alpha) = sum_r lam_r (B_r, A_r)

    The multiplier is estimated by least squares; each condition's violation is
    reported under the names above.
    """

    n = point.n
    if u.n != n or a.n != n or constraints.n != n:
        raise ValueError("dimension mismatch between point, element and constraints")
    A = constraints.A(point.t, point.x, point.v)
    B = constraints.B(point.t, point.x, point.v)
    _check_full_rank(A, B)

    residuals = {
        "velocity_matches_dx": float(np.max(np.abs(a.w - u.dx), initial=0.0)),
        "time_matches_dt": abs(a.gamma - u.dt),
        "beta_vanishes": float(np.max(np.abs(a.beta), initial=0.0)),
        "variational_constraint": float(
            np.max(np.abs(A @ u.dx + B * u.dt), initial=0.0)
        ),
    }
    M = np.vstack([B[None, :], A.T]) if constraints.m else np.zeros((n + 1, 0))
    target = np.concatenate(([u.dpt + a.pi], u.dp + a.alpha))
    lam, span_res = _span_condition(M, target)
    residuals["momentum_in_annihilator_span"] = span_res

    violated = tuple(k for k, r in residuals.items() if r > tol)
    return MembershipReport(
        member=not violated,
        multiplier=lam,
        residuals=residuals,
        tol=tol,
        violated=violated,
    )


def dirac_membership_TstarY(
    point: PhasePoint,
    constraints: ConstraintSet,
    u: TangentTstarY,
    a: CotangentTstarY,
    tol: float = 1e-9,
) -> MembershipReport:
    """Test whether (u, a) belongs to the induced Dirac structure on T*Y.

    The constraint set here must evaluate its coefficients as functions of
    (t, x, p), with the momentum as the third argument. Membership requires

    * velocity_matches_dx: w = dx
    * time_matches_dt:     gamma = dt
    * variational_constraint: A dx + B dt = 0
    * momentum_in_annihilator_span: (dpt + pi, dp + alpha) = sum_r lam_r (B_r, A_r)

    There is no beta condition on this bundle.
    """

    n = point.n
    if constraints.n != n:
        raise ValueError("dimension mismatch between point and constraints")
    A = constraints.A(point.t, point.x, point.p)
    B = constraints.B(point.t, point.x, point.p)
    _check_full_rank(A, B)

    residuals = {
        "velocity_matches_dx": float(np.max(np.abs(a.w - u.dx), initial=0.0)),
        "time_matches_dt": abs(a.gamma - u.dt),
        "variational_constraint": float(
            np.max(np.abs(A @ u.dx + B * u.dt), initial=0.0)
        ),
    }
    M = np.vstack([B[None, :], A.T]) if constraints.m else np.zeros((n + 1, 0))
    target = np.concatenate(([u.dpt + a.pi], u.dp + a.alpha))
    lam, span_res = _span_condition(M, target)
    residuals["momentum_in_annihilator_span"] = span_res

    violated = tuple(k for k, r in residuals.items() if r > tol)
    return MembershipReport(
        member=not violated,
        multiplier=lam,
        residuals=residuals,
        tol=tol,
        violated=violated,
    )


def distribution_basis(
    constraints: ConstraintSet, t: float, x: np.ndarray, v: np.ndarray
) -> list[TangentP]:
    """Basis of the lifted distribution on P at the given (t, x, v).

    The distribution constrains only (dt, dx) through A dx + B dt = 0; the
    (dv, dpt, dp) directions are free. Returns 3n + 2 - m vectors.
    """

    n = constraints.n
    x = _vec(x, n)
    A = constraints.A(t, x, v)
    B = constraints.B(t, x, v)
    _check_full_rank(A, B)

    if constraints.m:
        kernel = null_space(np.hstack([B[:, None], A]))
    else:
        kernel = np.eye(n + 1)
    out: list[TangentP] = []
    for j in range(kernel.shape[1]):
        col = kernel[:, j]
        out.append(
            TangentP(dt=col[0], dx=col[1:], dv=np.zeros(n), dpt=0.0, dp=np.zeros(n))
        )
    zero = np.zeros(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        out.append(TangentP(dt=0.0, dx=zero, dv=e, dpt=0.0, dp=zero))
    out.append(TangentP(dt=0.0, dx=zero, dv=zero, dpt=1.0, dp=zero))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        out.append(TangentP(dt=0.0, dx=zero, dv=zero, dpt=0.0, dp=e))
    return out


def random_dirac_element(
    point: PontryaginState,
    constraints: ConstraintSet,
    rng: np.random.Generator,
    scale: float = 1.0,
) -> tuple[TangentP, CotangentP]:
    """Draw a random element of the induced Dirac structure at the point.

    The tangent part is a random combination of the distribution basis and the
    cotangent part is Omega-flat of it plus a random combination of lifted
    annihilator rows, which parametrizes the whole fiber.
    """

    n = point.n
    basis = distribution_basis(constraints, point.t, point.x, point.v)
    coeffs = rng.normal(scale=scale, size=len(basis))
    vec = sum(
        (c * b.as_vector() for c, b in zip(coeffs, basis)),
        start=np.zeros(3 * n + 2),
    )
    u = TangentP(
        dt=vec[0],
        dx=vec[1 : n + 1],
        dv=vec[n + 1 : 2 * n + 1],
        dpt=vec[2 * n + 1],
        dp=vec[2 * n + 2 :],
    )
    a_vec = presymplectic_flat(u).as_vector()
    rows = annihilator_basis(constraints, point.t, point.x, point.v)
    lams = rng.normal(scale=scale, size=len(rows))
    for lam, row in zip(lams, rows):
        a_vec = a_vec + lam * lift_annihilator(row, n).as_vector()
    a = CotangentP(
        pi=a_vec[0],
        alpha=a_vec[1 : n + 1],
        beta=a_vec[n + 1 : 2 * n + 1],
        gamma=a_vec[2 * n + 1],
        w=a_vec[2 * n + 2 :],
    )
    return u, a


def dirac_generators(
    point: PontryaginState, constraints: ConstraintSet
) -> np.ndarray:
    """Spanning set of the induced Dirac structure as stacked row vectors.

    Each row is the concatenation of a tangent part (3n + 2 coordinates) and a
    cotangent part (3n + 2 coordinates). The rows are (u, flat(u)) for u in the
    distribution basis together with (0, lifted annihilator row) for each
    constraint row, which together span the structure.
    """

    n = point.n
    basis = distribution_basis(constraints, point.t, point.x, point.v)
    rows = []
    for u in basis:
        rows.append(np.concatenate([u.as_vector(), presymplectic_flat(u).as_vector()]))
    for ann in annihilator_basis(constraints, point.t, point.x, point.v):
        rows.append(
            np.concatenate([np.zeros(3 * n + 2), lift_annihilator(ann, n).as_vector()])
        )
    return np.vstack(rows)


def dirac_rank(point: PontryaginState, constraints: ConstraintSet) -> int:
    """Numerical rank of the induced Dirac structure at the point.

    For a Dirac structure on a bundle of fiber dimension 3n + 2 the rank must
    equal 3n + 2 (maximal isotropy). Rank is counted by singular values above
    RANK_RTOL times the largest one.
    """

    G = dirac_generators(point, constraints)
    s = np.linalg.svd(G, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))
