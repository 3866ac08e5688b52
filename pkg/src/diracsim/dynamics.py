"""Residual stacks and the implicit midpoint integrator for the constrained
dynamics on the extended bundles.

Three equivalent local formulations are supported:

* "pontryagin": unknowns (x, v, p, pt) on the mixed bundle, momentum defined
  by the fiber derivative, velocity-side constraint coefficients.
* "lagrange-dirac": the same unknowns with momentum-side constraint
  coefficients evaluated at (t, x, p).
* "hamilton-dirac": unknowns (x, p, pt) on T*Y for a hyperregular
  Hamiltonian.

The integrator is a fixed-step implicit midpoint rule. Differential rows are
collocated at the step midpoint, the constraint row is enforced at the new
node, and the multiplier is a per-step algebraic unknown reported at the
midpoint. The nonlinear system is solved by a chord Newton iteration with a
finite-difference Jacobian that is reused across steps and refreshed when
convergence degrades.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .geometry import (
    ConstraintSet,
    PhasePoint,
    PontryaginState,
    TangentP,
    TangentTstarY,
)
from .lagrangian import (
    ExternalForce,
    TimeHamiltonian,
    TimeLagrangian,
    lagrangian_energy,
)

__all__ = [
    "NonSectionError",
    "StepFailureError",
    "SingularJacobianError",
    "DaeUnknowns",
    "pontryagin_dirac_residual",
    "lagrange_dirac_residual",
    "hamilton_dirac_residual",
    "initialize_covariant_momentum",
    "MultiplierEstimate",
    "recover_multipliers",
    "StepResult",
    "Trajectory",
    "ImplicitMidpointStepper",
    "solve_step",
    "InvariantSeries",
    "monitor_invariants",
]

FORMULATIONS = ("pontryagin", "lagrange-dirac", "hamilton-dirac")


class NonSectionError(ValueError):
    """Raised when a rate has dt != 1, so the curve is not a section over time."""


class StepFailureError(RuntimeError):
    """Raised when the Newton iteration for a step does not converge."""


class SingularJacobianError(RuntimeError):
    """Raised when the step Jacobian is numerically singular."""


def _check_section(dt: float) -> None:
    if abs(dt - 1.0) > 1e-12:
        raise NonSectionError(
            f"rate has dt = {dt!r}; trajectories must be sections over time (dt = 1)"
        )


@dataclass(frozen=True)
class DaeUnknowns:
    """Unknowns (x, v, p, pt, lam) of one implicit step, with flat packing."""

    x: np.ndarray
    v: np.ndarray
    p: np.ndarray
    pt: float
    lam: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.v, self.p, [self.pt], self.lam])

    @staticmethod
    def from_vector(vec: np.ndarray, n: int, m: int) -> "DaeUnknowns":
        vec = np.asarray(vec, dtype=float)
        return DaeUnknowns(
            x=vec[:n].copy(),
            v=vec[n : 2 * n].copy(),
            p=vec[2 * n : 3 * n].copy(),
            pt=float(vec[3 * n]),
            lam=vec[3 * n + 1 :].copy(),
        )


def _force_vec(f_ext: ExternalForce | None, t, x, v, n: int) -> np.ndarray:
    if f_ext is None:
        return np.zeros(n)
    return np.asarray(f_ext.value(t, x, v), dtype=float).reshape(n)


def pontryagin_dirac_residual(
    L: TimeLagrangian,
    constraints: ConstraintSet,
    state: PontryaginState,
    rate: TangentP,
    lam: np.ndarray,
    f_ext: ExternalForce | None = None,
) -> np.ndarray:
    """Instantaneous residual of the mixed-bundle equations of motion.

    Rows, in order: velocity match (xdot - v), fiber derivative (p - dL/dv),
    momentum balance (pdot - dL/dx - lam A - F_ext), kinematic constraint
    (A v + B), and the balance for the momentum conjugate to time
    (ptdot - dL/dt - lam B). Coefficients are velocity-side, evaluated at
    (t, x, v). Returns 3n + 1 + m entries; zero along exact solutions.
    """

    _check_section(rate.dt)
    t, x, v = state.t, state.x, state.v
    n = L.n
    lam = np.asarray(lam, dtype=float).reshape(constraints.m)
    A = constraints.A(t, x, v)
    B = constraints.B(t, x, v)
    r1 = rate.dx - v
    r2 = state.p - np.asarray(L.d_v(t, x, v), dtype=float).reshape(n)
    r3 = (
        rate.dp
        - np.asarray(L.d_x(t, x, v), dtype=float).reshape(n)
        - A.T @ lam
        - _force_vec(f_ext, t, x, v, n)
    )
    r4 = A @ v + B
    r5 = rate.dpt - float(L.d_t(t, x, v)) - float(B @ lam)
    return np.concatenate([r1, r2, r3, r4, [r5]])


def lagrange_dirac_residual(
    L: TimeLagrangian,
    momentum_constraints: ConstraintSet,
    state: PontryaginState,
    rate: TangentP,
    lam: np.ndarray,
) -> np.ndarray:
    """Instantaneous residual of the velocity-side equations with momentum-side
    constraint coefficients.

    momentum_constraints must evaluate its coefficients at (t, x, p). Rows, in
    order: velocity match, balance of the momentum conjugate to time, momentum
    balance, kinematic constraint on xdot, fiber derivative, and the base
    point condition pt + E_L = 0. Returns 3n + 2 + m entries.
    """

    _check_section(rate.dt)
    t, x, v, p = state.t, state.x, state.v, state.p
    n = L.n
    lam = np.asarray(lam, dtype=float).reshape(momentum_constraints.m)
    A = momentum_constraints.A(t, x, p)
    B = momentum_constraints.B(t, x, p)
    r1 = rate.dx - v
    r2 = rate.dpt - float(L.d_t(t, x, v)) - float(B @ lam)
    r3 = rate.dp - np.asarray(L.d_x(t, x, v), dtype=float).reshape(n) - A.T @ lam
    r4 = A @ rate.dx + B
    r5 = p - np.asarray(L.d_v(t, x, v), dtype=float).reshape(n)
    r6 = state.pt + lagrangian_energy(L, t, x, v)
    return np.concatenate([r1, [r2], r3, r4, r5, [r6]])


def hamilton_dirac_residual(
    H: TimeHamiltonian,
    momentum_constraints: ConstraintSet,
    z: PhasePoint,
    rate: TangentTstarY,
    lam: np.ndarray,
) -> np.ndarray:
    """Instantaneous residual of the phase-space equations on T*Y.

    Rows, in order: velocity match (xdot - dH/dp), balance of the momentum
    conjugate to time (ptdot + dH/dt - lam B), momentum balance
    (pdot + dH/dx - lam A), kinematic constraint (A dH/dp + B). Coefficients
    are evaluated at (t, x, p). Returns 2n + 1 + m entries.
    """

    _check_section(rate.dt)
    t, x, p = z.t, z.x, z.p
    n = H.n
    lam = np.asarray(lam, dtype=float).reshape(momentum_constraints.m)
    A = momentum_constraints.A(t, x, p)
    B = momentum_constraints.B(t, x, p)
    w = np.asarray(H.d_p(t, x, p), dtype=float).reshape(n)
    r1 = rate.dx - w
    r2 = rate.dpt + float(H.d_t(t, x, p)) - float(B @ lam)
    r3 = rate.dp + np.asarray(H.d_x(t, x, p), dtype=float).reshape(n) - A.T @ lam
    r4 = A @ w + B
    return np.concatenate([r1, [r2], r3, r4])


def initialize_covariant_momentum(
    L: TimeLagrangian, t: float, x: np.ndarray, v: np.ndarray
) -> float:
    """Natural initial value of the momentum conjugate to time.

    Returns -E_L(t, x, v). Together with p = dL/dv this makes the covariant
    energy vanish at the initial point, and it stays zero along solutions
    without external forcing.
    """

    return -lagrangian_energy(L, t, x, v)


@dataclass(frozen=True)
class MultiplierEstimate:
    """Least squares multiplier recovery and its orthogonal residual."""

    lam: np.ndarray
    residual: float


def recover_multipliers(
    L: TimeLagrangian,
    constraints: ConstraintSet,
    state: PontryaginState,
    rate: TangentP,
    f_ext: ExternalForce | None = None,
) -> MultiplierEstimate:
    """Recover constraint multipliers from the momentum balance rows.

    Solves pdot - dL/dx - F_ext = lam A in the least squares sense over the n
    momentum rows. With m < n the system is overdetermined; the reported
    residual is the part of the left side outside the row span of A and
    vanishes along exact solutions.
    """

    t, x, v = state.t, state.x, state.v
    n = L.n
    rhs = (
        rate.dp
        - np.asarray(L.d_x(t, x, v), dtype=float).reshape(n)
        - _force_vec(f_ext, t, x, v, n)
    )
    A = constraints.A(t, x, v)
    if constraints.m == 0:
        return MultiplierEstimate(
            lam=np.zeros(0), residual=float(np.max(np.abs(rhs), initial=0.0))
        )
    lam, *_ = np.linalg.lstsq(A.T, rhs, rcond=None)
    res = float(np.max(np.abs(A.T @ lam - rhs), initial=0.0))
    return MultiplierEstimate(lam=lam, residual=res)


@dataclass(frozen=True)
class StepResult:
    """Outcome of one implicit step."""

    state: PontryaginState | PhasePoint
    lam: np.ndarray
    newton_iters: int
    residual_norm: float


@dataclass(frozen=True)
class Trajectory:
    """Fixed-step trajectory record. Immutable after a run.

    Node arrays have K + 1 rows for K steps; lam holds the per-step midpoint
    multiplier (K rows). For the hamilton-dirac formulation the v column is
    the reconstruction dH/dp at the nodes.
    """

    formulation: str
    h: float
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    p: np.ndarray
    pt: np.ndarray
    lam: np.ndarray
    newton_iters: np.ndarray

    def __post_init__(self):
        for name in ("t", "x", "v", "p", "pt", "lam", "newton_iters"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def n_steps(self) -> int:
        return self.x.shape[0] - 1

    def state(self, k: int) -> PontryaginState:
        return PontryaginState(
            t=self.t[k], x=self.x[k], v=self.v[k], pt=self.pt[k], p=self.p[k]
        )

    def midpoint_state(self, k: int) -> PontryaginState:
        """Averaged state at the midpoint of step k."""

        return PontryaginState(
            t=0.5 * (self.t[k] + self.t[k + 1]),
            x=0.5 * (self.x[k] + self.x[k + 1]),
            v=0.5 * (self.v[k] + self.v[k + 1]),
            pt=0.5 * (self.pt[k] + self.pt[k + 1]),
            p=0.5 * (self.p[k] + self.p[k + 1]),
        )

    def midpoint_rate(self, k: int) -> TangentP:
        """Finite-difference rate across step k, a section rate (dt = 1)."""

        h = self.t[k + 1] - self.t[k]
        return TangentP(
            dt=1.0,
            dx=(self.x[k + 1] - self.x[k]) / h,
            dv=(self.v[k + 1] - self.v[k]) / h,
            dpt=(self.pt[k + 1] - self.pt[k]) / h,
            dp=(self.p[k + 1] - self.p[k]) / h,
        )

    def midpoint_samples(self) -> Iterator[tuple[PontryaginState, TangentP, np.ndarray]]:
        for k in range(self.n_steps):
            yield self.midpoint_state(k), self.midpoint_rate(k), self.lam[k]


# Residual floor for the polish iterations after the main tolerance is met.
_POLISH_FLOOR = 1e-15


class ImplicitMidpointStepper:
    """Fixed-step implicit midpoint integrator for one formulation.

    A stepper instance owns its Newton workspace (cached LU factorization of
    the finite-difference Jacobian) and must not be shared across threads.
    scales optionally gives per-residual-row characteristic magnitudes used to
    nondimensionalize the convergence test; the default is 1 for every row.

    pt_mode selects how the momentum conjugate to time is advanced: "coupled"
    keeps it inside the Newton system, "post" drops its row and updates it
    explicitly from the midpoint balance after each step. Both give identical
    trajectories because no other row depends on it.
    """

    def __init__(
        self,
        formulation: str,
        lagrangian: TimeLagrangian | None = None,
        hamiltonian: TimeHamiltonian | None = None,
        constraints: ConstraintSet | None = None,
        f_ext: ExternalForce | None = None,
        newton_tol: float = 1e-11,
        max_iter: int = 50,
        scales: np.ndarray | None = None,
        pt_mode: str = "coupled",
        jacobian_refresh: int = 50,
    ):
        if formulation not in FORMULATIONS:
            raise ValueError(
                f"unknown formulation {formulation!r}; choose from {FORMULATIONS}"
            )
        if formulation == "hamilton-dirac":
            if hamiltonian is None:
                raise ValueError("hamilton-dirac needs a TimeHamiltonian")
            self.n = hamiltonian.n
        else:
            if lagrangian is None:
                raise ValueError(f"{formulation} needs a TimeLagrangian")
            self.n = lagrangian.n
        if constraints is None:
            raise ValueError("a ConstraintSet is required (use unconstrained(n))")
        if constraints.n != self.n:
            raise ValueError("constraint dimension does not match the system")
        if f_ext is not None and formulation != "pontryagin":
            raise ValueError("external forces are only supported on the pontryagin path")
        if pt_mode not in ("coupled", "post"):
            raise ValueError("pt_mode must be 'coupled' or 'post'")

        self.formulation = formulation
        self.L = lagrangian
        self.H = hamiltonian
        self.constraints = constraints
        self.f_ext = f_ext
        self.newton_tol = float(newton_tol)
        self.max_iter = int(max_iter)
        self.pt_mode = pt_mode
        self.jacobian_refresh = int(jacobian_refresh)

        n, m = self.n, constraints.m
        if formulation == "hamilton-dirac":
            self._nunk = 2 * n + m + (1 if pt_mode == "coupled" else 0)
        else:
            self._nunk = 3 * n + m + (1 if pt_mode == "coupled" else 0)
        if scales is None:
            self._scales = np.ones(self._nunk)
        else:
            self._scales = np.asarray(scales, dtype=float).reshape(self._nunk)
        self._lu = None
        self._steps_since_refresh = 0

    # -- residual assembly ------------------------------------------------

    def _residual_fn(self, state, h: float) -> Callable[[np.ndarray], np.ndarray]:
        n, m = self.n, self.constraints.m
        C = self.constraints
        coupled = self.pt_mode == "coupled"

        if self.formulation == "hamilton-dirac":
            H = self.H
            t0, x0, p0, pt0 = state.t, state.x, state.p, state.pt
            t1 = t0 + h
            tm = t0 + 0.5 * h

            def residual(y: np.ndarray) -> np.ndarray:
                x1 = y[:n]
                p1 = y[n : 2 * n]
                if coupled:
                    pt1 = y[2 * n]
                    lam = y[2 * n + 1 :]
                else:
                    lam = y[2 * n :]
                xm = 0.5 * (x0 + x1)
                pm = 0.5 * (p0 + p1)
                A = C.A(tm, xm, pm)
                B = C.B(tm, xm, pm)
                wm = np.asarray(H.d_p(tm, xm, pm), dtype=float).reshape(n)
                r1 = (x1 - x0) / h - wm
                r3 = (
                    (p1 - p0) / h
                    + np.asarray(H.d_x(tm, xm, pm), dtype=float).reshape(n)
                    - A.T @ lam
                )
                A1 = C.A(t1, x1, p1)
                B1 = C.B(t1, x1, p1)
                w1 = np.asarray(H.d_p(t1, x1, p1), dtype=float).reshape(n)
                r4 = A1 @ w1 + B1
                if coupled:
                    r2 = (pt1 - pt0) / h + float(H.d_t(tm, xm, pm)) - float(B @ lam)
                    return np.concatenate([r1, r3, r4, [r2]])
                return np.concatenate([r1, r3, r4])

            return residual

        L = self.L
        t0, x0, v0, p0, pt0 = state.t, state.x, state.v, state.p, state.pt
        t1 = t0 + h
        tm = t0 + 0.5 * h
        momentum_side = self.formulation == "lagrange-dirac"

        def residual(y: np.ndarray) -> np.ndarray:
            x1 = y[:n]
            v1 = y[n : 2 * n]
            p1 = y[2 * n : 3 * n]
            if coupled:
                pt1 = y[3 * n]
                lam = y[3 * n + 1 :]
            else:
                lam = y[3 * n :]
            xm = 0.5 * (x0 + x1)
            vm = 0.5 * (v0 + v1)
            pm = 0.5 * (p0 + p1)
            wm = pm if momentum_side else vm
            A = C.A(tm, xm, wm)
            B = C.B(tm, xm, wm)
            r1 = (x1 - x0) / h - vm
            r2 = pm - np.asarray(L.d_v(tm, xm, vm), dtype=float).reshape(n)
            r3 = (
                (p1 - p0) / h
                - np.asarray(L.d_x(tm, xm, vm), dtype=float).reshape(n)
                - A.T @ lam
                - _force_vec(self.f_ext, tm, xm, vm, n)
            )
            w1 = p1 if momentum_side else v1
            A1 = C.A(t1, x1, w1)
            B1 = C.B(t1, x1, w1)
            r4 = A1 @ v1 + B1
            if coupled:
                r5 = (pt1 - pt0) / h - float(L.d_t(tm, xm, vm)) - float(B @ lam)
                return np.concatenate([r1, r2, r3, r4, [r5]])
            return np.concatenate([r1, r2, r3, r4])

        return residual

    def _post_pt_update(self, state, h: float, y: np.ndarray) -> float:
        n = self.n
        C = self.constraints
        tm = state.t + 0.5 * h
        if self.formulation == "hamilton-dirac":
            x1 = y[:n]
            p1 = y[n : 2 * n]
            lam = y[2 * n :]
            xm = 0.5 * (state.x + x1)
            pm = 0.5 * (state.p + p1)
            B = C.B(tm, xm, pm)
            return state.pt + h * (-float(self.H.d_t(tm, xm, pm)) + float(B @ lam))
        x1 = y[:n]
        v1 = y[n : 2 * n]
        p1 = y[2 * n : 3 * n]
        lam = y[3 * n :]
        xm = 0.5 * (state.x + x1)
        vm = 0.5 * (state.v + v1)
        pm = 0.5 * (state.p + p1)
        wm = pm if self.formulation == "lagrange-dirac" else vm
        B = C.B(tm, xm, wm)
        return state.pt + h * (float(self.L.d_t(tm, xm, vm)) + float(B @ lam))

    # -- Newton machinery -------------------------------------------------

    def _factor(self, residual, y: np.ndarray):
        K = y.size
        r0 = residual(y)
        J = np.empty((K, K))
        for j in range(K):
            eps = 1.49e-8 * (1.0 + abs(y[j]))
            yp = y.copy()
            yp[j] += eps
            J[:, j] = (residual(yp) - r0) / eps
        try:
            with warnings.catch_warnings():
                # The diagonal inspection below turns exact singularity into a
                # typed error; scipy's advance warning would be redundant.
                warnings.simplefilter("ignore", LinAlgWarning)
                lu = lu_factor(J)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(str(exc)) from exc
        d = np.abs(np.diag(lu[0]))
        if d.min() <= 1e-14 * max(d.max(), 1e-300):
            raise SingularJacobianError(
                "step Jacobian is numerically singular; the formulation is "
                "degenerate at this state (for open thermodynamic systems use "
                "the pontryagin formulation or the reduced path)"
            )
        self._lu = lu
        self._steps_since_refresh = 0
        return lu

    def _scaled_norm(self, r: np.ndarray) -> float:
        return float(np.max(np.abs(r) / self._scales, initial=0.0))

    def _newton(self, residual, guess: np.ndarray) -> tuple[np.ndarray, float, int]:
        tol = self.newton_tol
        for attempt in (0, 1):
            y = guess.copy()
            if attempt == 1 or self._lu is None or (
                self._steps_since_refresh >= self.jacobian_refresh
            ):
                self._factor(residual, y)
            lu = self._lu
            r = residual(y)
            rn = self._scaled_norm(r)
            iters = 0
            converged = rn <= tol
            while not converged and iters < self.max_iter:
                y = y - lu_solve(lu, r)
                r = residual(y)
                prev, rn = rn, self._scaled_norm(r)
                iters += 1
                if rn <= tol:
                    converged = True
                    break
                if not np.isfinite(rn) or (iters >= 2 and rn > 0.9 * prev):
                    # Chord iteration stalled; retry once with a fresh Jacobian.
                    break
            if converged:
                # Free polish iterations push the residual toward round-off so
                # per-step errors stay far below the monitoring tolerances.
                for _ in range(3):
                    if rn <= _POLISH_FLOOR:
                        break
                    y2 = y - lu_solve(lu, r)
                    r2 = residual(y2)
                    rn2 = self._scaled_norm(r2)
                    if rn2 >= rn:
                        break
                    y, r, rn = y2, r2, rn2
                    iters += 1
                self._steps_since_refresh += 1
                return y, rn, iters
            if attempt == 1:
                raise StepFailureError(
                    f"Newton did not converge: residual {rn:.3e} after "
                    f"{iters} iterations (tol {tol:.1e})"
                )
            self._lu = None
        raise AssertionError("unreachable")

    # -- stepping ---------------------------------------------------------

    def _guess(self, state, h: float) -> np.ndarray:
        n, m = self.n, self.constraints.m
        coupled = self.pt_mode == "coupled"
        lam0 = getattr(self, "_last_lam", np.zeros(m))
        if self.formulation == "hamilton-dirac":
            w0 = np.asarray(self.H.d_p(state.t, state.x, state.p), dtype=float).reshape(n)
            parts = [state.x + h * w0, state.p]
            if coupled:
                parts.append([state.pt])
            parts.append(lam0)
            return np.concatenate(parts)
        parts = [state.x + h * state.v, state.v, state.p]
        if coupled:
            parts.append([state.pt])
        parts.append(lam0)
        return np.concatenate(parts)

    def step(self, state, h: float) -> StepResult:
        """Advance one step of size h from the given state."""

        residual = self._residual_fn(state, h)
        y, rn, iters = self._newton(residual, self._guess(state, h))
        n = self.n
        coupled = self.pt_mode == "coupled"
        if self.formulation == "hamilton-dirac":
            pt1 = y[2 * n] if coupled else self._post_pt_update(state, h, y)
            lam = y[2 * n + 1 :] if coupled else y[2 * n :]
            new = PhasePoint(t=state.t + h, x=y[:n], pt=pt1, p=y[n : 2 * n])
        else:
            pt1 = y[3 * n] if coupled else self._post_pt_update(state, h, y)
            lam = y[3 * n + 1 :] if coupled else y[3 * n :]
            new = PontryaginState(
                t=state.t + h, x=y[:n], v=y[n : 2 * n], pt=pt1, p=y[2 * n : 3 * n]
            )
        self._last_lam = lam.copy()
        return StepResult(state=new, lam=lam.copy(), newton_iters=iters, residual_norm=rn)

    def _initial_kinematic_residual(self, state) -> float:
        C = self.constraints
        if self.formulation == "hamilton-dirac":
            A = C.A(state.t, state.x, state.p)
            B = C.B(state.t, state.x, state.p)
            w = np.asarray(self.H.d_p(state.t, state.x, state.p), dtype=float)
        else:
            wcoef = state.p if self.formulation == "lagrange-dirac" else state.v
            A = C.A(state.t, state.x, wcoef)
            B = C.B(state.t, state.x, wcoef)
            w = state.v
        return float(np.max(np.abs(A @ w + B), initial=0.0))

    def run(self, state, h: float, n_steps: int) -> Trajectory:
        """Integrate n_steps fixed steps from the given state."""

        if h <= 0:
            raise ValueError("step size must be positive")
        res0 = self._initial_kinematic_residual(state)
        if res0 > 1e-8:
            raise ValueError(
                f"initial state violates the kinematic constraint (residual {res0:.3e})"
            )
        n, m = self.n, self.constraints.m
        K = int(n_steps)
        t = np.empty(K + 1)
        x = np.empty((K + 1, n))
        v = np.empty((K + 1, n))
        p = np.empty((K + 1, n))
        pt = np.empty(K + 1)
        lam = np.empty((K, m))
        iters = np.zeros(K, dtype=int)

        def record(k, s):
            t[k] = s.t
            x[k] = s.x
            p[k] = s.p
            pt[k] = s.pt
            if self.formulation == "hamilton-dirac":
                v[k] = np.asarray(self.H.d_p(s.t, s.x, s.p), dtype=float).reshape(n)
            else:
                v[k] = s.v

        record(0, state)
        current = state
        for k in range(K):
            try:
                result = self.step(current, h)
            except (StepFailureError, SingularJacobianError) as exc:
                raise StepFailureError(f"step {k} (t = {current.t!r}) failed: {exc}") from exc
            current = result.state
            lam[k] = result.lam
            iters[k] = result.newton_iters
            record(k + 1, current)
        return Trajectory(
            formulation=self.formulation,
            h=float(h),
            t=t,
            x=x,
            v=v,
            p=p,
            pt=pt,
            lam=lam,
            newton_iters=iters,
        )


def solve_step(
    formulation: str,
    state,
    h: float,
    lagrangian: TimeLagrangian | None = None,
    hamiltonian: TimeHamiltonian | None = None,
    constraints: ConstraintSet | None = None,
    f_ext: ExternalForce | None = None,
    **options,
) -> StepResult:
    """One implicit midpoint step without keeping a stepper around."""

    stepper = ImplicitMidpointStepper(
        formulation,
        lagrangian=lagrangian,
        hamiltonian=hamiltonian,
        constraints=constraints,
        f_ext=f_ext,
        **options,
    )
    return stepper.step(state, h)


@dataclass(frozen=True)
class InvariantSeries:
    """Per-step diagnostic series for a trajectory.

    Node arrays (length K + 1): covariant_energy, covariant_energy_drift
    (relative to the initial node), kinematic_residual, entropy_production.
    Step arrays (length K): t_mid, energy_balance_residual (discrete balance
    of the momentum conjugate to time), entropy_decomposition_residual. The
    entropy fields are None for purely mechanical systems.
    """

    t: np.ndarray
    t_mid: np.ndarray
    covariant_energy: np.ndarray
    covariant_energy_drift: np.ndarray
    energy_balance_residual: np.ndarray
    kinematic_residual: np.ndarray
    entropy_decomposition_residual: np.ndarray | None = None
    entropy_production: np.ndarray | None = None

    def summary(self) -> dict[str, float]:
        out = {
            "max_abs_covariant_energy_drift": float(
                np.max(np.abs(self.covariant_energy_drift))
            ),
            "max_abs_energy_balance_residual": float(
                np.max(np.abs(self.energy_balance_residual), initial=0.0)
            ),
            "max_kinematic_residual": float(np.max(self.kinematic_residual)),
        }
        if self.entropy_decomposition_residual is not None:
            out["max_abs_entropy_decomposition_residual"] = float(
                np.max(np.abs(self.entropy_decomposition_residual), initial=0.0)
            )
        if self.entropy_production is not None:
            out["min_entropy_production"] = float(np.min(self.entropy_production))
        return out


def monitor_invariants(
    L: TimeLagrangian,
    constraints: ConstraintSet,
    traj: Trajectory,
    thermo_system=None,
) -> InvariantSeries:
    """Evaluate conservation and consistency diagnostics along a trajectory.

    The energy balance residual is the discrete rate of the momentum conjugate
    to time minus its law, with coefficients at the step midpoint, using the
    stored midpoint multipliers. The kinematic residual is evaluated at every
    node. When thermo_system is given (a SimpleOpenSystem), the entropy
    decomposition residual (Sdot - Sigmadot - p_Gamma_dot) and the internal
    entropy production at the nodes are included.
    """

    K = traj.n_steps
    ce = np.empty(K + 1)
    kin = np.empty(K + 1)
    for k in range(K + 1):
        t, xk, vk, pk = traj.t[k], traj.x[k], traj.v[k], traj.p[k]
        ce[k] = traj.pt[k] + float(pk @ vk) - float(L.value(t, xk, vk))
        A = constraints.A(t, xk, vk)
        B = constraints.B(t, xk, vk)
        kin[k] = float(np.max(np.abs(A @ vk + B), initial=0.0))

    t_mid = 0.5 * (traj.t[:-1] + traj.t[1:])
    ebr = np.empty(K)
    for k in range(K):
        sm = traj.midpoint_state(k)
        B = constraints.B(sm.t, sm.x, sm.v)
        ptdot = (traj.pt[k + 1] - traj.pt[k]) / (traj.t[k + 1] - traj.t[k])
        ebr[k] = ptdot - float(L.d_t(sm.t, sm.x, sm.v)) - float(B @ traj.lam[k])

    entropy_res = None
    entropy_prod = None
    if thermo_system is not None:
        from .thermo import entropy_production, state_from_arrays

        lay = thermo_system.layout
        S = traj.x[:, lay.S]
        Sg = traj.x[:, lay.Sigma]
        pG = traj.p[:, lay.Gamma]
        h = traj.h
        entropy_res = ((S[1:] - S[:-1]) - (Sg[1:] - Sg[:-1]) - (pG[1:] - pG[:-1])) / h
        entropy_prod = np.empty(K + 1)
        for k in range(K + 1):
            ts = state_from_arrays(thermo_system, traj.x[k], traj.v[k])
            entropy_prod[k] = entropy_production(thermo_system, traj.t[k], ts).total

    return InvariantSeries(
        t=traj.t.copy(),
        t_mid=t_mid,
        covariant_energy=ce,
        covariant_energy_drift=ce - ce[0],
        energy_balance_residual=ebr,
        kinematic_residual=kin,
        entropy_decomposition_residual=entropy_res,
        entropy_production=entropy_prod,
    )
