"""Simple open thermodynamic systems with matter ports and heat sources.

A system couples a mechanical part (configuration q with Lagrangian
L_mech(q, v_q, S, N)) to a single-entropy thermodynamic part with entropy S,
mole number N, and three accounting coordinates: a thermal displacement Gamma
(whose rate is the temperature), a chemical displacement W (whose rate is the
chemical potential), and an internal entropy accumulator Sigma. The full
state vector is x = (q, S, N, Gamma, W, Sigma) of dimension n_q + 5.

The evolution is encoded as a single nonlinear velocity constraint (the
entropy production balance) plus the variational equations of an extended
Lagrangian on the time-extended bundle. The module assembles both, exposes
the index-reduced closed-form rates ("reduced path"), the entropy production
breakdown, the power flows of the first law, and an ideal gas fixture.

Temperature is defined as -dL_mech/dS and must stay positive; a sign flip is
treated as a modeling error and raises.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import StepFailureError, Trajectory
from .geometry import ConstraintSet, PontryaginState, TangentP
from .lagrangian import HyperregularityError, TimeLagrangian

__all__ = [
    "NonpositiveTemperatureError",
    "ThermoLayout",
    "ThermoState",
    "MechanicalLagrangian",
    "PortModel",
    "HeatSourceModel",
    "SimpleOpenSystem",
    "state_from_arrays",
    "temperature",
    "chemical_potential",
    "build_extended_lagrangian",
    "build_constraints",
    "build_momentum_constraints",
    "ReducedRates",
    "reduced_rhs",
    "EntropyBreakdown",
    "entropy_production",
    "PowerFlows",
    "power_flows",
    "momenta_from_state",
    "initial_pontryagin_state",
    "run_reduced",
    "lifted_midpoint_samples",
    "first_law_residual",
    "random_physical_point",
    "linear_friction",
    "ideal_gas_fixture",
]


class NonpositiveTemperatureError(RuntimeError):
    """Raised when -dL_mech/dS is not positive at an evaluation point."""


@dataclass(frozen=True)
class ThermoLayout:
    """Index layout of the extended state x = (q, S, N, Gamma, W, Sigma)."""

    n_q: int

    @property
    def q(self) -> slice:
        return slice(0, self.n_q)

    @property
    def S(self) -> int:
        return self.n_q

    @property
    def N(self) -> int:
        return self.n_q + 1

    @property
    def Gamma(self) -> int:
        return self.n_q + 2

    @property
    def W(self) -> int:
        return self.n_q + 3

    @property
    def Sigma(self) -> int:
        return self.n_q + 4

    @property
    def n(self) -> int:
        return self.n_q + 5


@dataclass(frozen=True)
class ThermoState:
    """Core open-system state (q, v_q, S, N, Gamma, W, Sigma)."""

    q: np.ndarray
    v_q: np.ndarray
    S: float
    N: float
    Gamma: float
    W: float
    Sigma: float

    def __post_init__(self):
        object.__setattr__(self, "q", np.atleast_1d(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "v_q", np.atleast_1d(np.asarray(self.v_q, dtype=float)))
        for name in ("S", "N", "Gamma", "W", "Sigma"):
            object.__setattr__(self, name, float(getattr(self, name)))


@dataclass(frozen=True)
class MechanicalLagrangian:
    """Mechanical Lagrangian L_mech(q, v, S, N) with analytic partials.

    d_vv is the velocity Hessian (the mass matrix). The optional cross second
    derivatives d_vq (shape (n_q, n_q), entry [i, j] = d2L/dv_i dq_j), d_vS
    and d_vN (shape (n_q,)) are needed by the reduced path only when the mass
    matrix depends on q, S or N; None means identically zero, exact for
    constant mass matrices.
    """

    n_q: int
    value: Callable[[np.ndarray, np.ndarray, float, float], float]
    d_q: Callable[[np.ndarray, np.ndarray, float, float], np.ndarray]
    d_v: Callable[[np.ndarray, np.ndarray, float, float], np.ndarray]
    d_S: Callable[[np.ndarray, np.ndarray, float, float], float]
    d_N: Callable[[np.ndarray, np.ndarray, float, float], float]
    d_vv: Callable[[np.ndarray, np.ndarray, float, float], np.ndarray]
    d_vq: Callable[[np.ndarray, np.ndarray, float, float], np.ndarray] | None = None
    d_vS: Callable[[np.ndarray, np.ndarray, float, float], np.ndarray] | None = None
    d_vN: Callable[[np.ndarray, np.ndarray, float, float], np.ndarray] | None = None


@dataclass(frozen=True)
class PortModel:
    """Matter exchange port with an external reservoir.

    J is the molar flow into the system and J_S the entropy flow carried with
    it, both (t, state) -> float. mu and T_port give the reservoir chemical
    potential and temperature as (t, state) -> float; reservoirs defined by
    pure schedules simply ignore the state argument, while matched ports may
    track the system's own intensive variables.
    """

    J: Callable[[float, ThermoState], float]
    J_S: Callable[[float, ThermoState], float]
    mu: Callable[[float, ThermoState], float]
    T_port: Callable[[float, ThermoState], float]

    @staticmethod
    def from_molar_entropy(
        J: Callable[[float, ThermoState], float],
        molar_entropy: Callable[[float, ThermoState], float],
        mu: Callable[[float, ThermoState], float],
        T_port: Callable[[float, ThermoState], float],
    ) -> "PortModel":
        """Port whose entropy flow is molar_entropy times the molar flow.

        The transported enthalpy is then mu + T_port * molar_entropy by
        construction.
        """

        return PortModel(
            J=J,
            J_S=lambda t, ts: molar_entropy(t, ts) * J(t, ts),
            mu=mu,
            T_port=T_port,
        )


@dataclass(frozen=True)
class HeatSourceModel:
    """Pure heating port: entropy flow J_S at source temperature T_source."""

    J_S: Callable[[float, ThermoState], float]
    T_source: Callable[[float, ThermoState], float]


@dataclass(frozen=True)
class SimpleOpenSystem:
    """Open system: mechanics plus entropy/matter bookkeeping and its ports.

    friction gives the friction force covector (t, state) -> (n_q,) acting on
    q (None means zero), f_ext an external force of the same signature. ports
    and sources are the matter and heating connections.
    """

    mech: MechanicalLagrangian
    friction: Callable[[float, ThermoState], np.ndarray] | None = None
    ports: tuple[PortModel, ...] = ()
    sources: tuple[HeatSourceModel, ...] = ()
    f_ext: Callable[[float, ThermoState], np.ndarray] | None = None

    @property
    def n_q(self) -> int:
        return self.mech.n_q

    @property
    def n(self) -> int:
        return self.mech.n_q + 5

    @property
    def layout(self) -> ThermoLayout:
        return ThermoLayout(self.mech.n_q)


def state_from_arrays(
    sys: SimpleOpenSystem, x: np.ndarray, v: np.ndarray
) -> ThermoState:
    """Build a ThermoState from full state and velocity arrays."""

    lay = sys.layout
    x = np.asarray(x, dtype=float).reshape(lay.n)
    v = np.asarray(v, dtype=float).reshape(lay.n)
    return ThermoState(
        q=x[lay.q].copy(),
        v_q=v[lay.q].copy(),
        S=x[lay.S],
        N=x[lay.N],
        Gamma=x[lay.Gamma],
        W=x[lay.W],
        Sigma=x[lay.Sigma],
    )


def temperature(sys: SimpleOpenSystem, ts: ThermoState) -> float:
    """Temperature -dL_mech/dS; raises when it is not positive."""

    T = -float(sys.mech.d_S(ts.q, ts.v_q, ts.S, ts.N))
    if not T > 0.0:
        raise NonpositiveTemperatureError(
            f"temperature -dL/dS = {T!r} at S = {ts.S!r}, N = {ts.N!r}; "
            "the thermodynamic part is outside its physical domain"
        )
    return T


def chemical_potential(sys: SimpleOpenSystem, ts: ThermoState) -> float:
    """Chemical potential -dL_mech/dN."""

    return -float(sys.mech.d_N(ts.q, ts.v_q, ts.S, ts.N))


@dataclass(frozen=True)
class _PortSums:
    J: float            # total molar inflow
    J_S_ports: float    # entropy inflow through matter ports
    J_S_sources: float  # entropy inflow through heating ports
    P_M: float          # sum J^a mu^a + J_S^a T^a over matter ports
    P_H: float          # sum J_S^b T^b over heating ports


def _port_sums(sys: SimpleOpenSystem, t: float, ts: ThermoState) -> _PortSums:
    J = 0.0
    JS_a = 0.0
    P_M = 0.0
    for port in sys.ports:
        j = float(port.J(t, ts))
        js = float(port.J_S(t, ts))
        J += j
        JS_a += js
        P_M += j * float(port.mu(t, ts)) + js * float(port.T_port(t, ts))
    JS_b = 0.0
    P_H = 0.0
    for src in sys.sources:
        js = float(src.J_S(t, ts))
        JS_b += js
        P_H += js * float(src.T_source(t, ts))
    return _PortSums(J=J, J_S_ports=JS_a, J_S_sources=JS_b, P_M=P_M, P_H=P_H)


def _friction_vec(sys: SimpleOpenSystem, t: float, ts: ThermoState) -> np.ndarray:
    if sys.friction is None:
        return np.zeros(sys.n_q)
    return np.asarray(sys.friction(t, ts), dtype=float).reshape(sys.n_q)


def _f_ext_vec(sys: SimpleOpenSystem, t: float, ts: ThermoState) -> np.ndarray:
    if sys.f_ext is None:
        return np.zeros(sys.n_q)
    return np.asarray(sys.f_ext(t, ts), dtype=float).reshape(sys.n_q)


def build_extended_lagrangian(sys: SimpleOpenSystem) -> TimeLagrangian:
    """Extended Lagrangian on x = (q, S, N, Gamma, W, Sigma).

    L = L_mech(q, v_q, S, N) + v_W N + v_Gamma (S - Sigma). The velocity
    Hessian is invertible only on the q block, which is declared as the
    regular block; the extension is deliberately degenerate in the
    thermodynamic velocities.
    """

    lay = sys.layout
    mech = sys.mech
    n = lay.n

    def split(x, v):
        return x[lay.q], v[lay.q], x[lay.S], x[lay.N], x[lay.Sigma]

    def value(t, x, v):
        q, vq, S, N, Sigma = split(x, v)
        return (
            float(mech.value(q, vq, S, N))
            + v[lay.W] * N
            + v[lay.Gamma] * (S - Sigma)
        )

    def d_t(t, x, v):
        return 0.0

    def d_x(t, x, v):
        q, vq, S, N, _ = split(x, v)
        out = np.zeros(n)
        out[lay.q] = np.asarray(mech.d_q(q, vq, S, N), dtype=float)
        out[lay.S] = float(mech.d_S(q, vq, S, N)) + v[lay.Gamma]
        out[lay.N] = float(mech.d_N(q, vq, S, N)) + v[lay.W]
        out[lay.Sigma] = -v[lay.Gamma]
        return out

    def d_v(t, x, v):
        q, vq, S, N, Sigma = split(x, v)
        out = np.zeros(n)
        out[lay.q] = np.asarray(mech.d_v(q, vq, S, N), dtype=float)
        out[lay.Gamma] = S - Sigma
        out[lay.W] = N
        return out

    def d_vv(t, x, v):
        q, vq, S, N, _ = split(x, v)
        out = np.zeros((n, n))
        out[lay.q, lay.q] = np.asarray(mech.d_vv(q, vq, S, N), dtype=float)
        return out

    return TimeLagrangian(
        n=n,
        value=value,
        d_t=d_t,
        d_x=d_x,
        d_v=d_v,
        d_vv=d_vv,
        regular_block=tuple(range(sys.n_q)),
    )


def _constraint_row(
    sys: SimpleOpenSystem, t: float, ts: ThermoState
) -> tuple[np.ndarray, float]:
    # Entropy production balance as one affine velocity constraint A v + B = 0:
    #   <F_fr, v_q> + (sum J_S) v_Gamma + (sum J) v_W + T v_Sigma
    #     - sum_a (J mu^a + J_S T^a) - sum_b (J_S T^b) = 0
    # with T = -dL_mech/dS so the Sigma coefficient equals -dL_mech/dS.
    lay = sys.layout
    T = temperature(sys, ts)
    ps = _port_sums(sys, t, ts)
    A = np.zeros(lay.n)
    A[lay.q] = _friction_vec(sys, t, ts)
    A[lay.Gamma] = ps.J_S_ports + ps.J_S_sources
    A[lay.W] = ps.J
    A[lay.Sigma] = T
    B = -(ps.P_M + ps.P_H)
    return A, B


def build_constraints(sys: SimpleOpenSystem) -> ConstraintSet:
    """Velocity-side constraint set (coefficients at (t, x, v))."""

    lay = sys.layout

    def eval_A(t, x, v):
        A, _ = _constraint_row(sys, t, state_from_arrays(sys, x, v))
        return A[None, :]

    def eval_B(t, x, v):
        _, B = _constraint_row(sys, t, state_from_arrays(sys, x, v))
        return np.array([B])

    return ConstraintSet(n=lay.n, m=1, eval_A=eval_A, eval_B=eval_B)


def _vq_from_pq(
    sys: SimpleOpenSystem,
    q: np.ndarray,
    S: float,
    N: float,
    p_q: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> np.ndarray:
    # Invert p_q = dL_mech/dv on the mechanical block (mass matrix solve).
    mech = sys.mech
    v = np.zeros(sys.n_q)
    for _ in range(max_iter):
        r = np.asarray(mech.d_v(q, v, S, N), dtype=float).reshape(sys.n_q) - p_q
        if np.max(np.abs(r), initial=0.0) <= tol * (1.0 + np.max(np.abs(p_q), initial=0.0)):
            return v
        M = np.asarray(mech.d_vv(q, v, S, N), dtype=float).reshape(sys.n_q, sys.n_q)
        s = np.linalg.svd(M, compute_uv=False)
        if s[0] == 0.0 or s[-1] <= 1e-12 * s[0]:
            raise HyperregularityError("mechanical mass matrix is singular")
        v = v - np.linalg.solve(M, r)
    raise HyperregularityError("mass matrix inversion did not converge")


def build_momentum_constraints(sys: SimpleOpenSystem) -> ConstraintSet:
    """Momentum-side constraint set (coefficients at (t, x, p)).

    The mechanical velocity is recovered from p_q through the mass matrix, so
    the friction force and any velocity-dependent port laws are evaluated at
    v_q(p_q). Thermodynamic momentum slots are ignored by the coefficients.
    """

    lay = sys.layout

    def ts_from_p(t, x, p):
        p = np.asarray(p, dtype=float).reshape(lay.n)
        x = np.asarray(x, dtype=float).reshape(lay.n)
        vq = _vq_from_pq(sys, x[lay.q], x[lay.S], x[lay.N], p[lay.q])
        return ThermoState(
            q=x[lay.q].copy(),
            v_q=vq,
            S=x[lay.S],
            N=x[lay.N],
            Gamma=x[lay.Gamma],
            W=x[lay.W],
            Sigma=x[lay.Sigma],
        )

    def eval_A(t, x, p):
        A, _ = _constraint_row(sys, t, ts_from_p(t, x, p))
        return A[None, :]

    def eval_B(t, x, p):
        _, B = _constraint_row(sys, t, ts_from_p(t, x, p))
        return np.array([B])

    return ConstraintSet(n=lay.n, m=1, eval_A=eval_A, eval_B=eval_B)


@dataclass(frozen=True)
class EntropyBreakdown:
    """Internal entropy production split into its three mechanisms.

    friction: mechanical friction dissipation, nonnegative for dissipative
    friction laws. mixing: matter exchange against finite differences of
    chemical potential and temperature. heating: heat conduction from the
    sources, nonnegative when every source is hotter or the flow reverses
    with the gradient.
    """

    total: float
    friction: float
    mixing: float
    heating: float


def entropy_production(
    sys: SimpleOpenSystem, t: float, ts: ThermoState
) -> EntropyBreakdown:
    """Internal entropy production rate I at a state.

    I = -<F_fr, v_q>/T + (1/T) sum_a [J^a (mu^a - mu) + J_S^a (T^a - T)]
      + (1/T) sum_b J_S^b (T^b - T).
    """

    T = temperature(sys, ts)
    mu = chemical_potential(sys, ts)
    fric = -float(_friction_vec(sys, t, ts) @ ts.v_q) / T
    mixing = 0.0
    for port in sys.ports:
        mixing += (
            float(port.J(t, ts)) * (float(port.mu(t, ts)) - mu)
            + float(port.J_S(t, ts)) * (float(port.T_port(t, ts)) - T)
        ) / T
    heating = 0.0
    for src in sys.sources:
        heating += float(src.J_S(t, ts)) * (float(src.T_source(t, ts)) - T) / T
    return EntropyBreakdown(
        total=fric + mixing + heating,
        friction=fric,
        mixing=mixing,
        heating=heating,
    )


@dataclass(frozen=True)
class PowerFlows:
    """External power flows of the first law dE/dt = mechanical + heating + matter."""

    mechanical: float  # external force power
    heating: float     # sum J_S^b T^b
    matter: float      # sum J^a mu^a + J_S^a T^a

    @property
    def total(self) -> float:
        return self.mechanical + self.heating + self.matter


def power_flows(sys: SimpleOpenSystem, t: float, ts: ThermoState) -> PowerFlows:
    """External power flows at a state."""

    ps = _port_sums(sys, t, ts)
    return PowerFlows(
        mechanical=float(_f_ext_vec(sys, t, ts) @ ts.v_q),
        heating=ps.P_H,
        matter=ps.P_M,
    )


@dataclass(frozen=True)
class ReducedRates:
    """Closed-form rates of the index-reduced open-system equations."""

    qdot: np.ndarray
    vqdot: np.ndarray
    Sdot: float
    Ndot: float
    Gammadot: float
    Wdot: float
    Sigmadot: float
    pGammadot: float
    pWdot: float
    ptdot: float


def reduced_rhs(sys: SimpleOpenSystem, t: float, ts: ThermoState) -> ReducedRates:
    """Explicit rates of the reduced path at a state.

    The thermal and chemical displacements advance with the system's own
    temperature and chemical potential, N with the total molar inflow, Sigma
    with the internal production I, and S with I plus the total entropy
    inflow. The mechanical acceleration solves the forced mechanical balance;
    when the mass matrix depends on (q, S, N) the declared cross second
    derivatives feed the chain rule (zero when undeclared).
    """

    mech = sys.mech
    T = temperature(sys, ts)
    mu = chemical_potential(sys, ts)
    ps = _port_sums(sys, t, ts)
    prod = entropy_production(sys, t, ts)

    Ndot = ps.J
    Sdot = prod.total + ps.J_S_ports + ps.J_S_sources
    q, vq, S, N = ts.q, ts.v_q, ts.S, ts.N
    rhs = (
        np.asarray(mech.d_q(q, vq, S, N), dtype=float).reshape(sys.n_q)
        + _friction_vec(sys, t, ts)
        + _f_ext_vec(sys, t, ts)
    )
    if mech.d_vq is not None:
        rhs = rhs - np.asarray(mech.d_vq(q, vq, S, N), dtype=float).reshape(
            sys.n_q, sys.n_q
        ) @ vq
    if mech.d_vS is not None:
        rhs = rhs - Sdot * np.asarray(mech.d_vS(q, vq, S, N), dtype=float).reshape(
            sys.n_q
        )
    if mech.d_vN is not None:
        rhs = rhs - Ndot * np.asarray(mech.d_vN(q, vq, S, N), dtype=float).reshape(
            sys.n_q
        )
    M = np.asarray(mech.d_vv(q, vq, S, N), dtype=float).reshape(sys.n_q, sys.n_q)
    vqdot = np.linalg.solve(M, rhs)

    return ReducedRates(
        qdot=vq.copy(),
        vqdot=vqdot,
        Sdot=Sdot,
        Ndot=Ndot,
        Gammadot=T,
        Wdot=mu,
        Sigmadot=prod.total,
        pGammadot=ps.J_S_ports + ps.J_S_sources,
        pWdot=ps.J,
        ptdot=-(ps.P_M + ps.P_H),
    )


def momenta_from_state(sys: SimpleOpenSystem, ts: ThermoState) -> np.ndarray:
    """Momenta of the extended Lagrangian along valid states.

    p_q is the mechanical fiber derivative, p_Gamma = S - Sigma, p_W = N, and
    the S, N, Sigma slots vanish.
    """

    lay = sys.layout
    p = np.zeros(lay.n)
    p[lay.q] = np.asarray(
        sys.mech.d_v(ts.q, ts.v_q, ts.S, ts.N), dtype=float
    ).reshape(sys.n_q)
    p[lay.Gamma] = ts.S - ts.Sigma
    p[lay.W] = ts.N
    return p


def _full_arrays(sys: SimpleOpenSystem, t: float, ts: ThermoState):
    lay = sys.layout
    rates = reduced_rhs(sys, t, ts)
    x = np.zeros(lay.n)
    x[lay.q] = ts.q
    x[lay.S] = ts.S
    x[lay.N] = ts.N
    x[lay.Gamma] = ts.Gamma
    x[lay.W] = ts.W
    x[lay.Sigma] = ts.Sigma
    v = np.zeros(lay.n)
    v[lay.q] = ts.v_q
    v[lay.S] = rates.Sdot
    v[lay.N] = rates.Ndot
    v[lay.Gamma] = rates.Gammadot
    v[lay.W] = rates.Wdot
    v[lay.Sigma] = rates.Sigmadot
    return x, v, rates


def initial_pontryagin_state(
    sys: SimpleOpenSystem, t0: float, ts0: ThermoState
) -> PontryaginState:
    """Consistent initial point on the mixed bundle for the full formulations.

    Velocities of the bookkeeping coordinates come from the reduced rates (so
    the kinematic constraint holds exactly), momenta from the extended fiber
    derivative, and the momentum conjugate to time is initialized to -E(0) so
    the covariant energy starts at zero.
    """

    x, v, _ = _full_arrays(sys, t0, ts0)
    p = momenta_from_state(sys, ts0)
    L = build_extended_lagrangian(sys)
    E0 = float(p @ v) - float(L.value(t0, x, v))
    return PontryaginState(t=t0, x=x, v=v, pt=-E0, p=p)


def _reduced_state_vector(ts: ThermoState) -> np.ndarray:
    return np.concatenate(
        [ts.q, ts.v_q, [ts.S, ts.N, ts.Gamma, ts.W, ts.Sigma]]
    )


def _reduced_state_from_vector(sys: SimpleOpenSystem, y: np.ndarray) -> ThermoState:
    n_q = sys.n_q
    return ThermoState(
        q=y[:n_q],
        v_q=y[n_q : 2 * n_q],
        S=y[2 * n_q],
        N=y[2 * n_q + 1],
        Gamma=y[2 * n_q + 2],
        W=y[2 * n_q + 3],
        Sigma=y[2 * n_q + 4],
    )


def _reduced_field(sys: SimpleOpenSystem, t: float, y: np.ndarray) -> np.ndarray:
    ts = _reduced_state_from_vector(sys, y)
    r = reduced_rhs(sys, t, ts)
    return np.concatenate(
        [r.qdot, r.vqdot, [r.Sdot, r.Ndot, r.Gammadot, r.Wdot, r.Sigmadot]]
    )


def run_reduced(
    sys: SimpleOpenSystem,
    t0: float,
    ts0: ThermoState,
    h: float,
    n_steps: int,
    pt0: float | None = None,
    newton_tol: float = 1e-12,
    max_iter: int = 50,
) -> Trajectory:
    """Integrate the reduced path with the implicit midpoint rule.

    Each step solves y1 - y0 = h f(t + h/2, (y0 + y1)/2) by a chord Newton
    iteration; the momentum conjugate to time advances with the midpoint rate
    -(P_M + P_H). The returned trajectory is lifted to the full bundle arrays
    (velocities of the bookkeeping slots are the reduced rates, momenta the
    fiber derivative, multiplier exactly 1), with formulation "reduced".
    """

    if h <= 0:
        raise ValueError("step size must be positive")
    if pt0 is None:
        pt0 = initial_pontryagin_state(sys, t0, ts0).pt

    dim = 2 * sys.n_q + 5
    K = int(n_steps)
    ys = np.empty((K + 1, dim))
    pts = np.empty(K + 1)
    ys[0] = _reduced_state_vector(ts0)
    pts[0] = float(pt0)

    lu = None
    from scipy.linalg import lu_factor, lu_solve

    def factor(residual, y):
        r0 = residual(y)
        J = np.empty((dim, dim))
        for j in range(dim):
            eps = 1.49e-8 * (1.0 + abs(y[j]))
            yp = y.copy()
            yp[j] += eps
            J[:, j] = (residual(yp) - r0) / eps
        return lu_factor(J)

    for k in range(K):
        t = t0 + k * h
        tm = t + 0.5 * h
        y0 = ys[k]

        def residual(y1):
            return (y1 - y0) / h - _reduced_field(sys, tm, 0.5 * (y0 + y1))

        y = y0 + h * _reduced_field(sys, t, y0)
        if lu is None:
            lu = factor(residual, y)
        r = residual(y)
        rn = float(np.max(np.abs(r)))
        converged = rn <= newton_tol
        for it in range(max_iter):
            if converged:
                break
            y = y - lu_solve(lu, r)
            r = residual(y)
            prev, rn = rn, float(np.max(np.abs(r)))
            if rn <= newton_tol:
                converged = True
            elif it >= 2 and rn > 0.9 * prev:
                lu = factor(residual, y)
        if not converged:
            raise StepFailureError(
                f"reduced step {k} did not converge (residual {rn:.3e})"
            )
        for _ in range(3):
            if rn <= 1e-15:
                break
            y2 = y - lu_solve(lu, r)
            r2 = residual(y2)
            rn2 = float(np.max(np.abs(r2)))
            if rn2 >= rn:
                break
            y, r, rn = y2, r2, rn2
        ys[k + 1] = y
        ym = _reduced_state_from_vector(sys, 0.5 * (y0 + y))
        pts[k + 1] = pts[k] + h * reduced_rhs(sys, tm, ym).ptdot

    lay = sys.layout
    t_nodes = t0 + h * np.arange(K + 1)
    x = np.empty((K + 1, lay.n))
    v = np.empty((K + 1, lay.n))
    p = np.empty((K + 1, lay.n))
    for k in range(K + 1):
        ts = _reduced_state_from_vector(sys, ys[k])
        xk, vk, _ = _full_arrays(sys, t_nodes[k], ts)
        x[k] = xk
        v[k] = vk
        p[k] = momenta_from_state(sys, ts)
    return Trajectory(
        formulation="reduced",
        h=float(h),
        t=t_nodes,
        x=x,
        v=v,
        p=p,
        pt=pts,
        lam=np.ones((K, 1)),
        newton_iters=np.zeros(K, dtype=int),
    )


def lifted_midpoint_samples(sys: SimpleOpenSystem, traj: Trajectory):
    """Collocation-point lifts of a reduced trajectory, one per step.

    Yields (state, rate, lam) where the state sits at the midpoint in the
    sense of the integrator (averaged nodes, with bookkeeping velocities and
    momenta evaluated at the averaged point) and the rate is the finite
    difference across the step with dt = 1. Along reduced runs the full
    mixed-bundle residual vanishes at these samples up to round-off for
    constant mass matrices.
    """

    lay = sys.layout
    for k in range(traj.n_steps):
        tm = 0.5 * (traj.t[k] + traj.t[k + 1])
        xm = 0.5 * (traj.x[k] + traj.x[k + 1])
        vqm = 0.5 * (traj.v[k][lay.q] + traj.v[k + 1][lay.q])
        tsm = ThermoState(
            q=xm[lay.q],
            v_q=vqm,
            S=xm[lay.S],
            N=xm[lay.N],
            Gamma=xm[lay.Gamma],
            W=xm[lay.W],
            Sigma=xm[lay.Sigma],
        )
        _, vm, _ = _full_arrays(sys, tm, tsm)
        pm = momenta_from_state(sys, tsm)
        state = PontryaginState(
            t=tm,
            x=xm,
            v=vm,
            pt=0.5 * (traj.pt[k] + traj.pt[k + 1]),
            p=pm,
        )
        h = traj.t[k + 1] - traj.t[k]
        rate = TangentP(
            dt=1.0,
            dx=(traj.x[k + 1] - traj.x[k]) / h,
            dv=(traj.v[k + 1] - traj.v[k]) / h,
            dpt=(traj.pt[k + 1] - traj.pt[k]) / h,
            dp=(traj.p[k + 1] - traj.p[k]) / h,
        )
        yield state, rate, np.ones(1)


def first_law_residual(sys: SimpleOpenSystem, traj: Trajectory) -> np.ndarray:
    """Cumulative first-law residual E(t) - E(0) - integral of the power flows.

    The power flows are integrated with the trapezoid rule on the trajectory
    nodes, matching the integrator's order. Returns one residual per node
    (zero at the first).
    """

    L = build_extended_lagrangian(sys)
    K = traj.n_steps
    E = np.empty(K + 1)
    P = np.empty(K + 1)
    for k in range(K + 1):
        t, xk, vk, pk = traj.t[k], traj.x[k], traj.v[k], traj.p[k]
        E[k] = float(pk @ vk) - float(L.value(t, xk, vk))
        ts = state_from_arrays(sys, xk, vk)
        P[k] = power_flows(sys, t, ts).total
    h = np.diff(traj.t)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * h * (P[:-1] + P[1:]))])
    return (E - E[0]) - integral


def random_physical_point(
    sys: SimpleOpenSystem,
    rng: np.random.Generator,
    around: ThermoState,
    t_span: tuple[float, float] = (0.0, 10.0),
    spread: float = 0.5,
) -> PontryaginState:
    """Random point of the mixed bundle inside the physical domain.

    Mechanical coordinates, velocities and all momenta are drawn around the
    reference state; S is perturbed additively and N multiplicatively so the
    temperature stays defined. The bookkeeping velocities are free fiber
    coordinates and are drawn unconstrained.
    """

    lay = sys.layout
    t = float(rng.uniform(*t_span))
    x = np.zeros(lay.n)
    x[lay.q] = around.q + rng.uniform(-spread, spread, sys.n_q)
    x[lay.S] = around.S + 0.4 * spread * rng.uniform(-1.0, 1.0)
    x[lay.N] = around.N * (1.0 + 0.4 * spread * rng.uniform(-1.0, 1.0))
    x[lay.Gamma] = around.Gamma + rng.uniform(-spread, spread)
    x[lay.W] = around.W + rng.uniform(-spread, spread)
    x[lay.Sigma] = around.Sigma + rng.uniform(-spread, spread)
    v = rng.uniform(-spread, spread, lay.n)
    v[lay.q] = around.v_q + rng.uniform(-spread, spread, sys.n_q)
    return PontryaginState(
        t=t,
        x=x,
        v=v,
        pt=float(rng.uniform(-1.0, 1.0)),
        p=rng.uniform(-1.0, 1.0, lay.n),
    )


def linear_friction(gamma: float | np.ndarray):
    """Friction force F = -gamma v_q (gamma scalar or per-component array)."""

    g = np.asarray(gamma, dtype=float)

    def force(t, ts: ThermoState) -> np.ndarray:
        return -g * ts.v_q

    return force


def ideal_gas_fixture(
    c: float = 1.0,
    T0: float = 1.0,
    s0: float = 1.0,
    mass: float = 1.0,
    stiffness: float = 1.0,
    n_q: int = 1,
    friction: Callable[[float, ThermoState], np.ndarray] | None = None,
    ports: tuple[PortModel, ...] = (),
    sources: tuple[HeatSourceModel, ...] = (),
    f_ext: Callable[[float, ThermoState], np.ndarray] | None = None,
) -> SimpleOpenSystem:
    """Piston on a spring coupled to an ideal gas internal energy.

    L_mech = mass |v|^2 / 2 - stiffness |q|^2 / 2 - U(S, N) with
    U = c N T0 exp((S - N s0) / (c N)). The temperature is
    T = T0 exp((S - N s0) / (c N)), so T = T0 exactly at S = N s0, T is
    invariant under joint doubling of S and N, and the chemical potential is
    mu = T (c - S / N).
    """

    if c <= 0 or T0 <= 0:
        raise ValueError("heat capacity and reference temperature must be positive")

    def _z(S, N):
        if N <= 0:
            raise NonpositiveTemperatureError(
                f"mole number N = {N!r} must be positive for the ideal gas energy"
            )
        return (S - N * s0) / (c * N)

    def U(S, N):
        return c * N * T0 * np.exp(_z(S, N))

    def T_of(S, N):
        return T0 * np.exp(_z(S, N))

    def value(q, v, S, N):
        return (
            0.5 * mass * float(v @ v)
            - 0.5 * stiffness * float(q @ q)
            - U(S, N)
        )

    def d_q(q, v, S, N):
        return -stiffness * q

    def d_v(q, v, S, N):
        return mass * v

    def d_S(q, v, S, N):
        return -T_of(S, N)

    def d_N(q, v, S, N):
        return -T_of(S, N) * (c - S / N)

    def d_vv(q, v, S, N):
        return mass * np.eye(n_q)

    mech = MechanicalLagrangian(
        n_q=n_q,
        value=value,
        d_q=d_q,
        d_v=d_v,
        d_S=d_S,
        d_N=d_N,
        d_vv=d_vv,
    )
    return SimpleOpenSystem(
        mech=mech,
        friction=friction,
        ports=tuple(ports),
        sources=tuple(sources),
        f_ext=f_ext,
    )
