"""Command line interface: run, compare, and check simulations from JSON
configurations.

A configuration is either a path to a JSON file or the name of a bundled
builtin scenario. Schedules (time-dependent inputs) are written as a plain
number for a constant or as a list of [time, value] pairs interpolated
piecewise-linearly and clamped at the ends.

Exit codes: 0 all monitored tolerances met, 1 a tolerance was violated,
2 configuration or formulation error, 3 solver failure.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import click
import numpy as np

from .dynamics import (
    ImplicitMidpointStepper,
    StepFailureError,
    Trajectory,
    monitor_invariants,
    recover_multipliers,
)
from .geometry import (
    ConstraintSet,
    PontryaginState,
    dirac_membership_P,
    dirac_pairing,
    dirac_rank,
    random_dirac_element,
)
from .lagrangian import (
    ExternalForce,
    TimeLagrangian,
    check_derivatives,
    d_covariant_energy,
    generalized_energy,
    lagrangian_energy,
    legendre_dual,
    lift_external_force,
)
from . import thermo as th

FORMULATIONS_THERMO = ("pontryagin", "lagrange-dirac", "reduced")
FORMULATIONS_MECH = ("pontryagin", "lagrange-dirac", "hamilton-dirac")

HAMILTON_DIRAC_THERMO_MESSAGE = (
    "hamilton-dirac is unavailable for open thermodynamic systems: the "
    "extended Lagrangian is degenerate in the bookkeeping velocities, so no "
    "Hamiltonian exists on the extended phase space. Use pontryagin, "
    "lagrange-dirac, or reduced."
)


class ConfigError(Exception):
    def __init__(self, field: str, msg: str):
        super().__init__(f"config error at {field}: {msg}")
        self.field = field
        self.msg = msg


class FormulationUnavailable(Exception):
    pass


def _fmt(x: float) -> str:
    # repr of a Python float is the shortest string that round-trips.
    return repr(float(x))


# -- schedules and config loading ----------------------------------------


def make_schedule(spec, field: str):
    """Constant or piecewise-linear schedule from a config entry."""

    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        value = float(spec)
        return lambda t: value
    if isinstance(spec, list):
        if not spec or not all(
            isinstance(p, list) and len(p) == 2
            and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in p)
            for p in spec
        ):
            raise ConfigError(field, "schedule must be a number or a list of [t, value] pairs")
        ts = np.array([p[0] for p in spec], dtype=float)
        vs = np.array([p[1] for p in spec], dtype=float)
        if np.any(np.diff(ts) <= 0):
            raise ConfigError(field, "schedule times must be strictly increasing")
        return lambda t: float(np.interp(t, ts, vs))
    raise ConfigError(field, "schedule must be a number or a list of [t, value] pairs")


def _get(cfg: dict, field: str, default=None, required: bool = False):
    parts = field.split(".")
    node = cfg
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(".".join(parts[: i + 1]), "missing required entry")
            return default
        node = node[part]
    return node


def _positive(cfg: dict, field: str, default=None) -> float:
    raw = _get(cfg, field, default, required=default is None)
    try:
        val = float(raw)
    except (TypeError, ValueError):
        raise ConfigError(field, f"expected a number, got {raw!r}") from None
    if not val > 0:
        raise ConfigError(field, f"must be positive, got {val!r}")
    return val


def _vector(cfg: dict, field: str, n: int, default=None) -> np.ndarray:
    raw = _get(cfg, field, default, required=default is None)
    try:
        vec = np.asarray(raw, dtype=float).reshape(n)
    except (TypeError, ValueError):
        raise ConfigError(field, f"expected {n} numbers") from None
    return vec


# -- builtin scenarios ----------------------------------------------------


def _two_port_piston() -> dict:
    return {
        "system": {
            "kind": "ideal_gas",
            "n_q": 1,
            "c": 1.0,
            "T0": 1.0,
            "s0": 1.0,
            "mass": 1.0,
            "stiffness": 1.0,
            "friction_gamma": 0.05,
            "ports": [
                {"J": 0.01, "molar_entropy": 1.02, "mu": 0.02, "T": 1.05},
                {
                    "J": [[0.0, -0.006], [10.0, -0.01]],
                    "molar_entropy": 0.98,
                    "mu": -0.01,
                    "T": 0.97,
                },
            ],
            "sources": [{"kappa": 0.02, "T": [[0.0, 1.1], [10.0, 1.05]]}],
        },
        "initial": {"q": [0.2], "v_q": [0.0], "S": 1.0, "N": 1.0},
        "integrator": {"formulation": "pontryagin", "h": 0.001, "horizon": 10.0},
        "output": {"prefix": "two_port_piston"},
    }


def _conduction_piston() -> dict:
    return {
        "system": {
            "kind": "ideal_gas",
            "n_q": 1,
            "c": 1.0,
            "T0": 1.0,
            "s0": 1.0,
            "mass": 1.0,
            "stiffness": 1.0,
            "friction_gamma": 0.05,
            "sources": [{"kappa": 0.05, "T": [[0.0, 1.2], [10.0, 1.05]]}],
        },
        "initial": {"q": [0.2], "v_q": [0.0], "S": 1.0, "N": 1.0},
        "integrator": {"formulation": "pontryagin", "h": 0.001, "horizon": 10.0},
        "tolerances": {"entropy_production_min": -1e-12},
        "output": {"prefix": "conduction_piston"},
    }


def _matched_port_piston() -> dict:
    return {
        "system": {
            "kind": "ideal_gas",
            "n_q": 1,
            "c": 1.0,
            "T0": 1.0,
            "s0": 1.0,
            "mass": 1.0,
            "stiffness": 1.0,
            "ports": [{"J": 0.02, "molar_entropy": 1.0, "matched": True}],
        },
        "initial": {"q": [0.2], "v_q": [0.0], "S": 1.0, "N": 1.0},
        "integrator": {"formulation": "pontryagin", "h": 0.001, "horizon": 10.0},
        "output": {"prefix": "matched_port_piston"},
    }


def _closed_piston() -> dict:
    return {
        "system": {
            "kind": "ideal_gas",
            "n_q": 1,
            "c": 1.0,
            "T0": 1.0,
            "s0": 1.0,
            "mass": 1.0,
            "stiffness": 1.0,
        },
        "initial": {"q": [0.3], "v_q": [0.0], "S": 1.0, "N": 1.0},
        "integrator": {"formulation": "pontryagin", "h": 0.001, "horizon": 10.0},
        "output": {"prefix": "closed_piston"},
    }


def _nonholonomic_particle() -> dict:
    return {
        "system": {
            "kind": "nonholonomic_particle",
            "mass": 1.0,
            "beta": [[0.0, 0.0], [10.0, 3.0]],
        },
        "initial": {"x": [0.0, 0.0], "v": [1.0, 0.0]},
        "integrator": {"formulation": "pontryagin", "h": 0.001, "horizon": 1.0},
        "output": {"prefix": "nonholonomic_particle"},
    }


BUILTINS = {
    "two_port_piston": _two_port_piston,
    "conduction_piston": _conduction_piston,
    "matched_port_piston": _matched_port_piston,
    "closed_piston": _closed_piston,
    "nonholonomic_particle": _nonholonomic_particle,
}


def load_config(source: str) -> dict:
    path = Path(source)
    if path.exists():
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise ConfigError(str(path), "top level must be an object")
        return cfg
    if source in BUILTINS:
        return BUILTINS[source]()
    raise ConfigError(
        "config",
        f"{source!r} is neither a file nor a builtin; "
        f"builtins: {', '.join(sorted(BUILTINS))}",
    )


# -- problem assembly -----------------------------------------------------


@dataclasses.dataclass
class Problem:
    kind: str
    cfg: dict
    L: TimeLagrangian
    vel_constraints: ConstraintSet
    mom_constraints: ConstraintSet
    initial: PontryaginState
    h: float
    n_steps: int
    formulation: str
    tolerances: dict
    prefix: str
    system: th.SimpleOpenSystem | None = None
    ts0: th.ThermoState | None = None
    f_ext_force: ExternalForce | None = None


def _build_thermo_system(cfg: dict) -> tuple[th.SimpleOpenSystem, int]:
    scfg = _get(cfg, "system", required=True)
    n_q = int(_positive(cfg, "system.n_q", 1))
    base = th.ideal_gas_fixture(
        c=_positive(cfg, "system.c", 1.0),
        T0=_positive(cfg, "system.T0", 1.0),
        s0=float(_get(cfg, "system.s0", 1.0)),
        mass=_positive(cfg, "system.mass", 1.0),
        stiffness=_positive(cfg, "system.stiffness", 1.0),
        n_q=n_q,
    )

    gamma = float(_get(cfg, "system.friction_gamma", 0.0))
    if gamma < 0:
        raise ConfigError("system.friction_gamma", "must be nonnegative")
    friction = th.linear_friction(gamma) if gamma > 0 else None

    def sys_T(ts):
        return th.temperature(base, ts)

    def sys_mu(ts):
        return th.chemical_potential(base, ts)

    ports = []
    for i, pcfg in enumerate(scfg.get("ports", [])):
        fld = f"system.ports[{i}]"
        if not isinstance(pcfg, dict):
            raise ConfigError(fld, "must be an object")
        J_sched = make_schedule(pcfg.get("J", 0.0), fld + ".J")
        if "J_S" in pcfg and "molar_entropy" in pcfg:
            raise ConfigError(fld, "give J_S or molar_entropy, not both")
        if "molar_entropy" in pcfg:
            s_sched = make_schedule(pcfg["molar_entropy"], fld + ".molar_entropy")
            J_S = lambda t, ts, J=J_sched, s=s_sched: s(t) * J(t)
        else:
            JS_sched = make_schedule(pcfg.get("J_S", 0.0), fld + ".J_S")
            J_S = lambda t, ts, f=JS_sched: f(t)
        if pcfg.get("matched", False):
            mu = lambda t, ts: sys_mu(ts)
            T_port = lambda t, ts: sys_T(ts)
        else:
            if "mu" not in pcfg or "T" not in pcfg:
                raise ConfigError(fld, "needs mu and T schedules (or matched: true)")
            mu_sched = make_schedule(pcfg["mu"], fld + ".mu")
            T_sched = make_schedule(pcfg["T"], fld + ".T")
            mu = lambda t, ts, f=mu_sched: f(t)
            T_port = lambda t, ts, f=T_sched: f(t)
        ports.append(
            th.PortModel(J=lambda t, ts, f=J_sched: f(t), J_S=J_S, mu=mu, T_port=T_port)
        )

    sources = []
    for i, hcfg in enumerate(scfg.get("sources", [])):
        fld = f"system.sources[{i}]"
        if not isinstance(hcfg, dict):
            raise ConfigError(fld, "must be an object")
        if "T" not in hcfg:
            raise ConfigError(fld, "needs a T schedule")
        T_sched = make_schedule(hcfg["T"], fld + ".T")
        if "kappa" in hcfg:
            kappa = float(hcfg["kappa"])
            if kappa < 0:
                raise ConfigError(fld + ".kappa", "must be nonnegative")
            J_S = lambda t, ts, k=kappa, f=T_sched: k * (f(t) - sys_T(ts))
        else:
            JS_sched = make_schedule(hcfg.get("J_S", 0.0), fld + ".J_S")
            J_S = lambda t, ts, f=JS_sched: f(t)
        sources.append(
            th.HeatSourceModel(J_S=J_S, T_source=lambda t, ts, f=T_sched: f(t))
        )

    f_ext = None
    if "external_force" in scfg:
        raw = scfg["external_force"]
        # One schedule per configuration coordinate; a single schedule (number
        # or [[t, value], ...] table) is accepted when n_q == 1.
        if isinstance(raw, list) and all(isinstance(c, list) for c in raw) and raw and not (
            raw[0] and isinstance(raw[0][0], (int, float))
        ):
            scheds = [
                make_schedule(comp, f"system.external_force[{i}]")
                for i, comp in enumerate(raw)
            ]
        else:
            scheds = [make_schedule(raw, "system.external_force")]
        if len(scheds) != n_q:
            raise ConfigError(
                "system.external_force", f"needs {n_q} component schedules"
            )
        f_ext = lambda t, ts: np.array([f(t) for f in scheds])

    return (
        dataclasses.replace(
            base,
            friction=friction,
            ports=tuple(ports),
            sources=tuple(sources),
            f_ext=f_ext,
        ),
        n_q,
    )


def _nonholonomic_setup(cfg: dict) -> tuple[TimeLagrangian, ConstraintSet]:
    mass = _positive(cfg, "system.mass", 1.0)
    beta = make_schedule(_get(cfg, "system.beta", 0.0), "system.beta")
    n = 2

    L = TimeLagrangian(
        n=n,
        value=lambda t, x, v: 0.5 * mass * float(v @ v),
        d_t=lambda t, x, v: 0.0,
        d_x=lambda t, x, v: np.zeros(n),
        d_v=lambda t, x, v: mass * v,
        d_vv=lambda t, x, v: mass * np.eye(n),
    )
    constraints = ConstraintSet(
        n=n,
        m=1,
        eval_A=lambda t, x, w: np.array([[t, -1.0]]),
        eval_B=lambda t, x, w: np.array([beta(t)]),
    )
    return L, constraints


def build_problem(cfg: dict, formulation_override: str | None = None) -> Problem:
    kind = _get(cfg, "system.kind", required=True)
    h = _positive(cfg, "integrator.h")
    horizon = _positive(cfg, "integrator.horizon")
    n_steps = int(round(horizon / h))
    if n_steps < 1:
        raise ConfigError("integrator.horizon", "must cover at least one step")
    formulation = formulation_override or _get(
        cfg, "integrator.formulation", "pontryagin"
    )
    t0 = float(_get(cfg, "initial.t0", 0.0))
    prefix = str(_get(cfg, "output.prefix", "run"))
    tolerances = dict(_get(cfg, "tolerances", {}) or {})

    if kind == "ideal_gas":
        system, n_q = _build_thermo_system(cfg)
        if formulation not in FORMULATIONS_THERMO:
            if formulation == "hamilton-dirac":
                raise FormulationUnavailable(HAMILTON_DIRAC_THERMO_MESSAGE)
            raise ConfigError(
                "integrator.formulation",
                f"{formulation!r} not in {FORMULATIONS_THERMO}",
            )
        ts0 = th.ThermoState(
            q=_vector(cfg, "initial.q", n_q),
            v_q=_vector(cfg, "initial.v_q", n_q),
            S=float(_get(cfg, "initial.S", required=True)),
            N=float(_get(cfg, "initial.N", required=True)),
            Gamma=float(_get(cfg, "initial.Gamma", 0.0)),
            W=float(_get(cfg, "initial.W", 0.0)),
            Sigma=float(_get(cfg, "initial.Sigma", 0.0)),
        )
        L = th.build_extended_lagrangian(system)
        force = None
        if system.f_ext is not None:
            if formulation == "lagrange-dirac":
                raise ConfigError(
                    "system.external_force",
                    "external forces run on the pontryagin or reduced path",
                )
            lay = system.layout

            def full_force(t, x, v, lay=lay, system=system):
                out = np.zeros(lay.n)
                ts = th.state_from_arrays(system, x, v)
                out[lay.q] = system.f_ext(t, ts)
                return out

            force = ExternalForce(n=lay.n, value=full_force)
        return Problem(
            kind=kind,
            cfg=cfg,
            L=L,
            vel_constraints=th.build_constraints(system),
            mom_constraints=th.build_momentum_constraints(system),
            initial=th.initial_pontryagin_state(system, t0, ts0),
            h=h,
            n_steps=n_steps,
            formulation=formulation,
            tolerances=tolerances,
            prefix=prefix,
            system=system,
            ts0=ts0,
            f_ext_force=force,
        )

    if kind == "nonholonomic_particle":
        if formulation not in FORMULATIONS_MECH:
            raise ConfigError(
                "integrator.formulation",
                f"{formulation!r} not valid for a mechanical system "
                f"(choose from {FORMULATIONS_MECH})",
            )
        L, constraints = _nonholonomic_setup(cfg)
        x0 = _vector(cfg, "initial.x", 2)
        v0 = _vector(cfg, "initial.v", 2)
        res = constraints.A(t0, x0, v0) @ v0 + constraints.B(t0, x0, v0)
        if np.max(np.abs(res)) > 1e-8:
            raise ConfigError(
                "initial.v", f"violates the kinematic constraint (residual {res})"
            )
        p0 = np.asarray(L.d_v(t0, x0, v0), dtype=float)
        state0 = PontryaginState(
            t=t0, x=x0, v=v0, pt=-lagrangian_energy(L, t0, x0, v0), p=p0
        )
        return Problem(
            kind=kind,
            cfg=cfg,
            L=L,
            vel_constraints=constraints,
            mom_constraints=constraints,
            initial=state0,
            h=h,
            n_steps=n_steps,
            formulation=formulation,
            tolerances=tolerances,
            prefix=prefix,
        )

    raise ConfigError("system.kind", f"unknown kind {kind!r}")


# -- running --------------------------------------------------------------


def run_formulation(problem: Problem, formulation: str) -> Trajectory:
    if problem.kind == "ideal_gas":
        if formulation == "hamilton-dirac":
            raise FormulationUnavailable(HAMILTON_DIRAC_THERMO_MESSAGE)
        if formulation == "reduced":
            return th.run_reduced(
                problem.system,
                problem.initial.t,
                problem.ts0,
                problem.h,
                problem.n_steps,
                pt0=problem.initial.pt,
            )
        constraints = (
            problem.mom_constraints
            if formulation == "lagrange-dirac"
            else problem.vel_constraints
        )
        stepper = ImplicitMidpointStepper(
            formulation,
            lagrangian=problem.L,
            constraints=constraints,
            f_ext=problem.f_ext_force if formulation == "pontryagin" else None,
        )
        return stepper.run(problem.initial, problem.h, problem.n_steps)

    if formulation == "reduced":
        raise ConfigError(
            "integrator.formulation",
            "the reduced path applies to thermodynamic systems only",
        )
    if formulation == "hamilton-dirac":
        H = legendre_dual(problem.L)
        from .geometry import PhasePoint

        z0 = PhasePoint(
            t=problem.initial.t,
            x=problem.initial.x,
            pt=problem.initial.pt,
            p=problem.initial.p,
        )
        stepper = ImplicitMidpointStepper(
            "hamilton-dirac", hamiltonian=H, constraints=problem.mom_constraints
        )
        return stepper.run(z0, problem.h, problem.n_steps)
    constraints = (
        problem.mom_constraints
        if formulation == "lagrange-dirac"
        else problem.vel_constraints
    )
    stepper = ImplicitMidpointStepper(
        formulation, lagrangian=problem.L, constraints=constraints
    )
    return stepper.run(problem.initial, problem.h, problem.n_steps)


# -- output ---------------------------------------------------------------


def _lam_column(traj: Trajectory) -> np.ndarray:
    # One multiplier value per node row; each step's multiplier goes to the
    # row the step ends on, and the first row repeats the first step's value.
    if traj.lam.shape[1] == 0:
        return np.zeros(traj.n_steps + 1)
    lam = traj.lam[:, 0]
    return np.concatenate([[lam[0]], lam])


def write_trajectory_csv(path: Path, problem: Problem, traj: Trajectory, inv) -> None:
    lam_col = _lam_column(traj)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        if problem.kind == "ideal_gas":
            system = problem.system
            lay = system.layout
            n_q = system.n_q
            flr = th.first_law_residual(system, traj)
            header = (
                ["t"]
                + [f"q_{i}" for i in range(n_q)]
                + [f"v_q_{i}" for i in range(n_q)]
                + ["S", "N", "Gamma", "W", "Sigma"]
                + [f"p_q_{i}" for i in range(n_q)]
                + ["p_S", "p_N", "p_Gamma", "p_W", "p_Sigma", "pt", "lam"]
                + ["E", "cov_E", "P_W", "P_H", "P_M", "I", "kinematic_res", "first_law_res"]
            )
            wr.writerow(header)
            for k in range(traj.n_steps + 1):
                t = traj.t[k]
                x, v, p = traj.x[k], traj.v[k], traj.p[k]
                ts = th.state_from_arrays(system, x, v)
                E = generalized_energy(problem.L, t, x, v, p)
                flows = th.power_flows(system, t, ts)
                prod = th.entropy_production(system, t, ts)
                row = (
                    [t]
                    + list(x[lay.q])
                    + list(v[lay.q])
                    + [x[lay.S], x[lay.N], x[lay.Gamma], x[lay.W], x[lay.Sigma]]
                    + list(p[lay.q])
                    + [p[lay.S], p[lay.N], p[lay.Gamma], p[lay.W], p[lay.Sigma]]
                    + [traj.pt[k], lam_col[k]]
                    + [
                        E,
                        traj.pt[k] + E,
                        flows.mechanical,
                        flows.heating,
                        flows.matter,
                        prod.total,
                        inv.kinematic_residual[k],
                        flr[k],
                    ]
                )
                wr.writerow([_fmt(vv) for vv in row])
        else:
            n = traj.n
            header = (
                ["t"]
                + [f"x_{i}" for i in range(n)]
                + [f"v_{i}" for i in range(n)]
                + [f"p_{i}" for i in range(n)]
                + ["pt", "lam", "E", "cov_E", "kinematic_res"]
            )
            wr.writerow(header)
            for k in range(traj.n_steps + 1):
                t = traj.t[k]
                x, v, p = traj.x[k], traj.v[k], traj.p[k]
                E = generalized_energy(problem.L, t, x, v, p)
                row = (
                    [t]
                    + list(x)
                    + list(v)
                    + list(p)
                    + [traj.pt[k], lam_col[k], E, traj.pt[k] + E, inv.kinematic_residual[k]]
                )
                wr.writerow([_fmt(vv) for vv in row])


def write_invariants_csv(path: Path, inv) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        header = ["t_mid", "covariant_energy_drift", "energy_balance_residual"]
        has_entropy = inv.entropy_decomposition_residual is not None
        if has_entropy:
            header.append("entropy_decomposition_residual")
        wr.writerow(header)
        for k in range(inv.t_mid.shape[0]):
            row = [
                inv.t_mid[k],
                inv.covariant_energy_drift[k + 1],
                inv.energy_balance_residual[k],
            ]
            if has_entropy:
                row.append(inv.entropy_decomposition_residual[k])
            wr.writerow([_fmt(vv) for vv in row])


def evaluate_tolerances(
    problem: Problem,
    formulation: str,
    inv,
    first_law: np.ndarray | None,
    tol_override,
    cov_drift: np.ndarray | None = None,
) -> tuple[bool, list[str]]:
    tols = problem.tolerances
    is_thermo = problem.kind == "ideal_gas"

    def tol_of(name, default):
        if tol_override is not None:
            return tol_override
        val = tols.get(name)
        return default if val is None else float(val)

    forced = cov_drift is not None
    if cov_drift is None:
        cov_drift = inv.covariant_energy_drift

    checks: list[tuple[str, float, float, bool]] = []
    checks.append(
        (
            "max |covariant energy drift|"
            + (" net of external work" if forced else ""),
            float(np.max(np.abs(cov_drift))),
            tol_of("covariant_energy", 1e-6),
            True,
        )
    )
    checks.append(
        (
            "max |energy balance residual|",
            float(np.max(np.abs(inv.energy_balance_residual), initial=0.0)),
            tol_of("energy_balance", 1e-8),
            True,
        )
    )
    checks.append(
        (
            "max kinematic residual",
            float(np.max(inv.kinematic_residual)),
            tol_of("kinematic", 1e-9),
            True,
        )
    )
    if is_thermo:
        checks.append(
            (
                "max |first law residual|",
                float(np.max(np.abs(first_law))),
                tol_of("first_law", 1e-6),
                True,
            )
        )
        ed_default = 1e-10 if formulation == "reduced" else 1e-9
        checks.append(
            (
                "max |entropy decomposition residual|",
                float(
                    np.max(np.abs(inv.entropy_decomposition_residual), initial=0.0)
                ),
                tol_of("entropy_decomposition", ed_default),
                True,
            )
        )

    lines = []
    passed = True
    for name, value, tol, upper in checks:
        ok = value <= tol
        passed &= ok
        lines.append(f"{name}: {_fmt(value)} (tol {_fmt(tol)}) {'OK' if ok else 'FAIL'}")

    if is_thermo:
        floor = tols.get("entropy_production_min")
        min_I = float(np.min(inv.entropy_production))
        if floor is None:
            lines.append(f"min entropy production: {_fmt(min_I)} (no floor configured)")
        else:
            ok = min_I >= float(floor)
            passed &= ok
            lines.append(
                f"min entropy production: {_fmt(min_I)} "
                f"(floor {_fmt(float(floor))}) {'OK' if ok else 'FAIL'}"
            )
    return passed, lines


def _run_and_report(problem: Problem, formulation: str, outdir: Path, tol_override):
    traj = run_formulation(problem, formulation)
    inv = monitor_invariants(
        problem.L, problem.vel_constraints, traj, thermo_system=problem.system
    )
    first_law = (
        th.first_law_residual(problem.system, traj)
        if problem.kind == "ideal_gas"
        else None
    )
    cov_drift = None
    if problem.kind == "ideal_gas" and problem.system.f_ext is not None:
        # External forces do work on the mechanics, which the covariant energy
        # legitimately accumulates; the conserved quantity is the drift net of
        # the external work integral (trapezoid on the nodes, matching the
        # first-law quadrature).
        P_W = np.empty(traj.n_steps + 1)
        for k in range(traj.n_steps + 1):
            ts = th.state_from_arrays(problem.system, traj.x[k], traj.v[k])
            P_W[k] = th.power_flows(problem.system, traj.t[k], ts).mechanical
        dt = np.diff(traj.t)
        work = np.concatenate([[0.0], np.cumsum(0.5 * dt * (P_W[:-1] + P_W[1:]))])
        cov_drift = inv.covariant_energy_drift - work
    outdir.mkdir(parents=True, exist_ok=True)
    prefix = problem.prefix
    write_trajectory_csv(outdir / f"{prefix}_trajectory.csv", problem, traj, inv)
    write_invariants_csv(outdir / f"{prefix}_invariants.csv", inv)
    passed, lines = evaluate_tolerances(
        problem, formulation, inv, first_law, tol_override, cov_drift=cov_drift
    )
    head = [
        f"system: {problem.kind}",
        f"formulation: {formulation}",
        f"steps: {problem.n_steps}  h: {_fmt(problem.h)}",
    ]
    summary = head + lines + [f"overall: {'PASS' if passed else 'FAIL'}"]
    with open(outdir / f"{prefix}_summary.txt", "w") as fh:
        fh.write("\n".join(summary) + "\n")
    return passed, summary, traj


# -- commands -------------------------------------------------------------


@click.group()
def main():
    """Simulate and verify open thermodynamic and nonholonomic systems."""


def _fail(exc: Exception, code: int):
    click.echo(str(exc), err=True)
    raise SystemExit(code)


@main.command()
@click.argument("config")
@click.option("--formulation", default=None, help="Override integrator.formulation.")
@click.option("--out", default=".", help="Output directory.")
@click.option("--tol", type=float, default=None, help="Override all residual tolerances.")
def run(config, formulation, out, tol):
    """Integrate a scenario, write CSVs and a summary, check tolerances."""

    try:
        cfg = load_config(config)
        problem = build_problem(cfg, formulation)
        passed, summary, _ = _run_and_report(
            problem, problem.formulation, Path(out), tol
        )
    except ConfigError as exc:
        _fail(exc, 2)
    except FormulationUnavailable as exc:
        _fail(exc, 2)
    except (StepFailureError, th.NonpositiveTemperatureError) as exc:
        _fail(exc, 3)
    for line in summary:
        click.echo(line)
    raise SystemExit(0 if passed else 1)


@main.command()
@click.argument("config")
@click.option(
    "--formulations",
    default="pontryagin,lagrange-dirac,reduced",
    help="Comma-separated formulations to run and compare.",
)
@click.option("--out", default=None, help="Optional output directory for a report.")
@click.option("--tol", type=float, default=None, help="Agreement tolerance (default 1e-6).")
def compare(config, formulations, out, tol):
    """Run several formulations of one scenario and compare pointwise."""

    tol = 1e-6 if tol is None else tol
    names = [f.strip() for f in formulations.split(",") if f.strip()]
    if not names:
        _fail(ConfigError("--formulations", "need at least one formulation"), 2)
    try:
        cfg = load_config(config)
        problem = build_problem(cfg, names[0])
        trajs = {}
        for name in names:
            trajs[name] = run_formulation(problem, name)
    except ConfigError as exc:
        _fail(exc, 2)
    except FormulationUnavailable as exc:
        _fail(exc, 2)
    except (StepFailureError, th.NonpositiveTemperatureError) as exc:
        _fail(exc, 3)

    lines = [f"compare: {', '.join(names)} over {problem.n_steps} steps at h = {_fmt(problem.h)}"]
    worst = 0.0
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = trajs[names[i]], trajs[names[j]]
            dx = float(np.max(np.abs(a.x - b.x)))
            dp = float(np.max(np.abs(a.p - b.p)))
            dpt = float(np.max(np.abs(a.pt - b.pt)))
            div = max(dx, dp, dpt)
            worst = max(worst, div)
            lines.append(
                f"{names[i]} vs {names[j]}: max|x| {_fmt(dx)} max|p| {_fmt(dp)} "
                f"max|pt| {_fmt(dpt)} overall {_fmt(div)}"
            )
    ok = worst <= tol
    lines.append(
        f"max pointwise divergence: {_fmt(worst)} (tol {_fmt(tol)}) "
        f"{'PASS' if ok else 'FAIL'}"
    )
    for line in lines:
        click.echo(line)
    if out is not None:
        outdir = Path(out)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / f"{problem.prefix}_compare.txt", "w") as fh:
            fh.write("\n".join(lines) + "\n")
    raise SystemExit(0 if ok else 1)


@main.command()
@click.argument("config")
@click.option("--seed", type=int, default=0, help="Seed for the randomized checks.")
@click.option("--samples", type=int, default=30, help="Random points per check.")
@click.option("--steps", type=int, default=200, help="Trajectory steps for the flow checks.")
@click.option("--tol", type=float, default=1e-8, help="Membership tolerance.")
@click.option(
    "--corrupt",
    type=float,
    default=0.0,
    help="Offset added to one momentum slot before the membership checks, to "
    "demonstrate the failure diagnostics.",
)
def check(config, seed, samples, steps, tol, corrupt):
    """Verify structure: ranks, pairings, memberships, declared derivatives."""

    try:
        cfg = load_config(config)
        problem = build_problem(cfg, None)
    except (ConfigError, FormulationUnavailable) as exc:
        _fail(exc, 2)

    rng = np.random.default_rng(seed)
    click.echo(f"check seed: {seed}  samples: {samples}")
    failures = []
    is_thermo = problem.kind == "ideal_gas"
    n = problem.L.n
    horizon = problem.n_steps * problem.h

    def sample_point():
        if is_thermo:
            return th.random_physical_point(
                problem.system, rng, problem.ts0, t_span=(0.0, horizon)
            )
        return PontryaginState(
            t=float(rng.uniform(0.0, horizon)),
            x=rng.uniform(-1.0, 1.0, n),
            v=rng.uniform(-1.0, 1.0, n),
            pt=float(rng.uniform(-1.0, 1.0)),
            p=rng.uniform(-1.0, 1.0, n),
        )

    # Structure at random points: rank, isotropy, membership of construction.
    expected_rank = 3 * n + 2
    worst_rank_defect = 0
    worst_pairing = 0.0
    worst_member = 0.0
    for _ in range(samples):
        pt_ = sample_point()
        r = dirac_rank(pt_, problem.vel_constraints)
        worst_rank_defect = max(worst_rank_defect, abs(r - expected_rank))
        e1 = random_dirac_element(pt_, problem.vel_constraints, rng)
        e2 = random_dirac_element(pt_, problem.vel_constraints, rng)
        worst_pairing = max(
            worst_pairing,
            abs(dirac_pairing(e1, e2)),
            abs(dirac_pairing(e1, e1)),
        )
        rep = dirac_membership_P(pt_, problem.vel_constraints, *e1, tol=tol)
        worst_member = max(worst_member, max(rep.residuals.values()))
    click.echo(f"rank defect: {worst_rank_defect} (expect 0)")
    click.echo(f"max |pairing| on structure elements: {_fmt(worst_pairing)}")
    click.echo(f"max membership residual (constructed): {_fmt(worst_member)}")
    if worst_rank_defect:
        failures.append("rank")
    if worst_pairing > 1e-9:
        failures.append("isotropy")
    if worst_member > tol:
        failures.append("membership-construction")

    # Declared derivatives of the Lagrangian.
    if is_thermo:
        ts0 = problem.ts0

        def dom(r):
            p = th.random_physical_point(
                problem.system, r, ts0, t_span=(0.0, horizon)
            )
            return p.t, p.x, p.v

        report = check_derivatives(problem.L, sample=dom, n_points=50, seed=seed)
    else:
        report = check_derivatives(problem.L, n_points=50, seed=seed)
    click.echo(
        f"derivative check: max rel err {_fmt(report.max_rel_err)} "
        f"at {report.worst_component} "
        f"({'OK' if report.passed else 'FAIL'})"
    )
    if not report.passed:
        failures.append("derivatives")

    # Flow-level membership: the discrete rate paired with the differential of
    # the covariant energy must sit in the structure at every midpoint. The
    # constraint row is imposed at the new node, so its midpoint value carries
    # an O(h^2) placement term; cap the check step so that term sits below the
    # membership tolerance.
    try:
        n_run = min(steps, problem.n_steps)
        if is_thermo:
            traj = th.run_reduced(
                problem.system, problem.initial.t, problem.ts0, problem.h, n_run
            )
            samples_iter = th.lifted_midpoint_samples(problem.system, traj)
        else:
            h_check = min(problem.h, 2e-4)
            traj = run_formulation(
                dataclasses.replace(problem, h=h_check, n_steps=n_run), "pontryagin"
            )
            samples_iter = traj.midpoint_samples()
    except (StepFailureError, th.NonpositiveTemperatureError) as exc:
        _fail(exc, 3)

    slot = problem.system.layout.S if is_thermo else 0
    slot_name = "p_S" if is_thermo else "p_0"
    worst_flow: dict[str, float] = {}
    worst_recover = 0.0
    for state, rate, lam in samples_iter:
        if corrupt:
            p_bad = state.p.copy()
            p_bad[slot] += corrupt
            state = PontryaginState(
                t=state.t, x=state.x, v=state.v, pt=state.pt, p=p_bad
            )
        a = d_covariant_energy(problem.L, state)
        if problem.f_ext_force is not None:
            lift = lift_external_force(problem.f_ext_force, state.t, state.x, state.v)
            a = dataclasses.replace(a, alpha=a.alpha - lift.alpha)
        rep = dirac_membership_P(state, problem.vel_constraints, rate, a, tol=tol)
        for name, val in rep.residuals.items():
            worst_flow[name] = max(worst_flow.get(name, 0.0), val)
        est = recover_multipliers(
            problem.L,
            problem.vel_constraints,
            state,
            rate,
            f_ext=problem.f_ext_force,
        )
        worst_recover = max(worst_recover, est.residual)
    if corrupt:
        click.echo(f"note: {slot_name} offset by {_fmt(corrupt)} before the checks")
    for name in sorted(worst_flow):
        val = worst_flow[name]
        ok = val <= tol
        extra = " (p = dL/dv)" if name == "beta_vanishes" else ""
        click.echo(f"flow membership {name}{extra}: {_fmt(val)} {'OK' if ok else 'FAIL'}")
        if not ok:
            failures.append(f"flow-{name}")
    ok = worst_recover <= tol
    click.echo(f"multiplier recovery residual: {_fmt(worst_recover)} {'OK' if ok else 'FAIL'}")
    if not ok:
        failures.append("multiplier-recovery")

    if failures:
        click.echo(f"check FAILED: {', '.join(failures)}")
        raise SystemExit(1)
    click.echo("check PASSED")
    raise SystemExit(0)


if __name__ == "__main__":
    main()
