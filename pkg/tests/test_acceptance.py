"""Acceptance suite: ten numbered criteria covering structure algebra,
formulation equivalence, conservation laws, entropy accounting, and solver
consistency on the bundled scenarios.

Each test prints one `criterion NN <name>: PASS/FAIL (...)` line with the
measured values (shown under pytest -s / -rA, and on any failure). The
expensive trajectory runs are shared through session-scoped fixtures; the
whole suite targets well under two minutes.
"""

import dataclasses
import time

import numpy as np
import pytest

from diracsim import thermo as th
from diracsim.cli import BUILTINS, build_problem, run_formulation
from diracsim.dynamics import (
    ImplicitMidpointStepper,
    monitor_invariants,
    pontryagin_dirac_residual,
    recover_multipliers,
)
from diracsim.geometry import (
    PontryaginState,
    dirac_pairing,
    dirac_rank,
    random_dirac_element,
    unconstrained,
)
from diracsim.lagrangian import TimeLagrangian, check_derivatives


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


def _max_cov_energy(L: TimeLagrangian, traj) -> float:
    worst = 0.0
    for k in range(traj.n_steps + 1):
        e = (
            traj.pt[k]
            + float(traj.p[k] @ traj.v[k])
            - float(L.value(traj.t[k], traj.x[k], traj.v[k]))
        )
        worst = max(worst, abs(e))
    return worst


# -- shared trajectory runs ------------------------------------------------


@pytest.fixture(scope="session")
def twoport_problem():
    return build_problem(BUILTINS["two_port_piston"]())


@pytest.fixture(scope="session")
def twoport_dae(twoport_problem):
    """Full-DAE two-port piston: h = 1e-3, horizon 10."""

    return run_formulation(twoport_problem, "pontryagin")


@pytest.fixture(scope="session")
def twoport_dae_half(twoport_problem):
    """Same scenario at h = 5e-4 for the order check."""

    prob = dataclasses.replace(twoport_problem, h=5e-4, n_steps=20000)
    return run_formulation(prob, "pontryagin")


@pytest.fixture(scope="session")
def twoport_reduced(twoport_problem):
    return run_formulation(twoport_problem, "reduced")


@pytest.fixture(scope="session")
def mech_problem():
    return build_problem(BUILTINS["nonholonomic_particle"]())


@pytest.fixture(scope="session")
def mech_runs(mech_problem):
    return {
        name: run_formulation(mech_problem, name)
        for name in ("pontryagin", "lagrange-dirac", "hamilton-dirac")
    }


# -- criteria --------------------------------------------------------------


def test_criterion_01_dirac_structure_algebra():
    # Rank 3n + 2 and isotropy of the structure at 1000 random physical
    # points of the two-coordinate piston (n = 7), within a 10 s budget.
    port = th.PortModel(
        J=lambda t, ts: 0.01,
        J_S=lambda t, ts: 0.0102,
        mu=lambda t, ts: 0.02,
        T_port=lambda t, ts: 1.05,
    )
    source = th.HeatSourceModel(
        J_S=lambda t, ts: 0.01, T_source=lambda t, ts: 1.1
    )
    sys2 = th.ideal_gas_fixture(
        n_q=2, friction=th.linear_friction(0.05), ports=(port,), sources=(source,)
    )
    constraints = th.build_constraints(sys2)
    around = th.ThermoState(
        q=np.array([0.2, -0.1]), v_q=np.array([0.0, 0.1]),
        S=1.0, N=1.0, Gamma=0.0, W=0.0, Sigma=0.0,
    )
    expected = 3 * sys2.n + 2
    assert expected == 23

    rng = np.random.default_rng(12345)
    start = time.perf_counter()
    rank_defects = 0
    worst_pairing = 0.0
    for _ in range(1000):
        pt_ = th.random_physical_point(sys2, rng, around)
        if dirac_rank(pt_, constraints) != expected:
            rank_defects += 1
        e1 = random_dirac_element(pt_, constraints, rng)
        e2 = random_dirac_element(pt_, constraints, rng)
        worst_pairing = max(
            worst_pairing,
            abs(dirac_pairing(e1, e2)),
            abs(dirac_pairing(e1, e1)),
        )
    elapsed = time.perf_counter() - start

    ok = rank_defects == 0 and worst_pairing <= 1e-12 and elapsed < 10.0
    _report(
        1, "dirac structure algebra", ok,
        f"rank {expected} at 1000 points ({rank_defects} defects); "
        f"max |pairing| {worst_pairing:.3e} <= 1e-12; {elapsed:.1f} s < 10 s",
    )


def test_criterion_02_reduced_lift_equivalence(
    twoport_problem, twoport_dae, twoport_reduced
):
    # The reduced trajectory, lifted to the mixed bundle, satisfies the full
    # residual at every midpoint over horizon 10; the full DAE matches the
    # reduced trajectory pointwise over horizon 1.
    L = twoport_problem.L
    constraints = twoport_problem.vel_constraints
    worst_residual = 0.0
    for state, rate, lam in th.lifted_midpoint_samples(
        twoport_problem.system, twoport_reduced
    ):
        r = pontryagin_dirac_residual(L, constraints, state, rate, lam)
        worst_residual = max(worst_residual, float(np.max(np.abs(r))))

    n1 = 1001  # nodes covering horizon 1 at h = 1e-3
    divergence = max(
        float(np.max(np.abs(twoport_dae.x[:n1] - twoport_reduced.x[:n1]))),
        float(np.max(np.abs(twoport_dae.p[:n1] - twoport_reduced.p[:n1]))),
        float(np.max(np.abs(twoport_dae.pt[:n1] - twoport_reduced.pt[:n1]))),
    )

    ok = worst_residual <= 1e-8 and divergence <= 1e-6
    _report(
        2, "reduced lift equivalence", ok,
        f"max lifted residual {worst_residual:.3e} <= 1e-8; "
        f"DAE vs reduced over horizon 1: {divergence:.3e} <= 1e-6",
    )


def test_criterion_03_cross_formulation_agreement(mech_runs):
    # All three formulations of the time-dependent affine-constraint particle
    # agree pointwise in (x, p, pt).
    names = list(mech_runs)
    worst = 0.0
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = mech_runs[names[i]], mech_runs[names[j]]
            worst = max(
                worst,
                float(np.max(np.abs(a.x - b.x))),
                float(np.max(np.abs(a.p - b.p))),
                float(np.max(np.abs(a.pt - b.pt))),
            )
    ok = worst <= 1e-6
    _report(
        3, "cross-formulation agreement", ok,
        f"max pairwise divergence {worst:.3e} <= 1e-6 over "
        f"{mech_runs[names[0]].n_steps} steps",
    )


def test_criterion_04_covariant_energy_conservation(
    twoport_problem, twoport_dae, twoport_dae_half
):
    # With pt(0) = -E(0) the covariant energy stays within 1e-6 over horizon
    # 10, and halving h cuts the drift by 4 within 20 percent.
    L = twoport_problem.L
    drift_h = _max_cov_energy(L, twoport_dae)
    drift_half = _max_cov_energy(L, twoport_dae_half)
    ratio = drift_h / drift_half
    ok = drift_h <= 1e-6 and 3.2 <= ratio <= 4.8
    _report(
        4, "covariant energy conservation", ok,
        f"max |cov E| {drift_h:.3e} <= 1e-6; halving ratio {ratio:.2f} in [3.2, 4.8]",
    )


def test_criterion_05_first_law(twoport_problem, twoport_dae):
    res = th.first_law_residual(twoport_problem.system, twoport_dae)
    worst = float(np.max(np.abs(res)))
    ok = worst <= 1e-6
    _report(
        5, "first law", ok,
        f"max |E - E0 - integral of power| {worst:.3e} <= 1e-6 over horizon 10",
    )


def test_criterion_06_entropy_accounting(twoport_problem, twoport_reduced):
    # (a) per-step entropy decomposition on the two-port run; (b) nonnegative
    # production for friction-plus-conduction; (c) zero mixing production for
    # a matched port.
    inv = monitor_invariants(
        twoport_problem.L,
        twoport_problem.vel_constraints,
        twoport_reduced,
        thermo_system=twoport_problem.system,
    )
    decomposition = float(np.max(np.abs(inv.entropy_decomposition_residual)))

    conduction = build_problem(BUILTINS["conduction_piston"]())
    red = run_formulation(conduction, "reduced")
    inv_c = monitor_invariants(
        conduction.L, conduction.vel_constraints, red,
        thermo_system=conduction.system,
    )
    min_production = float(np.min(inv_c.entropy_production))

    matched = build_problem(BUILTINS["matched_port_piston"]())
    matched = dataclasses.replace(matched, n_steps=2000)
    red_m = run_formulation(matched, "reduced")
    worst_mixing = 0.0
    for k in range(red_m.n_steps + 1):
        ts = th.state_from_arrays(matched.system, red_m.x[k], red_m.v[k])
        br = th.entropy_production(matched.system, red_m.t[k], ts)
        worst_mixing = max(worst_mixing, abs(br.mixing))

    ok = (
        decomposition <= 1e-10
        and min_production >= -1e-12
        and worst_mixing <= 1e-12
    )
    _report(
        6, "entropy accounting", ok,
        f"decomposition residual {decomposition:.3e} <= 1e-10; "
        f"min production {min_production:.3e} >= -1e-12; "
        f"matched-port |mixing| {worst_mixing:.3e} <= 1e-12",
    )


def test_criterion_07_time_momentum_semantics(twoport_problem, twoport_dae):
    # The momentum conjugate to time discharges exactly the heating and
    # matter power: |ptdot + P_H + P_M| pointwise at every step midpoint.
    sys0 = twoport_problem.system
    worst = 0.0
    for k in range(twoport_dae.n_steps):
        sm = twoport_dae.midpoint_state(k)
        ts = th.state_from_arrays(sys0, sm.x, sm.v)
        flows = th.power_flows(sys0, sm.t, ts)
        ptdot = (twoport_dae.pt[k + 1] - twoport_dae.pt[k]) / twoport_dae.h
        worst = max(worst, abs(ptdot + flows.heating + flows.matter))
    ok = worst <= 1e-8
    _report(
        7, "time-momentum semantics", ok,
        f"max |ptdot + P_H + P_M| {worst:.3e} <= 1e-8 at {twoport_dae.n_steps} midpoints",
    )


def test_criterion_08_closed_system_regression():
    # With no ports, sources, or friction the piston must reproduce a plain
    # mechanical oscillator integrated independently by the same stepper, and
    # S, N must stay constant.
    problem = build_problem(BUILTINS["closed_piston"]())
    traj = run_formulation(problem, "pontryagin")

    L1 = TimeLagrangian(
        n=1,
        value=lambda t, x, v: 0.5 * float(v @ v) - 0.5 * float(x @ x),
        d_t=lambda t, x, v: 0.0,
        d_x=lambda t, x, v: -x,
        d_v=lambda t, x, v: v,
        d_vv=lambda t, x, v: np.eye(1),
    )
    x0 = np.array([0.3])
    s0 = PontryaginState(
        t=0.0, x=x0, v=np.zeros(1), pt=-0.5 * float(x0 @ x0), p=np.zeros(1)
    )
    stepper = ImplicitMidpointStepper(
        "pontryagin", lagrangian=L1, constraints=unconstrained(1)
    )
    ref = stepper.run(s0, problem.h, problem.n_steps)

    lay = problem.system.layout
    dq = float(np.max(np.abs(traj.x[:, lay.q][:, 0] - ref.x[:, 0])))
    dv = float(np.max(np.abs(traj.v[:, lay.q][:, 0] - ref.v[:, 0])))
    dS = float(np.max(np.abs(traj.x[:, lay.S] - traj.x[0, lay.S])))
    dN = float(np.max(np.abs(traj.x[:, lay.N] - traj.x[0, lay.N])))

    ok = dq <= 1e-8 and dv <= 1e-8 and dS <= 1e-12 and dN <= 1e-12
    _report(
        8, "closed-system regression", ok,
        f"max |dq| {dq:.3e}, |dv| {dv:.3e} <= 1e-8 vs plain mechanics; "
        f"S, N constant to {max(dS, dN):.3e} <= 1e-12",
    )


def test_criterion_09_derivative_hygiene(twoport_problem, mech_problem):
    sys0 = twoport_problem.system
    ts0 = twoport_problem.ts0

    def physical(rng):
        p = th.random_physical_point(sys0, rng, ts0)
        return p.t, p.x, p.v

    gas = check_derivatives(twoport_problem.L, sample=physical, n_points=100, seed=0)
    mech = check_derivatives(mech_problem.L, n_points=100, seed=0)
    ok = gas.passed and mech.passed
    _report(
        9, "derivative hygiene", ok,
        f"extended Lagrangian max rel err {gas.max_rel_err:.3e}, "
        f"mechanical {mech.max_rel_err:.3e} <= 1e-6",
    )


def test_criterion_10_multiplier_consistency(
    twoport_problem, twoport_dae, mech_problem, mech_runs
):
    # Recovered multipliers satisfy the momentum equations (least squares)
    # and the discrete time-momentum equation at sampled midpoints of both
    # accepted trajectory families.
    worst_lstsq = 0.0
    worst_ptrow = 0.0
    cases = (
        (twoport_problem, twoport_dae),
        (mech_problem, mech_runs["pontryagin"]),
    )
    for problem, traj in cases:
        constraints = problem.vel_constraints
        for k, (state, rate, lam) in enumerate(traj.midpoint_samples()):
            if k % 10:
                continue
            est = recover_multipliers(problem.L, constraints, state, rate)
            worst_lstsq = max(worst_lstsq, est.residual)
            B = constraints.B(state.t, state.x, state.v)
            ptrow = (
                rate.dpt
                - float(problem.L.d_t(state.t, state.x, state.v))
                - float(B @ est.lam)
            )
            worst_ptrow = max(worst_ptrow, abs(ptrow))
    ok = worst_lstsq <= 1e-8 and worst_ptrow <= 1e-8
    _report(
        10, "multiplier consistency", ok,
        f"momentum least-squares residual {worst_lstsq:.3e} <= 1e-8; "
        f"time-momentum row residual {worst_ptrow:.3e} <= 1e-8",
    )
