"""Scenario runner: `run`, `compare`, and `selftest` subcommands.

A scenario is a single JSON document (schema version 1, unknown keys
rejected) naming a model, horizon, solver settings, disturbance plan, and a
campaign. `run` executes one campaign and writes results.csv /
rollouts.csv / summary.json; `compare` executes the nominal and robust
closed loops on identical seeded disturbance sequences and adds
clearances.csv plus paired safety rates; `selftest` cross-checks the
solver against the bundled oracles.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import admm, models, reference, rollout, sls, sqp
from .lqr import LqrLinearTerms, build_cache, solve as lqr_solve, solve_cached
from .scan import ParallelExecutor, SequentialExecutor, scan_depth

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema", "model", "horizon", "campaign"],
    "properties": {
        "schema": {"const": 1},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["id"],
            "properties": {
                "id": {"enum": ["dubins", "quadrotor", "pendulum"]},
                "params": {"type": "object"},
            },
        },
        "horizon": {"type": "integer", "minimum": 1},
        "x0": {"type": "array", "items": {"type": "number"}},
        "obstacles": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"},
                      "minItems": 3, "maxItems": 3},
        },
        "disturbance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer"},
                "kinds": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind", "count"],
                        "properties": {
                            "kind": {"enum": ["uniform_ball", "boundary", "adversarial"]},
                            "count": {"type": "integer", "minimum": 1},
                            "jitter": {"type": "number", "minimum": 0},
                        },
                    },
                },
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "robust": {"type": "boolean"},
                "rti": {"type": "boolean"},
                "kkt_tol": {"type": "number", "exclusiveMinimum": 0},
                "max_sqp_iters": {"type": "integer", "minimum": 1},
                "admm": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "rho0": {"type": "number"}, "sigma": {"type": "integer"},
                        "tol_primal": {"type": "number"}, "tol_dual": {"type": "number"},
                        "max_iter": {"type": "integer"},
                    },
                },
                "sls": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "q_scale": {"type": "number"}, "r_scale": {"type": "number"},
                        "q_diag": {"type": "array", "items": {"type": "number"}},
                        "tol_h": {"type": "number"}, "max_alternations": {"type": "integer"},
                        "eps": {"type": "number"}, "tau_damping": {"type": "number"},
                        "e_inflation_diag": {"type": "array", "items": {"type": "number"}},
                    },
                },
                "cold": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kkt_tol": {"type": "number", "exclusiveMinimum": 0},
                        "max_sqp_iters": {"type": "integer", "minimum": 1},
                        "admm": {
                            "type": "object",
                            "additionalProperties": False,
                            "properties": {
                                "rho0": {"type": "number"}, "sigma": {"type": "integer"},
                                "tol_primal": {"type": "number"}, "tol_dual": {"type": "number"},
                                "max_iter": {"type": "integer"},
                            },
                        },
                    },
                },
            },
        },
        "campaign": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": ["mpc", "rollouts"]},
                "steps": {"type": "integer", "minimum": 1},
                "rollouts": {"type": "integer", "minimum": 1},
                "warmup": {"type": "integer", "minimum": 0},
                "guess": {"enum": ["hold", "rollout"]},
            },
        },
    },
}


class ScenarioError(ValueError):
    pass


def load_scenario(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON (line {exc.lineno}): {exc.msg}")
    import jsonschema
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: e.json_path)
    if errors:
        msgs = "; ".join(f"{e.json_path}: {e.message}" for e in errors[:5])
        raise ScenarioError(f"scenario validation failed: {msgs}")
    return doc


def build_model(scenario: dict):
    spec = scenario["model"]
    params = dict(spec.get("params", {}))
    if "obstacles" in scenario:
        params["obstacles"] = scenario["obstacles"]
    return models.make_model(spec["id"], **params)


def build_settings(scenario: dict, phase: str = "solver"):
    """SQP settings from the scenario; phase='cold' overlays solver.cold."""
    sv = dict(scenario.get("solver", {}))
    if phase == "cold":
        sv.update(scenario.get("solver", {}).get("cold", {}))
    admm_cfg = sv.get("admm", {})
    admm_settings = admm.AdmmSettings(
        rho0=admm_cfg.get("rho0", 0.1),
        sigma=admm_cfg.get("sigma", 10),
        tol_primal=admm_cfg.get("tol_primal", 1e-5),
        tol_dual=admm_cfg.get("tol_dual", 1e-5),
        max_iter=admm_cfg.get("max_iter", 800),
    )
    return sqp.SqpSettings(
        max_sqp_iters=sv.get("max_sqp_iters", 60),
        kkt_tol=sv.get("kkt_tol", 1e-3),
        admm=admm_settings,
    )


def build_robust_settings(scenario: dict, model, phase: str = "solver") -> sls.RobustSettings:
    crg = scenario.get("solver", {}).get("sls", {})
    q_diag = crg.get("q_diag")
    if q_diag is not None:
        Q = np.diag(np.asarray(q_diag, float))
    else:
        Q = crg.get("q_scale", 1.0) * np.eye(model.nx)
    R = crg.get("r_scale", 1.0) * np.eye(model.nu)
    return sls.RobustSettings(
        sqp=build_settings(scenario, phase),
        weights=sls.SlsWeights(Q, R, Q.copy()),
        eps=crg.get("eps", 1e-8),
        tol_h=crg.get("tol_h", 1e-3),
        max_alternations=crg.get("max_alternations", 20),
        tau_damping=crg.get("tau_damping", 0.5),
    )


def build_e_inflation(scenario: dict):
    diag = scenario.get("solver", {}).get("sls", {}).get("e_inflation_diag")
    if diag is None:
        return None
    M = np.diag(np.asarray(diag, float))
    return lambda k, x: M


def _default_x0(scenario: dict, model) -> np.ndarray:
    if "x0" in scenario:
        x0 = np.asarray(scenario["x0"], float)
        if x0.shape != (model.nx,):
            raise ScenarioError(f"x0 must have {model.nx} entries")
        return x0
    if isinstance(model, models.NLinkPendulum):
        return model.upright()
    return np.zeros(model.nx)


def _disturbance_plan(scenario: dict):
    d = scenario.get("disturbance", {})
    kinds = d.get("kinds", [{"kind": "uniform_ball", "count": 1}])
    seed = d.get("seed", 0)
    plan = []
    for entry in kinds:
        for _ in range(entry["count"]):
            plan.append((entry["kind"], entry.get("jitter", 0.0)))
    return plan, seed


def _sample(kind: str, jitter: float, nx: int, horizon: int, seed, rows):
    if kind != "adversarial":
        return rollout.sample_disturbance(kind, nx, horizon, seed)
    w = rollout.sample_disturbance("adversarial", nx, horizon, seed, rows=rows)
    if jitter > 0:
        noise = rollout.sample_disturbance("boundary", nx, horizon, seed)
        w = w + jitter * noise
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        w = np.divide(w, np.maximum(norms, 1.0), out=w)
    return w


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _summary(path: Path, solve_ms, safety_rate, total_steps, depth, converged_fraction,
             extra=None):
    solve_ms = [t for t in solve_ms if np.isfinite(t)]
    doc = {
        "mean_solve_ms": float(np.mean(solve_ms)) if solve_ms else 0.0,
        "median_solve_ms": float(np.median(solve_ms)) if solve_ms else 0.0,
        "safety_rate": float(safety_rate),
        "total_steps": int(total_steps),
        "scan_depth": int(depth),
        "converged_fraction": float(converged_fraction),
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def run_mpc_campaign(scenario: dict, outdir: Path, executor) -> dict:
    """Closed-loop MPC: one solve per step, disturbance injected on the plant."""
    model = build_model(scenario)
    N = scenario["horizon"]
    campaign = scenario["campaign"]
    steps = campaign.get("steps", 100)
    warmup = campaign.get("warmup", 10)
    robust = scenario.get("solver", {}).get("robust", False)
    rti = scenario.get("solver", {}).get("rti", True)
    plan, seed = _disturbance_plan(scenario)
    kind, jitter = plan[0]
    x0 = _default_x0(scenario, model)
    guess_mode = campaign.get("guess", "hold")

    sqp_settings = build_settings(scenario)
    robust_settings = build_robust_settings(scenario, model) if robust else None
    cold_robust = build_robust_settings(scenario, model, "cold") if robust else None
    e_inflation = build_e_inflation(scenario)

    rng_stream = [(int(seed), s) for s in range(steps)]
    x = x0.copy()
    rows_csv = []
    solve_ms = []
    converged = []
    violations = 0
    warm = None
    tau = None
    tight_max = 0.0
    adv_rows = None
    for step in range(steps):
        t0 = time.perf_counter()
        if robust:
            if warm is None:
                batch = sls.solve_robust(model, x, cold_robust,
                                         initial=sqp.initial_guess(model, x, N, guess_mode),
                                         executor=executor, e_inflation=e_inflation)
                plan_traj = batch.trajectory
                u0 = plan_traj.u[0].copy()
                warm = plan_traj.shifted()
                tau = batch.duals
                tight = batch.tightening
                stats_iters, stats_admm, stats_res = batch.stats.sqp_iterations, 0, batch.stats.dh
                ok = batch.stats.converged
                layers = scan_depth(N + 1)
            else:
                r = sls.rti_robust_step(model, x, warm, tau, robust_settings,
                                        executor=executor, e_inflation=e_inflation)
                plan_traj, u0, warm, tau, tight = r.plan, r.u0, r.warm_start, r.tau, r.tightening
                stats_iters, stats_admm, stats_res = 1, r.stats.admm_iterations, r.stats.residual
                ok = r.stats.converged
                layers = r.stats.scan_layers
            tight_max = max(tight_max, float(tight.h.max(initial=0.0)))
        else:
            if rti and warm is not None:
                r = sqp.rti_step(model, x, warm, sqp_settings, executor=executor)
                plan_traj, u0, warm = r.plan, r.u0, r.warm_start
                stats_iters, stats_admm, stats_res = 1, r.stats.admm_iterations, r.stats.residual
                ok = r.stats.converged
                layers = r.stats.scan_layers
            else:
                res = sqp.solve_nmpc(model, x, sqp_settings,
                                     warm if warm is not None else sqp.initial_guess(model, x, N, guess_mode),
                                     executor=executor)
                plan_traj = res.trajectory
                u0 = plan_traj.u[0].copy()
                warm = plan_traj.shifted() if rti else plan_traj
                stats_iters, stats_admm, stats_res = res.stats.iterations, res.stats.admm_iterations, res.stats.residual
                ok = res.stats.converged
                layers = res.stats.scan_layers
            tight = None
        ms = (time.perf_counter() - t0) * 1e3

        if kind == "adversarial":
            adv_rows = rollout.adversarial_rows(model, plan_traj)[:1]
        w = _sample(kind, jitter, model.nx, 1, rng_stream[step], adv_rows)[0]
        # margin reports the solver's commanded input; the plant applies it clipped
        g_now = model.stage_constraints(x, u0)
        margin = float(-g_now.max()) if g_now.size else np.inf
        if margin < 0:
            violations += 1
        rows_csv.append([step, f"{ms:.3f}", stats_iters, stats_admm,
                         f"{stats_res:.3e}", f"{margin:.6e}",
                         f"{(float(tight.h.max(initial=0.0)) if tight is not None else 0.0):.6e}"])
        solve_ms.append(ms if step >= warmup else np.nan)
        converged.append(bool(ok))
        x = model.step(x, model.clip_input(u0)) + model.disturbance(x) @ w

    _write_csv(outdir / "results.csv",
               ["step", "solve_ms", "sqp_iters", "admm_iters", "kkt_residual",
                "min_constraint_margin", "max_tube_h"], rows_csv)
    safety = 1.0 - violations / steps
    return _summary(outdir / "summary.json", solve_ms, safety, steps,
                    scan_depth(N + 1), float(np.mean(converged)))


def run_rollout_campaign(scenario: dict, outdir: Path, executor) -> dict:
    """One robust solve, then seeded disturbance-feedback rollouts around it."""
    model = build_model(scenario)
    N = scenario["horizon"]
    campaign = scenario["campaign"]
    plan, seed = _disturbance_plan(scenario)
    x0 = _default_x0(scenario, model)
    robust_settings = build_robust_settings(scenario, model, "cold")
    guess_mode = campaign.get("guess", "hold")

    t0 = time.perf_counter()
    batch = sls.solve_robust(model, x0, robust_settings,
                             initial=sqp.initial_guess(model, x0, N, guess_mode),
                             executor=executor, e_inflation=build_e_inflation(scenario))
    solve_ms = (time.perf_counter() - t0) * 1e3
    traj = batch.trajectory
    adv_rows = rollout.adversarial_rows(model, traj)

    rows_csv = []
    safe_flags = []
    for rid, (kind, jitter) in enumerate(plan):
        w = _sample(kind, jitter, model.nx, traj.N, (int(seed), rid), adv_rows)
        rec = rollout.closed_loop(model, traj, batch.response, w, tightening=batch.tightening)
        safe_flags.append(rec.safe)
        rows_csv.append([rid, int(rec.safe), f"{rec.min_margin:.6e}", f"{rec.max_w_norm:.6e}"])
    _write_csv(outdir / "rollouts.csv", ["id", "safe", "min_margin", "max_w_norm"], rows_csv)
    return _summary(outdir / "summary.json", [solve_ms], float(np.mean(safe_flags)),
                    len(plan) * traj.N, scan_depth(N + 1),
                    1.0 if batch.stats.converged else 0.0,
                    extra={"alternations": batch.stats.alternations,
                           "max_tube_h": float(batch.tightening.h.max(initial=0.0))})


def run_compare(scenario: dict, outdir: Path, executor) -> dict:
    """Nominal vs robust closed-loop MPC on identical seeded disturbances.

    Both modes start every rollout from the same initial state, so the cold
    solves are computed once and shared; each simulated step then performs a
    single real-time iteration. Applied inputs are clipped to the actuator
    range before hitting the plant.
    """
    model = build_model(scenario)
    N = scenario["horizon"]
    campaign = scenario["campaign"]
    steps = campaign.get("steps", 80)
    n_roll = campaign.get("rollouts", 31)
    plan, seed = _disturbance_plan(scenario)
    x0 = _default_x0(scenario, model)
    guess_mode = campaign.get("guess", "hold")
    rt_sqp = build_settings(scenario)
    rt_robust = build_robust_settings(scenario, model)
    cold_sqp = build_settings(scenario, "cold")
    cold_robust = build_robust_settings(scenario, model, "cold")
    e_inflation = build_e_inflation(scenario)

    cold_nom = sqp.solve_nmpc(model, x0, cold_sqp,
                              sqp.initial_guess(model, x0, N, guess_mode), executor=executor)
    cold_rob = sls.solve_robust(model, x0, cold_robust,
                                initial=sqp.initial_guess(model, x0, N, guess_mode),
                                executor=executor, e_inflation=e_inflation)

    # the nominal reference plan defines the adversarial geometry for both modes
    adv_rows_plan = rollout.adversarial_rows(model, cold_nom.trajectory)
    adv_rows = np.zeros((steps, model.nx))
    for s in range(steps):
        adv_rows[s] = adv_rows_plan[min(s, adv_rows_plan.shape[0] - 1)]

    sequences = []
    for rid in range(n_roll):
        kind, jitter = plan[rid % len(plan)]
        sequences.append(_sample(kind, jitter, model.nx, steps, (int(seed), rid), adv_rows))

    rates = {}
    rows_csv = []
    clearance_rows = []
    solve_ms_robust = []
    conv_robust = []
    for mode in ("nominal", "robust"):
        safe_flags = []
        for rid, w_seq in enumerate(sequences):
            x = x0.copy()
            warm = (cold_rob.trajectory if mode == "robust" else cold_nom.trajectory).shifted()
            tau = cold_rob.duals
            safe = True
            for s in range(steps):
                t0 = time.perf_counter()
                if mode == "robust":
                    r = sls.rti_robust_step(model, x, warm, tau, rt_robust,
                                            executor=executor, e_inflation=e_inflation)
                    u0, warm, tau = r.u0, r.warm_start, r.tau
                    solve_ms_robust.append((time.perf_counter() - t0) * 1e3)
                    conv_robust.append(bool(r.stats.converged))
                else:
                    r = sqp.rti_step(model, x, warm, rt_sqp, executor=executor)
                    u0, warm = r.u0, r.warm_start
                u0 = model.clip_input(u0)
                g = model.stage_constraints(x, u0)
                margin = float(-g.max()) if g.size else np.inf
                clearance_rows.append([rid, mode, s, f"{margin:.6e}"])
                if margin < 0:
                    safe = False
                x = model.step(x, u0) + model.disturbance(x) @ w_seq[s]
            gf = model.terminal_constraints(x)
            if gf.size and gf.max() > 0:
                safe = False
            safe_flags.append(safe)
            rows_csv.append([rid, mode, int(safe)])
        rates[mode] = float(np.mean(safe_flags))

    _write_csv(outdir / "rollouts.csv", ["id", "mode", "safe"], rows_csv)
    _write_csv(outdir / "clearances.csv", ["rollout", "mode", "step", "min_margin"], clearance_rows)
    return _summary(outdir / "summary.json", solve_ms_robust, rates["robust"],
                    steps * n_roll, scan_depth(N + 1),
                    float(np.mean(conv_robust)) if conv_robust else 1.0,
                    extra={"robust_safety_rate": rates["robust"],
                           "nominal_safety_rate": rates["nominal"]})


def run_selftest(executor) -> int:
    """Quick oracle cross-checks; prints one line per suite."""
    rng = np.random.default_rng(0)
    failures = 0

    def report(name, ok, detail=""):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}")
        failures += 0 if ok else 1

    from .scan import inclusive_scan
    out = inclusive_scan([1, 2, 3, 4], lambda a, b: a + b, 0)
    report("scan prefix sums", out == [1, 3, 6, 10])

    from .lqr import LtvQpData
    nx, nu, N = 4, 2, 40
    A = rng.standard_normal((N, nx, nx))
    A /= np.linalg.norm(A, 2, axis=(1, 2), keepdims=True)
    B = rng.standard_normal((N, nx, nu)) * 0.5
    Q = np.broadcast_to(np.eye(nx), (N, nx, nx)).copy()
    R = np.broadcast_to(np.eye(nu), (N, nu, nu)).copy()
    qp = LtvQpData(A=A, B=B, b=rng.standard_normal((N, nx)) * 0.1, Q=Q, R=R,
                   S=np.zeros((N, nu, nx)), q=rng.standard_normal((N, nx)),
                   r=rng.standard_normal((N, nu)), QN=np.eye(nx), qN=np.zeros(nx),
                   C=np.zeros((N, 0, nx)), D=np.zeros((N, 0, nu)), f=np.zeros((N, 0)),
                   CN=np.zeros((0, nx)), fN=np.zeros(0), dx0=rng.standard_normal(nx))
    s1 = lqr_solve(qp, executor=executor)
    s2 = reference.riccati_lqr(qp)
    err = reference.relative_error(s1.dx, s2.dx)
    report("scan LQR vs Riccati", err <= 1e-8, f"(rel err {err:.2e})")

    sol, cache = build_cache(qp, executor=executor, generation=0)
    fast = solve_cached(LqrLinearTerms(qp.q, qp.r, qp.qN), cache, 0, executor=executor)
    report("cache bitwise", all((getattr(sol, f) == getattr(fast, f)).all()
                                for f in ("dx", "du", "K", "k", "P", "p")))

    E = rng.standard_normal((N, nx, nx)) * 0.05
    Cc = rng.standard_normal((N, 2, nx))
    Dc = rng.standard_normal((N, 2, nu))
    CN = np.zeros((0, nx))
    costs = sls.assemble_costs(None, Cc, Dc, CN, sls.SlsWeights.identity(nx, nu))
    par = sls.synthesize(qp.A, qp.B, E, costs, executor=executor)
    seq = reference.fastsls_sequential(qp.A, qp.B, E, costs)
    err = max(reference.relative_error(par.Phi_x[j], seq.Phi_x[j]) for j in range(N))
    report("scan SLS vs sequential", err <= 1e-8, f"(rel err {err:.2e})")

    for model_id, kwargs in (("dubins", {}), ("quadrotor", {}), ("pendulum", {"n_links": 2})):
        model = models.make_model(model_id, **kwargs)
        x = rng.standard_normal(model.nx) * 0.3
        u = rng.standard_normal(model.nu)
        Aj, Bj = model.jacobians(x, u)
        Jx, Ju = reference.finite_difference_jacobians(model.step, x, u)
        ok = abs(Aj - Jx).max() < 1e-5 and abs(Bj - Ju).max() < 1e-5
        report(f"{model_id} jacobians vs finite differences", ok)
    return failures


def make_executor(args) -> object:
    threads = args.threads or int(os.environ.get("SOLVER_THREADS", "0")) or None
    if args.executor == "seq":
        return SequentialExecutor()
    return ParallelExecutor(threads=threads)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="scanmpc",
                                     description="scan-based robust NMPC scenario runner")
    parser.add_argument("--threads", type=int, default=0, help="worker threads (default: all cores)")
    parser.add_argument("--executor", choices=("seq", "par"), default="par")
    parser.add_argument("--out", default=".", help="artifact output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one scenario campaign")
    p_run.add_argument("scenario")
    p_cmp = sub.add_parser("compare", help="paired nominal vs robust closed loops")
    p_cmp.add_argument("scenario")
    sub.add_parser("selftest", help="run the oracle cross-check suite")
    args = parser.parse_args(argv)

    executor = make_executor(args)
    if args.command == "selftest":
        return 1 if run_selftest(executor) else 0

    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "compare":
            if "disturbance" not in scenario:
                print("error: compare needs disturbance settings", file=sys.stderr)
                return 2
            summary = run_compare(scenario, outdir, executor)
        elif scenario["campaign"]["type"] == "mpc":
            summary = run_mpc_campaign(scenario, outdir, executor)
        else:
            summary = run_rollout_campaign(scenario, outdir, executor)
    except (sqp.DivergenceError, sls.RobustInfeasibleError, ArithmeticError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
