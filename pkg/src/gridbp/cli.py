"""Command-line experiment harness.

Subcommands: ``estimate`` (one estimation run), ``converge-analysis``
(spectral-radius CDF data over random configurations), ``gen-measurements``
(synthetic measurement sets), ``realtime`` (streaming scenario trajectories),
``baddata`` (corruption/identification experiment).  Every stochastic path is
seeded; identical invocations produce identical bytes.

Exit codes: 0 success, 2 non-convergence, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import load_case
from .acbp import PriorState, run_ac_bp
from .convergence import (assemble_omega, assemble_omega_damped, edge_system,
                          spectral_radius, variance_fixed_point)
from .dcbp import ScheduleConfig, run_dc_bp
from .engine import CompiledGraph
from .errors import ConfigError, ConvergenceError, GridBpError
from .factorgraph import build_dc_graph
from .gnbp import GnConfig, bp_bdt, run_gn_bp
from .measurements import (MeasurementPlan, MeasurementSet, P_FLOW, P_INJ,
                           V_ANGLE, generate_measurements)
from .powerflow import solve_power_flow
from .presets import (demo3bus_measurements, legacy_with_pmus, measure_plan,
                      sixty_one_devices, testcase1, testcase2, testcase3)
from .realtime import run_realtime
from .reference import dc_wls_estimate, gauss_newton, lnrt, wrss
from .state import StateVector

_SCENARIOS = {"testcase1": testcase1, "testcase2": testcase2,
              "testcase3": testcase3}


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _load_grid(name: str):
    return load_case(name)


def _parse_damping(text: str | None):
    if text is None or text == "off":
        return None
    try:
        p, a1 = (float(tok) for tok in text.split(","))
    except ValueError:
        raise ConfigError(f"--damping expects 'p,alpha1', got {text!r}") from None
    return p, a1


def _measurements_for(args, grid):
    if args.case == "demo3bus" and args.measurements is None:
        return demo3bus_measurements(), "dc"
    if args.measurements is not None:
        text = open(args.measurements, encoding="utf-8").read()
        ms = (MeasurementSet.from_json(text) if args.measurements.endswith(".json")
              else MeasurementSet.from_csv(text))
        model = "dc" if all(m.kind in ("p_flow", "p_inj", "v_angle") for m in ms) \
            else "ac"
        return ms, model
    if args.redundancy is None:
        raise ConfigError("need --measurements FILE or --redundancy G")
    model = "dc" if args.method in ("wls", "dc-bp") else "ac"
    solution = solve_power_flow(grid, mode=model)
    kinds = (P_FLOW, P_INJ, V_ANGLE) if model == "dc" else \
        MeasurementPlan().kinds
    plan = MeasurementPlan(model=model, kinds=kinds,
                           redundancy=args.redundancy,
                           default_variance=args.variance)
    return generate_measurements(grid, solution, plan, seed=args.seed), model


def cmd_estimate(args) -> int:
    grid = _load_grid(args.case)
    measurements, model = _measurements_for(args, grid)
    damping = _parse_damping(args.damping)
    if args.method == "wls":
        result = dc_wls_estimate(grid, measurements)
    elif args.method == "gauss-newton":
        result = gauss_newton(grid, measurements, StateVector.flat(grid.n_bus),
                              tol=args.tol)
    elif args.method == "dc-bp":
        schedule = ScheduleConfig(
            mode="randomized_damping" if damping else "synchronous",
            p=damping[0] if damping else 0.6,
            alpha1=damping[1] if damping else 0.5,
            tol=args.tol, seed=args.seed)
        run = run_dc_bp(build_dc_graph(grid, measurements), schedule)
        from .reference import EstimationResult
        state = StateVector(run.means, np.ones(grid.n_bus))
        result = EstimationResult(state, run.iterations, run.converged,
                                  wrss(measurements, state, grid, "dc"),
                                  [run.last_change], method="dc-bp")
    elif args.method == "gn-bp":
        kwargs = {} if args.damping is None else {"damping": damping}
        config = GnConfig(seed=args.seed, outer_tol=args.tol,
                          inner_max_iter=args.inner_iters,
                          init="flat_perturbed" if args.flat_start else "warm",
                          **kwargs)
        x0 = None if args.flat_start else solve_power_flow(grid, mode="ac")
        result = run_gn_bp(grid, measurements, config, x0=x0)
        if args.baddata_threshold is not None:
            report = bp_bdt(result, args.baddata_threshold)
            result.extras["bad_data"] = json.loads(report.to_json())
    elif args.method == "ac-bp":
        run = run_ac_bp(grid, measurements, PriorState.flat(grid.n_bus),
                        tol=args.tol)
        from .reference import EstimationResult
        state = run.state(grid)
        result = EstimationResult(state, run.iterations, run.converged,
                                  wrss(measurements, state, grid, "ac"),
                                  [run.last_change], method="ac-bp",
                                  extras={"counters": run.counters})
    else:
        raise ConfigError(f"unknown method {args.method!r}")
    _write(args.out, result.to_json() + "\n")
    if not result.converged and not args.allow_nonconverged:
        return 2
    return 0


def cmd_converge_analysis(args) -> int:
    grid = _load_grid(args.case)
    damping = _parse_damping(args.damping) or (0.6, 0.5)
    solution = solve_power_flow(grid, mode="dc")
    rows = ["trial,rho_synchronous,rho_randomized_damping"]
    rhos, rhos_d = [], []
    for trial in range(args.trials):
        plan = MeasurementPlan(model="dc", kinds=(P_FLOW, P_INJ, V_ANGLE),
                               redundancy=args.redundancy,
                               default_variance=args.variance)
        ms = generate_measurements(grid, solution, plan,
                                   seed=args.seed + trial)
        cg = CompiledGraph.from_factor_graph(build_dc_graph(grid, ms))
        sys_ = edge_system(cg)
        v_hat = variance_fixed_point(sys_)
        omega = assemble_omega(sys_, v_hat)
        rho = spectral_radius(omega)
        mask = np.random.default_rng(args.seed + trial).random(sys_.b) < damping[0]
        rho_d = spectral_radius(assemble_omega_damped(omega, mask, damping[1]))
        rhos.append(rho)
        rhos_d.append(rho_d)
        rows.append(f"{trial},{rho!r},{rho_d!r}")
    frac = float(np.mean(np.array(rhos) < 1.0))
    frac_d = float(np.mean(np.array(rhos_d) < 1.0))
    rows.append(f"# fraction_contractive,{frac!r},{frac_d!r}")
    _write(args.out, "\n".join(rows) + "\n")
    return 0


def cmd_gen_measurements(args) -> int:
    grid = _load_grid(args.case)
    model = args.model
    solution = solve_power_flow(grid, mode=model)
    kinds = (P_FLOW, P_INJ, V_ANGLE) if model == "dc" else MeasurementPlan().kinds
    plan = MeasurementPlan(model=model, kinds=kinds, redundancy=args.redundancy,
                           default_variance=args.variance)
    ms = generate_measurements(grid, solution, plan, seed=args.seed)
    text = ms.to_json() + "\n" if args.format == "json" else ms.to_csv()
    _write(args.out, text)
    return 0


def cmd_realtime(args) -> int:
    if args.scenario not in _SCENARIOS:
        raise ConfigError(f"unknown scenario {args.scenario!r}; "
                          f"choose from {sorted(_SCENARIOS)}")
    scenario = _SCENARIOS[args.scenario]()
    traj = run_realtime(scenario, iterations_per_ms=args.rate, seed=args.seed)
    _write(args.out, traj.to_csv())
    return 0


def cmd_baddata(args) -> int:
    grid = _load_grid(args.case)
    truth = solve_power_flow(grid, mode="ac")
    config = GnConfig(damping=(0.8, 0.4), seed=args.seed, outer_tol=1e-9)
    hits_bp = hits_ln = completed = 0
    rows = ["trial,corrupted,bp_argmax,bp_statistic,clean_max,lnrt_argmax"]
    for trial in range(args.trials):
        rng = np.random.default_rng(args.seed + 1000 * trial)
        ms = legacy_with_pmus(grid, truth, args.redundancy, args.pmus,
                              args.seed + trial)
        legacy = [k for k, m in enumerate(ms) if m.variance > 1e-8]
        bad = int(rng.choice(legacy))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        offset = sign * args.sigma * math.sqrt(ms[bad].variance)
        corrupted = ms.replace_value(bad, ms[bad].value + offset)
        try:
            clean_max = bp_bdt(run_gn_bp(grid, ms, config, x0=truth),
                               math.inf).largest
            report = bp_bdt(run_gn_bp(grid, corrupted, config, x0=truth),
                            math.inf)
            ref = gauss_newton(grid, corrupted, truth, tol=1e-10)
            ln = lnrt(grid, corrupted, ref.state)
        except (ConvergenceError, GridBpError):
            continue
        completed += 1
        hits_bp += report.argmax == bad
        hits_ln += ln.argmax == bad
        rows.append(f"{trial},{bad},{report.argmax},{report.largest!r},"
                    f"{clean_max!r},{ln.argmax}")
    rows.append(f"# identified,{hits_bp},of,{completed}")
    rows.append(f"# lnrt_identified,{hits_ln},of,{completed}")
    _write(args.out, "\n".join(rows) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridbp",
                                 description="Message-passing state "
                                 "estimation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="run one estimator")
    est.add_argument("--case", required=True,
                     help="bundled case name (case14, case30, demo3bus) or path")
    est.add_argument("--method", required=True,
                     choices=["wls", "gauss-newton", "dc-bp", "gn-bp", "ac-bp"])
    est.add_argument("--measurements", help="CSV/JSON measurement file")
    est.add_argument("--redundancy", type=float)
    est.add_argument("--variance", type=float, default=1e-4)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--tol", type=float, default=1e-10)
    est.add_argument("--damping", help="'p,alpha1' or 'off'")
    est.add_argument("--flat-start", action="store_true")
    est.add_argument("--baddata-threshold", type=float)
    est.add_argument("--inner-iters", type=int, default=6000,
                     help="inner-loop iteration cap per outer step")
    est.add_argument("--allow-nonconverged", action="store_true")
    est.add_argument("--out", default="-")
    est.set_defaults(func=cmd_estimate)

    conv = sub.add_parser("converge-analysis",
                          help="spectral-radius CDF experiment")
    conv.add_argument("--case", default="case14")
    conv.add_argument("--redundancy", type=float, default=2.0)
    conv.add_argument("--variance", type=float, default=1e-4)
    conv.add_argument("--trials", type=int, default=200)
    conv.add_argument("--seed", type=int, default=0)
    conv.add_argument("--damping", help="'p,alpha1'")
    conv.add_argument("--out", default="-")
    conv.set_defaults(func=cmd_converge_analysis)

    gen = sub.add_parser("gen-measurements", help="synthesize a measurement set")
    gen.add_argument("--case", default="case14")
    gen.add_argument("--model", choices=["ac", "dc"], default="ac")
    gen.add_argument("--redundancy", type=float, required=True)
    gen.add_argument("--variance", type=float, default=1e-4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--format", choices=["csv", "json"], default="csv")
    gen.add_argument("--out", default="-")
    gen.set_defaults(func=cmd_gen_measurements)

    rt = sub.add_parser("realtime", help="run a streaming scenario")
    rt.add_argument("--scenario", required=True)
    rt.add_argument("--rate", type=float, default=10.0,
                    help="message-passing iterations per simulated ms")
    rt.add_argument("--seed", type=int, default=0)
    rt.add_argument("--out", default="-")
    rt.set_defaults(func=cmd_realtime)

    bd = sub.add_parser("baddata", help="corruption identification experiment")
    bd.add_argument("--case", default="case14")
    bd.add_argument("--redundancy", type=float, default=3.0)
    bd.add_argument("--pmus", type=int, default=3)
    bd.add_argument("--sigma", type=float, default=20.0)
    bd.add_argument("--trials", type=int, default=50)
    bd.add_argument("--seed", type=int, default=0)
    bd.add_argument("--out", default="-")
    bd.set_defaults(func=cmd_baddata)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GridBpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
