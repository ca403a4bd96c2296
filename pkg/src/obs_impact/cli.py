"""Command-line driver.

    obs-impact <simulate|assimilate|impact|bench-solvers|mg|faulty>
               --config PATH [--jobs N] [--out DIR]

Outputs are SWEF binaries and CSV files written under the output
directory.  Every command is deterministic given (config, seed); timing
columns in trace CSVs are the one exception.  OBS_IMPACT_THREADS caps
--jobs.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import impact as impact_mod
from . import krylov, multigrid, precond
from .assimilation import assemble_dense_hessian
from .config import ExperimentConfig, load_config
from .errors import ObsImpactError
from .pipeline import build_twin, run_assimilation
from .swef import write_swef


def _out_dir(exp: ExperimentConfig, override=None):
    out = override or exp.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _max_jobs(requested):
    cap = os.environ.get("OBS_IMPACT_THREADS")
    jobs = requested or 1
    if cap:
        jobs = min(jobs, max(1, int(cap)))
    return max(1, jobs)


def cmd_simulate(exp: ExperimentConfig, out=None, jobs=1):
    cfg = exp.scenario
    out = _out_dir(exp, out)
    from .swe import make_reference_initial_state, propagate

    traj = propagate(
        make_reference_initial_state(cfg), cfg.n_steps_verify, cfg
    )
    stride = max(1, exp.snapshot_stride)
    written = []
    for k in range(0, cfg.n_steps_verify + 1, stride):
        path = os.path.join(out, f"state_step{k:06d}.swef")
        write_swef(path, traj.states[k])
        written.append(path)
    print(f"simulate: wrote {len(written)} snapshots to {out}")
    return written


def _assimilate(exp: ExperimentConfig, fault_sites=None):
    setup = build_twin(
        exp.scenario, fault_sites=fault_sites, fault_factor=exp.fault_factor
    )
    report = run_assimilation(setup, max_iters=exp.max_minimize_iters)
    return setup, report


def cmd_assimilate(exp: ExperimentConfig, out=None, jobs=1):
    out = _out_dir(exp, out)
    setup, report = _assimilate(exp)
    write_swef(os.path.join(out, "reanalysis.swef"), report.x_final)
    write_swef(os.path.join(out, "background.swef"), setup.problem.background)
    report.to_csv(os.path.join(out, "minimization.csv"))
    setup.problem.obs.to_csv(os.path.join(out, "observations.csv"))
    drop = report.grad_norm_history[0] / max(report.grad_norm_history[-1], 1e-300)
    print(
        f"assimilate: {report.iterations} iterations, gradient norm "
        f"reduced {drop:.2e}x, J={report.cost_history[-1]:.6e}"
    )
    return report


def _reference_solution(exp, hop, rhs):
    mode = exp.reference_mode
    n = hop.n
    if mode == "auto":
        mode = "dense" if n <= 1200 else "cg"
    if mode == "none":
        return None
    if mode == "dense":
        a = assemble_dense_hessian(hop)
        return np.linalg.solve(a, rhs)
    rep = krylov.solve(
        "cg",
        hop,
        rhs,
        budget=krylov.SolveBudget(
            max_matvecs=50 * exp.budget, residual_tol=1e-12
        ),
    )
    return rep.x


def _build_precond(name, exp, setup, hop, minreport, dense=None):
    if name == "none":
        return None
    if name == "exact_diagonal":
        return precond.build_exact_diagonal(hop, dense=dense)
    if name == "b0_diagonal":
        return precond.build_b0_diagonal(setup.problem.bcov)
    if name == "row_sum":
        return precond.build_row_sum(hop)
    if name == "probed_block":
        return precond.build_probed_block(hop, exp.scenario.q)
    if name == "lbfgs_lmp":
        return precond.build_lbfgs_lmp(minreport.pairs)
    if name == "eigenpair_lmp":
        lr = krylov.lanczos_eigenpairs(
            hop, k=50, max_matvecs=max(60, 2 * exp.budget)
        )
        return precond.build_eigenpair_lmp(lr)
    if name == "randomized_svd":
        rng = setup.rngs["sketch"]
        return precond.build_randomized_svd(hop, ell=50, rng=rng)
    raise ObsImpactError(f"unknown preconditioner {name!r}")


def cmd_impact(exp: ExperimentConfig, out=None, jobs=1):
    out = _out_dir(exp, out)
    setup, minrep = _assimilate(exp)
    xa = minrep.x_final
    hop = setup.problem.hessian_operator(xa, variant=exp.hessian)
    rhs = impact_mod.score_gradient(xa, setup.score_spec, exp.scenario)
    reference = _reference_solution(exp, hop, rhs)
    m_inv = _build_precond(exp.precond, exp, setup, hop, minrep)
    mu0, solver_rep = impact_mod.solve_supersensitivity(
        hop,
        rhs,
        method=exp.solver,
        m_inv=m_inv,
        budget=krylov.SolveBudget(
            max_matvecs=exp.budget,
            residual_tol=exp.residual_tol,
            reference=reference,
        ),
    )
    result = impact_mod.observation_sensitivities(
        setup.problem, xa, mu0, solver_report=solver_rep
    )
    write_swef(
        os.path.join(out, "supersensitivity.swef"),
        mu0.reshape(3, exp.scenario.q, exp.scenario.q),
    )
    result.export(setup.problem.obs, out)
    solver_rep.to_csv(os.path.join(out, "solver_trace.csv"))
    print(
        f"impact: solved with {exp.solver} in {solver_rep.n_matvecs} matvecs, "
        f"final residual {solver_rep.residuals[-1]:.3e}"
    )
    return result


def cmd_bench_solvers(exp: ExperimentConfig, out=None, jobs=1):
    out = _out_dir(exp, out)
    setup, minrep = _assimilate(exp)
    xa = minrep.x_final
    base_hop = setup.problem.hessian_operator(xa, variant=exp.hessian)
    rhs = impact_mod.score_gradient(xa, setup.score_spec, exp.scenario)
    reference = _reference_solution(exp, base_hop, rhs)
    dense = None

    runs = [
        (solver, pname)
        for pname in exp.bench_precond_list
        for solver in ("gmres", "minres", "cg", "qmr", "bicgstab", "cgs", "lsqr")
    ]

    def one(args):
        solver, pname = args
        hop = setup.problem.hessian_operator(xa, variant=exp.hessian)
        m_inv = _build_precond(pname, exp, setup, hop, minrep, dense=dense)
        rep = krylov.solve(
            solver,
            hop,
            rhs,
            m_inv=m_inv,
            budget=krylov.SolveBudget(
                max_matvecs=exp.budget,
                residual_tol=exp.residual_tol,
                reference=reference,
            ),
        )
        return solver, pname, rep

    jobs = _max_jobs(jobs)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(one, runs))
    else:
        results = [one(r) for r in runs]

    trace_path = os.path.join(out, "solver_traces.csv")
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("solver,precond,iter,matvecs,residual,rmse,seconds\n")
        for solver, pname, rep in results:
            for i, mv, r, e, t in zip(
                rep.iterations, rep.matvec_counts, rep.residuals, rep.rmses, rep.seconds
            ):
                rm = "" if e is None else repr(float(e))
                fh.write(f"{solver},{pname},{i},{mv},{float(r)!r},{rm},{t:.6f}\n")

    summary_path = os.path.join(out, "solver_summary.csv")
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write(
            "solver,precond,matvecs,rel_residual_decrease,rel_error_decrease\n"
        )
        for solver, pname, rep in results:
            rr = rep.residuals[-1] / rep.residuals[0]
            if rep.rmses[0] is not None:
                re_ = rep.rmses[-1] / rep.rmses[0]
                re_s = repr(float(re_))
            else:
                re_s = ""
            fh.write(
                f"{solver},{pname},{rep.n_matvecs},{float(rr)!r},{re_s}\n"
            )
    print(f"bench-solvers: wrote {trace_path} and {summary_path}")
    return results


def cmd_mg(exp: ExperimentConfig, out=None, jobs=1):
    out = _out_dir(exp, out)
    setup, minrep = _assimilate(exp)
    xa = minrep.x_final
    hop = setup.problem.hessian_operator(xa, variant=exp.hessian)
    rhs = impact_mod.score_gradient(xa, setup.score_spec, exp.scenario)
    reference = _reference_solution(exp, hop, rhs)
    a_coarse = multigrid.coarse_scenario_operator(
        setup.problem, xa, variant=exp.hessian
    )
    transfer = multigrid.GridTransfer(exp.scenario.q)

    rows = []
    baseline = krylov.solve(
        "gmres",
        hop,
        rhs,
        budget=krylov.SolveBudget(max_matvecs=exp.budget, reference=reference),
    )
    rmse0 = None
    if reference is not None:
        rmse0 = float(
            np.linalg.norm(baseline.x - reference) / np.sqrt(hop.n)
        )
    rows.append(("baseline", 0, "fine", baseline.n_matvecs,
                 baseline.residuals[-1], rmse0))
    reports = {}
    for cycles in (1, 2, 3):
        schedule = multigrid.MgSchedule.uniform(exp.budget, cycles)
        rep = multigrid.mg_solve(
            hop, a_coarse, transfer, rhs, schedule, reference=reference
        )
        reports[cycles] = rep
        for st in rep.stages:
            rows.append(
                (f"mg{cycles}", st.cycle, st.level, st.matvecs,
                 st.residual, st.error)
            )
    path = os.path.join(out, "multigrid.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("schedule,cycle,level,matvecs,residual,error\n")
        for sched, cyc, level, mv, res, err in rows:
            es = "" if err is None else repr(float(err))
            fh.write(f"{sched},{cyc},{level},{mv},{float(res)!r},{es}\n")
    chosen = reports[exp.mg_cycles]
    write_swef(
        os.path.join(out, "supersensitivity_mg.swef"),
        chosen.x.reshape(3, exp.scenario.q, exp.scenario.q),
    )
    print(f"mg: wrote {path}")
    return rows


def cmd_faulty(exp: ExperimentConfig, out=None, jobs=1):
    out = _out_dir(exp, out)
    results = {}
    for label, sites in (("fault", exp.fault_sites), ("control", None)):
        setup, minrep = _assimilate(exp, fault_sites=sites)
        xa = minrep.x_final
        hop = setup.problem.hessian_operator(xa, variant=exp.hessian)
        rhs = impact_mod.score_gradient(xa, setup.score_spec, exp.scenario)
        m_inv = _build_precond(exp.precond, exp, setup, hop, minrep)
        mu0, solver_rep = impact_mod.solve_supersensitivity(
            hop,
            rhs,
            method=exp.solver,
            m_inv=m_inv,
            budget=krylov.SolveBudget(
                max_matvecs=exp.budget, residual_tol=exp.residual_tol
            ),
        )
        result = impact_mod.observation_sensitivities(
            setup.problem, xa, mu0, solver_report=solver_rep
        )
        final = setup.cfg.obs_steps[-1]
        field = result.sensitivity_field(setup.problem.obs, final)
        mag = impact_mod.sensitivity_magnitude(field)
        det = impact_mod.detect_fault_sites(
            mag, dominance_threshold=exp.detect_dominance
        )
        results[label] = (result, det)
        result.export(setup.problem.obs, out, prefix=f"sensitivity_{label}")

    path = os.path.join(out, "detected_sites.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("run,rank,i,j,dominance,dominant\n")
        for label, (_, det) in results.items():
            for rank, (i, j) in enumerate(det.sites, start=1):
                fh.write(
                    f"{label},{rank},{i},{j},{det.dominance!r},{det.dominant}\n"
                )
    fault_det = results["fault"][1]
    print(
        f"faulty: detected sites {fault_det.sites} "
        f"(dominance {fault_det.dominance:.2f}, dominant={fault_det.dominant})"
    )
    return results


_COMMANDS = {
    "simulate": cmd_simulate,
    "assimilate": cmd_assimilate,
    "impact": cmd_impact,
    "bench-solvers": cmd_bench_solvers,
    "mg": cmd_mg,
    "faulty": cmd_faulty,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="obs-impact",
        description="Forecast-error sensitivity to assimilated observations",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="key = value file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)
    try:
        exp = load_config(args.config)
        _COMMANDS[args.command](exp, out=args.out, jobs=args.jobs)
    except ObsImpactError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
