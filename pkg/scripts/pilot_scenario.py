"""Scenario-calibration pilot: scores one candidate configuration against
every empirical acceptance-style check at reduced grid size.  Development
tool, not part of the package."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from obs_impact.config import ScenarioConfig
from obs_impact.pipeline import build_twin
from obs_impact.assimilation import assemble_dense_hessian
from obs_impact import krylov, precond, multigrid
from obs_impact import impact as im


def run_gmres(pb, xa, rhs, m_inv, mu_ref, budget=100):
    hop = pb.hessian_operator(xa, variant="gauss_newton")
    return krylov.solve(
        "gmres", hop, rhs, m_inv=m_inv,
        budget=krylov.SolveBudget(max_matvecs=budget, reference=mu_ref),
    )


def iters_to_reach(report, target):
    for i, e in zip(report.iterations, report.rmses):
        if e is not None and e <= target:
            return i
    return None


def pilot(q=20, **kw):
    t_start = time.time()
    cfg = ScenarioConfig(q=q, corr_length=5.0 * q / 40.0, **kw)
    setup = build_twin(cfg)
    pb = setup.problem
    rep = pb.minimize(max_iters=400)
    drop = rep.grad_norm_history[0] / rep.grad_norm_history[-1]
    xa = rep.x_final

    hop = pb.hessian_operator(xa, variant="gauss_newton")
    a = assemble_dense_hessian(hop)
    evals = np.linalg.eigvalsh(0.5 * (a + a.T))
    cond = evals[-1] / evals[0]

    rhs = im.score_gradient(xa, setup.score_spec, cfg)
    mu_ref = np.linalg.solve(a, rhs)

    # --- criterion 3: solver comparison
    errs = {}
    traces = {}
    for m in ("cg", "minres", "gmres", "qmr", "bicgstab", "cgs", "lsqr"):
        h2 = pb.hessian_operator(xa, variant="gauss_newton")
        r = krylov.solve(m, h2, rhs,
                         budget=krylov.SolveBudget(max_matvecs=100, reference=mu_ref))
        errs[m] = r.rmses[-1]
        traces[m] = r
    c3_order = (min(errs, key=errs.get) == "cg") and (max(errs, key=errs.get) == "lsqr")
    gm, mn, qm = traces["gmres"], traces["minres"], traces["qmr"]
    nits = min(len(gm.residuals), len(mn.residuals), len(qm.residuals))
    ratio_max = 1.0
    for i in range(1, nits):
        rs = [gm.residuals[i], mn.residuals[i], qm.residuals[i]]
        ratio_max = max(ratio_max, max(rs) / max(min(rs), 1e-300))
    c3_traces = ratio_max <= 2.0

    # --- criterion 4: preconditioners
    unprec = traces["gmres"]
    target = unprec.rmses[-1]
    iters_needed = {}
    first10 = {"none": unprec.rmses[10] / unprec.rmses[0] if len(unprec.rmses) > 10 else None}
    m_diag = precond.build_exact_diagonal(None, dense=a)
    m_probe = precond.build_probed_block(pb.hessian_operator(xa, variant="gauss_newton"), cfg.q)
    lr = krylov.lanczos_eigenpairs(pb.hessian_operator(xa, variant="gauss_newton"),
                                   k=50, max_matvecs=120)
    m_eig = precond.build_eigenpair_lmp(lr)
    m_rsvd = precond.build_randomized_svd(pb.hessian_operator(xa, variant="gauss_newton"),
                                          ell=50, rng=np.random.default_rng(42))
    m_lmp = precond.build_lbfgs_lmp(rep.pairs)
    m_row = precond.build_row_sum(pb.hessian_operator(xa, variant="gauss_newton"))
    m_b0 = precond.build_b0_diagonal(pb.bcov)
    for name, mi in [("exact_diagonal", m_diag), ("probed_block", m_probe),
                     ("eigenpair_lmp", m_eig), ("randomized_svd", m_rsvd),
                     ("lbfgs_lmp", m_lmp), ("row_sum", m_row), ("b0_diagonal", m_b0)]:
        r = run_gmres(pb, xa, rhs, mi, mu_ref)
        iters_needed[name] = iters_to_reach(r, target)
        first10[name] = r.rmses[10] / r.rmses[0] if len(r.rmses) > 10 else None
    big4 = ["exact_diagonal", "probed_block", "eigenpair_lmp", "randomized_svd"]
    c4_big4 = all(iters_needed[n] is not None and iters_needed[n] <= 40 for n in big4)
    others10 = [v for k, v in first10.items() if k != "lbfgs_lmp" and v is not None]
    c4_lmp_first = first10["lbfgs_lmp"] is not None and first10["lbfgs_lmp"] <= min(others10)

    # --- criterion 5: multigrid
    a_coarse = multigrid.coarse_scenario_operator(pb, xa, variant="gauss_newton")
    transfer = multigrid.GridTransfer(cfg.q)
    mg_ok = True
    finals = {}
    for cycles in (1, 2, 3):
        sched = multigrid.MgSchedule.uniform(100, cycles)
        mr = multigrid.mg_solve(pb.hessian_operator(xa, variant="gauss_newton"),
                                a_coarse, transfer, rhs, sched, reference=mu_ref)
        finals[cycles] = mr.final_error
        # per-correction error decrease
        for i, st in enumerate(mr.stages):
            if st.level == "coarse":
                if mr.stages[i].error >= mr.stages[i - 1].error:
                    mg_ok = False
    c5_cycles = finals[1] <= finals[3]
    c5_withinx2 = finals[1] <= 2.0 * unprec.rmses[-1]

    print(f"  drop={drop:.1e} cond={cond:.2e} "
          f"unprec_rel={unprec.rmses[-1]/unprec.rmses[0]:.1e}")
    print(f"  c3 order={c3_order} traces2x={c3_traces} (max ratio {ratio_max:.2f})")
    print(f"  c4 big4<=40: {c4_big4} {[(n, iters_needed[n]) for n in big4]}")
    print(f"  c4 lmp-first10: {c4_lmp_first} first10={ {k: (f'{v:.2e}' if v else v) for k,v in first10.items()} }")
    print(f"  c4 iters: row_sum={iters_needed['row_sum']} b0={iters_needed['b0_diagonal']} lmp={iters_needed['lbfgs_lmp']}")
    print(f"  c5 mg_decrease={mg_ok} 1c<=3c={c5_cycles} (finals {finals[1]:.2e}/{finals[2]:.2e}/{finals[3]:.2e}) within2x={c5_withinx2}")
    print(f"  [{time.time()-t_start:.0f}s]", flush=True)


if __name__ == "__main__":
    cases = [
        dict(h_base=10.0, bell_amplitude=3.0, corr_jitter=0.01, obs_stride=2),
        dict(h_base=30.0, bell_amplitude=3.0, corr_jitter=0.005, obs_stride=2),
        dict(h_base=10.0, bell_amplitude=3.0, corr_jitter=0.005, obs_stride=2),
        dict(h_base=15.0, bell_amplitude=3.0, corr_jitter=0.01, obs_stride=2),
    ]
    for kw in cases:
        print(f"case: {kw}", flush=True)
        try:
            pilot(**kw)
        except Exception as exc:
            print(f"  FAILED: {type(exc).__name__}: {exc}", flush=True)
