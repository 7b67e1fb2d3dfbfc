"""Command-line harness.

Subcommands: verify-oracle, run-maint, ce-bench, dp-bench, adaptive-sim,
setquery-sim, complexity.  Every experiment is specified by an optional
JSON config file plus a seed; written reports are byte-identical across
reruns with the same inputs.  Exit codes: 0 success, 2 when an acceptance
threshold is violated, 1 on error.
"""

import argparse
import csv
import io
import json
import math
import sys

import numpy as np

from . import adaptive, dpcore, harness, kronlinalg, oracle, sketch
from .errors import KronprojError
from .projmaint import ConstraintBatch

PASS = "PASS"
FAIL = "FAIL"


def _load_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _emit(args, payload, records=None):
    if args.format == "csv" and records is not None:
        buf = io.StringIO()
        keys = sorted({k for r in records for k in r})
        writer = csv.DictWriter(buf, fieldnames=keys)
        writer.writeheader()
        for r in records:
            writer.writerow({k: r.get(k, "") for k in keys})
        text = buf.getvalue()
    else:
        text = harness.json_dumps_det(payload)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _status(name, ok, detail=""):
    line = f"[{PASS if ok else FAIL}] {name}"
    if detail:
        line += f" ({detail})"
    print(line, file=sys.stderr)
    return ok


def cmd_verify_oracle(args, cfg):
    """Kronecker identity suite, Woodbury instances, and projector axioms."""
    rng = np.random.default_rng(args.seed)
    reps = int(cfg.get("reps", 100))
    ok = True

    worst = {"mixed": 0.0, "inv": 0.0, "vec3": 0.0, "trace": 0.0, "apply": 0.0}
    for _ in range(reps):
        A, B, C, D = (rng.standard_normal((3, 3)) for _ in range(4))
        lhs = np.kron(A, B) @ np.kron(C, D)
        rhs = np.kron(A @ C, B @ D)
        worst["mixed"] = max(worst["mixed"], np.max(np.abs(lhs - rhs)))
        Ai = A + 3 * np.eye(3)
        Bi = B + 3 * np.eye(3)
        worst["inv"] = max(
            worst["inv"],
            np.max(np.abs(np.linalg.inv(np.kron(Ai, Bi)) - np.kron(np.linalg.inv(Ai), np.linalg.inv(Bi)))),
        )
        X = rng.standard_normal((3, 3))
        worst["vec3"] = max(
            worst["vec3"],
            np.max(np.abs(kronlinalg.vec(A @ X @ C) - np.kron(C.T, A) @ kronlinalg.vec(X))),
        )
        P4, Q4 = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        worst["trace"] = max(
            worst["trace"],
            abs(kronlinalg.vec(P4) @ kronlinalg.vec(Q4) - np.trace(P4.T @ Q4)),
        )
        n = int(rng.integers(2, 7))
        A2, B2 = rng.standard_normal((n, n)), rng.standard_normal((n, n))
        x = rng.standard_normal(n * n)
        worst["apply"] = max(
            worst["apply"],
            np.max(np.abs(kronlinalg.kron_apply(A2, B2, x) - np.kron(A2, B2) @ x)),
        )
    for name, err in worst.items():
        ok &= _status(f"kron identity {name}", err <= 1e-12, f"max abs err {err:.2e}")

    worst_wb = 0.0
    for _ in range(reps):
        n = int(rng.integers(3, 11))
        k = int(rng.integers(1, 6))
        A = rng.standard_normal((n, n)) + n * np.eye(n)
        U = rng.standard_normal((n, k))
        Cm = rng.standard_normal((k, k)) + 2 * np.eye(k)
        V = rng.standard_normal((k, n))
        got = kronlinalg.woodbury_update(np.linalg.inv(A), U, Cm, V)
        want = np.linalg.inv(A + U @ Cm @ V)
        worst_wb = max(worst_wb, np.linalg.norm(got - want) / np.linalg.norm(want))
    ok &= _status("woodbury vs direct inverse", worst_wb <= 1e-9, f"max rel err {worst_wb:.2e}")

    worst_proj = 0.0
    for _ in range(5):
        n, m = 4, 6
        A = rng.standard_normal((m, n * n))
        W = rng.standard_normal((n, n))
        W = W @ W.T + 0.5 * np.eye(n)
        P = oracle.exact_projection(ConstraintBatch(matrix=A, n=n), W)
        worst_proj = max(
            worst_proj,
            np.max(np.abs(P @ P - P)),
            np.max(np.abs(P - P.T)),
            abs(np.trace(P) - m),
        )
    ok &= _status("projector axioms", worst_proj <= 1e-8, f"max err {worst_proj:.2e}")

    _emit(args, {"ok": bool(ok), "worst": {k: float(v) for k, v in worst.items()},
                 "woodbury_rel_err": float(worst_wb), "projector_err": float(worst_proj)})
    return 0 if ok else 2


def cmd_run_maint(args, cfg):
    dc = harness.DriftConfig(
        n=int(cfg.get("n", 6)),
        m=int(cfg.get("m", 8)),
        T=int(cfg.get("T", 50)),
        C1=float(cfg.get("C1", 0.2)),
        C2=float(cfg.get("C2", 0.0)),
        rank_pattern=cfg.get("rank_pattern", "uniform"),
        sparse_k=int(cfg.get("sparse_k", 1)),
        seed=args.seed,
    )
    check = args.check_oracle == "on"
    report = harness.run_maintenance_experiment(
        dc,
        eps_mp=float(cfg.get("eps_mp", 0.05)),
        a_exp=float(cfg.get("a_exp", 0.5)),
        s=int(cfg.get("s", 4)),
        b=int(cfg.get("b", 32)),
        check_oracle=check,
    )
    _emit(args, report.to_dict(), records=report.records)
    ok = report.summary["max_lam_tilde_log_ratio"] <= report.summary["eps_mp_half"] + 1e-12
    _status("spectral approximation", ok,
            f"max |log ratio| {report.summary['max_lam_tilde_log_ratio']:.3e}")
    if check:
        ok_m = report.summary["max_m_rel_err"] <= 1e-7
        ok_q = report.summary["max_query_rel_err"] <= 1e-7
        _status("core matrix vs oracle", ok_m, f"max rel err {report.summary['max_m_rel_err']:.2e}")
        _status("query vs oracle", ok_q, f"max rel err {report.summary['max_query_rel_err']:.2e}")
        ok = ok and ok_m and ok_q
    print(f"timings: {report.timings}", file=sys.stderr)
    return 0 if ok else 2


def cmd_ce_bench(args, cfg):
    b = int(cfg.get("b", 256))
    n = int(cfg.get("n", 1024))
    trials = int(cfg.get("trials", 10000))
    delta = float(cfg.get("delta", 0.01))
    sparsity = int(cfg.get("sparsity", 8))
    fams = cfg.get(
        "families", ["gaussian", "srht", "ams", "countsketch", "sparse_embedding"]
    )
    reports = []
    ok = True
    tail_bound = 20.0 * math.log(n / delta) ** 1.5
    for tag in fams:
        fam = sketch.SketchFamily(tag, sparsity if tag == "sparse_embedding" else 1)
        rep = sketch.ce_estimate(fam, b, n, trials, args.seed, delta=delta)
        reports.append(rep.to_dict())
        unbiased = rep.mean_bias <= 4.0 * rep.se_mean
        ok &= _status(f"{tag} unbiasedness", unbiased,
                      f"bias {rep.mean_bias:.2e} vs 4se {4 * rep.se_mean:.2e}")
        if tag in ("gaussian", "srht", "ams"):
            tail_ok = rep.beta_hat <= tail_bound
            ok &= _status(f"{tag} tail", tail_ok,
                          f"beta_hat {rep.beta_hat:.2f} vs bound {tail_bound:.1f}")
        else:
            _status(f"{tag} tail (report only)", True, f"beta_hat {rep.beta_hat:.2f}")
    _emit(args, {"b": b, "n": n, "trials": trials, "delta": delta, "reports": reports},
          records=reports)
    return 0 if ok else 2


def _dp_value_sets(grid, size, rng):
    pts = grid.points
    mid = pts.size // 2
    sets = {
        "point_mass": np.full(size, pts[mid + 5]),
        "balanced_pair": np.concatenate(
            [np.full(size // 2, pts[mid - 10]), np.full(size - size // 2, pts[mid + 10])]
        ),
        "staircase": pts[np.arange(size) % pts.size],
        "clustered_tail": np.concatenate(
            [
                np.full(int(size * 0.8), pts[mid + 1]),
                pts[rng.integers(0, pts.size, size=size - int(size * 0.8))],
            ]
        ),
        "bimodal_extremes": np.concatenate(
            [np.full(size // 2, pts[2]), np.full(size - size // 2, pts[-3])]
        ),
    }
    return sets


def cmd_dp_bench(args, cfg):
    size = int(cfg.get("size", 2000))
    trials = int(cfg.get("trials", 1000))
    epsilon = float(cfg.get("epsilon", 0.25))
    beta = float(cfg.get("beta", 0.05))
    alpha = float(cfg.get("alpha", 0.25))
    grid = dpcore.SignedGeometricGrid.from_exponent_range(alpha, -25, 24)
    gamma_bound = 4.0 / epsilon * math.log(len(grid) / beta)
    rng = np.random.default_rng(args.seed)
    results = []
    ok = True
    for name, values in _dp_value_sets(grid, size, rng).items():
        errs = np.empty(trials)
        for i in range(trials):
            x = dpcore.private_median(values, grid, epsilon, beta, rng=rng)
            errs[i] = dpcore.median_rank_error(values, x)
        frac = float(np.mean(errs <= gamma_bound))
        results.append({"distribution": name, "pass_fraction": frac,
                        "max_rank_error": float(errs.max()),
                        "gamma_bound": gamma_bound})
        ok &= _status(f"private median [{name}]", frac >= 0.95,
                      f"{frac:.3f} of trials within rank slack {gamma_bound:.1f}")
    _emit(args, {"grid": grid.to_dict(), "epsilon": epsilon, "beta": beta,
                 "trials": trials, "results": results}, records=results)
    return 0 if ok else 2


def _adaptive_common(args, cfg, mode):
    runs = int(cfg.get("runs", 20))
    threshold = float(cfg.get("threshold", 0.9))
    params = dict(cfg.get("params", {}))
    params.setdefault("T", int(cfg.get("T", 50)))
    params.setdefault("L", int(cfg.get("L", 20)))
    params.setdefault("q", int(cfg.get("q", 7)))
    params.setdefault("alpha", float(cfg.get("alpha", 0.25)))
    params.setdefault("delta", float(cfg.get("delta", 0.1)))
    params.setdefault("estimator", cfg.get("estimator", "exact"))
    if "b" in cfg:
        params.setdefault("b", int(cfg["b"]))
    if mode == adaptive.SET_MODE:
        params.setdefault("k", int(cfg.get("k", 8)))
        params.setdefault("n", int(cfg.get("n", 32)))
    else:
        params.setdefault("n", int(cfg.get("n", 16)))
    params["seed"] = args.seed
    params["check_oracle"] = args.check_oracle == "on"
    adversary = cfg.get("adversary", "feedback")
    if not params["check_oracle"]:
        rep = harness.run_adaptive_experiment(mode, adversary, params)
        _emit(args, rep.to_dict(), records=rep.records)
        return 0
    frac, reports = harness.adaptive_battery(mode, adversary, runs, params)
    payload = {
        "mode": mode, "adversary": adversary, "runs": runs,
        "ok_fraction": frac, "threshold": threshold,
        "params": reports[0].config if reports else {},
        "budget": reports[0].summary.get("transcript_budget") if reports else None,
    }
    _emit(args, payload)
    ok = frac >= threshold
    _status(f"adaptive {mode} battery", ok, f"ok fraction {frac:.3f} >= {threshold}")
    return 0 if ok else 2


def cmd_adaptive_sim(args, cfg):
    return _adaptive_common(args, cfg, adaptive.NORM_MODE)


def cmd_setquery_sim(args, cfg):
    return _adaptive_common(args, cfg, adaptive.SET_MODE)


def cmd_complexity(args, cfg):
    a = float(cfg.get("a", 0.31))
    c = float(cfg.get("c", 0.0))
    omega = float(cfg.get("omega", 2.0))
    theta = cfg.get("theta")
    result = harness.complexity_model(
        a, c, omega=omega, theta=float(theta) if theta is not None else None,
        n=int(cfg.get("n", 1024)),
    )
    _emit(args, result, records=result["weights"])
    return 0


COMMANDS = {
    "verify-oracle": cmd_verify_oracle,
    "run-maint": cmd_run_maint,
    "ce-bench": cmd_ce_bench,
    "dp-bench": cmd_dp_bench,
    "adaptive-sim": cmd_adaptive_sim,
    "setquery-sim": cmd_setquery_sim,
    "complexity": cmd_complexity,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="kronproj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output path (default stdout)")
        p.add_argument("--format", choices=["json", "csv"], default="json")
        p.add_argument("--check-oracle", choices=["on", "off"], default="on",
                       dest="check_oracle")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except KronprojError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
