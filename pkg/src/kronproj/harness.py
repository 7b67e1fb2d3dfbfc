"""Experiment orchestration: drift generators, end-to-end runs, reports.

Every experiment is fully specified by a config dict plus a seed, and the
serialized report is deterministic: rerunning with the same inputs yields
byte-identical JSON.  Wall-clock timings are therefore kept out of the
serialized report by default (they live on the in-memory report object
and go to the log).
"""

import json
import math
import time
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import adaptive, oracle
from .errors import ParameterError
from .kronlinalg import EigenWeight, kron_diag
from .projmaint import ConstraintBatch, MaintainedProjection
from .sketch import SketchFamily

SPARSE_K = "sparse-k"
UNIFORM = "uniform"
BURSTY = "bursty"

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "kind", "config", "records", "summary"],
    "properties": {
        "schema_version": {"type": "integer"},
        "kind": {"type": "string"},
        "config": {"type": "object"},
        "records": {"type": "array", "items": {"type": "object"}},
        "counters": {"type": "object"},
        "summary": {"type": "object"},
    },
    "additionalProperties": False,
}


def json_dumps_det(obj):
    """Deterministic JSON encoding (sorted keys, fixed layout)."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


@dataclass
class RunReport:
    """Structured result of one experiment."""

    kind: str
    config: dict
    records: list
    summary: dict
    counters: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    schema_version: int = 1

    def to_dict(self, include_timings=False):
        out = {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "config": self.config,
            "records": self.records,
            "counters": self.counters,
            "summary": self.summary,
        }
        if include_timings:
            out["summary"] = dict(self.summary, timings=self.timings)
        return out

    def to_json(self, include_timings=False):
        data = self.to_dict(include_timings=include_timings)
        jsonschema.validate(data, REPORT_SCHEMA)
        return json_dumps_det(data)


@dataclass
class DriftConfig:
    """Log-eigenvalue drift process: per-step mean and variance budgets.

    Per step the squared per-coordinate log-drift means sum to at most
    C1^2 and the squared variances to at most C2^2; the rank pattern
    decides how that budget is spread over coordinates.
    """

    n: int
    m: int
    T: int
    C1: float = 0.1
    C2: float = 0.0
    rank_pattern: str = UNIFORM
    sparse_k: int = 1
    burst_prob: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.C1 < 0 or self.C2 < 0:
            raise ParameterError("drift budgets must be nonnegative")
        if self.rank_pattern not in (SPARSE_K, UNIFORM, BURSTY):
            raise ParameterError(f"unknown rank pattern {self.rank_pattern!r}")

    def to_dict(self):
        return {
            "n": self.n,
            "m": self.m,
            "T": self.T,
            "C1": self.C1,
            "C2": self.C2,
            "rank_pattern": self.rank_pattern,
            "sparse_k": self.sparse_k,
            "burst_prob": self.burst_prob,
            "seed": self.seed,
        }


def _drift_step(rng, n, C1, C2, coords):
    """Increment vector on the chosen coordinates within the budgets."""
    k = coords.size
    inc = np.zeros(n)
    if k == 0 or (C1 == 0.0 and C2 == 0.0):
        return inc
    signs = rng.integers(0, 2, size=k) * 2.0 - 1.0
    mean = signs * (C1 / math.sqrt(k))
    sigma = (C2**2 / k) ** 0.25 if C2 > 0 else 0.0
    inc[coords] = mean + sigma * rng.standard_normal(k)
    return inc


def gen_drift_sequence(cfg):
    """Eigenvalue trajectories lam^(0..T) under the configured drift."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed & (2**64 - 1)))
    n = cfg.n
    lam = np.exp(rng.uniform(-0.5, 0.5, size=n))
    floor = 1e-12 * max(float(lam.max()), 1.0)
    seq = [lam.copy()]
    for _ in range(cfg.T):
        if cfg.rank_pattern == SPARSE_K:
            coords = rng.choice(n, size=min(cfg.sparse_k, n), replace=False)
            inc = _drift_step(rng, n, cfg.C1, cfg.C2, coords)
        elif cfg.rank_pattern == UNIFORM:
            inc = _drift_step(rng, n, cfg.C1, cfg.C2, np.arange(n))
        else:  # bursty: occasional full-budget bursts, quiet single moves
            if rng.random() < cfg.burst_prob:
                inc = _drift_step(rng, n, cfg.C1, cfg.C2, np.arange(n))
            else:
                coords = rng.choice(n, size=1)
                inc = _drift_step(rng, n, cfg.C1 / 40.0, 0.0, coords)
        lam = np.maximum(lam * np.exp(inc), floor)
        seq.append(lam.copy())
    return seq


def random_orthogonal(n, rng):
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def random_constraints(m, n, rng):
    return ConstraintBatch(matrix=rng.standard_normal((m, n * n)), n=n)


def _oracle_core(constraints, basis, lam):
    """Independent from-scratch core matrix via full Kronecker products."""
    K = np.kron(basis, basis)
    G = constraints.matrix @ K
    kk = kron_diag(lam, lam)
    gram = (G * kk[None, :]) @ G.T
    return G.T @ np.linalg.solve(gram, G)


def run_maintenance_experiment(
    cfg,
    eps_mp=0.05,
    a_exp=0.5,
    family=None,
    s=4,
    b=32,
    check_oracle=True,
    rebuild_every=256,
):
    """Drive the maintained projection over a drift sequence.

    With ``check_oracle`` enabled, every update is checked against the
    from-scratch core matrix at the stored eigenvalues and every query
    against the materialized exact projection at lam_tilde.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed ^ 0x9E3779B9) & (2**64 - 1)))
    if family is None:
        family = SketchFamily.gaussian()
    n = cfg.n
    constraints = random_constraints(cfg.m, n, rng)
    basis = random_orthogonal(n, rng)
    seq = gen_drift_sequence(cfg)
    W0 = EigenWeight(basis, seq[0])
    t_init0 = time.perf_counter()
    mp = MaintainedProjection(
        constraints,
        W0,
        eps_mp=eps_mp,
        a_exp=a_exp,
        family=family,
        s=s,
        b=b,
        seed=cfg.seed,
        rebuild_every=rebuild_every,
    )
    t_init1 = time.perf_counter()

    records = []
    max_m_err = 0.0
    max_q_err = 0.0
    max_log_ratio = 0.0
    for t in range(1, cfg.T + 1):
        lam_ext = seq[t]
        lam_tilde = mp.update(EigenWeight(basis, lam_ext))
        log_ratio = float(np.max(np.abs(np.log(lam_ext) - np.log(lam_tilde))))
        h = rng.standard_normal(n * n)
        cursor = mp.cursor
        block = mp._RT[:, cursor * mp.b : (cursor + 1) * mp.b].copy()
        out = mp.query(h)
        rec = {
            "t": t,
            "woodbury_rank": mp.counters["woodbury_ranks"][-1],
            "lam_tilde_log_ratio": log_ratio,
        }
        if check_oracle:
            m_ref = _oracle_core(constraints, basis, mp.lam)
            m_err = float(
                np.linalg.norm(mp.M - m_ref, "fro") / np.linalg.norm(m_ref, "fro")
            )
            W_tilde = (basis * lam_tilde) @ basis.T
            proj = oracle.exact_projection(constraints, W_tilde)
            expected = proj @ (block @ (block.T @ h))
            q_err = float(
                np.linalg.norm(out - expected)
                / max(np.linalg.norm(expected), 1e-30)
            )
            rec["m_rel_err"] = m_err
            rec["query_rel_err"] = q_err
            max_m_err = max(max_m_err, m_err)
            max_q_err = max(max_q_err, q_err)
        max_log_ratio = max(max_log_ratio, log_ratio)
        records.append(rec)
    t_end = time.perf_counter()

    summary = {
        "max_lam_tilde_log_ratio": max_log_ratio,
        "eps_mp_half": eps_mp / 2.0,
        "full_recomputes": mp.counters["full_recomputes"],
        "total_woodbury_rank": int(sum(mp.counters["woodbury_ranks"])),
    }
    if check_oracle:
        summary["max_m_rel_err"] = max_m_err
        summary["max_query_rel_err"] = max_q_err
    config = dict(cfg.to_dict(), eps_mp=eps_mp, a_exp=a_exp, s=s, b=b,
                  family=family.tag, check_oracle=bool(check_oracle))
    return RunReport(
        kind="maintenance",
        config=config,
        records=records,
        summary=summary,
        counters=mp.counters_dict(),
        timings={
            "init_s": t_init1 - t_init0,
            "loop_s": t_end - t_init1,
            "total_s": t_end - t_start,
        },
    )


# -- adaptive experiments ---------------------------------------------------


def _feedback_rng(seed, t, value):
    """Seed a generator from the adversary's observation (adaptive feedback)."""
    bits = int(np.float64(value).view(np.uint64))
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed & (2**64 - 1), spawn_key=(t, bits & 0xFFFFFFFF))
    )


class NormAdversary:
    """Instance stream for norm mode: scaled near-orthogonal matrices.

    Scales are chosen so that outputs stay inside the grid window [1/U, U]
    and the tolerance envelope (alpha + gamma + alpha*gamma) * ||G||_F^2
    covers the whole grid; this is the regime in which the reduction's
    guarantee is meaningful at desk-scale copy counts.  The feedback
    variant reseeds its perturbations from the previous output, so the
    query sequence genuinely depends on the data structure's answers.
    """

    def __init__(self, n, seed, feedback, c_sq=4.0, wobble=0.1):
        self.n = n
        self.seed = seed
        self.feedback = feedback
        self.c_sq = c_sq
        self.wobble = wobble
        self.rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1)))
        self.Q = random_orthogonal(n, self.rng)
        self.h = self._unit(self.rng.standard_normal(n))
        self.t = 0

    @staticmethod
    def _unit(v):
        return v / np.linalg.norm(v)

    def next_instance(self, last_output):
        rng = self.rng
        if self.feedback and self.t > 0:
            rng = _feedback_rng(self.seed, self.t, last_output)
            mix = last_output / (1.0 + abs(last_output))
            self.h = self._unit(rng.standard_normal(self.n) + 2.0 * mix * self.h)
        else:
            self.h = self._unit(self.rng.standard_normal(self.n))
        # small rotation keeps G near the scaled-orthogonal manifold
        P = self.Q + 0.02 * rng.standard_normal((self.n, self.n))
        self.Q = random_orthogonal_from(P)
        c = math.sqrt(self.c_sq) * (1.0 + self.wobble * (rng.random() - 0.5))
        self.t += 1
        return c * self.Q, self.h.copy()


def random_orthogonal_from(Mat):
    Q, R = np.linalg.qr(Mat)
    return Q * np.sign(np.diag(R))


class SetQueryAdversary:
    """Instance stream for set-query mode: scaled permutations, flat h.

    Row norms are uniform (c^2 each) and h is kept entrywise flat (clipped
    before normalizing) so every per-coordinate truth plus the grid range
    stays inside the envelope (alpha + gamma + alpha*gamma) * ||g_j||^2.
    The feedback variant requests the coordinates with the largest
    previous outputs.
    """

    def __init__(self, n, k, seed, feedback, c_sq=64.0):
        self.n = n
        self.k = k
        self.seed = seed
        self.feedback = feedback
        self.c = math.sqrt(c_sq)
        self.rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1)))
        self.perm = self.rng.permutation(n)
        self.scores = np.zeros(n)
        self.t = 0

    def next_instance(self, last_outputs, last_coords):
        rng = self.rng
        if self.feedback and self.t > 0 and last_coords is not None:
            bits = float(np.sum(last_outputs))
            rng = _feedback_rng(self.seed, self.t, bits)
            self.scores *= 0.5
            for j, u in zip(last_coords, last_outputs):
                self.scores[j] += u
            noisy = self.scores + 0.01 * rng.standard_normal(self.n)
            coords = np.argsort(-noisy)[: self.k]
        else:
            coords = self.rng.choice(self.n, size=self.k, replace=False)
        if self.t % 10 == 0:
            self.perm = rng.permutation(self.n)
        G = np.zeros((self.n, self.n))
        G[np.arange(self.n), self.perm] = self.c
        h = np.clip(1.0 + 0.3 * rng.standard_normal(self.n), 0.4, 1.6)
        h = h / np.linalg.norm(h)
        self.t += 1
        return G, h, np.sort(coords)


def _make_estimator_factory(params):
    kind = params.get("estimator", "exact")
    u_bound = params["u_bound"]
    if kind == "exact":
        return lambda seed: adaptive.ExactNormEstimator(seed, u_bound=u_bound), 0.0
    if kind == "sketch":
        family = SketchFamily(params.get("family", "gaussian"),
                              params.get("family_sparsity", 1))
        b = int(params["b"])
        gamma = float(params.get("gamma", params.get("beta_tail", 5.0) / math.sqrt(b)))
        return (
            lambda seed: adaptive.sketched_norm_estimator(family, b, seed, u_bound=u_bound),
            gamma,
        )
    raise ParameterError(f"unknown estimator kind {kind!r}")


def run_adaptive_experiment(mode, adversary, params):
    """One seeded adaptive run; per-step oracle comparison when enabled.

    ``params`` keys (with defaults): T=50, n=16, k=8, u_bound, alpha=0.25,
    delta=0.1, L, q, estimator ('exact' or 'sketch'), b, gamma, seed=0,
    check_oracle=True.
    """
    p = dict(params)
    T = int(p.get("T", 50))
    n = int(p.get("n", 16))
    alpha = float(p.get("alpha", 0.25))
    delta = float(p.get("delta", 0.1))
    seed = int(p.get("seed", 0))
    check = bool(p.get("check_oracle", True))
    feedback = adversary == "feedback"
    if adversary not in ("oblivious", "feedback"):
        raise ParameterError(f"unknown adversary {adversary!r}")

    t0 = time.perf_counter()
    if mode == adaptive.NORM_MODE:
        p.setdefault("u_bound", 8.0)
        factory, gamma = _make_estimator_factory(p)
        wrapper = adaptive.make_norm_wrapper(
            factory,
            T,
            p["u_bound"],
            alpha,
            delta,
            scale=float(p.get("scale", 1.0)),
            seed=seed,
            q_override=p.get("q"),
            L_override=p.get("L"),
        )
        adv = NormAdversary(n, seed ^ 0x5BF03635, feedback, c_sq=float(p.get("c_sq", 4.0)))
        tol_factor = alpha + gamma + alpha * gamma
        records = []
        ok_all = True
        last = 0.0
        for t in range(T):
            G_t, h_t = adv.next_instance(last)
            u_t = adaptive.norm_step(wrapper, G_t, h_t)
            truth = oracle.exact_norm(G_t, h_t) if check else None
            rec = {"t": t, "u": float(u_t),
                   "sampled": wrapper.last_step_info["sampled"],
                   "rank_error": wrapper.last_step_info["rank_error"]}
            if check:
                bound = tol_factor * np.linalg.norm(G_t, "fro") ** 2 * float(h_t @ h_t)
                ok = abs(u_t - truth) <= bound
                rec.update({"true": float(truth), "bound": float(bound), "ok": bool(ok)})
                ok_all = ok_all and ok
            records.append(rec)
            last = u_t
        summary = {"all_ok": bool(ok_all) if check else None,
                   "gamma": gamma, "tol_factor": tol_factor}
    elif mode == adaptive.SET_MODE:
        k = int(p.get("k", 8))
        p.setdefault("u_bound", 2.0)
        factory, gamma = _make_estimator_factory(p)
        wrapper = adaptive.make_setquery_wrapper(
            factory,
            T,
            k,
            p["u_bound"],
            alpha,
            delta,
            scale=float(p.get("scale", 1.0)),
            seed=seed,
            q_override=p.get("q"),
            L_override=p.get("L"),
        )
        adv = SetQueryAdversary(n, k, seed ^ 0x5BF03635, feedback,
                                c_sq=float(p.get("c_sq", 16.0)))
        tol_factor = alpha + gamma + alpha * gamma
        records = []
        ok_all = True
        last_u, last_coords = None, None
        for t in range(T):
            G_t, h_t, coords = adv.next_instance(last_u, last_coords)
            u_t = adaptive.setquery_step(wrapper, G_t, h_t, coords)
            rec = {"t": t, "coords": [int(j) for j in coords],
                   "u": [float(x) for x in u_t],
                   "sampled": wrapper.last_step_info["sampled"]}
            if check:
                truths = oracle.exact_set_query(G_t, h_t, coords)
                row_norms = np.sum(G_t[coords] ** 2, axis=1)
                bounds = tol_factor * row_norms * float(h_t @ h_t)
                oks = np.abs(u_t - truths) <= bounds
                rec.update({"true": [float(v) for v in truths],
                            "bound": [float(v) for v in bounds],
                            "ok": bool(np.all(oks))})
                ok_all = ok_all and bool(np.all(oks))
            records.append(rec)
            last_u, last_coords = u_t, coords
        summary = {"all_ok": bool(ok_all) if check else None,
                   "gamma": gamma, "tol_factor": tol_factor}
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    t1 = time.perf_counter()

    summary["transcript_budget"] = _budget_dict(wrapper)
    summary.update({k2: wrapper.counters[k2] for k2 in wrapper.counters})
    config = {"mode": mode, "adversary": adversary, "n": n, "T": T,
              "alpha": alpha, "delta": delta, "seed": seed,
              "u_bound": p["u_bound"], "estimator": p.get("estimator", "exact"),
              "b": p.get("b"), "wrapper": wrapper.params}
    if mode == adaptive.SET_MODE:
        config["k"] = int(p.get("k", 8))
    return RunReport(
        kind=f"adaptive-{mode}",
        config=config,
        records=records,
        summary=summary,
        counters=dict(wrapper.counters),
        timings={"total_s": t1 - t0},
    )


def _budget_dict(wrapper):
    try:
        bgt = wrapper.transcript_budget()
        return {"epsilon": bgt.epsilon, "delta": bgt.delta}
    except ParameterError:
        # q > L/2 leaves the amplification lemma inapplicable
        return None


def adaptive_battery(mode, adversary, runs, params):
    """Repeat run_adaptive_experiment over seeds; fraction of all-ok runs."""
    base_seed = int(params.get("seed", 0))
    ok = 0
    reports = []
    for r in range(runs):
        p = dict(params, seed=base_seed + 1000 * r)
        rep = run_adaptive_experiment(mode, adversary, p)
        reports.append(rep)
        if rep.summary["all_ok"]:
            ok += 1
    return ok / runs, reports


# -- complexity-model reporting --------------------------------------------


def complexity_model(a, c, omega=2.0, theta=None, n=1024, i_values=None):
    """Rectangular-multiplication cost exponent and amortization weights.

    theta defaults to omega + 2 (the dense-fallback bound for the
    n^2 x n x n^2 product).  Raises for a = 1, where the exponent formula
    degenerates.
    """
    if not 0.0 < a < 1.0:
        raise ParameterError("a must lie in (0, 1)")
    if not 0.0 <= c < 1.0:
        raise ParameterError("c must lie in [0, 1)")
    if theta is None:
        theta = omega + 2.0
    f_ac = (c * (theta - omega - 2.0) + a * (2.0 + theta - c * theta - omega + 2.0 * c * omega) - theta) / (a - 1.0)
    if i_values is None:
        i_values = sorted(set(int(x) for x in np.geomspace(1, n, 17).round()))
    cutoff = n**a
    weights = []
    for i in i_values:
        if i < cutoff:
            g = n ** (-a)
        else:
            g = i ** ((omega - 2.0) / (1.0 - a) - 1.0) * n ** (-a * (omega - 2.0) / (1.0 - a))
        weights.append({"i": int(i), "g_i": float(g)})
    return {"f_ac": float(f_ac), "omega": omega, "theta": theta, "a": a, "c": c,
            "n": n, "weights": weights}
