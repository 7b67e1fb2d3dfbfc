"""Dynamic maintenance of a Kronecker-structured projection.

Maintains M = G^T (G (L (x) L) G^T)^{-1} G for G = A (U (x) U) under
shared-eigenbasis updates of the weight eigenvalues, together with the
sketched products Q and P used to answer projected matrix-vector queries.
Small eigenvalue drifts are absorbed lazily; larger ones trigger a batched
low-rank inverse correction chosen by a geometric soft-threshold rule.
Queries return the projection at the query-time approximation lam_tilde
applied to a sketched copy of the input vector.

A single instance is single-writer: update and query mutate the cursor and
counters and must be externally serialized.  Distinct instances are
independent.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kronlinalg
from .errors import (
    DimensionError,
    IllConditionedError,
    NotPSDError,
    ParameterError,
    RankDeficiencyError,
)
from .kronlinalg import (
    CONDITION_BOUND,
    EigenWeight,
    kron_apply,
    kron_diag,
    unvec,
    vec,
)
from .sketch import SketchBatch, SketchFamily

SNAPSHOT_VERSION = 1


@dataclass
class ConstraintBatch:
    """m vectorized n x n constraint matrices stored as an m x n^2 matrix.

    Rows must be linearly independent; this is verified with a pivoted QR
    factorization on construction.
    """

    matrix: np.ndarray
    n: int

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        m, nn = self.matrix.shape
        if nn != self.n * self.n:
            raise DimensionError(f"constraint rows have length {nn}, expected n^2")
        if not np.all(np.isfinite(self.matrix)):
            raise ParameterError("constraint entries must be finite")
        if m > nn:
            raise RankDeficiencyError(f"m = {m} exceeds n^2 = {nn}")
        R = scipy.linalg.qr(self.matrix.T, mode="r", pivoting=True)[0]
        diag = np.abs(np.diag(R))
        tol = max(m, nn) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
        rank = int(np.sum(diag > tol))
        if rank < m:
            raise RankDeficiencyError(f"constraint rows have rank {rank} < m = {m}")

    @classmethod
    def from_matrices(cls, mats):
        mats = [np.asarray(A, dtype=float) for A in mats]
        n = mats[0].shape[0]
        rows = np.stack([vec(A) for A in mats])
        return cls(matrix=rows, n=n)

    @property
    def m(self):
        return self.matrix.shape[0]


def soft_threshold(lam, lam_new, r):
    """Grow the update batch geometrically while log-drifts stay comparable.

    Sorts y_i = ln(lam_new_i) - ln(lam_i) by magnitude (stable, descending)
    and, while the magnitude at position ceil(1.5 r) is at least a
    (1 - 1/ln n) fraction of the one at position r, grows r to ceil(1.5 r)
    capped at n.  Returns the blended eigenvalue vector (taking lam_new on
    the first r sorted positions) and the final r.
    """
    lam = np.asarray(lam, dtype=float)
    lam_new = np.asarray(lam_new, dtype=float)
    if np.any(lam <= 0) or np.any(lam_new <= 0):
        raise ParameterError("soft_threshold requires positive eigenvalues")
    if r < 1:
        raise ParameterError("soft_threshold requires r >= 1")
    n = lam.shape[0]
    y = np.log(lam_new) - np.log(lam)
    order = np.argsort(-np.abs(y), kind="stable")
    ay = np.abs(y[order])
    # zero drift at the candidate position means nothing left to fold in
    while (
        1.5 * r < n
        and ay[math.ceil(1.5 * r) - 1] > 0.0
        and ay[math.ceil(1.5 * r) - 1] >= (1.0 - 1.0 / math.log(n)) * ay[r - 1]
    ):
        r = min(math.ceil(1.5 * r), n)
    lam_hat = lam.copy()
    take = order[:r]
    lam_hat[take] = lam_new[take]
    return lam_hat, r


def expand_index_set(S, n):
    """Flat Kronecker-diagonal indices where a change supported on S acts.

    For eigenvalue changes supported on S, the diagonal perturbation
    L (x) C + C (x) L + C (x) C is nonzero only at pair indices (i, j)
    with i in S or j in S; this returns those flat indices (i*n + j),
    sorted, of size 2n|S| - |S|^2.
    """
    idx = np.asarray(sorted(set(int(i) for i in S)), dtype=int)
    if idx.size == 0:
        return np.zeros(0, dtype=int)
    if idx.min() < 0 or idx.max() >= n:
        raise DimensionError("index out of range in expand_index_set")
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    pair = mask[:, None] | mask[None, :]
    return np.flatnonzero(pair.ravel())


def kron_apply_block(A, B, X):
    """Apply (A (x) B) to every column of X without materializing it."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    X = np.asarray(X, dtype=float)
    na, nb = A.shape[1], B.shape[1]
    if X.shape[0] != na * nb:
        raise DimensionError(f"kron_apply_block: X has {X.shape[0]} rows, need {na * nb}")
    k = X.shape[1]
    X3 = X.reshape(nb, na, k, order="F")
    T = np.tensordot(B, X3, axes=([1], [0]))
    Y = np.tensordot(A, T, axes=([1], [1]))
    return Y.transpose(1, 0, 2).reshape(B.shape[0] * A.shape[0], k, order="F")


def incremental_qp(Q, P, M_old, M_new, lam_old, lam_hat, U, RT):
    """Low-rank correction of the sketched products for a fixed pool.

    Given the maintained Q, P consistent with (M_old, lam_old) and the
    sketch stack R^T, returns the pair consistent with (M_new, lam_hat)
    by applying the incremental correction terms instead of recomputing
    from scratch.  Only valid when RT is the same pool Q and P were built
    against.
    """
    khalf_old = kron_diag(np.sqrt(lam_old), np.sqrt(lam_old))
    khalf_new = kron_diag(np.sqrt(lam_hat), np.sqrt(lam_hat))
    gamma = khalf_new - khalf_old
    W1 = kron_apply_block(U.T, U.T, RT)
    Q_new = Q + M_new @ (gamma[:, None] * W1) + (M_new - M_old) @ (khalf_old[:, None] * W1)
    P_new = (
        P
        + kron_apply_block(U, U, gamma[:, None] * Q_new)
        + kron_apply_block(U, U, khalf_old[:, None] * (Q_new - Q))
    )
    return Q_new, P_new


class MaintainedProjection:
    """Projection maintenance with lazy eigenvalue updates and sketched queries.

    Parameters follow the initialization contract: ``eps_mp`` in (0, 0.1)
    controls the spectral approximation, ``a_exp`` in (0, 1) sets the lazy
    threshold n^a_exp on the number of drifted eigenvalues, and the pool
    holds ``s`` sketches of dimension ``b`` that are regenerated with fresh
    seeds on every non-lazy update and on exhaustion.
    """

    def __init__(
        self,
        constraints,
        W,
        eps_mp=0.05,
        a_exp=0.5,
        family=None,
        s=8,
        b=64,
        seed=0,
        rebuild_every=256,
    ):
        if not 0.0 < eps_mp < 0.1:
            raise ParameterError("eps_mp must lie in (0, 0.1)")
        if not 0.0 < a_exp < 1.0:
            raise ParameterError("a_exp must lie in (0, 1)")
        if family is None:
            family = SketchFamily.gaussian()
        self.constraints = constraints
        self.n = constraints.n
        self.m = constraints.m
        self.eps_mp = float(eps_mp)
        self.a_exp = float(a_exp)
        self.family = family
        self.s = int(s)
        self.b = int(b)
        self.rebuild_every = int(rebuild_every)
        self._root_seed = int(seed)
        self._regen_count = 0

        if isinstance(W, EigenWeight):
            ew = W  # caller controls the shared eigenbasis exactly
        else:
            ew = kronlinalg.sym_eigen(np.asarray(W, dtype=float))
        self.basis = ew.basis
        self.eig_floor = 1e-12 * max(float(np.max(ew.eigvals, initial=0.0)), 1.0)
        self.lam = np.maximum(ew.eigvals, self.eig_floor)
        self.lam_tilde = self.lam.copy()
        self._last_external = self.lam.copy()

        # G = A (U (x) U), built row-wise as vec(U^T A_i U)
        n = self.n
        G = np.empty_like(constraints.matrix)
        for i in range(self.m):
            Ai = unvec(constraints.matrix[i], n)
            G[i] = vec(self.basis.T @ Ai @ self.basis)
        self.G = G

        self.counters = {
            "updates": 0,
            "queries": 0,
            "woodbury_ranks": [],
            "full_recomputes": 0,
            "query_fallbacks": 0,
        }
        self._cum_rank = 0
        self._updates_since_build = 0
        self._last_pg = None

        self.M = self._compute_core(self.lam)
        self._install_pool()

    # -- internal construction helpers ------------------------------------

    def _compute_core(self, lam):
        """From-scratch M = G^T (G (L (x) L) G^T)^{-1} G at the given lam."""
        kk = kron_diag(lam, lam)
        gram = (self.G * kk[None, :]) @ self.G.T
        X = kronlinalg.solve_spd(gram, self.G)
        M = self.G.T @ X
        return 0.5 * (M + M.T)

    def _pool_seed(self):
        ss = np.random.SeedSequence(
            entropy=self._root_seed & (2**64 - 1), spawn_key=(self._regen_count,)
        )
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def _install_pool(self):
        """Draw a fresh pool and rebuild Q, P from the current M and lam."""
        self.pool = SketchBatch.generate(
            self.family, self.s, self.b, self.n * self.n, self._pool_seed()
        )
        self._regen_count += 1
        self._RT = self.pool.transpose_dense()
        khalf = kron_diag(np.sqrt(self.lam), np.sqrt(self.lam))
        W1 = kron_apply_block(self.basis.T, self.basis.T, self._RT)
        self.Q = self.M @ (khalf[:, None] * W1)
        self.P = kron_apply_block(self.basis, self.basis, khalf[:, None] * self.Q)
        self.cursor = 0

    def _rebuild(self, lam):
        self.M = self._compute_core(lam)
        self.lam = lam
        self.counters["full_recomputes"] += 1
        self._cum_rank = 0
        self._updates_since_build = 0

    # -- operations --------------------------------------------------------

    def update(self, w_new):
        """Absorb a shared-eigenbasis weight update; returns lam_tilde.

        The returned vector defines the approximating weight
        U diag(lam_tilde) U^T; after every update it satisfies
        |ln(lam_ext_i) - ln(lam_tilde_i)| <= eps_mp / 2 for all i.
        """
        if not isinstance(w_new, EigenWeight):
            raise ParameterError("update expects an EigenWeight")
        if w_new.basis.shape != self.basis.shape or np.max(
            np.abs(w_new.basis - self.basis)
        ) > 1e-10:
            raise ParameterError("update: eigenbasis does not match the maintained one")
        lam_ext = np.asarray(w_new.eigvals, dtype=float)
        if not np.all(np.isfinite(lam_ext)):
            raise ParameterError("update: eigenvalues must be finite")
        lam_ext = np.maximum(lam_ext, self.eig_floor)

        n = self.n
        y = np.log(lam_ext) - np.log(self.lam)
        r0 = int(np.sum(np.abs(y) >= self.eps_mp / 2.0))
        self.counters["updates"] += 1

        if r0 < n**self.a_exp:
            # lazy branch: keep M, Q, P and the maintained lam untouched
            self.counters["woodbury_ranks"].append(0)
        else:
            lam_hat, _ = soft_threshold(self.lam, lam_ext, r0)
            changed = np.flatnonzero(lam_hat != self.lam)
            applied = self._apply_eig_change(lam_hat, changed)
            self.counters["woodbury_ranks"].append(applied)
            self._install_pool()

        close = np.abs(np.log(lam_ext) - np.log(self.lam)) <= self.eps_mp / 2.0
        self.lam_tilde = np.where(close, self.lam, lam_ext)
        self._last_external = lam_ext
        return self.lam_tilde.copy()

    def _apply_eig_change(self, lam_hat, changed):
        """Move the maintained core to lam_hat; returns the applied rank."""
        n = self.n
        if changed.size == 0:
            self.lam = lam_hat
            return 0
        S_tilde = expand_index_set(changed, n)
        dsub = (kron_diag(lam_hat, lam_hat) - kron_diag(self.lam, self.lam))[S_tilde]
        nz = dsub != 0.0
        S_tilde, dsub = S_tilde[nz], dsub[nz]
        k = int(S_tilde.size)
        self._updates_since_build += 1
        if (
            self._updates_since_build >= self.rebuild_every
            or self._cum_rank + k > n * n
        ):
            self._rebuild(lam_hat)
            return k
        try:
            self.M = self._woodbury_core(self.M, S_tilde, dsub)
            self.lam = lam_hat
            self._cum_rank += k
        except IllConditionedError:
            self._rebuild(lam_hat)
        return k

    @staticmethod
    def _woodbury_core(M, S_tilde, dsub, cond_bound=CONDITION_BOUND):
        """M - M_{*,S} (D^{-1} + M_{S,S})^{-1} M_{*,S}^T for diagonal D.

        Uses the algebraically equal form D (I + M_{S,S} D)^{-1} for the
        inner inverse so tiny diagonal entries never get inverted.
        """
        Msub = M[:, S_tilde]
        MSS = M[np.ix_(S_tilde, S_tilde)]
        inner = np.eye(S_tilde.size) + MSS * dsub[None, :]
        cond = np.linalg.cond(inner)
        if not np.isfinite(cond) or cond > cond_bound:
            raise IllConditionedError(
                f"projection update: inner condition {cond:.2e}"
            )
        Y = np.linalg.solve(inner, Msub.T)
        M_new = M - Msub @ (dsub[:, None] * Y)
        return 0.5 * (M_new + M_new.T)

    def query(self, h):
        """Sketched projection query; returns p_l for the next pool sketch.

        The output equals the exact projection at lam_tilde applied to
        R_l^T R_l h, where R_l is the sketch at the cursor.  Consumes one
        sketch; the pool is regenerated (and Q, P rebuilt) on exhaustion.
        """
        h = np.asarray(h, dtype=float)
        n = self.n
        if h.shape != (n * n,):
            raise DimensionError(f"query: expected vector of length {n * n}")
        l = self.cursor
        RT_block = self._RT[:, l * self.b : (l + 1) * self.b]
        rh = RT_block.T @ h
        v = RT_block @ rh  # R_l^T R_l h
        p_l = self._project_sketched(v, l, rh)
        self.cursor += 1
        self.counters["queries"] += 1
        if self.cursor >= self.s:
            self._install_pool()
        return p_l

    def _project_sketched(self, v, l, rh):
        n = self.n
        khalf = kron_diag(np.sqrt(self.lam), np.sqrt(self.lam))
        khalf_t = kron_diag(np.sqrt(self.lam_tilde), np.sqrt(self.lam_tilde))
        gamma_t = khalf_t - khalf
        w = kron_apply(self.basis.T, self.basis.T, v)
        t1 = self.Q[:, l * self.b : (l + 1) * self.b] @ rh
        changed = np.flatnonzero(self.lam_tilde != self.lam)
        if changed.size:
            t1 = t1 + self.M @ (gamma_t * w)
            S_tilde = expand_index_set(changed, n)
            dsub = (
                kron_diag(self.lam_tilde, self.lam_tilde)
                - kron_diag(self.lam, self.lam)
            )[S_tilde]
            nz = dsub != 0.0
            S_tilde, dsub = S_tilde[nz], dsub[nz]
        else:
            S_tilde = np.zeros(0, dtype=int)
        p_g = np.zeros(n * n)
        if S_tilde.size:
            MSS = self.M[np.ix_(S_tilde, S_tilde)]
            inner = np.eye(S_tilde.size) + MSS * dsub[None, :]
            cond = np.linalg.cond(inner)
            if not np.isfinite(cond) or cond > CONDITION_BOUND:
                # recoverable: answer from scratch at lam_tilde instead
                self.counters["query_fallbacks"] += 1
                self._last_pg = None
                return self._project_exact(v)
            u1 = t1[S_tilde]
            core = dsub * np.linalg.solve(inner, u1)
            p_g = kron_apply(self.basis, self.basis, khalf_t * (self.M[:, S_tilde] @ core))
        self._last_pg = p_g
        return kron_apply(self.basis, self.basis, khalf_t * t1) - p_g

    def _project_exact(self, x):
        """Exact projection at lam_tilde applied to x, from scratch."""
        kk = kron_diag(self.lam_tilde, self.lam_tilde)
        khalf_t = np.sqrt(kk)
        z = khalf_t * kron_apply(self.basis.T, self.basis.T, x)
        gram = (self.G * kk[None, :]) @ self.G.T
        sol = kronlinalg.solve_spd(gram, self.G @ z)
        return kron_apply(self.basis, self.basis, khalf_t * (self.G.T @ sol))

    def query_exactish(self, h):
        """Unsketched reference path: the projection at lam_tilde times h."""
        h = np.asarray(h, dtype=float)
        if h.shape != (self.n * self.n,):
            raise DimensionError(f"query_exactish: expected length {self.n * self.n}")
        return self._project_exact(h)

    @property
    def last_query_pg(self):
        """Woodbury correction term of the most recent query (debug)."""
        return None if self._last_pg is None else self._last_pg.copy()

    # -- introspection ------------------------------------------------------

    def check_invariants(self, atol_scale=1.0):
        """Assert the structural invariants; intended for tests and debugging."""
        n = self.n
        assert np.all(self.lam >= self.eig_floor)
        assert self.cursor < self.s
        mn = np.linalg.norm(self.M, "fro")
        assert np.linalg.norm(self.M - self.M.T, "fro") <= 1e-8 * mn * atol_scale
        if n <= 8:
            kk = kron_diag(self.lam, self.lam)
            resid = self.M @ (kk[:, None] * self.M) - self.M
            assert np.linalg.norm(resid, "fro") <= 1e-7 * mn * atol_scale
        ratio = np.abs(np.log(self._last_external) - np.log(self.lam_tilde))
        assert np.max(ratio) <= self.eps_mp / 2.0 + 1e-12

    def counters_dict(self):
        out = dict(self.counters)
        out["woodbury_ranks"] = list(out["woodbury_ranks"])
        return out

    # -- serialization ------------------------------------------------------

    def snapshot(self):
        """Versioned state bundle sufficient for a deterministic resume."""
        return {
            "version": SNAPSHOT_VERSION,
            "n": self.n,
            "m": self.m,
            "constraints": self.constraints.matrix.tolist(),
            "basis": self.basis.tolist(),
            "lam": self.lam.tolist(),
            "lam_tilde": self.lam_tilde.tolist(),
            "last_external": self._last_external.tolist(),
            "eps_mp": self.eps_mp,
            "a_exp": self.a_exp,
            "family": {"tag": self.family.tag, "sparsity": self.family.sparsity},
            "s": self.s,
            "b": self.b,
            "rebuild_every": self.rebuild_every,
            "root_seed": self._root_seed,
            "regen_count": self._regen_count - 1,
            "cursor": self.cursor,
            "eig_floor": self.eig_floor,
            "cum_rank": self._cum_rank,
            "updates_since_build": self._updates_since_build,
            "counters": self.counters_dict(),
        }

    @classmethod
    def from_snapshot(cls, snap):
        if snap.get("version") != SNAPSHOT_VERSION:
            raise ParameterError(f"unsupported snapshot version {snap.get('version')}")
        obj = cls.__new__(cls)
        obj.constraints = ConstraintBatch(
            matrix=np.asarray(snap["constraints"], dtype=float), n=snap["n"]
        )
        obj.n = snap["n"]
        obj.m = snap["m"]
        obj.eps_mp = snap["eps_mp"]
        obj.a_exp = snap["a_exp"]
        obj.family = SketchFamily(snap["family"]["tag"], snap["family"]["sparsity"])
        obj.s = snap["s"]
        obj.b = snap["b"]
        obj.rebuild_every = snap["rebuild_every"]
        obj._root_seed = snap["root_seed"]
        obj._regen_count = snap["regen_count"]
        obj.basis = np.asarray(snap["basis"], dtype=float)
        obj.eig_floor = snap["eig_floor"]
        obj.lam = np.asarray(snap["lam"], dtype=float)
        obj.lam_tilde = np.asarray(snap["lam_tilde"], dtype=float)
        obj._last_external = np.asarray(snap["last_external"], dtype=float)
        n = obj.n
        G = np.empty_like(obj.constraints.matrix)
        for i in range(obj.m):
            Ai = unvec(obj.constraints.matrix[i], n)
            G[i] = vec(obj.basis.T @ Ai @ obj.basis)
        obj.G = G
        obj.counters = dict(snap["counters"])
        obj._cum_rank = snap["cum_rank"]
        obj._updates_since_build = snap["updates_since_build"]
        obj._last_pg = None
        obj.M = obj._compute_core(obj.lam)
        obj._install_pool()
        obj.cursor = snap["cursor"]
        return obj
