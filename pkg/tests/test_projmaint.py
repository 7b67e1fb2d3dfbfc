import math

import numpy as np
import numpy.testing as npt
import pytest

from kronproj import oracle
from kronproj.errors import DimensionError, ParameterError, RankDeficiencyError
from kronproj.kronlinalg import EigenWeight, kron_diag, vec
from kronproj.projmaint import (
    ConstraintBatch,
    MaintainedProjection,
    expand_index_set,
    incremental_qp,
    kron_apply_block,
    soft_threshold,
)
from kronproj.sketch import SketchFamily


def random_orthogonal(n, rng):
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def make_state(n, m, seed, eps_mp=0.05, a_exp=0.5, s=4, b=16, **kw):
    rng = np.random.default_rng(seed)
    cons = ConstraintBatch(matrix=rng.standard_normal((m, n * n)), n=n)
    U = random_orthogonal(n, rng)
    lam = np.exp(rng.uniform(-0.5, 0.5, n))
    mp = MaintainedProjection(
        cons, EigenWeight(U, lam), eps_mp=eps_mp, a_exp=a_exp,
        family=SketchFamily.gaussian(), s=s, b=b, seed=seed, **kw
    )
    return mp, cons, U, rng


def oracle_core(cons, U, lam):
    K = np.kron(U, U)
    G = cons.matrix @ K
    kk = kron_diag(lam, lam)
    gram = (G * kk[None, :]) @ G.T
    return G.T @ np.linalg.solve(gram, G)


def materialize_maintained_projection(mp):
    kh = np.sqrt(kron_diag(mp.lam, mp.lam))
    K = np.kron(mp.basis, mp.basis)
    return K @ (kh[:, None] * mp.M * kh[None, :]) @ K.T


class TestConstraintBatch:
    def test_rank_deficiency_detected(self):
        A = np.ones((2, 4))
        with pytest.raises(RankDeficiencyError):
            ConstraintBatch(matrix=A, n=2)

    def test_too_many_rows(self):
        with pytest.raises(RankDeficiencyError):
            ConstraintBatch(matrix=np.eye(5)[:, :4], n=2)

    def test_from_matrices(self):
        mats = [np.eye(2), np.array([[0.0, 1.0], [1.0, 0.0]])]
        cons = ConstraintBatch.from_matrices(mats)
        assert cons.m == 2 and cons.n == 2
        npt.assert_array_equal(cons.matrix[0], vec(np.eye(2)))


class TestSoftThreshold:
    def test_no_change(self):
        lam = np.ones(4)
        lam_hat, r = soft_threshold(lam, lam, 1)
        npt.assert_array_equal(lam_hat, lam)
        assert r == 1

    def test_single_moved_coordinate(self):
        lam = np.ones(4)
        lam_new = lam.copy()
        lam_new[0] = math.e
        lam_hat, r = soft_threshold(lam, lam_new, 1)
        # |y_(2)| = 0, so the growth loop exits immediately
        npt.assert_array_equal(lam_hat, lam_new)
        assert r == 1

    def test_growth_trace_near_uniform(self):
        # y = (1, .99, .98, ...): every comparison passes, r walks 1->2->3->5->8
        n = 8
        lam = np.ones(n)
        y = 1.0 - 0.01 * np.arange(n)
        lam_new = np.exp(y)
        seen = []
        r = 1
        while 1.5 * r < n and abs(y[math.ceil(1.5 * r) - 1]) >= (1 - 1 / math.log(n)) * abs(y[r - 1]):
            r = min(math.ceil(1.5 * r), n)
            seen.append(r)
        assert seen == [2, 3, 5, 8]
        lam_hat, r_out = soft_threshold(lam, lam_new, 1)
        assert r_out == 8
        npt.assert_allclose(lam_hat, lam_new)

    def test_rejects_nonpositive(self):
        with pytest.raises(ParameterError):
            soft_threshold(np.array([1.0, 0.0]), np.ones(2), 1)

    def test_stable_tiebreak(self):
        lam = np.ones(4)
        lam_new = np.exp(np.array([0.5, 0.5, 0.1, 0.5]))
        lam_hat, r = soft_threshold(lam, lam_new, 3)
        # ties on |y| keep index order, so coordinates 0, 1, 3 are taken
        npt.assert_array_equal(np.flatnonzero(lam_hat != lam), [0, 1, 3])


class TestExpandIndexSet:
    def test_empty(self):
        assert expand_index_set([], 4).size == 0

    def test_single_index_n2(self):
        # pairs (0,0), (0,1), (1,0) in flat order
        npt.assert_array_equal(expand_index_set([0], 2), [0, 1, 2])

    def test_full_set(self):
        npt.assert_array_equal(expand_index_set(range(3), 3), np.arange(9))

    def test_size_formula(self):
        n = 7
        for size in range(1, n + 1):
            S = list(range(size))
            got = expand_index_set(S, n)
            assert got.size == 2 * n * size - size * size

    def test_covers_delta_support(self):
        rng = np.random.default_rng(0)
        n = 5
        lam = np.exp(rng.uniform(-1, 1, n))
        C = np.zeros(n)
        S = [1, 3]
        C[S] = rng.uniform(0.1, 0.5, len(S))
        delta = kron_diag(lam + C, lam + C) - kron_diag(lam, lam)
        support = np.flatnonzero(delta)
        expanded = expand_index_set(S, n)
        assert set(support) <= set(expanded)

    def test_out_of_range(self):
        with pytest.raises(DimensionError):
            expand_index_set([4], 4)


class TestInit:
    def test_single_identity_constraint(self):
        cons = ConstraintBatch.from_matrices([np.eye(2)])
        mp = MaintainedProjection(cons, np.eye(2), s=2, b=4, seed=0)
        want = np.outer(vec(np.eye(2)), vec(np.eye(2))) / 2.0
        npt.assert_allclose(mp.M, want, atol=1e-12)

    def test_identity_weight_reduces_to_plain_projection(self):
        rng = np.random.default_rng(1)
        n, m = 3, 4
        A = rng.standard_normal((m, n * n))
        cons = ConstraintBatch(matrix=A, n=n)
        mp = MaintainedProjection(cons, np.eye(n), s=2, b=4, seed=1)
        want = A.T @ np.linalg.solve(A @ A.T, A)
        # with W = I the basis factors cancel, so M itself is the plain
        # row-space projection of the constraint matrix
        npt.assert_allclose(mp.M, want, atol=1e-9)
        npt.assert_allclose(materialize_maintained_projection(mp), want, atol=1e-9)

    def test_projection_matches_oracle(self):
        mp, cons, U, rng = make_state(4, 5, seed=2)
        W = (U * mp.lam) @ U.T
        P_exact = oracle.exact_projection(cons, W)
        npt.assert_allclose(
            materialize_maintained_projection(mp), P_exact, atol=1e-8
        )

    def test_init_state_fields(self):
        mp, _, _, _ = make_state(4, 5, seed=3, s=3, b=8)
        npt.assert_array_equal(mp.lam_tilde, mp.lam)
        assert mp.cursor == 0
        assert mp.Q.shape == (16, 24)
        assert mp.P.shape == (16, 24)

    def test_invalid_eps(self):
        cons = ConstraintBatch.from_matrices([np.eye(2)])
        with pytest.raises(ParameterError):
            MaintainedProjection(cons, np.eye(2), eps_mp=0.5)

    def test_qp_consistency_at_init(self):
        mp, _, _, _ = make_state(3, 4, seed=4)
        kh = np.sqrt(kron_diag(mp.lam, mp.lam))
        W1 = kron_apply_block(mp.basis.T, mp.basis.T, mp._RT)
        npt.assert_allclose(mp.Q, mp.M @ (kh[:, None] * W1), atol=1e-10)
        npt.assert_allclose(
            mp.P, kron_apply_block(mp.basis, mp.basis, kh[:, None] * mp.Q), atol=1e-10
        )
        # P equals the exact projection applied to the sketch stack
        W = (mp.basis * mp.lam) @ mp.basis.T
        proj = oracle.exact_projection(mp.constraints, W)
        npt.assert_allclose(mp.P, proj @ mp._RT, atol=1e-8)


class TestKronApplyBlock:
    def test_matches_materialized(self):
        rng = np.random.default_rng(5)
        A = rng.standard_normal((3, 3))
        B = rng.standard_normal((3, 3))
        X = rng.standard_normal((9, 4))
        npt.assert_allclose(kron_apply_block(A, B, X), np.kron(A, B) @ X, atol=1e-12)


class TestUpdate:
    def test_same_weight_is_noop(self):
        mp, _, U, _ = make_state(4, 5, seed=6)
        M0 = mp.M.copy()
        lt = mp.update(EigenWeight(U, mp.lam.copy()))
        npt.assert_array_equal(lt, mp.lam)
        npt.assert_array_equal(mp.M, M0)
        assert mp.counters["woodbury_ranks"][-1] == 0

    def test_lazy_branch_single_big_eigenvalue(self):
        # n = 4, a = 0.5: one drifted coordinate stays below n^a = 2
        mp, _, U, _ = make_state(4, 5, seed=7, eps_mp=0.05, a_exp=0.5)
        lam_new = mp.lam.copy()
        lam_new[1] *= 2.0
        M0 = mp.M.copy()
        lt = mp.update(EigenWeight(U, lam_new))
        npt.assert_array_equal(mp.M, M0)  # state M untouched
        assert lt[1] == lam_new[1]  # lam_tilde absorbs the move
        assert np.all(lt[[0, 2, 3]] == mp.lam[[0, 2, 3]])
        assert mp.counters["woodbury_ranks"][-1] == 0

    def test_nonlazy_applies_woodbury(self):
        mp, cons, U, _ = make_state(4, 5, seed=8)
        lam_new = mp.lam * np.exp(np.array([0.3, -0.4, 0.2, 0.0]))
        lt = mp.update(EigenWeight(U, lam_new))
        assert mp.counters["woodbury_ranks"][-1] > 0
        m_ref = oracle_core(cons, U, mp.lam)
        assert np.linalg.norm(mp.M - m_ref) <= 1e-9 * np.linalg.norm(m_ref)
        # after a non-lazy update lam_tilde coincides with the stored lam
        npt.assert_array_equal(lt, mp.lam)

    def test_spectral_bound_strong_form(self):
        mp, _, U, rng = make_state(6, 8, seed=9)
        lam = mp.lam.copy()
        for _ in range(30):
            k = int(rng.integers(1, 7))
            idx = rng.choice(6, size=k, replace=False)
            lam = lam.copy()
            lam[idx] *= np.exp(rng.uniform(-0.2, 0.2, k))
            lt = mp.update(EigenWeight(U, lam))
            assert np.max(np.abs(np.log(lam) - np.log(lt))) <= mp.eps_mp / 2 + 1e-12

    def test_fifty_random_updates_match_oracle(self):
        mp, cons, U, rng = make_state(6, 8, seed=10)
        lam = mp.lam.copy()
        worst = 0.0
        for _ in range(50):
            k = int(rng.integers(1, 7))
            idx = rng.choice(6, size=k, replace=False)
            lam = lam.copy()
            lam[idx] *= np.exp(rng.uniform(-0.25, 0.25, k))
            mp.update(EigenWeight(U, lam))
            m_ref = oracle_core(cons, U, mp.lam)
            worst = max(
                worst,
                np.linalg.norm(mp.M - m_ref, "fro") / np.linalg.norm(m_ref, "fro"),
            )
        assert worst <= 1e-7

    def test_mismatched_basis_rejected(self):
        mp, _, U, rng = make_state(4, 5, seed=11)
        V = random_orthogonal(4, np.random.default_rng(999))
        with pytest.raises(ParameterError):
            mp.update(EigenWeight(V, mp.lam.copy()))

    def test_pool_regenerated_on_nonlazy_update(self):
        mp, _, U, _ = make_state(4, 5, seed=12)
        rt0 = mp._RT.copy()
        lam_new = mp.lam * np.exp(0.3 * np.ones(4))
        mp.update(EigenWeight(U, lam_new))
        assert not np.array_equal(mp._RT, rt0)
        assert mp.cursor == 0

    def test_rebuild_every_trigger(self):
        mp, _, U, rng = make_state(4, 5, seed=13, rebuild_every=2)
        lam = mp.lam.copy()
        for i in range(4):
            lam = lam * np.exp(rng.uniform(0.1, 0.3, 4))
            mp.update(EigenWeight(U, lam))
        assert mp.counters["full_recomputes"] >= 2

    def test_cumulative_rank_trigger(self):
        # every full-support update has rank n^2, tripping the budget at once
        mp, _, U, rng = make_state(4, 5, seed=14)
        lam = mp.lam.copy()
        for _ in range(3):
            lam = lam * np.exp(rng.uniform(0.1, 0.3, 4))
            mp.update(EigenWeight(U, lam))
        assert mp.counters["full_recomputes"] >= 1

    def test_invariants_after_updates(self):
        mp, _, U, rng = make_state(5, 6, seed=15)
        lam = mp.lam.copy()
        for _ in range(10):
            lam = lam * np.exp(rng.uniform(-0.2, 0.2, 5))
            mp.update(EigenWeight(U, lam))
            mp.check_invariants()

    def test_lazy_branch_soundness(self):
        # while updates stay lazy, the deferred support |{i: lt_i != lam_i}|
        # stays below n^a_exp plus previously deferred coordinates
        n = 9  # n^0.5 = 3
        mp, _, U, rng = make_state(n, 6, seed=99, a_exp=0.5, eps_mp=0.08)
        lam = mp.lam.copy()
        deferred = set()
        for step in range(6):
            idx = int(rng.integers(0, n))
            lam = lam.copy()
            lam[idx] *= 1.5  # single coordinate beyond eps/2
            lt = mp.update(EigenWeight(U, lam))
            support = set(np.flatnonzero(lt != mp.lam))
            if mp.counters["woodbury_ranks"][-1] == 0:  # lazy step
                new = support - deferred
                assert len(new) <= n**0.5
                deferred = support
            else:
                deferred = set(np.flatnonzero(lt != mp.lam))

    def test_eigenvalues_floored_on_update(self):
        mp, _, U, _ = make_state(4, 5, seed=100)
        lam_new = mp.lam.copy()
        lam_new[0] = 0.0  # clamped up to the floor rather than rejected
        mp.update(EigenWeight(U, lam_new))
        assert np.all(mp._last_external >= mp.eig_floor)


class TestQuery:
    def test_zero_vector(self):
        mp, _, _, _ = make_state(3, 4, seed=16)
        npt.assert_array_equal(mp.query(np.zeros(9)), np.zeros(9))

    def test_full_rank_projection_is_identity(self):
        rng = np.random.default_rng(17)
        n = 2
        cons = ConstraintBatch(matrix=rng.standard_normal((4, 4)), n=n)
        U = random_orthogonal(n, rng)
        lam = np.exp(rng.uniform(-0.3, 0.3, n))
        mp = MaintainedProjection(cons, EigenWeight(U, lam), s=2, b=4, seed=17)
        h = rng.standard_normal(4)
        blk = mp._RT[:, : mp.b]
        want = blk @ (blk.T @ h)  # projection is the identity here
        npt.assert_allclose(mp.query(h), want, atol=1e-8)

    def test_after_init_matches_oracle(self):
        mp, cons, U, rng = make_state(4, 6, seed=18)
        h = rng.standard_normal(16)
        blk = mp._RT[:, : mp.b].copy()
        out = mp.query(h)
        W = (U * mp.lam) @ U.T
        proj = oracle.exact_projection(cons, W)
        want = proj @ (blk @ (blk.T @ h))
        assert np.linalg.norm(out - want) <= 1e-8 * np.linalg.norm(want)
        # no lazy drift pending, so the correction term is zero
        npt.assert_array_equal(mp.last_query_pg, np.zeros(16))

    def test_lazy_state_query_uses_correction(self):
        mp, cons, U, rng = make_state(4, 6, seed=19, eps_mp=0.05, a_exp=0.5)
        lam_new = mp.lam.copy()
        lam_new[2] *= 1.8  # single coordinate: lazy branch
        lt = mp.update(EigenWeight(U, lam_new))
        assert np.any(lt != mp.lam)
        h = rng.standard_normal(16)
        cur = mp.cursor
        blk = mp._RT[:, cur * mp.b : (cur + 1) * mp.b].copy()
        out = mp.query(h)
        W_tilde = (U * lt) @ U.T
        proj = oracle.exact_projection(cons, W_tilde)
        want = proj @ (blk @ (blk.T @ h))
        assert np.linalg.norm(out - want) <= 1e-8 * np.linalg.norm(want)
        assert np.linalg.norm(mp.last_query_pg) > 0

    def test_cursor_advances_and_pool_rolls(self):
        mp, _, _, rng = make_state(3, 4, seed=20, s=2, b=8)
        rt0 = mp._RT.copy()
        h = rng.standard_normal(9)
        mp.query(h)
        assert mp.cursor == 1
        mp.query(h)
        # pool exhausted: regenerated eagerly, cursor reset
        assert mp.cursor == 0
        assert not np.array_equal(mp._RT, rt0)

    def test_sketch_freshness_within_pool(self):
        mp, _, _, rng = make_state(3, 4, seed=21, s=4, b=8)
        seen = []
        for _ in range(4):
            seen.append(mp.cursor)
            mp.query(rng.standard_normal(9))
        assert seen == [0, 1, 2, 3]

    def test_length_mismatch(self):
        mp, _, _, _ = make_state(3, 4, seed=22)
        with pytest.raises(DimensionError):
            mp.query(np.ones(8))

    def test_condition_fallback_still_exact(self, monkeypatch):
        # force the inner-solve guard to trip: the query falls back to the
        # from-scratch path, counts the event, and stays oracle-exact
        import kronproj.projmaint as pm

        mp, cons, U, rng = make_state(4, 6, seed=55)
        lam_new = mp.lam.copy()
        lam_new[1] *= 1.9  # lazy drift so the correction path is active
        lt = mp.update(EigenWeight(U, lam_new))
        monkeypatch.setattr(pm, "CONDITION_BOUND", 1e-6)
        h = rng.standard_normal(16)
        cur = mp.cursor
        blk = mp._RT[:, cur * mp.b : (cur + 1) * mp.b].copy()
        out = mp.query(h)
        assert mp.counters["query_fallbacks"] == 1
        proj = oracle.exact_projection(cons, (U * lt) @ U.T)
        want = proj @ (blk @ (blk.T @ h))
        assert np.linalg.norm(out - want) <= 1e-8 * np.linalg.norm(want)


class TestQueryExactish:
    def test_zero(self):
        mp, _, _, _ = make_state(3, 4, seed=23)
        npt.assert_array_equal(mp.query_exactish(np.zeros(9)), np.zeros(9))

    def test_matches_oracle_after_init(self):
        mp, cons, U, rng = make_state(4, 6, seed=24)
        h = rng.standard_normal(16)
        W = (U * mp.lam) @ U.T
        want = oracle.exact_projection(cons, W) @ h
        npt.assert_allclose(mp.query_exactish(h), want, atol=1e-8)

    def test_matches_oracle_in_lazy_state(self):
        mp, cons, U, rng = make_state(4, 6, seed=25)
        lam_new = mp.lam.copy()
        lam_new[0] *= 1.7
        lt = mp.update(EigenWeight(U, lam_new))
        h = rng.standard_normal(16)
        want = oracle.exact_projection(cons, (U * lt) @ U.T) @ h
        npt.assert_allclose(mp.query_exactish(h), want, atol=1e-8)


class TestIncrementalQP:
    def test_patch_equals_recompute_for_fixed_pool(self):
        mp, cons, U, rng = make_state(4, 6, seed=26)
        RT = mp._RT.copy()
        Q0, P0, M0, lam0 = mp.Q.copy(), mp.P.copy(), mp.M.copy(), mp.lam.copy()
        lam_hat = lam0 * np.exp(rng.uniform(-0.3, 0.3, 4))
        M_new = oracle_core(cons, U, lam_hat)
        Q_patch, P_patch = incremental_qp(Q0, P0, M0, M_new, lam0, lam_hat, U, RT)
        kh = np.sqrt(kron_diag(lam_hat, lam_hat))
        W1 = kron_apply_block(U.T, U.T, RT)
        Q_ref = M_new @ (kh[:, None] * W1)
        P_ref = kron_apply_block(U, U, kh[:, None] * Q_ref)
        npt.assert_allclose(Q_patch, Q_ref, atol=1e-9)
        npt.assert_allclose(P_patch, P_ref, atol=1e-9)


class TestSnapshot:
    def test_roundtrip_resumes_deterministically(self):
        mp, _, U, rng = make_state(4, 5, seed=27)
        lam = mp.lam * np.exp(rng.uniform(-0.2, 0.2, 4))
        mp.update(EigenWeight(U, lam))
        snap = mp.snapshot()
        clone_a = MaintainedProjection.from_snapshot(snap)
        clone_b = MaintainedProjection.from_snapshot(snap)
        npt.assert_array_equal(clone_a.lam_tilde, mp.lam_tilde)
        npt.assert_array_equal(clone_a.lam, mp.lam)
        assert clone_a.cursor == mp.cursor
        # the core is rebuilt from the stored lam: equal to float precision
        npt.assert_allclose(clone_a.M, mp.M, atol=1e-10)
        npt.assert_array_equal(clone_a._RT, mp._RT)  # same pool seed
        # two restores replay bit-identically, and track the donor closely,
        # across queries, pool rollovers, and further updates
        for i in range(6):
            h = rng.standard_normal(16)
            out = mp.query(h)
            out_a = clone_a.query(h)
            out_b = clone_b.query(h)
            npt.assert_array_equal(out_a, out_b)
            npt.assert_allclose(out_a, out, atol=1e-10)
        lam2 = mp.lam * np.exp(rng.uniform(-0.2, 0.2, 4))
        npt.assert_array_equal(
            clone_a.update(EigenWeight(U, lam2)), clone_b.update(EigenWeight(U, lam2))
        )
        npt.assert_array_equal(clone_a._RT, clone_b._RT)

    def test_snapshot_is_json_serializable(self):
        import json

        mp, _, _, _ = make_state(3, 4, seed=28)
        blob = json.dumps(mp.snapshot())
        assert "constraints" in blob
