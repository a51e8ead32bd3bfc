import numpy as np
import pytest
import scipy.linalg as sla

from lpeig.corrector import (
    CorrectionState,
    Hierarchy,
    RunConfig,
    SubdomainSolveError,
    augmented_eigensolve,
    interface_solve,
    local_bvp_solve,
    multilevel_correction,
    one_correction_step,
)
from lpeig.fespace import EigenPair, LaplaceSpectrum, fix_sign
from lpeig.sparse import coarse_eigensolve


def small_config(**kw):
    base = dict(H=0.5, delta=0.5, m=4, n_levels=2, nev=3)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def hier():
    return Hierarchy(small_config())


@pytest.fixture(scope="module")
def level1_state(hier):
    lev = hier[1]
    return CorrectionState(1, coarse_eigensolve(lev.space, lev.A, lev.B, 3))


@pytest.fixture(scope="module")
def stepped(hier, level1_state):
    return one_correction_step(hier, level1_state, 2)


def dense_pairs(lev, nev):
    lam, X = sla.eigh(lev.A.toarray(), lev.B.toarray())
    return lam[:nev], X[:, :nev]


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("bad", [
    dict(nev=0), dict(n_levels=0), dict(degree=3), dict(example="wave"),
    dict(cg_tol=0.0), dict(workers=0), dict(preconditioner="ilu"), dict(domain=(0, 1, 0))])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        RunConfig(**bad)


def test_config_defaults_and_overlap_snapping():
    cfg = RunConfig()
    assert (cfg.H, cfg.delta, cfg.m, cfg.n_levels, cfg.nev) == (0.25, 0.1, 4, 5, 5)
    assert cfg.effective_delta == 0.25
    assert "workers" in RunConfig.field_names()


def test_hierarchy_growth(hier):
    dofs = [lev.dofs for lev in hier.levels]
    assert dofs == [9, 49, 225]
    assert hier[2].Q.shape == (225, 9)
    np.testing.assert_allclose((hier[2].P @ hier[1].Q).toarray(), hier[2].Q.toarray())


# ---------------------------------------------------------------- step 1


def test_local_solve_matches_dense(hier, level1_state):
    lev = hier[2]
    u = lev.P @ level1_state.pairs[0].coeffs
    lam = level1_state.pairs[0].lam
    res = lam * (lev.B @ u) - lev.A @ u
    for j in range(4):
        e, rep = local_bvp_solve(hier, 2, j, lam, u)
        idx = hier.subspace(2, ("extended", j), True).index
        dense = np.linalg.solve(lev.A[idx][:, idx].toarray(), res[idx])
        assert np.max(np.abs(e[idx] - dense)) <= 1e-10 * max(1.0, np.max(np.abs(dense)))
        outside = np.setdiff1d(np.arange(lev.dofs), idx)
        assert not e[outside].any()
        assert rep.converged
        # Galerkin orthogonality on the subdomain test basis
        r = (lev.A @ (u + e) - lam * (lev.B @ u))[idx]
        assert np.max(np.abs(r)) <= 1e-9


def test_local_correction_vanishes_for_fine_eigenpair(hier):
    lev = hier[2]
    lam, X = dense_pairs(lev, 1)
    u = X[:, 0]
    for j in range(4):
        e, _ = local_bvp_solve(hier, 2, j, lam[0], u)
        assert np.max(np.abs(e)) <= 1e-9 * np.max(np.abs(u))


# ---------------------------------------------------------------- step 2


def test_glue_matches_local_sums_and_dense_strip(hier, level1_state, stepped):
    lev = hier[2]
    A = lev.A.toarray()
    inner = hier.subspace(2, ("strip", 0), True).index
    closed = hier.subspace(2, ("strip", 0), False).index
    iface = np.setdiff1d(closed, inner)
    for i in range(3):
        glued = stepped.glued[:, i]
        for j in range(4):
            closure = hier.subspace(2, ("core", j), False).index
            np.testing.assert_array_equal(glued[closure], stepped.local_sum(i, j)[closure])
        # strip interior solves the lifted Dirichlet problem with total-function data
        lam = level1_state.pairs[i].lam
        rhs = lam * (lev.B @ stepped.start[:, i])[inner] - A[np.ix_(inner, iface)] @ glued[iface]
        dense = np.linalg.solve(A[np.ix_(inner, inner)], rhs)
        assert np.max(np.abs(glued[inner] - dense)) <= 1e-10 * max(1.0, np.max(np.abs(dense)))


def test_corrections_supported_in_extended_subdomains(hier, stepped):
    for i in range(3):
        for j in range(4):
            idx = hier.subspace(2, ("extended", j), True).index
            e = stepped.corrections[i][j].copy()
            e[idx] = 0.0
            assert not e.any()


def test_single_subdomain_glue_is_identity():
    h = Hierarchy(small_config(m=1, nev=1))
    lev = h[2]
    lev1 = h[1]
    (pair,) = coarse_eigensolve(lev1.space, lev1.A, lev1.B, 1)
    u = lev.P @ pair.coeffs
    e, _ = local_bvp_solve(h, 2, 0, pair.lam, u)
    glued, rep = interface_solve(h, 2, pair.lam, u, [u + e])
    np.testing.assert_array_equal(glued, u + e)
    assert rep.iterations == 0


# ---------------------------------------------------------------- step 3


def test_augmented_matches_explicit_basis(hier, level1_state):
    lev = hier[2]
    pair = level1_state.pairs[0]
    u = lev.P @ pair.coeffs
    sums = [u + local_bvp_solve(hier, 2, j, pair.lam, u)[0] for j in range(4)]
    glued, _ = interface_solve(hier, 2, pair.lam, u, sums)
    (out,), dropped = augmented_eigensolve(hier, 2, glued[:, None], 1)
    Z = np.column_stack([lev.Q.toarray(), glued])
    A, B = lev.A.toarray(), lev.B.toarray()
    lam = sla.eigh(Z.T @ A @ Z, Z.T @ B @ Z, eigvals_only=True)[0]
    assert dropped == 0
    assert out.lam == pytest.approx(lam, rel=1e-10)
    assert out.coeffs @ (lev.B @ out.coeffs) == pytest.approx(1.0, abs=1e-12)
    assert out.lam >= dense_pairs(lev, 1)[0][0] - 1e-12


def test_candidates_in_coarse_space_reproduce_coarse_solve(hier):
    lev = hier[2]
    c0 = hier[0]
    coarse = coarse_eigensolve(c0.space, c0.A, c0.B, 3)
    rng = np.random.default_rng(0)
    cand = lev.Q @ rng.standard_normal((c0.dofs, 2))
    pairs, dropped = augmented_eigensolve(hier, 2, cand, 3)
    assert dropped == 2
    for p, q in zip(pairs, coarse):
        assert p.lam == pytest.approx(q.lam, rel=1e-10)
        v = lev.Q @ q.coeffs
        # equal-magnitude extremes make the sign convention rounding-sensitive
        assert min(np.max(np.abs(p.coeffs - v)), np.max(np.abs(p.coeffs + v))) <= 1e-8


def test_dependent_candidates_dropped_one_kept(hier, stepped):
    lev = hier[2]
    g = stepped.glued[:, :1]
    cand = np.column_stack([g, 2.0 * g, lev.Q @ np.ones(hier[0].dofs)])
    pairs, dropped = augmented_eigensolve(hier, 2, cand, 2)
    assert dropped == 2
    single, _ = augmented_eigensolve(hier, 2, g, 2)
    for p, q in zip(pairs, single):
        assert p.lam == pytest.approx(q.lam, rel=1e-9)


# ---------------------------------------------------------------- full step


def test_step_output_sorted_bounded_normalized(hier, stepped):
    lam = stepped.eigenvalues
    exact = LaplaceSpectrum(hier.config.rect()).eigenvalues(3)
    direct = dense_pairs(hier[2], 3)[0]
    assert np.all(np.diff(lam) >= 0)
    assert np.all(lam >= exact)
    assert np.all(lam >= direct - 1e-12)
    X = np.column_stack([p.coeffs for p in stepped.pairs])
    np.testing.assert_allclose(np.diag(X.T @ (hier[2].B @ X)), 1.0, atol=1e-12)
    assert stepped.mismatches == 0
    assert set(stepped.timings) == {"local", "iface", "aug"}
    assert all(r.converged for r in stepped.reports)


def test_idempotence_on_exact_discrete_pairs(hier):
    lev = hier[2]
    lam, X = dense_pairs(lev, 3)
    pairs = [EigenPair(float(l), fix_sign(X[:, i]), 2) for i, l in enumerate(lam)]
    out = one_correction_step(hier, CorrectionState(2, pairs), 2)
    np.testing.assert_allclose(out.eigenvalues, lam, rtol=1e-9)


def test_step_rejects_wrong_level(hier, level1_state):
    with pytest.raises(ValueError):
        one_correction_step(hier, CorrectionState(0, level1_state.pairs), 2)


def test_worker_count_does_not_change_bits():
    outs = []
    for workers in (1, 4):
        trace = multilevel_correction(small_config(n_levels=3, workers=workers))
        outs.append(trace)
    a, b = outs
    for ra, rb in zip(a.records, b.records):
        assert ra.lambdas == rb.lambdas
    for p, q in zip(a.final.pairs, b.final.pairs):
        np.testing.assert_array_equal(p.coeffs, q.coeffs)


def test_single_level_is_direct_solve():
    cfg = small_config(n_levels=1)
    trace = multilevel_correction(cfg)
    lev = trace.hierarchy[1]
    direct = coarse_eigensolve(lev.space, lev.A, lev.B, cfg.nev)
    assert len(trace.records) == 1
    for p, q in zip(trace.final.pairs, direct):
        assert p.lam == q.lam
        np.testing.assert_array_equal(p.coeffs, q.coeffs)


def test_multilevel_records_errors_and_bounds():
    cfg = small_config(n_levels=3, nev=5)
    refs = [LaplaceSpectrum(cfg.rect()).eigenspace(i) for i in range(5)]
    trace = multilevel_correction(cfg, refs)
    exact = LaplaceSpectrum(cfg.rect()).eigenvalues(5)
    prev = None
    for rec in trace.records:
        assert np.all(np.array(rec.lambdas) >= exact)
        assert rec.max_cg_residual <= cfg.cg_tol
        if prev is not None:
            assert rec.dofs > 3.5 * prev.dofs
            assert all(e < f for e, f in zip(rec.eig_err, prev.eig_err))
        prev = rec


def test_solver_failure_keeps_partial_trace(monkeypatch):
    import lpeig.corrector as corrector

    real = corrector.cg_solve
    monkeypatch.setattr(corrector, "cg_solve", lambda *a, **kw: real(*a, **kw, maxit=2))
    cfg = small_config(preconditioner="none", nev=1)
    with pytest.raises(SubdomainSolveError) as info:
        multilevel_correction(cfg)
    assert info.value.region == ("extended", 0)
    trace = multilevel_correction(cfg, raise_errors=False)
    assert isinstance(trace.error, SubdomainSolveError)
    assert len(trace.records) == 1


@pytest.mark.parametrize("precond", ["jacobi", "multigrid", "none"])
def test_preconditioners_agree(precond):
    trace = multilevel_correction(small_config(preconditioner=precond, nev=2))
    ref = multilevel_correction(small_config(nev=2))
    np.testing.assert_allclose(trace.final.eigenvalues, ref.final.eigenvalues, rtol=1e-9)
