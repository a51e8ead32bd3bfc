import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from lpeig.fespace import (
    LaplaceSpectrum,
    assemble_mass,
    assemble_stiffness,
    build_space,
    coefficient_field,
    prolongation_matrix,
)
from lpeig.mesh import DomainRect, build_structured_mesh, refine_regular
from lpeig.sparse import (
    ConvergenceError,
    IndefiniteMatrixError,
    MultigridPreconditioner,
    NotPositiveDefiniteError,
    coarse_eigensolve,
    cg_solve,
    dense_gen_eigensolve,
)

SQUARE = DomainRect(-1.0, 1.0, -1.0, 1.0)
LAPLACE = coefficient_field("laplace")


def five_point(n):
    T = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(n, n))
    I = sp.identity(n)
    return (sp.kron(I, T) + sp.kron(T, I)).tocsr()


def random_spd(rng, n, cond=100.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.geomspace(1.0, cond, n)
    return (Q * d) @ Q.T


def laplace_system(H, degree=1):
    space = build_space(build_structured_mesh(SQUARE, H), degree)
    A = space.restrict(assemble_stiffness(space, LAPLACE))
    B = space.restrict(assemble_mass(space, LAPLACE))
    return space, A, B


# ---------------------------------------------------------------- CG


def test_identity_one_iteration():
    b = np.arange(1.0, 6.0)
    x, rep = cg_solve(sp.identity(5, format="csr"), b)
    np.testing.assert_allclose(x, b)
    assert rep.iterations == 1 and rep.converged


def test_five_point_against_dense():
    M = five_point(3)  # 9 x 9
    b = np.zeros(9)
    b[0] = 1.0
    for precond in ("jacobi", None):
        x, rep = cg_solve(M, b, tol=1e-12, precond=precond)
        np.testing.assert_allclose(x, np.linalg.solve(M.toarray(), b), atol=1e-10)
        assert rep.final_residual <= 1e-12


def test_zero_rhs_and_initial_guess():
    M = five_point(4)
    x, rep = cg_solve(M, np.zeros(16))
    assert not x.any() and rep.iterations == 0
    b = np.ones(16)
    exact = np.linalg.solve(M.toarray(), b)
    x, rep = cg_solve(M, b, x0=exact)
    assert rep.iterations <= 1
    np.testing.assert_allclose(x, exact, atol=1e-10)


def test_maxit_reports_failure():
    M = five_point(10)
    b = np.ones(100)
    with pytest.raises(ConvergenceError) as info:
        cg_solve(M, b, tol=1e-14, maxit=3, precond=None)
    assert info.value.report.iterations == 3 and not info.value.report.converged
    _, rep = cg_solve(M, b, tol=1e-14, maxit=3, precond=None, raise_on_failure=False)
    assert not rep.converged and rep.final_residual > 1e-14


def test_indefinite_detected():
    M = sp.diags([1.0, -1.0]).tocsr()
    with pytest.raises(IndefiniteMatrixError):
        cg_solve(M, np.array([0.0, 1.0]), precond=None)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 40))
def test_cg_terminates_and_meets_contract(seed, n):
    rng = np.random.default_rng(seed)
    M = random_spd(rng, n)
    b = rng.standard_normal(n)
    x, rep = cg_solve(M, b, tol=1e-10)
    assert rep.converged and rep.final_residual <= 1e-10
    assert rep.iterations <= 3 * n
    true_res = np.linalg.norm(b - M @ x) / np.linalg.norm(b)
    assert true_res <= 1e-8


# ---------------------------------------------------------------- multigrid


@pytest.fixture(scope="module")
def mg_hierarchy():
    meshes = [build_structured_mesh(SQUARE, 0.5)]
    for _ in range(3):
        meshes.append(refine_regular(meshes[-1]))
    spaces = [build_space(m, 1) for m in meshes]
    A = spaces[-1].restrict(assemble_stiffness(spaces[-1], LAPLACE))
    Ps = [prolongation_matrix(c, f)[f.interior][:, c.interior] for c, f in zip(spaces, spaces[1:])]
    return A, Ps


def test_multigrid_is_symmetric_positive(mg_hierarchy):
    A, Ps = mg_hierarchy
    mg = MultigridPreconditioner(A, Ps)
    assert mg.levels == 4
    rng = np.random.default_rng(5)
    u, v = rng.standard_normal((2, A.shape[0]))
    assert u @ mg(v) == pytest.approx(v @ mg(u), rel=1e-10)
    assert u @ mg(u) > 0


def test_multigrid_cg_iterations_stay_low(mg_hierarchy):
    A, Ps = mg_hierarchy
    b = np.ones(A.shape[0])
    x, rep = cg_solve(A, b, tol=1e-10, precond=MultigridPreconditioner(A, Ps))
    _, rep_j = cg_solve(A, b, tol=1e-10)
    assert rep.iterations <= 12 < rep_j.iterations
    np.testing.assert_allclose(A @ x, b, atol=1e-8)


# ---------------------------------------------------------------- dense eigensolves


def test_dense_examples():
    lam, X = dense_gen_eigensolve(np.diag([1.0, 2.0]), np.eye(2), 2)
    np.testing.assert_allclose(lam, [1.0, 2.0])
    lam, X = dense_gen_eigensolve(np.array([[2.0, 1.0], [1.0, 2.0]]), np.eye(2), 2)
    np.testing.assert_allclose(lam, [1.0, 3.0])
    s = np.sqrt(0.5)
    assert abs(X[:, 0] @ np.array([s, -s])) == pytest.approx(1.0)
    assert abs(X[:, 1] @ np.array([s, s])) == pytest.approx(1.0)


def test_dense_scaling_of_mass():
    rng = np.random.default_rng(6)
    A, B = random_spd(rng, 8), random_spd(rng, 8)
    lam, X = dense_gen_eigensolve(A, B, 4)
    lam4, X4 = dense_gen_eigensolve(A, 4 * B, 4)
    np.testing.assert_allclose(lam4, lam / 4, rtol=1e-12)
    for i in range(4):
        a, b = X[:, i] / np.linalg.norm(X[:, i]), X4[:, i] / np.linalg.norm(X4[:, i])
        assert abs(a @ b) == pytest.approx(1.0, abs=1e-10)


def _power_deflation_oracle(A, B, nev, iters=3000):
    # smallest eigenpairs via power iteration on inv(A) B with B-deflation
    G = np.linalg.inv(A) @ B
    found, vecs = [], []
    rng = np.random.default_rng(0)
    for _ in range(nev):
        v = rng.standard_normal(len(A))
        for _ in range(iters):
            for w in vecs:
                v -= (w @ B @ v) * w
            v = G @ v
            v /= np.sqrt(v @ B @ v)
        found.append((v @ A @ v) / (v @ B @ v))
        vecs.append(v)
    return np.array(found)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_dense_against_power_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 10
    B = random_spd(rng, n, cond=50.0)
    L = np.linalg.cholesky(B)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.arange(1.0, n + 1) * rng.uniform(0.5, 2.0)
    A = L @ (Q * d) @ Q.T @ L.T
    A = 0.5 * (A + A.T)
    lam, X = dense_gen_eigensolve(A, B, 4)
    np.testing.assert_allclose(lam, _power_deflation_oracle(A, B, 4), rtol=1e-8)
    np.testing.assert_allclose(lam, d[:4], rtol=1e-10)
    np.testing.assert_allclose(X.T @ B @ X, np.eye(4), atol=1e-10)


def test_dense_rejects_singular_mass():
    v = np.array([1.0, 1.0, 0.0])
    B = np.outer(v, v) + np.diag([0.0, 0.0, 1.0])
    with pytest.raises(NotPositiveDefiniteError):
        dense_gen_eigensolve(np.eye(3), B, 1)
    # nearly dependent basis: Cholesky succeeds but the pivot check trips
    Bn = np.outer(v, v) + np.diag([1e-15, 1e-15, 1.0])
    with pytest.raises(NotPositiveDefiniteError):
        dense_gen_eigensolve(np.eye(3), Bn, 1)
    with pytest.raises(ValueError):
        dense_gen_eigensolve(np.eye(2), np.eye(2), 3)


def test_coarse_eigensolve_bounds_and_normalization():
    space, A, B = laplace_system(0.25)
    pairs = coarse_eigensolve(space, A, B, 5)
    exact = LaplaceSpectrum(SQUARE).eigenvalues(5)
    lam = np.array([p.lam for p in pairs])
    assert np.all(lam >= exact)
    assert np.all(np.diff(lam) >= 0)
    X = np.column_stack([p.coeffs for p in pairs])
    np.testing.assert_allclose(X.T @ (B @ X), np.eye(5), atol=1e-10)
    for p in pairs:
        assert p.coeffs[np.argmax(np.abs(p.coeffs))] > 0
        assert p.level == 0


def test_coarse_eigensolve_single_dof():
    space, A, B = laplace_system(1.0)
    (pair,) = coarse_eigensolve(space, A, B, 1)
    assert pair.lam == pytest.approx(A[0, 0] / B[0, 0], rel=1e-14)
    with pytest.raises(ValueError):
        coarse_eigensolve(space, A, B, 2)


@pytest.mark.parametrize("degree", [1, 2])
def test_refinement_lowers_eigenvalues(degree):
    coarse = build_structured_mesh(SQUARE, 0.5)
    lams = []
    for mesh in (coarse, refine_regular(coarse)):
        space = build_space(mesh, degree)
        A = space.restrict(assemble_stiffness(space, LAPLACE))
        B = space.restrict(assemble_mass(space, LAPLACE))
        lams.append([p.lam for p in coarse_eigensolve(space, A, B, 5)])
    assert np.all(np.array(lams[1]) < np.array(lams[0]))


def test_coarse_eigensolve_is_deterministic_on_ties():
    space, A, B = laplace_system(0.25)
    a = coarse_eigensolve(space, A, B, 3)
    b = coarse_eigensolve(space, A, B, 3)
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.coeffs, q.coeffs)
    # the diagonal mesh splits the continuous double eigenvalue
    assert a[2].lam - a[1].lam > 0.1


def test_tie_ordering_on_exact_multiplicity():
    from types import SimpleNamespace

    space = SimpleNamespace(n_interior=3, level=0)
    A = sp.diags([1.0, 1.0, 2.0]).tocsr()
    pairs = coarse_eigensolve(space, A, sp.identity(3, format="csr"), 2)
    assert pairs[0].lam == pairs[1].lam == 1.0
    assert tuple(pairs[0].coeffs) >= tuple(pairs[1].coeffs)
    for p in pairs:
        assert p.coeffs[2] == pytest.approx(0.0, abs=1e-15)
