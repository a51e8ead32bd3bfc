"""Linear algebra kernels: preconditioned CG and small dense eigensolves."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .fespace import EigenPair, FeSpace, fix_sign

log = logging.getLogger(__name__)

__all__ = [
    "SolveReport",
    "ConvergenceError",
    "IndefiniteMatrixError",
    "NotPositiveDefiniteError",
    "cg_solve",
    "jacobi_preconditioner",
    "MultigridPreconditioner",
    "dense_gen_eigensolve",
    "coarse_eigensolve",
    "DENSE_LIMIT",
]

DENSE_LIMIT = 5000


class ConvergenceError(RuntimeError):
    """CG hit its iteration limit; ``report`` holds the final state."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class IndefiniteMatrixError(ArithmeticError):
    """A search direction with non-positive curvature was found."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """The mass-side matrix of a generalized eigenproblem is not (numerically) SPD."""


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool


def jacobi_preconditioner(M) -> Callable[[np.ndarray], np.ndarray]:
    inv_diag = 1.0 / M.diagonal()
    return lambda r: inv_diag * r


def cg_solve(M, rhs, tol: float = 1e-10, maxit: Optional[int] = None,
             precond: Union[str, None, Callable] = "jacobi", x0=None,
             raise_on_failure: bool = True):
    """Preconditioned conjugate gradients for an SPD system ``M x = rhs``.

    ``precond`` is ``"jacobi"``, ``None`` (plain CG) or a callable applying
    an SPD approximate inverse to a residual.  Convergence is declared when
    ``||rhs - M x|| <= tol * ||rhs||`` for the recursively updated residual.

    Returns ``(x, SolveReport)``.  Hitting ``maxit`` raises ConvergenceError
    unless ``raise_on_failure`` is False, in which case the report says
    ``converged=False``.  Non-positive curvature raises IndefiniteMatrixError.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = len(rhs)
    if maxit is None:
        maxit = 10 * max(n, 1)
    if precond == "jacobi":
        apply_m = jacobi_preconditioner(M)
    elif precond is None:
        apply_m = lambda r: r  # noqa: E731
    else:
        apply_m = precond

    bnorm = float(np.linalg.norm(rhs))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, True)
    r = rhs - M @ x if x0 is not None else rhs.copy()
    res = float(np.linalg.norm(r)) / bnorm
    if res <= tol:
        return x, SolveReport(0, res, True)

    z = apply_m(r)
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxit + 1):
        Mp = M @ p
        curv = float(p @ Mp)
        if curv <= 0.0:
            raise IndefiniteMatrixError(f"p^T M p = {curv:.3e} at iteration {it}")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Mp
        res = float(np.linalg.norm(r)) / bnorm
        if res <= tol:
            return x, SolveReport(it, res, True)
        z = apply_m(r)
        rz_new = float(r @ z)
        p *= rz_new / rz
        p += z
        rz = rz_new

    report = SolveReport(maxit, res, False)
    if raise_on_failure:
        raise ConvergenceError(
            f"CG did not reach tol={tol:g} in {maxit} iterations (residual {res:.3e})", report)
    return x, report


class MultigridPreconditioner:
    """Symmetric V-cycle over a nested hierarchy of restricted systems.

    Parameters
    ----------
    A : sparse matrix
        SPD operator on the finest level.
    prolongations : sequence of sparse matrices
        ``prolongations[l]`` maps level ``l`` vectors to level ``l + 1``
        (coarsest first); the last one ends at ``A``'s level.
    smoothing_steps : int
        Damped Jacobi sweeps before and after each coarse correction.

    Coarse operators are Galerkin products P^T A P and the coarsest one is
    solved by dense Cholesky.  Jacobi damping is 4 / (3 rho) with rho the
    Gershgorin bound of D^-1 A, which keeps the cycle an SPD operator.
    """

    def __init__(self, A, prolongations: Sequence, smoothing_steps: int = 2):
        self.nu = smoothing_steps
        prolongations = [P for P in prolongations if P.shape[1] > 0]
        ops = [A.tocsr()]
        for P in reversed(prolongations):
            ops.append((P.T @ ops[-1] @ P).tocsr())
        ops.reverse()
        self.ops = ops
        self.P = [P.tocsr() for P in prolongations]
        self.R = [P.T.tocsr() for P in prolongations]
        self.scaled_inv_diag = []
        for M in ops:
            d = M.diagonal()
            rho = float(np.max(abs(M).sum(axis=1).A1 / d)) if M.shape[0] else 1.0
            self.scaled_inv_diag.append((4.0 / (3.0 * rho)) / d)
        self._coarse = sla.cho_factor(ops[0].toarray())

    @property
    def levels(self) -> int:
        return len(self.ops)

    def _cycle(self, lev, r):
        if lev == 0:
            return sla.cho_solve(self._coarse, r)
        M = self.ops[lev]
        w = self.scaled_inv_diag[lev]
        x = w * r
        for _ in range(self.nu - 1):
            x += w * (r - M @ x)
        x += self.P[lev - 1] @ self._cycle(lev - 1, self.R[lev - 1] @ (r - M @ x))
        for _ in range(self.nu):
            x += w * (r - M @ x)
        return x

    def __call__(self, r):
        return self._cycle(len(self.ops) - 1, r)


def dense_gen_eigensolve(Ad, Bd, nev: int, pivot_tol: float = 1e-6):
    """Smallest ``nev`` eigenpairs of the symmetric-definite pencil (Ad, Bd).

    Bd = L L^T is factored, the standard problem L^-1 Ad L^-T y = lam y is
    solved with a symmetric eigensolver and x = L^-T y.  Returns eigenvalues
    in ascending order and B-orthonormal eigenvectors as columns.

    Raises NotPositiveDefiniteError when Cholesky fails or when some pivot
    L_ii falls below ``pivot_tol * sqrt(Bd_ii)``, i.e. the basis behind Bd is
    numerically dependent.
    """
    Ad = np.asarray(Ad, dtype=float)
    Bd = np.asarray(Bd, dtype=float)
    n = Ad.shape[0]
    if not 1 <= nev <= n:
        raise ValueError(f"nev={nev} outside 1..{n}")
    try:
        L = np.linalg.cholesky(Bd)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"Cholesky of the mass matrix failed: {exc}") from exc
    ratio = np.diag(L) / np.sqrt(np.diag(Bd))
    if np.min(ratio) < pivot_tol:
        raise NotPositiveDefiniteError(
            f"mass matrix numerically singular (pivot ratio {np.min(ratio):.2e})")
    Linv_A = sla.solve_triangular(L, Ad, lower=True)
    C = sla.solve_triangular(L, Linv_A.T, lower=True)
    C = 0.5 * (C + C.T)
    lam, Y = np.linalg.eigh(C)
    X = sla.solve_triangular(L.T, Y[:, :nev], lower=False)
    return lam[:nev].copy(), X


def _order_ties(lam, vecs, rtol=1e-10):
    # within clusters of equal eigenvalues sort by the first differing coefficient
    order = list(range(len(lam)))
    i = 0
    while i < len(lam):
        j = i + 1
        while j < len(lam) and abs(lam[j] - lam[i]) <= rtol * abs(lam[i]):
            j += 1
        if j - i > 1:
            order[i:j] = sorted(order[i:j], key=lambda c: tuple(vecs[:, c]), reverse=True)
        i = j
    return order


def coarse_eigensolve(space: FeSpace, Astiff, Bmass, nev: int):
    """Smallest ``nev`` discrete eigenpairs on the interior dofs of ``space``.

    ``Astiff``/``Bmass`` are the interior matrices.  Vectors are
    b-normalized and sign-fixed; equal eigenvalues are ordered by the first
    differing coefficient (larger first).
    """
    n = space.n_interior
    if nev > n:
        raise ValueError(f"nev={nev} exceeds the interior dimension {n}")
    if n > DENSE_LIMIT:
        raise ValueError(f"interior dimension {n} exceeds the dense limit {DENSE_LIMIT}")
    Ad = Astiff.toarray() if sp.issparse(Astiff) else np.asarray(Astiff)
    Bd = Bmass.toarray() if sp.issparse(Bmass) else np.asarray(Bmass)
    lam, X = dense_gen_eigensolve(Ad, Bd, nev)
    vecs = np.empty_like(X)
    for c in range(nev):
        v = fix_sign(X[:, c])
        vecs[:, c] = v / np.sqrt(v @ (Bmass @ v))
    order = _order_ties(lam, vecs)
    return [EigenPair(float(lam[c]), vecs[:, c].copy(), space.level) for c in order]
