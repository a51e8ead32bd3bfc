"""Local and parallel multilevel correction for elliptic eigenproblems.

One correction step lifts eigenpair approximations from mesh level k to
k + 1 in three stages:

1. on every extended subdomain Omega_j solve the residual problem
   a(e_j, v) = lam b(u, v) - a(u, v) with zero trace, and form u + e_j;
2. glue u + e_j on each core G_j and fill the strip G_{m+1} by a Dirichlet
   solve of a(w, v) = lam b(u, v) with the glued values as boundary data;
3. solve the eigenproblem on the coarsest space enlarged by the glued
   candidates.

Several eigenpairs are corrected together: stage 3 augments the coarse
space with all glued candidates at once, which keeps clusters and multiple
eigenvalues well resolved.

Vectors are interior-dof coefficient vectors throughout.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .decomp import Partition, SubSpace, build_partition, restrict_space, snap_overlap
from .fespace import (
    CoefficientField,
    EigenPair,
    FeSpace,
    assemble_mass,
    assemble_stiffness,
    build_space,
    coefficient_field,
    compute_errors,
    fix_sign,
    prolongation_matrix,
    rayleigh_quotient,
)
from .mesh import DomainRect, Mesh, build_structured_mesh, refine_regular
from .sparse import (
    ConvergenceError,
    MultigridPreconditioner,
    NotPositiveDefiniteError,
    SolveReport,
    cg_solve,
    coarse_eigensolve,
    dense_gen_eigensolve,
    jacobi_preconditioner,
)

log = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "Level",
    "Hierarchy",
    "CorrectionState",
    "SubdomainSolveError",
    "local_bvp_solve",
    "interface_solve",
    "augmented_eigensolve",
    "one_correction_step",
    "multilevel_correction",
    "LevelRecord",
    "Trace",
]

DROP_TOL = 1e-10


class SubdomainSolveError(RuntimeError):
    def __init__(self, region, cause):
        super().__init__(f"linear solve on region {region} failed: {cause}")
        self.region = region
        self.cause = cause


@dataclass
class RunConfig:
    domain: Tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)
    H: float = 0.25
    delta: float = 0.1
    m: int = 4
    n_levels: int = 5
    degree: int = 1
    nev: int = 5
    example: str = "laplace"
    cg_tol: float = 1e-10
    workers: int = 1
    deterministic: bool = True
    preconditioner: str = "multigrid"

    def __post_init__(self):
        self.domain = tuple(float(v) for v in self.domain)
        if len(self.domain) != 4:
            raise ValueError("domain needs four numbers: x_min, x_max, y_min, y_max")
        if self.nev < 1:
            raise ValueError("nev must be at least 1")
        if self.n_levels < 1:
            raise ValueError("n_levels must be at least 1")
        if self.degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        if self.example not in ("laplace", "variable"):
            raise ValueError("example must be 'laplace' or 'variable'")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.preconditioner not in ("jacobi", "multigrid", "none"):
            raise ValueError("preconditioner must be 'jacobi', 'multigrid' or 'none'")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def rect(self) -> DomainRect:
        return DomainRect(*self.domain)

    @property
    def effective_delta(self) -> float:
        return snap_overlap(self.delta, self.H)


# --------------------------------------------------------------------------
# level data
# --------------------------------------------------------------------------


@dataclass(eq=False)
class RegionSolver:
    sub: SubSpace
    matrix: sp.csr_matrix
    precond: object

    def solve(self, rhs, tol):
        return cg_solve(self.matrix, rhs, tol=tol, precond=self.precond)


@dataclass(eq=False)
class Level:
    """Space and interior matrices of one mesh level (0 is the coarsest)."""

    index: int
    mesh: Mesh
    space: FeSpace
    A: sp.csr_matrix  # interior stiffness
    B: sp.csr_matrix  # interior mass
    P: Optional[sp.csr_matrix]  # interior prolongation from index - 1
    Q: sp.csr_matrix  # interior prolongation from level 0
    solvers: Dict = field(default_factory=dict, repr=False)
    _coarse_blocks: Optional[tuple] = field(default=None, repr=False)

    @property
    def h(self) -> float:
        return self.mesh.h_max

    @property
    def dofs(self) -> int:
        return self.space.n_interior

    def coarse_blocks(self):
        """Galerkin coarse-space blocks (Q^T A Q, Q^T B Q) plus A Q and B Q."""
        if self._coarse_blocks is None:
            AQ = (self.A @ self.Q).tocsc()
            BQ = (self.B @ self.Q).tocsc()
            Acc = (self.Q.T @ AQ).toarray()
            Bcc = (self.Q.T @ BQ).toarray()
            self._coarse_blocks = (0.5 * (Acc + Acc.T), 0.5 * (Bcc + Bcc.T), AQ, BQ)
        return self._coarse_blocks


class Hierarchy:
    """Nested meshes, spaces, matrices and the partition for one run."""

    def __init__(self, config: RunConfig, n_mesh_levels: Optional[int] = None):
        self.config = config
        self.field: CoefficientField = coefficient_field(config.example)
        coarse = build_structured_mesh(config.rect(), config.H)
        self.partition: Partition = build_partition(coarse, config.m, config.effective_delta)
        self.levels: List[Level] = []
        if n_mesh_levels is None:
            n_mesh_levels = config.n_levels + 1
        mesh = coarse
        for k in range(n_mesh_levels):
            if k > 0:
                mesh = refine_regular(mesh)
            self._add_level(mesh)

    def _add_level(self, mesh: Mesh):
        space = build_space(mesh, self.config.degree)
        A = space.restrict(assemble_stiffness(space, self.field))
        B = space.restrict(assemble_mass(space, self.field))
        if self.levels:
            prev = self.levels[-1]
            P = prolongation_matrix(prev.space, space)[space.interior][:, prev.space.interior].tocsr()
            Q = (P @ prev.Q).tocsr()
        else:
            P = None
            Q = sp.identity(space.n_interior, format="csr")
        self.partition.register(mesh)
        self.levels.append(Level(mesh.level, mesh, space, A, B, P, Q))

    def __getitem__(self, k) -> Level:
        return self.levels[k]

    def __len__(self):
        return len(self.levels)

    @property
    def coarse(self) -> Level:
        return self.levels[0]

    def subspace(self, k: int, region, zero_trace: bool) -> SubSpace:
        return restrict_space(self.levels[k].space, self.partition, region, zero_trace)

    def solver(self, k: int, region) -> RegionSolver:
        """Zero-trace system of ``region`` on level ``k`` with its preconditioner."""
        lev = self.levels[k]
        if region in lev.solvers:
            return lev.solvers[region]
        sub = self.subspace(k, region, True)
        M = lev.A[sub.index][:, sub.index].tocsr()
        kind = self.config.preconditioner
        if kind == "multigrid" and k > 0:
            chain = [self.subspace(i, region, True).index for i in range(k + 1)]
            prolongs = [self.levels[i].P[chain[i]][:, chain[i - 1]].tocsr()
                        for i in range(1, k + 1)]
            precond = MultigridPreconditioner(M, prolongs)
        elif kind == "none":
            precond = None
        else:
            precond = jacobi_preconditioner(M) if M.shape[0] else None
        rs = RegionSolver(sub, M, precond)
        lev.solvers[region] = rs
        return rs

    def prepare(self, k: int) -> None:
        """Build every solver level ``k`` needs (before any threads start)."""
        for j in range(self.partition.m):
            self.solver(k, ("extended", j))
        self.solver(k, ("strip", 0))
        self.levels[k].coarse_blocks()


# --------------------------------------------------------------------------
# the three stages of one correction step
# --------------------------------------------------------------------------


def local_bvp_solve(hier: Hierarchy, k: int, j: int, lam: float, u: np.ndarray,
                    residual: Optional[np.ndarray] = None):
    """Correction e_j on the extended subdomain ``j`` at level ``k``.

    Solves a(e, v) = lam b(u, v) - a(u, v) for all v in V_0h(Omega_j), with
    ``u`` already on level ``k``.  Returns ``(e, report)`` where ``e`` is a
    full interior vector vanishing outside Omega_j.
    """
    lev = hier[k]
    if residual is None:
        residual = lam * (lev.B @ u) - lev.A @ u
    rs = hier.solver(k, ("extended", j))
    e = np.zeros(lev.dofs)
    if len(rs.sub) == 0:
        return e, SolveReport(0, 0.0, True)
    try:
        x, report = rs.solve(residual[rs.sub.index], hier.config.cg_tol)
    except (ConvergenceError, ArithmeticError) as exc:
        raise SubdomainSolveError(("extended", j), exc) from exc
    e[rs.sub.index] = x
    return e, report


def interface_solve(hier: Hierarchy, k: int, lam: float, u: np.ndarray,
                    local_sums: Sequence[np.ndarray]):
    """Glue the local candidates and fill the strip by a Dirichlet solve.

    ``local_sums[j]`` is u + e_j.  The glued vector takes those values on
    the closure of each core G_j; on interior strip dofs it solves
    A_II x = lam (B u)_I - A_IG g with g the glued values on the strip
    interface.  Returns ``(glued, report)``.
    """
    lev = hier[k]
    part = hier.partition
    glued = np.zeros(lev.dofs)
    owner = np.full(lev.dofs, -1)
    for j in range(part.m):
        core = hier.subspace(k, ("core", j), False)
        if np.any(owner[core.index] >= 0):
            raise RuntimeError(f"core {j} overlaps another core; partition is inconsistent")
        owner[core.index] = j
        glued[core.index] = local_sums[j][core.index]

    rs = hier.solver(k, ("strip", 0))
    inner = rs.sub.index
    if len(inner) == 0:
        return glued, SolveReport(0, 0.0, True)
    closure = hier.subspace(k, ("strip", 0), False).index
    iface = np.setdiff1d(closure, inner, assume_unique=True)
    if np.any(owner[iface] < 0):
        raise RuntimeError("strip interface dof without core data")
    rhs = lam * (lev.B[inner] @ u) - lev.A[inner][:, iface] @ glued[iface]
    try:
        x, report = rs.solve(rhs, hier.config.cg_tol)
    except (ConvergenceError, ArithmeticError) as exc:
        raise SubdomainSolveError(("strip", 0), exc) from exc
    glued[inner] = x
    return glued, report


def _b_orthogonalize(lev: Level, cand: np.ndarray):
    """Remove coarse-space and mutual components of the candidates (B-inner product)."""
    _, Bcc, _, BQ = lev.coarse_blocks()
    fac = sla.cho_factor(Bcc)
    kept = []
    for i in range(cand.shape[1]):
        v = cand[:, i]
        ref = np.sqrt(v @ (lev.B @ v))
        v = v - lev.Q @ sla.cho_solve(fac, BQ.T @ v)
        for w in kept:
            v = v - (w @ (lev.B @ v)) * w
        nrm = np.sqrt(v @ (lev.B @ v))
        if ref == 0.0 or nrm < DROP_TOL * ref:
            log.info("dropping candidate %d: dependent on the coarse space", i)
            continue
        kept.append(v / nrm)
    return np.column_stack(kept) if kept else np.zeros((lev.dofs, 0))


def _augmented_pencil(lev: Level, cand: np.ndarray):
    Acc, Bcc, AQ, BQ = lev.coarse_blocks()
    AU = lev.A @ cand
    BU = lev.B @ cand
    Acu = np.asarray(AQ.T @ cand)
    Bcu = np.asarray(BQ.T @ cand)
    Auu = cand.T @ AU
    Buu = cand.T @ BU
    Ad = np.block([[Acc, Acu], [Acu.T, 0.5 * (Auu + Auu.T)]])
    Bd = np.block([[Bcc, Bcu], [Bcu.T, 0.5 * (Buu + Buu.T)]])
    return Ad, Bd


def augmented_eigensolve(hier: Hierarchy, k: int, candidates: np.ndarray, nev: int):
    """Eigenpairs on the coarsest space plus span(candidates), at level ``k``.

    ``candidates`` has one glued vector per column.  Returns
    ``(pairs, dropped)``: ``nev`` b-normalized, sign-fixed eigenpairs in
    ascending order, and how many candidates were discarded as numerically
    dependent on the coarse space.
    """
    lev = hier[k]
    candidates = np.asarray(candidates, dtype=float).reshape(lev.dofs, -1)
    dropped = 0
    Ad, Bd = _augmented_pencil(lev, candidates)
    try:
        lam, C = dense_gen_eigensolve(Ad, Bd, nev)
    except NotPositiveDefiniteError:
        candidates = _b_orthogonalize(lev, candidates)
        dropped = Bd.shape[0] - lev.Q.shape[1] - candidates.shape[1]
        Ad, Bd = _augmented_pencil(lev, candidates)
        lam, C = dense_gen_eigensolve(Ad, Bd, nev)

    nc = lev.Q.shape[1]
    pairs = []
    for c in range(nev):
        v = lev.Q @ C[:nc, c] + candidates @ C[nc:, c]
        v = fix_sign(v / np.sqrt(v @ (lev.B @ v)))
        pairs.append(EigenPair(rayleigh_quotient(v, lev.A, lev.B), v, lev.index))
    pairs.sort(key=lambda p: p.lam)
    return pairs, dropped


# --------------------------------------------------------------------------
# one step and the multilevel driver
# --------------------------------------------------------------------------


@dataclass
class CorrectionState:
    """Eigenpairs on ``level`` and the artifacts of the step that made them.

    ``corrections[i][j]`` is e_j for eigenpair i, ``glued[:, i]`` the glued
    candidate; both are None for a state produced by a direct solve.
    """

    level: int
    pairs: List[EigenPair]
    corrections: Optional[List[List[np.ndarray]]] = None
    start: Optional[np.ndarray] = None  # prolonged input vectors, one per column
    glued: Optional[np.ndarray] = None
    reports: List[SolveReport] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    mismatches: int = 0
    dropped: int = 0

    def local_sum(self, i: int, j: int) -> np.ndarray:
        return self.start[:, i] + self.corrections[i][j]

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.array([p.lam for p in self.pairs])


def _count_mismatches(lev: Level, new_pairs, old_vectors):
    overlap = np.abs(np.column_stack([p.coeffs for p in new_pairs]).T @ (lev.B @ old_vectors))
    best = np.argmax(overlap, axis=1)
    bad = int(np.sum(best != np.arange(len(new_pairs))))
    if bad:
        log.info("level %d: %d eigenpair(s) changed position relative to the previous level",
                 lev.index, bad)
    return bad


def one_correction_step(hier: Hierarchy, state: CorrectionState, k: int) -> CorrectionState:
    """Correct every eigenpair of ``state`` onto level ``k``.

    ``state`` lives on level ``k - 1`` (its vectors are prolongated first) or
    already on level ``k`` (used as is).
    """
    cfg = hier.config
    lev = hier[k]
    if state.level == k - 1:
        start = lev.P @ np.column_stack([p.coeffs for p in state.pairs])
    elif state.level == k:
        start = np.column_stack([p.coeffs for p in state.pairs])
    else:
        raise ValueError(f"state on level {state.level} cannot be corrected onto level {k}")
    lams = [p.lam for p in state.pairs]
    nev = len(lams)
    m = hier.partition.m
    hier.prepare(k)

    t0 = time.perf_counter()
    residuals = [lams[i] * (lev.B @ start[:, i]) - lev.A @ start[:, i] for i in range(nev)]
    tasks = [(i, j) for i in range(nev) for j in range(m)]

    def run(task):
        i, j = task
        return local_bvp_solve(hier, k, j, lams[i], start[:, i], residuals[i])

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    corrections = [[results[i * m + j][0] for j in range(m)] for i in range(nev)]
    reports = [r for _, r in results]
    t1 = time.perf_counter()

    glued = np.empty_like(start)
    for i in range(nev):
        sums = [start[:, i] + corrections[i][j] for j in range(m)]
        glued[:, i], rep = interface_solve(hier, k, lams[i], start[:, i], sums)
        reports.append(rep)
    t2 = time.perf_counter()

    pairs, dropped = augmented_eigensolve(hier, k, glued, nev)
    t3 = time.perf_counter()

    return CorrectionState(
        level=k,
        pairs=pairs,
        corrections=corrections,
        start=start,
        glued=glued,
        reports=reports,
        timings={"local": t1 - t0, "iface": t2 - t1, "aug": t3 - t2},
        mismatches=_count_mismatches(lev, pairs, start),
        dropped=dropped,
    )


@dataclass
class LevelRecord:
    level: int
    h: float
    dofs: int
    lambdas: List[float]
    eig_err: List[Optional[float]]
    h1_err: List[Optional[float]]
    timings: Dict[str, float]
    mismatches: int = 0
    dropped: int = 0
    max_cg_residual: float = 0.0


@dataclass
class Trace:
    config: RunConfig
    records: List[LevelRecord]
    final: Optional[CorrectionState]
    hierarchy: Hierarchy
    error: Optional[BaseException] = None


def _record(lev: Level, state: CorrectionState, references) -> LevelRecord:
    eig_err, h1_err = [], []
    for i, pair in enumerate(state.pairs):
        ref = references[i] if references is not None and i < len(references) else None
        if ref is None:
            eig_err.append(None)
            h1_err.append(None)
            continue
        h1, _, ee = compute_errors(pair, lev.space, ref)
        eig_err.append(ee)
        h1_err.append(h1)
    worst = max((r.final_residual for r in state.reports), default=0.0)
    return LevelRecord(
        level=lev.index,
        h=lev.h,
        dofs=lev.dofs,
        lambdas=[p.lam for p in state.pairs],
        eig_err=eig_err,
        h1_err=h1_err,
        timings=dict(state.timings),
        mismatches=state.mismatches,
        dropped=state.dropped,
        max_cg_residual=worst,
    )


def multilevel_correction(config: RunConfig, references=None, raise_errors: bool = True) -> Trace:
    """Run the multilevel scheme described by ``config``.

    Level 1 (one refinement of the H mesh) is solved directly; levels
    2..n_levels are reached by correction steps.  ``references[i]`` (an
    exact eigenspace, a float or None) is used for the error columns of
    eigenpair i.  With ``raise_errors`` False a failing step ends the run and
    the partial trace carries the exception.
    """
    hier = Hierarchy(config)
    records: List[LevelRecord] = []
    lev = hier[1]
    t0 = time.perf_counter()
    pairs = coarse_eigensolve(lev.space, lev.A, lev.B, config.nev)
    state = CorrectionState(level=1, pairs=pairs,
                            timings={"local": 0.0, "iface": 0.0, "aug": time.perf_counter() - t0})
    records.append(_record(lev, state, references))
    log.info("level 1: %d dofs, lambda = %s", lev.dofs, state.eigenvalues)
    try:
        for k in range(2, config.n_levels + 1):
            state = one_correction_step(hier, state, k)
            records.append(_record(hier[k], state, references))
            log.info("level %d: %d dofs, lambda = %s", k, hier[k].dofs, state.eigenvalues)
    except Exception as exc:
        if raise_errors:
            raise
        return Trace(config, records, state, hier, error=exc)
    return Trace(config, records, state, hier)
