"""Lagrange P1/P2 spaces: numbering, assembly, prolongation and error norms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .mesh import DomainRect, Mesh, mesh_edges
from .quadrature import triangle_rule

__all__ = [
    "CoefficientField",
    "coefficient_field",
    "FeSpace",
    "EigenPair",
    "build_space",
    "assemble_stiffness",
    "assemble_mass",
    "prolongation_matrix",
    "prolongate",
    "rayleigh_quotient",
    "galerkin_project",
    "LaplaceSpectrum",
    "ExactEigenspace",
    "compute_errors",
    "fix_sign",
    "write_vtk",
]


# --------------------------------------------------------------------------
# coefficients
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientField:
    """Diffusion tensor ``A(x, y)`` and mass weight ``phi(x, y)``.

    ``matrix`` returns an array of shape ``x.shape + (2, 2)``; ``weight`` an
    array shaped like ``x``.  ``constant`` marks A = I and phi = 1, for which
    the low-order quadrature is exact.
    """

    name: str
    matrix: Callable[[np.ndarray, np.ndarray], np.ndarray]
    weight: Callable[[np.ndarray, np.ndarray], np.ndarray]
    constant: bool = False


def _identity_matrix(x, y):
    out = np.zeros(np.shape(x) + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    return out


def _unit_weight(x, y):
    return np.ones(np.shape(x))


def _variable_matrix(x, y):
    out = np.empty(np.shape(x) + (2, 2))
    out[..., 0, 0] = np.exp(1.0 + x * x)
    out[..., 1, 1] = np.exp(1.0 + y * y)
    off = np.exp(x * y)
    out[..., 0, 1] = off
    out[..., 1, 0] = off
    return out


def _variable_weight(x, y):
    return (1.0 + x * x) * (1.0 + y * y)


def coefficient_field(name: str) -> CoefficientField:
    """Built-in fields: ``"laplace"`` (A = I, phi = 1) and ``"variable"``."""
    if name == "laplace":
        return CoefficientField("laplace", _identity_matrix, _unit_weight, constant=True)
    if name == "variable":
        return CoefficientField("variable", _variable_matrix, _variable_weight)
    raise ValueError(f"unknown coefficient field {name!r}")


# --------------------------------------------------------------------------
# reference element
# --------------------------------------------------------------------------


def _barycentric(st):
    s, t = st[..., 0], st[..., 1]
    return 1.0 - s - t, s, t


_DL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def reference_basis(degree: int, st: np.ndarray):
    """Basis values (nq, nb) and reference gradients (nq, nb, 2) at ``st``."""
    st = np.atleast_2d(np.asarray(st, dtype=float))
    L = np.stack(_barycentric(st), axis=-1)  # (nq, 3)
    if degree == 1:
        vals = L
        grads = np.broadcast_to(_DL, (len(st), 3, 2)).copy()
        return vals, grads
    vals = np.empty((len(st), 6))
    grads = np.empty((len(st), 6, 2))
    for i in range(3):
        vals[:, i] = L[:, i] * (2.0 * L[:, i] - 1.0)
        grads[:, i] = (4.0 * L[:, i] - 1.0)[:, None] * _DL[i]
    for k, (a, b) in enumerate([(0, 1), (1, 2), (2, 0)]):
        vals[:, 3 + k] = 4.0 * L[:, a] * L[:, b]
        grads[:, 3 + k] = 4.0 * (L[:, a, None] * _DL[b] + L[:, b, None] * _DL[a])
    return vals, grads


# --------------------------------------------------------------------------
# spaces
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeSpace:
    mesh: Mesh
    degree: int
    coords: np.ndarray  # (N, 2)
    elem_dofs: np.ndarray  # (T, 3 or 6)
    boundary: np.ndarray  # sorted dof indices on the outer boundary
    interior: np.ndarray  # sorted dof indices off the outer boundary
    interior_pos: np.ndarray  # dof -> position in ``interior`` or -1
    vertex_dofs: np.ndarray  # mesh vertex -> dof
    jac: np.ndarray  # (T, 2, 2) affine map columns
    det: np.ndarray  # (T,) twice the element area
    inv_jac_t: np.ndarray  # (T, 2, 2)

    @property
    def N(self) -> int:
        return len(self.coords)

    @property
    def n_interior(self) -> int:
        return len(self.interior)

    @property
    def level(self) -> int:
        return self.mesh.level

    def restrict(self, M):
        """Interior-dof block of a full-space matrix (Dirichlet elimination)."""
        return M[self.interior][:, self.interior].tocsr()

    def extend(self, v_int: np.ndarray) -> np.ndarray:
        """Full coefficient vector, zero on boundary dofs."""
        out = np.zeros(self.N)
        out[self.interior] = v_int
        return out

    def physical_points(self, st: np.ndarray) -> np.ndarray:
        """Images of reference points on every element, shape (T, nq, 2)."""
        x0 = self.mesh.vertices[self.mesh.triangles[:, 0]]
        return x0[:, None, :] + np.einsum("tij,qj->tqi", self.jac, st)

    def physical_gradients(self, ref_grads: np.ndarray) -> np.ndarray:
        """Map (nq, nb, 2) reference gradients to (T, nq, nb, 2)."""
        return np.einsum("tij,qbj->tqbi", self.inv_jac_t, ref_grads)


def _lexicographic_order(coords):
    keys = np.round(coords, 12)
    return np.lexsort((keys[:, 0], keys[:, 1]))


def build_space(mesh: Mesh, degree: int) -> FeSpace:
    """Continuous Lagrange space of the given degree on ``mesh``.

    Dofs are numbered lexicographically by (y, x) of their nodes.
    """
    if degree not in (1, 2):
        raise ValueError(f"unsupported polynomial degree {degree}; use 1 or 2")
    V = mesh.n_vertices
    tri = mesh.triangles
    edges, tri_edges = mesh_edges(tri)
    counts = np.bincount(tri_edges.ravel(), minlength=len(edges))
    bnd_vertex = mesh.boundary_vertex_mask()

    if degree == 1:
        raw_coords = mesh.vertices
        raw_elem = tri
        raw_bnd = bnd_vertex
    else:
        mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
        raw_coords = np.vstack([mesh.vertices, mid])
        raw_elem = np.hstack([tri, V + tri_edges])
        raw_bnd = np.concatenate([bnd_vertex, counts == 1])

    order = _lexicographic_order(raw_coords)
    new_id = np.empty(len(order), dtype=np.int64)
    new_id[order] = np.arange(len(order))

    coords = np.ascontiguousarray(raw_coords[order])
    elem_dofs = new_id[raw_elem]
    bnd_mask = raw_bnd[order]
    boundary = np.flatnonzero(bnd_mask)
    interior = np.flatnonzero(~bnd_mask)
    interior_pos = np.full(len(order), -1, dtype=np.int64)
    interior_pos[interior] = np.arange(len(interior))

    p = mesh.vertices[tri]
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv_jac_t = np.empty_like(jac)
    inv_jac_t[:, 0, 0] = jac[:, 1, 1] / det
    inv_jac_t[:, 0, 1] = -jac[:, 1, 0] / det
    inv_jac_t[:, 1, 0] = -jac[:, 0, 1] / det
    inv_jac_t[:, 1, 1] = jac[:, 0, 0] / det

    arrays = dict(
        coords=coords,
        elem_dofs=elem_dofs,
        boundary=boundary,
        interior=interior,
        interior_pos=interior_pos,
        vertex_dofs=new_id[:V].copy(),
        jac=jac,
        det=det,
        inv_jac_t=inv_jac_t,
    )
    for a in arrays.values():
        a.flags.writeable = False
    return FeSpace(mesh=mesh, degree=degree, **arrays)


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------


def default_quadrature_degree(space: FeSpace, field: CoefficientField) -> int:
    """Exact for constant coefficients; degree 10 keeps variable-coefficient
    quadrature error at round-off level on the meshes used here."""
    if not field.constant:
        return 10
    return 2 if space.degree == 1 else 6


def _select(space, elements):
    if elements is None:
        return slice(None)
    elements = np.asarray(elements)
    return np.flatnonzero(elements) if elements.dtype == bool else elements


def _symmetric_element_matrices(K):
    # mirror the upper triangle so every element matrix is bitwise symmetric
    iu = np.triu_indices(K.shape[1], 1)
    K[:, iu[1], iu[0]] = K[:, iu[0], iu[1]]
    return K


def _scatter(space, K, sel):
    dofs = space.elem_dofs[sel]
    nb = dofs.shape[1]
    rows = np.repeat(dofs, nb, axis=1).ravel()
    cols = np.tile(dofs, (1, nb)).ravel()
    M = sp.coo_matrix((K.ravel(), (rows, cols)), shape=(space.N, space.N)).tocsr()
    M.sum_duplicates()
    upper = sp.triu(M, 0, format="csr")
    strict = sp.triu(M, 1, format="csr")
    M = (upper + strict.T).tocsr()
    M.sort_indices()
    return M


def assemble_stiffness(space: FeSpace, field: CoefficientField, quad_degree=None,
                       elements=None) -> sp.csr_matrix:
    """Full-space matrix of a(u, v) = (A grad u, grad v).

    ``elements`` (index array or boolean mask) restricts the sum to a subset
    of triangles.  The result is exactly symmetric.
    """
    if quad_degree is None:
        quad_degree = default_quadrature_degree(space, field)
    sel = _select(space, elements)
    st, w = triangle_rule(quad_degree)
    _, ref_grads = reference_basis(space.degree, st)
    G = space.physical_gradients(ref_grads)[sel]  # (T, nq, nb, 2)
    wa = 0.5 * np.abs(space.det[sel])[:, None] * w[None, :]
    if field.constant:
        K = np.einsum("tq,tqpi,tqri->tpr", wa, G, G, optimize=True)
    else:
        xq = space.physical_points(st)[sel]
        Aq = field.matrix(xq[..., 0], xq[..., 1])
        AG = np.einsum("tqij,tqrj->tqri", Aq, G)
        K = np.einsum("tq,tqpi,tqri->tpr", wa, G, AG, optimize=True)
    return _scatter(space, _symmetric_element_matrices(K), sel)


def assemble_mass(space: FeSpace, field: CoefficientField, quad_degree=None,
                  elements=None) -> sp.csr_matrix:
    """Full-space matrix of b(u, v) = (phi u, v)."""
    if quad_degree is None:
        quad_degree = default_quadrature_degree(space, field)
    sel = _select(space, elements)
    st, w = triangle_rule(quad_degree)
    vals, _ = reference_basis(space.degree, st)
    area = 0.5 * np.abs(space.det[sel])
    if field.constant:
        ref = np.einsum("q,qp,qr->pr", w, vals, vals)
        K = area[:, None, None] * ref[None]
    else:
        xq = space.physical_points(st)[sel]
        wa = area[:, None] * w[None, :] * field.weight(xq[..., 0], xq[..., 1])
        K = np.einsum("tq,qp,qr->tpr", wa, vals, vals, optimize=True)
    return _scatter(space, _symmetric_element_matrices(K), sel)


# --------------------------------------------------------------------------
# transfer between nested levels
# --------------------------------------------------------------------------


def prolongation_matrix(coarse: FeSpace, fine: FeSpace) -> sp.csr_matrix:
    """Nodal interpolation matrix (fine.N x coarse.N) between nested spaces.

    Raises ValueError unless ``fine`` lives on one regular refinement of the
    mesh of ``coarse`` with the same degree.
    """
    if fine.degree != coarse.degree:
        raise ValueError("prolongation needs equal polynomial degrees")
    fm = fine.mesh
    if fm.parent is None or fm.level != coarse.mesh.level + 1 \
            or len(fm.parent) != 4 * coarse.mesh.n_triangles:
        raise ValueError("spaces are not on consecutive nested meshes")
    parent = fm.parent
    x0 = coarse.mesh.vertices[coarse.mesh.triangles[parent, 0]]
    pts = fine.coords[fine.elem_dofs] - x0[:, None, :]  # (Tf, nb, 2)
    inv_jac = np.transpose(coarse.inv_jac_t[parent], (0, 2, 1))
    st = np.einsum("tij,tbj->tbi", inv_jac, pts)
    snapped = np.round(4.0 * st) / 4.0
    if np.max(np.abs(snapped - st), initial=0.0) > 1e-8:
        raise ValueError("fine dofs do not sit at refinement nodes of the coarse mesh")
    nb = st.shape[1]
    vals, _ = reference_basis(coarse.degree, snapped.reshape(-1, 2))
    vals = vals.reshape(len(parent), nb, -1)  # (Tf, nb_fine, nb_coarse)

    # one row per fine dof: take its first occurrence
    flat_dofs = fine.elem_dofs.ravel()
    _, first = np.unique(flat_dofs, return_index=True)
    t_idx, b_idx = np.divmod(first, nb)
    row_vals = vals[t_idx, b_idx]  # (Nf, nb_coarse)
    cols = coarse.elem_dofs[parent[t_idx]]
    rows = np.repeat(np.arange(fine.N), row_vals.shape[1])
    keep = np.abs(row_vals.ravel()) > 1e-14
    P = sp.csr_matrix(
        (row_vals.ravel()[keep], (rows[keep], cols.ravel()[keep])),
        shape=(fine.N, coarse.N),
    )
    P.sort_indices()
    return P


def prolongate(coeffs: np.ndarray, src: FeSpace, dst: FeSpace) -> np.ndarray:
    """Interpolate a coarse function into the refined space.

    ``coeffs`` may be a full vector (length ``src.N``) or an interior vector
    (length ``src.n_interior``); the result has the matching layout.
    """
    P = prolongation_matrix(src, dst)
    coeffs = np.asarray(coeffs, dtype=float)
    if len(coeffs) == src.N:
        return P @ coeffs
    if len(coeffs) == src.n_interior:
        return P[dst.interior][:, src.interior] @ coeffs
    raise ValueError(f"vector length {len(coeffs)} matches neither layout of the source space")


# --------------------------------------------------------------------------
# eigen pairs, Rayleigh quotients, projections
# --------------------------------------------------------------------------


@dataclass
class EigenPair:
    lam: float
    coeffs: np.ndarray  # interior-dof coefficients
    level: int


def fix_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so that its entry of largest magnitude is positive."""
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def rayleigh_quotient(psi, Astiff, Bmass) -> float:
    psi = np.asarray(psi, dtype=float)
    den = float(psi @ (Bmass @ psi))
    if den == 0.0:
        raise ZeroDivisionError("Rayleigh quotient of the zero vector")
    return float(psi @ (Astiff @ psi)) / den


def galerkin_project(u_fine, coarse: FeSpace, fine: FeSpace, A_fine) -> np.ndarray:
    """a-orthogonal projection of a fine interior vector onto the coarse space.

    ``A_fine`` is the interior stiffness of ``fine``; the coarse system is
    formed by Galerkin products with the interior prolongation, so the
    projection is exact inside the discrete setting.
    """
    from scipy.linalg import cho_factor, cho_solve

    P = prolongation_matrix(coarse, fine)[fine.interior][:, coarse.interior]
    AP = A_fine @ P
    Ac = (P.T @ AP).toarray()
    rhs = AP.T @ u_fine
    return cho_solve(cho_factor(Ac), rhs)


# --------------------------------------------------------------------------
# reference solutions and error norms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExactEigenspace:
    """An exact eigenvalue with an L2-orthonormal basis of its eigenspace.

    Each basis entry maps points (x, y) to ``(value, grad)`` with grad of
    shape ``x.shape + (2,)``.
    """

    lam: float
    basis: tuple


class LaplaceSpectrum:
    """Closed-form Dirichlet spectrum of -Laplace on a rectangle."""

    def __init__(self, domain: DomainRect, max_mode: int = 40):
        self.domain = domain
        kx = math.pi / domain.width
        ky = math.pi / domain.height
        modes = [(m, n) for m in range(1, max_mode + 1) for n in range(1, max_mode + 1)]
        modes.sort(key=lambda mn: ((kx * mn[0]) ** 2 + (ky * mn[1]) ** 2, mn))
        self._kx, self._ky = kx, ky
        self.modes = modes

    def mode_eigenvalue(self, mn) -> float:
        return (self._kx * mn[0]) ** 2 + (self._ky * mn[1]) ** 2

    def eigenvalues(self, count: int) -> np.ndarray:
        return np.array([self.mode_eigenvalue(mn) for mn in self.modes[:count]])

    def _mode_function(self, m, n):
        d = self.domain
        kx, ky = self._kx * m, self._ky * n
        c = 2.0 / math.sqrt(d.width * d.height)

        def f(x, y):
            sx, cx = np.sin(kx * (x - d.x_min)), np.cos(kx * (x - d.x_min))
            sy, cy = np.sin(ky * (y - d.y_min)), np.cos(ky * (y - d.y_min))
            grad = np.stack([c * kx * cx * sy, c * ky * sx * cy], axis=-1)
            return c * sx * sy, grad

        return f

    def eigenspace(self, index: int) -> ExactEigenspace:
        """Eigenspace of the ``index``-th (0-based) eigenvalue counted with multiplicity."""
        lam = self.mode_eigenvalue(self.modes[index])
        same = [mn for mn in self.modes
                if abs(self.mode_eigenvalue(mn) - lam) <= 1e-12 * lam]
        return ExactEigenspace(lam, tuple(self._mode_function(*mn) for mn in same))


def _evaluate(space: FeSpace, u_full, st):
    vals, ref_grads = reference_basis(space.degree, st)
    U = u_full[space.elem_dofs]  # (T, nb)
    uq = U @ vals.T  # (T, nq)
    gq = np.einsum("tb,tqbi->tqi", U, space.physical_gradients(ref_grads))
    return uq, gq


def compute_errors(pair: EigenPair, space: FeSpace,
                   reference: Union[float, ExactEigenspace], quad_degree: Optional[int] = None):
    """Errors ``(h1_err, l2_err, eig_err)`` of a discrete eigenpair.

    With a bare reference eigenvalue only ``eig_err`` is available and the
    function errors are None.  With an exact eigenspace the comparison
    function is the b-normalized L2 projection of the discrete function onto
    that eigenspace, which fixes sign (and, for multiple eigenvalues, the
    direction) to best match the discrete one.
    """
    if reference is None:
        raise ValueError("missing reference")
    if not isinstance(reference, ExactEigenspace):
        return None, None, abs(pair.lam - float(reference))
    eig_err = abs(pair.lam - reference.lam)

    if quad_degree is None:
        quad_degree = max(6, 2 * space.degree + 2)
    st, w = triangle_rule(quad_degree)
    wa = 0.5 * np.abs(space.det)[:, None] * w[None, :]
    uq, gq = _evaluate(space, space.extend(pair.coeffs), st)
    xq = space.physical_points(st)
    exact = [f(xq[..., 0], xq[..., 1]) for f in reference.basis]
    c = np.array([np.sum(wa * uq * v) for v, _ in exact])
    if np.linalg.norm(c) == 0.0:
        c = np.zeros(len(exact))
        c[0] = 1.0
    c = c / np.linalg.norm(c)
    wq = sum(ci * v for ci, (v, _) in zip(c, exact))
    wg = sum(ci * g for ci, (_, g) in zip(c, exact))
    l2 = math.sqrt(np.sum(wa * (uq - wq) ** 2))
    semi = math.sqrt(np.sum(wa[..., None] * (gq - wg) ** 2))
    return math.sqrt(l2 * l2 + semi * semi), l2, eig_err


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def write_vtk(path, space: FeSpace, fields: dict) -> None:
    """Legacy ASCII VTK with vertex values of full-space coefficient vectors."""
    mesh = space.mesh
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("eigenfunctions\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g} 0\n")
        T = mesh.n_triangles
        fh.write(f"CELLS {T} {4 * T}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {T}\n")
        fh.write("5\n" * T)
        fh.write(f"POINT_DATA {mesh.n_vertices}\n")
        for name, vec in fields.items():
            vals = np.asarray(vec)[space.vertex_dofs]
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for v in vals:
                fh.write(f"{v:.17g}\n")
