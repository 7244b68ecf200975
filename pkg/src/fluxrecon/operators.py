"""Reference-element machinery for tensor-product flux reconstruction.

Solution and flux points are Gauss-Legendre; the correction function is
the Radau-derivative member that recovers a nodal collocated DG scheme.
All operators are dense matrices acting on point-value vectors.

Face parameterization matches :mod:`fluxrecon.mesh_core`: a face with
corner cycle (c0..c3) maps (u, v) in [-1,1]^2 with c0 at (-1,-1), u
running c0->c1, v running c0->c3; flux points are tensor GL points
flattened u-fastest.  Face normals follow the outward winding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial import legendre as npleg

from .errors import InvertedElementError, MeshError
from .mesh_core import HEX_FACES, QUAD_EDGES

_REF_CORNERS = {
    "quad": np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float),
    "hex": np.array(
        [
            [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
            [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
        ],
        dtype=float,
    ),
}
_KIND_DIM = {"quad": 2, "hex": 3}
_KIND_FACES = {"quad": QUAD_EDGES, "hex": HEX_FACES}


def gauss_legendre_points(n: int):
    """Gauss-Legendre nodes and weights on [-1, 1].

    Supports 1 <= n <= 12; nodes are exactly symmetric about 0.
    """
    if not 1 <= n <= 12:
        raise MeshError(f"gauss_legendre_points: n={n} outside [1, 12]")
    x, w = npleg.leggauss(n)
    return x, w


def lagrange_eval(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix L with L[a, b] = l_b(x[a]) for the Lagrange basis on nodes."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = nodes.size
    L = np.ones((x.size, n))
    for b in range(n):
        for m in range(n):
            if m != b:
                L[:, b] *= (x - nodes[m]) / (nodes[b] - nodes[m])
    return L


def lagrange_diff_matrix(nodes: np.ndarray) -> np.ndarray:
    """D[a, b] = l_b'(nodes[a]), via barycentric weights."""
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    w = np.ones(n)
    for b in range(n):
        for m in range(n):
            if m != b:
                w[b] /= nodes[b] - nodes[m]
    D = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a != b:
                D[a, b] = (w[b] / w[a]) / (nodes[a] - nodes[b])
        D[a, a] = -np.sum(D[a, :])
    return D


def dg_correction_derivative(p: int, nodes: np.ndarray):
    """(g_L', g_R') at the 1-D nodes for the DG-recovering correction.

    g_L = (-1)^(p+1)/2 (P_{p+1} - P_p), so g_L(-1)=1, g_L(+1)=0;
    g_R(x) = g_L(-x).
    """
    cL = np.zeros(p + 2)
    cL[p + 1] = 1.0
    cL[p] = -1.0
    cL *= 0.5 * (-1.0) ** (p + 1)
    dL = npleg.legder(cL)
    gL = npleg.legval(nodes, dL)
    # reflection: g_R'(x) = -g_L'(-x)
    gR = -npleg.legval(-np.asarray(nodes, dtype=float), dL)
    return gL, gR


@dataclass(frozen=True)
class FaceInfo:
    """Static description of one reference face."""

    normal_axis: int
    side: int            # -1 or +1 in the normal axis
    tan_axes: tuple      # element axes for (u, v); (u,) for edges
    tan_signs: tuple     # +1/-1: does u increase along the axis


@dataclass
class ReferenceElement:
    """Point sets and dense operators for one (kind, degree)."""

    kind: str
    p: int
    dim: int
    n: int                      # p + 1
    num_solution_points: int    # n^dim
    num_faces: int
    num_face_points: int        # n^(dim-1)
    points_1d: np.ndarray
    weights_1d: np.ndarray
    solution_points: np.ndarray     # (N_s, dim)
    solution_weights: np.ndarray    # (N_s,) tensor quadrature weights
    flux_points: np.ndarray         # (N_I * N_Fi, dim) reference coords
    interp_to_faces: np.ndarray     # (N_I*N_Fi, N_s)
    div_operators: np.ndarray       # (dim, N_s, N_s)
    correction_matrix: np.ndarray   # (N_s, N_I*N_Fi), holds div g per column
    face_info: tuple                # FaceInfo per face
    face_weights: np.ndarray        # (N_Fi,) quadrature weights on a face

    def face_slice(self, f: int) -> slice:
        nf = self.num_face_points
        return slice(f * nf, (f + 1) * nf)

    def basis_at(self, points: np.ndarray) -> np.ndarray:
        """Evaluate the solution basis at reference points: (npts, N_s)."""
        return _tensor_basis(self.points_1d, np.atleast_2d(points))


def _tensor_basis(nodes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Tensor Lagrange basis values; solution index flattened x-fastest."""
    dim = points.shape[1]
    n = nodes.size
    per_axis = [lagrange_eval(nodes, points[:, ax]) for ax in range(dim)]
    out = np.ones((points.shape[0], n ** dim))
    for s in range(n ** dim):
        idx = [(s // n ** ax) % n for ax in range(dim)]
        col = np.ones(points.shape[0])
        for ax in range(dim):
            col = col * per_axis[ax][:, idx[ax]]
        out[:, s] = col
    return out


def _face_param_points(corners: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Reference coords of face points from the corner cycle (u-fastest)."""
    if corners.shape[0] == 2:
        u = pts[:, None]
        return 0.5 * (1 - u) * corners[0] + 0.5 * (1 + u) * corners[1]
    n = pts.size
    uu, vv = np.meshgrid(pts, pts, indexing="xy")  # vv slow, uu fast
    u = uu.reshape(-1, 1)
    v = vv.reshape(-1, 1)
    w0 = 0.25 * (1 - u) * (1 - v)
    w1 = 0.25 * (1 + u) * (1 - v)
    w2 = 0.25 * (1 + u) * (1 + v)
    w3 = 0.25 * (1 - u) * (1 + v)
    return w0 * corners[0] + w1 * corners[1] + w2 * corners[2] + w3 * corners[3]


def _derive_face_info(corners: np.ndarray) -> FaceInfo:
    dim = corners.shape[1]
    span = corners.max(axis=0) - corners.min(axis=0)
    normal_axis = int(np.argmin(span))
    side = int(np.sign(corners[0, normal_axis]))
    du = 0.5 * (corners[1] - corners[0])
    axes = [int(np.argmax(np.abs(du)))]
    signs = [int(np.sign(du[axes[0]]))]
    if corners.shape[0] == 4:
        dv = 0.5 * (corners[3] - corners[0])
        axes.append(int(np.argmax(np.abs(dv))))
        signs.append(int(np.sign(dv[axes[1]])))
    return FaceInfo(normal_axis, side, tuple(axes), tuple(signs))


def build_reference_element(kind: str, p: int, correction: str = "dg") -> ReferenceElement:
    """Construct the operator set for one element kind and degree."""
    if kind not in _KIND_DIM:
        raise MeshError(f"unsupported element kind {kind!r}")
    if not 0 <= p <= 8:
        raise MeshError(f"degree p={p} outside [0, 8]")
    if correction != "dg":
        raise MeshError(f"unsupported correction family {correction!r}")
    dim = _KIND_DIM[kind]
    n = p + 1
    pts, wts = gauss_legendre_points(n)

    # solution points, axis-0-fastest flattening: idx[ax] = (s // n^ax) % n
    sol = np.empty((n ** dim, dim))
    for ax in range(dim):
        for s in range(n ** dim):
            sol[s, ax] = pts[(s // n ** ax) % n]
    wq = np.ones(n ** dim)
    for ax in range(dim):
        for s in range(n ** dim):
            wq[s] *= wts[(s // n ** ax) % n]

    faces = _KIND_FACES[kind]
    ref_corners = _REF_CORNERS[kind]
    nfp = n ** (dim - 1)
    fpts = np.zeros((len(faces) * nfp, dim))
    infos = []
    for f, cyc in enumerate(faces):
        corners = ref_corners[list(cyc)]
        fpts[f * nfp:(f + 1) * nfp] = _face_param_points(corners, pts)
        infos.append(_derive_face_info(corners))

    interp = _tensor_basis(pts, fpts)

    d1 = lagrange_diff_matrix(pts)
    eye = np.eye(n)
    div = np.zeros((dim, n ** dim, n ** dim))
    for ax in range(dim):
        mats = [d1 if a == ax else eye for a in range(dim)]
        # kron with axis0 fastest: index s = sum_ax idx[ax] * n^ax
        M = mats[-1]
        for m in reversed(mats[:-1]):
            M = np.kron(M, m)
        div[ax] = M

    gL, gR = dg_correction_derivative(p, pts)
    corr = np.zeros((n ** dim, len(faces) * nfp))
    for f, info in enumerate(infos):
        gn = gR if info.side > 0 else gL
        for fp in range(nfp):
            # tangential 1-D indices of this flux point, honoring direction
            tidx = {}
            rem = fp
            for (ax, sg) in zip(info.tan_axes, info.tan_signs):
                i = rem % n
                rem //= n
                tidx[ax] = i if sg > 0 else n - 1 - i
            col = f * nfp + fp
            for s in range(n ** dim):
                ok = all((s // n ** ax) % n == i for ax, i in tidx.items())
                if ok:
                    a = (s // n ** info.normal_axis) % n
                    corr[s, col] = info.side * gn[a]

    face_wq = np.ones(nfp)
    for ax in range(dim - 1):
        for fp in range(nfp):
            face_wq[fp] *= wts[(fp // n ** ax) % n]

    return ReferenceElement(
        kind=kind,
        p=p,
        dim=dim,
        n=n,
        num_solution_points=n ** dim,
        num_faces=len(faces),
        num_face_points=nfp,
        points_1d=pts,
        weights_1d=wts,
        solution_points=sol,
        solution_weights=wq,
        flux_points=fpts,
        interp_to_faces=interp,
        div_operators=div,
        correction_matrix=corr,
        face_info=tuple(infos),
        face_weights=face_wq,
    )


def _shape_gradients(kind: str, points: np.ndarray) -> np.ndarray:
    """d(shape_i)/d(xi_b) at reference points: (npts, nverts, dim)."""
    signs = _REF_CORNERS[kind]
    npts, dim = points.shape[0], points.shape[1]
    nverts = signs.shape[0]
    out = np.empty((npts, nverts, dim))
    for i in range(nverts):
        factors = [(1.0 + signs[i, ax] * points[:, ax]) * 0.5 for ax in range(dim)]
        for b in range(dim):
            g = np.full(npts, 0.5 * signs[i, b])
            for ax in range(dim):
                if ax != b:
                    g = g * factors[ax]
            out[:, i, b] = g
    return out


def _adjugate(J: np.ndarray) -> np.ndarray:
    """Classical adjugate (= det(J) J^-1) for stacked 2x2 or 3x3 matrices."""
    d = J.shape[-1]
    A = np.empty_like(J)
    if d == 2:
        A[..., 0, 0] = J[..., 1, 1]
        A[..., 0, 1] = -J[..., 0, 1]
        A[..., 1, 0] = -J[..., 1, 0]
        A[..., 1, 1] = J[..., 0, 0]
        return A
    for i in range(3):
        for j in range(3):
            r = [k for k in range(3) if k != j]
            c = [k for k in range(3) if k != i]
            m = (J[..., r[0], c[0]] * J[..., r[1], c[1]]
                 - J[..., r[0], c[1]] * J[..., r[1], c[0]])
            A[..., i, j] = m * (-1.0) ** (i + j)
    return A


@dataclass
class ElementGeometry:
    """Mapping data evaluated at one element's solution and flux points."""

    jac_upts: np.ndarray       # (N_s, d, d)
    det_upts: np.ndarray       # (N_s,)
    adj_upts: np.ndarray       # (N_s, d, d)  |J| J^-1
    inv_t_upts: np.ndarray     # (N_s, d, d)  J^-T, for chain-rule gradients
    normals_fpts: np.ndarray   # (N_I*N_Fi, d) unit outward
    area_fpts: np.ndarray      # (N_I*N_Fi,) transformed-normal magnitude
    coords_upts: np.ndarray    # (N_s, d) physical solution points
    coords_fpts: np.ndarray    # (N_I*N_Fi, d)
    volume: float
    face_areas: np.ndarray     # (N_I,)
    h_min: float


def face_geometry(corner_coords: np.ndarray, points_1d: np.ndarray):
    """Unit outward normal, area scale, and coordinates of face points.

    Works directly on the face's corner coordinates so both owners of an
    interface compute bit-identical values when handed the same corner
    order.
    """
    corners = np.asarray(corner_coords, dtype=float)
    pts = np.asarray(points_1d, dtype=float)
    dim = corners.shape[1]
    if corners.shape[0] == 2:
        u = pts[:, None]
        x = 0.5 * (1 - u) * corners[0] + 0.5 * (1 + u) * corners[1]
        t = np.broadcast_to(0.5 * (corners[1] - corners[0]), x.shape)
        normal = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        n = pts.size
        uu, vv = np.meshgrid(pts, pts, indexing="xy")
        u = uu.reshape(-1, 1)
        v = vv.reshape(-1, 1)
        x = (0.25 * (1 - u) * (1 - v) * corners[0]
             + 0.25 * (1 + u) * (1 - v) * corners[1]
             + 0.25 * (1 + u) * (1 + v) * corners[2]
             + 0.25 * (1 - u) * (1 + v) * corners[3])
        xu = (0.25 * (-(1 - v)) * corners[0] + 0.25 * (1 - v) * corners[1]
              + 0.25 * (1 + v) * corners[2] - 0.25 * (1 + v) * corners[3])
        xv = (0.25 * (-(1 - u)) * corners[0] - 0.25 * (1 + u) * corners[1]
              + 0.25 * (1 + u) * corners[2] + 0.25 * (1 - u) * corners[3])
        normal = np.cross(xu, xv)
    area = np.linalg.norm(normal, axis=1)
    unit = normal / area[:, None]
    return x, unit, area


def compute_geometry(
    vertex_coords: np.ndarray, ref: ReferenceElement, cell_id: int = -1
) -> ElementGeometry:
    """Jacobians, adjugates, normals and the cell's length scale."""
    coords = np.asarray(vertex_coords, dtype=float)
    dim = ref.dim
    if coords.shape != (_REF_CORNERS[ref.kind].shape[0], dim):
        raise MeshError(
            f"cell {cell_id}: vertex array shape {coords.shape} invalid for {ref.kind}"
        )

    grads = _shape_gradients(ref.kind, ref.solution_points)
    jac = np.einsum("ia,pib->pab", coords, grads)
    det = np.linalg.det(jac)
    if np.any(det <= 0):
        raise InvertedElementError(cell_id, f"min |J| = {det.min():.3e}")
    adj = _adjugate(jac)
    inv_t = np.transpose(adj, (0, 2, 1)) / det[:, None, None]

    nfp = ref.num_face_points
    normals = np.empty((ref.num_faces * nfp, dim))
    areas = np.empty(ref.num_faces * nfp)
    coords_f = np.empty((ref.num_faces * nfp, dim))
    faces = _KIND_FACES[ref.kind]
    for f, cyc in enumerate(faces):
        x, unit, area = face_geometry(coords[list(cyc)], ref.points_1d)
        sl = ref.face_slice(f)
        coords_f[sl] = x
        normals[sl] = unit
        areas[sl] = area

    shape_vals = _tensor_shape(ref.kind, ref.solution_points)
    coords_u = shape_vals @ coords

    volume = float(ref.solution_weights @ det)
    face_areas = np.array(
        [float(ref.face_weights @ areas[ref.face_slice(f)]) for f in range(ref.num_faces)]
    )
    h_min = volume / face_areas.max()

    return ElementGeometry(
        jac_upts=jac,
        det_upts=det,
        adj_upts=adj,
        inv_t_upts=inv_t,
        normals_fpts=normals,
        area_fpts=areas,
        coords_upts=coords_u,
        coords_fpts=coords_f,
        volume=volume,
        face_areas=face_areas,
        h_min=h_min,
    )


def _tensor_shape(kind: str, points: np.ndarray) -> np.ndarray:
    """Multilinear shape function values: (npts, nverts)."""
    signs = _REF_CORNERS[kind]
    npts, dim = points.shape
    out = np.ones((npts, signs.shape[0]))
    for i in range(signs.shape[0]):
        for ax in range(dim):
            out[:, i] *= 0.5 * (1.0 + signs[i, ax] * points[:, ax])
    return out


def transform_flux(F: np.ndarray, adj: np.ndarray) -> np.ndarray:
    """Reference-frame flux |J| J^-1 . F.

    F has shape (..., d, nvars) per point, adj (..., d, d); returns the
    same shape as F.
    """
    return np.einsum("...kl,...lv->...kv", adj, F)


def interpolation_matrix(ref_from: ReferenceElement, ref_to: ReferenceElement) -> np.ndarray:
    """Transfer matrix between two degrees of the same kind (order switch)."""
    if ref_from.kind != ref_to.kind:
        raise MeshError("interpolation between different element kinds")
    return ref_from.basis_at(ref_to.solution_points)
