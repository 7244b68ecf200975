"""Per-rank execution engine: residual kernel graph, halo exchange,
time-step control, and SSP Runge-Kutta advance.

State is physical conserved variables Q with layout
``(elements, variables, points)``, point index contiguous.  One residual
evaluation runs:

1. interpolate Q to flux points (GEMM), exchange halos;
2. (viscous) common solutions, corrected gradients, gradient halos;
3. point-wise flux at solution points, transform to the reference frame;
4. Riemann/LDG common interface fluxes, scaled to outward transformed
   normal fluxes per flux-point slot;
5. interpolate the transformed flux polynomial to faces and take its
   outward normal trace (the discontinuous interface flux);
6. divergence GEMM + correction GEMM on the flux jumps, scale by 1/|J|,
   add sponge sources.

The discontinuous interface flux comes from the same flux polynomial the
divergence acts on, so interface corrections telescope and conservation
holds to round-off.  Interface common fluxes are evaluated in the face's
canonical frame (owner with the smaller global cell id), making interface
numbers bit-identical under any partitioning in deterministic mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from ..errors import ConfigError, PositivityError
from ..mesh_core import orientation_permutation
from ..operators import build_reference_element, compute_geometry, face_geometry
from .. import physics
from ..physics import BoundarySpec, GasModel, RiemannDiagnostics, SpongeZone
from ..perf import PerfLedger, monotonic_time
from ..prep.distribute import allreduce_min, allreduce_sum, nbx_exchange
from ..prep.matching import MeshShard
from .halo import HaloPlan
from .kernels import BlockPlan, FusionPlan, Kernel, KernelGraph

ITEM = 8


@dataclass(frozen=True)
class RKScheme:
    """Convex-combination SSP Runge-Kutta stage table.

    Stage i computes u_i = sum_j alphas[j] u_j + beta dt L(u_{i-1}).
    """

    name: str
    stages: tuple

    def __post_init__(self):
        for alphas, beta in self.stages:
            if beta < 0 or any(a < 0 for a in alphas):
                raise ConfigError("RK coefficients must be nonnegative")
            if abs(sum(alphas) - 1.0) > 1e-14:
                raise ConfigError("RK convex combination must sum to 1")


SSP_RK3 = RKScheme(
    "ssp3",
    (
        ((1.0,), 1.0),
        ((0.75, 0.25), 0.25),
        ((1.0 / 3.0, 0.0, 2.0 / 3.0), 2.0 / 3.0),
    ),
)

RK_SCHEMES = {"ssp3": SSP_RK3}


@dataclass
class SolverOptions:
    p: int = 3
    cfl: float = 1.0
    rk: str = "ssp3"
    riemann: str = "rusanov"
    fusion: bool = True
    block_kb: int = 256
    deterministic: bool = False
    viscous: bool = False
    ldg_beta: float = 0.5
    ldg_tau_scale: float = 0.1
    double_buffer: bool = True
    startup_steps: int = 0
    startup_p: int = 0


@dataclass
class PointList:
    """Flux-point index set as (element, point-slot) index pairs."""

    e: np.ndarray
    p: np.ndarray

    @property
    def size(self) -> int:
        return self.e.size

    def sl(self, lo: int, hi: int) -> "PointList":
        return PointList(self.e[lo:hi], self.p[lo:hi])


def _empty_plist() -> PointList:
    return PointList(np.empty(0, np.int64), np.empty(0, np.int64))


def _cat_plist(parts) -> PointList:
    if not parts:
        return _empty_plist()
    return PointList(
        np.concatenate([q.e for q in parts]),
        np.concatenate([q.p for q in parts]),
    )


def _gemm(X: np.ndarray, M: np.ndarray, deterministic: bool) -> np.ndarray:
    """X @ M; deterministic mode uses a fixed-order k accumulation whose
    result is independent of row blocking."""
    if not deterministic:
        return X @ M
    out = X[:, 0:1] * M[0:1, :]
    for k in range(1, M.shape[0]):
        out += X[:, k:k + 1] * M[k:k + 1, :]
    return out


class SolverRank:
    """Solver state and kernels for one mesh shard."""

    def __init__(
        self,
        shard: MeshShard,
        gas: GasModel,
        options: SolverOptions,
        boundary_specs: Optional[Dict[str, BoundarySpec]] = None,
        sponge_zones: Optional[Sequence[SpongeZone]] = None,
        ctx=None,
        ledger: Optional[PerfLedger] = None,
    ):
        self.shard = shard
        self.gas = gas
        self.opt = options
        self.ctx = ctx
        self.dim = shard.dim
        self.nv = self.dim + 2
        kind = "hex" if self.dim == 3 else "quad"
        self.ref = build_reference_element(kind, options.p)
        if options.rk not in RK_SCHEMES:
            raise ConfigError(f"unknown RK scheme {options.rk!r}")
        self.rk = RK_SCHEMES[options.rk]
        self.ledger = ledger if ledger is not None else PerfLedger()
        self.riemann_diag = RiemannDiagnostics()
        self.boundary_diag = physics.BoundaryDiagnostics()
        self.sponge_zones = list(sponge_zones or [])
        self.boundary_specs = dict(boundary_specs or {})

        self.ne = len(shard.cells)
        self.gids = np.array([c.id for c in shard.cells], dtype=np.int64)
        self.lid = {int(g): i for i, g in enumerate(self.gids)}
        self._coords = shard.coord_lookup()

        self._build_geometry()
        self._build_interfaces()
        self._build_arrays()
        self._build_graph()

    # ------------------------------------------------------------------
    # assembly
    # ------------------------------------------------------------------

    def _cell_coords(self, cell) -> np.ndarray:
        return np.array([self._coords[v] for v in cell.vertex_ids])

    def _build_geometry(self):
        ref, ne, d = self.ref, self.ne, self.dim
        Ns = ref.num_solution_points
        nf = ref.num_faces * ref.num_face_points
        self.det_upts = np.empty((ne, Ns))
        self.adj_upts = np.empty((ne, Ns, d, d))
        self.invT_upts = np.empty((ne, Ns, d, d))
        self.x_upts = np.empty((ne, Ns, d))
        self.x_fpts = np.empty((ne, nf, d))
        self.slot_normal = np.empty((ne, nf, d))
        self.slot_area = np.empty((ne, nf))
        self.slot_sign = np.ones((ne, nf))
        self.h_min = np.empty(ne)
        self.volume = np.empty(ne)
        for i, cell in enumerate(self.shard.cells):
            g = compute_geometry(self._cell_coords(cell), ref, cell.id)
            self.det_upts[i] = g.det_upts
            self.adj_upts[i] = g.adj_upts
            self.invT_upts[i] = g.inv_t_upts
            self.x_upts[i] = g.coords_upts
            self.x_fpts[i] = g.coords_fpts
            self.slot_normal[i] = g.normals_fpts
            self.slot_area[i] = g.area_fpts
            self.h_min[i] = g.h_min
            self.volume[i] = g.volume
        # reference outward normal of every flux-point slot: axis, side
        nfp = ref.num_face_points
        self.slot_ref_axis = np.empty(nf, dtype=np.int64)
        self.slot_ref_side = np.empty(nf)
        for f, info in enumerate(ref.face_info):
            self.slot_ref_axis[f * nfp:(f + 1) * nfp] = info.normal_axis
            self.slot_ref_side[f * nfp:(f + 1) * nfp] = float(info.side)

    def _plist(self, gid: int, lf: int, perm: np.ndarray) -> PointList:
        nfp = self.ref.num_face_points
        li = self.lid[gid]
        return PointList(np.full(perm.size, li, np.int64), lf * nfp + perm)

    def _build_interfaces(self):
        ref, d = self.ref, self.dim
        nfp = ref.num_face_points
        pts = ref.points_1d
        ident = np.arange(nfp)

        ll, rr, nn, aa = [], [], [], []
        for f in self.shard.internal_faces:
            gl, lfl = f.left
            gr, lfr = f.right
            perm = orientation_permutation(d, f.orientation, pts)
            pl = self._plist(gl, lfl, ident)
            pr = self._plist(gr, lfr, perm)
            corners = np.array([self._coords[v] for v in f.left_corners])
            _, n_c, a_c = face_geometry(corners, pts)
            ll.append(pl)
            rr.append(pr)
            nn.append(n_c)
            aa.append(a_c)
            self.slot_normal[pl.e, pl.p] = n_c
            self.slot_area[pl.e, pl.p] = a_c
            self.slot_normal[pr.e, pr.p] = n_c
            self.slot_area[pr.e, pr.p] = a_c
            self.slot_sign[pr.e, pr.p] = -1.0
        self.loc_l = _cat_plist(ll)
        self.loc_r = _cat_plist(rr)
        self.loc_n = np.concatenate(nn) if nn else np.empty((0, d))
        self.loc_a = np.concatenate(aa) if aa else np.empty(0)

        rm, rns, ras, rsg = [], [], [], []
        halo_order: Dict[int, list] = {}
        for fi, (face, cpl) in enumerate(self.shard.remote_faces):
            perm_c = orientation_permutation(d, cpl.orientation, pts)
            pm = self._plist(cpl.local_gid, cpl.local_face, perm_c)
            corners = np.array([self._coords[v] for v in cpl.canonical_corners])
            _, n_c, a_c = face_geometry(corners, pts)
            sign = 1.0 if cpl.canonical else -1.0
            rm.append(pm)
            rns.append(n_c)
            ras.append(a_c)
            rsg.append(np.full(nfp, sign))
            self.slot_normal[pm.e, pm.p] = n_c
            self.slot_area[pm.e, pm.p] = a_c
            self.slot_sign[pm.e, pm.p] = sign
            canon_key = ((cpl.local_gid, cpl.local_face) if cpl.canonical
                         else (cpl.remote_tag[2], cpl.remote_tag[3]))
            halo_order.setdefault(cpl.remote_rank, []).append((canon_key, fi, pm))
        self.rem_mine = _cat_plist(rm)
        self.rem_n = np.concatenate(rns) if rns else np.empty((0, d))
        self.rem_a = np.concatenate(ras) if ras else np.empty(0)
        self.rem_sign = np.concatenate(rsg) if rsg else np.empty(0)

        row_of_face = {fi: np.arange(fi * nfp, (fi + 1) * nfp)
                       for fi in range(len(self.shard.remote_faces))}
        pack, rows = {}, {}
        for rank in sorted(halo_order):
            entries = sorted(halo_order[rank], key=lambda t: t[0])
            pl = _cat_plist([pm for _, _, pm in entries])
            pack[rank] = (pl.e, pl.p)
            rows[rank] = np.concatenate([row_of_face[fi] for _, fi, _ in entries])
        self.halo = HaloPlan(sorted(halo_order), pack, rows,
                             len(self.shard.remote_faces) * nfp)
        self.n_ghost = self.halo.num_ghost_points

        by_patch: Dict[int, list] = {}
        for f in self.shard.boundary_faces:
            by_patch.setdefault(f.patch_id, []).append(f)
        self.boundary_groups = []
        for pid in sorted(by_patch):
            name = self.shard.patch_names.get(pid, str(pid))
            spec = self.boundary_specs.get(name)
            if spec is None:
                raise ConfigError(f"no boundary condition for patch {name!r}")
            if spec.kind == "periodic":
                raise ConfigError(
                    f"patch {name!r} declared periodic but carries boundary faces; "
                    "periodic pairing happens during mesh import"
                )
            plist = _cat_plist([self._plist(*f.left, ident) for f in by_patch[pid]])
            self.boundary_groups.append((spec, plist))

        flat_n = self.slot_normal.reshape(-1, d)
        self.slot_switch = physics.ldg_switch(flat_n).reshape(self.ne, -1)
        area_face = self.slot_area.reshape(self.ne, ref.num_faces, nfp) @ ref.face_weights
        h_face = area_face if d == 2 else np.sqrt(area_face)
        tau = self.opt.ldg_tau_scale * (self.opt.p + 1) ** 2 / h_face
        self.slot_tau = np.repeat(tau, nfp, axis=1)

    def _build_arrays(self):
        ne, nv, d = self.ne, self.nv, self.dim
        Ns = self.ref.num_solution_points
        nf = self.ref.num_faces * self.ref.num_face_points
        self.Q_upts = np.zeros((ne, nv, Ns))
        self.Q_fpts = np.zeros((ne, nv, nf))
        self.F_upts = np.zeros((ne, d, nv, Ns))
        self.Fhat_upts = np.zeros((ne, d, nv, Ns))
        self.Fhat_fpts = np.zeros((ne, d, nv, nf))
        self.Fown_fpts = np.zeros((ne, nv, nf))
        self.Fc_fpts = np.zeros((ne, nv, nf))
        self.jump_fpts = np.zeros((ne, nv, nf))
        self.divF_upts = np.zeros((ne, nv, Ns))
        self.dQdt = np.zeros((ne, nv, Ns))
        self.ghost_Q = np.zeros((self.n_ghost, nv))
        if self.opt.viscous:
            self.jumpQ_fpts = np.zeros((ne, nv, nf))
            self.grad_upts = np.zeros((ne, d, nv, Ns))
            self.grad_fpts = np.zeros((ne, d, nv, nf))
            self.ghost_grad = np.zeros((self.n_ghost, d * nv))
        ref = self.ref
        self.gcorr = np.zeros((d, Ns, nf))
        for f, info in enumerate(ref.face_info):
            sl = ref.face_slice(f)
            self.gcorr[info.normal_axis][:, sl] = ref.correction_matrix[:, sl] * info.side
        self._staged_Q: Optional[np.ndarray] = None
        self._staged_range = (-1, -1)

    # ------------------------------------------------------------------
    # gathers and staging
    # ------------------------------------------------------------------

    def _q_at(self, pl: PointList) -> np.ndarray:
        return self.Q_fpts[pl.e, :, pl.p]

    def _grad_at(self, pl: PointList) -> Optional[np.ndarray]:
        if not self.opt.viscous:
            return None
        return self.grad_fpts[pl.e, :, :, pl.p]  # (n, d, nv)

    def _block_Q(self, lo, hi):
        if self._staged_range == (lo, hi) and self._staged_Q is not None:
            return self._staged_Q
        return self.Q_upts[lo:hi]

    # ------------------------------------------------------------------
    # kernels: volume
    # ------------------------------------------------------------------

    def _traffic_elem(self, doubles_in: int, doubles_out: int):
        def model(lo, hi):
            n = hi - lo
            return (doubles_in * n * ITEM, doubles_out * n * ITEM)
        return model

    def _kernel_interp(self):
        ref, nv = self.ref, self.nv
        Ns = ref.num_solution_points
        nf = ref.num_faces * ref.num_face_points
        MT = ref.interp_to_faces.T.copy()

        def run(lo, hi):
            X = self._block_Q(lo, hi).reshape(-1, Ns)
            out = _gemm(X, MT, self.opt.deterministic)
            self.Q_fpts[lo:hi] = out.reshape(hi - lo, nv, nf)
            self.ledger.add_gemm("interp_to_faces", X.shape[0], nf, Ns,
                                 X.nbytes, out.nbytes)

        return Kernel("interp_to_faces", "gemm", ("Q_upts",), ("Q_fpts",),
                      "elements", run, lambda lo, hi: (0, 0))

    def _phys_flux_body(self, lo, hi):
        d = self.dim
        Q = np.moveaxis(self._block_Q(lo, hi), 1, 2)  # (n, Ns, nv)
        F = physics.inviscid_flux(Q, d, self.gas)     # (n, Ns, d, nv)
        if self.opt.viscous:
            grad = np.moveaxis(self.grad_upts[lo:hi], (1, 3), (2, 1))  # (n,Ns,d,nv)
            F = F - physics.viscous_flux(Q, grad, d, self.gas)
        self.F_upts[lo:hi] = np.moveaxis(F, (1, 2), (3, 1))

    def _transform_body(self, lo, hi):
        F = self.F_upts[lo:hi]          # (n, d, nv, Ns)
        adj = self.adj_upts[lo:hi]      # (n, Ns, d, d)
        out = self.Fhat_upts[lo:hi]
        d = self.dim
        for k in range(d):
            acc = adj[:, :, k, 0][:, None, :] * F[:, 0]
            for l in range(1, d):
                acc = acc + adj[:, :, k, l][:, None, :] * F[:, l]
            out[:, k] = acc

    def _kernel_phys_flux(self):
        Ns = self.ref.num_solution_points
        members = ("phys_flux", "viscous_flux") if self.opt.viscous else None
        return Kernel(
            "phys_flux", "pd", ("Q_upts",), ("F_upts",), "elements",
            self._phys_flux_body,
            self._traffic_elem(
                (self.nv + (self.dim * self.nv if self.opt.viscous else 0)) * Ns,
                self.dim * self.nv * Ns),
            cost=None if self.opt.viscous else "phys_flux",
            points_of=lambda lo, hi: (hi - lo) * Ns,
            members=members,
        )

    def _kernel_transform(self):
        Ns = self.ref.num_solution_points
        return Kernel(
            "transform_flux", "pd", ("F_upts",), ("Fhat_upts",), "elements",
            self._transform_body,
            self._traffic_elem((self.dim * self.nv + self.dim * self.dim) * Ns,
                               self.dim * self.nv * Ns),
            cost="transform_flux",
            points_of=lambda lo, hi: (hi - lo) * Ns,
        )

    def _fused_volume_flux(self):
        Ns = self.ref.num_solution_points
        members = ["phys_flux", "transform_flux"]
        if self.opt.viscous:
            members.insert(1, "viscous_flux")

        def run(lo, hi):
            self._phys_flux_body(lo, hi)
            self._transform_body(lo, hi)

        return Kernel(
            "phys_flux+transform_flux", "pd", ("Q_upts",), ("Fhat_upts",),
            "elements", run,
            self._traffic_elem(
                (self.nv + self.dim * self.dim
                 + (self.dim * self.nv if self.opt.viscous else 0)) * Ns,
                self.dim * self.nv * Ns),
            cost=None, points_of=lambda lo, hi: (hi - lo) * Ns,
            members=tuple(members),
        )

    def _kernel_interp_flux(self):
        ref, nv, d = self.ref, self.nv, self.dim
        Ns = ref.num_solution_points
        nf = ref.num_faces * ref.num_face_points
        MT = ref.interp_to_faces.T.copy()

        def run(lo, hi):
            for ax in range(d):
                X = self.Fhat_upts[lo:hi, ax].reshape(-1, Ns)
                out = _gemm(X, MT, self.opt.deterministic)
                self.Fhat_fpts[lo:hi, ax] = out.reshape(hi - lo, nv, nf)
                self.ledger.add_gemm("interp_flux", X.shape[0], nf, Ns,
                                     X.nbytes, out.nbytes)

        return Kernel("interp_flux", "gemm", ("Fhat_upts",), ("Fhat_fpts",),
                      "elements", run, lambda lo, hi: (0, 0))

    def _own_trace_body(self, lo, hi):
        # outward normal trace of the transformed flux polynomial
        d = self.dim
        Ff = self.Fhat_fpts[lo:hi]
        acc = None
        for ax in range(d):
            mask = (self.slot_ref_axis == ax)
            term = Ff[:, ax] * (self.slot_ref_side * mask)
            acc = term if acc is None else acc + term
        self.Fown_fpts[lo:hi] = acc

    def _jump_body(self, lo, hi):
        self.jump_fpts[lo:hi] = self.Fc_fpts[lo:hi] - self.Fown_fpts[lo:hi]

    def _kernel_own_trace(self):
        nv = self.nv
        nf = self.ref.num_faces * self.ref.num_face_points
        return Kernel(
            "own_trace", "pd", ("Fhat_fpts",), ("Fown_fpts",), "elements",
            self._own_trace_body,
            self._traffic_elem((self.dim * nv + 1) * nf, nv * nf),
            cost="own_trace",
            points_of=lambda lo, hi: (hi - lo) * nf,
        )

    def _kernel_flux_jump(self):
        nv = self.nv
        nf = self.ref.num_faces * self.ref.num_face_points
        return Kernel(
            "flux_jump", "pd", ("Fc_fpts", "Fown_fpts"), ("jump_fpts",),
            "elements", self._jump_body,
            self._traffic_elem(2 * nv * nf, nv * nf),
            cost="flux_jump",
            points_of=lambda lo, hi: (hi - lo) * nf,
        )

    def _fused_trace_jump(self):
        nv = self.nv
        nf = self.ref.num_faces * self.ref.num_face_points

        def run(lo, hi):
            self._own_trace_body(lo, hi)
            self._jump_body(lo, hi)

        return Kernel(
            "own_trace+flux_jump", "pd", ("Fhat_fpts", "Fc_fpts"),
            ("jump_fpts",), "elements", run,
            self._traffic_elem((self.dim * nv + 1 + nv) * nf, nv * nf),
            cost=None, points_of=lambda lo, hi: (hi - lo) * nf,
            members=("own_trace", "flux_jump"),
        )

    def _kernel_div(self):
        ref, nv = self.ref, self.nv
        Ns = ref.num_solution_points
        DT = [ref.div_operators[ax].T.copy() for ax in range(self.dim)]

        def run(lo, hi):
            X = self.Fhat_upts[lo:hi, 0].reshape(-1, Ns)
            acc = _gemm(X, DT[0], self.opt.deterministic)
            self.ledger.add_gemm("divergence", X.shape[0], Ns, Ns, X.nbytes, acc.nbytes)
            for ax in range(1, self.dim):
                X = self.Fhat_upts[lo:hi, ax].reshape(-1, Ns)
                acc += _gemm(X, DT[ax], self.opt.deterministic)
                self.ledger.add_gemm("divergence", X.shape[0], Ns, Ns, X.nbytes, 0)
            self.divF_upts[lo:hi] = acc.reshape(hi - lo, nv, Ns)

        return Kernel("divergence", "gemm", ("Fhat_upts",), ("divF_upts",),
                      "elements", run, lambda lo, hi: (0, 0))

    def _kernel_corr(self):
        ref, nv = self.ref, self.nv
        Ns = ref.num_solution_points
        nf = ref.num_faces * ref.num_face_points
        CT = ref.correction_matrix.T.copy()

        def run(lo, hi):
            X = self.jump_fpts[lo:hi].reshape(-1, nf)
            out = _gemm(X, CT, self.opt.deterministic)
            self.divF_upts[lo:hi] += out.reshape(hi - lo, nv, Ns)
            self.ledger.add_gemm("correction", X.shape[0], Ns, nf, X.nbytes, out.nbytes)

        return Kernel("correction", "gemm", ("jump_fpts", "divF_upts"),
                      ("divF_upts",), "elements", run, lambda lo, hi: (0, 0))

    def _kernel_scale(self):
        nv, Ns = self.nv, self.ref.num_solution_points

        def run(lo, hi):
            out = -self.divF_upts[lo:hi] / self.det_upts[lo:hi][:, None, :]
            if self.sponge_zones:
                Q = np.moveaxis(self._block_Q(lo, hi), 1, 2)
                x = self.x_upts[lo:hi]
                S = np.zeros_like(Q)
                for zone in self.sponge_zones:
                    S = S + physics.sponge_source(Q, zone, x)
                out += np.moveaxis(S, 1, 2)
            self.dQdt[lo:hi] = out

        members = ("scale_residual", "sponge_source") if self.sponge_zones else None
        return Kernel(
            "scale_residual", "pd", ("divF_upts", "Q_upts"), ("dQdt",),
            "elements", run,
            self._traffic_elem((nv + 1) * Ns, nv * Ns),
            cost="scale_residual", points_of=lambda lo, hi: (hi - lo) * Ns,
            members=members,
        )

    # ------------------------------------------------------------------
    # kernels: interface common fluxes
    # ------------------------------------------------------------------

    def _common_flux_vals(self, QL, QR, gL, gR, n, sw, tau):
        F = physics.riemann_flux(QL, QR, n, self.dim, self.gas,
                                 self.opt.riemann, self.riemann_diag)
        if self.opt.viscous:
            _, Gn = physics.ldg_interface(QL, QR, gL, gR, n,
                                          self.opt.ldg_beta, tau,
                                          self.dim, self.gas, switch=sw)
            F = F - Gn
        return F

    def _kernel_common_flux(self):
        nv = self.nv
        riem_key = f"riemann_{self.opt.riemann}"

        def run(lo, hi):
            pl, pr = self.loc_l.sl(lo, hi), self.loc_r.sl(lo, hi)
            QL, QR = self._q_at(pl), self._q_at(pr)
            gL, gR = self._grad_at(pl), self._grad_at(pr)
            sw = self.slot_switch[pl.e, pl.p][:, None]
            tau = self.slot_tau[pl.e, pl.p][:, None]
            Fc = self._common_flux_vals(QL, QR, gL, gR, self.loc_n[lo:hi], sw, tau)
            A = self.loc_a[lo:hi][:, None]
            self.Fc_fpts[pl.e, :, pl.p] = A * Fc
            self.Fc_fpts[pr.e, :, pr.p] = -A * Fc

        def tally(lo, hi):
            n = hi - lo
            out = [(riem_key, n), ("flux_scale", n)]
            if self.opt.viscous:
                out.append(("viscous_interface", n))
            return out

        read = 2 * nv + self.dim + 1 + (2 * self.dim * nv + 2 if self.opt.viscous else 0)
        return Kernel(
            "riemann_common", "pi", ("Q_fpts",), ("Fc_fpts",), "interfaces",
            run, lambda lo, hi: ((hi - lo) * read * ITEM, (hi - lo) * 2 * nv * ITEM),
            cost=None, points_of=lambda lo, hi: hi - lo, tally=tally,
        )

    def _kernel_remote_flux(self):
        nv = self.nv
        riem_key = f"riemann_{self.opt.riemann}"

        def run(lo, hi):
            pm = self.rem_mine.sl(lo, hi)
            if pm.size == 0:
                return
            Qmine = self._q_at(pm)
            Qghost = self.ghost_Q[lo:hi]
            sign = self.rem_sign[lo:hi]
            n = self.rem_n[lo:hi]
            mc = (sign > 0)[:, None]
            QL = np.where(mc, Qmine, Qghost)
            QR = np.where(mc, Qghost, Qmine)
            gmine = self._grad_at(pm)
            if self.opt.viscous:
                gghost = self.ghost_grad[lo:hi].reshape(-1, self.dim, nv)
                gL = np.where(mc[..., None], gmine, gghost)
                gR = np.where(mc[..., None], gghost, gmine)
            else:
                gL = gR = None
            sw = self.slot_switch[pm.e, pm.p][:, None]
            tau = self.slot_tau[pm.e, pm.p][:, None]
            Fc = self._common_flux_vals(QL, QR, gL, gR, n, sw, tau)
            A = (sign * self.rem_a[lo:hi])[:, None]
            self.Fc_fpts[pm.e, :, pm.p] = A * Fc

        def tally(lo, hi):
            # the common flux is recomputed on both ranks; only the
            # canonical side logs it so totals stay partition-invariant
            ncanon = int(np.sum(self.rem_sign[lo:hi] > 0))
            out = [(riem_key, ncanon), ("flux_scale", ncanon)]
            if self.opt.viscous:
                out.append(("viscous_interface", ncanon))
            return out

        return Kernel(
            "remote_flux", "pi", ("Q_fpts", "ghost_Q"), ("Fc_fpts",),
            "interfaces", run,
            lambda lo, hi: ((hi - lo) * (2 * nv + self.dim + 2) * ITEM,
                            (hi - lo) * nv * ITEM),
            cost=None, points_of=lambda lo, hi: hi - lo, tally=tally,
        )

    def _kernel_boundary_flux(self):
        nv = self.nv
        riem_key = f"riemann_{self.opt.riemann}"

        def run(lo, hi):
            for spec, pl in self.boundary_groups[lo:hi]:
                Q = self._q_at(pl)
                n = self.slot_normal[pl.e, pl.p]
                x = self.x_fpts[pl.e, pl.p]
                ghost = physics.apply_boundary(spec, Q, n, self.dim, self.gas,
                                               x=x, diag=self.boundary_diag)
                Fc = physics.riemann_flux(Q, ghost, n, self.dim, self.gas,
                                          self.opt.riemann, self.riemann_diag)
                if self.opt.viscous:
                    g = self._grad_at(pl)
                    if spec.kind != "slip":
                        Qb = 0.5 * (Q + ghost)
                        Fv = physics.viscous_flux(Qb, g, self.dim, self.gas)
                        Gn = np.sum(Fv * n[..., None], axis=-2)
                        if spec.kind == "adiabatic":
                            vel = Qb[..., 1:1 + self.dim] / Qb[..., 0:1]
                            tau_v = Fv[..., 1:1 + self.dim]
                            work = np.sum(np.sum(tau_v * n[..., None], axis=-2) * vel,
                                          axis=-1)
                            Gn = Gn.copy()
                            Gn[..., 1 + self.dim] = work
                        tau_pen = self.slot_tau[pl.e, pl.p][:, None]
                        Gn = Gn + tau_pen * (ghost - Q)
                        Fc = Fc - Gn
                A = self.slot_area[pl.e, pl.p][:, None]
                self.Fc_fpts[pl.e, :, pl.p] = A * Fc

        def npts(lo, hi):
            return sum(p.size for _, p in self.boundary_groups[lo:hi])

        def tally(lo, hi):
            n = npts(lo, hi)
            out = [(riem_key, n), ("boundary_ghost", n), ("flux_scale", n)]
            if self.opt.viscous:
                out.append(("viscous_interface", n))
            return out

        return Kernel(
            "boundary_flux", "pi", ("Q_fpts",), ("Fc_fpts",), "interfaces",
            run,
            lambda lo, hi: (npts(lo, hi) * (2 * nv + self.dim) * ITEM,
                            npts(lo, hi) * nv * ITEM),
            cost=None, points_of=npts, tally=tally,
        )

    # viscous auxiliary passes ---------------------------------------------

    def _kernel_common_solution(self):
        nv = self.nv

        def run(lo, hi):
            pl, pr = self.loc_l.sl(lo, hi), self.loc_r.sl(lo, hi)
            QL, QR = self._q_at(pl), self._q_at(pr)
            sw = self.slot_switch[pl.e, pl.p][:, None]
            Qs = 0.5 * (QL + QR) - self.opt.ldg_beta * sw * (QR - QL)
            self.jumpQ_fpts[pl.e, :, pl.p] = Qs - QL
            self.jumpQ_fpts[pr.e, :, pr.p] = Qs - QR

        return Kernel(
            "common_solution", "pi", ("Q_fpts",), ("jumpQ_fpts",), "interfaces",
            run, lambda lo, hi: ((hi - lo) * (2 * nv + 1) * ITEM,
                                 (hi - lo) * 2 * nv * ITEM),
            cost="common_solution", points_of=lambda lo, hi: hi - lo,
        )

    def _kernel_common_solution_remote(self):
        nv = self.nv

        def run(lo, hi):
            pm = self.rem_mine.sl(lo, hi)
            if pm.size == 0:
                return
            Qmine = self._q_at(pm)
            Qghost = self.ghost_Q[lo:hi]
            mc = (self.rem_sign[lo:hi] > 0)[:, None]
            QL = np.where(mc, Qmine, Qghost)
            QR = np.where(mc, Qghost, Qmine)
            sw = self.slot_switch[pm.e, pm.p][:, None]
            Qs = 0.5 * (QL + QR) - self.opt.ldg_beta * sw * (QR - QL)
            self.jumpQ_fpts[pm.e, :, pm.p] = Qs - Qmine

        def tally(lo, hi):
            ncanon = int(np.sum(self.rem_sign[lo:hi] > 0))
            return [("common_solution", ncanon)]

        return Kernel(
            "common_solution_remote", "pi", ("Q_fpts", "ghost_Q"),
            ("jumpQ_fpts",), "interfaces", run,
            lambda lo, hi: ((hi - lo) * (2 * nv + 1) * ITEM, (hi - lo) * nv * ITEM),
            cost=None, points_of=lambda lo, hi: hi - lo,
            tally=tally,
        )

    def _kernel_common_solution_boundary(self):
        nv = self.nv

        def run(lo, hi):
            for spec, pl in self.boundary_groups[lo:hi]:
                Q = self._q_at(pl)
                n = self.slot_normal[pl.e, pl.p]
                x = self.x_fpts[pl.e, pl.p]
                ghost = physics.apply_boundary(spec, Q, n, self.dim, self.gas,
                                               x=x, diag=self.boundary_diag)
                self.jumpQ_fpts[pl.e, :, pl.p] = 0.5 * (Q + ghost) - Q

        def npts(lo, hi):
            return sum(p.size for _, p in self.boundary_groups[lo:hi])

        return Kernel(
            "common_solution_boundary", "pi", ("Q_fpts",), ("jumpQ_fpts",),
            "interfaces", run,
            lambda lo, hi: (npts(lo, hi) * 2 * nv * ITEM, npts(lo, hi) * nv * ITEM),
            cost=None, points_of=npts,
            members=("common_solution", "boundary_ghost"),
        )

    def _kernel_gradient(self):
        ref, nv, d = self.ref, self.nv, self.dim
        Ns = ref.num_solution_points
        nf = ref.num_faces * ref.num_face_points
        DT = [ref.div_operators[ax].T.copy() for ax in range(d)]
        GT = [self.gcorr[ax].T.copy() for ax in range(d)]

        def run(lo, hi):
            Xq = self._block_Q(lo, hi).reshape(-1, Ns)
            Xj = self.jumpQ_fpts[lo:hi].reshape(-1, nf)
            for ax in range(d):
                g = _gemm(Xq, DT[ax], self.opt.deterministic)
                g += _gemm(Xj, GT[ax], self.opt.deterministic)
                self.grad_upts[lo:hi, ax] = g.reshape(hi - lo, nv, Ns)
                self.ledger.add_gemm("gradient", Xq.shape[0], Ns, Ns,
                                     Xq.nbytes, g.nbytes)
                self.ledger.add_gemm("gradient_corr", Xj.shape[0], Ns, nf,
                                     Xj.nbytes, 0)

        return Kernel("gradient", "gemm", ("Q_upts", "jumpQ_fpts"),
                      ("grad_upts",), "elements", run, lambda lo, hi: (0, 0))

    def _kernel_grad_transform(self):
        Ns = self.ref.num_solution_points
        d, nv = self.dim, self.nv

        def run(lo, hi):
            g = self.grad_upts[lo:hi]
            invT = self.invT_upts[lo:hi]
            out = np.empty_like(g)
            for k in range(d):
                acc = invT[:, :, k, 0][:, None, :] * g[:, 0]
                for l in range(1, d):
                    acc = acc + invT[:, :, k, l][:, None, :] * g[:, l]
                out[:, k] = acc
            self.grad_upts[lo:hi] = out

        return Kernel(
            "grad_transform", "pd", ("grad_upts",), ("grad_upts",),
            "elements", run,
            self._traffic_elem((d * nv + d * d) * Ns, d * nv * Ns),
            cost="grad_transform", points_of=lambda lo, hi: (hi - lo) * Ns,
        )

    def _kernel_interp_grad(self):
        ref, nv, d = self.ref, self.nv, self.dim
        Ns = ref.num_solution_points
        nf = ref.num_faces * ref.num_face_points
        MT = ref.interp_to_faces.T.copy()

        def run(lo, hi):
            for ax in range(d):
                X = self.grad_upts[lo:hi, ax].reshape(-1, Ns)
                out = _gemm(X, MT, self.opt.deterministic)
                self.grad_fpts[lo:hi, ax] = out.reshape(hi - lo, nv, nf)
                self.ledger.add_gemm("interp_grad", X.shape[0], nf, Ns,
                                     X.nbytes, out.nbytes)

        return Kernel("interp_grad", "gemm", ("grad_upts",), ("grad_fpts",),
                      "elements", run, lambda lo, hi: (0, 0))

    # ------------------------------------------------------------------
    # graph and execution
    # ------------------------------------------------------------------

    def _build_graph(self):
        nv, Ns = self.nv, self.ref.num_solution_points
        nf = self.ref.num_faces * self.ref.num_face_points
        doubles_per_elem = (2 * nv * Ns + 2 * self.dim * nv * Ns + 4 * nv * nf)
        self.block_plan = BlockPlan(
            num_elements=self.ne,
            bytes_per_element=doubles_per_elem * ITEM,
            budget_bytes=self.opt.block_kb * 1024,
            fixed_block=32 if self.opt.deterministic else None,
        )

        kernels = [
            self._kernel_interp(),
            self._kernel_common_flux(),
            self._kernel_remote_flux(),
            self._kernel_boundary_flux(),
            self._kernel_phys_flux(),
            self._kernel_transform(),
            self._kernel_interp_flux(),
            self._kernel_own_trace(),
            self._kernel_flux_jump(),
            self._kernel_div(),
            self._kernel_corr(),
            self._kernel_scale(),
        ]
        inputs = ["Q_upts", "ghost_Q"]
        if self.opt.viscous:
            inputs += ["grad_upts", "grad_fpts", "ghost_grad"]
        self.graph = KernelGraph(kernels, inputs, fused_runners={
            "phys_flux+transform_flux": self._fused_volume_flux(),
            "own_trace+flux_jump": self._fused_trace_jump(),
        })
        self.fusion_plan = FusionPlan([
            ["phys_flux", "transform_flux"],
            ["own_trace", "flux_jump"],
        ])
        if self.opt.fusion:
            self.graph.validate_plan(self.fusion_plan)
        if self.opt.viscous:
            self.visc_kernels = {
                "common_solution": self._kernel_common_solution(),
                "common_solution_remote": self._kernel_common_solution_remote(),
                "common_solution_boundary": self._kernel_common_solution_boundary(),
                "gradient": self._kernel_gradient(),
                "grad_transform": self._kernel_grad_transform(),
                "interp_grad": self._kernel_interp_grad(),
            }
        self.iface_chunk = 65536

    def _account(self, k: Kernel, lo: int, hi: int):
        if k.kind == "gemm":
            return  # gemm runners self-report with exact m, n, k
        br, bw = k.traffic(lo, hi)
        if k.tally is not None:
            from ..perf import flops_pointwise
            s = self.ledger.stat(k.name)
            for key, npts in k.tally(lo, hi):
                s.flops += flops_pointwise(key, self.dim, npts)
            s.bytes_read += br
            s.bytes_written += bw
            s.invocations += 1
            return
        npts = k.points_of(lo, hi) if k.points_of else (hi - lo)
        members = k.members if k.members else ((k.cost,) if k.cost else None)
        self.ledger.add_pointwise(k.name, self.dim, npts, br, bw,
                                  members=members)

    def _run_kernel(self, k: Kernel, units: int):
        """Run one interface-domain kernel over its chunked units."""
        lo = 0
        while True:
            hi = min(lo + self.iface_chunk, units)
            k.run(lo, hi)
            self._account(k, lo, hi)
            lo = hi
            if lo >= units:
                break

    def _run_elem_kernels(self, kernels):
        """Element-block loop with software-pipelined prefetch (double
        buffering): stage the next block's state while processing the
        current one."""
        blocks = self.block_plan.blocks()
        pending = None
        for bi, (lo, hi) in enumerate(blocks):
            if pending is not None and pending[0] == (lo, hi):
                self._staged_Q, self._staged_range = pending[1], (lo, hi)
            else:
                self._staged_Q, self._staged_range = None, (-1, -1)
            if self.opt.double_buffer and bi + 1 < len(blocks):
                nlo, nhi = blocks[bi + 1]
                pending = ((nlo, nhi), self.Q_upts[nlo:nhi].copy())
                self.ledger.prefetches += 1
            for k in kernels:
                k.run(lo, hi)
                self._account(k, lo, hi)
        self._staged_Q, self._staged_range = None, (-1, -1)

    def halo_exchange_q(self):
        """Send interpolated face values; fill ghost_Q in canonical order."""
        if self.ctx is None or self.ctx.nranks == 1 or self.halo.empty():
            return
        sbuf = {}
        for rank in self.halo.neighbors:
            e, p = self.halo.pack[rank]
            sbuf[rank] = np.ascontiguousarray(self.Q_fpts[e, :, p]).tobytes()
        recv = nbx_exchange(self.ctx, sbuf)
        for rank in self.halo.neighbors:
            vals = np.frombuffer(recv[rank], dtype=np.float64).reshape(-1, self.nv)
            self.ghost_Q[self.halo.rows[rank]] = vals

    def halo_exchange_grad(self):
        if self.ctx is None or self.ctx.nranks == 1 or self.halo.empty():
            return
        d, nv = self.dim, self.nv
        sbuf = {}
        for rank in self.halo.neighbors:
            e, p = self.halo.pack[rank]
            g = self.grad_fpts[e, :, :, p].reshape(-1, d * nv)
            sbuf[rank] = np.ascontiguousarray(g).tobytes()
        recv = nbx_exchange(self.ctx, sbuf)
        for rank in self.halo.neighbors:
            vals = np.frombuffer(recv[rank], dtype=np.float64).reshape(-1, d * nv)
            self.ghost_grad[self.halo.rows[rank]] = vals

    def compute_residual(self, Q: np.ndarray, check: bool = True) -> np.ndarray:
        """dQ/dt for the given state (halo exchanges included)."""
        if check:
            self._check_positivity(Q)
        self.Q_upts = np.ascontiguousarray(Q)
        passes = self.graph.passes(self.fusion_plan if self.opt.fusion else None)
        by_name = {k.name: k for k in passes}

        self._run_elem_kernels([by_name["interp_to_faces"]])
        self.halo_exchange_q()

        if self.opt.viscous:
            vk = self.visc_kernels
            self._run_kernel(vk["common_solution"], self.loc_l.size)
            self._run_kernel(vk["common_solution_remote"], self.rem_mine.size)
            self._run_kernel(vk["common_solution_boundary"], len(self.boundary_groups))
            self._run_elem_kernels([vk["gradient"], vk["grad_transform"],
                                    vk["interp_grad"]])
            self.halo_exchange_grad()

        self._run_kernel(by_name["riemann_common"], self.loc_l.size)
        self._run_kernel(by_name["remote_flux"], self.rem_mine.size)
        self._run_kernel(by_name["boundary_flux"], len(self.boundary_groups))

        if "phys_flux+transform_flux" in by_name:
            vol = [by_name["phys_flux+transform_flux"]]
        else:
            vol = [by_name["phys_flux"], by_name["transform_flux"]]
        vol.append(by_name["interp_flux"])
        if "own_trace+flux_jump" in by_name:
            vol.append(by_name["own_trace+flux_jump"])
        else:
            vol += [by_name["own_trace"], by_name["flux_jump"]]
        vol += [by_name["divergence"], by_name["correction"], by_name["scale_residual"]]
        self._run_elem_kernels(vol)
        return self.dQdt.copy()

    def _check_positivity(self, Q: np.ndarray):
        Ns = self.ref.num_solution_points
        physics.check_positivity(
            np.moveaxis(Q, 1, 2).reshape(-1, self.nv), self.dim, self.gas,
            cell_of_point=lambda i: self.gids[i // Ns],
        )

    # ------------------------------------------------------------------
    # time stepping
    # ------------------------------------------------------------------

    def compute_dt(self, Q: np.ndarray, cfl: Optional[float] = None) -> float:
        """CFL dt: min over elements of h_min / ((|u|+c)(2p+1))."""
        cfl = self.opt.cfl if cfl is None else cfl
        Qp = np.moveaxis(Q, 1, 2)  # (ne, Ns, nv)
        rho = Qp[..., 0]
        vel = Qp[..., 1:1 + self.dim] / rho[..., None]
        umag = np.sqrt(np.sum(vel * vel, axis=-1))
        c = physics.sound_speed(Qp, self.dim, self.gas)
        sig = (umag + c).max(axis=1)
        local = float(np.min(self.h_min / (sig * (2 * self.opt.p + 1))))
        if self.ctx is not None and self.ctx.nranks > 1:
            local = allreduce_min(self.ctx, local)
        return cfl * local

    def advance_step(self, Q: np.ndarray, dt: float) -> np.ndarray:
        """One SSP-RK step (convex combination of Euler stages)."""
        if dt <= 0:
            raise ConfigError("dt must be positive")
        states = [Q]
        for alphas, beta in self.rk.stages:
            r = self.compute_residual(states[-1])
            new = beta * dt * r
            for a, u in zip(alphas, states):
                if a:
                    new += a * u
            states.append(new)
        return states[-1]

    def step_in_place(self, dt: float):
        self.Q_upts = self.advance_step(self.Q_upts, dt)

    def run_steps(self, nsteps: int, dt: Optional[float] = None,
                  time_steps: bool = True) -> float:
        """March nsteps (CFL-adaptive dt unless fixed); returns simulated
        time covered."""
        t = 0.0
        for _ in range(nsteps):
            step_dt = dt if dt is not None else self.compute_dt(self.Q_upts)
            t0 = monotonic_time()
            self.step_in_place(step_dt)
            if time_steps:
                self.ledger.step_times.append(monotonic_time() - t0)
            t += step_dt
        return t

    # ------------------------------------------------------------------
    # init, integrals, interpolation
    # ------------------------------------------------------------------

    def set_state(self, fn) -> None:
        """Initialize Q from fn(x) -> conserved rows; x is (npts, dim)."""
        ne, Ns = self.ne, self.ref.num_solution_points
        vals = fn(self.x_upts.reshape(-1, self.dim))
        self.Q_upts = np.ascontiguousarray(
            np.moveaxis(np.asarray(vals, dtype=float).reshape(ne, Ns, self.nv), 1, 2)
        )

    def integrate_conserved(self, Q: Optional[np.ndarray] = None) -> np.ndarray:
        """Global integrals of the conserved variables (rank-ordered sum)."""
        if Q is None:
            Q = self.Q_upts
        w = self.ref.solution_weights
        mass = np.einsum("s,es,evs->v", w, self.det_upts, Q)
        if self.ctx is not None and self.ctx.nranks > 1:
            mass = allreduce_sum(self.ctx, mass)
        return np.asarray(mass)

    def l2_error(self, exact_fn) -> np.ndarray:
        """Over-integrated L2 norm of Q - exact per variable (global).

        Uses a quadrature two orders finer than the solution points so the
        norm is not blind to error between collocation points.
        """
        from ..operators import gauss_legendre_points, _shape_gradients, _tensor_shape
        d = self.dim
        nq1 = min(self.opt.p + 3, 12)
        qx, qw = gauss_legendre_points(nq1)
        pts = np.empty((nq1 ** d, d))
        wq = np.ones(nq1 ** d)
        for ax in range(d):
            for s in range(nq1 ** d):
                pts[s, ax] = qx[(s // nq1 ** ax) % nq1]
                wq[s] *= qw[(s // nq1 ** ax) % nq1]
        M = self.ref.basis_at(pts)  # (m, Ns)
        shp = _tensor_shape(self.ref.kind, pts)
        grads = _shape_gradients(self.ref.kind, pts)
        tot = np.zeros(self.nv)
        vol = 0.0
        Qq = np.einsum("ms,evs->emv", M, self.Q_upts)
        for i, cell in enumerate(self.shard.cells):
            coords = self._cell_coords(cell)
            xq = shp @ coords
            det = np.linalg.det(np.einsum("ia,pib->pab", coords, grads))
            diff2 = (Qq[i] - np.asarray(exact_fn(xq))) ** 2
            tot += (wq * det) @ diff2
            vol += float(wq @ det)
        if self.ctx is not None and self.ctx.nranks > 1:
            tot = allreduce_sum(self.ctx, tot)
            vol = float(allreduce_sum(self.ctx, vol))
        return np.sqrt(tot / vol)

    def sample_solution(self, order: Optional[int] = None):
        """Interpolate Q to a per-element plot grid; returns (coords, vals).

        coords: (ne, m, dim); vals: (ne, m, nv) with m = (order+1)^dim
        equispaced points per element.
        """
        k = self.opt.p if order is None else order
        n1 = k + 1
        lin = np.linspace(-1.0, 1.0, n1) if n1 > 1 else np.zeros(1)
        d = self.dim
        pts = np.empty((n1 ** d, d))
        for ax in range(d):
            for s in range(n1 ** d):
                pts[s, ax] = lin[(s // n1 ** ax) % n1]
        M = self.ref.basis_at(pts)
        vals = np.einsum("ms,evs->emv", M, self.Q_upts)
        from ..operators import _tensor_shape
        shp = _tensor_shape(self.ref.kind, pts)
        coords = np.empty((self.ne, n1 ** d, d))
        for i, cell in enumerate(self.shard.cells):
            coords[i] = shp @ self._cell_coords(cell)
        return coords, vals


def interpolate_state(Q: np.ndarray, kind: str, p_from: int, p_to: int) -> np.ndarray:
    """Transfer states between polynomial degrees (start-up order switch)."""
    if p_from == p_to:
        return Q.copy()
    rf = build_reference_element(kind, p_from)
    rt = build_reference_element(kind, p_to)
    M = rf.basis_at(rt.solution_points)  # (Ns_to, Ns_from)
    return np.einsum("ts,evs->evt", M, Q)
