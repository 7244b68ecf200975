"""Solution output: VTK legacy ASCII unstructured grids, boundary-surface
CSV extracts, and a running-mean accumulator for time statistics."""

from __future__ import annotations

import csv
from typing import Optional

import numpy as np

from .. import physics
from ..errors import ConfigError


def _subcell_connectivity(dim: int, k: int):
    """Connectivity of the (k+1)^dim plot grid into VTK quads/hexes."""
    n1 = k + 1
    cells = []
    if dim == 2:
        def vid(i, j):
            return j * n1 + i
        for j in range(k):
            for i in range(k):
                cells.append((vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)))
    else:
        def vid3(i, j, m):
            return (m * n1 + j) * n1 + i
        for m in range(k):
            for j in range(k):
                for i in range(k):
                    cells.append((
                        vid3(i, j, m), vid3(i + 1, j, m), vid3(i + 1, j + 1, m),
                        vid3(i, j + 1, m), vid3(i, j, m + 1), vid3(i + 1, j, m + 1),
                        vid3(i + 1, j + 1, m + 1), vid3(i, j + 1, m + 1),
                    ))
    return cells


def write_vtk(path: str, solver, order: Optional[int] = None,
              q_criterion: bool = False):
    """Point-interpolated fields on a per-element plot grid, VTK legacy
    ASCII unstructured grid (rho, velocity, p, T, optional Q-criterion)."""
    dim = solver.dim
    k = solver.opt.p if order is None else order
    k = max(k, 1)
    coords, vals = solver.sample_solution(order=k)
    ne, m = coords.shape[0], coords.shape[1]
    gas = solver.gas
    rho = vals[..., 0]
    vel = vals[..., 1:1 + dim] / rho[..., None]
    p = physics.pressure(vals, dim, gas)
    T = p / (rho * gas.R)

    qcrit = _plot_velocity_gradient(solver, k) if q_criterion else None

    npts = ne * m
    sub = _subcell_connectivity(dim, k)
    cell_type = 9 if dim == 2 else 12
    nodes_per = 4 if dim == 2 else 8

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("flow solution\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {npts} double\n")
        flat = coords.reshape(-1, dim)
        for row in flat:
            xyz = list(row) + [0.0] * (3 - dim)
            fh.write(f"{xyz[0]:.12g} {xyz[1]:.12g} {xyz[2]:.12g}\n")
        ncell = ne * len(sub)
        fh.write(f"CELLS {ncell} {ncell * (nodes_per + 1)}\n")
        for e in range(ne):
            base = e * m
            for conn in sub:
                fh.write(f"{nodes_per} " + " ".join(str(base + c) for c in conn) + "\n")
        fh.write(f"CELL_TYPES {ncell}\n")
        for _ in range(ncell):
            fh.write(f"{cell_type}\n")
        fh.write(f"POINT_DATA {npts}\n")
        fh.write("SCALARS rho double\nLOOKUP_TABLE default\n")
        for v in rho.reshape(-1):
            fh.write(f"{v:.12g}\n")
        fh.write("VECTORS velocity double\n")
        for row in vel.reshape(-1, dim):
            xyz = list(row) + [0.0] * (3 - dim)
            fh.write(f"{xyz[0]:.12g} {xyz[1]:.12g} {xyz[2]:.12g}\n")
        for name, arr in (("p", p), ("T", T)):
            fh.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
            for v in arr.reshape(-1):
                fh.write(f"{v:.12g}\n")
        if qcrit is not None:
            fh.write("SCALARS qcriterion double\nLOOKUP_TABLE default\n")
            for v in qcrit.reshape(-1):
                fh.write(f"{v:.12g}\n")


def _plot_velocity_gradient(solver, k: int):
    """Q-criterion on the plot grid: physical gradients computed at the
    solution points (chain rule), then interpolated."""
    dim = solver.dim
    n1 = k + 1
    lin = np.linspace(-1.0, 1.0, n1)
    pts = np.empty((n1 ** dim, dim))
    for ax in range(dim):
        for s in range(n1 ** dim):
            pts[s, ax] = lin[(s // n1 ** ax) % n1]
    ref = solver.ref
    grads_ref = np.empty((solver.ne, dim, dim + 2, ref.num_solution_points))
    for ax in range(dim):
        grads_ref[:, ax] = np.einsum("ts,evs->evt", ref.div_operators[ax], solver.Q_upts)
    phys = np.einsum("eskl,elvs->ekvs", solver.invT_upts, grads_ref)
    M = ref.basis_at(pts)
    gq = np.einsum("ms,ekvs->ekmv", M, phys)  # (ne, dim, m, nv)
    vals = np.einsum("ms,evs->emv", M, solver.Q_upts)
    dudx = physics.velocity_gradient(
        vals.reshape(-1, dim + 2),
        np.moveaxis(gq, 1, 2).reshape(-1, dim, dim + 2), dim)
    q = physics.q_criterion(dudx, dim).reshape(solver.ne, n1 ** dim)
    return q


def write_surface_csv(path: str, solver, patch: str, p0_ref: float):
    """Boundary-surface rows (x, y, z, p, T, isentropic Mach) for one patch."""
    gas = solver.gas
    dim = solver.dim
    rows = []
    found = False
    for spec, pl in solver.boundary_groups:
        if spec.patch != patch:
            continue
        found = True
        Q = solver.Q_fpts[pl.e, :, pl.p]
        x = solver.x_fpts[pl.e, pl.p]
        p = physics.pressure(Q, dim, gas)
        T = p / (Q[..., 0] * gas.R)
        mis = physics.isentropic_mach(p, p0_ref, gas)
        for i in range(pl.size):
            xyz = list(x[i]) + [0.0] * (3 - dim)
            rows.append([xyz[0], xyz[1], xyz[2], p[i], T[i], mis[i]])
    if not found:
        raise ConfigError(f"patch {patch!r} not on this rank / unknown")
    rows.sort()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "p", "T", "mach_is"])
        for row in rows:
            w.writerow([f"{v:.12g}" for v in row])


class RunningMean:
    """Streaming mean of solution-point fields for time statistics."""

    def __init__(self):
        self.count = 0
        self.mean: Optional[np.ndarray] = None

    def update(self, Q: np.ndarray):
        if self.mean is None:
            self.mean = Q.copy()
            self.count = 1
            return
        self.count += 1
        self.mean += (Q - self.mean) / self.count
