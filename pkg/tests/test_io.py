import os

import numpy as np
import pytest

from fluxrecon.errors import ConfigError, FormatError
from fluxrecon.fixtures import (
    box_mesh_2d,
    box_mesh_3d,
    cascade_mesh_2d,
    vortex_mesh,
    vortex_state,
)
from fluxrecon.io.config import RunConfig
from fluxrecon.io.gmsh import apply_periodic, import_gmsh_ascii, write_gmsh_ascii
from fluxrecon.io.shards import read_shard, read_shards, write_shard, write_shards
from fluxrecon.io import solution as solution_io
from fluxrecon.physics import GasModel
from fluxrecon.pipeline import SolverOptions, SolverRank
from fluxrecon.prep import prepare_shards


SINGLE_HEX = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
8
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
5 0 0 1
6 1 0 1
7 1 1 1
8 0 1 1
$EndNodes
$Elements
1
1 5 2 1 1 1 2 3 4 5 6 7 8
$EndElements
"""


class TestGmsh:
    def test_single_hex(self, tmp_path):
        path = tmp_path / "one.msh"
        path.write_text(SINGLE_HEX)
        mesh = import_gmsh_ascii(str(path))
        assert mesh.dim == 3
        assert mesh.vertices.shape == (8, 3)
        assert len(mesh.cells) == 1
        assert mesh.cells[0].vertex_ids == tuple(range(8))

    def test_tetrahedron_rejected_by_type(self, tmp_path):
        bad = SINGLE_HEX.replace("1 5 2 1 1 1 2 3 4 5 6 7 8",
                                 "1 4 2 1 1 1 2 3 4")
        path = tmp_path / "tet.msh"
        path.write_text(bad)
        with pytest.raises(FormatError, match="unsupported element type 4"):
            import_gmsh_ascii(str(path))

    def test_malformed_section_reports_line(self, tmp_path):
        bad = SINGLE_HEX.replace("$EndNodes", "$EndElements")
        path = tmp_path / "bad.msh"
        path.write_text(bad)
        with pytest.raises(FormatError):
            import_gmsh_ascii(str(path))

    def test_box_roundtrip_counts(self, tmp_path):
        mesh = box_mesh_3d(4, 4, 4)
        path = tmp_path / "box.msh"
        write_gmsh_ascii(mesh, str(path))
        back = import_gmsh_ascii(str(path))
        assert len(back.cells) == 64
        assert back.vertices.shape == (125, 3)
        assert sum(len(s.records) for s in back.boundary_sections) == 96
        assert {s.name for s in back.boundary_sections} == \
               {"xmin", "xmax", "ymin", "ymax", "zmin", "zmax"}
        for a, b in zip(mesh.cells, back.cells):
            assert a.vertex_ids == b.vertex_ids
        assert np.allclose(mesh.vertices, back.vertices)

    def test_2d_roundtrip(self, tmp_path):
        mesh = cascade_mesh_2d(nx=12, ny=4)
        path = tmp_path / "casc.msh"
        write_gmsh_ascii(mesh, str(path))
        back = import_gmsh_ascii(str(path))
        assert back.dim == 2
        assert len(back.cells) == 48
        assert {s.name for s in back.boundary_sections} == \
               {"inlet", "outlet", "blade", "per_lo", "per_hi"}

    def test_apply_periodic_matches_builtin_alias(self, tmp_path):
        named = box_mesh_2d(4, 3)
        paired = apply_periodic(named, [("xmin", "xmax", (1.0, 0.0)),
                                        ("ymin", "ymax", (0.0, 1.0))])
        builtin = box_mesh_2d(4, 3, periodic=(True, True))
        assert np.array_equal(paired.vertex_alias, builtin.vertex_alias)
        assert paired.boundary_sections == []

    def test_apply_periodic_unmatched_vertex(self):
        mesh = box_mesh_2d(3, 3)
        with pytest.raises(Exception):
            apply_periodic(mesh, [("xmin", "xmax", (0.5, 0.0))])


class TestShards:
    def roundtrip(self, mesh, nranks, tmp_path, rng):
        ncells = len(mesh.cells)
        from oracles import random_partition

        assignment = random_partition(rng, ncells, nranks)
        shards = prepare_shards(mesh, assignment, nranks)
        outdir = str(tmp_path / f"shards{nranks}")
        write_shards(shards, outdir)
        back = read_shards(outdir)
        assert len(back) == nranks
        for a, b in zip(shards, back):
            assert a.rank == b.rank and a.nranks == b.nranks
            assert [c.vertex_ids for c in a.cells] == [c.vertex_ids for c in b.cells]
            assert np.array_equal(a.vertex_ids, b.vertex_ids)
            assert np.array_equal(a.vertex_coords, b.vertex_coords)
            assert [(f.left, f.right, f.orientation) for f in a.internal_faces] == \
                   [(f.left, f.right, f.orientation) for f in b.internal_faces]
            assert [(f.left, f.patch_id) for f in a.boundary_faces] == \
                   [(f.left, f.patch_id) for f in b.boundary_faces]
            assert [c for _, c in a.remote_faces] == [c for _, c in b.remote_faces]
            assert a.patch_names == b.patch_names
            if a.vertex_alias is None:
                assert b.vertex_alias is None
            else:
                assert np.array_equal(a.vertex_alias, b.vertex_alias)
        return shards, back

    def test_single_rank_equals_serial(self, tmp_path, rng):
        mesh = box_mesh_3d(3, 2, 2)
        shards, back = self.roundtrip(mesh, 1, tmp_path, rng)
        assert len(back[0].cells) == 12
        assert back[0].num_global_cells == 12

    def test_reassembly_covers_serial_mesh(self, tmp_path, rng):
        mesh = box_mesh_2d(6, 5, periodic=(True, False), perturb=0.1, seed=3)
        shards, back = self.roundtrip(mesh, 4, tmp_path, rng)
        gids = sorted(c.id for sh in back for c in sh.cells)
        assert gids == list(range(30))
        verts = {}
        for sh in back:
            for vid, xy in zip(sh.vertex_ids, sh.vertex_coords):
                verts[int(vid)] = xy
        for vid, xy in verts.items():
            assert np.array_equal(xy, mesh.vertices[vid])

    def test_corrupt_magic_rejected_before_payload(self, tmp_path, rng):
        mesh = box_mesh_3d(2, 2, 1)
        shards = prepare_shards(mesh, np.zeros(4, np.int64), 1)
        path = str(tmp_path / "x.zfrm")
        write_shard(shards[0], path)
        raw = bytearray(open(path, "rb").read())
        raw[:4] = b"NOPE"
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_shard(path)

    def test_truncated_payload_rejected(self, tmp_path, rng):
        mesh = box_mesh_3d(2, 2, 1)
        shards = prepare_shards(mesh, np.zeros(4, np.int64), 1)
        path = str(tmp_path / "t.zfrm")
        write_shard(shards[0], path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:len(raw) // 2])
        with pytest.raises(FormatError):
            read_shard(path)

    def test_version_mismatch(self, tmp_path):
        mesh = box_mesh_3d(1, 1, 1)
        shards = prepare_shards(mesh, np.zeros(1, np.int64), 1)
        path = str(tmp_path / "v.zfrm")
        write_shard(shards[0], path)
        raw = bytearray(open(path, "rb").read())
        raw[4:8] = (99).to_bytes(4, "little")
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            read_shard(path)

    def test_missing_index(self, tmp_path):
        with pytest.raises(FormatError):
            read_shards(str(tmp_path))

    def test_solver_runs_identically_from_file(self, tmp_path, rng, gas):
        mesh = vortex_mesh(6)
        shards = prepare_shards(mesh, np.zeros(36, np.int64), 1)
        outdir = str(tmp_path / "s")
        write_shards(shards, outdir)
        back = read_shards(outdir)
        a = SolverRank(shards[0], gas, SolverOptions(p=2, deterministic=True))
        b = SolverRank(back[0], gas, SolverOptions(p=2, deterministic=True))
        a.set_state(lambda x: vortex_state(x, 0.0, gas))
        b.set_state(lambda x: vortex_state(x, 0.0, gas))
        assert np.array_equal(a.compute_residual(a.Q_upts),
                              b.compute_residual(b.Q_upts))


class TestConfig:
    def test_parse_and_accessors(self):
        cfg = RunConfig.parse("""
            # a comment
            solver.p = 4
            solver.cfl = 0.7
            gas.gamma = 1.4   # trailing comment
            bc.inlet.kind = riemann-inflow
            bc.inlet.p0 = 2.5
            bc.inlet.t0 = 1.1
            bc.inlet.direction = 1 0
        """)
        assert cfg.get_int("solver.p", 0) == 4
        assert cfg.get_float("solver.cfl", 0) == 0.7
        specs = cfg.boundary_specs()
        assert specs["inlet"].kind == "riemann-inflow"
        assert np.allclose(specs["inlet"].direction, [1, 0])

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("solver.warp_drive = on\n")

    def test_round_trip_identical_maps(self):
        text = ("solver.p = 3\nsolver.cfl = 0.5\ngas.gamma = 1.4\n"
                "bc.w.kind = slip\nsponge.out.axis = 0\nsponge.out.lo = 1\n"
                "sponge.out.hi = 2\nsponge.out.width = 0.5\n"
                "sponge.out.strength = 3\nsponge.out.ref = 1 0 0 2.5\n")
        cfg = RunConfig.parse(text)
        again = RunConfig.parse(cfg.serialize())
        assert cfg.values == again.values
        assert RunConfig.parse(again.serialize()).values == cfg.values

    def test_defaults_logged_not_fatal(self, caplog):
        import logging

        cfg = RunConfig.parse("solver.p = 2\n")
        with caplog.at_level(logging.INFO, logger="fluxrecon.io.config"):
            assert cfg.get_float("solver.cfl", 1.0) == 1.0
        assert any("defaulted" in r.message for r in caplog.records)

    def test_missing_required(self):
        cfg = RunConfig.parse("bc.inlet.kind = riemann-inflow\n")
        with pytest.raises(ConfigError):
            cfg.boundary_specs()

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("solver.p 3\n")

    def test_periodic_pairs(self):
        cfg = RunConfig.parse(
            "bc.xmin.kind = periodic\nbc.xmin.partner = xmax\n"
            "bc.xmin.translation = -1 0\n"
            "bc.xmax.kind = periodic\nbc.xmax.partner = xmin\n"
            "bc.xmax.translation = 1 0\n")
        pairs = cfg.periodic_pairs()
        assert len(pairs) == 1
        a, b, t = pairs[0]
        assert {a, b} == {"xmin", "xmax"}

    def test_env_forces_deterministic(self, monkeypatch):
        cfg = RunConfig.parse("solver.p = 1\n")
        monkeypatch.setenv("ZFR_DETERMINISTIC", "1")
        assert cfg.solver_options().deterministic is True
        monkeypatch.delenv("ZFR_DETERMINISTIC")
        assert cfg.solver_options().deterministic is False

    def test_sponges(self):
        cfg = RunConfig.parse(
            "sponge.out.axis = 0\nsponge.out.lo = 1\nsponge.out.hi = 2\n"
            "sponge.out.width = 0.5\nsponge.out.strength = 3\n"
            "sponge.out.ref = 1 0 0 2.5\nsponge.out.side = hi\n")
        zones = cfg.sponge_zones()
        assert len(zones) == 1 and zones[0].from_side == "hi"


class TestSolutionOutput:
    def build(self, gas):
        mesh = vortex_mesh(4)
        shards = prepare_shards(mesh, np.zeros(16, np.int64), 1)
        s = SolverRank(shards[0], gas, SolverOptions(p=3))
        s.set_state(lambda x: vortex_state(x, 0.0, gas))
        s.compute_residual(s.Q_upts)
        return s

    def test_vtk_uniform_parses(self, tmp_path, gas):
        mesh = vortex_mesh(4)
        shards = prepare_shards(mesh, np.zeros(16, np.int64), 1)
        s = SolverRank(shards[0], gas, SolverOptions(p=2))
        from fluxrecon.physics import conserved

        s.set_state(lambda x: conserved(np.ones(x.shape[0]),
                                        np.zeros((x.shape[0], 2)),
                                        np.ones(x.shape[0]), gas))
        path = str(tmp_path / "u.vtk")
        solution_io.write_vtk(path, s, order=2, q_criterion=True)
        lines = open(path).read().splitlines()
        assert lines[0].startswith("# vtk DataFile")
        npts = int([l for l in lines if l.startswith("POINTS")][0].split()[1])
        assert npts == 16 * 9
        start = lines.index("SCALARS rho double") + 2
        rho = np.array([float(v) for v in lines[start:start + npts]])
        assert np.allclose(rho, 1.0, atol=1e-12)
        assert any(l.startswith("SCALARS qcriterion") for l in lines)

    def test_vtk_vortex_matches_in_memory_error(self, tmp_path, gas):
        s = self.build(gas)
        path = str(tmp_path / "v.vtk")
        solution_io.write_vtk(path, s, order=3)
        from fluxrecon.physics import pressure

        coords, vals = s.sample_solution(order=3)
        p_mem = pressure(vals, 2, gas)
        exact = vortex_state(coords.reshape(-1, 2), 0.0, gas)
        p_exact = pressure(exact, 2, gas)
        err_mem = np.abs(p_mem.reshape(-1) - p_exact).max()
        lines = open(path).read().splitlines()
        npts = int([l for l in lines if l.startswith("POINTS")][0].split()[1])
        start = lines.index("SCALARS p double") + 2
        p_file = np.array([float(v) for v in lines[start:start + npts]])
        err_file = np.abs(p_file - p_exact).max()
        assert abs(err_file - err_mem) < 1e-12

    def test_surface_csv_isentropic_mach_identity(self, tmp_path):
        gash = GasModel(gamma=1.4, R=287.0)
        mesh = box_mesh_2d(4, 2, lengths=(2.0, 1.0))
        shards = prepare_shards(mesh, np.zeros(8, np.int64), 1)
        from fluxrecon.physics import BoundarySpec, conserved

        bcs = {n: BoundarySpec(n, "slip") for n in ("xmin", "xmax", "ymin", "ymax")}
        s = SolverRank(shards[0], gash, SolverOptions(p=2), boundary_specs=bcs)
        p0 = 1.4e5

        def init(x):
            n = x.shape[0]
            p = 1e5 * (1 + 0.1 * x[:, 0] / 2.0)
            rho = p / (287.0 * 300.0)
            return conserved(rho, np.zeros((n, 2)), p, gash)

        s.set_state(init)
        s.compute_residual(s.Q_upts)
        path = str(tmp_path / "s.csv")
        solution_io.write_surface_csv(path, s, "ymin", p0_ref=p0)
        import csv as csvmod

        rows = list(csvmod.DictReader(open(path)))
        assert rows
        for row in rows:
            p = float(row["p"])
            m = float(row["mach_is"])
            expect = np.sqrt(((p0 / p) ** (0.4 / 1.4) - 1) * 2 / 0.4)
            assert abs(m - expect) < 1e-9

    def test_running_mean(self, rng):
        from fluxrecon.io.solution import RunningMean

        acc = RunningMean()
        data = rng.standard_normal((5, 3, 4))
        for row in data:
            acc.update(row)
        assert acc.count == 5
        assert np.allclose(acc.mean, data.mean(axis=0), atol=1e-13)
