"""Weighted graph partitioner: deterministic greedy growing plus a
boundary-refinement pass.  Stands in for an external graph partitioner at
desk scale."""

from __future__ import annotations

import random
from typing import Optional

import numpy as np

from ..errors import MeshError
from ..mesh_core import DualGraph


def partition_mesh(graph: DualGraph, nparts: int, seed: int = 0) -> np.ndarray:
    """Cell -> part assignment, balanced by per-cell weights.

    Grows connected parts from seeded frontiers, then moves boundary cells
    to trim the weighted imbalance.  Deterministic for a given seed.
    """
    cells = sorted(graph.adjacency)
    ncells = len(cells)
    if nparts < 1:
        raise MeshError("nparts must be >= 1")
    if nparts > ncells:
        raise MeshError(f"nparts={nparts} exceeds {ncells} cells")
    if any(graph.weights[c] <= 0 for c in cells):
        raise MeshError("partition weights must be positive")
    index = {c: i for i, c in enumerate(cells)}
    w = np.array([graph.weights[c] for c in cells], dtype=np.int64)
    total = int(w.sum())

    rng = random.Random(seed)
    part = np.full(ncells, -1, dtype=np.int64)
    unassigned = set(range(ncells))
    remaining_w = total

    for p in range(nparts):
        target = remaining_w / (nparts - p)
        seed_cell = min(unassigned)
        frontier = [seed_cell]
        load = 0
        while frontier and (load + w[frontier[0]] <= target or load == 0):
            cur = frontier.pop(0)
            if part[cur] != -1:
                continue
            part[cur] = p
            load += int(w[cur])
            unassigned.discard(cur)
            for nb in graph.adjacency[cells[cur]]:
                ni = index[nb]
                if part[ni] == -1 and ni not in frontier:
                    frontier.append(ni)
            if load >= target and p < nparts - 1:
                break
        remaining_w -= load
        if p == nparts - 1 and unassigned:
            for i in sorted(unassigned):
                part[i] = p
            unassigned.clear()

    # ensure nonempty parts: steal the heaviest movable cell for empty ones
    loads = np.zeros(nparts, dtype=np.int64)
    for i in range(ncells):
        loads[part[i]] += w[i]
    for p in range(nparts):
        if loads[p] == 0:
            donor = int(np.argmax(loads))
            movable = [i for i in range(ncells) if part[i] == donor]
            pick = movable[rng.randrange(len(movable))]
            part[pick] = p
            loads[donor] -= w[pick]
            loads[p] += w[pick]

    _refine(graph, cells, index, w, part, loads, nparts, rng)
    return part


def _refine(graph, cells, index, w, part, loads, nparts, rng, sweeps: int = 8):
    """Greedy boundary moves lowering max(load)/mean(load)."""
    mean = loads.sum() / nparts
    for _ in range(sweeps):
        worst = int(np.argmax(loads))
        if loads[worst] / mean <= 1.05:
            return
        moved = False
        boundary = []
        for i in range(len(cells)):
            if part[i] != worst:
                continue
            neigh_parts = {int(part[index[nb]]) for nb in graph.adjacency[cells[i]]}
            neigh_parts.discard(worst)
            for q in sorted(neigh_parts):
                boundary.append((i, q))
        rng.shuffle(boundary)
        boundary.sort(key=lambda iq: loads[iq[1]])
        for i, q in boundary:
            if loads[worst] - w[i] < w[i]:
                continue  # never empty a part
            if loads[q] + w[i] < loads[worst]:
                part[i] = q
                loads[worst] -= w[i]
                loads[q] += w[i]
                moved = True
                break
        if not moved:
            return
