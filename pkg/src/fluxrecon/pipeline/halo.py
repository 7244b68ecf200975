"""Halo plan: which flux-point values go to which rank, in which order.

Both sides of a remote coupling enumerate their shared faces by the
canonical (owner gid, local face) pair and pack values in canonical flux
point order, so a message unpacks positionally with no further
permutation; the pack and unpack schedules are mutually inverse by the
coupling involution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np


@dataclass
class HaloPlan:
    """Pack/unpack schedule for one rank's remote interfaces.

    ``pack`` holds, per neighbor, (element index array, point-slot array)
    selecting this rank's face values in canonical order; ``rows`` maps the
    received values into the rank's ghost arrays (remote-face list order).
    """

    neighbors: List[int]
    pack: Dict[int, tuple]
    rows: Dict[int, np.ndarray]
    num_ghost_points: int

    def empty(self) -> bool:
        return not self.neighbors
