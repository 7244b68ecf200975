from .gmsh import import_gmsh_ascii, write_gmsh_ascii
from .shards import read_shards, write_shards
from .config import RunConfig
from . import solution

__all__ = [
    "import_gmsh_ascii",
    "write_gmsh_ascii",
    "read_shards",
    "write_shards",
    "RunConfig",
    "solution",
]
