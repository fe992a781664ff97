"""svcodec: a neural codec for VDB-style sparse voxel grids.

Encodes hierarchical sparse grids (narrow-band SDFs and density fields) into
compact per-subdomain coordinate networks plus an explicit upper tree, and
decodes them back either as a full grid or as a random-access hybrid.
"""

from .config import TrainConfig, format_config, parse_config
from .container import (
    NeuralGridContainer,
    read_container,
    serialize_container,
    deserialize_container,
    write_container,
)
from .decoder import HybridGrid, decode_full, make_hybrid, topology_equal
from .encoder import encode, encode_sequence
from .grid import Accessor, VdbGrid, build_grid, coord_to_keys
from .gridfile import read_grid, write_grid
from .metrics import compression_ratio, extract_surface_samples, iou, mcd, rmse
from .partition import SubdomainLayout, assign_points, blend, decompose, gate_weight
from .procgen import (
    FbmSpec,
    SphereSpec,
    gen_fbm_density,
    gen_moving_sphere_sequence,
    gen_sphere_sdf,
    gen_torus_sdf,
)

__version__ = "0.1.0"

__all__ = [
    "Accessor",
    "FbmSpec",
    "HybridGrid",
    "NeuralGridContainer",
    "SphereSpec",
    "SubdomainLayout",
    "TrainConfig",
    "VdbGrid",
    "assign_points",
    "blend",
    "build_grid",
    "compression_ratio",
    "coord_to_keys",
    "decode_full",
    "decompose",
    "deserialize_container",
    "encode",
    "encode_sequence",
    "extract_surface_samples",
    "format_config",
    "gate_weight",
    "gen_fbm_density",
    "gen_moving_sphere_sequence",
    "gen_sphere_sdf",
    "gen_torus_sdf",
    "iou",
    "make_hybrid",
    "mcd",
    "parse_config",
    "read_container",
    "read_grid",
    "rmse",
    "serialize_container",
    "topology_equal",
    "write_container",
    "write_grid",
]
