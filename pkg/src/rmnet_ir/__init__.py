"""Graph IR and rewrite passes that turn residual networks into equivalent plain ones."""
from .analyze import count_flops, count_params, recalibrate_bn, verify_equivalence
from .builders import ArchConfig, build
from .graph import GraphBuilder, NetGraph, forward, infer_shapes
from .prune import PruneConfig, apply_masks, compute_masks, prune_pipeline
from .reparam import finalize_mobilenet, fuse_all_bn, reparam_repblock
from .rm import RmOptions, convert_graph
from .serialize import load, save

__all__ = [
    "ArchConfig", "GraphBuilder", "NetGraph", "PruneConfig", "RmOptions", "apply_masks", "build", "compute_masks",
    "convert_graph", "count_flops", "count_params", "finalize_mobilenet", "forward", "fuse_all_bn", "infer_shapes",
    "load", "prune_pipeline", "recalibrate_bn", "reparam_repblock", "save", "verify_equivalence",
]
__version__ = "0.1.0"
