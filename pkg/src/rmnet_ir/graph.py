"""Network graph IR: layers, block annotations, shape inference and execution."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ActParams, BNParams, ConvParams, DenseParams, ShapeError

INPUT = "Input"
CONV = "Conv"
BN = "BN"
ACT = "Act"
ADD = "Add"
CONCAT = "Concat"
POOL = "GlobalPool"
DENSE = "Dense"
OUTPUT = "Output"

LAYER_KINDS = (INPUT, CONV, BN, ACT, ADD, CONCAT, POOL, DENSE, OUTPUT)
PARAM_TYPES = {CONV: ConvParams, BN: BNParams, ACT: ActParams, DENSE: DenseParams}

BASIC_BLOCK = "BasicResBlock"
DOWNSAMPLE_BLOCK = "DownsampleResBlock"
INVERTED_RESIDUAL = "InvertedResidualBlock"
REP_BLOCK = "RepBlock"
RESERVING_PAIR = "ReservingRepPair"
BLOCK_KINDS = (BASIC_BLOCK, DOWNSAMPLE_BLOCK, INVERTED_RESIDUAL, REP_BLOCK, RESERVING_PAIR)


class GraphError(ValueError):
    """Structural problem with a graph; `layer_id` names the offending layer."""

    def __init__(self, message: str, layer_id: Optional[str] = None):
        self.layer_id = layer_id
        super().__init__(f"{layer_id}: {message}" if layer_id else message)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    id: str
    kind: str
    inputs: Tuple[str, ...] = ()
    params: object = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}", self.id)
        want = PARAM_TYPES.get(self.kind)
        if want is not None and not isinstance(self.params, want):
            raise GraphError(f"{self.kind} layer needs {want.__name__}", self.id)
        if want is None and self.params is not None:
            raise GraphError(f"{self.kind} layer takes no params", self.id)
        arity = len(self.inputs)
        if self.kind == INPUT:
            ok = arity == 0
        elif self.kind == ADD:
            ok = arity == 2
        elif self.kind == CONCAT:
            ok = arity >= 2
        else:
            ok = arity == 1
        if not ok:
            raise GraphError(f"{self.kind} layer cannot take {arity} inputs", self.id)


@dataclass(frozen=True, eq=False)
class BlockAnnotation:
    """Marks a rewrite target. `attrs["roles"]` maps role names to layer ids."""

    kind: str
    name: str
    member_ids: Tuple[str, ...]
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise GraphError(f"unknown block kind {self.kind!r}")
        object.__setattr__(self, "member_ids", tuple(self.member_ids))

    @property
    def roles(self) -> Dict[str, str]:
        return self.attrs.get("roles", {})


@dataclass(frozen=True, eq=False)
class NetGraph:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]
    annotations: Tuple[BlockAnnotation, ...] = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "_index", {l.id: i for i, l in enumerate(self.layers)})
        self._validate()

    def _validate(self):
        if len(self._index) != len(self.layers):
            seen = set()
            for l in self.layers:
                if l.id in seen:
                    raise GraphError("duplicate layer id", l.id)
                seen.add(l.id)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise GraphError(f"bad input_shape {self.input_shape}")
        kinds = [l.kind for l in self.layers]
        if kinds.count(INPUT) != 1 or kinds.count(OUTPUT) != 1:
            raise GraphError("graph needs exactly one Input and one Output layer")
        for pos, l in enumerate(self.layers):
            for src in l.inputs:
                j = self._index.get(src)
                if j is None:
                    raise GraphError(f"references missing layer {src!r}", l.id)
                if j >= pos:
                    raise GraphError(f"input {src!r} does not precede it", l.id)
        for ann in self.annotations:
            for m in ann.member_ids:
                if m not in self._index:
                    raise GraphError(f"annotation {ann.name} references missing layer {m!r}")

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._index

    def layer(self, layer_id: str) -> LayerSpec:
        try:
            return self.layers[self._index[layer_id]]
        except KeyError:
            raise GraphError("no such layer", layer_id) from None

    def position(self, layer_id: str) -> int:
        return self._index[layer_id]

    @property
    def input_id(self) -> str:
        return next(l.id for l in self.layers if l.kind == INPUT)

    @property
    def output_id(self) -> str:
        return next(l.id for l in self.layers if l.kind == OUTPUT)

    def consumers(self, layer_id: str) -> List[LayerSpec]:
        return [l for l in self.layers if layer_id in l.inputs]

    def annotation(self, name: str) -> BlockAnnotation:
        for a in self.annotations:
            if a.name == name:
                return a
        raise GraphError(f"no annotation named {name!r}")

    def is_plain(self) -> bool:
        return not any(l.kind in (ADD, CONCAT) for l in self.layers)

    def evolve(self, **changes) -> "NetGraph":
        return replace(self, **changes)


def block_boundary(g: NetGraph, ann: BlockAnnotation) -> Tuple[str, str]:
    """Return (entry, exit): the outside layer feeding the block and its last member.

    Raises GraphError unless the members form a single-entry single-exit region.
    """
    members = set(ann.member_ids)
    entries = {src for m in ann.member_ids for src in g.layer(m).inputs if src not in members}
    exits = [m for m in ann.member_ids if any(c.id not in members for c in g.consumers(m))]
    if len(entries) != 1 or len(exits) != 1:
        raise GraphError(f"block {ann.name} is not single-entry/single-exit ({entries}, {exits})")
    return entries.pop(), exits[0]


def infer_shapes(g: NetGraph) -> Dict[str, Tuple[int, int, int]]:
    """Map every layer id to its (c, h, w) output shape."""
    shapes: Dict[str, Tuple[int, int, int]] = {}
    for l in g.layers:
        ins = [shapes[i] for i in l.inputs]
        try:
            shapes[l.id] = _layer_shape(l, ins, g.input_shape)
        except (ShapeError, ValueError) as e:
            raise GraphError(str(e), l.id) from None
    return shapes


def _layer_shape(l: LayerSpec, ins, input_shape):
    if l.kind == INPUT:
        return tuple(input_shape)
    if l.kind == CONV:
        p: ConvParams = l.params
        c, h, w = ins[0]
        if c != p.in_ch:
            raise ShapeError(f"conv expects {p.in_ch} input channels, got {c}")
        oh, ow = (T.conv_out_size(d, p.k, p.stride, p.padding) for d in (h, w))
        if oh < 1 or ow < 1:
            raise ShapeError("conv output would be empty")
        return (p.out_ch, oh, ow)
    if l.kind == BN:
        if ins[0][0] != l.params.channels:
            raise ShapeError(f"BN has {l.params.channels} channels, input has {ins[0][0]}")
        return ins[0]
    if l.kind == ACT:
        if l.params.kind == T.PRELU and l.params.slopes.shape[0] != ins[0][0]:
            raise ShapeError("PReLU slope count does not match channels")
        return ins[0]
    if l.kind == ADD:
        if ins[0] != ins[1]:
            raise ShapeError(f"add shape mismatch {ins[0]} vs {ins[1]}")
        return ins[0]
    if l.kind == CONCAT:
        if len({s[1:] for s in ins}) != 1:
            raise ShapeError(f"concat spatial mismatch {ins}")
        return (sum(s[0] for s in ins),) + ins[0][1:]
    if l.kind == POOL:
        return (ins[0][0], 1, 1)
    if l.kind == DENSE:
        feats = int(np.prod(ins[0]))
        if feats != l.params.weight.shape[1]:
            raise ShapeError(f"dense expects {l.params.weight.shape[1]} features, got {feats}")
        return (l.params.weight.shape[0], 1, 1)
    return ins[0]  # OUTPUT


def run_layer(l: LayerSpec, args: Sequence[np.ndarray], sequential: bool = False) -> np.ndarray:
    if l.kind == CONV:
        return T.conv2d(args[0], l.params, sequential)
    if l.kind == BN:
        return T.batchnorm_infer(args[0], l.params)
    if l.kind == ACT:
        return T.activation(args[0], l.params)
    if l.kind == ADD:
        return T.add(args[0], args[1])
    if l.kind == CONCAT:
        return T.concat_channels(*args)
    if l.kind == POOL:
        return T.global_avg_pool(args[0])
    if l.kind == DENSE:
        return T.dense(args[0], l.params, sequential)
    return args[0]


def forward(g: NetGraph, x, dtype=np.float32, keep_all: bool = False, sequential: bool = False):
    """Execute the graph in layer order.

    With ``keep_all`` the activations of every layer are returned as a dict.
    Intermediate results are dropped as soon as no later layer needs them.
    ``sequential`` selects the fixed-order accumulation kernels (see conv2d).
    """
    x = T.tensor4(x, dtype=dtype)
    if tuple(x.shape[1:]) != g.input_shape:
        raise GraphError(f"input shape {x.shape[1:]} != {g.input_shape}", g.input_id)
    last_use: Dict[str, int] = {}
    for pos, l in enumerate(g.layers):
        for src in l.inputs:
            last_use[src] = pos
    acts: Dict[str, np.ndarray] = {}
    for pos, l in enumerate(g.layers):
        if l.kind == INPUT:
            acts[l.id] = x
            continue
        try:
            acts[l.id] = run_layer(l, [acts[i] for i in l.inputs], sequential)
        except ShapeError as e:
            raise GraphError(str(e), l.id) from None
        if not keep_all:
            for src in set(l.inputs):
                if last_use[src] == pos:
                    del acts[src]
    return acts if keep_all else acts[g.output_id]


class GraphBuilder:
    """Incremental construction helper used by builders and passes."""

    def __init__(self, input_shape, input_id: str = "input"):
        self.input_shape = tuple(input_shape)
        self.layers: List[LayerSpec] = [LayerSpec(input_id, INPUT)]
        self.annotations: List[BlockAnnotation] = []
        self.last = input_id

    def add(self, id: str, kind: str, inputs=None, params=None) -> str:
        if inputs is None:
            inputs = (self.last,)
        elif isinstance(inputs, str):
            inputs = (inputs,)
        self.layers.append(LayerSpec(id, kind, tuple(inputs), params))
        self.last = id
        return id

    def annotate(self, kind: str, name: str, members: Iterable[str], **attrs) -> None:
        self.annotations.append(BlockAnnotation(kind, name, tuple(members), attrs))

    def build(self, metadata=None) -> NetGraph:
        if self.layers[-1].kind != OUTPUT:
            self.add("output", OUTPUT)
        return NetGraph(tuple(self.layers), self.input_shape, tuple(self.annotations), dict(metadata or {}))


def replace_block(
    g: NetGraph,
    ann: BlockAnnotation,
    new_layers: Sequence[LayerSpec],
    new_exit: str,
    new_annotations: Sequence[BlockAnnotation] = (),
) -> NetGraph:
    """Swap the members of `ann` for `new_layers`, rewiring the old exit to `new_exit`."""
    _, old_exit = block_boundary(g, ann)
    members = set(ann.member_ids)
    first = min(g.position(m) for m in members)
    out: List[LayerSpec] = []
    for pos, l in enumerate(g.layers):
        if pos == first:
            out.extend(new_layers)
        if l.id in members:
            continue
        if old_exit in l.inputs:
            l = replace(l, inputs=tuple(new_exit if i == old_exit else i for i in l.inputs))
        out.append(l)
    anns = [a for a in g.annotations if a.name != ann.name] + list(new_annotations)
    return g.evolve(layers=tuple(out), annotations=tuple(anns))


def topo_sort(layers: Sequence[LayerSpec]) -> List[LayerSpec]:
    """Stable topological order (used after passes that insert layers out of order)."""
    by_id = {l.id: l for l in layers}
    done, order = set(), []

    def visit(l, stack=()):
        if l.id in done:
            return
        if l.id in stack:
            raise GraphError("cycle detected", l.id)
        for i in l.inputs:
            if i not in by_id:
                raise GraphError(f"references missing layer {i!r}", l.id)
            visit(by_id[i], stack + (l.id,))
        done.add(l.id)
        order.append(l)

    for l in layers:
        visit(l)
    return order
