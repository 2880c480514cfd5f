"""Linear re-parameterizations: BN folding, kernel padding, branch merging and
pointwise-pair fusion.

New parameters are computed and kept in float64 so that the 64-bit
verification mode sees the algebra exactly; float32 execution and saving
round them once.
"""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .graph import ACT, BN, CONV, REP_BLOCK, GraphError, LayerSpec, NetGraph, block_boundary, replace_block
from .tensor import BNParams, ConvParams, ShapeError

log = logging.getLogger(__name__)


class PatternError(GraphError):
    """A block or layer sequence does not match what a pass requires."""


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def dirac_weight(channels: int, k: int, group_size: int = 1) -> np.ndarray:
    """(channels, group_size, k, k) identity filters for `channels` grouped channels.

    With group_size == channels this is the dense Dirac tensor; with
    group_size == 1 it is the depthwise one.
    """
    if k % 2 != 1:
        raise ShapeError(f"Dirac filters need an odd kernel, got {k}")
    if channels % group_size:
        raise ShapeError(f"{channels} channels do not split into groups of {group_size}")
    w = np.zeros((channels, group_size, k, k), np.float64)
    w[np.arange(channels), np.arange(channels) % group_size, k // 2, k // 2] = 1.0
    return w


def fuse_conv_bn(conv: ConvParams, bn: BNParams) -> ConvParams:
    if bn.channels != conv.out_ch:
        raise ShapeError(f"BN has {bn.channels} channels, conv produces {conv.out_ch}")
    scale = _f64(bn.gamma) / np.sqrt(_f64(bn.running_var) + bn.eps)
    w = _f64(conv.weight) * scale[:, None, None, None]
    b = (_f64(conv.bias_or_zeros()) - _f64(bn.running_mean)) * scale + _f64(bn.beta)
    return ConvParams(w, b, conv.stride, conv.padding, conv.groups)


def pad_1x1_to_3x3(conv: ConvParams) -> ConvParams:
    if conv.k != 1:
        raise ShapeError(f"expected a 1x1 kernel, got {conv.k}x{conv.k}")
    w = np.pad(conv.weight, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return ConvParams(w, conv.bias, conv.stride, conv.padding + 1, conv.groups)


def merge_parallel_branches(branches: Sequence[ConvParams], identity: bool = False) -> ConvParams:
    """One conv equal to the sum of parallel convs (plus the input when `identity`)."""
    if not branches:
        raise ShapeError("no branches to merge")
    ref = branches[0]
    if len(branches) == 1 and not identity:
        return ref
    for b in branches[1:]:
        if (b.weight.shape, b.stride, b.padding, b.groups) != (ref.weight.shape, ref.stride, ref.padding, ref.groups):
            raise ShapeError("branches differ in shape, stride, padding or groups")
    w = sum(_f64(b.weight) for b in branches)
    bias = sum(_f64(b.bias_or_zeros()) for b in branches)
    if identity:
        if ref.in_ch != ref.out_ch or ref.stride != 1 or ref.padding != ref.k // 2:
            raise ShapeError("identity branch needs in == out channels, stride 1 and same padding")
        w = w + dirac_weight(ref.out_ch, ref.k, ref.weight.shape[1])
    return ConvParams(w, bias, ref.stride, ref.padding, ref.groups)


def fuse_pointwise_pair(first: ConvParams, second: ConvParams) -> ConvParams:
    """second(first(x)) as one 1x1 conv: W = W2 W1, b = W2 b1 + b2."""
    for p in (first, second):
        if p.k != 1 or p.padding != 0:
            raise PatternError("pointwise fusion needs 1x1 convs without padding")
        if p.groups != 1:
            raise PatternError("pointwise fusion does not handle grouped convs")
    if second.in_ch != first.out_ch:
        raise ShapeError(f"{first.out_ch} channels feed a conv expecting {second.in_ch}")
    w1, w2 = _f64(first.weight)[:, :, 0, 0], _f64(second.weight)[:, :, 0, 0]
    w = (w2 @ w1)[:, :, None, None]
    b = w2 @ _f64(first.bias_or_zeros()) + _f64(second.bias_or_zeros())
    return ConvParams(w, b, first.stride * second.stride, 0, 1)


# ---------------------------------------------------------------- graph-level passes


def _sole_consumer(g: NetGraph, layer_id: str):
    cons = g.consumers(layer_id)
    return cons[0] if len(cons) == 1 else None


def fuse_all_bn(g: NetGraph) -> NetGraph:
    """Fold every BN that directly follows a single-consumer conv into that conv."""
    folded = {}
    drop = set()
    for l in g.layers:
        if l.kind != BN:
            continue
        src = g.layer(l.inputs[0])
        if src.kind == CONV and _sole_consumer(g, src.id) is l:
            folded[src.id] = fuse_conv_bn(src.params, l.params)
            drop.add(l.id)
    if not drop:
        return g
    rename = {l.id: g.layer(l.id).inputs[0] for l in g.layers if l.id in drop}
    layers = []
    for l in g.layers:
        if l.id in drop:
            continue
        ins = tuple(rename.get(i, i) for i in l.inputs)
        layers.append(LayerSpec(l.id, l.kind, ins, folded.get(l.id, l.params)))
    anns = [a for a in g.annotations if not drop & set(a.member_ids)]
    return g.evolve(layers=tuple(layers), annotations=tuple(anns))


def _bn_branch_as_conv(bn: BNParams, k: int) -> ConvParams:
    ident = ConvParams(dirac_weight(bn.channels, k, bn.channels), None, 1, k // 2, 1)
    return fuse_conv_bn(ident, bn)


def reparam_repblock(g: NetGraph, block) -> NetGraph:
    """Collapse a three-branch RepBlock into a single 3x3 conv followed by its activation."""
    ann = g.annotation(block) if isinstance(block, str) else block
    if ann.kind != REP_BLOCK:
        raise PatternError(f"{ann.name} is a {ann.kind}, not a {REP_BLOCK}")
    r = ann.roles
    entry, _ = block_boundary(g, ann)
    try:
        conv3, bn3 = g.layer(r["conv3"]).params, g.layer(r["bn3"]).params
        conv1, bn1 = g.layer(r["conv1"]).params, g.layer(r["bn1"]).params
        act = g.layer(r["act"])
    except KeyError as e:
        raise PatternError(f"RepBlock {ann.name} lacks role {e}") from None
    if act.kind != ACT:
        raise PatternError(f"RepBlock {ann.name}: 'act' role is not an activation")
    branches = [fuse_conv_bn(conv3, bn3)]
    one = fuse_conv_bn(conv1, bn1)
    branches.append(pad_1x1_to_3x3(one) if one.k == 1 else one)
    if "bn_id" in r:
        bn_id = g.layer(r["bn_id"]).params
        branches.append(_bn_branch_as_conv(bn_id, conv3.k))
    merged = merge_parallel_branches(branches)
    conv_id = f"{ann.name}.rep"
    new = [LayerSpec(conv_id, CONV, (entry,), merged), LayerSpec(f"{ann.name}.rep_act", ACT, (conv_id,), act.params)]
    return replace_block(g, ann, new, new[-1].id)


def reparam_all(g: NetGraph) -> NetGraph:
    for ann in [a for a in g.annotations if a.kind == REP_BLOCK]:
        g = reparam_repblock(g, ann.name)
    return g


def _pointwise(l: LayerSpec) -> bool:
    p = l.params
    return l.kind == CONV and p.k == 1 and p.groups == 1 and p.padding == 0


def fuse_pointwise_in_graph(g: NetGraph, first_id: str, second_id: str) -> NetGraph:
    first, second = g.layer(first_id), g.layer(second_id)
    if second.inputs != (first_id,):
        between = second.inputs[0] if second.inputs else None
        raise PatternError(f"{second_id} is not fed directly by {first_id} (found {between!r})", second_id)
    if _sole_consumer(g, first_id) is not second:
        raise PatternError(f"{first_id} has other consumers", first_id)
    fused = fuse_pointwise_pair(first.params, second.params)
    layers = []
    for l in g.layers:
        if l.id == first_id:
            continue
        if l.id == second_id:
            l = LayerSpec(second_id, CONV, first.inputs, fused)
        layers.append(l)
    return g.evolve(layers=tuple(layers))


def finalize_mobilenet(g: NetGraph) -> NetGraph:
    """Fold BNs, then fuse adjacent unactivated pointwise convs until none remain."""
    if not g.is_plain():
        raise PatternError("finalize_mobilenet expects a plain graph; run RM conversion first")
    g = fuse_all_bn(g)
    fused = 0
    while True:
        pair = None
        for l in g.layers:
            if _pointwise(l) and l.inputs:
                src = g.layer(l.inputs[0])
                if _pointwise(src) and _sole_consumer(g, src.id) is l:
                    pair = (src.id, l.id)
                    break
        if pair is None:
            break
        g = fuse_pointwise_in_graph(g, *pair)
        fused += 1
    log.info("finalize_mobilenet fused %d pointwise pairs", fused)
    return g
