"""Reserve-and-merge rewrites that remove residual connections.

Reserving: extra Dirac filters copy the block input through the block's first
conv, an identity BN, and an activation that leaves the copied values alone.
Merging: the block's last conv gets extra Dirac input columns (or the
projection-skip weights) that add the reserved copy back, so the residual Add
disappears while every output stays the same.

Reserved channels always go after the original ones, and in grouped convs they
form additional whole groups.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .graph import (
    ACT, ADD, BASIC_BLOCK, BN, CONV, DOWNSAMPLE_BLOCK, INVERTED_RESIDUAL, POOL, REP_BLOCK, RESERVING_PAIR,
    BlockAnnotation, GraphError, LayerSpec, NetGraph, block_boundary, replace_block,
)
from .reparam import PatternError, dirac_weight, fuse_conv_bn, pad_1x1_to_3x3, reparam_repblock
from .tensor import DEFAULT_EPS, PRELU, RELU, ActParams, BNParams, ConvParams

log = logging.getLogger(__name__)

TYPE1 = "type1"
TYPE2 = "type2"
RELU_IF_NONNEG = "relu-if-nonneg"
FORCE_PRELU = "prelu"
STRICT_RELU = "relu"


@dataclass(frozen=True)
class RmOptions:
    downsample_method: str = TYPE2
    # relu-if-nonneg: keep ReLU where the reserved values are provably >= 0, PReLU otherwise.
    # prelu: always PReLU. relu: ReLU only, and refuse blocks whose input may be negative.
    activation_policy: str = RELU_IF_NONNEG

    def __post_init__(self):
        if self.downsample_method not in (TYPE1, TYPE2):
            raise ValueError(f"unknown downsample method {self.downsample_method!r}")
        if self.activation_policy not in (RELU_IF_NONNEG, FORCE_PRELU, STRICT_RELU):
            raise ValueError(f"unknown activation policy {self.activation_policy!r}")


# ---------------------------------------------------------------- building blocks


def dirac_filters(channels: int, k: int) -> np.ndarray:
    """Dense (channels, channels, k, k) filters copying each input channel."""
    return dirac_weight(channels, k, channels).astype(np.float32)


def bn_identity_params(mean, var, eps: float = DEFAULT_EPS) -> BNParams:
    """BN parameters (gamma = sqrt(var + eps), beta = mean) that make the layer an identity."""
    mean = np.asarray(mean, np.float64).reshape(-1)
    var = np.asarray(var, np.float64).reshape(-1)
    if np.any(var < 0):
        raise ValueError("running variance must be non-negative")
    return BNParams(np.sqrt(var + eps), mean.copy(), mean, var, eps)


def _with_eps(bn: BNParams, eps: float) -> BNParams:
    # Same affine map expressed with another eps, so it can be concatenated.
    if bn.eps == eps:
        return bn
    var = np.asarray(bn.running_var, np.float64) + bn.eps - eps
    if np.any(var < 0):
        raise PatternError("cannot re-express BN with a larger eps")
    return BNParams(bn.gamma, bn.beta, bn.running_mean, var, eps)


def concat_bn(*parts: BNParams) -> BNParams:
    eps = parts[0].eps
    parts = [_with_eps(p, eps) for p in parts]
    cat = lambda f: np.concatenate([np.asarray(getattr(p, f), np.float64) for p in parts])
    return BNParams(cat("gamma"), cat("beta"), cat("running_mean"), cat("running_var"), eps)


def _reserve_bn(channels: int, eps: float) -> BNParams:
    return bn_identity_params(np.zeros(channels), np.ones(channels), eps)


def _slopes(act: ActParams, channels: int) -> np.ndarray:
    return np.zeros(channels) if act.kind == RELU else np.asarray(act.slopes, np.float64)


def _extend_act(act: ActParams, n_orig: int, n_reserved: int, use_prelu: bool) -> ActParams:
    if not use_prelu and act.kind == RELU:
        return act
    return ActParams(PRELU, np.concatenate([_slopes(act, n_orig), np.ones(n_reserved)]))


def _append_out(conv: ConvParams, w_extra: np.ndarray, groups_extra: int = 0) -> ConvParams:
    w = np.concatenate([np.asarray(conv.weight, np.float64), w_extra], axis=0)
    bias = None
    if conv.bias is not None:
        bias = np.concatenate([np.asarray(conv.bias, np.float64), np.zeros(w_extra.shape[0])])
    return ConvParams(w, bias, conv.stride, conv.padding, conv.groups + groups_extra)


def _append_in(conv: ConvParams, w_extra: np.ndarray, extra_bias=None) -> ConvParams:
    if conv.groups != 1:
        raise PatternError("merge conv must not be grouped")
    w = np.concatenate([np.asarray(conv.weight, np.float64), w_extra], axis=1)
    bias = np.asarray(conv.bias_or_zeros(), np.float64)
    if extra_bias is not None:
        bias = bias + extra_bias
    return ConvParams(w, bias, conv.stride, conv.padding, 1)


def is_nonnegative(g: NetGraph, layer_id: str) -> bool:
    """Conservative static check that a layer's output can never be negative."""
    l = g.layer(layer_id)
    if l.kind == ACT:
        return l.params.kind == RELU or bool(np.all(l.params.slopes == 0))
    if l.kind == POOL:
        return is_nonnegative(g, l.inputs[0])
    return False


def _use_prelu(g: NetGraph, entry: str, opts: RmOptions, name: str, signed: bool = False) -> bool:
    nonneg = is_nonnegative(g, entry) and not signed
    if opts.activation_policy == FORCE_PRELU:
        return True
    if nonneg:
        return False
    if opts.activation_policy == STRICT_RELU:
        raise PatternError(f"block {name}: input may be negative, ReLU cannot reserve it (use PReLU policy)")
    return True


def _roles(g: NetGraph, ann: BlockAnnotation, spec: Dict[str, str], optional=()) -> Dict[str, LayerSpec]:
    out = {}
    for role, kind in spec.items():
        lid = ann.roles.get(role)
        if lid is None:
            if role in optional:
                continue
            raise PatternError(f"block {ann.name} has no {role!r} layer")
        l = g.layer(lid)
        if l.kind != kind:
            raise PatternError(f"block {ann.name}: {role} is {l.kind}, expected {kind}", lid)
        out[role] = l
    return out


def _same_padding(conv: ConvParams, name: str):
    if conv.padding != conv.k // 2:
        raise PatternError(f"block {name}: conv padding {conv.padding} is not k//2")


def _layer(id, kind, src, params=None):
    return LayerSpec(id, kind, (src,), params)


# ---------------------------------------------------------------- basic block

_BASIC_ROLES = {"conv1": CONV, "bn1": BN, "act1": ACT, "conv2": CONV, "bn2": BN, "add": ADD, "act2": ACT}


def rm_basic_block(g: NetGraph, block, opts: RmOptions = RmOptions()) -> NetGraph:
    """Conv-BN-Act-Conv-BN + identity skip + Act  ->  plain Conv(C->M+C)-BN-Act-Conv(M+C->C)-BN-Act.

    An optional skip BN becomes the BN of the reserved channels, whose
    activation is then the identity (PReLU slope 1) since the skip may go negative.
    """
    ann = g.annotation(block) if isinstance(block, str) else block
    if ann.kind != BASIC_BLOCK:
        raise PatternError(f"{ann.name} is a {ann.kind}, not a {BASIC_BLOCK}")
    entry, _ = block_boundary(g, ann)
    L = _roles(g, ann, dict(_BASIC_ROLES, skip_bn=BN), optional=("skip_bn",))
    c1, c2 = L["conv1"].params, L["conv2"].params
    skip = L["skip_bn"].id if "skip_bn" in L else entry
    if "skip_bn" in L and L["skip_bn"].inputs != (entry,):
        raise PatternError(f"block {ann.name}: skip BN must read the block input")
    if set(L["add"].inputs) != {L["bn2"].id, skip} or L["act2"].inputs != (L["add"].id,):
        raise PatternError(f"block {ann.name}: layers do not form a residual block")
    C = c1.in_ch
    if c1.stride != 1 or c2.stride != 1 or c2.out_ch != C or c1.groups != 1:
        raise PatternError(f"block {ann.name}: identity skip needs stride 1, ungrouped, in == out channels")
    _same_padding(c1, ann.name)
    _same_padding(c2, ann.name)
    M = c1.out_ch
    bn1, bn2 = L["bn1"].params, L["bn2"].params
    signed = "skip_bn" in L
    prelu = _use_prelu(g, entry, opts, ann.name, signed=signed)

    conv1 = _append_out(c1, dirac_weight(C, c1.k, C))
    reserve = _with_eps(L["skip_bn"].params, bn1.eps) if signed else _reserve_bn(C, bn1.eps)
    new_bn1 = concat_bn(bn1, reserve)
    act1 = _extend_act(L["act1"].params, M, C, prelu)
    merged = _append_in(fuse_conv_bn(c2, bn2), dirac_weight(C, c2.k, C))
    new_bn2 = bn_identity_params(bn2.running_mean, bn2.running_var, bn2.eps)

    p = f"{ann.name}.rm"
    new = [
        _layer(f"{p}.conv1", CONV, entry, conv1),
        _layer(f"{p}.bn1", BN, f"{p}.conv1", new_bn1),
        _layer(f"{p}.act1", ACT, f"{p}.bn1", act1),
        _layer(f"{p}.conv2", CONV, f"{p}.act1", merged),
        _layer(f"{p}.bn2", BN, f"{p}.conv2", new_bn2),
        _layer(f"{p}.act2", ACT, f"{p}.bn2", L["act2"].params),
    ]
    return replace_block(g, ann, new, new[-1].id)


# ---------------------------------------------------------------- downsample block

_DS_ROLES = dict(_BASIC_ROLES, ds_conv=CONV, ds_bn=BN)


def rm_downsample(g: NetGraph, block, method: str = TYPE2, opts: Optional[RmOptions] = None) -> NetGraph:
    """Remove a projection skip (1x1 conv + BN, usually stride 2 with channel doubling).

    type1: the padded skip kernel joins conv1 as extra filters behind slope-1
    PReLU channels and conv2 merges them with Dirac columns (C -> 4C -> 2C).
    type2: conv1 reserves the input with strided Dirac filters and conv2 takes
    the zero-padded skip kernel as extra input columns (C -> 3C -> 2C).
    """
    opts = opts or RmOptions(downsample_method=method)
    ann = g.annotation(block) if isinstance(block, str) else block
    if ann.kind != DOWNSAMPLE_BLOCK:
        raise PatternError(f"{ann.name} is a {ann.kind}, not a {DOWNSAMPLE_BLOCK}")
    entry, _ = block_boundary(g, ann)
    L = _roles(g, ann, _DS_ROLES)
    c1, c2, ds = L["conv1"].params, L["conv2"].params, L["ds_conv"].params
    if L["ds_conv"].inputs != (entry,) or set(L["add"].inputs) != {L["bn2"].id, L["ds_bn"].id}:
        raise PatternError(f"block {ann.name}: layers do not form a downsample block")
    if ds.k != 1 or ds.groups != 1 or c1.groups != 1 or c2.stride != 1 or ds.stride != c1.stride:
        raise PatternError(f"block {ann.name}: skip must be an ungrouped 1x1 conv with conv1's stride")
    _same_padding(c1, ann.name)
    _same_padding(c2, ann.name)
    C, M, O = c1.in_ch, c1.out_ch, c2.out_ch
    bn1, bn2 = L["bn1"].params, L["bn2"].params
    skip = fuse_conv_bn(ds, L["ds_bn"].params)
    main2 = fuse_conv_bn(c2, bn2)
    p = f"{ann.name}.rm"

    if method == TYPE1:
        padded = ds if c1.k == 1 else _pad_to(ds, c1.k)
        conv1 = _append_out(c1, np.asarray(padded.weight, np.float64))
        new_bn1 = concat_bn(bn1, _with_eps(L["ds_bn"].params, bn1.eps))
        act1 = _extend_act(L["act1"].params, M, O, use_prelu=True)
        merged = _append_in(main2, dirac_weight(O, c2.k, O))
    elif method == TYPE2:
        prelu = _use_prelu(g, entry, opts, ann.name)
        conv1 = _append_out(c1, dirac_weight(C, c1.k, C))
        new_bn1 = concat_bn(bn1, _reserve_bn(C, bn1.eps))
        act1 = _extend_act(L["act1"].params, M, C, prelu)
        padded = skip if c2.k == 1 else _pad_to(skip, c2.k)
        merged = _append_in(main2, np.asarray(padded.weight, np.float64), np.asarray(skip.bias, np.float64))
    else:
        raise ValueError(f"unknown downsample method {method!r}")
    new_bn2 = bn_identity_params(bn2.running_mean, bn2.running_var, bn2.eps)
    new = [
        _layer(f"{p}.conv1", CONV, entry, conv1),
        _layer(f"{p}.bn1", BN, f"{p}.conv1", new_bn1),
        _layer(f"{p}.act1", ACT, f"{p}.bn1", act1),
        _layer(f"{p}.conv2", CONV, f"{p}.act1", merged),
        _layer(f"{p}.bn2", BN, f"{p}.conv2", new_bn2),
        _layer(f"{p}.act2", ACT, f"{p}.bn2", L["act2"].params),
    ]
    return replace_block(g, ann, new, new[-1].id)


def _pad_to(conv: ConvParams, k: int) -> ConvParams:
    while conv.k < k:
        conv = pad_1x1_to_3x3(conv) if conv.k == 1 else _pad_once(conv)
    return conv


def _pad_once(conv: ConvParams) -> ConvParams:
    w = np.pad(np.asarray(conv.weight, np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    return ConvParams(w, conv.bias, conv.stride, conv.padding + 1, conv.groups)


# ---------------------------------------------------------------- inverted residual

_IRB_ROLES = {
    "expand_conv": CONV, "expand_bn": BN, "expand_act": ACT, "dw_conv": CONV, "dw_bn": BN, "dw_act": ACT,
    "project_conv": CONV, "project_bn": BN, "add": ADD, "post_act": ACT, "ds_conv": CONV, "ds_bn": BN,
}


def _group_reserve(conv: ConvParams, channels: int, name: str):
    # Reserved channels become extra whole groups of the grouped conv.
    group = conv.weight.shape[1]
    if conv.out_ch // conv.groups != group:
        raise PatternError(f"block {name}: grouped conv must keep group width (in == out per group)")
    if channels % group:
        raise PatternError(f"block {name}: {channels} reserved channels do not fill groups of {group}")
    return _append_out(conv, dirac_weight(channels, conv.k, group), channels // group)


def rm_inverted_residual(g: NetGraph, block, opts: RmOptions = RmOptions()) -> NetGraph:
    """Expand(1x1)-grouped(kxk)-project(1x1) with a skip  ->  the same three convs, skip-free.

    The expand conv gains C Dirac filters (1/T of its T*C*C cost), the grouped
    conv gains C/group extra Dirac groups, and the project conv takes the
    reserved channels through Dirac columns (identity skip) or through the
    BN-folded projection weights (1x1 conv skip).
    """
    ann = g.annotation(block) if isinstance(block, str) else block
    if ann.kind != INVERTED_RESIDUAL:
        raise PatternError(f"{ann.name} is a {ann.kind}, not an {INVERTED_RESIDUAL}")
    skip_kind = ann.attrs.get("skip", "identity")
    if skip_kind == "none":
        log.info("block %s has no skip connection; nothing to remove", ann.name)
        return g.evolve(annotations=tuple(a for a in g.annotations if a.name != ann.name))
    entry, _ = block_boundary(g, ann)
    L = _roles(g, ann, _IRB_ROLES, optional=("post_act", "ds_conv", "ds_bn"))
    exp, dw, proj = L["expand_conv"].params, L["dw_conv"].params, L["project_conv"].params
    if L["expand_conv"].inputs != (entry,):
        raise PatternError(f"block {ann.name}: expand conv must read the block input")
    if exp.k != 1 or exp.groups != 1 or exp.stride != 1 or proj.k != 1 or proj.stride != 1:
        raise PatternError(f"block {ann.name}: expand/project must be stride-1 ungrouped 1x1 convs")
    _same_padding(dw, ann.name)
    C, E, O = exp.in_ch, exp.out_ch, proj.out_ch
    if skip_kind == "identity":
        if set(L["add"].inputs) != {L["project_bn"].id, entry} or dw.stride != 1 or C != O:
            raise PatternError(f"block {ann.name}: identity skip needs stride 1 and in == out")
        skip_w, skip_b = dirac_weight(C, 1, C), None
    else:
        if "ds_conv" not in L or L["ds_conv"].inputs != (entry,):
            raise PatternError(f"block {ann.name}: projection skip missing")
        ds = L["ds_conv"].params
        if ds.k != 1 or ds.groups != 1 or ds.stride != dw.stride:
            raise PatternError(f"block {ann.name}: skip must be a 1x1 conv with the grouped conv's stride")
        if set(L["add"].inputs) != {L["project_bn"].id, L["ds_bn"].id}:
            raise PatternError(f"block {ann.name}: Add must join project BN and skip BN")
        skip = fuse_conv_bn(ds, L["ds_bn"].params)
        skip_w, skip_b = np.asarray(skip.weight, np.float64), np.asarray(skip.bias, np.float64)
    prelu = _use_prelu(g, entry, opts, ann.name)

    p = f"{ann.name}.rm"
    ebn, dbn, pbn = L["expand_bn"].params, L["dw_bn"].params, L["project_bn"].params
    new = [
        _layer(f"{p}.expand", CONV, entry, _append_out(exp, dirac_weight(C, 1, C))),
        _layer(f"{p}.expand_bn", BN, f"{p}.expand", concat_bn(ebn, _reserve_bn(C, ebn.eps))),
        _layer(f"{p}.expand_act", ACT, f"{p}.expand_bn", _extend_act(L["expand_act"].params, E, C, prelu)),
        _layer(f"{p}.dw", CONV, f"{p}.expand_act", _group_reserve(dw, C, ann.name)),
        _layer(f"{p}.dw_bn", BN, f"{p}.dw", concat_bn(dbn, _reserve_bn(C, dbn.eps))),
        _layer(f"{p}.dw_act", ACT, f"{p}.dw_bn", _extend_act(L["dw_act"].params, E, C, prelu)),
        _layer(f"{p}.project", CONV, f"{p}.dw_act", _append_in(fuse_conv_bn(proj, pbn), skip_w, skip_b)),
        _layer(f"{p}.project_bn", BN, f"{p}.project", bn_identity_params(pbn.running_mean, pbn.running_var, pbn.eps)),
    ]
    if "post_act" in L:
        if L["post_act"].inputs != (L["add"].id,):
            raise PatternError(f"block {ann.name}: post activation must follow the Add")
        new.append(_layer(f"{p}.post_act", ACT, f"{p}.project_bn", L["post_act"].params))
    return replace_block(g, ann, new, new[-1].id)


# ---------------------------------------------------------------- reserving RepBlock pairs


def _rep_roles(g: NetGraph, roles: dict, name: str):
    spec = {"conv3": CONV, "bn3": BN, "conv1": CONV, "bn1": BN, "add": ADD, "act": ACT}
    if "bn_id" in roles:
        spec.update(bn_id=BN, add_id=ADD)
    out = {}
    for r, kind in spec.items():
        l = g.layer(roles[r])
        if l.kind != kind:
            raise PatternError(f"pair {name}: {r} is {l.kind}, expected {kind}", l.id)
        out[r] = l
    return out


def _zero_bn(channels: int, eps: float) -> BNParams:
    return BNParams(np.zeros(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)


def rm_reserving_pair(g: NetGraph, pair, opts: RmOptions = RmOptions()) -> NetGraph:
    """Fold the channel-selector skip of a reserving pair into its first RepBlock.

    Before: a = RepBlock(x) -> C-m channels, h = concat(a, last m channels of x),
    out = RepBlock_b(h). After: RepBlock_a'(x) -> C channels whose last m 3x3
    filters are Dirac copies of x's reserved slice, feeding RepBlock_b directly.
    With m = C the first block is pure reserving (Dirac 3x3, zero 1x1).
    """
    ann = g.annotation(pair) if isinstance(pair, str) else pair
    if ann.kind != RESERVING_PAIR:
        raise PatternError(f"{ann.name} is a {ann.kind}, not a {RESERVING_PAIR}")
    m, C = int(ann.attrs["reserved"]), int(ann.attrs["channels"])
    if m == 0:
        log.info("pair %s reserves no channels; unchanged", ann.name)
        return g
    if not 0 < m <= C:
        raise PatternError(f"pair {ann.name}: reserved count {m} outside 1..{C}")
    entry, _ = block_boundary(g, ann)
    b_roles = ann.attrs["b_roles"]
    B = _rep_roles(g, b_roles, ann.name)
    prelu = _use_prelu(g, entry, opts, ann.name)
    eps = B["bn3"].params.eps
    p = f"{ann.name}.rm"
    off = C - m
    res3 = np.zeros((m, C, 3, 3))
    res3[np.arange(m), off + np.arange(m), 1, 1] = 1.0
    if ann.attrs.get("a_roles"):
        A = _rep_roles(g, ann.attrs["a_roles"], ann.name)
        select, concat = g.layer(ann.attrs["select"]), g.layer(ann.attrs["concat"])
        if concat.inputs != (A["act"].id, select.id) or select.inputs != (entry,):
            raise PatternError(f"pair {ann.name}: selector/concat wiring not recognised")
        sel = np.asarray(select.params.weight)[:, :, 0, 0]
        if not np.array_equal(sel, np.eye(C)[off:]):
            raise PatternError(f"pair {ann.name}: selector does not pick the trailing {m} channels")
        a3, a1 = A["conv3"].params, A["conv1"].params
        conv3 = _append_out(a3, res3)
        bn3 = concat_bn(A["bn3"].params, _reserve_bn(m, A["bn3"].params.eps))
        conv1 = _append_out(a1, np.zeros((m, C, a1.k, a1.k)))
        bn1 = concat_bn(A["bn1"].params, _zero_bn(m, A["bn1"].params.eps))
        act = _extend_act(A["act"].params, off, m, prelu)
    else:
        conv3 = ConvParams(res3, None, 1, 1, 1)
        bn3 = _reserve_bn(m, eps)
        conv1 = ConvParams(np.zeros((m, C, 1, 1)), None, 1, 0, 1)
        bn1 = _zero_bn(m, eps)
        act = ActParams(PRELU, np.ones(m)) if prelu else ActParams()
    a = {k: f"{p}.a.{k}" for k in ("conv3", "bn3", "conv1", "bn1", "add", "act")}
    new_a = [
        _layer(a["conv3"], CONV, entry, conv3),
        _layer(a["bn3"], BN, a["conv3"], bn3),
        _layer(a["conv1"], CONV, entry, conv1),
        _layer(a["bn1"], BN, a["conv1"], bn1),
        LayerSpec(a["add"], ADD, (a["bn3"], a["bn1"])),
        _layer(a["act"], ACT, a["add"], act),
    ]
    # Re-emit block b unchanged except that it now reads block a' directly.
    old_in = B["conv3"].inputs[0]
    new_b = []
    for lid in [l.id for l in g.layers if l.id in set(b_roles.values())]:
        l = g.layer(lid)
        new_b.append(LayerSpec(l.id, l.kind, tuple(a["act"] if i == old_in else i for i in l.inputs), l.params))
    anns = [
        BlockAnnotation(REP_BLOCK, f"{ann.name}.a", [l.id for l in new_a], {"roles": a}),
        BlockAnnotation(REP_BLOCK, f"{ann.name}.b", [l.id for l in new_b], {"roles": dict(b_roles)}),
    ]
    return replace_block(g, ann, new_a + new_b, B["act"].id, anns)


# ---------------------------------------------------------------- whole graph

_PASSES = {
    BASIC_BLOCK: lambda g, a, o: rm_basic_block(g, a, o),
    DOWNSAMPLE_BLOCK: lambda g, a, o: rm_downsample(g, a, o.downsample_method, o),
    INVERTED_RESIDUAL: lambda g, a, o: rm_inverted_residual(g, a, o),
    RESERVING_PAIR: lambda g, a, o: rm_reserving_pair(g, a, o),
}


class ConversionError(GraphError):
    def __init__(self, block: str, cause: Exception):
        self.block = block
        super().__init__(f"block {block}: {cause}")


def convert_graph(g: NetGraph, opts: RmOptions = RmOptions()) -> NetGraph:
    """Apply the matching rewrite to every annotated block, then merge RepBlocks.

    The result is plain (no Add or Concat layers) and carries no annotations.
    """
    for kind in [a.kind for a in g.annotations]:
        if kind not in _PASSES and kind != REP_BLOCK:
            raise PatternError(f"no rewrite for block kind {kind}")
    order = sorted(g.annotations, key=lambda a: min(g.position(m) for m in a.member_ids))
    for ann in order:
        if ann.kind == REP_BLOCK:
            continue
        try:
            g = _PASSES[ann.kind](g, g.annotation(ann.name), opts)
        except (GraphError, ValueError) as e:
            raise ConversionError(ann.name, e) from e
    for ann in [a for a in g.annotations if a.kind == REP_BLOCK]:
        try:
            g = reparam_repblock(g, ann.name)
        except (GraphError, ValueError) as e:
            raise ConversionError(ann.name, e) from e
    if not g.is_plain():
        bad = [l.id for l in g.layers if l.kind in (ADD, "Concat")]
        raise PatternError(f"graph still has residual layers outside any annotated block: {bad}")
    return g
