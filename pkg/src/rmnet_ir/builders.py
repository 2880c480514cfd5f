"""Seeded constructors for the residual, inverted-residual and RepVGG families."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .graph import (
    ACT, ADD, BASIC_BLOCK, BN, CONCAT, CONV, DENSE, DOWNSAMPLE_BLOCK, INVERTED_RESIDUAL, POOL,
    REP_BLOCK, RESERVING_PAIR, GraphBuilder, LayerSpec, NetGraph,
)
from .tensor import ActParams, BNParams, ConvParams, DenseParams

RESNET = "ResNetCIFAR"
MOBILENET_V2 = "MobileNetV2Variant"
REPVGG = "RepVGG"
RMNEXT = "RMNeXt"
FAMILIES = (RESNET, MOBILENET_V2, REPVGG, RMNEXT)

UNIFORM_FANIN = "uniform-fanin"
DIRAC_TEST = "dirac-identity-test"


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    family: str = RESNET
    blocks_per_stage: Sequence[int] = (2, 2, 2, 2)
    base_width: int = 16
    width_multiple: int = 1
    group_width: int = 1
    expansion: float = 0.5
    reserving_ratio: float = 0.0
    residual_bn: bool = False
    num_classes: int = 10
    seed: int = 0
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    # MobileNetV2 variant: (expansion t, out channels c, repeats n, first stride s) rows.
    mobilenet_plan: Optional[Sequence[Tuple[float, int, int, int]]] = None
    last_width: Optional[int] = None
    stem_convs: int = 1


def _zeros_conv(cin, cout, k, stride=1, groups=1, bias=False):
    return ConvParams(np.zeros((cout, cin // groups, k, k), np.float32),
                      np.zeros(cout, np.float32) if bias else None, stride, k // 2, groups)


def _zeros_bn(c):
    return BNParams(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))


def _relu():
    return ActParams()


class _Net(GraphBuilder):
    def conv_bn(self, prefix, cin, cout, k, stride=1, groups=1, src=None, act=True):
        self.add(f"{prefix}.conv", CONV, src, _zeros_conv(cin, cout, k, stride, groups))
        self.add(f"{prefix}.bn", BN, None, _zeros_bn(cout))
        if act:
            self.add(f"{prefix}.act", ACT, None, _relu())
        return self.last

    def head(self, channels, num_classes):
        self.add("pool", POOL)
        self.add("fc", DENSE, None, DenseParams(np.zeros((num_classes, channels)), np.zeros(num_classes)))


def _stem(net: _Net, cin, width, n_convs):
    for i in range(n_convs):
        net.conv_bn(f"stem{i}", cin if i == 0 else width, width, 3)
    return width


# ---------------------------------------------------------------- ResNet


def _basic_block(net: _Net, name, cin, cout, stride, residual_bn):
    entry = net.last
    roles = {
        "conv1": net.add(f"{name}.conv1", CONV, entry, _zeros_conv(cin, cout, 3, stride)),
        "bn1": net.add(f"{name}.bn1", BN, None, _zeros_bn(cout)),
        "act1": net.add(f"{name}.act1", ACT, None, _relu()),
        "conv2": net.add(f"{name}.conv2", CONV, None, _zeros_conv(cout, cout, 3)),
        "bn2": net.add(f"{name}.bn2", BN, None, _zeros_bn(cout)),
    }
    main = net.last
    if stride == 1 and cin == cout:
        kind = BASIC_BLOCK
        skip = entry
        if residual_bn:
            skip = roles["skip_bn"] = net.add(f"{name}.skip_bn", BN, entry, _zeros_bn(cin))
    else:
        kind = DOWNSAMPLE_BLOCK
        roles["ds_conv"] = net.add(f"{name}.ds_conv", CONV, entry, _zeros_conv(cin, cout, 1, stride))
        skip = roles["ds_bn"] = net.add(f"{name}.ds_bn", BN, None, _zeros_bn(cout))
    roles["add"] = net.add(f"{name}.add", ADD, (main, skip))
    roles["act2"] = net.add(f"{name}.act2", ACT, None, _relu())
    members = [l.id for l in net.layers if l.id in set(roles.values())]
    net.annotate(kind, name, members, roles=roles, channels=cin, out_channels=cout, stride=stride,
                 residual_bn=bool(residual_bn))


def build_resnet(cfg: ArchConfig) -> NetGraph:
    if cfg.family != RESNET:
        raise ConfigError(f"build_resnet needs family {RESNET}, got {cfg.family}")
    _check_common(cfg)
    net = _Net(cfg.input_shape)
    c = _stem(net, cfg.input_shape[0], cfg.base_width, cfg.stem_convs)
    for i, n in enumerate(cfg.blocks_per_stage):
        width = cfg.base_width * 2 ** i
        for j in range(n):
            stride = 2 if (i > 0 and j == 0) else 1
            _basic_block(net, f"s{i + 1}.b{j}", c, width, stride, cfg.residual_bn)
            c = width
    net.head(c, cfg.num_classes)
    return init_weights(net.build(_meta(cfg)), cfg.seed)


# ---------------------------------------------------------------- MobileNetV2 variant


def default_mobilenet_plan(expansion: float = 0.5):
    """Desk-scale plan whose RM + fusion result has MobileNetV1 depth/width alternation."""
    t = expansion
    return [(1, 16, 1, 1), (t, 16, 1, 1), (2, 32, 1, 2), (t, 32, 2, 1), (2, 64, 1, 2), (t, 64, 2, 1)]


def _hidden(t, cin, name):
    hidden = t * cin
    if abs(hidden - round(hidden)) > 1e-9 or round(hidden) < 1:
        raise ConfigError(f"{name}: expansion {t} x {cin} channels is not a whole channel count")
    return int(round(hidden))


def _inverted_residual(net: _Net, name, cin, cout, stride, t, groups=None, post_act=False):
    entry = net.last
    hidden = _hidden(t, cin, name)
    identity = stride == 1 and cin == cout
    roles = {}
    if t != 1 or post_act:
        roles["expand_conv"] = net.add(f"{name}.expand", CONV, entry, _zeros_conv(cin, hidden, 1))
        roles["expand_bn"] = net.add(f"{name}.expand_bn", BN, None, _zeros_bn(hidden))
        roles["expand_act"] = net.add(f"{name}.expand_act", ACT, None, _relu())
    elif identity:
        raise ConfigError(f"{name}: a residual block needs an expand conv to reserve its input (t != 1)")
    g = hidden if groups is None else groups
    roles["dw_conv"] = net.add(f"{name}.dw", CONV, None, _zeros_conv(hidden, hidden, 3, stride, g))
    roles["dw_bn"] = net.add(f"{name}.dw_bn", BN, None, _zeros_bn(hidden))
    roles["dw_act"] = net.add(f"{name}.dw_act", ACT, None, _relu())
    roles["project_conv"] = net.add(f"{name}.project", CONV, None, _zeros_conv(hidden, cout, 1))
    roles["project_bn"] = net.add(f"{name}.project_bn", BN, None, _zeros_bn(cout))
    main = net.last
    if identity:
        skip_kind = "identity"
        roles["add"] = net.add(f"{name}.add", ADD, (main, entry))
    elif post_act:
        skip_kind = "conv"
        roles["ds_conv"] = net.add(f"{name}.ds_conv", CONV, entry, _zeros_conv(cin, cout, 1, stride))
        roles["ds_bn"] = net.add(f"{name}.ds_bn", BN, None, _zeros_bn(cout))
        roles["add"] = net.add(f"{name}.add", ADD, (main, roles["ds_bn"]))
    else:
        skip_kind = "none"
    if post_act:
        roles["post_act"] = net.add(f"{name}.post_act", ACT, None, _relu())
    members = [l.id for l in net.layers if l.id in set(roles.values())]
    net.annotate(INVERTED_RESIDUAL, name, members, roles=roles, skip=skip_kind, expansion=t,
                 channels=cin, out_channels=cout, stride=stride)


def build_mobilenet_v2_variant(cfg: ArchConfig) -> NetGraph:
    if cfg.family != MOBILENET_V2:
        raise ConfigError(f"build_mobilenet_v2_variant needs family {MOBILENET_V2}, got {cfg.family}")
    _check_common(cfg)
    plan = cfg.mobilenet_plan if cfg.mobilenet_plan is not None else default_mobilenet_plan(cfg.expansion)
    net = _Net(cfg.input_shape)
    c = _stem(net, cfg.input_shape[0], cfg.base_width, cfg.stem_convs)
    k = 0
    for t, cout, n, s in plan:
        for j in range(n):
            _inverted_residual(net, f"ir{k}", c, int(cout), s if j == 0 else 1, t)
            c = int(cout)
            k += 1
    last = cfg.last_width or 2 * c
    net.conv_bn("last", c, last, 1)
    net.head(last, cfg.num_classes)
    return init_weights(net.build(_meta(cfg)), cfg.seed)


# ---------------------------------------------------------------- RepVGG


def _rep_block(net: _Net, name, cin, cout, stride, identity=None, src=None):
    entry = net.last if src is None else src
    if identity is None:
        identity = stride == 1 and cin == cout
    roles = {
        "conv3": net.add(f"{name}.conv3", CONV, entry, _zeros_conv(cin, cout, 3, stride)),
        "bn3": net.add(f"{name}.bn3", BN, None, _zeros_bn(cout)),
        "conv1": net.add(f"{name}.conv1", CONV, entry, _zeros_conv(cin, cout, 1, stride)),
        "bn1": net.add(f"{name}.bn1", BN, None, _zeros_bn(cout)),
    }
    roles["add"] = net.add(f"{name}.add", ADD, (roles["bn3"], roles["bn1"]))
    if identity:
        roles["bn_id"] = net.add(f"{name}.bn_id", BN, entry, _zeros_bn(cin))
        roles["add_id"] = net.add(f"{name}.add_id", ADD, (roles["add"], roles["bn_id"]))
    roles["act"] = net.add(f"{name}.act", ACT, None, _relu())
    return roles


def _members(net, roles):
    ids = set(v for v in roles.values() if v is not None)
    return [l.id for l in net.layers if l.id in ids]


def reserved_count(ratio: float, channels: int) -> int:
    m = ratio * channels
    if not 0.0 <= ratio <= 1.0 or abs(m - round(m)) > 1e-9:
        raise ConfigError(f"reserving ratio {ratio} x {channels} channels is not a whole channel count")
    return int(round(m))


def _reserving_pair(net: _Net, name, c, m):
    entry = net.last
    attrs = {"reserved": m, "channels": c}
    if m < c:
        a = _rep_block(net, f"{name}.a", c, c - m, 1, identity=False, src=entry)
        sel = np.zeros((m, c, 1, 1), np.float32)
        sel[np.arange(m), c - m + np.arange(m), 0, 0] = 1.0
        select = net.add(f"{name}.select", CONV, entry, ConvParams(sel))
        cat = net.add(f"{name}.concat", CONCAT, (a["act"], select))
        attrs.update(a_roles=a, select=select, concat=cat)
        b = _rep_block(net, f"{name}.b", c, c, 1, identity=True, src=cat)
        members = _members(net, a) + [select, cat] + _members(net, b)
        attrs["fixed"] = [select]
    else:
        attrs["a_roles"] = None
        b = _rep_block(net, f"{name}.b", c, c, 1, identity=True, src=entry)
        members = _members(net, b)
    attrs["b_roles"] = b
    net.annotate(RESERVING_PAIR, name, members, **attrs)


def build_repvgg(cfg: ArchConfig) -> NetGraph:
    if cfg.family != REPVGG:
        raise ConfigError(f"build_repvgg needs family {REPVGG}, got {cfg.family}")
    _check_common(cfg)
    net = _Net(cfg.input_shape)
    roles = _rep_block(net, "stem", cfg.input_shape[0], cfg.base_width, 1)
    net.annotate(REP_BLOCK, "stem", _members(net, roles), roles=roles)
    c = cfg.base_width
    for i, n in enumerate(cfg.blocks_per_stage):
        width = cfg.base_width * 2 ** i
        m = reserved_count(cfg.reserving_ratio, width)
        j = 0
        while j < n:
            name = f"s{i + 1}.b{j}"
            stride = 2 if (i > 0 and j == 0) else 1
            pairable = stride == 1 and c == width and j + 1 < n
            if m > 0 and pairable:
                _reserving_pair(net, f"s{i + 1}.p{j}", width, m)
                j += 2
            else:
                roles = _rep_block(net, name, c, width, stride)
                net.annotate(REP_BLOCK, name, _members(net, roles), roles=roles)
                j += 1
            c = width
    net.head(c, cfg.num_classes)
    return init_weights(net.build(_meta(cfg)), cfg.seed)


# ---------------------------------------------------------------- RMNeXt


def build_rmnext(cfg: ArchConfig) -> NetGraph:
    """Inverted-residual ResNet whose converted form is the plain Conv/ReLU RMNeXt stack.

    Stage i has output width base*2^i and groups of group_width*2^i channels;
    the original grouped conv is (width_multiple - 1) * width wide and RM adds the
    block input on top, so a converted stride-1 block is width_multiple * width wide.
    """
    if cfg.family != RMNEXT:
        raise ConfigError(f"build_rmnext needs family {RMNEXT}, got {cfg.family}")
    _check_common(cfg)
    if cfg.width_multiple < 2:
        raise ConfigError("RMNeXt needs width_multiple >= 2")
    net = _Net(cfg.input_shape)
    c = _stem(net, cfg.input_shape[0], cfg.base_width, cfg.stem_convs)
    for i, n in enumerate(cfg.blocks_per_stage):
        width = cfg.base_width * 2 ** i
        group = cfg.group_width * 2 ** i
        hidden = (cfg.width_multiple - 1) * width
        if hidden % group:
            raise ConfigError(f"group width {group} does not divide stage width {hidden}")
        for j in range(n):
            stride = 2 if (i > 0 and j == 0) else 1
            if c % group:
                raise ConfigError(f"group width {group} does not divide block input width {c}")
            _inverted_residual(net, f"s{i + 1}.b{j}", c, width, stride, hidden / c, groups=hidden // group,
                               post_act=True)
            c = width
    net.head(c, cfg.num_classes)
    return init_weights(net.build(_meta(cfg)), cfg.seed)


def rmnext_config(depth: int = 26, multiple: int = 3, group_width: int = 32, **kw) -> ArchConfig:
    """Named RMNeXt variants, e.g. rmnext_config(26, 3, 32) for "26x3_32"."""
    stages = {26: (2, 2, 2, 2), 41: (2, 3, 5, 3), 50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}
    if depth not in stages:
        raise ConfigError(f"unknown RMNeXt depth {depth}")
    kw.setdefault("base_width", 64)
    return ArchConfig(family=RMNEXT, blocks_per_stage=stages[depth], width_multiple=multiple,
                      group_width=group_width, **kw)


BUILDERS = {
    RESNET: build_resnet,
    MOBILENET_V2: build_mobilenet_v2_variant,
    REPVGG: build_repvgg,
    RMNEXT: build_rmnext,
}


def build(cfg: ArchConfig) -> NetGraph:
    try:
        return BUILDERS[cfg.family](cfg)
    except KeyError:
        raise ConfigError(f"unknown family {cfg.family!r}") from None


def _check_common(cfg: ArchConfig):
    if not cfg.blocks_per_stage or any(n < 0 for n in cfg.blocks_per_stage):
        raise ConfigError("blocks_per_stage must be a non-empty list of counts")
    if cfg.base_width < 1 or cfg.num_classes < 1 or cfg.stem_convs < 1:
        raise ConfigError("widths, class count and stem depth must be positive")


def _meta(cfg: ArchConfig) -> dict:
    return {"family": cfg.family, "seed": int(cfg.seed)}


# ---------------------------------------------------------------- weights


def _dirac(shape, groups):
    w = np.zeros(shape, np.float32)
    out_ch, cg, k, _ = shape
    og = out_ch // groups
    for o in range(out_ch):
        local = o % og
        if local < cg:
            w[o, local, k // 2, k // 2] = 1.0
    return w


def init_weights(g: NetGraph, seed: int, scheme: str = UNIFORM_FANIN) -> NetGraph:
    """Re-draw every parameter deterministically from `seed`.

    BN running statistics are non-trivial (mean ~ N(0,1), var ~ U(0.5, 2)) so
    identity-BN and fusion rewrites are actually exercised. Layers listed under
    an annotation's ``fixed`` attribute (channel selectors) are left untouched.
    """
    if scheme not in (UNIFORM_FANIN, DIRAC_TEST):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    fixed = {i for a in g.annotations for i in a.attrs.get("fixed", [])}
    layers: List[LayerSpec] = []
    for l in g.layers:
        p = l.params
        if l.id in fixed or p is None:
            layers.append(l)
            continue
        if isinstance(p, ConvParams):
            fan_in = p.weight.shape[1] * p.k * p.k
            bound = 1.0 / np.sqrt(fan_in)
            if scheme == DIRAC_TEST:
                w = _dirac(p.weight.shape, p.groups)
                b = None if p.bias is None else np.zeros(p.out_ch, np.float32)
            else:
                w = rng.uniform(-bound, bound, p.weight.shape).astype(np.float32)
                b = None if p.bias is None else rng.uniform(-bound, bound, p.out_ch).astype(np.float32)
            p = ConvParams(w, b, p.stride, p.padding, p.groups)
        elif isinstance(p, BNParams):
            c = p.channels
            mean = rng.standard_normal(c).astype(np.float32)
            var = rng.uniform(0.5, 2.0, c).astype(np.float32)
            if scheme == DIRAC_TEST:
                gamma = np.sqrt(var.astype(np.float64) + p.eps)
                beta = mean.astype(np.float64)
            else:
                gamma = rng.uniform(0.5, 1.5, c).astype(np.float32)
                beta = (0.1 * rng.standard_normal(c)).astype(np.float32)
            p = BNParams(gamma, beta, mean, var, p.eps)
        elif isinstance(p, ActParams):
            if p.kind != "ReLU":
                slopes = np.ones_like(p.slopes) if scheme == DIRAC_TEST else rng.uniform(0, 0.3, p.slopes.shape)
                p = ActParams(p.kind, slopes.astype(np.float32))
        elif isinstance(p, DenseParams):
            bound = 1.0 / np.sqrt(p.weight.shape[1])
            if scheme == DIRAC_TEST:
                w = np.eye(*p.weight.shape, dtype=np.float32)
                b = None if p.bias is None else np.zeros(p.weight.shape[0], np.float32)
            else:
                w = rng.uniform(-bound, bound, p.weight.shape).astype(np.float32)
                b = None if p.bias is None else rng.uniform(-bound, bound, p.weight.shape[0]).astype(np.float32)
            p = DenseParams(w, b)
        layers.append(LayerSpec(l.id, l.kind, l.inputs, p))
    return g.evolve(layers=tuple(layers))
