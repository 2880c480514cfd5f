"""BN-scale channel pruning (network slimming) on plain graphs.

A BN layer is prunable when it sits on a single-consumer chain
``Conv -> BN [-> Act] [-> GlobalPool] -> Conv|Dense``: dropping channel c
removes filter c of the producer conv, entry c of the BN and activation, and
input column c of the consumer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from .analyze import count_flops
from .graph import (
    ACT, ADD, BASIC_BLOCK, BN, CONCAT, CONV, DENSE, DOWNSAMPLE_BLOCK, POOL, GraphError, LayerSpec, NetGraph,
    infer_shapes,
)
from .rm import RmOptions, convert_graph
from .tensor import PRELU, ActParams, BNParams, ConvParams, DenseParams

log = logging.getLogger(__name__)

Masks = Dict[str, np.ndarray]


class NotPlainError(GraphError):
    """Pruning was asked for on a graph that still has residual/concat edges."""


@dataclass(frozen=True)
class PruneConfig:
    threshold: float = 1e-3
    min_keep: int = 1
    protect: FrozenSet[str] = frozenset()

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.min_keep < 1:
            raise ValueError("min_keep must be >= 1")
        object.__setattr__(self, "protect", frozenset(self.protect))


@dataclass
class _Chain:
    bn: str
    producer: str
    path: List[str]  # layers between the BN and the consumer (activations, pooling)
    consumer: str


def _sole_consumer(g: NetGraph, lid: str) -> Optional[LayerSpec]:
    cons = g.consumers(lid)
    return cons[0] if len(cons) == 1 else None


def _chain(g: NetGraph, bn: LayerSpec) -> Optional[_Chain]:
    producer = g.layer(bn.inputs[0])
    if producer.kind != CONV or _sole_consumer(g, producer.id) is not bn:
        return None
    path, cur = [], bn
    while True:
        nxt = _sole_consumer(g, cur.id)
        if nxt is None:
            return None
        if nxt.kind in (CONV, DENSE):
            return _Chain(bn.id, producer.id, path, nxt.id)
        if nxt.kind not in (ACT, POOL):
            return None
        path.append(nxt.id)
        cur = nxt


def _chains(g: NetGraph) -> Dict[str, _Chain]:
    out = {}
    for l in g.layers:
        if l.kind == BN:
            c = _chain(g, l)
            if c is not None:
                out[l.id] = c
    return out


def residual_edges(g: NetGraph) -> List[str]:
    return [l.id for l in g.layers if l.kind in (ADD, CONCAT)]


def _mask_from_gamma(gamma: np.ndarray, cfg: PruneConfig) -> np.ndarray:
    mag = np.abs(np.asarray(gamma, np.float64))
    if cfg.threshold == 0:
        return np.ones(mag.size, bool)  # threshold 0 disables pruning, even for gamma == 0
    keep = mag > cfg.threshold
    need = min(cfg.min_keep, mag.size)
    if keep.sum() < need:
        order = sorted(range(mag.size), key=lambda i: (-mag[i], i))
        keep[order[:need]] = True
    return keep


def _constant_value(g: NetGraph, c: _Chain, bn: BNParams, ch: int) -> float:
    """What the consumer sees from channel `ch` if the BN emitted beta there."""
    v = float(bn.beta[ch])
    for pid in c.path:
        pl = g.layer(pid)
        if pl.kind == ACT:
            v = _act_value(pl.params, ch, v)
    return v


def _exactly_foldable(consumer: LayerSpec, v: float) -> bool:
    # a padded k x k conv sees the constant only partially at the border, so no
    # bias can stand in for it; grouped consumers drop the whole group instead
    if v == 0.0 or consumer.kind == DENSE or consumer.params.groups != 1:
        return True
    return consumer.params.k == 1 or consumer.params.padding == 0


def _compute(g: NetGraph, cfg: PruneConfig, only: Optional[set] = None) -> Masks:
    chains = _chains(g)
    masks = {}
    for l in g.layers:
        if l.kind != BN:
            continue
        keep = np.ones(l.params.channels, bool)
        c = chains.get(l.id)
        allowed = only is None or l.id in only
        if c is not None and allowed and not ({l.id, c.producer} & cfg.protect):
            keep = _mask_from_gamma(l.params.gamma, cfg)
            consumer = g.layer(c.consumer)
            for ch in np.flatnonzero(~keep):
                if l.params.gamma[ch] == 0 and not _exactly_foldable(consumer, _constant_value(g, c, l.params, ch)):
                    keep[ch] = True  # constant but not removable without changing the output
                    log.info("%s: keeping constant channel %d (feeds padded %s)", l.id, ch, consumer.id)
        masks[l.id] = keep
    return masks


def expose_dead_channels(g: NetGraph) -> Tuple[NetGraph, int]:
    """Rewrite BN channels fed by an all-zero conv row to gamma = 0, beta = BN(0).

    Exact (the BN input is identically zero), and it lets the gamma threshold see
    channels that are dead by construction, e.g. a merged output channel whose
    main-path and skip scales were both zero.
    """
    layers, n = [], 0
    for l in g.layers:
        if l.kind == BN and g.layer(l.inputs[0]).kind == CONV:
            conv: ConvParams = g.layer(l.inputs[0]).params
            rows = np.asarray(conv.weight).reshape(conv.out_ch, -1)
            dead = ~rows.any(axis=1) & (np.asarray(conv.bias_or_zeros()) == 0)
            p: BNParams = l.params
            dead &= np.asarray(p.gamma) != 0
            if dead.any():
                _, shift = p.affine(np.float64)
                gamma = np.asarray(p.gamma, np.float64).copy()
                beta = np.asarray(p.beta, np.float64).copy()
                gamma[dead], beta[dead] = 0.0, shift[dead]
                l = LayerSpec(l.id, l.kind, l.inputs, BNParams(gamma, beta, p.running_mean, p.running_var, p.eps))
                n += int(dead.sum())
        layers.append(l)
    return (g.evolve(layers=tuple(layers)) if n else g), n


def compute_masks(g: NetGraph, cfg: PruneConfig) -> Masks:
    """Keep channel c of each prunable BN iff |gamma_c| > threshold (min_keep fallback)."""
    bad = residual_edges(g)
    if bad:
        raise NotPlainError(f"channel pruning needs a plain graph; residual/concat layers: {bad}")
    return _compute(g, cfg)


def _legalize(g: NetGraph, masks: Masks, chains: Dict[str, _Chain]) -> Tuple[Masks, List[str]]:
    """Make masks drop whole groups of grouped convs, restoring channels where needed."""
    masks = {k: v.copy() for k, v in masks.items()}
    notes = []
    out_bn = {c.producer: bn for bn, c in chains.items()}
    in_bn = {c.consumer: bn for bn, c in chains.items()}
    changed = True
    while changed:
        changed = False
        for l in g.layers:
            if l.kind != CONV or l.params.groups == 1:
                continue
            p: ConvParams = l.params
            G, gi, go = p.groups, p.weight.shape[1], p.out_ch // p.groups
            m_in = masks.get(in_bn.get(l.id)) if l.id in in_bn else None
            m_out = masks.get(out_bn.get(l.id)) if l.id in out_bn else None
            in_g = m_in.reshape(G, gi) if m_in is not None else np.ones((G, gi), bool)
            out_g = m_out.reshape(G, go) if m_out is not None else np.ones((G, go), bool)
            keep_group = in_g.any(axis=1) | out_g.any(axis=1)
            new_in = np.repeat(keep_group, gi)
            new_out = np.repeat(keep_group, go)
            for mask_id, old, new in ((in_bn.get(l.id), m_in, new_in), (out_bn.get(l.id), m_out, new_out)):
                if old is not None and not np.array_equal(old, new):
                    restored = int((new & ~old).sum())
                    notes.append(f"{l.id}: restored {restored} channels of {mask_id} to keep {G}-group divisibility")
                    log.info(notes[-1])
                    masks[mask_id] = new
                    changed = True
    return masks, notes


def _fold_constant(consumer: ConvParams | DenseParams, chan: int, value: float):
    """Bias contribution of an input channel stuck at `value` (exact away from zero padding)."""
    if isinstance(consumer, DenseParams):
        return np.asarray(consumer.weight, np.float64)[:, chan] * value
    return np.asarray(consumer.weight, np.float64)[:, chan].sum(axis=(1, 2)) * value


def _act_value(params: ActParams, chan: int, v: float) -> float:
    if v >= 0:
        return v
    return 0.0 if params.kind != PRELU else float(params.slopes[chan]) * v


@dataclass
class MaskOutcome:
    kept: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    folded_constant: int = 0
    lossy: int = 0
    adjustments: List[str] = field(default_factory=list)


def apply_masks(g: NetGraph, masks: Masks, outcome: Optional[MaskOutcome] = None) -> NetGraph:
    """Physically remove masked channels. BNs that are not on a prunable chain must keep every channel."""
    chains = _chains(g)
    for bn_id, keep in masks.items():
        if bn_id not in chains and not np.all(keep):
            raise GraphError("channels of this BN cannot be removed (not on a Conv->BN->...->Conv chain)", bn_id)
        if keep.shape != (g.layer(bn_id).params.channels,):
            raise GraphError("mask length does not match BN channels", bn_id)
    masks, notes = _legalize(g, masks, chains)
    outcome = outcome if outcome is not None else MaskOutcome()
    outcome.adjustments.extend(notes)

    bias_delta: Dict[str, np.ndarray] = {}
    for bn_id, c in chains.items():
        keep = masks.get(bn_id)
        if keep is None:
            continue
        outcome.kept[bn_id] = (int(keep.sum()), int(keep.size))
        if keep.all():
            continue
        bn: BNParams = g.layer(bn_id).params
        consumer = g.layer(c.consumer)
        for ch in np.flatnonzero(~keep):
            # the channel's constant part act(beta) lives on in the consumer bias;
            # exact when gamma == 0 and the fold is exact, an approximation otherwise
            v = _constant_value(g, c, bn, ch)
            if v != 0.0 and not (consumer.kind == CONV and consumer.params.groups != 1):
                delta = _fold_constant(consumer.params, ch, v)
                bias_delta[c.consumer] = bias_delta.get(c.consumer, 0.0) + delta
            if bn.gamma[ch] == 0 and _exactly_foldable(consumer, v):
                outcome.folded_constant += 1
            else:
                outcome.lossy += 1

    def slice_bn(p: BNParams, keep):
        return BNParams(p.gamma[keep], p.beta[keep], p.running_mean[keep], p.running_var[keep], p.eps)

    out_mask = {c.producer: masks[bn] for bn, c in chains.items() if bn in masks}
    in_mask = {c.consumer: masks[bn] for bn, c in chains.items() if bn in masks}
    path_mask = {pid: masks[bn] for bn, c in chains.items() if bn in masks for pid in c.path}

    layers = []
    for l in g.layers:
        p = l.params
        if l.kind == BN and l.id in masks and l.id in chains:
            p = slice_bn(p, masks[l.id])
        elif l.kind == ACT and l.id in path_mask and p.kind == PRELU:
            p = ActParams(PRELU, p.slopes[path_mask[l.id]])
        elif l.kind == CONV:
            p = _slice_conv(p, out_mask.get(l.id), in_mask.get(l.id), bias_delta.get(l.id))
        elif l.kind == DENSE:
            w = p.weight
            b = None if p.bias is None else np.asarray(p.bias, np.float64)
            if l.id in bias_delta:
                b = (b if b is not None else 0.0) + bias_delta[l.id]
            if l.id in in_mask:
                w = w[:, in_mask[l.id]]
            p = DenseParams(w, b)
        layers.append(LayerSpec(l.id, l.kind, l.inputs, p))
    pruned = g.evolve(layers=tuple(layers))
    infer_shapes(pruned)
    return pruned


def _slice_conv(p: ConvParams, out_keep, in_keep, bias_delta) -> ConvParams:
    w = p.weight
    b = p.bias
    if bias_delta is not None:
        b = np.asarray(p.bias_or_zeros(), np.float64) + bias_delta
    groups = p.groups
    if p.groups == 1:
        if out_keep is not None:
            w = w[out_keep]
            b = None if b is None else b[out_keep]
        if in_keep is not None:
            w = w[:, in_keep]
    else:
        go = p.out_ch // p.groups
        keep_out = out_keep if out_keep is not None else (
            np.repeat(in_keep.reshape(p.groups, -1).all(axis=1), go) if in_keep is not None else None)
        if keep_out is not None:
            w = w[keep_out]
            b = None if b is None else b[keep_out]
            groups = int(keep_out.reshape(p.groups, go)[:, 0].sum())
    return ConvParams(w, b, p.stride, p.padding, groups)


# ---------------------------------------------------------------- pipeline


@dataclass
class PruneReport:
    before: dict
    converted: dict
    after: dict
    keep_ratios: Dict[str, float]
    folded_constant: int
    lossy: int
    adjustments: List[str]
    dead_exposed: int = 0

    def to_record(self) -> dict:
        return {
            "before": self.before, "converted": self.converted, "after": self.after,
            "keep_ratios": self.keep_ratios, "folded_constant_channels": self.folded_constant,
            "lossy_channels": self.lossy, "dead_channels_exposed": self.dead_exposed,
            "adjustments": self.adjustments,
        }

    def table(self) -> str:
        rows = [("stage", "params", "MACs", "FLOPs")]
        for name, rec in (("original", self.before), ("converted", self.converted), ("pruned", self.after)):
            rows.append((name, str(rec["params"]), str(rec["macs"]), str(rec["flops"])))
        w = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(v.ljust(w[i]) if i == 0 else v.rjust(w[i]) for i, v in enumerate(r)) for r in rows]
        lines.append("")
        lines.append(f"removed channels: {self.folded_constant} constant (exact), {self.lossy} by threshold (lossy)")
        lines.append("per-layer keep ratio:")
        for k, v in self.keep_ratios.items():
            lines.append(f"  {k:<40} {v:6.3f}")
        for note in self.adjustments:
            lines.append(f"  note: {note}")
        return "\n".join(lines)


def _cost(g: NetGraph) -> dict:
    r = count_flops(g)
    return {"params": r.params, "macs": r.macs, "flops": r.flops}


def prune_pipeline(resnet: NetGraph, cfg: PruneConfig, opts: RmOptions = RmOptions()) -> Tuple[NetGraph, PruneReport]:
    """Residual network -> RM conversion -> BN-scale masks -> pruned plain network."""
    missing = [a.name for a in resnet.annotations if a.kind == BASIC_BLOCK and not a.attrs.get("residual_bn")]
    if missing:
        raise ValueError(f"prune_pipeline needs skip BNs (build with residual_bn); blocks without: {missing}")
    converted = convert_graph(resnet, opts)
    outcome = MaskOutcome()
    pruned, n_dead = converted, 0
    # removing channels can leave other rows all-zero (e.g. a merge conv whose only
    # nonzero taps read pruned reserved channels), so alternate until nothing changes
    while cfg.threshold > 0:
        pruned, found = expose_dead_channels(pruned)
        n_dead += found
        masks = compute_masks(pruned, cfg)
        if all(m.all() for m in masks.values()):
            break
        pruned = apply_masks(pruned, masks, outcome)
    start = {l.id: l.params.channels for l in converted.layers if l.kind == BN}
    report = PruneReport(
        before=_cost(resnet), converted=_cost(converted), after=_cost(pruned),
        keep_ratios={k: pruned.layer(k).params.channels / start[k] for k in start if k in _chains(converted)},
        folded_constant=outcome.folded_constant, lossy=outcome.lossy, adjustments=outcome.adjustments,
        dead_exposed=n_dead,
    )
    meta = dict(pruned.metadata)
    meta["prune_report"] = report.to_record()
    return pruned.evolve(metadata=meta), report


def prune_resnet_direct(resnet: NetGraph, cfg: PruneConfig) -> NetGraph:
    """Baseline: slimming on the residual graph itself, where only block-internal channels
    (conv1 outputs) are free; every channel that feeds an Add stays."""
    internal = {a.roles["bn1"] for a in resnet.annotations if a.kind in (BASIC_BLOCK, DOWNSAMPLE_BLOCK)}
    return apply_masks(resnet, _compute(resnet, cfg, only=internal))
