"""Parameter/FLOP accounting, graph-vs-graph equivalence checks and BN recalibration."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, List

import numpy as np

from .graph import ACT, ADD, BN, CONCAT, CONV, DENSE, POOL, LayerSpec, NetGraph, forward, infer_shapes
from .tensor import PRELU, BNParams, ShapeError


@dataclass
class LayerCost:
    id: str
    kind: str
    weights: int = 0  # conv/dense weights and PReLU slopes
    biases: int = 0
    bn_params: int = 0  # gamma and beta
    macs: int = 0
    bias_flops: int = 0
    bn_macs: int = 0
    act_flops: int = 0


@dataclass
class CostReport:
    """Totals are sums over `layers`; FLOPs are 2 x MACs.

    Headline ``params`` are weights only unless ``include_bias``/``include_bn``
    are set; BN is treated as folded into its conv (0 MACs) unless
    ``include_bn`` is set.
    """

    layers: List[LayerCost]
    include_bias: bool = False
    include_bn: bool = False

    def _sum(self, f):
        return int(sum(getattr(l, f) for l in self.layers))

    @property
    def weights(self) -> int:
        return self._sum("weights")

    @property
    def biases(self) -> int:
        return self._sum("biases")

    @property
    def params(self) -> int:
        total = self.weights
        if self.include_bias:
            total += self.biases
        if self.include_bn:
            total += self._sum("bn_params")
        return total

    @property
    def conv_weights(self) -> int:
        return int(sum(l.weights for l in self.layers if l.kind == CONV))

    @property
    def macs(self) -> int:
        return self._sum("macs") + (self._sum("bn_macs") if self.include_bn else 0)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def extra_flops(self) -> dict:
        """Bias and activation work, kept out of the headline numbers."""
        return {"bias": self._sum("bias_flops"), "activation": self._sum("act_flops")}

    def to_record(self) -> dict:
        return {
            "params": self.params, "weights": self.weights, "biases": self.biases,
            "macs": self.macs, "flops": self.flops, "extra_flops": self.extra_flops,
            "layers": [asdict(l) for l in self.layers],
        }

    def table(self) -> str:
        rows = [(l.id, l.kind, l.weights, l.biases, l.macs) for l in self.layers if l.weights or l.macs or l.biases]
        head = ("layer", "kind", "weights", "biases", "MACs")
        widths = [max(len(str(r[i])) for r in rows + [head]) for i in range(5)]
        fmt = lambda r: "  ".join(str(v).ljust(w) if i < 2 else str(v).rjust(w) for i, (v, w) in enumerate(zip(r, widths)))
        lines = [fmt(head), "-" * (sum(widths) + 8)]
        lines += [fmt(r) for r in rows]
        lines.append("-" * (sum(widths) + 8))
        lines.append(f"params={self.params}  MACs={self.macs}  FLOPs={self.flops}")
        return "\n".join(lines)


def _costs(g: NetGraph, input_shape=None) -> List[LayerCost]:
    if input_shape is not None and tuple(input_shape) != g.input_shape:
        g = g.evolve(input_shape=tuple(input_shape))
    shapes = infer_shapes(g)
    out = []
    for l in g.layers:
        c = LayerCost(l.id, l.kind)
        shape = shapes[l.id]
        elems = int(np.prod(shape))
        p = l.params
        if l.kind == CONV:
            c.weights = int(p.weight.size)
            c.macs = elems * (p.in_ch // p.groups) * p.k * p.k
            if p.bias is not None:
                c.biases = p.out_ch
                c.bias_flops = elems
        elif l.kind == DENSE:
            c.weights = int(p.weight.size)
            c.macs = int(p.weight.size)
            if p.bias is not None:
                c.biases = p.weight.shape[0]
                c.bias_flops = p.weight.shape[0]
        elif l.kind == BN:
            c.bn_params = 2 * p.channels
            c.bn_macs = elems
        elif l.kind == ACT:
            if p.kind == PRELU:
                c.weights = int(p.slopes.size)
            c.act_flops = elems
        out.append(c)
    return out


def count_params(g: NetGraph, include_bias: bool = False, include_bn: bool = False) -> CostReport:
    return CostReport(_costs(g), include_bias, include_bn)


def count_flops(g: NetGraph, input_shape=None, include_bn: bool = False) -> CostReport:
    return CostReport(_costs(g, input_shape), include_bn=include_bn)


# ---------------------------------------------------------------- equivalence


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    mean_abs_diff: float
    n_inputs: int
    seed: int
    tol: float
    dtype: str
    passed: bool

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: max|diff|={self.max_abs_diff:.3e} mean|diff|={self.mean_abs_diff:.3e} "
                f"over {self.n_inputs} inputs (seed {self.seed}, {self.dtype}, tol {self.tol:g})")


def sample_inputs(shape, n: int, seed: int, nonneg: bool = False) -> np.ndarray:
    x = np.random.default_rng(seed).standard_normal((n,) + tuple(shape))
    return np.abs(x) if nonneg else x


def verify_equivalence(a: NetGraph, b: NetGraph, n: int = 20, seed: int = 7, tol: float = 1e-4,
                       f64: bool = False, nonneg: bool = False, sequential: bool = False,
                       batch: int = 10) -> EquivalenceReport:
    """Compare two graphs on `n` seeded standard-normal inputs."""
    if a.input_shape != b.input_shape:
        raise ShapeError(f"input shapes differ: {a.input_shape} vs {b.input_shape}")
    sa, sb = infer_shapes(a)[a.output_id], infer_shapes(b)[b.output_id]
    if sa != sb:
        raise ShapeError(f"output shapes differ: {sa} vs {sb}")
    dtype = np.float64 if f64 else np.float32
    x = sample_inputs(a.input_shape, n, seed, nonneg)
    worst, total, count = 0.0, 0.0, 0
    for i in range(0, n, batch):
        xb = x[i:i + batch]
        d = np.abs(forward(a, xb, dtype, sequential=sequential).astype(np.float64)
                   - forward(b, xb, dtype, sequential=sequential).astype(np.float64))
        worst = max(worst, float(d.max()))
        total += float(d.sum())
        count += d.size
    mean = total / count
    return EquivalenceReport(worst, mean, n, seed, tol, np.dtype(dtype).name, bool(worst <= tol))


# ---------------------------------------------------------------- BN recalibration


def recalibrate_bn(g: NetGraph, batches: Iterable[np.ndarray]) -> NetGraph:
    """Replace every BN's running stats by the empirical stats of its inputs.

    Gamma and beta are re-solved so each BN keeps its affine map; for an
    identity BN this is exactly gamma = sqrt(var + eps), beta = mean.
    """
    bn_layers = [l for l in g.layers if l.kind == BN]
    sums = {l.id: 0.0 for l in bn_layers}
    sqs = {l.id: 0.0 for l in bn_layers}
    count = {l.id: 0 for l in bn_layers}
    seen = 0
    for xb in batches:
        acts = forward(g, xb, np.float64, keep_all=True)
        for l in bn_layers:
            v = acts[l.inputs[0]]
            sums[l.id] = sums[l.id] + v.sum(axis=(0, 2, 3))
            sqs[l.id] = sqs[l.id] + (v * v).sum(axis=(0, 2, 3))
            count[l.id] += v.shape[0] * v.shape[2] * v.shape[3]
        seen += 1
    if not seen:
        raise ValueError("recalibrate_bn needs at least one batch")
    layers = []
    for l in g.layers:
        if l.kind == BN:
            p: BNParams = l.params
            mean = sums[l.id] / count[l.id]
            var = np.maximum(sqs[l.id] / count[l.id] - mean * mean, 0.0)
            scale, shift = p.affine(np.float64)
            gamma = scale * np.sqrt(var + p.eps)
            beta = shift + scale * mean
            l = LayerSpec(l.id, l.kind, l.inputs, BNParams(gamma, beta, mean, var, p.eps))
        layers.append(l)
    return g.evolve(layers=tuple(layers))


# ---------------------------------------------------------------- structure listing


def _conv_repr(p) -> str:
    k, s, pad = p.k, p.stride, p.padding
    parts = [f"{p.in_ch}, {p.out_ch}", f"kernel_size=({k}, {k})", f"stride=({s}, {s})"]
    if pad:
        parts.append(f"padding=({pad}, {pad})")
    if p.groups != 1:
        parts.append(f"groups={p.groups}")
    if p.bias is None:
        parts.append("bias=False")
    return f"Conv2d({', '.join(parts)})"


def layer_listing(g: NetGraph) -> List[str]:
    """One line per executed module, in the textual style of a PyTorch Sequential."""
    lines = []
    for l in g.layers:
        p = l.params
        if l.kind == CONV:
            lines.append(_conv_repr(p))
        elif l.kind == BN:
            lines.append(f"BatchNorm2d({p.channels}, eps={p.eps:g})")
        elif l.kind == ACT:
            lines.append("ReLU(inplace=True)" if p.kind != PRELU else f"PReLU(num_parameters={p.slopes.size})")
        elif l.kind == POOL:
            lines.append("AdaptiveAvgPool2d(output_size=1)")
        elif l.kind == DENSE:
            lines.append("Flatten(start_dim=1, end_dim=-1)")
            lines.append(f"Linear(in_features={p.weight.shape[1]}, out_features={p.weight.shape[0]}, "
                         f"bias={p.bias is not None})")
        elif l.kind in (ADD, CONCAT):
            lines.append(f"{l.kind}({', '.join(l.inputs)})")
    return lines


def render_listing(g: NetGraph) -> str:
    body = "\n".join(f"  ({i}): {line}" for i, line in enumerate(layer_listing(g)))
    return f"Sequential(\n{body}\n)"
