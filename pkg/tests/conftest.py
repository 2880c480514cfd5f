import numpy as np
import pytest

from rmnet_ir.builders import _Net, _basic_block, _inverted_residual, _rep_block, init_weights
from rmnet_ir.graph import ACT, REP_BLOCK
from rmnet_ir.tensor import ActParams


def basic_block_graph(c, cout=None, stride=1, residual_bn=False, hw=8, relu_in=True, seed=0):
    """Input [-> ReLU] -> one residual block -> Output."""
    net = _Net((c, hw, hw))
    if relu_in:
        net.add("pre", ACT, None, ActParams())
    _basic_block(net, "blk", c, cout or c, stride, residual_bn)
    return init_weights(net.build(), seed)


def irb_graph(c, t, cout=None, stride=1, hw=6, relu_in=True, seed=0):
    net = _Net((c, hw, hw))
    if relu_in:
        net.add("pre", ACT, None, ActParams())
    _inverted_residual(net, "ir", c, cout or c, stride, t)
    return init_weights(net.build(), seed)


def repblock_graph(cin, cout, stride=1, hw=8, seed=0):
    net = _Net((cin, hw, hw))
    roles = _rep_block(net, "rep", cin, cout, stride)
    net.annotate(REP_BLOCK, "rep", [l.id for l in net.layers if l.id in set(roles.values())], roles=roles)
    return init_weights(net.build(), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_graph(seed, max_layers=8):
    """Small random DAG mixing conv/BN/act/add/concat, ending in pool + dense."""
    from rmnet_ir.graph import ADD, BN, CONCAT, CONV, DENSE, POOL, GraphBuilder
    from rmnet_ir.tensor import PRELU, BNParams, ConvParams, DenseParams

    r = np.random.default_rng(seed)
    c0 = int(r.integers(1, 4))
    hw = int(r.integers(3, 8))
    b = GraphBuilder((c0, hw, hw))
    shapes = {"input": (c0, hw, hw)}
    for i in range(int(r.integers(1, max_layers + 1))):
        name = f"l{i}"
        src = list(shapes)[int(r.integers(len(shapes)))]
        c, h, w = shapes[src]
        op = r.choice(["conv", "bn", "act", "add", "concat"])
        if op == "conv":
            k = int(r.choice([1, 3]))
            groups = int(r.choice([g for g in (1, 2, 3) if c % g == 0]))
            cout = groups * int(r.integers(1, 4))
            stride = int(r.choice([1, 2])) if h > 2 else 1
            bias = r.standard_normal(cout) if r.random() < 0.5 else None
            p = ConvParams(r.standard_normal((cout, c // groups, k, k)), bias, stride, k // 2, groups)
            b.add(name, CONV, src, p)
        elif op == "bn":
            b.add(name, BN, src, BNParams(r.uniform(0.5, 1.5, c), r.standard_normal(c), r.standard_normal(c),
                                          r.uniform(0.5, 2, c), float(r.choice([0.0, 1e-5, 1e-3]))))
        elif op == "act":
            b.add(name, ACT, src, ActParams(PRELU, r.uniform(0, 1, c)) if r.random() < 0.5 else ActParams())
        else:
            same = [s for s, sh in shapes.items() if (sh == shapes[src] if op == "add" else sh[1:] == (h, w))]
            other = same[int(r.integers(len(same)))]
            b.add(name, ADD if op == "add" else CONCAT, (src, other))
        shapes = _shapes_so_far(b)
    last = b.last
    b.add("pool", POOL, last)
    ncls = int(r.integers(1, 5))
    b.add("fc", DENSE, None, DenseParams(r.standard_normal((ncls, shapes[last][0])), r.standard_normal(ncls)))
    return b.build({"seed": int(seed)})


def _shapes_so_far(b):
    from rmnet_ir.graph import NetGraph, OUTPUT, LayerSpec, infer_shapes

    g = NetGraph(tuple(b.layers) + (LayerSpec("__out", OUTPUT, (b.last,)),), b.input_shape)
    shapes = infer_shapes(g)
    shapes.pop("__out")
    return shapes
