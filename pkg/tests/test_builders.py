import numpy as np
import pytest

from rmnet_ir.builders import (
    DIRAC_TEST, MOBILENET_V2, REPVGG, ArchConfig, ConfigError, build, init_weights, reserved_count,
    rmnext_config,
)
from rmnet_ir.graph import (
    BASIC_BLOCK, BN, CONV, DOWNSAMPLE_BLOCK, RESERVING_PAIR, GraphBuilder,
    forward, infer_shapes,
)
from rmnet_ir.serialize import graph_hash
from rmnet_ir.tensor import ConvParams

FAMILY_CONFIGS = [
    ArchConfig(blocks_per_stage=(1, 2), base_width=4),
    ArchConfig(blocks_per_stage=(1, 2), base_width=4, residual_bn=True),
    ArchConfig(family=MOBILENET_V2, base_width=8),
    ArchConfig(family=REPVGG, blocks_per_stage=(2, 2), base_width=8),
    ArchConfig(family=REPVGG, blocks_per_stage=(2, 3), base_width=8, reserving_ratio=0.25),
    rmnext_config(base_width=16, group_width=8, input_shape=(3, 16, 16)),
]


@pytest.mark.parametrize("cfg", FAMILY_CONFIGS, ids=lambda c: f"{c.family}-{c.reserving_ratio}-{c.residual_bn}")
def test_every_builder_output_runs(cfg):
    g = build(cfg)
    infer_shapes(g)
    y = forward(g, np.random.default_rng(0).standard_normal((2,) + g.input_shape))
    assert y.shape == (2, cfg.num_classes, 1, 1) and np.all(np.isfinite(y))


def test_resnet_shapes_and_skip_bns():
    g = build(ArchConfig(blocks_per_stage=(2, 2, 2, 2), base_width=16))
    pool_src = g.layer("pool").inputs[0]
    assert infer_shapes(g)[pool_src] == (128, 4, 4)
    kinds = [a.kind for a in g.annotations]
    assert kinds.count(BASIC_BLOCK) == 5 and kinds.count(DOWNSAMPLE_BLOCK) == 3

    g = build(ArchConfig(blocks_per_stage=(2, 2), base_width=8, residual_bn=True))
    for a in g.annotations:
        add = g.layer(a.roles["add"])
        skip = g.layer(add.inputs[1])
        assert skip.kind == BN


def test_basic_block_weight_count():
    c = 8
    g = build(ArchConfig(blocks_per_stage=(2,), base_width=c))
    a = g.annotation("s1.b1")
    w = sum(g.layer(a.roles[r]).params.weight.size for r in ("conv1", "conv2"))
    assert w == 2 * 9 * c * c


def test_mobilenet_blocks():
    g = build(ArchConfig(family=MOBILENET_V2, base_width=8, expansion=0.5))
    for a in g.annotations:
        dw = g.layer(a.roles["dw_conv"]).params
        assert dw.groups == dw.out_ch == dw.in_ch
        if a.attrs["stride"] == 2:
            assert a.attrs["skip"] == "none"
    plan = [(6, 16, 1, 1), (6, 16, 1, 1)]
    g = build(ArchConfig(family=MOBILENET_V2, base_width=16, mobilenet_plan=plan))
    assert g.layer(g.annotation("ir1").roles["expand_conv"]).params.weight.size == 6 * 16 * 16


def test_repvgg_reserving_pairs():
    plain = build(ArchConfig(family=REPVGG, blocks_per_stage=(4,), base_width=8))
    assert not [a for a in plain.annotations if a.kind == RESERVING_PAIR]
    full = build(ArchConfig(family=REPVGG, blocks_per_stage=(4,), base_width=8, reserving_ratio=1.0))
    pairs = [a for a in full.annotations if a.kind == RESERVING_PAIR]
    assert len(pairs) == 2 and all(p.attrs["reserved"] == p.attrs["channels"] == 8 for p in pairs)
    assert all(p.attrs["a_roles"] is None for p in pairs)  # half depth: a single RepBlock per pair
    assert reserved_count(0.5, 64) == 32
    with pytest.raises(ConfigError):
        reserved_count(0.3, 8)
    with pytest.raises(ConfigError):
        build(ArchConfig(family=REPVGG, blocks_per_stage=(2,), base_width=8, reserving_ratio=0.3))


def test_repvgg_full_reserving_equals_half_depth_residual():
    """r=1 pair: block A vanishes; the pair is exactly block B applied to x (its identity branch is the skip)."""
    g = build(ArchConfig(family=REPVGG, blocks_per_stage=(2,), base_width=4, reserving_ratio=1.0,
                         input_shape=(3, 8, 8), seed=3))
    pair = next(a for a in g.annotations if a.kind == RESERVING_PAIR)
    b = pair.attrs["b_roles"]
    # hand-built half-depth residual block: relu(bn3(conv3 x) + bn1(conv1 x) + bn_id(x))
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8))
    acts = forward(g, x, np.float64, keep_all=True)
    entry = acts[g.layer(b["conv3"]).inputs[0]]
    from rmnet_ir.tensor import batchnorm_infer, conv2d, relu
    ref = relu(batchnorm_infer(conv2d(entry, g.layer(b["conv3"]).params), g.layer(b["bn3"]).params)
               + batchnorm_infer(conv2d(entry, g.layer(b["conv1"]).params), g.layer(b["bn1"]).params)
               + batchnorm_infer(entry, g.layer(b["bn_id"]).params))
    np.testing.assert_allclose(acts[b["act"]], ref, atol=1e-12)


def test_rmnext_grouping():
    g = build(rmnext_config())
    dws = [g.layer(a.roles["dw_conv"]).params for a in g.annotations]
    # originals: (multiple-1)*width wide; RM adds the block input as extra groups
    assert dws[0].out_ch == 128 and dws[0].groups == 4
    assert [p.stride for p in dws] == [1, 1, 2, 1, 2, 1, 2, 1]
    with pytest.raises(ConfigError):
        build(rmnext_config(group_width=48))


def test_init_is_seeded():
    cfg = ArchConfig(blocks_per_stage=(1, 1), base_width=4)
    assert graph_hash(build(cfg)) == graph_hash(build(cfg))
    other = build(ArchConfig(blocks_per_stage=(1, 1), base_width=4, seed=1))
    x = np.ones((1, 3, 32, 32))
    assert not np.array_equal(forward(build(cfg), x), forward(other, x))


def test_init_draws_nontrivial_bn_stats():
    g = build(ArchConfig(blocks_per_stage=(1,), base_width=16))
    bn = next(l.params for l in g.layers if l.kind == BN)
    assert np.std(bn.running_mean) > 0.3
    assert 0.5 <= bn.running_var.min() and bn.running_var.max() <= 2.0


def test_dirac_scheme_gives_identity_chain():
    b = GraphBuilder((4, 6, 6))
    b.add("c1", CONV, None, ConvParams(np.zeros((4, 4, 3, 3)), padding=1))
    b.add("c2", CONV, None, ConvParams(np.zeros((4, 2, 3, 3)), padding=1, groups=2))
    b.add("c3", CONV, None, ConvParams(np.zeros((4, 4, 1, 1))))
    g = init_weights(b.build(), 0, DIRAC_TEST)
    x = np.random.default_rng(0).standard_normal((2, 4, 6, 6)).astype(np.float32)
    assert np.array_equal(forward(g, x), x)


def test_config_errors():
    with pytest.raises(ConfigError):
        build(ArchConfig(family="VGG"))
    with pytest.raises(ConfigError):
        build(ArchConfig(blocks_per_stage=()))
    with pytest.raises(ConfigError):
        build(ArchConfig(family=MOBILENET_V2, mobilenet_plan=[(1, 16, 1, 1)], base_width=16))  # skip needs t != 1
    with pytest.raises(ConfigError):
        init_weights(build(ArchConfig(blocks_per_stage=(1,), base_width=4)), 0, "xavier")
