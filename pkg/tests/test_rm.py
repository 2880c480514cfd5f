import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import basic_block_graph, irb_graph
from rmnet_ir.analyze import count_params, verify_equivalence
from rmnet_ir.builders import MOBILENET_V2, REPVGG, ArchConfig, build, rmnext_config
from rmnet_ir.graph import ADD, CONCAT, CONV, RESERVING_PAIR, BlockAnnotation, forward
from rmnet_ir.reparam import PatternError, reparam_all
from rmnet_ir.rm import (
    FORCE_PRELU, STRICT_RELU, TYPE1, TYPE2, ConversionError, RmOptions, bn_identity_params, convert_graph,
    dirac_filters, rm_basic_block, rm_inverted_residual, rm_reserving_pair,
)
from rmnet_ir.serialize import graph_hash
from rmnet_ir.tensor import PRELU, batchnorm_infer, conv2d, ConvParams


def test_dirac_filters_examples():
    assert np.array_equal(dirac_filters(2, 1)[:, :, 0, 0], np.eye(2))
    one = dirac_filters(1, 3)
    assert one.shape == (1, 1, 3, 3) and one[0, 0, 1, 1] == 1 and one.sum() == 1
    x = np.random.default_rng(0).standard_normal((2, 5, 6, 6)).astype(np.float32)
    assert np.array_equal(conv2d(x, ConvParams(dirac_filters(5, 3), padding=1)), x)
    with pytest.raises(ValueError):
        dirac_filters(3, 2)


def test_bn_identity_params_examples():
    p = bn_identity_params([0.0], [1.0], eps=0.0)
    assert p.gamma[0] == 1 and p.beta[0] == 0
    p = bn_identity_params([3.0], [4.0], eps=0.0)
    assert p.gamma[0] == 2 and p.beta[0] == 3
    assert batchnorm_infer(np.full((1, 1, 1, 1), 5.0), p)[0, 0, 0, 0] == 5.0
    r = np.random.default_rng(0)
    p = bn_identity_params(r.standard_normal(6), r.uniform(0, 3, 6))
    x = r.standard_normal((3, 6, 4, 4)) * 10
    assert np.max(np.abs(batchnorm_infer(x, p) - x)) <= 1e-6 * np.max(np.abs(x))


def test_basic_block_conversion_c16():
    g = basic_block_graph(16)
    c = rm_basic_block(g, "blk")
    assert c.is_plain() and not c.annotations
    assert verify_equivalence(g, c, tol=1e-4).passed
    assert count_params(g).conv_weights == 18 * 16 ** 2
    assert count_params(c).conv_weights == 36 * 16 ** 2


def test_basic_block_signed_input_uses_prelu():
    g = basic_block_graph(6, relu_in=False)
    c = rm_basic_block(g, "blk")
    act1 = c.layer("blk.rm.act1").params
    assert act1.kind == PRELU
    assert np.all(act1.slopes[6:] == 1) and np.all(act1.slopes[:6] == 0)
    assert verify_equivalence(g, c).passed
    with pytest.raises(PatternError):
        rm_basic_block(g, "blk", RmOptions(activation_policy=STRICT_RELU))


def test_reserved_channels_reproduce_block_input():
    c_in = 5
    g = basic_block_graph(c_in)
    c = rm_basic_block(g, "blk")
    x = np.random.default_rng(3).standard_normal((2, c_in, 8, 8))
    acts = forward(c, x, np.float64, keep_all=True)
    np.testing.assert_allclose(acts["blk.rm.act1"][:, c_in:], acts["pre"], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10 ** 6), st.booleans(), st.booleans(), st.booleans())
def test_basic_block_equivalence_property(c, seed, residual_bn, relu_in, force_prelu):
    g = basic_block_graph(c, residual_bn=residual_bn, relu_in=relu_in, seed=seed, hw=5)
    opts = RmOptions(activation_policy=FORCE_PRELU if force_prelu else "relu-if-nonneg")
    out = convert_graph(g, opts)
    assert verify_equivalence(g, out, seed=seed, tol=1e-4).passed
    assert verify_equivalence(g, out, seed=seed, tol=1e-9, f64=True).passed


@pytest.mark.parametrize("method", [TYPE1, TYPE2])
@pytest.mark.parametrize("c", [2, 8])
def test_downsample_conversion(method, c):
    g = basic_block_graph(c, 2 * c, 2)
    out = convert_graph(g, RmOptions(downsample_method=method))
    assert out.is_plain()
    assert verify_equivalence(g, out).passed
    assert verify_equivalence(g, out, tol=1e-9, f64=True).passed
    want = 108 * c * c + 4 * c if method == TYPE1 else 81 * c * c
    assert count_params(out).weights == want


def test_downsample_counts_at_64():
    """Closed forms only; the counts are structural so a zero-weight block suffices."""
    g = basic_block_graph(64, 128, 2, hw=4)
    assert count_params(convert_graph(g, RmOptions(TYPE2))).weights == 331_776
    assert count_params(convert_graph(g, RmOptions(TYPE1))).weights == 442_624


def test_downsample_count_difference():
    for c in (1, 3, 8, 12):
        g = basic_block_graph(c, 2 * c, 2, hw=4)
        t1 = count_params(convert_graph(g, RmOptions(TYPE1))).weights
        t2 = count_params(convert_graph(g, RmOptions(TYPE2))).weights
        assert t1 - t2 == 27 * c * c + 4 * c


def test_inverted_residual_overhead():
    g = irb_graph(16, 6)
    c = rm_inverted_residual(g, "ir")
    assert g.layer("ir.expand").params.weight.size == 1536
    assert c.layer("ir.rm.expand").params.weight.size == 1792  # 7/6 = 1 + 1/T
    dw_before = g.layer("ir.dw").params.weight.size
    assert c.layer("ir.rm.dw").params.weight.size - dw_before == 16 * 9
    assert verify_equivalence(g, c).passed
    assert verify_equivalence(g, c, f64=True, tol=1e-9).passed


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([2, 4, 6]), st.sampled_from([0.5, 1.5, 2, 6]), st.integers(0, 10 ** 6), st.booleans())
def test_inverted_residual_property(c, t, seed, relu_in):
    g = irb_graph(c, t, seed=seed, relu_in=relu_in)
    out = convert_graph(g)
    assert out.is_plain()
    assert verify_equivalence(g, out, tol=1e-9, f64=True).passed


def test_irb_without_skip_is_dropped_with_a_note():
    g = irb_graph(4, 2, cout=8, stride=2)
    out = rm_inverted_residual(g, "ir")
    assert not out.annotations and [l.id for l in out.layers] == [l.id for l in g.layers]


@pytest.mark.parametrize("r", [0.25, 0.5, 1.0])
def test_reserving_pair(r):
    g = build(ArchConfig(family=REPVGG, blocks_per_stage=(2,), base_width=8, reserving_ratio=r, seed=2,
                         input_shape=(3, 8, 8)))
    pair = next(a for a in g.annotations if a.kind == RESERVING_PAIR)
    mid = rm_reserving_pair(g, pair)
    assert not any(a.kind == RESERVING_PAIR for a in mid.annotations)
    assert not any(l.kind == CONCAT for l in mid.layers)
    assert verify_equivalence(g, mid, tol=1e-9, f64=True).passed
    assert verify_equivalence(g, reparam_all(mid), tol=1e-4).passed


def test_reserving_pair_bad_count():
    g = build(ArchConfig(family=REPVGG, blocks_per_stage=(2,), base_width=8, reserving_ratio=0.5))
    pair = next(a for a in g.annotations if a.kind == RESERVING_PAIR)
    bad = BlockAnnotation(pair.kind, pair.name, pair.member_ids, dict(pair.attrs, reserved=9))
    with pytest.raises(PatternError):
        rm_reserving_pair(g, bad)
    none = BlockAnnotation(pair.kind, pair.name, pair.member_ids, dict(pair.attrs, reserved=0))
    assert rm_reserving_pair(g, none) is g


def test_convert_graph_end_to_end_and_idempotent():
    g = build(ArchConfig(blocks_per_stage=(2, 2, 2, 2), base_width=4, seed=9))
    out = convert_graph(g)
    assert out.is_plain() and not any(l.kind == ADD for l in out.layers)
    assert verify_equivalence(g, out).passed
    assert graph_hash(convert_graph(out)) == graph_hash(out)


def test_convert_mobilenet_matches_plain_irb_stack():
    g = build(ArchConfig(family=MOBILENET_V2, base_width=8))
    out = convert_graph(g)
    assert out.is_plain()
    assert verify_equivalence(g, out).passed
    convs = [l.params for l in out.layers if l.kind == CONV]
    # stem, then expand/depthwise/project per block (the t=1 block has no expand), then the last 1x1
    kinds = ["dw" if p.groups > 1 else f"{p.k}x{p.k}" for p in convs]
    assert kinds[:3] == ["3x3", "dw", "1x1"]
    assert kinds[-1] == "1x1"


def test_convert_rmnext_small():
    g = build(rmnext_config(base_width=8, group_width=4, input_shape=(3, 16, 16), seed=4))
    out = convert_graph(g)
    assert out.is_plain()
    assert verify_equivalence(g, out, n=4).passed


def test_conversion_errors_name_the_block():
    g = basic_block_graph(4, relu_in=False)
    with pytest.raises(ConversionError, match="blk"):
        convert_graph(g, RmOptions(activation_policy=STRICT_RELU))
    with pytest.raises(ValueError):
        RmOptions(downsample_method="type3")
