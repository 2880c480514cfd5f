"""Command line entry point: ``rmnet <command> ...``.

Exit codes: 0 ok, 1 validation or shape error, 2 equivalence failure,
3 I/O or format error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from . import builders
from .analyze import count_flops, recalibrate_bn, verify_equivalence
from .graph import forward
from .prune import PruneConfig, prune_pipeline
from .reparam import finalize_mobilenet
from .rm import TYPE1, TYPE2, RmOptions, convert_graph
from .serialize import FormatError, load, read_tensor, save, write_tensor

EXIT_OK, EXIT_INVALID, EXIT_EQUIV, EXIT_IO = 0, 1, 2, 3

FAMILY_ALIASES = {
    "resnet": builders.RESNET,
    "mobilenetv2": builders.MOBILENET_V2,
    "repvgg": builders.REPVGG,
    "rmnext": builders.RMNEXT,
}


class EquivalenceFailure(Exception):
    pass


def _ints(text: str):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def cmd_build(args) -> int:
    cfg = builders.ArchConfig(
        family=FAMILY_ALIASES.get(args.family, args.family),
        blocks_per_stage=args.blocks,
        base_width=args.width,
        seed=args.seed,
        residual_bn=args.residual_bn,
        reserving_ratio=args.reserving_ratio,
        num_classes=args.classes,
        input_shape=args.input_shape,
    )
    g = builders.build(cfg)
    save(g, args.output)
    print(f"wrote {args.output}: {len(g.layers)} layers, {len(g.annotations)} annotated blocks")
    return EXIT_OK


def _check(a, b, args):
    rep = verify_equivalence(a, b, n=args.n, seed=args.seed, tol=args.tol, f64=getattr(args, "f64", False))
    print(rep)
    if not rep.passed:
        raise EquivalenceFailure(str(rep))
    return rep


def cmd_convert(args) -> int:
    g = load(args.input)
    if not g.annotations and not args.fuse:
        print("no annotated blocks; nothing to convert (model written unchanged)")
        save(g, args.output)
        return EXIT_OK
    out = convert_graph(g, RmOptions(downsample_method=args.downsample))
    if args.fuse:
        out = finalize_mobilenet(out)
    # verification is mandatory: nothing is written unless it passes
    _check(g, out, args)
    save(out, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_verify(args) -> int:
    _check(load(args.a), load(args.b), args)
    return EXIT_OK


def cmd_prune(args) -> int:
    g = load(args.input)
    pruned, report = prune_pipeline(g, PruneConfig(args.threshold, args.min_keep))
    print(report.table())
    save(pruned, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_stats(args) -> int:
    g = load(args.input)
    print(count_flops(g, args.input_shape).table())
    return EXIT_OK


def cmd_run(args) -> int:
    g = load(args.input)
    x = read_tensor(args.tensor)
    y = forward(g, x)
    out = args.output or str(Path(args.tensor).with_suffix(".out.bin"))
    write_tensor(out, y)
    print(f"output {y.shape} written to {out}")
    return EXIT_OK


def cmd_recalibrate(args) -> int:
    g = load(args.input)
    files = sorted(Path(args.data).glob("*.bin"))
    if not files:
        raise FileNotFoundError(f"no .bin tensors in {args.data}")
    out = recalibrate_bn(g, (read_tensor(f) for f in files))
    save(out, args.output)
    print(f"recalibrated BN statistics over {len(files)} batches; wrote {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmnet", description="Residual-to-plain network rewriting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="write a seeded builder graph")
    b.add_argument("--family", default="resnet", choices=sorted(FAMILY_ALIASES) + list(builders.FAMILIES))
    b.add_argument("--blocks", type=_ints, default=(2, 2, 2, 2))
    b.add_argument("--width", type=int, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--classes", type=int, default=10)
    b.add_argument("--input-shape", type=_ints, default=(3, 32, 32))
    b.add_argument("--residual-bn", action="store_true")
    b.add_argument("--reserving-ratio", type=float, default=0.0)
    b.add_argument("-o", "--output", required=True)
    b.set_defaults(func=cmd_build)

    def verify_flags(q, with_f64=False):
        q.add_argument("--n", type=int, default=20)
        q.add_argument("--seed", type=int, default=7)
        q.add_argument("--tol", type=float, default=1e-4)
        if with_f64:
            q.add_argument("--f64", action="store_true")

    c = sub.add_parser("convert", help="RM conversion with mandatory verification")
    c.add_argument("-i", "--input", required=True)
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--downsample", choices=(TYPE1, TYPE2), default=TYPE2)
    c.add_argument("--fuse", action="store_true", help="fold BNs and fuse adjacent pointwise convs")
    verify_flags(c)
    c.set_defaults(func=cmd_convert)

    v = sub.add_parser("verify", help="compare two models on seeded inputs")
    v.add_argument("-a", required=True)
    v.add_argument("-b", required=True)
    verify_flags(v, with_f64=True)
    v.set_defaults(func=cmd_verify)

    pr = sub.add_parser("prune", help="convert, then prune channels by BN scale")
    pr.add_argument("-i", "--input", required=True)
    pr.add_argument("-o", "--output", required=True)
    pr.add_argument("--threshold", type=float, required=True)
    pr.add_argument("--min-keep", type=int, default=1)
    pr.set_defaults(func=cmd_prune)

    s = sub.add_parser("stats", help="params / MACs / FLOPs table")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("--input-shape", type=_ints, default=None)
    s.set_defaults(func=cmd_stats)

    r = sub.add_parser("run", help="single forward pass on a tensor.bin")
    r.add_argument("-i", "--model", dest="input", required=True)
    r.add_argument("--input", dest="tensor", required=True, help="input tensor.bin")
    r.add_argument("-o", "--output", default=None)
    r.set_defaults(func=cmd_run)

    rc = sub.add_parser("recalibrate", help="reset BN statistics from data, keeping outputs")
    rc.add_argument("-i", "--input", required=True)
    rc.add_argument("--data", required=True, help="directory of tensor.bin batches")
    rc.add_argument("-o", "--output", required=True)
    rc.set_defaults(func=cmd_recalibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except EquivalenceFailure:
        print("equivalence check failed; no output written", file=sys.stderr)
        return EXIT_EQUIV
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:  # ShapeError, GraphError, ConfigError
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
