"""Command-line driver.

    gmaflow synth SPEC OUT_DIR
    gmaflow run IMG1 IMG2 OUT_FLOW [--weights W] [--iters N] [--gma MODE] [--seed S]
                [--dump-attention "r,c;r,c"] [--viz OUT_PPM]
    gmaflow eval PRED GT [--occ OCC_PGM] [--report OUT] [--baseline REPORT_JSON]
    gmaflow gradcheck [--variant V] [--seed S] [--threshold T]

Every subcommand also takes ``--config FILE`` (JSON with the same keys as
the long flags, dashes or underscores); explicit flags win.
Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gma, gradcheck, metrics, plotting, synth, vizio
from .core import ImageGrid
from .refinement import PipelineConfig, feature_grid_size, init_pipeline, load_pipeline, run_pipeline

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

GMA_MODES = {
    "content": gma.Variant.CONTENT,
    "content+pos": gma.Variant.CONTENT_POS,
    "pos": gma.Variant.POSITION,
    "off": None,
}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _parse_pixels(text: str):
    pixels = []
    for chunk in text.replace(" ", "").split(";"):
        if not chunk:
            continue
        try:
            r, c = (int(v) for v in chunk.split(","))
        except ValueError:
            raise UsageError(f"bad pixel {chunk!r}; expected 'row,col;row,col'") from None
        pixels.append((r, c))
    if not pixels:
        raise UsageError("--dump-attention needs at least one pixel")
    return pixels


def _load_rgb(path) -> ImageGrid:
    img = vizio.read_image(path)
    if img.channels == 1:
        img = ImageGrid(np.repeat(img.data, 3, axis=2))
    return img


def _pyramid_levels(gh: int, gw: int, most: int = 4) -> int:
    """Deepest pyramid (up to ``most`` levels) that pools the grid evenly."""
    levels = 1
    while levels < most and gh % 2 ** levels == 0 and gw % 2 ** levels == 0:
        levels += 1
    return levels


def cmd_synth(args) -> int:
    spec = synth.load_scene(args.spec)
    pair = synth.render_pair(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vizio.write_image(pair.img1, out / "img1.ppm")
    vizio.write_image(pair.img2, out / "img2.ppm")
    vizio.write_flo(pair.gt, out / "gt.flo")
    vizio.write_codes(pair.occ.astype(np.uint8) * 255, out / "occ.pgm")
    vizio.write_codes(pair.partition, out / "partition.pgm")
    counts = {r.name: int(np.count_nonzero(pair.partition == r)) for r in metrics.Region}
    print(f"wrote {out}: {spec.height}x{spec.width}, " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_run(args) -> int:
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    if args.gma not in GMA_MODES:
        raise UsageError(f"--gma must be one of {', '.join(GMA_MODES)}")
    img1, img2 = _load_rgb(args.img1), _load_rgb(args.img2)
    if img1.data.shape != img2.data.shape:
        raise UsageError(f"images differ in shape: {img1.data.shape} vs {img2.data.shape}")
    gh, gw = feature_grid_size(img1.height, img1.width)
    if args.weights:
        weights = load_pipeline(args.weights)
    else:
        weights = init_pipeline(args.seed, num_levels=_pyramid_levels(gh, gw), h_max=gh, w_max=gw)
    variant = GMA_MODES[args.gma]
    gcfg = None if variant is None else gma.GmaConfig(
        variant=variant, d_in=weights.gma.d_in, d_c=weights.gma.d_c, d_m=weights.gma.d_m)
    queries = None
    if args.dump_attention:
        if gcfg is None:
            raise UsageError("--dump-attention needs GMA enabled")
        queries = []
        for r, c in _parse_pixels(args.dump_attention):
            if not (0 <= r < img1.height and 0 <= c < img1.width):
                raise UsageError(f"query pixel ({r}, {c}) outside {img1.height}x{img1.width} image")
            queries.append((r // 8, c // 8))

    flow, trace = run_pipeline(img1, img2, weights, PipelineConfig(args.iters, gcfg))
    out = Path(args.out_flow)
    vizio.write_flo(flow, out)
    print(f"wrote {out} ({flow.height}x{flow.width}, {args.iters} iterations, gma={args.gma})")
    if args.viz:
        vizio.write_image(vizio.flow_to_color(flow), args.viz)
        plotting.flow_figure(flow, Path(args.viz).with_suffix(".png"), title=f"gma={args.gma}")
    if queries:
        for r, c in queries:
            path = out.with_name(f"{out.stem}_attn_r{r}_c{c}.pgm")
            vizio.write_image(vizio.attention_heatmap(trace.attention, (r, c), gh, gw), path)
            print(f"wrote {path}")
        plotting.attention_figure(img1, trace.attention, queries, (gh, gw), out.with_name(f"{out.stem}_attention.png"))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, gt = vizio.read_flo(args.pred), vizio.read_flo(args.gt)
    occ = None
    if args.occ:
        occ = vizio.read_codes(args.occ) > 0
    report = metrics.evaluate(pred, gt, occ)
    baseline = None
    if args.baseline:
        with open(args.baseline, encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            baseline = metrics.EvalReport.from_dict(doc)
        except (KeyError, TypeError, AttributeError) as exc:
            raise UsageError(f"{args.baseline}: not an evaluation report ({exc!r})") from None
    table = report.to_table(baseline)
    sys.stdout.write(table)
    if args.report:
        out = Path(args.report)
        out.write_text(table, encoding="utf-8")
        out.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
        plotting.eval_figure(report, out.with_suffix(".png"), baseline)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.check_gma(variant=args.variant, seed=args.seed, threshold=args.threshold)
    sys.stdout.write(report.to_table())
    return EXIT_OK if report.passed else EXIT_INVALID


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with defaults for the long flags")

    parser = _Parser(prog="gmaflow", description="Global motion aggregation optical flow toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic frame pair")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", parents=[common], help="estimate flow between two images")
    p.add_argument("img1")
    p.add_argument("img2")
    p.add_argument("out_flow")
    p.add_argument("--weights")
    p.add_argument("--iters", type=int, default=12)
    p.add_argument("--gma", default="content", choices=list(GMA_MODES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-attention", metavar="PIXELS", help="'row,col;row,col' in image pixels")
    p.add_argument("--viz", metavar="OUT_PPM")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="score a predicted flow")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--occ")
    p.add_argument("--report")
    p.add_argument("--baseline", metavar="REPORT_JSON", help="add a relative-improvement column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="verify GMA gradients")
    p.add_argument("--variant", default="content", choices=[v.value for v in gma.Variant])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser, sub.choices


def _apply_config(parser, subparsers, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    with open(args.config, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{args.config}: top level must be an object")
    sp = subparsers[args.command]
    known = {a.dest for a in sp._actions if a.option_strings}
    defaults = {}
    for key, value in doc.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest == "config":
            raise UsageError(f"{args.config}: unknown key {key!r} for '{args.command}'")
        defaults[dest] = value
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser, subparsers = build_parser()
    try:
        args = _apply_config(parser, subparsers, argv)
        return args.func(args)
    except SystemExit as exc:
        # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    except OSError as exc:
        print(f"gmaflow: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"gmaflow: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
