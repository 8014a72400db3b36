"""Command-line front end.

Subcommands cover the whole pipeline: dataset synthesis, illumination
network training, phase-1 detector training, phase-2 gate optimization,
detection, evaluation, the weighting-mode comparison, and SVG curve
plots. Every command writes a small run manifest next to its primary
output, seeds all randomness from one --seed flag, and is reproducible
bit-for-bit from the manifest.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, dataio, detector, evaluation, fusion, illumination, synth

SCENE_SCHEMA = {
    "image_size": (int, 64),
    "pedestrians_mean": (float, 1.2),
    "height_min": (float, 48.0),
    "height_max": (float, 62.0),
    "night_fraction": (float, 0.5),
    "color_noise": (float, 6.0),
    "thermal_noise": (float, 5.0),
    "day_contrast": (float, 60.0),
    "ignore_probability": (float, 0.15),
    "occlusion_probability": (float, 0.15),
}


def _out_path(path):
    """Relative output paths may be redirected via MSFUSE_OUT_DIR."""
    base = os.environ.get("MSFUSE_OUT_DIR")
    if base and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    return path


def _write_run_manifest(primary_output, command, args_dict, started):
    lines = [
        f"command = {command}",
        f"version = {__version__}",
        f"duration_s = {time.time() - started:.3f}",
    ]
    for key in sorted(args_dict):
        lines.append(f"arg.{key} = {args_dict[key]}")
    path = primary_output + ".run"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _scene_config(args):
    values = dict((k, d) for k, (_, d) in SCENE_SCHEMA.items())
    if args.config:
        values = dataio.load_config(args.config, SCENE_SCHEMA)
    return synth.SceneConfig(
        image_size=values["image_size"],
        pedestrians_mean=values["pedestrians_mean"],
        height_range=(values["height_min"], values["height_max"]),
        night_fraction=values["night_fraction"],
        color_noise=values["color_noise"],
        thermal_noise=values["thermal_noise"],
        day_contrast=values["day_contrast"],
        ignore_probability=values["ignore_probability"],
        occlusion_probability=values["occlusion_probability"],
        seed=args.seed,
    )


def cmd_synth(args):
    started = time.time()
    out = _out_path(args.out)
    cfg = _scene_config(args)
    manifest = synth.generate_dataset(cfg, args.n_train, args.n_test, out)
    n_night = sum(e.condition == "night" for e in manifest)
    print(f"wrote {len(manifest)} frames ({n_night} night) to {out}")
    _write_run_manifest(os.path.join(out, "manifest.txt"), "synth", vars(args), started)
    return 0


def cmd_train_ian(args):
    started = time.time()
    records = dataio.load_split(args.data, "train")
    dataset = [(pair.color, entry.condition) for entry, pair, _ in records]
    cfg = illumination.IanTrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed
    )
    model, losses = illumination.ian_train(dataset, cfg)
    out = _out_path(args.out)
    model.save(out)
    _write_loss_log(out + ".loss", [{"epoch": i, "loss": l} for i, l in enumerate(losses)])
    print(f"trained illumination network: epoch losses {losses}")
    _write_run_manifest(out, "train-ian", vars(args), started)
    return 0


def cmd_train_detector(args):
    started = time.time()
    records = dataio.load_split(args.data, "train")
    cfg = detector.TrainConfig(arch=args.arch, lr=args.lr, epochs=args.epochs,
                               lr_decay_epoch=args.lr_decay_epoch, seed=args.seed)
    dataset = [detector.make_train_sample(pair, gts, cfg.sampling)
               for _, pair, gts in records]
    model, loss_log = detector.train_detector(dataset, cfg)
    out = _out_path(args.out)
    model.save(out)
    rows = [dict(epoch=i, **{k: round(v, 6) for k, v in entry.items()})
            for i, entry in enumerate(loss_log)]
    _write_loss_log(out + ".loss", rows)
    print(f"trained {args.arch} detector; per-epoch total loss: "
          + ", ".join(f"{e['total']:.4f}" for e in loss_log))
    _write_run_manifest(out, "train-detector", vars(args), started)
    return 0


def cmd_optimize_gate(args):
    started = time.time()
    trunk = _load_detector(args.model)
    ian = _load_ian(args.ian)
    records = dataio.load_split(args.data, "train")
    sampling = detector.SampleConfig()
    dataset = [detector.make_train_sample(pair, gts, sampling) for _, pair, gts in records]
    cfg = fusion.GateTrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed,
                                 include_regression=not args.no_regression)
    params, losses = fusion.optimize_gate(trunk, ian, dataset, cfg)
    out = _out_path(args.out)
    fusion.save_gate(out, params)
    print(f"optimized gate: alpha={params.alpha:.6f} beta={params.beta:.6f} "
          f"epoch losses {['%.4f' % l for l in losses]}")
    _write_run_manifest(out, "optimize-gate", vars(args), started)
    return 0


def _load_detector(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing detector checkpoint: {path}")
    return detector.DetectorModel.load(path)


def _load_ian(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing illumination-network checkpoint: {path}")
    return illumination.IanModel.load(path)


def _illum_fn(args):
    if args.illum == "key":
        return illumination.key_estimate
    if args.illum == "range":
        return illumination.range_estimate
    ian = _load_ian(args.ian) if args.ian else None
    if ian is None:
        raise ValueError("--illum ian requires --ian CHECKPOINT")
    return ian.infer


def run_detection(model, records, weighting, illum_fn=None, gate_params=None,
                  proposal_cfg=detector.ProposalConfig()):
    """Detect on every record; returns (detection rows, frames for eval)."""
    rows = []
    frames = []
    for entry, pair, gts in records:
        result = detector.detector_forward(model, pair, proposal_cfg)
        if "fused" in result.outputs:
            out = result.outputs["fused"]
        else:
            if weighting == "average":
                w = fusion.weights_for("average", 0.5)
            else:
                if illum_fn is None:
                    raise ValueError(f"weighting {weighting!r} needs an illumination estimator")
                iv = illum_fn(pair.color)
                w = fusion.weights_for(weighting, iv, gate_params)
            out = fusion.fuse(result.outputs["color"], result.outputs["thermal"], w)
        boxes, scores = detector.finalize_detections(
            result.proposals, out.scores, out.offsets,
            pair.color.height, pair.color.width, proposal_cfg,
        )
        for (x, y, w_, h_), s in zip(boxes, scores):
            rows.append((entry.frame_id, x, y, w_, h_, float(s)))
        frames.append(evaluation.Frame(det_boxes=boxes, det_scores=scores,
                                       gts=gts, condition=entry.condition))
    return rows, frames


def cmd_detect(args):
    started = time.time()
    model = _load_detector(args.model)
    if args.arch and args.arch != model.arch:
        raise ValueError(
            f"architecture mismatch: checkpoint is {model.arch!r}, flag says {args.arch!r}"
        )
    records = dataio.load_split(args.data, args.set)
    illum_fn = None
    gate_params = None
    if args.weighting != "average" and "fused" not in _output_kinds(model):
        illum_fn = _illum_fn(args)
        if args.weighting == "ia":
            if not args.gate:
                raise FileNotFoundError("--weighting ia requires --gate FILE")
            gate_params = fusion.load_gate(args.gate)
    rows, _ = run_detection(model, records, args.weighting, illum_fn, gate_params)
    out = _out_path(args.out)
    dataio.write_detections(out, rows)
    print(f"wrote {len(rows)} detections over {len(records)} frames to {out}")
    _write_run_manifest(out, "detect", vars(args), started)
    return 0


def _output_kinds(model):
    return ("color", "thermal") if model.arch == "score2" else ("fused",)


def _self_check(args):
    records = dataio.load_split(args.data, args.set)
    for entry, pair, gts in records:
        for gt in gts:
            b = gt.bbox
            if b.x < 0 or b.y < 0 or b.x2 > pair.color.width or b.y2 > pair.color.height:
                raise ValueError(f"{entry.frame_id}: annotation {b} outside image bounds")
    print(f"self-check ok: {len(records)} frames loadable, all annotations in bounds")
    return 0


def cmd_eval(args):
    started = time.time()
    if args.self_check:
        return _self_check(args)
    if not args.dets:
        raise ValueError("eval requires --dets (or --self-check)")
    records = dataio.load_split(args.data, args.set)
    known = {entry.frame_id for entry, _, _ in records}
    dets = dataio.read_detections(args.dets, known_frames=known)
    by_frame = {}
    for frame_id, x, y, w, h, score in dets:
        by_frame.setdefault(frame_id, []).append((x, y, w, h, score))
    frames = []
    for entry, _, gts in records:
        rows = np.array(by_frame.get(entry.frame_id, []), dtype=float).reshape(-1, 5)
        frames.append(evaluation.Frame(det_boxes=rows[:, :4], det_scores=rows[:, 4],
                                       gts=gts, condition=entry.condition))
    cfg = evaluation.EvalConfig(condition=args.condition)
    result = evaluation.evaluate(frames, cfg)
    prefix = _out_path(args.out_prefix)
    for cond in ("all", "day", "night"):
        cond_frames = [f for f in frames if cond == "all" or f.condition == cond]
        try:
            pts = evaluation.curve(cond_frames, cfg) if cond_frames else []
        except ValueError:
            pts = []
        if pts:
            _write_curve_csv(f"{prefix}_curve_{cond}.csv", pts)
    summary = {"lamr": result.lamr, "condition": args.condition,
               "per_condition": result.per_condition}
    with open(prefix + "_summary.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    print(f"lamr[{args.condition}] = {result.lamr:.6f}")
    for cond, v in result.per_condition.items():
        print(f"  lamr[{cond}] = {v:.6f}")
    _write_run_manifest(prefix + "_summary.json", "eval", vars(args), started)
    return 0


def cmd_compare(args):
    started = time.time()
    model = _load_detector(args.model)
    if "fused" in _output_kinds(model):
        raise ValueError("compare needs a two-stream (score2) detector checkpoint")
    records = dataio.load_split(args.data, args.set)
    illum_fn = _illum_fn(args)
    gate_params = fusion.load_gate(args.gate)
    cfg = evaluation.EvalConfig()
    table = []
    for mode in ("average", "hard01", "ia"):
        _, frames = run_detection(model, records, mode, illum_fn, gate_params)
        result = evaluation.evaluate(frames, cfg)
        table.append((mode, result.lamr, result.per_condition))
    table.sort(key=lambda row: row[1])
    print(f"{'weighting':<10} {'lamr-all':>10} {'lamr-day':>10} {'lamr-night':>10}")
    for mode, lamr, per_cond in table:
        day = per_cond.get("day", float("nan"))
        night = per_cond.get("night", float("nan"))
        print(f"{mode:<10} {lamr:>10.4f} {day:>10.4f} {night:>10.4f}")
    if args.out:
        out = _out_path(args.out)
        with open(out, "w", encoding="utf-8", newline="\n") as f:
            json.dump([{"weighting": m, "lamr": l, "per_condition": pc}
                       for m, l, pc in table], f, indent=2)
            f.write("\n")
        _write_run_manifest(out, "compare", vars(args), started)
    return 0


def cmd_plot(args):
    curves = []
    for path in args.curves:
        pts = _read_curve_csv(path)
        curves.append((os.path.basename(path), pts))
    out = _out_path(args.out)
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        f.write(render_curves_svg(curves))
    print(f"wrote {out}")
    return 0


# Curve CSV + SVG rendering ----------------------------------------------


def _write_curve_csv(path, points):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("fppi,miss_rate\n")
        for fppi, mr in points:
            f.write(f"{fppi!r},{mr!r}\n")


def _read_curve_csv(path):
    points = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "fppi,miss_rate":
            raise ValueError(f"{path}: expected 'fppi,miss_rate' header, got {header!r}")
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                fppi, mr = (float(v) for v in line.split(","))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed curve row") from exc
            points.append((fppi, mr))
    return points


SVG_SIZE = (640, 480)
SVG_MARGIN = 60
X_RANGE = (1e-2, 1e1)  # FPPI
Y_RANGE = (1e-2, 1.0)  # miss rate
SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_curves_svg(curves):
    """Log-log FPPI vs miss-rate plot; one polyline per curve with exactly
    one point per curve row (out-of-range values are clamped)."""
    width, height = SVG_SIZE
    m = SVG_MARGIN

    def sx(fppi):
        v = np.log10(min(max(fppi, X_RANGE[0]), X_RANGE[1]))
        lo, hi = np.log10(X_RANGE[0]), np.log10(X_RANGE[1])
        return m + (v - lo) / (hi - lo) * (width - 2 * m)

    def sy(mr):
        v = np.log10(min(max(mr, Y_RANGE[0]), Y_RANGE[1]))
        lo, hi = np.log10(Y_RANGE[0]), np.log10(Y_RANGE[1])
        return height - m - (v - lo) / (hi - lo) * (height - 2 * m)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{m}" y="{m}" width="{width - 2 * m}" height="{height - 2 * m}" '
        'fill="none" stroke="black"/>',
    ]
    for exp in range(-2, 2):
        x = sx(10.0**exp)
        parts.append(f'<line x1="{x:.1f}" y1="{m}" x2="{x:.1f}" y2="{height - m}" '
                     'stroke="#ddd"/>')
        parts.append(f'<text x="{x:.1f}" y="{height - m + 20}" text-anchor="middle" '
                     f'font-size="12">1e{exp}</text>')
    for exp in range(-2, 1):
        y = sy(10.0**exp)
        parts.append(f'<line x1="{m}" y1="{y:.1f}" x2="{width - m}" y2="{y:.1f}" '
                     'stroke="#ddd"/>')
        parts.append(f'<text x="{m - 8}" y="{y:.1f}" text-anchor="end" '
                     f'font-size="12">1e{exp}</text>')
    parts.append(f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" '
                 'font-size="14">false positives per image</text>')
    for k, (label, points) in enumerate(curves):
        color = SVG_COLORS[k % len(SVG_COLORS)]
        coords = " ".join(f"{sx(f):.2f},{sy(mr):.2f}" for f, mr in points)
        parts.append(f'<polyline fill="none" stroke="{color}" points="{coords}"/>')
        parts.append(f'<text x="{m + 10}" y="{m + 18 + 16 * k}" fill="{color}" '
                     f'font-size="12">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_loss_log(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(rows, f, indent=2)
        f.write("\n")


# Argument parsing --------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="msfuse", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic day/night dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="scene configuration file (key = value)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-test", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ian", help="train the day/night illumination network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=2)
    p.set_defaults(func=cmd_train_ian)

    p = sub.add_parser("train-detector", help="phase-1 detector training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", default="score2", choices=detector.ARCHITECTURES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--lr-decay-epoch", type=int, default=4)
    p.add_argument("--epochs", type=int, default=6)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("optimize-gate", help="phase-2 gate parameter optimization")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--ian", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--no-regression", action="store_true",
                   help="drop the box-offset term from the phase-2 loss")
    p.set_defaults(func=cmd_optimize_gate)

    p = sub.add_parser("detect", help="run detection over a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", default="test")
    p.add_argument("--weighting", default="average", choices=fusion.WEIGHTING_MODES)
    p.add_argument("--illum", default="ian", choices=("ian", "key", "range"))
    p.add_argument("--ian")
    p.add_argument("--gate")
    p.add_argument("--arch", choices=detector.ARCHITECTURES,
                   help="assert the checkpoint architecture")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="evaluate detections (miss rate vs FPPI)")
    p.add_argument("--data", required=True)
    p.add_argument("--dets")
    p.add_argument("--set", default="test")
    p.add_argument("--condition", default="all", choices=("all", "day", "night"))
    p.add_argument("--out-prefix", default="eval")
    p.add_argument("--self-check", action="store_true",
                   help="only validate that the dataset loads cleanly")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="rank the three weighting modes")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--ian", required=True)
    p.add_argument("--gate", required=True)
    p.add_argument("--set", default="test")
    p.add_argument("--illum", default="ian", choices=("ian", "key", "range"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="render curve CSVs into a log-log SVG")
    p.add_argument("--out", required=True)
    p.add_argument("curves", nargs="+")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
