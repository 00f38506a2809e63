"""``dinet`` command line: train, eval, predict, params, gradcheck, branches, synth, compare-losses.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck, plotting
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .data import DataError, Sample, crop_restore, dataset_ids, load_rgb, load_sample, resize_pad, write_dataset
from .imageio import ImageFormatError, encode_png, to_uint8
from .metrics import MetricReport, evaluate, mean_report, write_reports
from .model import (
    DIM_TAGS,
    W_UNIT,
    ModelGraph,
    accounting_model,
    branch_decompose,
    count_params,
    ensemble_average,
    param_table,
)
from .train import NumericalError, TrainResult, resolve_samples, train

log = logging.getLogger("dinetkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path) -> Path:
    """``manifest.txt``: one ``sha256  relative/path`` line per output file."""
    lines = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.txt":
            lines.append(f"{sha256(p)}  {p.relative_to(out).as_posix()}\n")
    path = out / "manifest.txt"
    path.write_text("".join(lines))
    return path


def write_atomic(files: dict[Path, bytes]) -> None:
    """Write every file or none of them."""
    staged = []
    try:
        for path, blob in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
            staged.append((tmp, path))
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        overrides[key] = value
    for key in ("seed", "variant", "loss", "norm", "epochs", "out"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    return load_config(args.config, **overrides)


# ---------------------------------------------------------------------------
# prediction on arbitrary image sizes
# ---------------------------------------------------------------------------

def padded_size(h: int, w: int, stride: int) -> tuple[int, int]:
    return math.ceil(h / stride) * stride, math.ceil(w / stride) * stride


def predict_image(model: ModelGraph, image: np.ndarray) -> tuple[np.ndarray, tuple | None]:
    """Saliency map (H x W, float64) for a C x H x W image of any size.

    Sizes not divisible by the output stride go through resize_pad and the
    prediction is cropped and resized back; the content box is returned.
    """
    h, w = image.shape[-2:]
    target = padded_size(h, w, model.output_stride)
    box = None
    x = image
    if target != (h, w):
        x, box = resize_pad(image, target, return_box=True)
    out = model(x[None].astype(model.dtype)).data[0].astype(np.float64)
    if box is not None:
        out = crop_restore(out, box, (h, w))
    return np.clip(out[0], 0.0, 1.0), box


def load_models(args) -> list[ModelGraph]:
    paths = []
    if getattr(args, "checkpoint", None):
        paths.append(args.checkpoint)
    if getattr(args, "ensemble", None):
        paths.extend(p for p in args.ensemble.split(",") if p)
    if not paths:
        raise UsageError("give --checkpoint or --ensemble")
    return [load_model(p) for p in paths]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    result = train(cfg, on_epoch=lambda row: print(
        f"epoch {row['epoch']:3d}  lr {row['lr']:.1e}  train {row['train_loss']:.4f}  "
        f"val {row['val_loss']:.4f}  cc {row['val_cc']:.4f}  nss {row['val_nss']:.4f}", flush=True))
    save_model(result.model, out / "model.ckpt", {"seed": cfg.seed, "loss": cfg.loss, "norm": cfg.norm})
    write_run_outputs(result, out, cfg)
    write_manifest(out)
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def write_run_outputs(result: TrainResult, out: Path, cfg: RunConfig) -> None:
    (out / "train_log.csv").write_text(result.log_text())
    (out / "split.txt").write_text(
        "".join(f"train {i}\n" for i in result.train_ids) + "".join(f"val {i}\n" for i in result.val_ids))
    plotting.training_curves(result.log_rows, out / "training_curves.png",
                             f"{cfg.variant} / {cfg.loss} ({cfg.norm})")


def _eval_samples(args, cfg: RunConfig) -> tuple[list[str], dict[str, Sample], dict[str, str]]:
    """Sample ids in order, loaded samples, and per-id load errors."""
    errors = {}
    samples = {}
    if cfg.data_dir:
        ids = dataset_ids(cfg.data_dir)
        if not ids:
            raise DataError(f"{cfg.data_dir}: no images found")
        for sid in ids:
            try:
                samples[sid] = load_sample(cfg.data_dir, sid)
            except (DataError, ImageFormatError) as exc:
                errors[sid] = str(exc)
    else:
        for s in resolve_samples(cfg):
            samples[s.id] = s
        ids = list(samples)
    return ids, samples, errors


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    ids, samples, errors = _eval_samples(args, cfg)
    models = [] if args.ground_truth else load_models(args)
    loaded = [sid for sid in ids if sid in samples]
    if not loaded:
        raise DataError("no sample could be loaded")

    predictions = {}
    for sid in loaded:
        s = samples[sid]
        if args.ground_truth:
            predictions[sid] = s.density
            continue
        try:
            maps = [predict_image(m, s.image)[0] for m in models]
            predictions[sid] = ensemble_average(maps)
        except ValueError as exc:
            errors[sid] = str(exc)

    def pool_for(sid):
        others = [o for o in loaded if o != sid]
        if args.shuffle_pool_size and len(others) > args.shuffle_pool_size:
            picks = np.random.default_rng([cfg.seed, 4, loaded.index(sid)]).choice(
                len(others), args.shuffle_pool_size, replace=False)
            others = [others[i] for i in sorted(picks)]
        return [samples[o].fixations for o in others]

    def score(sid):
        s = samples[sid]
        try:
            return sid, evaluate(predictions[sid], s.density, s.fixations, pool_for(sid),
                                 args.n_splits, cfg.seed), None
        except ValueError as exc:
            return sid, None, str(exc)

    todo = [sid for sid in loaded if sid in predictions]
    workers = max(1, int(os.environ.get("DINETKIT_THREADS", "1") or 1))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(score, todo))
    else:
        results = [score(sid) for sid in todo]

    rows = []
    for sid, rep, err in results:
        if err is not None:
            errors[sid] = err
        else:
            rows.append((sid, rep))
    if not rows:
        for sid in ids:
            if sid in errors:
                print(f"error {sid}: {errors[sid]}", file=sys.stderr)
        raise DataError("every image failed to evaluate")
    mean = mean_report([r for _, r in rows])

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        write_reports(fh, rows + [("mean", mean)])
    (out / "errors.txt").write_text("".join(f"{sid}\t{errors[sid]}\n" for sid in ids if sid in errors))
    plotting.metric_bars(["mean"], [mean], out / "metrics.png")
    write_manifest(out)
    for sid in ids:
        if sid in errors:
            print(f"error {sid}: {errors[sid]}", file=sys.stderr)
    print(f"{len(rows)} images  cc {mean.cc:.4f}  sauc {mean.sauc:.4f}  auc {mean.auc:.4f}  nss {mean.nss:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    models = load_models(args)
    image = load_rgb(args.image)
    maps, box = [], None
    for m in models:
        p, box = predict_image(m, image)
        maps.append(p)
    sal = ensemble_average(maps)
    text = {"source": Path(args.image).name, "models": str(len(models))}
    if box is not None:
        h, w = image.shape[-2:]
        ph, pw = padded_size(h, w, models[0].output_stride)
        text["padding"] = f"resize_pad to {ph}x{pw}, content box top={box[0]} left={box[1]} h={box[2]} w={box[3]}"
    out = Path(args.output)
    write_atomic({out: encode_png(to_uint8(sal), text)})
    print(f"wrote {out}")
    return EXIT_OK


def cmd_params(args) -> int:
    variants = [args.variant] if args.variant else [t for t in DIM_TAGS if t != "baseline"]
    against = accounting_model(args.against)
    base = count_params(against)
    deltas = []
    for tag in variants:
        model = accounting_model(tag)
        total = count_params(model)
        if args.layers:
            print(f"{tag}: per-layer weights")
            for name, shape, n in param_table(model):
                print(f"  {name:<44s} {shape:>18s} {n:>12,d}")
        d = total - base
        deltas.append((tag, d))
        print(f"{tag:<20s} total {total:>12,d}  delta vs {args.against} {d:>+12,d}  = {d / W_UNIT:+g} W")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "total", f"delta_vs_{args.against}", "delta_over_W"])
        for tag, d in deltas:
            w.writerow([tag, base + d, d, f"{d / W_UNIT:g}"])
        (out / "params.csv").write_text(buf.getvalue())
        plotting.param_bars(deltas, out / "params.png", W_UNIT)
        write_manifest(out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.scope, args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r.unit for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} unit(s) failed: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} units passed (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK


BRANCH_FILES = ("b_alpha", "b_beta", "b_gamma", "fused")


def branch_images(maps) -> dict[str, tuple[np.ndarray, dict[str, str]]]:
    """Quantize branch and fused maps on one shared linear scale.

    Each branch is stored as ``k * (b - lo)`` and the fused map as
    ``k * (fused - 3 lo)``, so the fused file's gray levels equal the sum of
    the unquantized branch levels.  ``k`` is chosen so the fused map fills the
    range.  The fused map is shown net of the decoder's bias response, which
    is zero for the default bias-free auxiliary decoder.  Scale and offsets go
    into the PNG text chunks.
    """
    b = [maps.branches[name][0, 0] for name in BRANCH_FILES[:3]]
    fused = maps.fused[0, 0] - maps.bias[0, 0]
    lo = min(float(m.min()) for m in b)
    span = float(sum(m - lo for m in b).max())
    k = 1.0 / span if span > 0 else 1.0
    out = {}
    for name, m, offset in zip(BRANCH_FILES, b + [fused], [lo, lo, lo, 3 * lo]):
        out[name] = (k * (m - offset), {"scale": repr(k), "offset": repr(offset),
                                        "decode": "value = pixel / 255 / scale + offset"})
    return out


def cmd_branches(args) -> int:
    model = load_model(args.checkpoint)
    if model.aux_decoder is None:
        raise CheckpointError(
            f"{args.checkpoint} has no auxiliary linear decoder; retrain with aux_linear_decoder = true")
    image = load_rgb(args.image)
    h, w = image.shape[-2:]
    if (h, w) != padded_size(h, w, model.output_stride):
        image = resize_pad(image, padded_size(h, w, model.output_stride))
    maps = branch_decompose(model, model.aux_decoder, image[None])
    quantized = branch_images(maps)
    out = Path(args.out)
    files = {out / f"{name}.png": encode_png(to_uint8(v), text) for name, (v, text) in quantized.items()}
    write_atomic(files)
    plotting.branch_panel(image, {name: v for name, (v, _) in quantized.items()}, out / "branches_panel.png")
    print("wrote " + ", ".join(str(p) for p in files))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    samples = resolve_samples(cfg.with_overrides(data_dir=""))
    root = write_dataset(samples, args.output)
    write_manifest(root)
    print(f"wrote {len(samples)} samples to {root}")
    return EXIT_OK


LOSS_SETTINGS = (("total_variation", "linear"), ("total_variation", "softmax"), ("total_variation", "none"))


def cmd_compare_losses(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    samples = resolve_samples(cfg)
    runs, rows = {}, []
    for loss, norm in LOSS_SETTINGS:
        label = "l1" if norm == "none" else f"{loss}({norm})"
        result = train(cfg.with_overrides(loss=loss, norm=norm), samples)
        runs[label] = result.log_rows
        last = result.log_rows[-1]
        rows.append([label, loss, norm, f"{last['val_cc']:.6f}", f"{last['val_nss']:.6f}",
                     f"{max(r['val_cc'] for r in result.log_rows):.6f}"])
        print(f"{label:<28s} final cc {last['val_cc']:.4f}  nss {last['val_nss']:.4f}", flush=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "loss", "norm", "final_val_cc", "final_val_nss", "best_val_cc"])
    w.writerows(rows)
    (out / "loss_comparison.csv").write_text(buf.getvalue())
    plotting.compare_curves(runs, "val_cc", out / "loss_comparison.png", "validation CC")
    write_manifest(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _run_flags(p, out_default=None):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=DIM_TAGS)
    p.add_argument("--loss")
    p.add_argument("--norm")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--data", help="dataset directory with images/, maps/ and fixations/ (default: synthetic)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dinet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint, log and figures")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-image CC, sAUC, AUC and NSS with a mean row")
    _run_flags(p, "runs/eval")
    p.add_argument("--checkpoint")
    p.add_argument("--ensemble", help="comma-separated checkpoints whose maps are averaged")
    p.add_argument("--ground-truth", action="store_true", help="score the density maps themselves")
    p.add_argument("--shuffle-pool-size", type=int, default=0,
                   help="other images whose fixations feed sAUC negatives (0 = all)")
    p.add_argument("--n-splits", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write an 8-bit saliency PNG for one image")
    p.add_argument("--checkpoint")
    p.add_argument("--ensemble")
    p.add_argument("image")
    p.add_argument("output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("params", help="parameter audit at full width")
    p.add_argument("--variant", choices=DIM_TAGS)
    p.add_argument("--against", choices=DIM_TAGS, default="baseline")
    p.add_argument("--layers", action="store_true", help="print the per-layer table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every gradient")
    p.add_argument("--scope", choices=list(gradcheck.SCOPES) + ["all"], default="all")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("branches", help="per-branch maps through the auxiliary linear decoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("image")
    p.set_defaults(func=cmd_branches)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    _run_flags(p)
    p.add_argument("output")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compare-losses", help="train under TV(linear), TV(softmax) and l1 and tabulate")
    _run_flags(p, "runs/compare_losses")
    p.set_defaults(func=cmd_compare_losses)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"dinet: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ImageFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"dinet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"dinet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
