"""Command-line driver: simulate a corpus, bootstrap detectors, run mining
iterations, evaluate and turn iteration logs into plot data.

Exit codes: 0 success, 1 algorithmic failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, load_config
from .features import descriptor_distance, frame_descriptor
from .simulator import CorpusError, generate_world, read_corpus, write_corpus

logger = logging.getLogger("babylearn")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad arguments, missing or unwritable files: exit code 2."""


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} does not exist")
    try:
        cfg = load_config(args.config, _parse_set(args.set))
        if args.rng_seed is not None:
            cfg = cfg.with_overrides({"rng_seed": args.rng_seed, "world.rng_seed": args.rng_seed})
    except (KeyError, ValueError, SyntaxError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc
    return cfg


def _corpus(path: str):
    try:
        return read_corpus(path)
    except (CorpusError, OSError) as exc:
        raise UsageError(f"cannot read corpus: {exc}") from exc


def _load_state(path: str) -> pipeline.PipelineState:
    try:
        return pipeline.load_state(path)
    except (pipeline.StateFileError, OSError) as exc:
        raise UsageError(f"cannot read state: {exc}") from exc


def _write(path: str | Path, text: str) -> None:
    try:
        pipeline.atomic_write_text(path, text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc


def _save_state(state: pipeline.PipelineState, path: str) -> None:
    try:
        pipeline.save_state(state, path)
    except OSError as exc:
        raise UsageError(f"cannot write state {path}: {exc}") from exc


def _print_ap(aps: dict[int, float], out) -> None:
    for c in sorted(aps):
        print(f"class {c}: AP {aps[c]:.4f}", file=out)
    print(f"mean AP {np.mean(list(aps.values())):.4f}", file=out)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig, out) -> int:
    corpus = generate_world(cfg.world)
    try:
        manifest = write_corpus(corpus, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write corpus to {args.out}: {exc}") from exc
    n = len(manifest["videos"])
    print(f"videos {n} ({manifest['noisy_count']} noisy), frames/video {cfg.world.frames_per_video}, "
          f"test frames {len(corpus.test_images)}, background frames {len(corpus.background_images)}",
          file=out)
    return EXIT_OK


def cmd_bootstrap(args, cfg: RunConfig, out) -> int:
    corpus = _corpus(args.corpus)
    state = pipeline.bootstrap_corpus(corpus, cfg)
    if corpus.test_images:
        aps = pipeline.evaluate(state, corpus.test_images, cfg)
        pipeline.set_ap(state, aps)
        _print_ap(aps, out)
    _save_state(state, args.state_out)
    return EXIT_OK


def cmd_run(args, cfg: RunConfig, out) -> int:
    corpus = _corpus(args.corpus)
    state = _load_state(args.state_in)
    n = cfg.n_iterations if args.iterations is None else args.iterations
    if n < 0:
        raise UsageError("--iterations must be non-negative")
    cache = pipeline.KeyFrameCache(cfg.gist_threshold, cfg.descriptor())

    def progress(s: pipeline.PipelineState):
        rows = [h for h in s.history if h.iteration == s.iteration]
        summary = ", ".join(f"class {h.class_id}: pool {h.pool_size} ap {h.ap:.4f}" for h in rows)
        print(f"iteration {s.iteration}: {summary}", file=out, flush=True)

    state = pipeline.run_loop(state, corpus, cfg, n, cache, evaluate_each=bool(corpus.test_images),
                              on_iteration=progress)
    if args.bbox:
        if state.iteration < 1:
            raise UsageError("--bbox needs at least one completed iteration")
        # regression is trained on the key frames of the videos mined in this run
        if len(cache) == 0:
            for v in corpus.videos:
                cache.get(v)
        state = pipeline.train_regressor_stage(state, cache, cfg)
    csv_path = args.csv or str(Path(args.state_out).with_suffix(".csv"))
    _save_state(state, args.state_out)
    _write(csv_path, pipeline.format_report(pipeline.report_rows(state)))
    return EXIT_OK


EVAL_COLUMNS = ("class_id", "ap", "mean_center_error", "matched")


def cmd_eval(args, cfg: RunConfig, out) -> int:
    corpus = _corpus(args.corpus)
    state = _load_state(args.state)
    if not corpus.test_images:
        raise UsageError("the corpus has no test frames")
    if args.bbox and not any(r is not None for r in state.regressors.values()):
        raise UsageError("--bbox given but the state holds no box regressors (run with --bbox first)")
    dets = pipeline.detect_frames(state, corpus.test_images, cfg, use_regression=args.bbox)
    gts = [g for img in corpus.test_images for g in img.gts]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVAL_COLUMNS)
    aps = {}
    for c in state.classes:
        aps[c] = pipeline.average_precision([d.refined for d in dets[c]],
                                            [g for g in gts if g.class_id == c], cfg.match_iou)
        raw, refined = pipeline.center_errors(dets[c], corpus.test_images, c, cfg.match_iou)
        err = float(refined.mean()) if len(refined) else math.nan
        writer.writerow([c, repr(aps[c]), "" if math.isnan(err) else repr(err), len(refined)])
        print(f"class {c}: AP {aps[c]:.4f}  center error {err:.3f} px over {len(refined)} matches", file=out)
    print(f"mean AP {np.mean(list(aps.values())):.4f}", file=out)
    if args.csv:
        _write(args.csv, buf.getvalue())
    return EXIT_OK


def read_report(path: str | Path) -> list[dict]:
    """Rows of an iteration CSV; raises ``UsageError`` when malformed."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != pipeline.REPORT_COLUMNS:
        raise UsageError(f"{path}: expected columns {','.join(pipeline.REPORT_COLUMNS)}")
    rows = []
    for lineno, r in enumerate(reader, 2):
        try:
            rows.append({"iteration": int(r["iteration"]), "class_id": int(r["class_id"]),
                         "ap": float(r["ap"]) if r["ap"] else math.nan,
                         "pool_size": int(r["pool_size"]), "videos_mined": int(r["videos_mined"])})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{path}:{lineno}: malformed row ({exc})") from exc
    if not rows:
        raise UsageError(f"{path}: no rows")
    return rows


def ap_series(rows: list[dict]) -> tuple[list[int], list[int], dict[int, dict[int, float]]]:
    """Iterations, classes and ``table[iteration][class] = ap``."""
    table: dict[int, dict[int, float]] = defaultdict(dict)
    for r in rows:
        table[r["iteration"]][r["class_id"]] = r["ap"]
    iterations = sorted(table)
    classes = sorted({r["class_id"] for r in rows})
    return iterations, classes, table


def cmd_report(args, cfg: RunConfig, out) -> int:
    rows = read_report(args.csv_in)
    iterations, classes, table = ap_series(rows)
    wide = [",".join(["iteration"] + [f"class_{c}" for c in classes] + ["mean_ap"])]
    mean_lines = ["iteration,mean_ap"]
    for it in iterations:
        vals = [table[it].get(c, math.nan) for c in classes]
        mean = float(np.mean(vals))
        cells = ["" if math.isnan(v) else repr(v) for v in vals + [mean]]
        wide.append(",".join([str(it)] + cells))
        mean_lines.append(f"{it},{cells[-1]}")
    out_dir = Path(args.out)
    _write(out_dir / "ap_by_class.csv", "\n".join(wide) + "\n")
    _write(out_dir / "mean_ap.csv", "\n".join(mean_lines) + "\n")
    for c in classes:
        series = ["iteration,ap"] + [f"{it},{'' if math.isnan(table[it].get(c, math.nan)) else repr(table[it][c])}"
                                     for it in iterations]
        _write(out_dir / f"class_{c}.csv", "\n".join(series) + "\n")
    print(f"{len(iterations)} iterations, {len(classes)} classes -> {out_dir}", file=out)
    return EXIT_OK


def cmd_calibrate_gist(args, cfg: RunConfig, out) -> int:
    corpus = _corpus(args.corpus)
    videos = corpus.videos[: args.videos]
    if not videos:
        raise UsageError("the corpus has no videos")
    descriptor = cfg.descriptor()
    # descriptors once per frame, then sweep thresholds on the distances
    per_video = [[frame_descriptor(f.image, descriptor) for f in v.clip().frames] for v in videos]
    best = None
    print("threshold,keyframe_fraction", file=out)
    for t in np.geomspace(args.low, args.high, args.steps):
        fractions = []
        for descs in per_video:
            last, kept = descs[0], 1
            for d in descs[1:]:
                if descriptor_distance(d, last) > t:
                    kept, last = kept + 1, d
            fractions.append(kept / len(descs))
        frac = float(np.mean(fractions))
        print(f"{t:.6g},{frac:.4f}", file=out)
        if best is None or abs(frac - args.target) < abs(best[1] - args.target):
            best = (float(t), frac)
    print(f"recommended gist_threshold = {best[0]:.6g} (key-frame fraction {best[1]:.3f})", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="babylearn", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable, wins over the file)")
    p.add_argument("--rng-seed", type=int, help="seed for the run and the simulated world")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic corpus on disk")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("bootstrap", help="select seeds and train the initial detectors")
    s.add_argument("--corpus", required=True)
    s.add_argument("--state-out", required=True)
    s.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("run", help="run mining iterations from a saved state")
    s.add_argument("--corpus", required=True)
    s.add_argument("--state-in", required=True)
    s.add_argument("--state-out", required=True)
    s.add_argument("--iterations", type=int, help="default: n_iterations from the config")
    s.add_argument("--csv", help="per-iteration report (default: state-out with .csv)")
    s.add_argument("--bbox", action="store_true", help="train box regressors after the last iteration")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="average precision on the corpus test frames")
    s.add_argument("--corpus", required=True)
    s.add_argument("--state", required=True)
    s.add_argument("--bbox", action="store_true", help="apply the saved box regressors")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="plot-ready AP series from an iteration CSV")
    s.add_argument("--csv-in", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("calibrate-gist", help="key-frame fraction over a range of gist thresholds")
    s.add_argument("--corpus", required=True)
    s.add_argument("--videos", type=int, default=30)
    s.add_argument("--target", type=float, default=0.3)
    s.add_argument("--low", type=float, default=0.002)
    s.add_argument("--high", type=float, default=0.03)
    s.add_argument("--steps", type=int, default=12)
    s.set_defaults(func=cmd_calibrate_gist)
    return p


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.func(args, cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # algorithmic failure: report, do not dump a traceback
        logger.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
