"""Command-line interface: gen, histify, pretrain, train-em, predict, eval.

Commands communicate only through files. Every output is written atomically
and depends only on the inputs, the config and the seed, so reruns are
byte-identical (wall-clock timings go to a separate ``timing.jsonl``).

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from ._io import atomic_write_text
from .config import ConfigError, RunConfig
from .em import (EMTrack, WindowAlignmentError, estimate_labels, run_countem,
                 supervised_baseline, transcribe)
from .events import (EventTrack, WindowSpec, dumps, histograms_from_dict, histograms_to_dict)
from .grid import FrameGrid, LabelMatrix, MatrixFormatError, labels_to_events, write_matrix
from .metrics import evaluate_corpus, report_csv, report_json, report_rows
from .midi import SMFParseError, parse_smf
from .model import CheckpointError, TrainingError, load_checkpoint, predict, save_checkpoint
from .peakpick import PeakPickError
from .pipeline import (SPLITS, augment, generate_scores, histograms_for, pretrain_model, shift_schedule,
                       timbre_for)
from .synth import InfeasibleConfigError, extract_features, frame_count_for, read_wav, render_audio, write_wav

logger = logging.getLogger("countem")

MANIFEST_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- file helpers --------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"missing input: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def load_events(path: Path) -> EventTrack:
    """Event document (JSON) or Standard MIDI File, by extension."""
    path = Path(path)
    if path.suffix.lower() in (".mid", ".midi"):
        try:
            return parse_smf(path.read_bytes())
        except FileNotFoundError:
            raise DataError(f"missing input: {path}") from None
    doc = _read_json(path)
    try:
        return EventTrack.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid event document ({exc})") from None


def load_manifest(path: Path) -> tuple[Path, list[dict]]:
    doc = _read_json(path)
    if not isinstance(doc, dict) or "tracks" not in doc:
        raise DataError(f"{path}: not a corpus manifest")
    return Path(path).parent, doc["tracks"]


def _entries(tracks: list[dict], split: str) -> list[dict]:
    out = [t for t in tracks if t["split"] == split]
    if not out:
        raise DataError(f"manifest has no {split!r} tracks")
    return out


def load_features(root: Path, entry: dict, cfg: RunConfig) -> np.ndarray:
    path = root / entry["wav_path"]
    if not path.exists():
        raise DataError(f"missing input: {path}")
    samples, sr = read_wav(path)
    if sr != cfg.features.sample_rate:
        raise DataError(f"{path}: sample rate {sr}, config expects {cfg.features.sample_rate}")
    return extract_features(samples, cfg.features, frame_count_for(samples.size, cfg.features))


def _labels_for(events: EventTrack, features: np.ndarray, cfg: RunConfig, where: str) -> LabelMatrix:
    from .grid import events_to_labels

    grid = FrameGrid(features.shape[0], events.pitch_count, cfg.features.frame_len_s)
    try:
        return events_to_labels(events, grid)
    except ValueError as exc:
        raise DataError(f"{where}: events do not fit the audio ({exc})") from None


def _check_model(model, features: np.ndarray, where: str) -> None:
    if features.shape[1] != model.n_features:
        raise DataError(f"{where}: {features.shape[1]} feature bands, checkpoint expects {model.n_features}")


def _load_histograms(hist_dir: Path, track_id: str):
    hists, _ = _parse_hist_doc(hist_dir / f"{track_id}.hist.json")
    return hists


def _parse_hist_doc(path: Path):
    doc = _read_json(path)
    try:
        return histograms_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid histogram document ({exc})") from None


def _load_model(path: Path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"missing input: {path}") from None


# -- commands -----------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> None:
    out = Path(args.out_dir)
    tracks = []
    for split in SPLITS:
        timbre = timbre_for(cfg, split)
        label = "A" if split == "pretrain" else "B"
        for track_id, seed, events in generate_scores(cfg, split):
            wav_rel = f"{split}/{track_id}.wav"
            ev_rel = f"{split}/{track_id}.events.json"
            write_wav(out / wav_rel, render_audio(events, timbre, seed=seed), timbre.sample_rate)
            atomic_write_text(out / ev_rel, dumps(events.to_dict()))
            tracks.append({"track_id": track_id, "split": split, "timbre": label, "seed": seed,
                           "wav_path": wav_rel, "events_path": ev_rel, "note_count": len(events)})
        logger.info("rendered %s split", split)
    atomic_write_text(out / "config.json", config_mod.dumps(cfg))
    _write_json(out / "manifest.json", {"version": MANIFEST_VERSION, "seed": cfg.seed, "tracks": tracks})


def cmd_histify(cfg: RunConfig, args) -> None:
    root, tracks = load_manifest(args.manifest)
    window = WindowSpec.parse(args.window if args.window is not None else cfg.histogram.window)
    alpha = cfg.histogram.noise_alpha if args.noise is None else args.noise
    noise_seed = cfg.seed if cfg.histogram.noise_seed is None else cfg.histogram.noise_seed
    splits = args.split or ["train"]
    out = Path(args.out_dir)
    for i, entry in enumerate(t for t in tracks if t["split"] in splits):
        events = load_events(root / entry["events_path"])
        hists = histograms_for(events, window, alpha, noise_seed, i)
        atomic_write_text(out / f"{entry['track_id']}.hist.json", dumps(histograms_to_dict(hists, window)))


def cmd_pretrain(cfg: RunConfig, args) -> None:
    from .pipeline import TrackData

    root, tracks = load_manifest(args.manifest)
    data = []
    for entry in _entries(tracks, args.split):
        feats = load_features(root, entry, cfg)
        events = load_events(root / entry["events_path"])
        _labels_for(events, feats, cfg, entry["track_id"])
        data.append(TrackData(entry["track_id"], entry["split"], events, feats))
    model, trace = pretrain_model(cfg, data)
    save_checkpoint(args.out, model)
    logger.info("pretrained %d steps, final loss %.5f", len(trace), trace[-1] if trace else float("nan"))


def _em_inputs(cfg: RunConfig, root: Path, tracks: list[dict], hist_dir: Path, with_aug: bool):
    em_tracks, truth = [], []
    for entry in _entries(tracks, "train"):
        tid = entry["track_id"]
        feats = load_features(root, entry, cfg)
        events = load_events(root / entry["events_path"])
        truth.append(_labels_for(events, feats, cfg, tid))
        hists = _load_histograms(hist_dir, tid) if hist_dir is not None else None
        aug = []
        if with_aug and cfg.augment.copies > 0:
            a = cfg.augment
            timbre = cfg.timbre_a if entry.get("timbre") == "A" else cfg.timbre_b
            seed = int(entry.get("seed", 0))
            aug = augment(events, timbre, cfg.features,
                          shift_schedule(events, a.copies, a.max_shift, a.fractional, seed), seed)
        em_tracks.append(EMTrack(tid, feats, hists, events, aug, cfg.features.frame_len_s))
    return em_tracks, truth


def cmd_train_em(cfg: RunConfig, args) -> None:
    root, tracks = load_manifest(args.manifest)
    model = _load_model(args.init)
    base_total = cfg.em.steps_per_m_step * cfg.em.max_iterations
    if args.max_iterations is not None:
        if args.max_iterations < 1:
            raise UsageError("--max-iterations must be >= 1")
        cfg = replace(cfg, em=replace(cfg.em, max_iterations=args.max_iterations))
    if args.supervised and args.hists is not None:
        raise UsageError("--supervised trains on true labels; drop --hists")
    if not args.supervised and args.hists is None:
        raise UsageError("--hists is required unless --supervised is given")
    em_cfg = cfg.em_config()
    if args.max_iterations is not None and args.equal_budget:
        em_cfg = replace(em_cfg, steps_per_m_step=base_total // args.max_iterations)
    hist_dir = None if args.hists is None else Path(args.hists)
    tracks_em, truth = _em_inputs(cfg, root, tracks, hist_dir, with_aug=True)
    for tr in tracks_em:
        _check_model(model, tr.features, tr.track_id)
    test = []
    if not args.no_test:
        for entry in (t for t in tracks if t["split"] == "test"):
            feats = load_features(root, entry, cfg)
            _check_model(model, feats, entry["track_id"])
            test.append((load_events(root / entry["events_path"]), feats))
    out = Path(args.out_dir)
    if args.supervised:
        model, trace = supervised_baseline(model, tracks_em, truth, em_cfg)
        labels = dict(zip([t.track_id for t in tracks_em], truth))
        rows = [{"iteration": 1, "supervised": True,
                 "test_f": _test_f(model, test, cfg) if test else None}]
        timing = []
    else:
        result = run_countem(model, tracks_em, em_cfg, test=test)
        model, labels = result.model, result.labels
        rows, timing = [], []
        for r in result.report:
            d = r.as_dict()
            timing.append({"iteration": d["iteration"], "wall_time_s": d.pop("wall_time_s")})
            rows.append(d)
    save_checkpoint(out / "model.ckpt", model)
    for tid, y in labels.items():
        write_matrix(out / "labels" / f"{tid}.tpgm", y)
    atomic_write_text(out / "report.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    atomic_write_text(out / "timing.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in timing))


def _test_f(model, test, cfg: RunConfig) -> float:
    d = cfg.decode
    pairs = [(ref, transcribe(model, f, d.threshold, d.radius, cfg.features.frame_len_s)) for ref, f in test]
    return evaluate_corpus(pairs, d.tolerance_s).f_score


def cmd_predict(cfg: RunConfig, args) -> None:
    from .peakpick import threshold_peaks

    root, tracks = load_manifest(args.manifest)
    model = _load_model(args.checkpoint)
    mode = args.decode or cfg.decode.mode
    if mode == "histogram" and args.hists is None:
        raise UsageError("--decode histogram needs --hists")
    out = Path(args.out_dir)
    for entry in _entries(tracks, args.split):
        tid = entry["track_id"]
        feats = load_features(root, entry, cfg)
        _check_model(model, feats, tid)
        z = predict(model, feats, cfg.features.frame_len_s)
        if mode == "threshold":
            y = threshold_peaks(z, cfg.decode.threshold, cfg.decode.radius)
        else:
            hists = _load_histograms(Path(args.hists), tid)
            if hists[0].pitch_count != z.grid.pitch_count:
                raise DataError(f"{tid}: histogram has {hists[0].pitch_count} pitches, model {z.grid.pitch_count}")
            values, _ = estimate_labels(z.values, hists, z.grid, replace(cfg.peakpick, radius_frames=cfg.decode.radius))
            y = LabelMatrix(z.grid, values)
        write_matrix(out / f"{tid}.tpgm", z)
        atomic_write_text(out / f"{tid}.events.json", dumps(labels_to_events(y).to_dict()))


def cmd_eval(cfg: RunConfig, args) -> None:
    root, tracks = load_manifest(args.manifest)
    pred = Path(args.pred_dir)
    ids, pairs = [], []
    for entry in _entries(tracks, args.split):
        tid = entry["track_id"]
        ids.append(tid)
        pairs.append((load_events(root / entry["events_path"]), load_events(pred / f"{tid}.events.json")))
    onset = evaluate_corpus(pairs, cfg.decode.tolerance_s, ids)
    hist = evaluate_corpus(pairs, None, ids)
    rows = report_rows(onset, hist)
    prefix = Path(args.out)
    atomic_write_text(prefix.with_name(prefix.name + ".json"), report_json(rows))
    atomic_write_text(prefix.with_name(prefix.name + ".csv"), report_csv(rows))
    print(f"F={onset.f_score:.4f} P={onset.precision:.4f} R={onset.recall:.4f} "
          f"F_hist={hist.f_score:.4f} tracks={len(ids)}")


# -- parser ----------------------------------------------------------------------

def _global_flags(top: bool) -> argparse.ArgumentParser:
    # shared by the top-level parser and every subcommand so the flags may
    # go before or after the command name; subcommands must not reset them
    p = argparse.ArgumentParser(add_help=False)

    def default(value):
        return value if top else argparse.SUPPRESS

    p.add_argument("--config", metavar="PATH", default=default(None), help="JSON run config")
    p.add_argument("--seed", type=int, metavar="N", default=default(None), help="run seed (overrides the config)")
    p.add_argument("--threads", type=int, metavar="N", default=default(None), help="BLAS thread limit")
    p.add_argument("--set", action="append", metavar="K=V", dest="overrides", default=default([]),
                   help="override a config value, e.g. em.max_iterations=1")
    p.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="countem", description=__doc__.splitlines()[0], parents=[_global_flags(True)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = [_global_flags(False)]

    p = sub.add_parser("gen", parents=g, help="render the synthetic corpus")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("histify", parents=g, help="write per-track onset histograms")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--window", help="window length in seconds or 'full' (default: config)")
    p.add_argument("--noise", type=float, help="corruption level alpha in [0, 1)")
    p.add_argument("--split", action="append", choices=SPLITS, help="splits to process (default: train)")
    p.set_defaults(func=cmd_histify)

    p = sub.add_parser("pretrain", parents=g, help="supervised training on the pretrain split")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--split", default="pretrain", choices=SPLITS)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-em", parents=g, help="EM training from histograms")
    p.add_argument("manifest")
    p.add_argument("--init", required=True, help="initial checkpoint")
    p.add_argument("--hists", help="directory of histogram files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--equal-budget", action=argparse.BooleanOptionalAction, default=True,
                   help="with --max-iterations, keep the default run's total step count")
    p.add_argument("--supervised", action="store_true", help="train on true labels (upper bound)")
    p.add_argument("--no-test", action="store_true", help="skip per-iteration test scoring")
    p.set_defaults(func=cmd_train_em)

    p = sub.add_parser("predict", parents=g, help="write posteriorgrams and decoded events")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--decode", choices=["threshold", "histogram"])
    p.add_argument("--hists", help="histogram directory for --decode histogram")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=g, help="score decoded events against references")
    p.add_argument("manifest")
    p.add_argument("--pred-dir", required=True, help="directory of <track_id>.events.json")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--out", required=True, help="report prefix; writes PREFIX.json and PREFIX.csv")
    p.set_defaults(func=cmd_eval)
    return parser


@contextlib.contextmanager
def _thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


_DATA_ERRORS = (DataError, MatrixFormatError, CheckpointError, SMFParseError, WindowAlignmentError,
                PeakPickError, InfeasibleConfigError, TrainingError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load_config(args.config, args.overrides, args.seed)
        threads = args.threads if args.threads is not None else cfg.threads
        if threads is not None and threads < 1:
            raise UsageError("--threads must be >= 1")
        with _thread_limit(threads):
            args.func(cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"countem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"countem: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        print(f"countem: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
