"""Command-line front-end.

    tlattack train-teacher | retrain | attack | defend | sweep | report
        [--config PATH] [--seed N] [--workers N] [--out DIR]

Exit codes: 0 success, 2 config error, 3 missing or unreadable artifact,
4 numeric failure, 1 anything else. ``SSG_OUT`` overrides ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .attack import STOP_RULES, AttackTranscript, brute_force
from .data import save_idx, save_images_idx
from .defense import REJECT, detect_activations, evm_predict, fit_evm_from_data, fit_threshold
from .errors import (ConfigError, ConvergenceError, DegenerateSampleError, IdxFormatError, ModelFormatError,
                     NumericOverflowError)
from .experiment import attack_seed, build_student, build_teacher, extractor_of, load_corpus, make_split
from .io import atomic_write_bytes, atomic_write_text
from .metrics import baseline_random, build_report, class_histogram
from .netcore import Network, forward, load_model, save_model
from .pipeline import StudentModel, accuracy, accuracy_with_reject
from .sweep import load_plan, run_sweep

log = logging.getLogger("tlattack")


class MissingArtifact(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise MissingArtifact(f"cannot read {path}: {exc.strerror}") from exc


def _load_net(path) -> Network:
    return load_model(_read_bytes(path))


def _load_student(path) -> StudentModel:
    net = _load_net(path)
    if net.meta.get("role") != "student":
        raise ModelFormatError(f"{path} is not a student model")
    return StudentModel.from_network(net)


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_log(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "holdout_acc"])
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _write_npy(path, arr):
    buf = io.BytesIO()
    np.save(buf, arr)
    atomic_write_bytes(path, buf.getvalue())


class Context:
    def __init__(self, args):
        cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        self.config = cfg
        self.out = Path(os.environ.get("SSG_OUT") or args.out or cfg.paths.out)
        self.workers = max(1, args.workers or os.cpu_count() or 1)
        self._corpus = self._split = None

    def path(self, given, default_name: str) -> Path:
        return Path(given) if given else self.out / default_name

    @property
    def corpus(self):
        if self._corpus is None:
            try:
                self._corpus = load_corpus(self.config)
            except FileNotFoundError as exc:
                raise MissingArtifact(f"corpus file not found: {exc}") from exc
        return self._corpus

    @property
    def split(self):
        if self._split is None:
            self._split = make_split(self.config, self.corpus)
        return self._split

    def attack_config(self):
        return replace(self.config.attack, seed=attack_seed(self.config))


# -- commands ----------------------------------------------------------------

def cmd_train_teacher(ctx: Context, args) -> int:
    rows: list = []
    teacher = build_teacher(ctx.config, ctx.split, rows)
    atomic_write_bytes(ctx.out / "teacher.ssg", save_model(teacher))
    atomic_write_bytes(ctx.out / "extractor.ssg", save_model(extractor_of(teacher)))
    _write_log(ctx.out / "teacher_log.csv", rows)
    atomic_write_text(ctx.out / "config.txt", config_mod.dumps(ctx.config))
    if args.dump_idx:
        save_idx(ctx.corpus, ctx.out / "corpus-images.idx", ctx.out / "corpus-labels.idx")
    log.info("teacher holdout accuracy %.4f", teacher.meta["holdout_accuracy"])
    return 0


def cmd_retrain(ctx: Context, args) -> int:
    teacher = _load_net(ctx.path(args.teacher, "teacher.ssg"))
    extractor = extractor_of(teacher)
    rows: list = []
    student = build_student(ctx.config, extractor, ctx.split, log=rows)
    atomic_write_bytes(ctx.out / "student.ssg", save_model(student.network()))
    _write_log(ctx.out / "student_log.csv", rows)
    summary = {"accuracy": accuracy(student, ctx.split.holdout), "train_counts": student.meta["train_counts"],
               "reject_index": student.reject_index}
    if student.reject_index is not None and len(ctx.split.reject_probe):
        summary["accuracy_with_reject"] = accuracy_with_reject(student, ctx.split.holdout, ctx.split.reject_probe)
    _write_json(ctx.out / "retrain.json", summary)
    log.info("student accuracy %.4f", summary["accuracy"])
    return 0


def _attack_outputs(ctx: Context, transcript: AttackTranscript, student: StudentModel, acfg, dump_idx: bool):
    m = ctx.config.metrics
    atomic_write_text(ctx.out / "transcript.jsonl", transcript.to_jsonl())
    meta = dict(transcript.meta(), train_counts=student.meta.get("train_counts"), crafted="crafted.npy",
                attack=asdict(acfg))
    _write_json(ctx.out / "transcript.meta.json", meta)
    inputs = transcript.inputs if len(transcript) else np.zeros((0,) + student.extractor.input_shape)
    _write_npy(ctx.out / "crafted.npy", inputs)
    if dump_idx and len(transcript):
        save_images_idx(inputs, ctx.out / "crafted-images.idx")
    report = build_report(transcript, transcript.n_classes, m.thresholds, m.nabac_threshold,
                          student.meta.get("train_counts"), [r.wall_ms for r in transcript.records])
    out = report.to_dict()
    # natural inputs from classes the student never saw, as a reference attack
    out["baseline_effectiveness"] = None
    if len(ctx.split.reject_probe) and m.baseline_n > 0:
        _, eff = baseline_random(student, ctx.split.reject_probe, m.baseline_n, acfg.confidence_threshold,
                                 attack_seed(ctx.config))
        out["baseline_effectiveness"] = eff
    _write_json(ctx.out / "metrics.json", out)
    return report


def cmd_attack(ctx: Context, args) -> int:
    extractor = _load_net(ctx.path(args.extractor, "extractor.ssg"))
    student = _load_student(ctx.path(args.student, "student.ssg"))
    acfg = ctx.attack_config()
    dataset = ctx.split.teacher_set if acfg.init_mode == "sample" else None
    transcript = brute_force(extractor, student, acfg, args.stop, dataset=dataset, workers=ctx.workers)
    report = _attack_outputs(ctx, transcript, student, acfg, args.dump_idx)
    log.info("nabac %s eff95 %s eff99 %s", report.nabac, report.effectiveness.get(0.95),
             report.effectiveness.get(0.99))
    return 0


def _meta_path(transcript_path: Path) -> Path:
    name = transcript_path.name
    stem = name[:-len(".jsonl")] if name.endswith(".jsonl") else name
    return transcript_path.with_name(stem + ".meta.json")


def _read_transcript(path: Path):
    text = _read_bytes(path).decode("utf-8")
    try:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        meta = json.loads(_read_bytes(_meta_path(path)))
    except json.JSONDecodeError as exc:
        raise MissingArtifact(f"cannot parse transcript {path}: {exc}") from exc
    return records, meta


def cmd_defend(ctx: Context, args) -> int:
    extractor = _load_net(ctx.path(args.extractor, "extractor.ssg"))
    student = _load_student(ctx.path(args.student, "student.ssg"))
    d = ctx.config.defense
    if args.live:
        acfg = ctx.attack_config()
        dataset = ctx.split.teacher_set if acfg.init_mode == "sample" else None
        transcript = brute_force(extractor, student, acfg, "exhaust", dataset=dataset, workers=ctx.workers)
        records = [r.to_dict() for r in transcript.records]
        crafted = transcript.inputs if records else np.zeros((0,) + extractor.input_shape)
    else:
        tpath = ctx.path(args.transcript, "transcript.jsonl")
        records, meta = _read_transcript(tpath)
        crafted_path = tpath.with_name(meta.get("crafted", "crafted.npy"))
        try:
            crafted = np.load(io.BytesIO(_read_bytes(crafted_path)))
        except ValueError as exc:
            raise MissingArtifact(f"cannot parse {crafted_path}: {exc}") from exc
        if len(crafted) != len(records):
            raise MissingArtifact(f"{crafted_path} holds {len(crafted)} inputs for {len(records)} records")

    # the defender owns the student: both defenses are fitted on its training data
    split = ctx.split
    detector = fit_threshold(student.extractor, split.student_train, d.safety_factor)
    evm = fit_evm_from_data(student.extractor, split.student_train, d.tail_size, d.coverage_threshold, d.delta)
    atomic_write_text(ctx.out / "detector.json", detector.to_json() + "\n")
    atomic_write_text(ctx.out / "evm.json", evm.to_json() + "\n")

    acts = forward(student.extractor, crafted)[0] if len(crafted) else np.zeros((0, 1))
    flags = detect_activations(detector, acts) if len(crafted) else np.zeros(0, dtype=bool)
    evm_pred = evm_predict(evm, acts) if len(crafted) else np.zeros(0, dtype=np.int64)
    lines = []
    for rec, flag, ep in zip(records, flags, evm_pred):
        verdict = {"threshold": "flagged" if flag else "clean", "evm": "reject" if ep == REJECT else int(ep)}
        lines.append(json.dumps(dict(rec, defense_verdict=verdict), sort_keys=True) + "\n")
    atomic_write_text(ctx.out / "defense.jsonl", "".join(lines))

    bypass = np.array([bool(r.get("bypass")) for r in records], dtype=bool)
    hold_acts = forward(student.extractor, split.holdout.inputs)[0]
    fit_acts = forward(student.extractor, split.student_train.inputs)[0]
    report = {
        "n_crafted": len(records),
        "threshold": detector.threshold,
        "threshold_flag_rate": float(flags.mean()) if len(flags) else None,
        "threshold_flag_rate_bypass": float(flags[bypass].mean()) if bypass.any() else None,
        "threshold_fit_flag_rate": float(detect_activations(detector, fit_acts).mean()),
        "evm_reject_rate": float(np.mean(evm_pred == REJECT)) if len(evm_pred) else None,
        "evm_holdout_accuracy": float(np.mean(evm_predict(evm, hold_acts) == split.holdout.labels)),
        "evm_probe_accept_rate": None,
    }
    if len(split.reject_probe):
        probe_acts = forward(student.extractor, split.reject_probe.inputs)[0]
        report["evm_probe_accept_rate"] = float(np.mean(evm_predict(evm, probe_acts) != REJECT))
    _write_json(ctx.out / "defense.json", report)
    log.info("threshold flags %s, evm rejects %s", report["threshold_flag_rate"], report["evm_reject_rate"])
    return 0


def cmd_sweep(ctx: Context, args) -> int:
    plan = load_plan(args.plan)
    if args.teacher:
        teacher = _load_net(args.teacher)
    else:
        teacher = build_teacher(ctx.config, ctx.split)
    extractor = extractor_of(teacher)
    attacker_data = ctx.split.teacher_set
    run_sweep(ctx.config, plan, extractor, ctx.corpus, ctx.out, attacker_data, ctx.workers, log.info)
    return 0


def cmd_report(ctx: Context, args) -> int:
    records, meta = _read_transcript(Path(args.transcript))
    m = ctx.config.metrics
    k = int(meta["n_classes"])
    report = build_report(records, k, m.thresholds, m.nabac_threshold, meta.get("train_counts"),
                          [r["wall_ms"] for r in records if "wall_ms" in r])
    _write_json(ctx.out / "report.json", report.to_dict())
    hist = class_histogram(records, m.nabac_threshold, k)
    rows = "".join(f"{c},{n}\n" for c, n in hist.items())
    atomic_write_text(ctx.out / "fig5a.csv", "class,count\n" + rows)
    if report.js_distance_train is not None:
        atomic_write_text(ctx.out / "fig5b.csv",
                          f"js_train,js_target\n{report.js_distance_train!r},{report.js_distance_targets!r}\n")
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--workers", type=int, default=None, help="crafting threads (default: all CPUs)")
    common.add_argument("--out", help="output directory (SSG_OUT overrides)")

    p = argparse.ArgumentParser(prog="tlattack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("train-teacher", parents=[common])
    s.add_argument("--dump-idx", action="store_true", help="also write the corpus as IDX files")
    s.set_defaults(func=cmd_train_teacher)
    s = sub.add_parser("retrain", parents=[common])
    s.add_argument("--teacher")
    s.set_defaults(func=cmd_retrain)
    s = sub.add_parser("attack", parents=[common])
    s.add_argument("--extractor")
    s.add_argument("--student")
    s.add_argument("--stop", choices=STOP_RULES, default="exhaust")
    s.add_argument("--dump-idx", action="store_true", help="also write crafted inputs as an IDX file")
    s.set_defaults(func=cmd_attack)
    s = sub.add_parser("defend", parents=[common])
    s.add_argument("--extractor")
    s.add_argument("--student")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--transcript")
    g.add_argument("--live", action="store_true", help="run a fresh exhaust attack instead")
    s.set_defaults(func=cmd_defend)
    s = sub.add_parser("sweep", parents=[common])
    s.add_argument("--plan", required=True)
    s.add_argument("--teacher", help="reuse a trained teacher instead of training one")
    s.set_defaults(func=cmd_sweep)
    s = sub.add_parser("report", parents=[common])
    s.add_argument("--transcript", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args)
        return args.func(ctx, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (MissingArtifact, ModelFormatError, IdxFormatError) as exc:
        log.error("artifact error: %s", exc)
        return 3
    except (NumericOverflowError, ConvergenceError, DegenerateSampleError) as exc:
        log.error("numeric failure: %s", exc)
        return 4
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
