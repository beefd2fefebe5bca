"""Command-line entry points.

Subcommands:
  gen-tasks <spec-file> <out>   synthesize task corpora into manifest dirs
  train <config>                run (or resume) a sequential experiment
  eval <checkpoint> <manifest>  score a manifest split with a trained model
  report <run-dir>...           combined table across runs (COV needs baselines)
  select-wd <config>            pick the weight-decay exponent on task 1

Exit codes: 0 success, 1 usage error, 2 data or integrity error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .checkpoint import CheckpointError, load_checkpoint
from .decoding import Decoder
from .harness import (
    ConfigError,
    ExperimentConfig,
    emit_report,
    load_run_records,
    run_experiment,
)
from .metrics import corpus_wer
from .model import ModelConfig
from .taskgen import (
    DataIntegrityError,
    ProtocolViolationError,
    TaskSpec,
    generate_task,
    load_manifest,
    write_manifest,
)
from .training import ParameterStore, select_weight_decay, uses_adapters

log = logging.getLogger("cladapt")

USAGE_ERROR = 1
DATA_ERROR = 2
DEFAULT_WD_CANDIDATES = [-1.0, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0, -8.0]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="cladapt", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-tasks", help="synthesize task corpora")
    gen.add_argument("spec_file", help="JSON file: list of task specs or {'tasks': [...]}")
    gen.add_argument("out", help="output directory (one task_<id>/ per spec)")

    train = sub.add_parser("train", help="run or resume an experiment")
    train.add_argument("config", help="experiment config JSON")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("checkpoint")
    ev.add_argument("manifest")
    ev.add_argument("--mode", default="task_label",
                    choices=["task_label", "conf-infer", "avg-apt"])
    ev.add_argument("--split", default="test", choices=["train", "dev", "test"])
    ev.add_argument("--beam", type=int, default=4)

    rep = sub.add_parser("report", help="combined report over run directories")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", help="also write report.txt/report.json here")

    wd = sub.add_parser("select-wd", help="pick the weight-decay exponent")
    wd.add_argument("config", help="experiment config JSON (first task is used)")
    wd.add_argument("--exhaustive", action="store_true",
                    help="train every candidate instead of stopping at the first pass")
    return parser


def _load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataIntegrityError(f"config is not valid JSON: {exc}")
    if "config" in raw:  # accept a run-dir config.json too
        raw = raw["config"]
    return ExperimentConfig.from_dict(raw)


def cmd_gen_tasks(args) -> int:
    try:
        with open(args.spec_file, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"spec file not found: {args.spec_file}")
    except json.JSONDecodeError as exc:
        raise DataIntegrityError(f"spec file is not valid JSON: {exc}")
    entries = raw["tasks"] if isinstance(raw, dict) else raw
    specs = [TaskSpec.from_dict(e) for e in entries]
    for spec in specs:
        out_dir = os.path.join(args.out, f"task_{spec.task_id}")
        write_manifest(generate_task(spec), out_dir)
        print(f"task {spec.task_id}: wrote {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    results = run_experiment(config)
    for res in results:
        print(f"seed {res.seed}: finished {len(config.tasks)} tasks -> {res.run_dir}")
    print(f"report: {os.path.join(config.output_dir, 'report.txt')}")
    return 0


def cmd_eval(args) -> int:
    store, info = load_checkpoint(args.checkpoint)
    dataset = load_manifest(args.manifest)
    utts = {"train": lambda: dataset.train, "dev": lambda: dataset.dev,
            "test": lambda: dataset.test}[args.split]()
    decoder = Decoder(store.model, beam_width=args.beam)
    mode = args.mode.replace("-", "_")
    if mode == "task_label":
        bank = None
        if info.uses_adapters:
            task_id = dataset.spec.task_id
            if task_id not in store.registry.banks:
                raise DataIntegrityError(
                    f"checkpoint has banks {info.task_ids} but the manifest is task "
                    f"{task_id}; pass a label-free --mode instead")
            bank = store.registry.get(task_id)
        hyps = decoder.decode_many(utts, bank)
    elif mode == "conf_infer":
        if not info.uses_adapters:
            raise DataIntegrityError("conf-infer needs a checkpoint with adapter banks")
        pairs = decoder.conf_infer_many(utts, store.registry)
        hyps = [h for h, _ in pairs]
        for u, (h, task) in zip(utts, pairs):
            print(f"{u.utt_id}\tinferred_task={task}\tscore={h.joint_score:.4f}")
    else:
        if not info.uses_adapters:
            raise DataIntegrityError("avg-apt needs a checkpoint with adapter banks")
        hyps = decoder.avg_apt_decode_many(utts, store.registry)
    wer = corpus_wer((u.tokens, h.tokens) for u, h in zip(utts, hyps))
    print(f"utterances={len(utts)} split={args.split} mode={args.mode} "
          f"WER={wer:.2f}% decodes={decoder.decode_count}")
    return 0


def cmd_report(args) -> int:
    records = []
    for run_dir in args.run_dirs:
        if not os.path.isdir(run_dir):
            raise UsageError(f"not a run directory: {run_dir}")
        records.extend(load_run_records(run_dir))
    text, payload = emit_report(records)
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


def cmd_select_wd(args) -> int:
    config = _load_config(args.config)
    candidates = config.wd_candidates or DEFAULT_WD_CANDIDATES
    dataset = generate_task(config.tasks[0])
    policy = config.policy

    def store_factory():
        from .model import Model

        return ParameterStore(Model(config.model, seed=policy.seed),
                              uses_adapters(policy.method), policy.adapter_dim)

    selection = select_weight_decay(dataset, store_factory, policy, candidates,
                                    beam_width=config.beam_width,
                                    exhaustive=args.exhaustive)
    print(f"reference dev WER (no decay): {selection.reference_wer:.2f}%")
    for omega, wer in selection.evaluated:
        verdict = "pass" if wer <= selection.reference_wer * (1 + selection.tolerance) \
            else "fail"
        print(f"  omega={omega:g}: dev WER {wer:.2f}% [{verdict}]")
    if selection.selected_exponent is None:
        print("selected: none (all candidates degrade the first task; train without decay)")
    else:
        print(f"selected: omega={selection.selected_exponent:g}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "gen-tasks": cmd_gen_tasks,
            "train": cmd_train,
            "eval": cmd_eval,
            "report": cmd_report,
            "select-wd": cmd_select_wd,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DataIntegrityError, ProtocolViolationError, CheckpointError,
            ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
