"""Command-line entry point: ``patientmae <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .core_types import ValidationError

logger = logging.getLogger("patientmae")

ENV_OUTPUT_ROOT = "PATIENTMAE_OUTPUT_ROOT"
ENV_WORKERS = "PATIENTMAE_WORKERS"
RUN_MANIFEST = "run_manifest.json"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_CHECKPOINT = 4
EXIT_TRAINING = 5


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _out_path(path) -> Path:
    p = Path(path)
    root = os.environ.get(ENV_OUTPUT_ROOT)
    return Path(root) / p if root and not p.is_absolute() else p


def _default_workers() -> int:
    return int(os.environ.get(ENV_WORKERS, "1"))


def write_run_manifest(out_dir: Path, record: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / (RUN_MANIFEST + ".tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
    os.replace(tmp, out_dir / RUN_MANIFEST)


class RunRecorder:
    """Writes the run manifest before and after a run."""

    def __init__(self, subcommand: str, out_dir, config: dict, seed):
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.record = {
            "subcommand": subcommand,
            "config": config,
            "seed": seed,
            "code_version": __version__,
            "start": _now(),
            "end": None,
            "status": "running",
            "outputs": [],
        }

    def __enter__(self):
        if self.out_dir is not None:
            write_run_manifest(self.out_dir, self.record)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.record["end"] = _now()
        self.record["status"] = "ok" if exc_type is None else f"failed: {exc_type.__name__}: {exc}"
        if self.out_dir is not None:
            write_run_manifest(self.out_dir, self.record)
        return False


# ---------------------------------------------------------------------- subcommands
def cmd_synth_gen(args):
    from .synth import DEFAULT_VIEWS, SynthSpec, generate_dataset

    views = DEFAULT_VIEWS if args.views is None else tuple((v[0], v[1:]) for v in args.views.split(","))
    spec = SynthSpec(n_patients=args.n, views=views, seed=args.seed)
    out = _out_path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ValidationError(f"output directory {out} exists and is not empty")
    with RunRecorder("synth-gen", None, spec.to_dict(), args.seed) as run:
        ds = generate_dataset(spec, out, workers=args.workers)
        run.record["outputs"] = [str(ds.manifest), str(ds.labels)]
    write_run_manifest(out, run.record)
    print(f"wrote {spec.n_patients} patients to {out}")


def cmd_pretrain(args):
    from .engine import TrainConfig, run_pretraining

    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {"workers": args.workers}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = replace(cfg, **overrides)
    patient_ids = None
    if args.labels:
        from .synth import read_labels

        rows = read_labels(args.labels)
        patient_ids = {pid for pid, r in rows.items() if r["split"] == args.split}
    out = _out_path(args.out)
    with RunRecorder("pretrain", out, {"train": cfg.to_dict(), "manifest": str(args.manifest),
                                       "labels": args.labels, "split": args.split,
                                       "resume": args.resume}, cfg.seed) as run:
        final = run_pretraining(args.manifest, cfg, out, resume_from=args.resume, patient_ids=patient_ids)
        run.record["outputs"] = [str(final), str(out / "losses.jsonl"), str(out / "schedule.tsv")]
    print(final)


def cmd_probe(args):
    from .probe import ProbeConfig, run_probe

    cfg = ProbeConfig(mode=args.mode, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      feature=args.feature, seed=args.seed)
    out = _out_path(args.out)
    with RunRecorder("probe", out, {"checkpoint": args.checkpoint, "manifest": args.manifest,
                                    "labels": args.labels, "task": args.task, "probe": {
                                        "mode": cfg.mode.value, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                                        "lr": cfg.learning_rate, "feature": cfg.feature}}, args.seed) as run:
        metrics = run_probe(args.checkpoint, args.manifest, args.labels, args.task, cfg, out)
        run.record["outputs"] = [str(out / "metrics.json")]
    print(json.dumps(metrics["splits"], indent=2))


def cmd_attn(args):
    from .ingest import load_image
    from .probe import export_attention

    out = _out_path(args.out)
    tokens = [t.strip().upper() for t in args.tokens.split(",") if t.strip()]
    with RunRecorder("attn", out, {"checkpoint": args.checkpoint, "image": args.image, "tokens": tokens,
                                   "layer": args.layer}, None) as run:
        written = export_attention(args.checkpoint, load_image(args.image), tokens, args.layer, out)
        run.record["outputs"] = [str(v[k]) for v in written.values() for k in ("array", "overlay")]
    for token, info in written.items():
        print(f"{token}\t{info['array']}\t{info['overlay']}")


def cmd_schedule(args):
    from .masking import MaskSchedule, schedule_table

    sched = MaskSchedule(r0=args.r0, rT=args.rT, T=args.T)
    lines = ["epoch\tmask_ratio"] + [f"{t}\t{r!r}" for t, r in schedule_table(sched)]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    else:
        sys.stdout.write(text)


def cmd_pairs_stats(args):
    from collections import Counter

    from .ingest import build_pair_index, enumerate_all_pairs, load_manifest

    records = load_manifest(args.manifest, with_masks=False)
    index = build_pair_index(records)
    pairs = enumerate_all_pairs(records)
    stats = {
        "patients": len(records),
        "images": sum(len(r.images) for r in records),
        "pairs": index.total,
        "cross_laterality_pairs": sum(p.cross_laterality for p in pairs),
        "cross_scanner_pairs": sum(p.image_a.scanner_id != p.image_b.scanner_id for p in pairs),
        "single_image_patients": sum(len(r.images) == 1 for r in records),
        "pairs_per_patient_histogram": {str(k): v for k, v in sorted(Counter(index.counts.values()).items())},
    }
    print(json.dumps(stats, indent=2))


# ---------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="patientmae", description=__doc__, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic fundus dataset", formatter_class=fmt)
    p.add_argument("--n", type=int, default=200, help="number of patients")
    p.add_argument("--out", required=True, help="output directory (must be empty or absent)")
    p.add_argument("--seed", type=int, default=7, help="generator seed")
    p.add_argument("--views", default=None, help="comma list of eye+scanner per image, e.g. LA,RB; omitted means LA,LB,RA,RB")
    p.add_argument("--workers", type=int, default=_default_workers(), help="parallel patient workers")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("pretrain", help="run pretraining from a manifest", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--config", default=None, help="JSON training config (TrainConfig fields)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--labels", default=None, help="labels CSV used to restrict patients to one split")
    p.add_argument("--split", default="train", help="split kept when --labels is given")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--workers", type=int, default=_default_workers(), help="data preparation workers")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="evaluate a checkpoint on a downstream task", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="pretraining checkpoint")
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--labels", required=True, help="labels CSV with splits")
    p.add_argument("--task", required=True, choices=["disease", "gender", "age"], help="target")
    p.add_argument("--mode", default="probe", choices=["probe", "finetune"], help="frozen probe or fine-tune")
    p.add_argument("--out", required=True, help="output directory for metrics.json")
    p.add_argument("--epochs", type=int, default=50, help="training epochs")
    p.add_argument("--batch-size", type=int, default=16, help="fine-tune minibatch size; the linear probe is full-batch")
    p.add_argument("--lr", type=float, default=None, help="learning rate (1e-3 probe, 5e-5 fine-tune)")
    p.add_argument("--feature", default="cls", choices=["cls", "mean"], help="encoder feature")
    p.add_argument("--seed", type=int, default=0, help="probe seed")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("attn", help="export token attention maps for one image", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="pretraining checkpoint")
    p.add_argument("--image", required=True, help="image file")
    p.add_argument("--tokens", default="CLS,AGE,GENDER", help="comma list of tokens")
    p.add_argument("--layer", type=int, default=-1, help="encoder layer (negative counts from the end)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("schedule", help="print the masking-ratio schedule as TSV", formatter_class=fmt)
    p.add_argument("--r0", type=float, default=0.985, help="initial masking ratio")
    p.add_argument("--rT", type=float, default=0.85, help="final masking ratio")
    p.add_argument("--T", type=int, default=300, help="total epochs")
    p.add_argument("--out", default=None, help="write TSV here instead of stdout")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("pairs-stats", help="summarise patient-level pairs of a manifest", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.set_defaults(func=cmd_pairs_stats)
    return parser


def main(argv=None) -> int:
    from .engine import CheckpointError, TrainingError
    from .objectives import NonFiniteLossError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error [validation]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CheckpointError as exc:
        print(f"error [checkpoint]: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingError, NonFiniteLossError) as exc:
        print(f"error [training]: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, RuntimeError) as exc:
        print(f"error [runtime]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
