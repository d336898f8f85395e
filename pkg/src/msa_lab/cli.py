"""Command-line entry points: synth, pretrain, gradcheck, probe, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate as eval_mod
from . import model as model_mod
from . import trainer as trainer_mod
from .config import (ExperimentConfig, ModelConfig, load_config, mel_config,
                     save_config, substream)
from .dataset import Dataset, build_synthetic_dataset
from .loss import LossSpec, finite_difference_check
from .pairing import PairBatch

GRADCHECK_TOLERANCE = 1e-4


def cmd_synth(cfg: ExperimentConfig) -> Path:
    cfg.validate()
    data_dir = cfg.resolved_data_dir
    gen = cfg.generator
    if gen.seed is None:
        gen = type(gen)(**{**gen.__dict__, "seed": cfg.seed})
    build_synthetic_dataset(gen, mel_config(cfg), data_dir, leakage=cfg.leakage)
    save_config(cfg, data_dir / "config.json")
    return data_dir


def cmd_pretrain(cfg: ExperimentConfig) -> trainer_mod.PretrainResult:
    cfg.validate()
    dataset = Dataset(cfg.resolved_data_dir)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    return trainer_mod.pretrain(cfg, dataset, run_dir)


def gradcheck_batch(seed: int, batch_size: int = 6, n_silent: int = 2,
                    input_shape=(64, 98)) -> PairBatch:
    """Random spectrogram-like crops with a mixed silent mask, in float64."""
    rng = substream(seed, "gradcheck")
    mels, frames = input_shape
    anchors = rng.normal(-6.0, 2.0, size=(batch_size, mels, frames))
    positives = rng.normal(-6.0, 2.0, size=(batch_size, mels, frames))
    silent_mask = np.zeros(batch_size, dtype=bool)
    silent_mask[batch_size - n_silent:] = True
    positives[silent_mask] = np.log(1e-6)
    return PairBatch(anchors=anchors, positives=positives, silent_mask=silent_mask,
                     source_ids=["vocals"] * batch_size,
                     clip_ids=[f"gc{i}" for i in range(batch_size)],
                     anchor_starts=np.zeros(batch_size, dtype=int),
                     positive_starts=np.zeros(batch_size, dtype=int))


def cmd_gradcheck(cfg: ExperimentConfig, h: float = 1e-4) -> dict:
    """Analytic vs finite-difference gradients on a small 64-bit model."""
    cfg.validate()
    mcfg = ModelConfig(feature_dim=16, embed_dim=8,
                       encoder_spec=((4, (3, 5), (2, 3)), (8, (3, 5), (2, 2))),
                       init_seed=cfg.seed)
    params = model_mod.init_params(mcfg, seed=cfg.seed, dtype=np.float64)
    batch = gradcheck_batch(cfg.seed)
    results = {}
    for label, aggregate in (("aggregated", True), ("plain", False)):
        spec = LossSpec(temperature=cfg.train.temperature, aggregate_silent=aggregate)
        results[label] = finite_difference_check(params, batch, spec, h=h)
    results["max"] = max(results["aggregated"], results["plain"])
    results["tolerance"] = GRADCHECK_TOLERANCE
    results["passed"] = results["max"] < GRADCHECK_TOLERANCE
    return results


def _resolve_checkpoint(run_dir: Path, which: str) -> Path:
    if which in ("best", "final"):
        return run_dir / f"ckpt_{which}.msat"
    return Path(which)


def cmd_probe(cfg: ExperimentConfig, checkpoint: str = "best") -> eval_mod.ProbeReport:
    cfg.validate()
    dataset = Dataset(cfg.resolved_data_dir)
    run_dir = cfg.run_dir
    ckpt = _resolve_checkpoint(run_dir, checkpoint)
    params = model_mod.load_params(ckpt, cfg.model)

    tables = {split: eval_mod.extract_features(params, dataset, split)
              for split in ("train", "valid", "test")}
    rng = substream(cfg.seed, "probe")
    pcfg = cfg.probe
    if pcfg.task_type == "multilabel":
        tags = dataset.tag_vocabulary()
        labels = {split: eval_mod.tag_matrix(dataset, split, tags) for split in tables}
        seg = {split: labels[split][tables[split].clip_index] for split in tables}
        result = eval_mod.train_probe(tables["train"].segments, seg["train"],
                                      tables["valid"].segments, seg["valid"],
                                      pcfg, rng, tags=tags)
        kept = [tags.index(t) for t in result.tags]
        report = eval_mod.evaluate_probe(result, tables["test"], labels["test"][:, kept], pcfg)
    else:
        classes, labels = _class_labels(dataset, pcfg.class_prefix)
        seg = {split: labels[split][tables[split].clip_index] for split in tables}
        result = eval_mod.train_probe(tables["train"].segments, seg["train"],
                                      tables["valid"].segments, seg["valid"],
                                      pcfg, rng, tags=classes)
        report = eval_mod.evaluate_probe(result, tables["test"], labels["test"], pcfg)

    probe_dir = run_dir / "probe"
    eval_mod.write_report(report, probe_dir)
    save_config(cfg, probe_dir / "config.json")
    return report


def _class_labels(dataset: Dataset, prefix: str):
    """Single-label classes from mutually exclusive tags sharing a prefix."""
    classes = sorted({t for r in dataset.records for t in r.tags if t.startswith(prefix)})
    lookup = {c: i for i, c in enumerate(classes)}
    out = {}
    for split in ("train", "valid", "test"):
        records = dataset.clips(split)
        y = np.empty(len(records), dtype=np.int64)
        for i, rec in enumerate(records):
            hits = [t for t in rec.tags if t.startswith(prefix)]
            if len(hits) != 1:
                raise ValueError(f"clip {rec.clip_id}: expected exactly one {prefix}* tag, "
                                 f"found {hits}")
            y[i] = lookup[hits[0]]
        out[split] = y
    return classes, out


def cmd_report(run_dirs: list, out_dir=".") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for rd in run_dirs:
        rd = Path(rd)
        cfg = json.loads((rd / "config.json").read_text())
        report = eval_mod.load_report(rd)
        runs.append((rd.name, cfg, report))

    comparison = out_dir / "comparison.csv"
    with open(comparison, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "variant", "source", "metric", "value"])
        for name, cfg, report in runs:
            variant = cfg["pairing"]["variant"]
            source = cfg["pairing"]["source"] or ""
            for metric in ("macro_roc_auc", "macro_pr_auc", "weighted_accuracy"):
                if report.get(metric) is not None:
                    writer.writerow([name, variant, source, metric, f"{report[metric]:.9g}"])

    if len(runs) == 2:
        (name_a, _, rep_a), (name_b, _, rep_b) = runs
        with open(out_dir / "differential.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tag", f"pr_auc_{name_a}", f"pr_auc_{name_b}", "pr_auc_diff"])
            shared = sorted(set(rep_a["per_tag"]) & set(rep_b["per_tag"]))
            for tag in shared:
                a = rep_a["per_tag"][tag]["pr_auc"]
                b = rep_b["per_tag"][tag]["pr_auc"]
                writer.writerow([tag, f"{a:.9g}", f"{b:.9g}", f"{b - a:.9g}"])
    return comparison


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msa-lab",
                                     description="Source-association contrastive pretraining lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variant", type=str, default=None,
                       choices=["MSA", "NSV1", "NSV2", "A1", "A2", "A3", "COLA", "RANDMASK"])
        p.add_argument("--source", type=str, default=None,
                       choices=["bass", "drums", "other", "vocals"])
        p.add_argument("--leakage", type=float, default=None)
        p.add_argument("--run-id", type=str, default=None)
        p.add_argument("--output-dir", type=str, default=None)
        p.add_argument("--data-dir", type=str, default=None)

    for name, help_text in (("synth", "generate a synthetic stem dataset"),
                            ("pretrain", "run self-supervised pretraining"),
                            ("gradcheck", "verify analytic gradients against finite differences"),
                            ("probe", "train and evaluate a frozen-encoder probe")):
        common(sub.add_parser(name, help=help_text))
    sub.choices["probe"].add_argument("--checkpoint", type=str, default="best",
                                      help="'best', 'final', or an explicit path")
    rep = sub.add_parser("report", help="combine probe reports across runs")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", type=str, default=".")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.variant is not None:
        cfg.pairing.variant = args.variant
    if args.source is not None:
        cfg.pairing.source = args.source
    if args.leakage is not None:
        cfg.leakage = args.leakage
    if args.run_id is not None:
        cfg.run_id = args.run_id
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.data_dir is not None:
        cfg.data_dir = args.data_dir
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        path = cmd_report(args.run_dirs, args.out)
        print(f"wrote {path}")
        return 0

    cfg = _config_from_args(args)
    if args.command == "synth":
        path = cmd_synth(cfg)
        print(f"dataset written to {path}")
    elif args.command == "pretrain":
        result = cmd_pretrain(cfg)
        print(f"pretrained through step {result.last_step} "
              f"(best validation at step {result.best_step}); run dir {result.run_dir}")
    elif args.command == "gradcheck":
        results = cmd_gradcheck(cfg)
        print(f"gradcheck aggregated={results['aggregated']:.3e} "
              f"plain={results['plain']:.3e} tolerance={results['tolerance']:.0e}")
        if not results["passed"]:
            print("gradcheck FAILED", file=sys.stderr)
            return 1
        print("gradcheck passed")
    elif args.command == "probe":
        report = cmd_probe(cfg, checkpoint=args.checkpoint)
        if report.task_type == "multilabel":
            print(f"macro ROC-AUC {report.macro_roc_auc:.4f} "
                  f"macro PR-AUC {report.macro_pr_auc:.4f}")
        else:
            print(f"weighted accuracy {report.weighted_accuracy_value:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
