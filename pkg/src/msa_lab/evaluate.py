"""Frozen-encoder probing: feature extraction, shallow classifiers, metrics.

Clips are tiled into non-overlapping 98-frame segments; the frozen encoder
maps each segment to a feature vector, a shallow head is trained on segment
features with each segment inheriting its clip's labels, and clip-level
scores are the mean of per-segment probabilities. Metrics are exact:
ROC-AUC via the rank (Mann-Whitney) formulation with tie averaging, PR-AUC
as average precision with tie blocks processed together.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .config import ProbeConfig
from .dataset import Dataset
from .dsp import CROP_FRAMES
from .model import ModelParams, encode_batch
from .trainer import TrainState, adam_update


@dataclass
class FeatureTable:
    clip_ids: list[str]
    segments: np.ndarray    # (n_segments, feature_dim)
    clip_index: np.ndarray  # (n_segments,) index into clip_ids

    def segments_of(self, clip_pos: int) -> np.ndarray:
        return self.segments[self.clip_index == clip_pos]


def extract_features(params: ModelParams, dataset: Dataset, split: str,
                     batch_size: int = 512) -> FeatureTable:
    """Encoder features for non-overlapping 98-frame tiles of every clip."""
    records = dataset.clips(split)
    crops = []
    clip_index = []
    for pos, rec in enumerate(records):
        spec = dataset.mix_spec(rec.clip_id)
        n_seg = spec.shape[1] // CROP_FRAMES
        for k in range(n_seg):
            crops.append(spec[:, k * CROP_FRAMES:(k + 1) * CROP_FRAMES])
        clip_index.extend([pos] * n_seg)
    stacked = np.stack(crops)
    feats = np.concatenate([encode_batch(params, stacked[i:i + batch_size])
                            for i in range(0, len(stacked), batch_size)])
    return FeatureTable(clip_ids=[r.clip_id for r in records], segments=feats,
                        clip_index=np.asarray(clip_index))


def tag_matrix(dataset: Dataset, split: str, tags: list[str]) -> np.ndarray:
    records = dataset.clips(split)
    out = np.zeros((len(records), len(tags)), dtype=np.float32)
    lookup = {t: j for j, t in enumerate(tags)}
    for i, rec in enumerate(records):
        for t in rec.tags:
            if t in lookup:
                out[i, lookup[t]] = 1.0
    return out


# ---------------------------------------------------------------------------
# probe heads
# ---------------------------------------------------------------------------

def _init_probe(cfg: ProbeConfig, feature_dim: int, n_out: int, rng) -> dict[str, np.ndarray]:
    def he(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(np.float32)

    if cfg.head == "linear":
        return {"w": he((feature_dim, n_out), feature_dim),
                "b": np.zeros(n_out, dtype=np.float32)}
    return {"w1": he((feature_dim, cfg.hidden_dim), feature_dim),
            "b1": np.zeros(cfg.hidden_dim, dtype=np.float32),
            "w2": he((cfg.hidden_dim, n_out), cfg.hidden_dim),
            "b2": np.zeros(n_out, dtype=np.float32)}


def _probe_graph(tape: Tape, probe_t, x):
    if "w" in probe_t:
        return ad.add_row_bias(tape, ad.matmul(tape, x, probe_t["w"]), probe_t["b"])
    h = ad.add_row_bias(tape, ad.matmul(tape, x, probe_t["w1"]), probe_t["b1"])
    h = ad.relu(tape, h)
    return ad.add_row_bias(tape, ad.matmul(tape, h, probe_t["w2"]), probe_t["b2"])


def probe_logits(probe: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    tape = Tape()
    probe_t = {k: ad.constant(v) for k, v in probe.items()}
    return _probe_graph(tape, probe_t, ad.constant(x.astype(np.float32, copy=False))).data


def probe_probs(probe, x, task_type: str) -> np.ndarray:
    z = probe_logits(probe, x)
    if task_type == "multilabel":
        return 1.0 / (1.0 + np.exp(-z))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _probe_loss_and_grads(probe, x, y, task_type: str):
    tape = Tape()
    probe_t = {k: ad.parameter(v) for k, v in probe.items()}
    logits = _probe_graph(tape, probe_t, ad.constant(x))
    if task_type == "multilabel":
        loss_t = ad.sigmoid_bce(tape, logits, y)
    else:
        loss_t = ad.softmax_cross_entropy(tape, logits, y)
    tape.backward(loss_t)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in probe_t.items()}
    return float(loss_t.data), grads


def probe_loss(probe, x, y, task_type: str) -> float:
    tape = Tape()
    probe_t = {k: ad.constant(v) for k, v in probe.items()}
    logits = _probe_graph(tape, probe_t, ad.constant(x))
    if task_type == "multilabel":
        return float(ad.sigmoid_bce(tape, logits, y).data)
    return float(ad.softmax_cross_entropy(tape, logits, y).data)


def filter_trainable_tags(train_labels: np.ndarray, tags: list[str]):
    """Drop tags with zero positives in the training split."""
    keep = np.flatnonzero(train_labels.sum(axis=0) > 0)
    excluded = [tags[j] for j in range(len(tags)) if j not in set(keep)]
    return keep, excluded


@dataclass
class ProbeResult:
    probe: dict[str, np.ndarray]
    tags: list[str]                # columns the head was trained on
    excluded_tags: list[str]       # zero train positives
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def train_probe(train_features: np.ndarray, train_labels: np.ndarray,
                valid_features: np.ndarray, valid_labels: np.ndarray,
                cfg: ProbeConfig, rng, tags: Optional[list[str]] = None) -> ProbeResult:
    """Adam on segment features with patience-based early stopping on valid loss."""
    cfg.validate()
    task = cfg.task_type
    x_train = train_features.astype(np.float32, copy=False)
    x_valid = valid_features.astype(np.float32, copy=False)

    if task == "multilabel":
        tags = tags if tags is not None else [f"tag{j}" for j in range(train_labels.shape[1])]
        keep, excluded = filter_trainable_tags(train_labels, tags)
        y_train = train_labels[:, keep].astype(np.float32)
        y_valid = valid_labels[:, keep].astype(np.float32)
        kept_tags = [tags[j] for j in keep]
        n_out = len(keep)
    else:
        y_train = train_labels.astype(np.int64)
        y_valid = valid_labels.astype(np.int64)
        n_out = int(max(y_train.max(), y_valid.max())) + 1
        kept_tags = tags if tags is not None else [f"class{j}" for j in range(n_out)]
        excluded = []

    probe = _init_probe(cfg, x_train.shape[1], n_out, rng)
    state = TrainState.fresh(SimpleNamespace(tensors=probe))  # adam only touches .tensors
    best = {k: v.copy() for k, v in probe.items()}
    best_loss = np.inf
    best_epoch = 0
    stale = 0
    history = []
    n = len(x_train)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            sel = order[i:i + cfg.batch_size]
            _, grads = _probe_loss_and_grads(probe, x_train[sel], y_train[sel], task)
            adam_update(state, grads, cfg.resolved_lr)
        val_loss = probe_loss(probe, x_valid, y_valid, task)
        history.append({"epoch": epoch, "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss = val_loss
            best = {k: v.copy() for k, v in probe.items()}
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return ProbeResult(probe=best, tags=kept_tags, excluded_tags=excluded,
                       best_epoch=best_epoch, history=history)


def predict_clip(probe, segment_features: np.ndarray, task_type: str = "multilabel") -> np.ndarray:
    """Clip-level scores: mean of per-segment probability vectors."""
    if len(segment_features) == 0:
        raise ValueError("clip has no segments")
    return probe_probs(probe, np.atleast_2d(segment_features), task_type).mean(axis=0)


def predict_clips(probe, table: FeatureTable, task_type: str = "multilabel") -> np.ndarray:
    probs = probe_probs(probe, table.segments, task_type)
    n_clips = len(table.clip_ids)
    sums = np.zeros((n_clips, probs.shape[1]))
    np.add.at(sums, table.clip_index, probs)
    counts = np.bincount(table.clip_index, minlength=n_clips).astype(float)
    return sums / counts[:, None]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given the mean rank of their group."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie), exactly, via tie-averaged ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("single_class")
    ranks = _average_ranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision over the score-sorted sweep, ties processed as blocks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("single_class")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        fp += (j - i + 1) - int(y[i:j + 1].sum())
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def weighted_accuracy(predicted, true) -> float:
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise ValueError("prediction/label shape mismatch")
    return float(np.mean(predicted == true))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    task_type: str
    per_tag: dict[str, dict]            # tag -> {roc_auc, pr_auc, support}
    macro_roc_auc: Optional[float]
    macro_pr_auc: Optional[float]
    weighted_accuracy_value: Optional[float]
    excluded_tags: list[str] = field(default_factory=list)  # zero train positives
    skipped_tags: list[str] = field(default_factory=list)   # single-class eval split


def evaluate_probe(result: ProbeResult, table: FeatureTable, labels: np.ndarray,
                   cfg: ProbeConfig) -> ProbeReport:
    """Clip-level metrics for a trained probe on one split."""
    scores = predict_clips(result.probe, table, cfg.task_type)
    if cfg.task_type == "multiclass":
        wa = weighted_accuracy(scores.argmax(axis=1), labels)
        return ProbeReport(task_type="multiclass", per_tag={}, macro_roc_auc=None,
                           macro_pr_auc=None, weighted_accuracy_value=wa,
                           excluded_tags=result.excluded_tags)
    per_tag = {}
    skipped = []
    for j, tag in enumerate(result.tags):
        y = labels[:, j]
        support = int(y.sum())
        try:
            per_tag[tag] = {"roc_auc": roc_auc(scores[:, j], y),
                            "pr_auc": pr_auc(scores[:, j], y),
                            "support": support}
        except ValueError:
            skipped.append(tag)
    if per_tag:
        macro_roc = float(np.mean([m["roc_auc"] for m in per_tag.values()]))
        macro_pr = float(np.mean([m["pr_auc"] for m in per_tag.values()]))
    else:
        macro_roc = macro_pr = None
    return ProbeReport(task_type="multilabel", per_tag=per_tag, macro_roc_auc=macro_roc,
                       macro_pr_auc=macro_pr, weighted_accuracy_value=None,
                       excluded_tags=result.excluded_tags, skipped_tags=skipped)


def write_report(report: ProbeReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "task_type": report.task_type,
        "per_tag": report.per_tag,
        "macro_roc_auc": report.macro_roc_auc,
        "macro_pr_auc": report.macro_pr_auc,
        "weighted_accuracy": report.weighted_accuracy_value,
        "excluded_tags": report.excluded_tags,
        "skipped_tags": report.skipped_tags,
    }
    (out_dir / "probe_report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "probe_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tag", "roc_auc", "pr_auc", "support"])
        for tag in sorted(report.per_tag):
            m = report.per_tag[tag]
            writer.writerow([tag, f"{m['roc_auc']:.9g}", f"{m['pr_auc']:.9g}", m["support"]])
        if report.macro_roc_auc is not None:
            writer.writerow(["macro", f"{report.macro_roc_auc:.9g}",
                             f"{report.macro_pr_auc:.9g}", ""])
        if report.weighted_accuracy_value is not None:
            writer.writerow(["weighted_accuracy", f"{report.weighted_accuracy_value:.9g}", "", ""])


def load_report(run_dir) -> dict:
    return json.loads((Path(run_dir) / "probe" / "probe_report.json").read_text())
