"""Contrastive batch mining for the source-association pretext task.

Variants:
  MSA      one source per batch, positives may be silent (log-floor crops)
  NSV1     as MSA, but only clips whose selected source is active
  NSV2     as NSV1, but the source is drawn per item
  A1       as MSA, but the source is drawn per item (silence allowed)
  A2       batches identical to MSA; the loss skips centroid aggregation
  A3       as MSA, but the positive crop is temporally aligned with the anchor
  COLA     positive is a second crop of the same mixture chunk
  RANDMASK as COLA, with a random soft mask applied to the positive

Anchor and positive crops are always taken inside the same 4-second chunk of
a clip; anchors come from the mixture, which is never silent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .config import SOURCES, VARIANTS
from .dataset import Dataset
from .dsp import CROP_FRAMES, MelSpectrogram
from .synth import random_soft_mask

_BATCH_SOURCE_KINDS = ("MSA", "A2", "A3", "NSV1")
_ITEM_SOURCE_KINDS = ("NSV2", "A1")


@dataclass
class PairVariant:
    kind: str = "MSA"
    source: Optional[str] = None

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}")
        if self.source is not None and self.kind not in _BATCH_SOURCE_KINDS:
            raise ValueError(f"fixed source is incompatible with variant {self.kind}")

    @property
    def aggregate_silent(self) -> bool:
        return self.kind != "A2"


@dataclass
class PairBatch:
    anchors: np.ndarray        # (B, n_mels, 98) float32
    positives: np.ndarray      # (B, n_mels, 98) float32
    silent_mask: np.ndarray    # (B,) bool
    source_ids: list[str]
    clip_ids: list[str]
    anchor_starts: np.ndarray   # chunk-local crop starts, for contract checks
    positive_starts: np.ndarray

    def __len__(self):
        return len(self.clip_ids)


def _draw_distinct(pool: list, count: int, rng) -> list:
    if len(pool) < count:
        raise ValueError("dataset_exhausted")
    idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in idx]


def mine_batch(dataset: Dataset, variant: PairVariant, batch_size: int,
               rng: np.random.Generator, split: str = "train") -> PairBatch:
    """Draw one batch; fully determined by the generator state handed in."""
    kind = variant.kind
    max_start = dataset.chunk_frames - CROP_FRAMES
    if max_start < 0:
        raise ValueError("chunks are shorter than one crop")

    if kind in _BATCH_SOURCE_KINDS:
        batch_src = variant.source or SOURCES[rng.integers(len(SOURCES))]
    else:
        batch_src = None

    if kind == "NSV1":
        records = _draw_distinct(dataset.active_pool(split, batch_src), batch_size, rng)
        sources = [batch_src] * batch_size
    elif kind in _ITEM_SOURCE_KINDS:
        records, sources, used = [], [], set()
        for _ in range(batch_size):
            src = SOURCES[rng.integers(len(SOURCES))]
            pool = dataset.active_pool(split, src) if kind == "NSV2" else dataset.clips(split)
            pool = [r for r in pool if r.clip_id not in used]
            if not pool:
                raise ValueError("dataset_exhausted")
            rec = pool[rng.integers(len(pool))]
            used.add(rec.clip_id)
            records.append(rec)
            sources.append(src)
    else:
        records = _draw_distinct(dataset.clips(split), batch_size, rng)
        sources = [batch_src if batch_src else "mix"] * batch_size

    anchors, positives, silent, a_starts, p_starts = [], [], [], [], []
    for rec, src in zip(records, sources):
        if kind in ("NSV1", "NSV2"):
            active_chunks = [c for c, on in enumerate(rec.activity[src]) if on]
            chunk_idx = active_chunks[rng.integers(len(active_chunks))]
        else:
            chunk_idx = int(rng.integers(rec.n_chunks))

        a_start = int(rng.integers(max_start + 1))
        mix_chunk = dataset.mix_chunk_spec(rec.clip_id, chunk_idx)
        anchors.append(np.ascontiguousarray(mix_chunk[:, a_start:a_start + CROP_FRAMES]))

        if kind == "A3":
            p_start = a_start
        else:
            p_start = int(rng.integers(max_start + 1))

        if kind in ("COLA", "RANDMASK"):
            pos = np.ascontiguousarray(mix_chunk[:, p_start:p_start + CROP_FRAMES])
            if kind == "RANDMASK":
                pos = random_soft_mask(MelSpectrogram(pos), rng,
                                       log_floor=dataset.mel_cfg.log_floor).data
            positives.append(pos)
            silent.append(False)
        else:
            src_chunk = dataset.source_chunk_spec(rec.clip_id, src, chunk_idx)
            positives.append(np.ascontiguousarray(src_chunk[:, p_start:p_start + CROP_FRAMES]))
            silent.append(not rec.activity[src][chunk_idx])
        a_starts.append(a_start)
        p_starts.append(p_start)

    return PairBatch(anchors=np.stack(anchors), positives=np.stack(positives),
                     silent_mask=np.asarray(silent, dtype=bool),
                     source_ids=sources, clip_ids=[r.clip_id for r in records],
                     anchor_starts=np.asarray(a_starts), positive_starts=np.asarray(p_starts))


def resample_if_degenerate(batch: PairBatch, redraw: Callable[[], PairBatch],
                           max_redraws: int = 100) -> PairBatch:
    """Replace batches whose positives are all silent (the loss is vacuous there)."""
    for _ in range(max_redraws):
        if not batch.silent_mask.all():
            return batch
        batch = redraw()
    raise ValueError("degenerate_dataset")
