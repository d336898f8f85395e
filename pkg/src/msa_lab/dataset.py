"""Dataset persistence: spectrogram shards, JSONL manifests, ingestion, handles.

A dataset directory holds one MSAT shard per clip (full-clip mixture
spectrogram plus per-chunk source spectrograms for active chunks only;
silent chunks are reconstructed as log-floor constants), a JSONL manifest of
clip records, and the resolved config that produced it.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorfile
from .config import SOURCES, GeneratorConfig, MelSection, _from_dict, _to_jsonable
from .dsp import (CHUNK_SECONDS, TARGET_SR, MelConfig, MelSpectrogram, Waveform,
                  compute_mel, is_silent, n_frames_for, read_wav)
from .synth import ClipRecord, StemSet, degrade_stem, generate_clip, split_for

MANIFEST_NAME = "manifest.jsonl"
CONFIG_NAME = "dataset_config.json"
SHARD_DIR = "shards"


class IngestError(ValueError):
    pass


def _record_to_json(rec: ClipRecord) -> str:
    d = dataclasses.asdict(rec)
    d["activity"] = {k: [bool(b) for b in v] for k, v in d["activity"].items()}
    return json.dumps(d, sort_keys=True)


def _record_from_json(line: str) -> ClipRecord:
    d = json.loads(line)
    return ClipRecord(**d)


def _chunk_waveform(w: Waveform, c: int) -> Waveform:
    n = int(CHUNK_SECONDS * w.sample_rate)
    return Waveform(w.samples[c * n:(c + 1) * n], w.sample_rate)


def _write_clip_shard(out_dir: Path, rec: ClipRecord, stem_set: StemSet,
                      mel_cfg: MelConfig) -> None:
    tensors = {"mix": compute_mel(stem_set.mixture, mel_cfg).data}
    rec.n_frames = tensors["mix"].shape[1]
    for src in SOURCES:
        for c in range(rec.n_chunks):
            if rec.activity[src][c]:
                tensors[f"{src}/{c}"] = compute_mel(_chunk_waveform(stem_set.stems[src], c),
                                                    mel_cfg).data
    shard = Path(SHARD_DIR) / f"{rec.clip_id}.msat"
    tensorfile.write_tensors(out_dir / shard, tensors)
    rec.stem_paths = {src: str(shard) for src in SOURCES}


def build_synthetic_dataset(gen_cfg: GeneratorConfig, mel_cfg: MelConfig, out_dir,
                            leakage: float = 0.0) -> Path:
    """Generate, (optionally) degrade, and persist a synthetic stem corpus."""
    out_dir = Path(out_dir)
    (out_dir / SHARD_DIR).mkdir(parents=True, exist_ok=True)
    chunk = int(CHUNK_SECONDS * TARGET_SR)
    rows = []
    for i in range(gen_cfg.n_clips):
        stem_set, rec = generate_clip(gen_cfg, i)
        if leakage > 0.0:
            # emulate separator output: blend, re-apply the silence gate per chunk
            stems = {}
            activity = {}
            for src in SOURCES:
                deg = degrade_stem(stem_set.stems[src], stem_set.mixture, leakage)
                flags = []
                for c in range(rec.n_chunks):
                    seg = _chunk_waveform(deg, c)
                    silent = is_silent(seg)
                    if silent:
                        deg.samples[c * chunk:(c + 1) * chunk] = 0.0
                    flags.append(not silent)
                stems[src] = deg
                activity[src] = flags
            stem_set = StemSet(mixture=stem_set.mixture, stems=stems, activity=activity)
            rec.activity = activity  # tags keep describing the clean content
        _write_clip_shard(out_dir, rec, stem_set, mel_cfg)
        rows.append(rec)

    with open(out_dir / MANIFEST_NAME, "w") as fh:
        for rec in rows:
            fh.write(_record_to_json(rec) + "\n")
    meta = {"kind": "synthetic", "leakage": leakage,
            "generator": _to_jsonable(gen_cfg), "mel": _to_jsonable_mel(mel_cfg)}
    (out_dir / CONFIG_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir


def _to_jsonable_mel(mel_cfg: MelConfig) -> dict:
    return {"window_ms": mel_cfg.window_ms, "hop_ms": mel_cfg.hop_ms,
            "n_mels": mel_cfg.n_mels, "fmin": mel_cfg.fmin, "fmax": mel_cfg.fmax,
            "log_floor": mel_cfg.log_floor}


def _mel_from_meta(meta: dict) -> MelConfig:
    return MelConfig(**meta["mel"])


def ingest_stems(directory, manifest_path, out_dir, mel_cfg: MelConfig,
                 split_ratio=(12, 1, 3)) -> Path:
    """Build a dataset from externally separated stems.

    The input manifest is JSONL; each row needs clip_id, mixture (WAV path
    relative to `directory`), stems (source -> WAV path), tags, and an
    optional split.
    """
    directory = Path(directory)
    out_dir = Path(out_dir)
    (out_dir / SHARD_DIR).mkdir(parents=True, exist_ok=True)
    chunk = int(CHUNK_SECONDS * TARGET_SR)
    rows = []
    for line in Path(manifest_path).read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        clip_id = entry.get("clip_id")
        if not clip_id:
            raise IngestError("manifest row without clip_id")
        tags = entry.get("tags") or []
        if not tags:
            raise IngestError(f"clip {clip_id}: empty tag list")

        def _load(rel, what):
            path = directory / rel
            if not path.exists():
                raise IngestError(f"clip {clip_id}: missing {what} file {path}")
            try:
                return read_wav(path)
            except ValueError as e:
                raise IngestError(f"clip {clip_id}: {e}") from e

        mixture = _load(entry["mixture"], "mixture")
        stems = {}
        for src in SOURCES:
            if src not in entry.get("stems", {}):
                raise IngestError(f"clip {clip_id}: missing stem entry for {src}")
            stems[src] = _load(entry["stems"][src], f"stem {src}")
            if len(stems[src]) != len(mixture):
                raise IngestError(f"clip {clip_id}: length mismatch for stem {src} "
                                  f"({len(stems[src])} vs {len(mixture)} samples)")

        n_chunks = len(mixture) // chunk
        if n_chunks < 1:
            raise IngestError(f"clip {clip_id}: shorter than one {CHUNK_SECONDS:.0f}s chunk")
        activity = {}
        for src in SOURCES:
            flags = []
            for c in range(n_chunks):
                seg = _chunk_waveform(stems[src], c)
                silent = is_silent(seg)
                if silent:
                    stems[src].samples[c * chunk:(c + 1) * chunk] = 0.0
                flags.append(not silent)
            activity[src] = flags

        split = entry.get("split") or split_for(clip_id, split_ratio)
        rec = ClipRecord(clip_id=clip_id, split=split, tags=sorted(tags),
                         activity=activity, n_chunks=n_chunks)
        _write_clip_shard(out_dir, rec, StemSet(mixture, stems, activity), mel_cfg)
        rows.append(rec)

    with open(out_dir / MANIFEST_NAME, "w") as fh:
        for rec in rows:
            fh.write(_record_to_json(rec) + "\n")
    meta = {"kind": "ingested", "leakage": 0.0, "mel": _to_jsonable_mel(mel_cfg)}
    (out_dir / CONFIG_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir


class Dataset:
    """Read access to a dataset directory, with an in-memory shard cache."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / MANIFEST_NAME).exists():
            raise FileNotFoundError(f"no manifest in {self.root}")
        self.records = [_record_from_json(line)
                        for line in (self.root / MANIFEST_NAME).read_text().splitlines()
                        if line.strip()]
        meta = json.loads((self.root / CONFIG_NAME).read_text())
        self.mel_cfg = _mel_from_meta(meta)
        self.meta = meta
        self.by_id = {rec.clip_id: rec for rec in self.records}
        sr = TARGET_SR
        win = self.mel_cfg.window_samples(sr)
        hop = self.mel_cfg.hop_samples(sr)
        chunk = int(CHUNK_SECONDS * sr)
        if chunk % hop != 0:
            raise ValueError("chunk length must be a whole number of hops")
        self.chunk_frame_offset = chunk // hop
        self.chunk_frames = n_frames_for(chunk, win, hop)
        self._cache: dict[str, dict[str, np.ndarray]] = {}

    def clips(self, split: Optional[str] = None) -> list[ClipRecord]:
        if split is None:
            return list(self.records)
        return [r for r in self.records if r.split == split]

    def tag_vocabulary(self) -> list[str]:
        tags = set()
        for rec in self.records:
            tags.update(rec.tags)
        return sorted(tags)

    def _shard(self, clip_id: str) -> dict[str, np.ndarray]:
        if clip_id not in self._cache:
            rec = self.by_id[clip_id]
            self._cache[clip_id] = tensorfile.read_tensors(
                self.root / Path(next(iter(rec.stem_paths.values()))))
        return self._cache[clip_id]

    def mix_spec(self, clip_id: str) -> np.ndarray:
        return self._shard(clip_id)["mix"]

    def source_chunk_spec(self, clip_id: str, source: str, chunk_idx: int) -> np.ndarray:
        """Per-chunk source spectrogram; silent chunks come back as log-floor constants."""
        rec = self.by_id[clip_id]
        if rec.activity[source][chunk_idx]:
            return self._shard(clip_id)[f"{source}/{chunk_idx}"]
        return np.full((self.mel_cfg.n_mels, self.chunk_frames),
                       self.mel_cfg.floor_value(), dtype=np.float32)

    def mix_chunk_spec(self, clip_id: str, chunk_idx: int) -> np.ndarray:
        off = chunk_idx * self.chunk_frame_offset
        return self.mix_spec(clip_id)[:, off:off + self.chunk_frames]

    def active_pool(self, split: str, source: str) -> list[ClipRecord]:
        return [r for r in self.clips(split) if any(r.activity[source])]
