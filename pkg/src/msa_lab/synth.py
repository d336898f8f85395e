"""Parametric multi-stem clip generator plus stem degradation and mask baselines.

Each clip is built from four source families (bass, drums, other, vocals)
whose parameters are drawn from a per-clip RNG stream, so generation is
reproducible clip-by-clip regardless of ordering. Per-chunk activity is
sampled per source; inactive chunks are exact zeros, and the mixture is the
sample-wise sum of the final stems.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .config import SOURCES, GeneratorConfig, substream
from .dsp import (CHUNK_SECONDS, TARGET_SR, MelSpectrogram, Waveform, is_silent)

SPLITS = ("train", "valid", "test")

# peak amplitude budget per source; the four stems sum to at most ~1.0
_BASS_AMPS = (0.12, 0.03)
_DRUM_SIGMA = 0.21
_DRUM_CLIP = 0.5
_DRUM_BURST_S = 0.18
_DRUM_DECAY_S = 0.08
_OTHER_NOTE_AMPS = (0.04, 0.02, 0.0067)
_VOCAL_AMPS = (0.09, 0.04, 0.02)


@dataclass
class StemSet:
    mixture: Waveform
    stems: dict[str, Waveform]
    activity: dict[str, list[bool]]


@dataclass
class ClipRecord:
    clip_id: str
    split: str
    tags: list[str]
    stem_paths: dict[str, str] = field(default_factory=dict)
    activity: dict[str, list[bool]] = field(default_factory=dict)
    n_chunks: int = 0
    n_frames: int = 0


def split_for(clip_id: str, ratio=(12, 1, 3)) -> str:
    """Deterministic split assignment by hashing the clip id."""
    digest = hashlib.sha256(clip_id.encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "little") / 2.0 ** 64
    total = float(sum(ratio))
    if u < ratio[0] / total:
        return "train"
    if u < (ratio[0] + ratio[1]) / total:
        return "valid"
    return "test"


def _tone(t: np.ndarray, freq: float, amps, phase: float = 0.0) -> np.ndarray:
    out = np.zeros_like(t)
    for k, a in enumerate(amps, start=1):
        out += a * np.sin(2 * np.pi * k * freq * t + k * phase)
    return out


def _synth_bass(t, root_pc: int, rng) -> np.ndarray:
    freq = 55.0 * 2.0 ** (root_pc / 12.0)  # stays below 250 Hz with its harmonic
    return _tone(t, freq, _BASS_AMPS, phase=rng.uniform(0, 2 * np.pi))


def _synth_drums(n: int, sr: int, tempo_bpm: float, rng) -> np.ndarray:
    """Identical broadband bursts on a tempo grid; tempo is the only clip-level knob."""
    out = np.zeros(n)
    period = 60.0 / tempo_bpm
    burst_len = int(_DRUM_BURST_S * sr)
    decay = np.exp(-np.arange(burst_len) / (_DRUM_DECAY_S * sr))
    phase = rng.uniform(0.0, period)
    onsets = np.arange(phase, n / sr, period)
    for onset in onsets:
        start = int(onset * sr)
        stop = min(start + burst_len, n)
        noise = rng.standard_normal(stop - start)
        out[start:stop] += np.clip(_DRUM_SIGMA * noise * decay[:stop - start],
                                   -_DRUM_CLIP, _DRUM_CLIP)
    return out


def _synth_other(t, root_pc: int, minor: bool, rng) -> np.ndarray:
    root = 220.0 * 2.0 ** (root_pc / 12.0)
    intervals = (0, 3, 7) if minor else (0, 4, 7)
    out = np.zeros_like(t)
    for iv in intervals:
        out += _tone(t, root * 2.0 ** (iv / 12.0), _OTHER_NOTE_AMPS,
                     phase=rng.uniform(0, 2 * np.pi))
    return out


def _synth_vocals(t, rng) -> np.ndarray:
    """Formant-like sweep: a gliding fundamental with vibrato and two harmonics."""
    f0 = rng.uniform(180.0, 500.0)
    vib_rate = rng.uniform(4.5, 7.5)
    vib_depth = rng.uniform(0.03, 0.08)
    glide = rng.uniform(-3.0, 3.0)  # semitones across the clip
    span = t[-1] if len(t) else 1.0
    freq = f0 * 2.0 ** (glide * t / (12.0 * max(span, 1e-9))) \
        * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t))
    phase = 2 * np.pi * np.cumsum(freq) / TARGET_SR
    out = np.zeros_like(t)
    for k, a in enumerate(_VOCAL_AMPS, start=1):
        out += a * np.sin(k * phase)
    return out


def generate_clip(cfg: GeneratorConfig, clip_index: int):
    """Build one StemSet plus its manifest record. Deterministic in (seed, clip_index)."""
    cfg.validate()
    seed = cfg.seed if cfg.seed is not None else 0
    rng = substream(seed, "data", clip_index)
    sr = TARGET_SR
    n = int(round(cfg.clip_seconds * sr))
    chunk = int(CHUNK_SECONDS * sr)
    n_chunks = n // chunk
    t = np.arange(n) / sr

    # clip-level parameters; draw order is fixed for reproducibility
    tempo = rng.uniform(*cfg.tempo_range)
    root_pc = int(rng.choice(np.asarray(cfg.pitch_set)))
    minor = bool(rng.integers(2))
    wanted = {src: rng.random(n_chunks) < cfg.activity_prob[src] for src in SOURCES}

    # keep at least one source playing per chunk so the mixture is never silent
    for c in range(n_chunks):
        if not any(wanted[src][c] for src in SOURCES):
            for src in ("other", "bass", "drums", "vocals"):
                if cfg.activity_prob[src] > 0:
                    wanted[src][c] = True
                    break

    raw = {
        "bass": _synth_bass(t, root_pc, rng),
        "drums": _synth_drums(n, sr, tempo, rng),
        "other": _synth_other(t, root_pc, minor, rng),
        "vocals": _synth_vocals(t, rng),
    }
    stems = {}
    activity = {}
    for src in SOURCES:
        x = raw[src]
        for c in range(n_chunks):
            if not wanted[src][c]:
                x[c * chunk:(c + 1) * chunk] = 0.0
        stems[src] = Waveform(x, sr)
        activity[src] = [not is_silent(Waveform(x[c * chunk:(c + 1) * chunk], sr))
                         for c in range(n_chunks)]

    mixture = Waveform(sum(stems[src].samples for src in SOURCES), sr)

    clip_id = f"clip{clip_index:06d}"
    tags = [f"pitch-{root_pc}"]
    if tempo > cfg.tempo_median:
        tags.append("fast")
    for src in SOURCES:
        if any(activity[src]):
            tags.append(f"{src}-present" if src != "vocals" else "vocal-present")
    record = ClipRecord(clip_id=clip_id, split=split_for(clip_id, cfg.split_ratio),
                        tags=sorted(tags), activity=activity, n_chunks=n_chunks)
    return StemSet(mixture=mixture, stems=stems, activity=activity), record


def degrade_stem(stem: Waveform, mixture: Waveform, leakage: float) -> Waveform:
    """Blend mixture into a stem to emulate a poorly separated source."""
    if not 0.0 <= leakage <= 1.0:
        raise ValueError("leakage must be in [0, 1]")
    if len(stem) != len(mixture):
        raise ValueError("length_mismatch: stem and mixture differ in length")
    return Waveform((1.0 - leakage) * stem.samples + leakage * mixture.samples,
                    stem.sample_rate)


def random_soft_mask(spec: MelSpectrogram, rng, log_floor: float = 1e-6) -> MelSpectrogram:
    """Multiply linear-domain mel energies by an i.i.d. uniform [0,1] mask."""
    energy = np.exp(spec.data.astype(np.float64)) - log_floor
    np.clip(energy, 0.0, None, out=energy)
    energy *= rng.uniform(0.0, 1.0, size=energy.shape)
    data = np.log(log_floor + energy).astype(np.float32)
    return MelSpectrogram(data=data, clip_id=spec.clip_id, source_id=spec.source_id)
