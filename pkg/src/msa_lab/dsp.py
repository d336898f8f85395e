"""Waveform-to-log-mel frontend: framing, mel projection, cropping, silence gate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.io.wavfile
import scipy.signal

TARGET_SR = 16000
SILENCE_THRESHOLD = 0.01
CHUNK_SECONDS = 4.0
CROP_FRAMES = 98


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = TARGET_SR

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)


@dataclass
class MelConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 64
    fmin: float = 0.0
    fmax: Optional[float] = None  # None -> sample_rate / 2
    log_floor: float = 1e-6

    def __post_init__(self):
        if self.window_ms < self.hop_ms:
            raise ValueError("window_ms must be >= hop_ms")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def floor_value(self) -> np.float32:
        """The log-domain value every silent bin takes."""
        return np.float32(np.log(self.log_floor))


@dataclass
class MelSpectrogram:
    data: np.ndarray  # (n_mels, n_frames), float32, log domain
    clip_id: str = ""
    source_id: Optional[str] = None

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def n_mels(self) -> int:
        return self.data.shape[0]


@dataclass
class CropWindow:
    start_frame: int
    length_frames: int = CROP_FRAMES

    def __post_init__(self):
        if self.start_frame < 0 or self.length_frames < 1:
            raise ValueError("crop_out_of_range")


def n_frames_for(length: int, win: int, hop: int) -> int:
    """floor((length - win) / hop) + 1; the framing arithmetic everything relies on."""
    if length < win:
        raise ValueError("clip_too_short")
    return (length - win) // hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Peak-1 triangular filters with edges equally spaced on the mel scale."""
    if not (fmin < fmax <= sample_rate / 2):
        raise ValueError("require fmin < fmax <= sample_rate/2")
    freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    weights = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, center, hi = pts[m], pts[m + 1], pts[m + 2]
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        weights[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return weights


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def compute_mel(w: Waveform, cfg: MelConfig) -> MelSpectrogram:
    """Log-compressed mel spectrogram: log(log_floor + mel_energy)."""
    sr = w.sample_rate
    win = cfg.window_samples(sr)
    hop = cfg.hop_samples(sr)
    if len(w.samples) < win:
        raise ValueError("clip_too_short")
    fmax = cfg.fmax if cfg.fmax is not None else sr / 2
    nf = n_frames_for(len(w.samples), win, hop)
    n_fft = _next_pow2(win)

    idx = np.arange(nf)[:, None] * hop + np.arange(win)[None, :]
    frames = w.samples[idx] * scipy.signal.get_window("hann", win, fftbins=True)
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))  # magnitude, not power
    fbank = mel_filterbank(cfg.n_mels, n_fft, sr, cfg.fmin, fmax)
    mel_energy = mag @ fbank.T
    data = np.log(cfg.log_floor + mel_energy).T.astype(np.float32)
    return MelSpectrogram(data=data)


def crop(spec: MelSpectrogram, win: CropWindow) -> MelSpectrogram:
    if win.start_frame + win.length_frames > spec.n_frames:
        raise ValueError("crop_out_of_range")
    sub = spec.data[:, win.start_frame:win.start_frame + win.length_frames].copy()
    return MelSpectrogram(data=sub, clip_id=spec.clip_id, source_id=spec.source_id)


def is_silent(segment: Waveform) -> bool:
    """True iff mean absolute amplitude sits below the silence threshold."""
    if len(segment.samples) == 0:
        raise ValueError("empty_segment")
    return float(np.mean(np.abs(segment.samples))) < SILENCE_THRESHOLD


def silent_crop(cfg: MelConfig, length_frames: int = CROP_FRAMES) -> np.ndarray:
    """The spectrogram a zeroed waveform produces: every bin at the log floor."""
    return np.full((cfg.n_mels, length_frames), cfg.floor_value(), dtype=np.float32)


def resample_linear(samples: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Linear-interpolation resampling; identity when rates match."""
    if sr_in == sr_out:
        return np.asarray(samples, dtype=np.float64)
    n_out = int(round(len(samples) * sr_out / sr_in))
    t_out = np.arange(n_out) / sr_out
    t_in = np.arange(len(samples)) / sr_in
    return np.interp(t_out, t_in, samples)


def read_wav(path, target_sr: int = TARGET_SR) -> Waveform:
    """Read mono 16-bit PCM or 32-bit float WAV, resampling to target_sr."""
    sr, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"unreadable_wav: {path} is not mono")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unreadable_wav: {path} has unsupported dtype {data.dtype}")
    return Waveform(resample_linear(samples, sr, target_sr), target_sr)


def write_wav(path, w: Waveform) -> None:
    scipy.io.wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
