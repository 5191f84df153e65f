"""Log-Mel spectrogram frontend.

Audio segments are framed, Hamming-windowed, transformed with a real FFT,
integrated into triangular Mel bands and log-compressed.  A global min/max
pair computed over the training set maps the log energies into [-1, 1].
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPEC_MAGIC = b"S2IS"
SPEC_VERSION = 1
_SPEC_HEADER = struct.Struct("<4sIIIB")


@dataclass(frozen=True)
class AudioSegment:
    samples: np.ndarray
    sample_rate: int
    duration: float = 1.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"audio must be mono, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        expected = round(self.sample_rate * self.duration)
        if samples.size != expected:
            raise ValueError(
                f"expected {expected} samples for {self.duration}s at "
                f"{self.sample_rate} Hz, got {samples.size}"
            )
        object.__setattr__(self, "samples", samples)

    @classmethod
    def from_samples(cls, samples, sample_rate: int) -> "AudioSegment":
        samples = np.asarray(samples)
        return cls(samples, sample_rate, samples.size / sample_rate)


@dataclass(frozen=True)
class NormStats:
    min: float
    max: float


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    fft_size: int | None = None
    mel_fmin: float = 0.0
    mel_fmax: float | None = None
    log_floor: float = 1e-10
    norm_stats: NormStats | None = None

    def __post_init__(self):
        if not self.frame_ms > self.hop_ms > 0:
            raise ValueError("need frame_ms > hop_ms > 0")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.fft_size is None:
            object.__setattr__(self, "fft_size", 1 << (self.frame_length - 1).bit_length())
        if self.fft_size < self.frame_length:
            raise ValueError(
                f"fft_size {self.fft_size} shorter than frame ({self.frame_length} samples)"
            )
        if self.mel_fmax is None:
            object.__setattr__(self, "mel_fmax", self.sample_rate / 2)

    @property
    def frame_length(self) -> int:
        return round(self.sample_rate * self.frame_ms / 1000)

    @property
    def hop_length(self) -> int:
        return round(self.sample_rate * self.hop_ms / 1000)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.hop_length)

    @property
    def shape(self) -> tuple[int, int]:
        """Spectrogram shape for a 1-s segment."""
        return self.n_frames(self.sample_rate), self.n_mels


REFERENCE_FRONTEND = FrontendConfig()
# 20 x 32 spectrograms for CI-scale runs.
TINY_FRONTEND = FrontendConfig(sample_rate=8000, frame_ms=100.0, hop_ms=50.0, n_mels=32)


@dataclass
class Spectrogram:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrogram contains non-finite values")
        if self.normalized and np.abs(self.values).max(initial=0.0) > 1.0:
            raise ValueError("normalized spectrogram has entries outside [-1, 1]")

    @property
    def shape(self):
        return self.values.shape


def frame_signal(seg: AudioSegment, cfg: FrontendConfig) -> np.ndarray:
    """Split ``seg`` into overlapping frames, zero-padding the tail.

    Returns an array of shape ``(ceil(n / hop), frame_length)`` so that no
    sample is dropped: 1 s at 16 kHz with a 25 ms frame and 10 ms hop gives
    exactly 100 frames.
    """
    if seg.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"segment rate {seg.sample_rate} Hz does not match configured {cfg.sample_rate} Hz"
        )
    n = seg.samples.size
    frame, hop = cfg.frame_length, cfg.hop_length
    if n < frame:
        raise ValueError(f"segment has {n} samples, shorter than one frame ({frame})")
    n_frames = cfg.n_frames(n)
    padded_len = (n_frames - 1) * hop + frame
    padded = np.zeros(padded_len, dtype=np.float64)
    padded[:n] = seg.samples
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def hamming_window(n: int) -> np.ndarray:
    """Symmetric Hamming window, ``0.54 - 0.46 cos(2 pi i / (n - 1))``."""
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    i = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * i / (n - 1))


def stft_power(frames: np.ndarray, window: np.ndarray | None, fft_size: int) -> np.ndarray:
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] > fft_size:
        raise ValueError(f"frame length {frames.shape[1]} exceeds fft_size {fft_size}")
    if window is not None:
        frames = frames * window
    spectrum = np.fft.rfft(frames, n=fft_size, axis=1)
    return spectrum.real**2 + spectrum.imag**2


# Slaney-style Mel scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(hz):
    hz = np.asarray(hz, dtype=np.float64)
    lin = hz / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(hz, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(hz >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    lin = mel * _F_SP
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (np.maximum(mel, _MIN_LOG_MEL) - _MIN_LOG_MEL))
    return np.where(mel >= _MIN_LOG_MEL, log, lin)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    """Peak frequency (Hz) of each triangular band."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular Mel filterbank of shape ``(n_mels, fft_size // 2 + 1)``.

    Each band rises linearly from the previous band's centre to its own
    centre (weight 1) and falls to the next band's centre.
    """
    if not 0 <= cfg.mel_fmin < cfg.mel_fmax <= cfg.sample_rate / 2:
        raise ValueError("need 0 <= mel_fmin < mel_fmax <= sample_rate / 2")
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(
            f"{empty.size} of {cfg.n_mels} Mel bands contain no FFT bin "
            f"(first empty band {empty[0]}); reduce n_mels or raise fft_size"
        )
    return fb


def log_mel_spectrogram(seg: AudioSegment, cfg: FrontendConfig) -> Spectrogram:
    frames = frame_signal(seg, cfg)
    power = stft_power(frames, hamming_window(cfg.frame_length), cfg.fft_size)
    energies = power @ mel_filterbank(cfg).T
    return Spectrogram(np.log(np.maximum(energies, cfg.log_floor)), normalized=False)


def compute_norm_stats(spectrograms) -> NormStats:
    lo, hi = np.inf, -np.inf
    for spec in spectrograms:
        values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
        lo = min(lo, float(values.min()))
        hi = max(hi, float(values.max()))
    if not np.isfinite(lo):
        raise ValueError("no spectrograms to compute statistics from")
    return NormStats(lo, hi)


def normalize_spectrogram(spec: Spectrogram, stats: NormStats) -> Spectrogram:
    """Affine map ``stats.min -> -1``, ``stats.max -> +1``, clamped to [-1, 1]."""
    if stats.max <= stats.min:
        warnings.warn(f"degenerate normalization stats {stats}; mapping to 0", RuntimeWarning)
        return Spectrogram(np.zeros_like(spec.values), normalized=True)
    scaled = 2.0 * (spec.values - stats.min) / (stats.max - stats.min) - 1.0
    return Spectrogram(np.clip(scaled, -1.0, 1.0), normalized=True)


def denormalize_spectrogram(spec: Spectrogram, stats: NormStats) -> Spectrogram:
    values = (np.asarray(spec.values, dtype=np.float64) + 1.0) * 0.5 * (stats.max - stats.min) + stats.min
    return Spectrogram(values, normalized=False)


def write_spectrogram(path, spec: Spectrogram) -> None:
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(_SPEC_HEADER.pack(SPEC_MAGIC, SPEC_VERSION, rows, cols, int(spec.normalized)))
        fh.write(values.tobytes())


def read_spectrogram(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _SPEC_HEADER.size:
        raise ValueError(f"{path}: truncated spectrogram header")
    magic, version, rows, cols, normalized = _SPEC_HEADER.unpack_from(raw)
    if magic != SPEC_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != SPEC_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = raw[_SPEC_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise ValueError(f"{path}: expected {rows * cols} float32 values, got {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").reshape(rows, cols).copy()
    return Spectrogram(values, normalized=bool(normalized))


def write_norm_stats(path, stats: NormStats) -> None:
    Path(path).write_text(f"min={float(stats.min)!r}\nmax={float(stats.max)!r}\n")


def read_norm_stats(path) -> NormStats:
    fields = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            fields[key.strip()] = float(value)
    return NormStats(fields["min"], fields["max"])


def read_wav(path, expected_rate: int | None = None) -> AudioSegment:
    """Load a mono PCM16 or float32 WAV as an :class:`AudioSegment`."""
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return AudioSegment.from_samples(samples, rate)


def write_wav(path, seg: AudioSegment) -> None:
    from scipy.io import wavfile

    pcm = np.round(np.clip(seg.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    wavfile.write(path, seg.sample_rate, pcm)
