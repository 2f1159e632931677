"""STFT analysis, log1p compression and noisy-phase resynthesis.

Defaults follow the model's front end: 16 kHz audio, 512-sample (32 ms)
Hamming frames with a 256-sample (16 ms) hop, giving 257 one-sided bins.
Trailing samples that do not fill a whole frame are dropped.
"""

from __future__ import annotations

import re
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000


def hamming(n: int) -> np.ndarray:
    """Symmetric Hamming window, 0.54 - 0.46 cos(2 pi k / (n - 1))."""
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))


@dataclass(frozen=True)
class FrameParams:
    window_len: int = 512
    hop: int = 256
    window: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.hop < 1 or self.hop > self.window_len:
            raise ValueError(f"hop must be in [1, window_len], got {self.hop}")
        if self.window is None:
            object.__setattr__(self, "window", hamming(self.window_len))
        if len(self.window) != self.window_len:
            raise ValueError("window length does not match window_len")
        if np.any(self.window <= 0):
            raise ValueError("window must be strictly positive for overlap-add")

    @property
    def fft_bins(self) -> int:
        return self.window_len // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.window_len


DEFAULT_FRAMES = FrameParams()


@dataclass(frozen=True)
class Spectrogram:
    """T x F magnitude (or log1p-compressed magnitude) plus phase in radians."""

    mag: np.ndarray
    phase: np.ndarray
    compressed: bool = False

    def __post_init__(self):
        if self.mag.ndim != 2 or self.mag.shape[0] < 1:
            raise ValueError(f"spectrogram magnitude must be T x F with T >= 1, got {self.mag.shape}")
        if self.phase.shape != self.mag.shape:
            raise ValueError(f"phase shape {self.phase.shape} != magnitude shape {self.mag.shape}")
        if not np.all(np.isfinite(self.mag)):
            raise ValueError("spectrogram magnitude has non-finite values")
        if not self.compressed and np.any(self.mag < 0):
            raise ValueError("linear-domain magnitude must be nonnegative")

    @property
    def shape(self) -> tuple:
        return self.mag.shape


def _check_waveform(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"waveform must be 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform has non-finite samples")
    return x


def frame_signal(x: np.ndarray, p: FrameParams = DEFAULT_FRAMES) -> np.ndarray:
    """Windowed frames, shape (T, window_len)."""
    x = _check_waveform(x)
    if len(x) < p.window_len:
        raise ValueError(f"signal too short: {len(x)} samples < window of {p.window_len}")
    T = p.n_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, p.window_len)[::p.hop][:T]
    return frames * p.window


def stft(x, p: FrameParams = DEFAULT_FRAMES) -> Spectrogram:
    spec = np.fft.rfft(frame_signal(x, p), axis=-1)
    return Spectrogram(np.abs(spec), np.angle(spec))


def istft(s: Spectrogram, p: FrameParams = DEFAULT_FRAMES) -> np.ndarray:
    """Weighted overlap-add inverse; exact wherever the frames overlap fully."""
    if s.compressed:
        raise ValueError("decompress first: istft needs a linear-domain magnitude")
    if s.mag.shape[1] != p.fft_bins:
        raise ValueError(f"spectrogram has {s.mag.shape[1]} bins, expected {p.fft_bins}")
    frames = np.fft.irfft(s.mag * np.exp(1j * s.phase), n=p.window_len, axis=-1)
    T = frames.shape[0]
    out = np.zeros(p.n_samples(T))
    norm = np.zeros_like(out)
    w2 = p.window ** 2
    for t in range(T):
        sl = slice(t * p.hop, t * p.hop + p.window_len)
        out[sl] += frames[t] * p.window
        norm[sl] += w2
    return out / norm


def compress(s: Spectrogram) -> Spectrogram:
    if s.compressed:
        raise ValueError("spectrogram is already compressed")
    return replace(s, mag=np.log1p(s.mag), compressed=True)


def decompress(s: Spectrogram) -> Spectrogram:
    if not s.compressed:
        raise ValueError("spectrogram is not compressed")
    return Spectrogram(np.maximum(np.expm1(s.mag), 0.0), s.phase, compressed=False)


def resynthesize(enhanced_mag: Spectrogram | np.ndarray, noisy: Spectrogram,
                 p: FrameParams = DEFAULT_FRAMES) -> np.ndarray:
    """Waveform from an enhanced linear magnitude and the noisy phase."""
    mag = enhanced_mag
    if isinstance(enhanced_mag, Spectrogram):
        if enhanced_mag.compressed:
            raise ValueError("decompress first: enhanced magnitude is compressed")
        mag = enhanced_mag.mag
    mag = np.asarray(mag, dtype=np.float64)
    if mag.shape != noisy.phase.shape:
        raise ValueError(f"shape mismatch: enhanced {mag.shape} vs noisy {noisy.phase.shape}")
    return istft(Spectrogram(mag, noisy.phase), p)


def snr_db(estimate, reference) -> float:
    """10 log10(|reference|^2 / |estimate - reference|^2)."""
    ref = np.asarray(reference, dtype=np.float64)
    err = np.asarray(estimate, dtype=np.float64) - ref
    e = float(err @ err)
    if e == 0:
        return float("inf")
    return 10 * np.log10(float(ref @ ref) / e)


# ---------------------------------------------------------------------------
# files


def peak_normalize(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x)) if len(x) else 0.0
    return x / peak if peak > 1.0 else x


def read_wav(path, normalize: bool = True) -> tuple[np.ndarray, int]:
    """Read mono 16-bit PCM; returns samples in [-1, 1] and the sample rate."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
            if f.getsampwidth() != 2:
                raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit samples")
            if f.getcomptype() != "NONE":
                raise ValueError(f"{path}: compressed WAV ({f.getcomptype()}) not supported")
            sr = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as e:
        raise ValueError(f"{path}: not a PCM WAV file ({e})") from e
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if sr != SAMPLE_RATE:
        raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {sr} Hz")
    return (peak_normalize(x) if normalize else x), sr


def write_wav(path, x, sample_rate: int = SAMPLE_RATE) -> None:
    x = _check_waveform(x)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def write_spectrogram_csv(path, mag: np.ndarray) -> None:
    """One row per frame, one column per frequency bin."""
    np.savetxt(path, np.asarray(mag), delimiter=",", fmt="%.8g")


def spectrogram_to_pgm(path, mag: np.ndarray, dynamic_range_db: float = 80.0) -> None:
    """8-bit binary PGM, frequency on the vertical axis (low bins at the bottom).

    Image width is T frames and height is F bins; levels cover
    ``dynamic_range_db`` below the panel's peak.
    """
    mag = np.asarray(mag, dtype=np.float64)
    db = 20 * np.log10(np.maximum(mag, 1e-12))
    top = db.max()
    levels = np.clip((db - (top - dynamic_range_db)) / dynamic_range_db, 0, 1)
    img = np.round(levels.T[::-1] * 255).astype(np.uint8)
    height, width = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = np.frombuffer(data[m.end(): m.end() + width * height], dtype=np.uint8)
    return pixels.reshape(height, width)
