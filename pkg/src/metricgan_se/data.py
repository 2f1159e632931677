"""Synthetic noisy/clean pairs and manifest handling.

The clean source is harmonic "pseudo-speech": a few harmonics of a gliding
fundamental under a 4 Hz amplitude envelope, so the whole pipeline runs
without any external corpus.  Real recordings drop in through the manifest.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dsp import DEFAULT_FRAMES, SAMPLE_RATE, read_wav, write_wav

MANIFEST_VERSION = "mgse-manifest-v1"
MANIFEST_COLUMNS = ("id", "noisy", "clean", "snr_db", "seed", "scale")
HEADROOM_PEAK = 0.99


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    seed: int
    duration: float = 1.0
    noise: str = "white"       # white | pink | path to a WAV file
    clean: str = "pseudo"      # pseudo | path to a WAV file
    id: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.snr_db) and self.snr_db != float("inf"):
            raise ValueError(f"SNR must be finite (or +inf for no noise), got {self.snr_db}")
        if self.duration * SAMPLE_RATE < 2 * DEFAULT_FRAMES.window_len:
            raise ValueError(f"duration {self.duration}s is shorter than two analysis windows")


def pseudo_speech(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(100.0, 250.0)
    glide = rng.uniform(-0.2, 0.2)
    inst_f0 = f0 * (1.0 + glide * t / max(t[-1], 1e-9))
    phase0 = 2 * np.pi * np.cumsum(inst_f0) / sr
    n_harm = int(rng.integers(3, 7))
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        x += rng.uniform(0.3, 1.0) / k * np.sin(k * phase0 + rng.uniform(0, 2 * np.pi))
    envelope = 0.5 * (1.0 + np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi)))
    x *= envelope
    return x / np.max(np.abs(x))


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """1/f power spectrum by shaping white noise in the frequency domain."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n=n)


def _load_segment(path: str, n: int, rng: np.random.Generator) -> np.ndarray:
    x, _ = read_wav(path)
    if len(x) < n:
        x = np.tile(x, n // len(x) + 1)
    start = int(rng.integers(0, len(x) - n + 1))
    return x[start:start + n]


def mix(clean, noise, snr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale ``noise`` to the requested SNR against ``clean`` and add it."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"length mismatch: clean {clean.shape} vs noise {noise.shape}")
    e_clean = float(clean @ clean)
    if e_clean == 0:
        raise ValueError("clean signal is silent")
    if snr_db == float("inf"):
        return clean.copy(), clean
    e_noise = float(noise @ noise)
    if e_noise == 0:
        raise ValueError("noise signal is silent")
    alpha = math.sqrt(e_clean / (e_noise * 10 ** (snr_db / 10)))
    return clean + alpha * noise, clean


def make_pair(spec: MixSpec) -> tuple[np.ndarray, np.ndarray, float]:
    """(noisy, clean, headroom scale) for one spec, deterministic in its seed."""
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration * SAMPLE_RATE))
    clean = pseudo_speech(n, rng) if spec.clean == "pseudo" else _load_segment(spec.clean, n, rng)
    clean = 0.5 * clean
    if spec.noise == "white":
        noise = white_noise(n, rng)
    elif spec.noise == "pink":
        noise = pink_noise(n, rng)
    else:
        noise = _load_segment(spec.noise, n, rng)
    noisy, clean = mix(clean, noise, spec.snr_db)
    peak = max(np.max(np.abs(noisy)), np.max(np.abs(clean)))
    scale = min(1.0, HEADROOM_PEAK / peak)
    return noisy * scale, clean * scale, scale


def toy_specs(n_pairs: int = 36, snrs=(0.0, 5.0, 10.0), seed: int = 0,
              duration: float = 1.0, noises=("white", "pink")) -> list[MixSpec]:
    """Evenly cycle through the SNR grid and noise types."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n_pairs)
    return [MixSpec(snr_db=float(snrs[i % len(snrs)]), seed=int(seeds[i]), duration=duration,
                    noise=noises[(i // len(snrs)) % len(noises)], id=f"utt{i:04d}")
            for i in range(n_pairs)]


def synth_dataset(specs: list[MixSpec], outdir, workers: int = 1) -> Path:
    """Write noisy/clean WAV pairs plus ``manifest.csv``; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    specs = [s if s.id else replace(s, id=f"utt{i:04d}") for i, s in enumerate(specs)]

    def work(spec):
        noisy, clean, scale = make_pair(spec)
        noisy_path, clean_path = outdir / f"{spec.id}_noisy.wav", outdir / f"{spec.id}_clean.wav"
        write_wav(noisy_path, noisy)
        write_wav(clean_path, clean)
        return {"id": spec.id, "noisy": noisy_path.name, "clean": clean_path.name,
                "snr_db": spec.snr_db, "seed": spec.seed, "scale": scale}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(work, specs))
    path = outdir / "manifest.csv"
    write_manifest(path, rows)
    return path


def write_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# {MANIFEST_VERSION}\n")
        w = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in MANIFEST_COLUMNS})


def read_manifest(path) -> list[dict]:
    """Rows with ``noisy``/``clean`` resolved to absolute paths."""
    path = Path(path)
    with open(path, newline="") as f:
        first = f.readline().strip()
        if first != f"# {MANIFEST_VERSION}":
            raise ValueError(f"{path}: missing or unsupported manifest version line {first!r}")
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: expected columns {MANIFEST_COLUMNS}, got {reader.fieldnames}")
        rows = []
        for r in reader:
            r = dict(r)
            for key in ("noisy", "clean"):
                r[key] = str((path.parent / r[key]).resolve())
            r["snr_db"] = float(r["snr_db"])
            r["seed"] = int(r["seed"])
            r["scale"] = float(r["scale"])
            rows.append(r)
    return rows


def split(rows: list, train_fraction: float, seed: int = 0) -> tuple[list, list]:
    if not 0 < train_fraction < 1:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    if len(rows) < 2:
        raise ValueError("need at least 2 items to split")
    order = np.random.default_rng(seed).permutation(len(rows))
    n_train = min(max(int(round(train_fraction * len(rows))), 1), len(rows) - 1)
    return [rows[i] for i in order[:n_train]], [rows[i] for i in order[n_train:]]


def load_pairs(rows: list[dict]) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(id, noisy, clean) waveforms for manifest rows."""
    out = []
    for r in rows:
        for key in ("noisy", "clean"):
            if not Path(r[key]).exists():
                raise FileNotFoundError(f"missing audio file: {r[key]}")
        noisy, _ = read_wav(r["noisy"], normalize=False)
        clean, _ = read_wav(r["clean"], normalize=False)
        out.append((r["id"], noisy, clean))
    return out
