"""Normalised quality functions used as discriminator targets.

A metric maps (enhanced, clean) waveforms to a raw score and normalises it
into [0, 1].  ``q_snr`` is computed in-process; real PESQ or STOI tools can
be plugged in through :func:`external_metric_adapter`.
"""

from __future__ import annotations

import csv
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dsp import SAMPLE_RATE, snr_db, write_wav

log = logging.getLogger(__name__)

# SNR window (dB) mapped affinely onto [0, 1].
SNR_FLOOR_DB = -10.0
SNR_CEIL_DB = 30.0

PESQ_MIN, PESQ_MAX = -0.5, 4.5


@dataclass(frozen=True)
class MetricFn:
    name: str
    evaluate: Callable[[np.ndarray, np.ndarray], float]
    normalize: Callable[[float], float]

    def __call__(self, enhanced, clean) -> float:
        return self.normalize(self.evaluate(enhanced, clean))


def _check_pair(enhanced, clean) -> tuple[np.ndarray, np.ndarray]:
    enhanced = np.asarray(enhanced, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if enhanced.shape != clean.shape:
        raise ValueError(f"length mismatch: enhanced {enhanced.shape} vs clean {clean.shape}")
    return enhanced, clean


def raw_snr(enhanced, clean) -> float:
    enhanced, clean = _check_pair(enhanced, clean)
    if not np.any(clean):
        raise ValueError("clean reference is all zeros")
    return snr_db(enhanced, clean)


def normalize_snr(snr: float) -> float:
    if snr == float("inf"):
        return 1.0
    return float(np.clip((snr - SNR_FLOOR_DB) / (SNR_CEIL_DB - SNR_FLOOR_DB), 0.0, 1.0))


def q_snr(enhanced, clean) -> float:
    return normalize_snr(raw_snr(enhanced, clean))


QSNR = MetricFn("qsnr", raw_snr, normalize_snr)


def normalize_pesq(raw: float) -> float:
    if raw < PESQ_MIN or raw > PESQ_MAX:
        log.warning("PESQ score %.3f outside [%.1f, %.1f]; clamping", raw, PESQ_MIN, PESQ_MAX)
        raw = min(max(raw, PESQ_MIN), PESQ_MAX)
    return (raw - PESQ_MIN) / (PESQ_MAX - PESQ_MIN)


def normalize_unit(raw: float) -> float:
    if raw < 0 or raw > 1:
        log.warning("score %.3f outside [0, 1]; clamping", raw)
    return float(min(max(raw, 0.0), 1.0))


NORMALIZERS = {"pesq": normalize_pesq, "stoi": normalize_unit, "unit": normalize_unit, "snr": normalize_snr}


class ExternalMetricError(RuntimeError):
    pass


def external_metric_adapter(command: str, normalize: str | Callable = "pesq",
                            name: str | None = None, timeout: float = 120.0) -> MetricFn:
    """Wrap a command that scores two WAV files and prints one number.

    ``command`` is a template with ``{enhanced}`` and ``{clean}``
    placeholders, e.g. ``"pesq_tool --ref {clean} --deg {enhanced}"``.
    """
    if "{enhanced}" not in command or "{clean}" not in command:
        raise ValueError("command template needs {enhanced} and {clean} placeholders")
    norm = NORMALIZERS[normalize] if isinstance(normalize, str) else normalize

    def evaluate(enhanced, clean) -> float:
        enhanced, clean = _check_pair(enhanced, clean)
        with tempfile.TemporaryDirectory(prefix="mgse-metric-") as tmp:
            enh_path, clean_path = Path(tmp, "enhanced.wav"), Path(tmp, "clean.wav")
            write_wav(enh_path, enhanced, SAMPLE_RATE)
            write_wav(clean_path, clean, SAMPLE_RATE)
            argv = [a.format(enhanced=enh_path, clean=clean_path) for a in shlex.split(command)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise ExternalMetricError(f"could not run {argv[0]!r}: {e}") from e
        if proc.returncode != 0:
            raise ExternalMetricError(f"metric command exited with {proc.returncode}: "
                                      f"stdout={proc.stdout!r} stderr={proc.stderr!r}")
        tokens = proc.stdout.split()
        try:
            return float(tokens[-1])
        except (IndexError, ValueError):
            raise ExternalMetricError(f"metric command printed no number: stdout={proc.stdout!r} "
                                      f"stderr={proc.stderr!r}") from None

    return MetricFn(name or f"external:{command}", evaluate, norm)


def get_metric(spec: str) -> MetricFn:
    """``qsnr``, ``external:<cmd>`` (PESQ-scaled output) or ``external-<scale>:<cmd>``.

    ``<scale>`` names an entry of :data:`NORMALIZERS`, e.g.
    ``external-stoi:stoi_tool {clean} {enhanced}``.
    """
    if spec == "qsnr":
        return QSNR
    head, sep, command = spec.partition(":")
    if sep and head == "external":
        return external_metric_adapter(command, "pesq", name=spec)
    if sep and head.startswith("external-"):
        scale = head[len("external-"):]
        if scale not in NORMALIZERS:
            raise ValueError(f"unknown score scale {scale!r}; choose from {sorted(NORMALIZERS)}")
        return external_metric_adapter(command, scale, name=spec)
    raise ValueError(f"unknown metric {spec!r}; use 'qsnr', 'external:<cmd>' or 'external-<scale>:<cmd>'")


# ---------------------------------------------------------------------------
# evaluation report

REPORT_COLUMNS = ("utterance", "q_noisy", "q_enhanced", "delta")


def eval_report(enhance: Callable[[np.ndarray], np.ndarray], pairs, metric: MetricFn = QSNR) -> dict:
    """Score noisy and enhanced audio for every (id, noisy, clean) pair.

    ``enhance`` maps a noisy waveform to an enhanced one, which may be
    shorter (trailing partial frame dropped); all signals are trimmed to
    the enhanced length before scoring.  Returns ``{"rows": [...],
    "mean": {...}}``.
    """
    rows = []
    for uid, noisy, clean in pairs:
        enhanced = enhance(noisy)
        n = len(enhanced)
        q_noisy = metric(noisy[:n], clean[:n])
        q_enh = metric(enhanced, clean[:n])
        rows.append({"utterance": uid, "q_noisy": q_noisy, "q_enhanced": q_enh, "delta": q_enh - q_noisy})
    if not rows:
        raise ValueError("empty dataset: nothing to evaluate")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in REPORT_COLUMNS[1:]}
    return {"rows": rows, "mean": mean}


def write_report_csv(path, report: dict) -> None:
    """Per-utterance rows, then a final ``mean`` row."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for r in report["rows"]:
            w.writerow([r["utterance"]] + [f"{r[k]:.6f}" for k in REPORT_COLUMNS[1:]])
        w.writerow(["mean"] + [f"{report['mean'][k]:.6f}" for k in REPORT_COLUMNS[1:]])
