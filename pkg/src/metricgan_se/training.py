"""L1 signal-approximation pre-training and MetricGAN fine-tuning.

Fine-tuning alternates discriminator steps, which regress D(G(x), y) onto
the true normalised metric Q'(G(x), y) and D(y, y) onto 1, with generator
steps that push D(G(x), y) toward the target score ``s``.  One utterance
is one batch.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NonFiniteError, Tape, Tensor
from .discriminator import Discriminator, DiscriminatorConfig
from .dsp import DEFAULT_FRAMES, FrameParams, Spectrogram, compress, istft, stft
from .generator import Generator, enhanced_compressed, enhanced_linear
from .metrics import QSNR, MetricFn

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 1
    max_epochs: int = 100
    patience: int = 5
    phase: str = "pretrain"
    s: float = 1.0
    d_steps: int = 2
    d_lr: float = 5e-5
    d_warmup_steps: int = 50
    finetune_epochs: int = 20
    finetune_lr_scale: float = 0.1
    grad_clip: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.d_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"target score s must be in [0, 1], got {self.s}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 (one utterance per step) is supported")
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"phase must be 'pretrain' or 'finetune', got {self.phase!r}")
        if self.d_steps < 1:
            raise ValueError("d_steps must be >= 1")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    l1: float = float("nan")
    d_loss: float = float("nan")
    g_loss: float = float("nan")
    val_q: float = float("nan")
    wall: float = 0.0


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path) -> None:
        names = [f.name for f in dataclasses.fields(EpochRecord)]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(names)
            for r in self.records:
                w.writerow([getattr(r, n) for n in names])


@dataclass
class Utterance:
    """Precomputed features for one noisy/clean pair."""

    id: str
    noisy: Spectrogram
    noisy_c: np.ndarray
    clean_c: np.ndarray
    clean_wave: np.ndarray


def prepare(pairs, frames: FrameParams = DEFAULT_FRAMES, dtype="float32") -> list[Utterance]:
    """Features for (id, noisy, clean) waveform triples."""
    out = []
    for uid, noisy, clean in pairs:
        ns = stft(noisy, frames)
        cs = stft(clean, frames)
        n = frames.n_samples(ns.mag.shape[0])
        out.append(Utterance(uid, ns, compress(ns).mag.astype(dtype), compress(cs).mag.astype(dtype),
                             np.asarray(clean[:n], dtype=np.float64)))
    return out


# ---------------------------------------------------------------------------
# losses


def l1_sa_loss(output: Tensor, noisy_c: np.ndarray, clean_c: np.ndarray, head_mode: str = "mask") -> Tensor:
    """Mean |enhanced - clean| between compressed magnitudes."""
    if output.shape != noisy_c.shape or noisy_c.shape != clean_c.shape:
        raise ValueError(f"shape mismatch: output {output.shape}, noisy {noisy_c.shape}, clean {clean_c.shape}")
    enh = enhanced_compressed(output, noisy_c, head_mode)
    return ad.abs_mean(ad.sub(enh, Tensor(clean_c.astype(output.dtype))))


@contextlib.contextmanager
def frozen(params: dict[str, Tensor]):
    """Treat ``params`` as constants for the duration of the block."""
    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]


def d_loss(disc: Discriminator, batch, update_sn: bool = True) -> Tensor:
    """Batch mean of (D(y,y) - 1)^2 + (D(G(x),y) - Q')^2.

    ``batch`` holds (enhanced_c, clean_c, q) triples; the enhanced
    magnitudes are plain arrays, so no gradient can reach the generator.
    """
    terms = []
    for i, (enh_c, clean_c, q) in enumerate(batch):
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"metric label {q} outside [0, 1]")
        y = Tensor(np.asarray(clean_c), dtype=disc.config.dtype)
        real = disc(y, y, update_sn=update_sn and i == 0)
        fake = disc(Tensor(np.asarray(enh_c), dtype=disc.config.dtype), y)
        terms.append(ad.add(ad.mul(real - 1.0, real - 1.0), ad.mul(fake - q, fake - q)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul_scalar(total, 1.0 / len(terms))


def g_loss(disc: Discriminator, gen: Generator, batch, s: float = 1.0) -> Tensor:
    """Batch mean of (D(G(x), y) - s)^2; the discriminator is held fixed.

    ``batch`` holds (noisy_c, clean_c) pairs.
    """
    terms = []
    with frozen(disc.params):
        for noisy_c, clean_c in batch:
            enh = enhanced_compressed(gen(noisy_c), noisy_c, gen.config.head_mode)
            score = disc(enh, Tensor(clean_c, dtype=disc.config.dtype))
            terms.append(ad.mul(score - s, score - s))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul_scalar(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# evaluation helpers


def enhance_utterance(gen: Generator, utt: Utterance) -> tuple[np.ndarray, np.ndarray]:
    """(compressed enhanced magnitude, enhanced waveform)."""
    out = gen(utt.noisy_c).data
    lin = enhanced_linear(out, utt.noisy_c, gen.config.head_mode)
    wave = istft(Spectrogram(lin, utt.noisy.phase))
    return np.log1p(lin).astype(utt.noisy_c.dtype), wave


def metric_label(gen: Generator, utt: Utterance, metric: MetricFn) -> tuple[np.ndarray, float]:
    enh_c, wave = enhance_utterance(gen, utt)
    return enh_c, metric(wave, utt.clean_wave)


def mean_metric(gen: Generator, utts: list[Utterance], metric: MetricFn = QSNR) -> float:
    return float(np.mean([metric_label(gen, u, metric)[1] for u in utts]))


def noisy_metric(utts: list[Utterance], metric: MetricFn = QSNR) -> float:
    """Mean metric of the unprocessed noisy input (after the same analysis/synthesis)."""
    return float(np.mean([metric(istft(u.noisy), u.clean_wave) for u in utts]))


def mean_l1(gen: Generator, utts: list[Utterance]) -> float:
    return float(np.mean([l1_sa_loss(gen(u.noisy_c), u.noisy_c, u.clean_c, gen.config.head_mode).item()
                          for u in utts]))


def checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# single steps


def generator_l1_step(gen: Generator, utt: Utterance, opt: AdamState) -> float:
    ad.zero_grad(gen.params)
    with Tape() as tape:
        loss = l1_sa_loss(gen(utt.noisy_c), utt.noisy_c, utt.clean_c, gen.config.head_mode)
    tape.backward(loss)
    ad.adam_step(gen.params, None, opt)
    return loss.item()


def discriminator_step(disc: Discriminator, batch, opt: AdamState) -> float:
    ad.zero_grad(disc.params)
    with Tape() as tape:
        loss = d_loss(disc, batch, update_sn=True)
    tape.backward(loss)
    ad.adam_step(disc.params, None, opt)
    return loss.item()


def generator_adv_step(gen: Generator, disc: Discriminator, utt: Utterance, opt: AdamState,
                       s: float = 1.0, grad_clip: float | None = None) -> float:
    ad.zero_grad(gen.params)
    with Tape() as tape:
        loss = g_loss(disc, gen, [(utt.noisy_c, utt.clean_c)], s)
    tape.backward(loss)
    if grad_clip:
        ad.clip_grad_norm(gen.params, grad_clip)
    ad.adam_step(gen.params, None, opt)
    return loss.item()


def fit_discriminator(disc: Discriminator, batch, steps: int, lr: float = 1e-3) -> list[float]:
    """Regress D onto fixed labels (generator frozen); returns the loss trace."""
    opt = AdamState(lr=lr)
    return [discriminator_step(disc, batch, opt) for _ in range(steps)]


# ---------------------------------------------------------------------------
# phases


def pretrain(gen: Generator, train: list[Utterance], val: list[Utterance], cfg: TrainConfig,
             ckpt_path=None, log_path=None) -> tuple[Generator, TrainLog]:
    """Adam on the L1 loss with early stopping on validation L1.

    Returns the best-validation generator (a copy) and the epoch log.
    """
    if not train or not val:
        raise ValueError("pretrain needs non-empty training and validation sets")
    gen = gen.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.lr)
    best, best_val, bad = gen.copy(), mean_l1(gen, val), 0
    trace = TrainLog([EpochRecord(0, l1=best_val)])
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        try:
            losses = [generator_l1_step(gen, train[i], opt) for i in rng.permutation(len(train))]
            val_l1 = mean_l1(gen, val)
        except NonFiniteError as e:
            if ckpt_path:
                best.save(ckpt_path)
            raise TrainingDiverged(f"pre-training diverged at epoch {epoch}: {e}") from e
        trace.append(EpochRecord(epoch, l1=float(np.mean(losses)), wall=time.perf_counter() - t0))
        log.info("pretrain epoch %d train L1 %.5f val L1 %.5f", epoch, np.mean(losses), val_l1)
        if val_l1 < best_val:
            best, best_val, bad = gen.copy(), val_l1, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                log.info("early stop after epoch %d (best val L1 %.5f)", epoch, best_val)
                break
    if ckpt_path:
        best.save(ckpt_path)
    if log_path:
        trace.to_csv(log_path)
    return best, trace


def metricgan_finetune(gen: Generator, train: list[Utterance], val: list[Utterance], cfg: TrainConfig,
                       metric: MetricFn = QSNR, disc_config: DiscriminatorConfig | None = None,
                       ckpt_path=None, log_path=None) -> tuple[Generator, TrainLog, Discriminator]:
    """Alternate D and G updates; keep the generator with the best validation metric.

    Epoch 0 of the log is the pre-trained generator, so the returned model
    never scores below it on the validation set.
    """
    if gen is None:
        raise ValueError("fine-tuning needs a pre-trained generator")
    if not train or not val:
        raise ValueError("fine-tuning needs non-empty training and validation sets")
    gen = gen.copy()
    n_params = gen.count_params()
    rng = np.random.default_rng(cfg.seed)
    disc = Discriminator(disc_config, seed=cfg.seed)
    g_opt = AdamState(lr=cfg.lr * cfg.finetune_lr_scale)
    d_opt = AdamState(lr=cfg.d_lr)

    def d_update() -> float:
        utt = train[int(rng.integers(len(train)))]
        enh_c, q = metric_label(gen, utt, metric)
        return discriminator_step(disc, [(enh_c, utt.clean_c, q)], d_opt)

    best, best_q = gen.copy(), mean_metric(gen, val, metric)
    trace = TrainLog([EpochRecord(0, val_q=best_q)])
    log.info("fine-tune start: val Q' %.4f", best_q)
    for _ in range(cfg.d_warmup_steps):
        d_update()

    best_d, stale = float("inf"), 0
    for epoch in range(1, cfg.finetune_epochs + 1):
        t0 = time.perf_counter()
        d_losses, g_losses = [], []
        for i in rng.permutation(len(train)):
            d_losses.extend(d_update() for _ in range(cfg.d_steps))
            g_losses.append(generator_adv_step(gen, disc, train[i], g_opt, cfg.s, cfg.grad_clip))
        val_q = mean_metric(gen, val, metric)
        rec = EpochRecord(epoch, d_loss=float(np.mean(d_losses)), g_loss=float(np.mean(g_losses)),
                          val_q=val_q, wall=time.perf_counter() - t0)
        trace.append(rec)
        log.info("fine-tune epoch %d L_D %.4f L_G %.4f val Q' %.4f", epoch, rec.d_loss, rec.g_loss, val_q)
        if val_q > best_q:
            best, best_q = gen.copy(), val_q
        if rec.d_loss < best_d:
            best_d, stale = rec.d_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.warning("discriminator loss has not improved for %d epochs", stale)
                stale = 0
    assert best.count_params() == n_params
    if ckpt_path:
        best.save(ckpt_path)
    if log_path:
        trace.to_csv(log_path)
    return best, trace, disc


def load_generator(path) -> Generator:
    if not Path(path).exists():
        raise FileNotFoundError(f"generator checkpoint not found: {path}")
    return Generator.load(path)
