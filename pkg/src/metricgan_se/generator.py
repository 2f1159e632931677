"""Causal Transformer enhancement model.

Causal 1-D convolutions encode relative position, followed by N blocks of
future-masked multi-head self-attention and a two-layer feed-forward net,
each wrapped in a residual connection and channel-only layer norm.  A
frame-wise dense layer with ReLU maps back to the frequency axis.

Every stage is causal, so :func:`generator_forward` with a
:class:`StreamState` can run one frame at a time and reproduce the batch
output bit for bit.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import MASK_VALUE, Tensor
from .dsp import DEFAULT_FRAMES, FrameParams, Spectrogram, compress, resynthesize, stft

HEAD_MODES = ("mask", "map")
POSITIONAL_MODES = ("conv", "sinusoidal")

# Reference figures reported for the full-size model.
REFERENCE_PARAM_COUNT = 5_953_920
REFERENCE_MS_PER_FRAME = 0.256


@dataclass(frozen=True)
class GeneratorConfig:
    n_blocks: int = 3
    d_model: int = 512
    n_heads: int = 8
    d_k: int = 64
    d_ff: int = 512
    frontend: tuple = ((512, 3, 1), (512, 3, 1))
    n_freq: int = 257
    head_mode: str = "mask"
    positional: str = "conv"
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "frontend", tuple(tuple(int(v) for v in layer) for layer in self.frontend))
        if self.n_heads * self.d_k != self.d_model:
            raise ValueError(f"n_heads * d_k = {self.n_heads * self.d_k} != d_model = {self.d_model}")
        if self.n_blocks < 0 or self.d_ff < 1:
            raise ValueError("n_blocks must be >= 0 and d_ff >= 1")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.positional not in POSITIONAL_MODES:
            raise ValueError(f"positional must be one of {POSITIONAL_MODES}, got {self.positional!r}")
        if self.positional == "conv":
            if not self.frontend:
                raise ValueError("conv positional mode needs at least one front-end layer")
            if self.frontend[-1][0] != self.d_model:
                raise ValueError("last front-end layer must output d_model channels")
        for out_ch, ksize, stride in self.frontend:
            if ksize < 1 or out_ch < 1:
                raise ValueError(f"bad front-end layer {(out_ch, ksize, stride)}")
            if stride != 1:
                raise ValueError("front-end strides must be 1 to keep frames aligned")

    @classmethod
    def toy(cls, **overrides) -> GeneratorConfig:
        base = dict(n_blocks=2, d_model=8, n_heads=2, d_k=4, d_ff=16,
                    frontend=((8, 3, 1), (8, 3, 1)))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frontend"] = [list(layer) for layer in self.frontend]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        return cls(**d)


def param_shapes(config: GeneratorConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    d, F = config.d_model, config.n_freq
    if config.positional == "conv":
        c_in = F
        for i, (c_out, ksize, _) in enumerate(config.frontend):
            shapes[f"frontend.{i}.weight"] = (c_out, c_in, ksize)
            shapes[f"frontend.{i}.bias"] = (c_out,)
            c_in = c_out
    else:
        shapes["input.weight"] = (F, d)
        shapes["input.bias"] = (d,)
    for b in range(config.n_blocks):
        p = f"blocks.{b}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"w{proj}"] = (d, d)
            shapes[p + f"b{proj}"] = (d,)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "ff1.weight"] = (d, config.d_ff)
        shapes[p + "ff1.bias"] = (config.d_ff,)
        shapes[p + "ff2.weight"] = (config.d_ff, d)
        shapes[p + "ff2.bias"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
    shapes["head.weight"] = (d, F)
    shapes["head.bias"] = (F,)
    return shapes


def count_params(config: GeneratorConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def init_weights(config: GeneratorConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains.

    In mask mode the head bias starts at 1 so the initial mask is near
    pass-through instead of half dead under the ReLU.
    """
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith("bias") or name.split(".")[-1] in ("bq", "bk", "bv", "bo"):
            arr = np.zeros(shape)
            if name == "head.bias" and config.head_mode == "mask":
                arr += 1.0
        else:
            fan_in = shape[0] if len(shape) == 2 else shape[1] * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# attention


def build_causal_mask(T: int, dtype=np.float32) -> np.ndarray:
    """T x T mask: 0 on and below the diagonal, ``MASK_VALUE`` above it."""
    if T < 1:
        raise ValueError(f"causal mask needs T >= 1, got {T}")
    return np.triu(np.full((T, T), MASK_VALUE, dtype=dtype), k=1)


def causal_mask_rows(start: int, n: int, dtype=np.float32) -> np.ndarray:
    """Rows ``start .. start+n-1`` of the causal mask, over keys ``0 .. start+n-1``."""
    rows = np.arange(start, start + n)[:, None]
    cols = np.arange(start + n)[None, :]
    return np.where(cols > rows, MASK_VALUE, 0.0).astype(dtype)


def masked_attention(qh: Tensor, kh: Tensor, vh: Tensor, mask: np.ndarray) -> Tensor:
    if mask.shape != (qh.shape[0], kh.shape[0]):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length "
                         f"{qh.shape[0]} x {kh.shape[0]}")
    return ad.masked_attention(qh, kh, vh, mask)


@dataclass
class _KVCache:
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)


def mhsa(x: Tensor, w: dict, prefix: str, n_heads: int, mask: np.ndarray,
         cache: _KVCache | None = None) -> Tensor:
    """Per-head projections, masked attention, concatenation, output projection.

    With ``cache`` the new keys/values are appended to the cached ones and
    ``mask`` must cover (new rows) x (all cached + new keys).
    """
    d = x.shape[1]
    if d % n_heads:
        raise ValueError(f"d_model {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    q = ad.linear(x, w[prefix + "wq"], w[prefix + "bq"])
    k = ad.linear(x, w[prefix + "wk"], w[prefix + "bk"])
    v = ad.linear(x, w[prefix + "wv"], w[prefix + "bv"])
    if cache is not None:
        cache.keys.append(k.data)
        cache.values.append(v.data)
        k = Tensor(np.concatenate(cache.keys), dtype=x.dtype)
        v = Tensor(np.concatenate(cache.values), dtype=x.dtype)
    heads = []
    for h in range(n_heads):
        a, b = h * dk, (h + 1) * dk
        heads.append(masked_attention(ad.slice_last(q, a, b), ad.slice_last(k, a, b),
                                      ad.slice_last(v, a, b), mask))
    return ad.linear(ad.concat_last(heads), w[prefix + "wo"], w[prefix + "bo"])


def attention_block(x: Tensor, w: dict, prefix: str, n_heads: int, mask: np.ndarray,
                    cache: _KVCache | None = None) -> Tensor:
    y = ad.add(x, mhsa(x, w, prefix, n_heads, mask, cache))
    y = ad.layer_norm_channels(y, w[prefix + "ln1.gain"], w[prefix + "ln1.bias"])
    f = ad.relu(ad.linear(y, w[prefix + "ff1.weight"], w[prefix + "ff1.bias"]))
    f = ad.linear(f, w[prefix + "ff2.weight"], w[prefix + "ff2.bias"])
    y = ad.add(y, f)
    return ad.layer_norm_channels(y, w[prefix + "ln2.gain"], w[prefix + "ln2.bias"])


# ---------------------------------------------------------------------------
# forward


def sinusoid_table(positions: np.ndarray, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


@dataclass
class StreamState:
    """Per-stream caches: front-end conv history and per-block keys/values."""

    config: GeneratorConfig
    t: int = 0
    conv_history: list = field(default_factory=list)
    kv: list = field(default_factory=list)

    def __post_init__(self):
        dtype = np.dtype(self.config.dtype)
        if not self.conv_history and self.config.positional == "conv":
            c_in = self.config.n_freq
            for c_out, ksize, _ in self.config.frontend:
                self.conv_history.append(np.zeros((ksize - 1, c_in), dtype=dtype))
                c_in = c_out
        if not self.kv:
            self.kv = [_KVCache() for _ in range(self.config.n_blocks)]


def _stream_conv(x: Tensor, w: Tensor, b: Tensor, state: StreamState, layer: int) -> Tensor:
    hist = state.conv_history[layer]
    xp = np.concatenate([hist, x.data])
    ksize = w.shape[2]
    state.conv_history[layer] = xp[len(xp) - (ksize - 1):] if ksize > 1 else hist
    return Tensor(ad.causal_conv_rows(xp, w.data, x.shape[0]) + b.data)


def encode(x: Tensor, w: dict, config: GeneratorConfig, state: StreamState | None = None) -> Tensor:
    if config.positional == "sinusoidal":
        h = ad.linear(x, w["input.weight"], w["input.bias"])
        t0 = 0 if state is None else state.t
        pe = sinusoid_table(np.arange(t0, t0 + x.shape[0]), config.d_model, x.dtype)
        return ad.add(h, Tensor(pe))
    h = x
    for i in range(len(config.frontend)):
        wt, bt = w[f"frontend.{i}.weight"], w[f"frontend.{i}.bias"]
        h = ad.conv1d_causal(h, wt, bt) if state is None else _stream_conv(h, wt, bt, state, i)
        h = ad.relu(h)
    return h


def generator_forward(x, weights: dict, config: GeneratorConfig,
                      state: StreamState | None = None) -> Tensor:
    """Map a compressed noisy magnitude (T x F) to a nonnegative T x F output.

    The output is a mask (``head_mode='mask'``) or a compressed magnitude
    estimate (``'map'``).  With ``state`` the rows are treated as the next
    frames of an ongoing stream.
    """
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=config.dtype)
    if x.data.ndim != 2 or x.shape[1] != config.n_freq:
        raise ValueError(f"generator input must be T x {config.n_freq}, got {x.shape}")
    T = x.shape[0]
    h = encode(x, weights, config, state)
    if state is None:
        mask = build_causal_mask(T, x.dtype)
    else:
        mask = causal_mask_rows(state.t, T, x.dtype)
    for b in range(config.n_blocks):
        cache = None if state is None else state.kv[b]
        h = attention_block(h, weights, f"blocks.{b}.", config.n_heads, mask, cache)
    out = ad.relu(ad.linear(h, weights["head.weight"], weights["head.bias"]))
    if state is not None:
        state.t += T
    return out


def apply_mask(mask: np.ndarray, noisy_mag: np.ndarray) -> np.ndarray:
    """Elementwise gain on a linear-domain magnitude."""
    mask = np.asarray(mask)
    noisy_mag = np.asarray(noisy_mag)
    if mask.shape != noisy_mag.shape:
        raise ValueError(f"shape mismatch: mask {mask.shape} vs magnitude {noisy_mag.shape}")
    if np.any(mask < 0):
        raise ValueError("mask has negative entries")
    return mask * noisy_mag


def enhanced_compressed(output: Tensor, noisy_c: np.ndarray, head_mode: str) -> Tensor:
    """Compressed enhanced magnitude, the quantity losses and the discriminator see.

    Mask mode multiplies the *linear* noisy magnitude, then recompresses:
    ``log1p(mask * expm1(noisy_c))``.  Map mode outputs it directly.
    """
    if head_mode == "map":
        return output
    noisy_lin = Tensor(np.expm1(noisy_c).astype(output.dtype))
    return ad.log1p(ad.mul(output, noisy_lin))


def enhanced_linear(output: np.ndarray, noisy_c: np.ndarray, head_mode: str) -> np.ndarray:
    if head_mode == "map":
        return np.expm1(np.asarray(output, dtype=np.float64))
    return apply_mask(np.asarray(output, dtype=np.float64), np.expm1(np.asarray(noisy_c, dtype=np.float64)))


# ---------------------------------------------------------------------------
# model object


class Generator:
    """Config plus named weights; the unit that is trained and checkpointed."""

    def __init__(self, config: GeneratorConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_weights(config, np.random.default_rng(seed))
        expected = param_shapes(config)
        if set(expected) != set(self.params):
            raise ValueError(f"weights do not match config: missing {sorted(set(expected) - set(self.params))}, "
                             f"unexpected {sorted(set(self.params) - set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    def __call__(self, x, state: StreamState | None = None) -> Tensor:
        return generator_forward(x, self.params, self.config, state)

    def count_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> Generator:
        return Generator(self.config, {k: Tensor(p.data, requires_grad=True, name=k)
                                       for k, p in self.params.items()})

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def enhance_spectrogram(self, noisy: Spectrogram) -> np.ndarray:
        """Linear-domain enhanced magnitude for a linear noisy spectrogram."""
        noisy_c = compress(noisy).mag
        out = self(noisy_c.astype(self.config.dtype)).data
        return enhanced_linear(out, noisy_c, self.config.head_mode)

    def enhance(self, noisy_wave, frames: FrameParams = DEFAULT_FRAMES) -> np.ndarray:
        noisy = stft(noisy_wave, frames)
        return resynthesize(self.enhance_spectrogram(noisy), noisy, frames)

    def save(self, path) -> None:
        checkpoint.save(path, "generator", self.config.to_dict(), self.state_arrays())

    @classmethod
    def load(cls, path) -> Generator:
        kind, cfg, tensors = checkpoint.load(path)
        if kind != "generator":
            raise ValueError(f"{path}: checkpoint holds a {kind}, not a generator")
        config = GeneratorConfig.from_dict(cfg)
        dtype = np.dtype(config.dtype)
        params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in tensors.items()}
        return cls(config, params)


def identity_generator(config: GeneratorConfig) -> Generator:
    """Mask-mode model whose output is exactly 1 everywhere (debugging aid)."""
    if config.head_mode != "mask":
        raise ValueError("identity generator needs head_mode='mask'")
    gen = Generator(config)
    gen.params["head.weight"].data[:] = 0
    gen.params["head.bias"].data[:] = 1
    return gen


# ---------------------------------------------------------------------------
# streaming


def stream_enhance(frames, generator: Generator, state: StreamState | None = None):
    """Yield one generator output row per incoming compressed frame.

    ``frames`` yields length-F arrays or ``(index, frame)`` pairs; indexed
    frames must arrive in order.
    """
    state = state or StreamState(generator.config)
    for item in frames:
        if isinstance(item, tuple):
            index, frame = item
            if index != state.t:
                raise ValueError(f"out-of-order frame: got index {index}, expected {state.t}")
        else:
            frame = item
        row = np.asarray(frame, dtype=generator.config.dtype).reshape(1, -1)
        yield generator(row, state).data[0]


def time_stream(generator: Generator, n_frames: int, seed: int = 0) -> np.ndarray:
    """Per-frame wall-clock latencies (ms) for streaming random input frames."""
    rng = np.random.default_rng(seed)
    x = np.log1p(np.abs(rng.standard_normal((n_frames, generator.config.n_freq))))
    state = StreamState(generator.config)
    times = np.empty(n_frames)
    for t in range(n_frames):
        row = x[t:t + 1].astype(generator.config.dtype)
        t0 = time.perf_counter()
        generator(row, state)
        times[t] = (time.perf_counter() - t0) * 1e3
    return times
