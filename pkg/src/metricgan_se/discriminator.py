"""Spectrally normalised CNN that learns to predict the normalised metric.

The (enhanced, clean) pair of compressed magnitudes is stacked into a
2-channel T x F image, passed through four same-padded 2-D convolutions,
averaged over time and frequency (so any T works), then through three
dense layers ending in a single linear output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import PowerIterState, Tensor


@dataclass(frozen=True)
class DiscriminatorConfig:
    filters: tuple = (15, 25, 40, 50)
    kernels: tuple = (5, 7, 9, 11)
    hidden: tuple = (50, 10)
    in_channels: int = 2
    leaky_slope: float = 0.3
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.filters) != len(self.kernels) or not self.filters:
            raise ValueError("filters and kernels must be non-empty and of equal length")
        if any(k % 2 == 0 or k < 1 for k in self.kernels):
            raise ValueError(f"kernel sizes must be odd, got {self.kernels}")

    @classmethod
    def toy(cls, **overrides) -> DiscriminatorConfig:
        base = dict(filters=(4, 6, 8, 10), kernels=(3, 3, 5, 5), hidden=(10, 5))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> DiscriminatorConfig:
        return cls(**d)


def param_shapes(config: DiscriminatorConfig) -> dict[str, tuple]:
    shapes = {}
    c_in = config.in_channels
    for i, (c_out, k) in enumerate(zip(config.filters, config.kernels)):
        shapes[f"conv.{i}.weight"] = (c_out, c_in, k, k)
        shapes[f"conv.{i}.bias"] = (c_out,)
        c_in = c_out
    widths = (c_in,) + config.hidden + (1,)
    for i in range(len(widths) - 1):
        # dense weights are stored (out, in) so spectral norm sees out x in
        shapes[f"fc.{i}.weight"] = (widths[i + 1], widths[i])
        shapes[f"fc.{i}.bias"] = (widths[i + 1],)
    return shapes


def sn_weight_names(config: DiscriminatorConfig) -> list[str]:
    return [n for n in param_shapes(config) if n.endswith(".weight")]


WARM_UP_ITERS = 20


def orthogonal(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Random weight whose (out, rest) view has orthonormal rows or columns."""
    rows, cols = shape[0], int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    w = q if rows >= cols else q.T
    return np.ascontiguousarray(w).reshape(shape)


class Discriminator:
    """Weights plus the power-iteration state of every normalised matrix."""

    def __init__(self, config: DiscriminatorConfig | None = None, seed: int = 0,
                 params: dict[str, Tensor] | None = None, sn_state: dict | None = None):
        self.config = config or DiscriminatorConfig()
        rng = np.random.default_rng(seed)
        shapes = param_shapes(self.config)
        dtype = np.dtype(self.config.dtype)
        if params is None:
            params = {}
            for name, shape in shapes.items():
                if name.endswith("bias"):
                    arr = np.zeros(shape)
                else:
                    arr = orthogonal(shape, rng)
                params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        for name, shape in shapes.items():
            if name not in params or params[name].shape != shape:
                got = params[name].shape if name in params else None
                raise ValueError(f"{name}: shape {got} != expected {shape}")
        self.params = params
        if sn_state is None:
            self.sn_state = {n: PowerIterState.init(shapes[n], rng) for n in sn_weight_names(self.config)}
            self.warm_up(WARM_UP_ITERS)
        else:
            self.sn_state = sn_state

    def count_params(self) -> int:
        return disc_param_count(self)

    def warm_up(self, n_iter: int = 20) -> None:
        """Run extra power iterations without touching the weights."""
        for name, st in self.sn_state.items():
            w2d = self.params[name].data.reshape(self.params[name].shape[0], -1).astype(np.float64)
            if np.any(w2d):
                ad.power_iteration(w2d, st, n_iter)

    def normalized_weights(self) -> dict[str, np.ndarray]:
        """Current W / sigma_hat for every normalised weight (no state update)."""
        out = {}
        for name, st in self.sn_state.items():
            out[name] = ad.spectral_normalize(self.params[name], st, update=False).data
        return out

    def __call__(self, enhanced, clean, update_sn: bool = False) -> Tensor:
        return disc_forward(enhanced, clean, self, update_sn)

    def save(self, path) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        for name, st in self.sn_state.items():
            arrays[f"sn.{name}.u"] = st.u
            arrays[f"sn.{name}.v"] = st.v
        checkpoint.save(path, "discriminator", self.config.to_dict(), arrays)

    @classmethod
    def load(cls, path) -> Discriminator:
        kind, cfg, tensors = checkpoint.load(path)
        if kind != "discriminator":
            raise ValueError(f"{path}: checkpoint holds a {kind}, not a discriminator")
        config = DiscriminatorConfig.from_dict(cfg)
        dtype = np.dtype(config.dtype)
        params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k)
                  for k, v in tensors.items() if not k.startswith("sn.")}
        sn = {n: PowerIterState(tensors[f"sn.{n}.u"], tensors[f"sn.{n}.v"]) for n in sn_weight_names(config)}
        return cls(config, params=params, sn_state=sn)


def disc_forward(enhanced, clean, disc: Discriminator, update_sn: bool = False) -> Tensor:
    """Predicted normalised quality of ``enhanced`` given ``clean`` (scalar tensor).

    Both inputs are T x F compressed magnitudes.  ``update_sn`` advances each
    power iteration by one step (done on discriminator training steps).
    """
    cfg = disc.config
    enhanced = enhanced if isinstance(enhanced, Tensor) else Tensor(enhanced, dtype=cfg.dtype)
    clean = clean if isinstance(clean, Tensor) else Tensor(clean, dtype=cfg.dtype)
    if enhanced.shape != clean.shape or enhanced.data.ndim != 2:
        raise ValueError(f"shape mismatch: enhanced {enhanced.shape} vs clean {clean.shape}")
    w = disc.params

    def sn(name):
        return ad.spectral_normalize(w[name], disc.sn_state[name], update=update_sn)

    h = ad.stack_last([enhanced, clean])
    for i in range(len(cfg.filters)):
        h = ad.leaky_relu(ad.conv2d(h, sn(f"conv.{i}.weight"), w[f"conv.{i}.bias"]), cfg.leaky_slope)
    h = ad.reshape(ad.global_avg_pool2d(h), (1, -1))
    n_fc = len(cfg.hidden) + 1
    for i in range(n_fc):
        h = ad.linear(h, ad.transpose(sn(f"fc.{i}.weight")), w[f"fc.{i}.bias"])
        if i < n_fc - 1:
            h = ad.leaky_relu(h, cfg.leaky_slope)
    return ad.reshape(h, ())


def disc_param_count(disc: Discriminator | DiscriminatorConfig) -> int:
    config = disc.config if isinstance(disc, Discriminator) else disc
    return int(sum(np.prod(s) for s in param_shapes(config).values()))
