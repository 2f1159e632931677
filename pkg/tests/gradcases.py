"""Random finite-difference cases shared by the unit and acceptance suites.

Each case builder takes an rng and returns ``(loss_fn, inputs)``.  Losses
contract the op output with a fixed random cotangent so every output
element contributes to the check.
"""

import numpy as np

from metricgan_se import autodiff as ad
from metricgan_se.autodiff import Tensor
from metricgan_se.discriminator import Discriminator, DiscriminatorConfig, disc_forward
from metricgan_se.generator import Generator, GeneratorConfig


def leaf(a, name="x"):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


def away_from_zero(rng, shape, lo=0.1, hi=1.0):
    """Entries with |x| in [lo, hi] so kinks at 0 are never straddled."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def project(out, rng):
    r = Tensor(rng.standard_normal(out.shape))
    return ad.sum(ad.mul(out, r))


def unary(op, sample=None):
    def build(rng):
        x = leaf(sample(rng) if sample else rng.standard_normal((3, 4)))
        r = rng.standard_normal(op(x).shape)
        return (lambda: ad.sum(ad.mul(op(x), Tensor(r)))), {"x": x}
    return build


def binary(op, shape_a=(3, 4), shape_b=(3, 4)):
    def build(rng):
        a, b = leaf(rng.standard_normal(shape_a), "a"), leaf(rng.standard_normal(shape_b), "b")
        probe = op(a, b)
        r = rng.standard_normal(probe.shape)
        return (lambda: ad.sum(ad.mul(op(a, b), Tensor(r)))), {"a": a, "b": b}
    return build


def scalar_loss(op, sample=None):
    def build(rng):
        x = leaf(sample(rng) if sample else rng.standard_normal((3, 4)))
        return (lambda: op(x)), {"x": x}
    return build


def _attention(rng):
    T, d = 5, 3
    q, k, v = (leaf(rng.standard_normal((T, d)), n) for n in "qkv")
    mask = np.triu(np.full((T, T), ad.MASK_VALUE), 1)
    r = rng.standard_normal((T, d))
    return (lambda: ad.sum(ad.mul(ad.masked_attention(q, k, v, mask), Tensor(r)))), {"q": q, "k": k, "v": v}


def _conv1d(rng):
    x, w, b = leaf(rng.standard_normal((6, 3)), "x"), leaf(rng.standard_normal((4, 3, 3)), "w"), \
        leaf(rng.standard_normal(4), "b")
    r = rng.standard_normal((6, 4))
    return (lambda: ad.sum(ad.mul(ad.conv1d_causal(x, w, b), Tensor(r)))), {"x": x, "w": w, "b": b}


def _conv2d(rng):
    x, w, b = leaf(rng.standard_normal((5, 6, 2)), "x"), leaf(rng.standard_normal((3, 2, 3, 3)), "w"), \
        leaf(rng.standard_normal(3), "b")
    r = rng.standard_normal((5, 6, 3))
    return (lambda: ad.sum(ad.mul(ad.conv2d(x, w, b), Tensor(r)))), {"x": x, "w": w, "b": b}


def _layer_norm(rng):
    x, g, b = leaf(rng.standard_normal((4, 5)), "x"), leaf(rng.standard_normal(5), "gain"), \
        leaf(rng.standard_normal(5), "bias")
    r = rng.standard_normal((4, 5))
    return (lambda: ad.sum(ad.mul(ad.layer_norm_channels(x, g, b), Tensor(r)))), {"x": x, "gain": g, "bias": b}


def _pool(rng):
    x = leaf(rng.standard_normal((4, 5, 3)))
    r = rng.standard_normal(3)
    return (lambda: ad.sum(ad.mul(ad.global_avg_pool2d(x), Tensor(r)))), {"x": x}


def _spectral_norm(rng):
    w = leaf(rng.standard_normal((4, 3, 2)), "w")
    state = ad.PowerIterState.init(w.shape, rng)
    ad.power_iteration(w.data.reshape(4, -1), state, 30)
    r = rng.standard_normal(w.shape)
    # u, v frozen during the check: the backward treats them as constants
    return (lambda: ad.sum(ad.mul(ad.spectral_normalize(w, state, update=False), Tensor(r)))), {"w": w}


def _linear(rng):
    x, w, b = leaf(rng.standard_normal((3, 4)), "x"), leaf(rng.standard_normal((4, 2)), "w"), \
        leaf(rng.standard_normal(2), "b")
    r = rng.standard_normal((3, 2))
    return (lambda: ad.sum(ad.mul(ad.linear(x, w, b), Tensor(r)))), {"x": x, "w": w, "b": b}


PRIMITIVES = {
    "add": binary(ad.add),
    "sub": binary(ad.sub),
    "mul": binary(ad.mul),
    "matmul": binary(ad.matmul, (3, 4), (4, 2)),
    "add_bias": binary(ad.add_bias, (3, 4), (4,)),
    "squared_error_mean": binary(lambda a, b: ad.squared_error_mean(a, b)),
    "mul_scalar": unary(lambda x: ad.mul_scalar(x, -1.7)),
    "add_scalar": unary(lambda x: ad.add_scalar(x, 0.3)),
    "relu": unary(ad.relu, lambda rng: away_from_zero(rng, (3, 4))),
    "leaky_relu": unary(lambda x: ad.leaky_relu(x, 0.3), lambda rng: away_from_zero(rng, (3, 4))),
    "sigmoid": unary(ad.sigmoid),
    "log1p": unary(ad.log1p, lambda rng: rng.uniform(0.0, 2.0, (3, 4))),
    "softmax_last_dim": unary(ad.softmax_last_dim),
    "reshape": unary(lambda x: ad.reshape(x, (4, 3))),
    "transpose": unary(ad.transpose),
    "slice_last": unary(lambda x: ad.slice_last(x, 1, 3)),
    "concat_last": unary(lambda x: ad.concat_last([x, ad.mul_scalar(x, 2.0)])),
    "stack_last": unary(lambda x: ad.stack_last([x, ad.relu(x)]), lambda rng: away_from_zero(rng, (3, 4))),
    "sum": scalar_loss(ad.sum),
    "mean": scalar_loss(ad.mean),
    "abs_mean": scalar_loss(ad.abs_mean, lambda rng: away_from_zero(rng, (3, 4))),
    "linear": _linear,
    "masked_attention": _attention,
    "conv1d_causal": _conv1d,
    "conv2d": _conv2d,
    "layer_norm_channels": _layer_norm,
    "global_avg_pool2d": _pool,
    "spectral_normalize": _spectral_norm,
}


GEN_TOY_64 = GeneratorConfig.toy(dtype="float64")


def generator_case(seed=0, T=4):
    """Toy generator in double precision with a mask-mode L1 loss.

    Inputs whose front-end output has an all-zero (dead ReLU) row are
    redrawn: layer norm of a zero-variance row has gain 1/sqrt(eps), so
    the loss bends on a scale much smaller than any finite-difference step.
    """
    from metricgan_se.generator import encode
    from metricgan_se.training import l1_sa_loss

    rng = np.random.default_rng(seed)
    gen = Generator(GEN_TOY_64, seed=seed)
    while True:
        noisy = np.log1p(np.abs(rng.standard_normal((T, 257))))
        if np.all(encode(Tensor(noisy), gen.params, GEN_TOY_64).data.var(axis=1) > 1e-3):
            break
    clean = np.log1p(np.abs(rng.standard_normal((T, 257))) * 0.5)
    return (lambda: l1_sa_loss(gen(noisy), noisy, clean)), gen.params


def discriminator_case(seed=0, T=6, F=32):
    rng = np.random.default_rng(seed)
    disc = Discriminator(DiscriminatorConfig.toy(dtype="float64"), seed=seed)
    for p in disc.params.values():
        if p.data.ndim == 1:
            p.data[:] = rng.uniform(-0.1, 0.1, p.shape)
    enh = np.log1p(np.abs(rng.standard_normal((T, F))))
    clean = np.log1p(np.abs(rng.standard_normal((T, F))))
    return (lambda: disc_forward(enh, clean, disc)), disc.params


def g_loss_case(seed=0, T=4):
    """Adversarial generator loss through a fixed double-precision toy discriminator."""
    from metricgan_se.generator import encode
    from metricgan_se.training import g_loss

    rng = np.random.default_rng(seed)
    gen = Generator(GEN_TOY_64, seed=seed)
    disc = Discriminator(DiscriminatorConfig.toy(dtype="float64"), seed=seed)
    while True:
        noisy = np.log1p(np.abs(rng.standard_normal((T, 257))))
        if np.all(encode(Tensor(noisy), gen.params, GEN_TOY_64).data.var(axis=1) > 1e-3):
            break
    clean = np.log1p(np.abs(rng.standard_normal((T, 257))) * 0.5)
    return (lambda: g_loss(disc, gen, [(noisy, clean)])), gen.params
