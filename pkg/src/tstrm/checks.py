"""Finite-difference checks of every differentiable building block on tiny inputs."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .backbone import Bottleneck, BottleneckSpec, time_mask
from .fusion import FeatureCorrelationFusion, bilinear_resize
from .gradcheck import GradCheckReport, grad_check
from .losses import attention_ce, ctc_loss
from .nn import BatchNorm2d, conv2d
from .tensor import Tensor, log_softmax, mul, sum as tsum
from .transformer import DecoderLayer, EncoderLayer, TransformerConfig, attention, causal_mask


def _weighted(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Scalar read-out ``sum(w * y)`` with fixed random weights, so no gradient is trivially uniform."""
    w = rng.normal(size=shape)
    return lambda y: tsum(mul(y, w))


def standard_checks(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []

    def run(name, f, inputs):
        reports.append(grad_check(f, inputs, eps=eps, tol=tol, op_name=name))

    x = Tensor(rng.normal(size=(2, 3, 5, 4)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5)
    out = _weighted(rng, (2, 4, 3, 2))
    run("conv2d", lambda a, b: out(conv2d(a, b, stride=2, padding=1)), [x, w])
    wd = Tensor(rng.normal(size=(3, 1, 3, 3)))
    out = _weighted(rng, (2, 3, 5, 4))
    run("conv2d_depthwise", lambda a, b: out(conv2d(a, b, stride=1, padding=1, groups=3)), [Tensor(x.data.copy()), wd])

    bn = BatchNorm2d(3)
    mask = time_mask(np.array([5, 3]), 5)
    out = _weighted(rng, (2, 3, 5, 4))
    run("batchnorm", lambda a: out(bn(a, mask) * mask), Tensor(rng.normal(size=(2, 3, 5, 4))))

    block = Bottleneck(BottleneckSpec(3, 3, 1, expansion=2), rng)
    out = _weighted(rng, (2, 3, 5, 4))
    lengths = np.array([5, 4])
    run("bottleneck", lambda a: out(block(a, lengths)[0]), Tensor(rng.normal(size=(2, 3, 5, 4))))

    out = _weighted(rng, (2, 2, 5, 3))
    run(
        "bilinear_resize",
        lambda a: out(bilinear_resize(a, 5, 3, np.array([3, 2]), np.array([5, 4]))),
        Tensor(rng.normal(size=(2, 2, 3, 2))),
    )

    fcf = FeatureCorrelationFusion(3, rng)
    out = _weighted(rng, (2, 6, 3, 2))
    run("fcf", lambda a, b: out(fcf(a, b)), [Tensor(rng.normal(size=(2, 3, 3, 2))), Tensor(rng.normal(size=(2, 3, 3, 2)))])

    q, k, v = (Tensor(rng.normal(size=(2, 4, 3))) for _ in range(3))
    out = _weighted(rng, (2, 4, 3))
    run("attention", lambda a, b, c: out(attention(a, b, c, causal_mask(4)[None])), [q, k, v])

    tcfg = TransformerConfig(1, 1, 2, 8, 16, 0.0)
    enc = EncoderLayer(tcfg, rng)
    out = _weighted(rng, (2, 4, 8))
    key_mask = (np.arange(4)[None, :] < np.array([4, 3])[:, None])[:, None, :]
    run("encoder_layer", lambda a: out(enc(a, key_mask)), Tensor(rng.normal(size=(2, 4, 8))))

    dec = DecoderLayer(tcfg, rng)
    out = _weighted(rng, (2, 3, 8))
    run(
        "decoder_layer",
        lambda a, m: out(dec(a, m, causal_mask(3)[None], key_mask)),
        [Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 4, 8)))],
    )

    run("ctc_loss", lambda z: ctc_loss(log_softmax(z, axis=-1), [1, 2]), Tensor(rng.normal(size=(4, 3))))
    run("attention_ce", lambda z: attention_ce(z, [2, 0, 3], 0.1), Tensor(rng.normal(size=(3, 4))))
    return reports
