"""Finite-difference checks for every differentiable op and a small end-to-end
model, run in double precision."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import loss as L
from . import tensor as T
from .layers import ParamStore, SepConvGRU, gru_step
from .model import ContextMotionNet, ModelConfig
from .rng import make_rng
from .tensor import Tensor

TOLERANCE = 1e-4


def pyramid_levels_for(size: int) -> int:
    """Deepest pyramid (at most the training depth) that divides ``size``."""
    levels = 1
    while levels < L.PYRAMID_LEVELS and size % (2 ** levels) == 0:
        levels += 1
    return levels


def _rand(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, precision="double")


def op_cases(size: int = 8, seed: int = 0) -> dict[str, Callable[[], float]]:
    s = size
    rng = make_rng(seed, "gradsuite")

    def case(build):
        def run():
            inputs, f = build()
            return T.check_gradients(f, inputs, eps=1e-5)
        return run

    def conv(stride, kernel, pad):
        def build():
            x = _rand(rng, (2, 3, s, s))
            w = _rand(rng, (4, 3) + kernel)
            b = _rand(rng, (1, 4, 1, 1))
            probe = rng.uniform(-1, 1, size=T.conv2d(x, w, b, stride, pad).shape)
            return [x, w, b], lambda: T.sum_(T.mul(T.conv2d(x, w, b, stride, pad), Tensor(probe)))
        return build

    def unary(fn, lo=-2.0, hi=2.0):
        def build():
            x = _rand(rng, (2, 3, s, s), lo, hi)
            with T.no_grad():
                probe = rng.uniform(-1, 1, size=fn(x).shape)
            return [x], lambda: T.sum_(T.mul(fn(x), Tensor(probe)))
        return build

    def binary(fn):
        def build():
            x = _rand(rng, (2, 3, s, s))
            y = _rand(rng, (2, 3, s, s))
            probe = rng.uniform(-1, 1, size=x.shape)
            return [x, y], lambda: T.sum_(T.mul(fn(x, y), Tensor(probe)))
        return build

    def backwarp():
        x = _rand(rng, (2, 3, s, s))
        # fractional displacements keep samples away from the integer kinks
        base = rng.integers(-2, 3, size=(2, 2, s, s))
        flow = Tensor(base + rng.uniform(0.1, 0.9, size=base.shape), requires_grad=True)
        probe = rng.uniform(-1, 1, size=x.shape)
        return [x, flow], lambda: T.sum_(T.mul(T.backwarp(x, flow), Tensor(probe)))

    def resize(oh, ow, scale=1.0):
        def build():
            x = _rand(rng, (1, 2, s, s))
            probe = rng.uniform(-1, 1, size=(1, 2, oh, ow))
            return [x], lambda: T.sum_(T.mul(T.bilinear_resize(x, oh, ow, scale), Tensor(probe)))
        return build

    def concat_slice():
        a = _rand(rng, (2, 2, s, s))
        b = _rand(rng, (2, 3, s, s))
        probe = rng.uniform(-1, 1, size=(1, 3, s, s))

        def f():
            y = T.concat_channels([a, b])
            y = T.slice_channels(y, 1, 4)
            y = T.concat_batch([y, T.slice_channels(b, 0, 3)])
            return T.sum_(T.mul(T.slice_batch(y, 1, 2), Tensor(probe)))
        return [a, b], f

    def reductions():
        x = _rand(rng, (2, 3, s, s))
        y = Tensor(rng.uniform(-1, 1, size=x.shape), precision="double")
        return [x], lambda: T.add(T.add(T.sum_(T.mul(x, x)), T.mean(T.tanh(x))), T.l1_against(x, y))

    def gru():
        store = ParamStore("double")
        cell = SepConvGRU(store, "gru", 3, 2, seed=seed)
        h = _rand(rng, (1, 3, s, s), -0.9, 0.9)
        x = _rand(rng, (1, 2, s, s))
        params = [store[n] for n in store.names()]
        probe = rng.uniform(-1, 1, size=h.shape)
        return [h, x] + params, lambda: T.sum_(T.mul(gru_step(cell, h, x), Tensor(probe)))

    def lap():
        levels = pyramid_levels_for(s)
        p = _rand(rng, (1, 1, s, s), 0, 1)
        g = Tensor(rng.uniform(0, 1, size=p.shape), precision="double")
        return [p], lambda: L.lap_loss(p, g, levels)

    def fg_l1():
        p = _rand(rng, (1, 3, s, s), 0, 1)
        g = Tensor(rng.uniform(0, 1, size=p.shape), precision="double")
        a = Tensor(np.where(rng.random((1, 1, s, s)) < 0.5, 0.0, rng.random((1, 1, s, s))),
                   precision="double")
        return [p], lambda: L.fg_l1(p, g, a)

    return {
        "conv2d": case(conv(1, (3, 3), 1)),
        "conv2d_stride2": case(conv(2, (3, 3), 1)),
        "conv2d_1x5": case(conv(1, (1, 5), (0, 2))),
        "conv2d_5x1": case(conv(1, (5, 1), (2, 0))),
        "conv2d_7x7": case(conv(1, (7, 7), 3)),
        "sigmoid": case(unary(T.sigmoid)),
        "tanh": case(unary(T.tanh)),
        "relu": case(unary(T.relu, 0.05, 2.0)),
        "affine": case(unary(lambda x: T.affine(x, -1.5, 0.25))),
        "add": case(binary(T.add)),
        "sub": case(binary(T.sub)),
        "mul": case(binary(T.mul)),
        "concat_slice": case(concat_slice),
        "bilinear_up": case(resize(2 * s, 2 * s, 2.0)),
        "bilinear_down": case(resize(s // 2, s // 2, 0.5)),
        "pad_reflect": case(unary(lambda x: T.pad_reflect(x, 2))),
        "backwarp": case(backwarp),
        "reductions": case(reductions),
        "gru_step": case(gru),
        "laplacian_loss": case(lap),
        "fg_l1": case(fg_l1),
    }


def micro_model_error(size: int = 8, seed: int = 0, provider: str = "oracle",
                      samples: int = 200, eps: float = 1e-3) -> float:
    """End-to-end check of a 2-frame rollout and its training loss."""
    cfg = ModelConfig(reduction=4, channels=8, hidden=8, flow_provider=provider, ablation="motion")
    model = ContextMotionNet(cfg, seed=seed, precision="double")
    rng = make_rng(seed, "micro")
    # check at a generic point: zero biases put relu inputs exactly on the kink
    # (frame 0 feeds zero flow), and the zero-initialised flow heads put every
    # warp sample on an integer position
    for name in model.params.names():
        shape = model.params[name].data.shape
        if name.endswith(".bias"):
            model.params.set_data(name, rng.uniform(-0.1, 0.1, size=shape))
        elif name.startswith("flow.") and name.endswith("conv3.weight"):
            model.params.set_data(name, rng.uniform(-0.05, 0.05, size=shape))
    frames = [_rand(rng, (1, 3, size, size), 0, 1) for _ in range(2)]
    base = rng.integers(-1, 2, size=(1, 2, size, size))
    flows = [Tensor(np.zeros((1, 2, size, size))),
             Tensor(base + rng.uniform(0.1, 0.9, size=base.shape))]
    gt_a = [Tensor(rng.uniform(0, 1, size=(1, 1, size, size))) for _ in range(2)]
    gt_f = [Tensor(rng.uniform(0, 1, size=(1, 3, size, size))) for _ in range(2)]
    levels = pyramid_levels_for(size)

    def f():
        ro = model.rollout(frames, flows)
        terms = [(L.alpha_l1(o.alpha, a), L.lap_loss(o.alpha, a, levels), L.fg_l1(o.foreground, g, a))
                 for o, a, g in zip(ro.outputs, gt_a, gt_f)]
        return L.total_loss(terms).total

    tensors = [model.params[n] for n in model.params.names()] + frames
    return T.check_gradients(f, tensors, eps=eps, samples=samples, rng=rng)


def run_suite(size: int = 8, seed: int = 0) -> dict[str, float]:
    results = {name: fn() for name, fn in op_cases(size, seed).items()}
    results["micro_model_oracle"] = micro_model_error(size, seed, "oracle")
    results["micro_model_tiny"] = micro_model_error(size, seed, "tiny")
    return results
