"""Central-difference gradient checks for the autodiff primitives."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP = 1e-6


def _project(out: Tensor, proj: np.ndarray) -> Tensor:
    # random projection so every output coordinate carries a distinct weight
    if out.data.size == 1:
        return ad.linear_combination([out], [proj.reshape(-1)[0]])
    return ad.sum(ad.mul(out, Tensor(proj)))


def _sample_inputs(name: str, rng: np.random.Generator) -> tuple[list[np.ndarray], Callable]:
    r = rng.standard_normal
    if name == "conv2d":
        return [r((1, 2, 5, 5)), r((3, 2, 3, 3)), r(3)], lambda x, w, b: ad.conv2d(x, w, b, padding=1)
    if name == "conv_transpose2d":
        return [r((1, 3, 3, 4)), r((3, 2, 2, 2)), r(2)], ad.conv_transpose2d
    if name == "bilinear_upsample":
        return [r((1, 2, 3, 4))], ad.bilinear_upsample
    if name == "max_pool2d":
        return [r((2, 2, 4, 4))], ad.max_pool2d
    if name == "relu":
        x = r((2, 3, 4))
        x = np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.1 + x, x)
        return [x], ad.relu
    if name == "leaky_relu":
        x = r((2, 3, 4))
        x = np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.1 + x, x)
        return [x], ad.leaky_relu
    if name == "instance_norm":
        return [r((2, 3, 4, 4)), r(3), r(3)], ad.instance_norm
    if name == "add":
        return [r((2, 3)), r((2, 3))], ad.add
    if name == "mul":
        return [r((2, 3)), r((2, 3))], ad.mul
    if name == "concat":
        return [r((1, 2, 3, 3)), r((1, 3, 3, 3))], lambda a, b: ad.concat([a, b], axis=1)
    if name == "linear_combination":
        c = rng.standard_normal(3).tolist()
        return [r((2, 4)), r((2, 4)), r((2, 4))], lambda *ts: ad.linear_combination(ts, c, bias=0.3)
    if name == "softmax":
        return [r((2, 4, 3, 3))], lambda x: ad.softmax(x, axis=1)
    if name == "log":
        return [rng.uniform(0.2, 3.0, (3, 4))], ad.log
    if name == "exp":
        return [r((3, 4))], ad.exp
    if name == "sum":
        return [r((2, 3, 4))], lambda x: ad.sum(x, axis=(0, 2))
    if name == "mean":
        return [r((2, 3, 4))], lambda x: ad.mean(x, axis=1)
    if name == "softmax_log":
        return [r((2, 4, 3, 3))], lambda x: ad.log(ad.softmax(x, axis=1))
    raise KeyError(f"unknown primitive {name!r}")


def max_relative_error(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                       step: float = STEP, analytic_dtype=np.float64, oracle_dtype=np.float64,
                       floor: float = 1e-8) -> float:
    """Compare backprop against central differences for ``fn(*inputs)``.

    Every input is treated as differentiable. Backprop runs in
    ``analytic_dtype``; the finite differences run in ``oracle_dtype``.
    A float64 oracle bottoms out near ``ulp(f) / 2h`` (about 1e-10 for an
    O(1) loss), so checks through deep compositions, where some gradient
    coordinates are ~1e-7, use ``np.longdouble`` for the oracle.
    The scalar objective is a fixed random projection of ``fn``'s output.
    Returns ``max |analytic - numeric| / max(floor, |numeric|)``.
    """
    arrays = [np.array(a, dtype=oracle_dtype) for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays])
    proj = np.random.default_rng([seed, 0x5EED]).standard_normal(probe.shape).astype(oracle_dtype)

    def evaluate(arrs) -> np.ndarray:
        return fn(*[Tensor(a) for a in arrs]).data

    leaves = [Tensor(a.astype(analytic_dtype), requires_grad=True) for a in arrays]
    ad.backward(_project(fn(*leaves), proj.astype(analytic_dtype)))

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate(arrays)
            flat[i] = orig - step
            down = evaluate(arrays)
            flat[i] = orig
            # difference outputs before projecting: avoids cancellation in the sum
            numeric = np.sum((up - down) * proj) / (2 * oracle_dtype(step))
            err = float(abs(analytic.reshape(-1)[i] - numeric) / max(floor, abs(numeric)))
            worst = max(worst, err)
    return worst


def grad_check(primitive: str | Callable[..., Tensor], inputs: Sequence[np.ndarray] | None = None,
               seed: int = 0) -> float:
    """Gradient check for a named primitive (or any callable) at a random or given point."""
    if callable(primitive):
        if inputs is None:
            raise ValueError("grad_check: explicit inputs are required for a callable")
        return max_relative_error(primitive, inputs, seed=seed)
    rng = np.random.default_rng(seed)
    sampled, fn = _sample_inputs(primitive, rng)
    return max_relative_error(fn, inputs if inputs is not None else sampled, seed=seed)


def network_loss_inputs(seed: int = 0, size: int = 8, depth: int = 2, base_channels: int = 4,
                        n_classes: int = 3):
    """Random image pair, labels, and a fresh model, for checking the full composition.

    Returns ``(fn, inputs)`` where ``fn(image, *params)`` is
    ``L_sup(first image) + L_unsup(second image)`` through both decoders.
    """
    from .losses import rectified_unsup_loss, supervised_loss, total_loss
    from .unet import init_params, predict_dual

    rng = np.random.default_rng([seed, 8])
    model = init_params(depth, base_channels, n_classes, rng_seed=seed)
    names = list(model.tensors)
    # random affine parameters so the norm layers are not at their identity init
    for name in names:
        if name.endswith(("gamma", "beta", "bias")):
            model.tensors[name].data[...] = rng.normal(1.0 if name.endswith("gamma") else 0.0, 0.3,
                                                       model.tensors[name].shape)
    image = rng.standard_normal((2, 1, size, size))
    labels = rng.integers(0, n_classes, (1, size, size))
    pseudo = rng.integers(0, n_classes, (1, size, size))

    def fn(x: Tensor, *params: Tensor) -> Tensor:
        model.tensors = dict(zip(names, params))
        lab = predict_dual(model, _rows(x, 0))
        unl = predict_dual(model, _rows(x, 1))
        return total_loss(supervised_loss(lab, labels), rectified_unsup_loss(unl, pseudo)).value

    return fn, [image] + [model.tensors[n].data.astype(np.float64) for n in names]


def _rows(x: Tensor, i: int) -> Tensor:
    # select batch row i as a [1, ...] tensor through a differentiable mask
    mask = np.zeros(x.shape, dtype=x.dtype)
    mask[i] = 1
    return ad.sum(ad.mul(x, Tensor(mask)), axis=0, keepdims=True)


def network_grad_check(seed: int = 0, analytic_dtype=np.float64, floor: float = 1e-8) -> float:
    """Gradient check of network + losses on an 8x8 input against a long-double oracle."""
    fn, inputs = network_loss_inputs(seed)
    return max_relative_error(fn, inputs, seed=seed, analytic_dtype=analytic_dtype,
                              oracle_dtype=np.longdouble, floor=floor)
