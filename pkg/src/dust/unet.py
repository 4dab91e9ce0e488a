"""Dual-decoder U-Net: one encoder, two decoders differing only in upsampling.

The main decoder upsamples with 2x2 stride-2 transposed convolutions, the
auxiliary decoder with bilinear interpolation followed by a 1x1 convolution.
Both consume the same encoder skip tensors and end in their own 1x1 head.
Pseudo labels and reported predictions always come from the main decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

UPSAMPLE_KINDS = ("transposed", "bilinear")


@dataclass
class ModelParams:
    depth: int
    base_channels: int
    n_classes: int
    norm: bool = True
    main_upsample: str = "transposed"
    aux_upsample: str = "bilinear"
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        for kind in (self.main_upsample, self.aux_upsample):
            if kind not in UPSAMPLE_KINDS:
                raise ValueError(f"unknown upsampling kind {kind!r}")
        if self.main_upsample == self.aux_upsample:
            raise ValueError(
                f"main and aux decoders must upsample differently, both are {self.main_upsample!r}"
            )

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**level for level in range(self.depth)]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_parameters(self) -> dict[str, Tensor]:
        return self.tensors

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.depth, self.base_channels, self.n_classes, self.norm,
                            self.main_upsample, self.aux_upsample)
        clone.tensors = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}
        return clone

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


@dataclass
class DualPrediction:
    """Softmax maps [B, n, H, W] from the main and auxiliary decoders."""

    main_prob: Tensor
    aux_prob: Tensor


def _layer_specs(depth: int, c0: int, n: int, norm: bool, main_up: str, aux_up: str):
    """Yield (name, shape, fan_in) in registration order; fan_in None marks a zero/one init."""
    ch = [c0 * 2**lvl for lvl in range(depth)]

    def block(prefix, cin, cout):
        for i, ci in ((1, cin), (2, cout)):
            yield f"{prefix}.conv{i}.weight", (cout, ci, 3, 3), ci * 9
            if norm:
                yield f"{prefix}.norm{i}.gamma", (cout,), "one"
                yield f"{prefix}.norm{i}.beta", (cout,), None
            else:
                yield f"{prefix}.conv{i}.bias", (cout,), None

    for lvl in range(depth):
        yield from block(f"enc.{lvl}", 1 if lvl == 0 else ch[lvl - 1], ch[lvl])
    for dec, kind in (("main", main_up), ("aux", aux_up)):
        for lvl in range(depth - 2, -1, -1):
            if kind == "transposed":
                yield f"{dec}.{lvl}.up.weight", (ch[lvl + 1], ch[lvl], 2, 2), ch[lvl + 1]
                yield f"{dec}.{lvl}.up.bias", (ch[lvl],), None
            else:
                yield f"{dec}.{lvl}.reduce.weight", (ch[lvl], ch[lvl + 1], 1, 1), ch[lvl + 1]
                yield f"{dec}.{lvl}.reduce.bias", (ch[lvl],), None
            yield from block(f"{dec}.{lvl}", 2 * ch[lvl], ch[lvl])
    for dec in ("main", "aux"):
        yield f"head.{dec}.weight", (n, c0, 1, 1), c0
        yield f"head.{dec}.bias", (n,), None


def init_params(depth: int = 4, base_channels: int = 16, n_classes: int = 4, rng_seed: int = 0,
                norm: bool = True, main_upsample: str = "transposed",
                aux_upsample: str = "bilinear") -> ModelParams:
    """He-normal kernels, zero biases, unit/zero affine norm parameters.

    Convolutions that feed an instance norm carry no bias (the norm would
    cancel it); with ``norm=False`` they get one.
    """
    if depth < 2:
        raise ValueError(f"depth must be >= 2, got {depth}")
    if base_channels < 4:
        raise ValueError(f"base_channels must be >= 4, got {base_channels}")
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    params = ModelParams(depth, base_channels, n_classes, norm, main_upsample, aux_upsample)
    rng = np.random.default_rng(rng_seed)
    for name, shape, fan_in in _layer_specs(depth, base_channels, n_classes, norm,
                                            main_upsample, aux_upsample):
        if fan_in is None:
            data = np.zeros(shape, dtype=np.float32)
        elif fan_in == "one":
            data = np.ones(shape, dtype=np.float32)
        else:
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        params.tensors[name] = Tensor(data, requires_grad=True)
    return params


def _conv_block(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    for i in (1, 2):
        w = p[f"{prefix}.conv{i}.weight"]
        if p.norm:
            x = ad.conv2d(x, w, None, padding=1)
            x = ad.instance_norm(x, p[f"{prefix}.norm{i}.gamma"], p[f"{prefix}.norm{i}.beta"])
        else:
            x = ad.conv2d(x, w, p[f"{prefix}.conv{i}.bias"], padding=1)
        x = ad.leaky_relu(x)
    return x


def _decode(p: ModelParams, dec: str, kind: str, skips: list[Tensor]) -> Tensor:
    x = skips[-1]
    for lvl in range(p.depth - 2, -1, -1):
        if kind == "transposed":
            x = ad.conv_transpose2d(x, p[f"{dec}.{lvl}.up.weight"], p[f"{dec}.{lvl}.up.bias"])
        else:
            x = ad.bilinear_upsample(x)
            x = ad.conv2d(x, p[f"{dec}.{lvl}.reduce.weight"], p[f"{dec}.{lvl}.reduce.bias"], padding=0)
        x = ad.concat([x, skips[lvl]], axis=1)
        x = _conv_block(p, f"{dec}.{lvl}", x)
    return ad.conv2d(x, p[f"head.{dec}.weight"], p[f"head.{dec}.bias"], padding=0)


def check_input(p: ModelParams, shape) -> None:
    if len(shape) != 4 or shape[1] != 1:
        raise ShapeError(f"dual_decoder_unet: expected input [B,1,H,W], got {tuple(shape)}")
    div = 2 ** (p.depth - 1)
    if shape[2] % div or shape[3] % div:
        raise ShapeError(
            f"dual_decoder_unet: spatial size {shape[2]}x{shape[3]} must be divisible by {div} "
            f"(2^(depth-1) for depth {p.depth})"
        )


def forward_logits(p: ModelParams, batch) -> tuple[Tensor, Tensor]:
    x = ad.as_tensor(batch)
    check_input(p, x.shape)
    if x.dtype != p["head.main.weight"].dtype:
        x = Tensor(x.data.astype(p["head.main.weight"].dtype))
    skips = []
    for lvl in range(p.depth):
        if lvl:
            x = ad.max_pool2d(x)
        x = _conv_block(p, f"enc.{lvl}", x)
        skips.append(x)
    return _decode(p, "main", p.main_upsample, skips), _decode(p, "aux", p.aux_upsample, skips)


def predict_dual(p: ModelParams, batch) -> DualPrediction:
    """Both decoders' class-probability maps. Records a graph unless under ``no_grad``."""
    main, aux = forward_logits(p, batch)
    return DualPrediction(ad.softmax(main, axis=1), ad.softmax(aux, axis=1))


def predict_probs(p: ModelParams, images: np.ndarray, chunk: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Inference-only dual prediction over [B,1,H,W] arrays, evaluated in chunks."""
    mains, auxs = [], []
    with ad.no_grad():
        for start in range(0, len(images), chunk):
            pred = predict_dual(p, images[start:start + chunk])
            mains.append(pred.main_prob.data)
            auxs.append(pred.aux_prob.data)
    return np.concatenate(mains), np.concatenate(auxs)


def predict_main_labels(p: ModelParams, images: np.ndarray) -> np.ndarray:
    """Argmax of the main decoder; ties go to the lowest class index."""
    main, _ = predict_probs(p, images)
    return argmax_labels(main)


def argmax_labels(prob: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest class on ties
    return np.argmax(prob, axis=1).astype(np.int64)
