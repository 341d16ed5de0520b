"""
Guided upsampling of a completed low-resolution image.

The completed L x L image is bilinearly upscaled to H x W and refined by a small
CNN that also sees the known full-resolution pixels and the mask:

    input  (7 channels): upscaled RGB, original RGB * (1 - mask), mask
    encoder: two stride-2 3x3 convs with GELU
    R residual blocks: conv, channel norm, GELU, conv, channel norm, skip
    decoder: two nearest-upsample + 3x3 conv stages with GELU
    head: 3x3 conv over [decoder features, input], zero-initialised

The head output is added to the upscaled image and clamped to [0,1]; known
pixels are then copied from the original unchanged.
"""

from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from retcomplete.checkpoint import Checkpoint
from retcomplete.config import UpsamplerConfig, UpsamplerTrainConfig
from retcomplete.errors import CheckpointError, DimensionError, UsageError
from retcomplete.optim import Adam
from retcomplete.palette import Palette
from retcomplete.rng import stream
from retcomplete.sequencer import downsample
from retcomplete.tensor_core import (
    Tensor,
    abs_,
    add,
    backward,
    clip,
    concat,
    conv2d,
    gelu,
    group_norm,
    mean,
    mul,
    no_grad,
    reshape,
    sum_,
    upsample_nearest,
)

INPUT_CHANNELS = 7
STRIDE = 4


def _interp_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Bilinear weights with aligned corners, [size_out, size_in]."""
    weights = np.zeros((size_out, size_in))
    if size_in == 1 or size_out == 1:
        weights[:, 0] = 1.0
        return weights
    pos = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), size_in - 1)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = pos - lo
    rows = np.arange(size_out)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def bilinear_upscale(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Bilinear resize of an h x w x C image to height x width; corner samples are exact.

    Raises:
        UsageError: If the target is smaller than the source
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise DimensionError(f"expected an h x w x C image, got {img.shape}")
    if height < img.shape[0] or width < img.shape[1]:
        raise UsageError(f"cannot upscale {img.shape[0]}x{img.shape[1]} to {height}x{width}")
    rows = _interp_matrix(img.shape[0], height)
    cols = _interp_matrix(img.shape[1], width)
    return np.einsum("Hh,hwc,Ww->HWc", rows, img, cols)


class UpsamplerParams:
    """Named convolution and norm parameters of the refinement network."""

    def __init__(self, config: UpsamplerConfig, named: "OrderedDict[str, Tensor]") -> None:
        self.config = config
        self._named = named

    def __getitem__(self, name: str) -> Tensor:
        return self._named[name]

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return self._named

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._named.items()}

    @classmethod
    def from_arrays(
        cls, config: UpsamplerConfig, arrays: Dict[str, np.ndarray]
    ) -> "UpsamplerParams":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape, _ in _layout(config):
            if name not in arrays or arrays[name].shape != shape:
                raise CheckpointError(f"upsampler parameter '{name}' missing or mis-shaped")
            named[name] = Tensor(np.array(arrays[name]), requires_grad=True, name=name)
        return cls(config, named)

    def to_checkpoint(self, meta: Optional[Dict[str, object]] = None) -> Checkpoint:
        return Checkpoint(
            kind="upsampler",
            config=self.config.model_dump(mode="json"),
            arrays=self.to_arrays(),
            meta=dict(meta or {}),
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "UpsamplerParams":
        if checkpoint.kind != "upsampler":
            raise CheckpointError(f"expected an upsampler checkpoint, got '{checkpoint.kind}'")
        return cls.from_arrays(UpsamplerConfig.model_validate(checkpoint.config), checkpoint.arrays)


def _layout(config: UpsamplerConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    c1, c2 = config.widths
    layout = [
        ("enc1.weight", (c1, INPUT_CHANNELS, 3, 3), "conv"),
        ("enc1.bias", (c1,), "zeros"),
        ("enc2.weight", (c2, c1, 3, 3), "conv"),
        ("enc2.bias", (c2,), "zeros"),
    ]
    for r in range(config.residual_blocks):
        for j in (1, 2):
            layout += [
                (f"res{r}.conv{j}.weight", (c2, c2, 3, 3), "conv"),
                (f"res{r}.conv{j}.bias", (c2,), "zeros"),
                (f"res{r}.norm{j}.gamma", (c2,), "ones"),
                (f"res{r}.norm{j}.beta", (c2,), "zeros"),
            ]
    layout += [
        ("dec1.weight", (c1, c2, 3, 3), "conv"),
        ("dec1.bias", (c1,), "zeros"),
        ("dec2.weight", (c1, c1, 3, 3), "conv"),
        ("dec2.bias", (c1,), "zeros"),
        ("head.weight", (3, c1 + INPUT_CHANNELS, 3, 3), "zeros"),
        ("head.bias", (3,), "zeros"),
    ]
    return layout


def init_upsampler(config: UpsamplerConfig, seed: int = 0) -> UpsamplerParams:
    """Normal init for convs; the head starts at zero so refine begins as bilinear."""
    rng = stream(seed, "init", 1)
    named: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape, kind in _layout(config):
        if kind == "conv":
            value = rng.standard_normal(shape) * config.init_std
        elif kind == "ones":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        named[name] = Tensor(value, requires_grad=True, name=name)
    return UpsamplerParams(config, named)


def _channel_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    channels = x.shape[0]
    flat = reshape(x, (1, x.size))
    normed = reshape(group_norm(flat, channels), x.shape)
    return add(mul(normed, reshape(gamma, (channels, 1, 1))), reshape(beta, (channels, 1, 1)))


def _network_input(upscaled: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = mask[..., None].astype(np.float64)
    stacked = np.concatenate([upscaled, original * (1.0 - m), m], axis=-1)
    return np.transpose(stacked, (2, 0, 1))


def _check_inputs(upscaled: np.ndarray, original: np.ndarray, mask: np.ndarray) -> None:
    if upscaled.shape != original.shape or upscaled.ndim != 3 or upscaled.shape[2] != 3:
        raise DimensionError(
            f"upscaled {upscaled.shape} and original {original.shape} must be equal H x W x 3"
        )
    if mask.shape != upscaled.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match image {upscaled.shape[:2]}")
    if not np.isin(mask, (0, 1)).all():
        raise UsageError("upsampler mask must be binary")


def _pad_to_stride(img: np.ndarray) -> np.ndarray:
    """Edge-pad the two leading axes up to the next multiple of the encoder stride."""
    height, width = img.shape[:2]
    pad = [(0, -height % STRIDE), (0, -width % STRIDE)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad, mode="edge")


def predict(
    upscaled: np.ndarray, original: np.ndarray, mask: np.ndarray, params: UpsamplerParams
) -> Tensor:
    """
    Refined [3, H, W] prediction before compositing, clamped to [0,1].

    Any H x W is accepted; inputs are edge-padded to a multiple of 4 for the
    two stride-2 stages and the output is cropped back.
    """
    height, width = upscaled.shape[:2]
    upscaled = _pad_to_stride(upscaled)
    x = Tensor(_network_input(upscaled, _pad_to_stride(original), _pad_to_stride(mask)))
    h = gelu(conv2d(x, params["enc1.weight"], params["enc1.bias"], stride=2, pad=1))
    h = gelu(conv2d(h, params["enc2.weight"], params["enc2.bias"], stride=2, pad=1))
    for r in range(params.config.residual_blocks):
        p = f"res{r}"
        y = conv2d(h, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"], pad=1)
        y = gelu(_channel_norm(y, params[f"{p}.norm1.gamma"], params[f"{p}.norm1.beta"]))
        y = conv2d(y, params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"], pad=1)
        h = add(_channel_norm(y, params[f"{p}.norm2.gamma"], params[f"{p}.norm2.beta"]), h)
    h = gelu(conv2d(upsample_nearest(h, 2), params["dec1.weight"], params["dec1.bias"], pad=1))
    h = gelu(conv2d(upsample_nearest(h, 2), params["dec2.weight"], params["dec2.bias"], pad=1))
    residual = conv2d(concat([h, x], axis=0), params["head.weight"], params["head.bias"], pad=1)
    base = Tensor(np.transpose(upscaled, (2, 0, 1)))
    return clip(add(base, residual), 0.0, 1.0)[:, :height, :width]


def composite(pred: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked pixels from `pred`, every other pixel from `original` exactly."""
    return np.where(mask[..., None] == 1, pred, original)


def refine(
    upscaled: np.ndarray, original: np.ndarray, mask: np.ndarray, params: UpsamplerParams
) -> np.ndarray:
    """
    Refine an upscaled completion and composite it with the known pixels.

    Args:
        upscaled: H x W x 3 bilinear upscale of the completed low-res image
        original: H x W x 3 input image; values under the mask are ignored
        mask: H x W, 1 on missing pixels
        params: Network weights

    Returns:
        H x W x 3 image in [0,1] equal to `original` wherever mask == 0

    Raises:
        DimensionError: If shapes disagree
        UsageError: If the mask is not binary
    """
    upscaled = np.asarray(upscaled, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    mask = np.asarray(mask)
    _check_inputs(upscaled, original, mask)
    with no_grad():
        pred = np.transpose(predict(upscaled, original, mask, params).data, (1, 2, 0))
    return composite(pred.astype(np.float64), original, mask)


def masked_l1(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error over masked pixels, or over the whole image when nothing is masked."""
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return float(diff.mean())
    return float(diff[mask].mean())


class UpsampleExample:
    """
    One training triple.

    Attributes:
        target: H x W x 3 ground truth
        upscaled: H x W x 3 bilinear upscale of the simulated low-res completion
        mask: H x W binary mask
    """

    __slots__ = ("target", "upscaled", "mask")

    def __init__(self, target: np.ndarray, upscaled: np.ndarray, mask: np.ndarray) -> None:
        _check_inputs(np.asarray(upscaled), np.asarray(target), np.asarray(mask))
        self.target = np.asarray(target, dtype=np.float64)
        self.upscaled = np.asarray(upscaled, dtype=np.float64)
        self.mask = np.asarray(mask).astype(np.uint8)

    @classmethod
    def simulate(
        cls, target: np.ndarray, side: int, mask: np.ndarray, palette: Optional[Palette] = None
    ) -> "UpsampleExample":
        """
        Build an example from a ground-truth image: downsample to side x side,
        optionally round-trip through a palette, and upscale back.
        """
        low = downsample(target, side)
        if palette is not None:
            low = palette.dequantize(palette.quantize(low))
        return cls(target, bilinear_upscale(low, target.shape[0], target.shape[1]), mask)


def l1_loss(example: UpsampleExample, params: UpsamplerParams) -> Tensor:
    """Differentiable masked L1 of the network prediction for one example."""
    pred = predict(example.upscaled, example.target, example.mask, params)
    target = Tensor(np.transpose(example.target, (2, 0, 1)))
    diff = abs_(pred - target)
    count = float(example.mask.sum())
    if count == 0.0:
        return mean(diff)
    weights = example.mask[None, :, :].astype(np.float64)
    return sum_(mul(diff, weights)) / (3.0 * count)


def train_upsampler(
    dataset: Sequence[UpsampleExample],
    cfg: UpsamplerTrainConfig,
    config: Optional[UpsamplerConfig] = None,
    init: Optional[UpsamplerParams] = None,
) -> UpsamplerParams:
    """
    Fit the refinement network with Adam on the masked L1 loss.

    Raises:
        UsageError: On an empty dataset
    """
    if not dataset:
        raise UsageError("upsampler dataset is empty")
    params = init or init_upsampler(config or UpsamplerConfig(), seed=cfg.seed)
    optimizer = Adam(
        params.named_parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        clip_norm=cfg.clip_norm,
    )
    for step in range(cfg.steps):
        rng = stream(cfg.seed, "batches", step)
        picks = rng.integers(0, len(dataset), size=cfg.batch_size)
        optimizer.zero_grad()
        total: Optional[Tensor] = None
        for index in picks:
            loss = l1_loss(dataset[int(index)], params)
            total = loss if total is None else total + loss
        assert total is not None
        batch_loss = total / float(len(picks))
        backward(batch_loss)
        optimizer.step()
        if (step + 1) % 50 == 0 or step + 1 == cfg.steps:
            logger.info("Upsampler step", step=step + 1, l1=round(float(batch_loss.data), 5))
    return params
