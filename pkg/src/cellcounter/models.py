"""The two networks and their losses.

The segmenter is a feature-pyramid network over single-channel microscopy
images: a stride-2 down path, 3x3 lateral links onto a common channel
width, nearest-neighbor upsampling with elementwise-add merges, and one
pair of heads per pyramid level predicting a foreground mask and its
per-pixel log-variance s = log sigma^2.

The counter is a VGG-11-style conv stack over a predicted foreground mask
followed by two fully connected heads: one emits a non-negative cell count
(final ReLU), the other the count's log-variance (no ReLU).

Both train under the same attenuated regression loss: the per-element
residual is scaled by exp(-s/2) and the log-variance is paid as a
penalty, so the nets learn to flag inputs they cannot fit. The residual
enters unsquared by default (|r| / (2 sigma) + s); ``squared=True``
selects the conventional r^2 / (2 sigma^2) + s variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ParamRegistry, init_params
from .tensor import Tensor

__all__ = [
    "FpnConfig",
    "CountConfig",
    "FpnOutput",
    "CountOutput",
    "FpnModel",
    "CountModel",
    "build_fpn",
    "build_counter",
    "aleatoric_loss",
    "tv_loss",
    "fpn_loss",
    "avgpool2",
    "ci95",
    "format_count_ci",
]


def _scaled(filters: int, width_multiplier: float) -> int:
    return max(1, math.ceil(filters * width_multiplier))


@dataclass
class FpnConfig:
    """Pyramid segmenter hyperparameters."""

    pyramid_depth: int = 4
    lateral_filters: int = 128
    head_filters: int = 256
    down_filters: tuple = (64, 128, 128, 128)
    leaky_slope: float = 0.01
    tv_weight: float = 1e-4
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.pyramid_depth < 1:
            raise ValueError(f"pyramid_depth must be >= 1, got {self.pyramid_depth}")
        if len(self.down_filters) != self.pyramid_depth:
            raise ValueError(
                f"down_filters has {len(self.down_filters)} entries, "
                f"pyramid_depth is {self.pyramid_depth}"
            )
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ValueError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        if min(self.down_filters) < 1 or self.lateral_filters < 1 or self.head_filters < 1:
            raise ValueError("all filter counts must be >= 1")

    def scaled_down_filters(self) -> list[int]:
        return [_scaled(f, self.width_multiplier) for f in self.down_filters]

    def scaled_lateral(self) -> int:
        return _scaled(self.lateral_filters, self.width_multiplier)

    def scaled_head(self) -> int:
        return _scaled(self.head_filters, self.width_multiplier)


@dataclass
class CountConfig:
    """VGG-11-style counter hyperparameters.

    ``pool_after`` lists 1-based conv indices followed by a 2x2 max-pool;
    the default plan halves the input five times, hence the divisibility-
    by-32 requirement. ``input_hw`` fixes the first fully connected
    layer's fan-in and must match the masks fed at runtime.
    """

    conv_plan: tuple = (64, 128, 256, 256, 512, 512, 512, 512)
    pool_after: tuple = (1, 2, 4, 6, 8)
    fc_dims: tuple = (1024, 512, 1)
    leaky_slope: float = 0.01
    width_multiplier: float = 1.0
    input_hw: tuple = (96, 128)

    def __post_init__(self):
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ValueError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        if self.fc_dims[-1] != 1:
            raise ValueError(f"final fc dim must be 1, got {self.fc_dims[-1]}")
        if any(p < 1 or p > len(self.conv_plan) for p in self.pool_after):
            raise ValueError(f"pool_after indices {self.pool_after} out of range")
        divisor = self.spatial_divisor()
        h, w = self.input_hw
        if h % divisor or w % divisor:
            raise ValueError(f"input_hw {h}x{w} must be divisible by {divisor}")

    def spatial_divisor(self) -> int:
        return 2 ** len(self.pool_after)

    def scaled_plan(self) -> list[int]:
        return [_scaled(f, self.width_multiplier) for f in self.conv_plan]


@dataclass
class FpnOutput:
    """Per-scale masks and log-variances; index k lives at 1/2^(k+1) resolution."""

    masks: list
    logvars: list


@dataclass
class CountOutput:
    """Count and log-variance columns, one row per batch item."""

    count: Tensor
    logvar: Tensor


# ---------------------------------------------------------------------------
# layer blocks


class _ConvBlock:
    """3x3 conv, optionally followed by batch-norm and leaky ReLU."""

    def __init__(self, reg: ParamRegistry, prefix: str, in_ch: int, out_ch: int,
                 stride: int = 1, bn: bool = True, act: bool = True, slope: float = 0.01):
        self.stride = stride
        self.slope = slope
        self.bn = bn
        self.act = act
        self.weight = reg.add_param(f"{prefix}.weight", Tensor(np.zeros((out_ch, in_ch, 3, 3))))
        self.bias = reg.add_param(f"{prefix}.bias", Tensor(np.zeros(out_ch)))
        if bn:
            self.gamma = reg.add_param(f"{prefix}.bn.gamma", Tensor(np.zeros(out_ch)))
            self.beta = reg.add_param(f"{prefix}.bn.beta", Tensor(np.zeros(out_ch)))
            self.running_mean = reg.add_buffer(f"{prefix}.bn.running_mean", Tensor(np.zeros(out_ch)))
            self.running_var = reg.add_buffer(f"{prefix}.bn.running_var", Tensor(np.zeros(out_ch)))

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=1)
        if self.bn:
            h = T.batchnorm2d(h, self.gamma, self.beta, self.running_mean, self.running_var, mode=mode)
        if self.act:
            h = T.leaky_relu(h, self.slope)
        return h


class _LinearBlock:
    """Fully connected layer, optionally with batch-norm and leaky ReLU.

    Batch-norm over features reuses the NCHW kernel on a (N, D, 1, 1) view.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, in_dim: int, out_dim: int,
                 bn: bool = True, act: bool = True, slope: float = 0.01):
        self.slope = slope
        self.bn = bn
        self.act = act
        self.out_dim = out_dim
        self.weight = reg.add_param(f"{prefix}.weight", Tensor(np.zeros((in_dim, out_dim))))
        self.bias = reg.add_param(f"{prefix}.bias", Tensor(np.zeros(out_dim)))
        if bn:
            self.gamma = reg.add_param(f"{prefix}.bn.gamma", Tensor(np.zeros(out_dim)))
            self.beta = reg.add_param(f"{prefix}.bn.beta", Tensor(np.zeros(out_dim)))
            self.running_mean = reg.add_buffer(f"{prefix}.bn.running_mean", Tensor(np.zeros(out_dim)))
            self.running_var = reg.add_buffer(f"{prefix}.bn.running_var", Tensor(np.zeros(out_dim)))

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = T.linear(x, self.weight, self.bias)
        if self.bn:
            n = h.shape[0]
            h4 = h.reshape(n, self.out_dim, 1, 1)
            h4 = T.batchnorm2d(h4, self.gamma, self.beta, self.running_mean, self.running_var, mode=mode)
            h = h4.reshape(n, self.out_dim)
        if self.act:
            h = T.leaky_relu(h, self.slope)
        return h


# ---------------------------------------------------------------------------
# segmenter


class FpnModel:
    """Pyramid segmenter: shared down path, per-level mask and log-variance heads."""

    def __init__(self, config: FpnConfig):
        self.config = config
        self.registry = ParamRegistry()
        reg = self.registry
        slope = config.leaky_slope
        down = config.scaled_down_filters()
        lateral = config.scaled_lateral()
        head = config.scaled_head()

        self.down_blocks = []
        in_ch = 1
        for k, out_ch in enumerate(down):
            self.down_blocks.append(
                _ConvBlock(reg, f"fpn.down.{k}.conv", in_ch, out_ch, stride=2, slope=slope)
            )
            in_ch = out_ch

        # Lateral links carry batch-norm like every non-output conv, but no
        # activation: the merge sum stays linear until the heads.
        self.lateral_blocks = [
            _ConvBlock(reg, f"fpn.lateral.{k}.conv", down[k], lateral, act=False, slope=slope)
            for k in range(config.pyramid_depth)
        ]

        def make_head(tag: str, k: int):
            return (
                _ConvBlock(reg, f"fpn.{tag}.{k}.conv0", lateral, head, slope=slope),
                _ConvBlock(reg, f"fpn.{tag}.{k}.conv1", head, head, slope=slope),
                _ConvBlock(reg, f"fpn.{tag}.{k}.out", head, 1, bn=False, act=False),
            )

        self.mask_heads = [make_head("mask_head", k) for k in range(config.pyramid_depth)]
        self.logvar_heads = [make_head("logvar_head", k) for k in range(config.pyramid_depth)]

    def forward(self, images: Tensor, mode: str = "train") -> FpnOutput:
        d = self.config.pyramid_depth
        if images.data.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"expected images of shape (N, 1, H, W), got {images.shape}")
        h, w = images.shape[2], images.shape[3]
        divisor = 2 ** d
        if h % divisor or w % divisor:
            raise ValueError(f"image spatial dims {h}x{w} must be divisible by {divisor}")

        downs = []
        x = images
        for block in self.down_blocks:
            x = block(x, mode)
            downs.append(x)
        laterals = [blk(downs[k], mode) for k, blk in enumerate(self.lateral_blocks)]

        merged = [None] * d
        merged[d - 1] = laterals[d - 1]
        for k in range(d - 2, -1, -1):
            merged[k] = T.add(laterals[k], T.upsample_nearest2(merged[k + 1]))

        def run_head(head, x):
            c0, c1, out = head
            return out(c1(c0(x, mode), mode), mode)

        masks = [run_head(self.mask_heads[k], merged[k]) for k in range(d)]
        logvars = [run_head(self.logvar_heads[k], merged[k]) for k in range(d)]
        return FpnOutput(masks=masks, logvars=logvars)


def build_fpn(config: FpnConfig | None = None, seed: int = 0) -> FpnModel:
    """Construct and deterministically initialize a segmenter."""
    model = FpnModel(config or FpnConfig())
    init_params(model.registry, seed)
    return model


# ---------------------------------------------------------------------------
# counter


class CountModel:
    """VGG-11-style regressor from foreground mask to (count, log-variance)."""

    def __init__(self, config: CountConfig):
        self.config = config
        self.registry = ParamRegistry()
        reg = self.registry
        slope = config.leaky_slope
        plan = config.scaled_plan()
        pools = set(config.pool_after)

        self.conv_blocks = []
        self.pool_here = []
        in_ch = 1
        for i, out_ch in enumerate(plan):
            self.conv_blocks.append(
                _ConvBlock(reg, f"counter.conv.{i}", in_ch, out_ch, slope=slope)
            )
            self.pool_here.append((i + 1) in pools)
            in_ch = out_ch

        h, w = config.input_hw
        divisor = config.spatial_divisor()
        self.flat_dim = plan[-1] * (h // divisor) * (w // divisor)

        def make_fc(tag: str, final_relu: bool):
            dims = list(config.fc_dims)
            blocks = []
            d_in = self.flat_dim
            for j, d_out in enumerate(dims):
                last = j == len(dims) - 1
                blocks.append(
                    _LinearBlock(reg, f"counter.{tag}.{j}", d_in, d_out,
                                 bn=not last, act=not last, slope=slope)
                )
                d_in = d_out
            return blocks

        self.count_fc = make_fc("count_fc", final_relu=True)
        self.logvar_fc = make_fc("logvar_fc", final_relu=False)

    def forward(self, mask: Tensor, mode: str = "train") -> CountOutput:
        if mask.data.ndim != 4 or mask.shape[1] != 1:
            raise ValueError(f"expected masks of shape (N, 1, H, W), got {mask.shape}")
        h, w = mask.shape[2], mask.shape[3]
        divisor = self.config.spatial_divisor()
        if h % divisor or w % divisor:
            raise ValueError(f"mask spatial dims {h}x{w} must be divisible by {divisor}")
        if (h, w) != tuple(self.config.input_hw):
            raise ValueError(
                f"mask spatial dims {h}x{w} do not match the configured input "
                f"{self.config.input_hw[0]}x{self.config.input_hw[1]}"
            )

        x = mask
        for block, pool in zip(self.conv_blocks, self.pool_here):
            x = block(x, mode)
            if pool:
                x = T.maxpool2d(x)
        x = x.flatten()

        c = x
        for block in self.count_fc:
            c = block(c, mode)
        count = T.relu(c)

        v = x
        for block in self.logvar_fc:
            v = block(v, mode)
        return CountOutput(count=count, logvar=v)


def build_counter(config: CountConfig | None = None, seed: int = 0) -> CountModel:
    """Construct and deterministically initialize a counter."""
    model = CountModel(config or CountConfig())
    init_params(model.registry, seed)
    return model


# ---------------------------------------------------------------------------
# losses


def aleatoric_loss(pred: Tensor, target: Tensor, logvar: Tensor, squared: bool = False) -> Tensor:
    """Uncertainty-attenuated regression loss, averaged over elements.

    Default form: |y - yhat| * exp(-s/2) / 2 + s, with s = log sigma^2,
    i.e. the residual over 2 sigma plus the log-variance penalty.
    ``squared=True`` uses r^2 * exp(-s) / 2 + s instead.
    """
    if pred.shape != target.shape or pred.shape != logvar.shape:
        raise ValueError(
            f"aleatoric_loss needs identical shapes, got pred {pred.shape}, "
            f"target {target.shape}, logvar {logvar.shape}"
        )
    r = T.sub(pred, target)
    atten = T.mul(logvar, -1.0 if squared else -0.5).exp()
    residual = r.square() if squared else r.abs()
    per_elem = T.add(T.mul(T.mul(residual, atten), 0.5), logvar)
    return per_elem.mean()


def tv_loss(mask: Tensor) -> Tensor:
    """Anisotropic L1 total variation, normalized by N*H*W.

    Forward and backward are a dedicated primitive: the gradient routes
    +/- sign(difference) to the two pixels of every adjacent pair
    (sign(0) = 0, matching the abs subgradient convention).
    """
    xd = mask.data
    if xd.ndim != 4:
        raise ValueError(f"tv_loss expects (N, C, H, W), got shape {mask.shape}")
    n, _, h, w = xd.shape
    if h < 2 or w < 2:
        raise ValueError(f"tv_loss needs spatial dims >= 2, got {h}x{w}")
    dh = xd[:, :, 1:, :] - xd[:, :, :-1, :]
    dw = xd[:, :, :, 1:] - xd[:, :, :, :-1]
    denom = n * h * w
    val = (np.abs(dh).sum() + np.abs(dw).sum()) / denom
    out = Tensor(np.asarray(val, dtype=xd.dtype))

    def bwd(g):
        sh = np.sign(dh)
        sw = np.sign(dw)
        gx = np.zeros_like(xd)
        gx[:, :, 1:, :] += sh
        gx[:, :, :-1, :] -= sh
        gx[:, :, :, 1:] += sw
        gx[:, :, :, :-1] -= sw
        return [gx * (np.asarray(g, dtype=xd.dtype) / denom)]

    return T._record(out, (mask,), bwd)


def avgpool2(a: np.ndarray) -> np.ndarray:
    """2x2 average pooling on an NCHW array (target downsampling)."""
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    return a.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def fpn_loss(output: FpnOutput, target_mask: Tensor, tv_weight: float,
             squared: bool = False) -> Tensor:
    """Sum over pyramid scales of attenuated mask loss plus weighted TV.

    ``target_mask`` is the scale-1 (half-resolution) foreground target;
    deeper scales compare against repeated 2x2 average poolings of it.
    """
    if target_mask.shape != output.masks[0].shape:
        raise ValueError(
            f"target shape {target_mask.shape} does not match scale-1 mask "
            f"{output.masks[0].shape}"
        )
    total = None
    tgt = target_mask.data
    for k, (m, lv) in enumerate(zip(output.masks, output.logvars)):
        if k > 0:
            tgt = avgpool2(tgt)
        term = aleatoric_loss(m, Tensor(tgt, dtype=tgt.dtype), lv, squared=squared)
        if tv_weight != 0.0:
            term = T.add(term, T.mul(tv_loss(m), float(tv_weight)))
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# confidence interval


def ci95(count: float, logvar: float) -> tuple[float, float]:
    """95% interval: count -/+ 1.96 * sigma with sigma = exp(logvar / 2), floor 0."""
    halfwidth = 1.96 * math.exp(float(logvar) / 2.0)
    return max(0.0, float(count) - halfwidth), float(count) + halfwidth


def format_count_ci(count: float, logvar: float) -> str:
    """Render a prediction as e.g. "14.00 ± 1.82"."""
    halfwidth = 1.96 * math.exp(float(logvar) / 2.0)
    return f"{count:.2f} ± {halfwidth:.2f}"
