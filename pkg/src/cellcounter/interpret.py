"""Saliency maps over the counter and image-panel export.

Saliency is the vanilla input-gradient kind: the derivative of a chosen
scalar (the predicted count by default, or the training loss when ground
truth is supplied) with respect to every input pixel, taken with the model
frozen in eval mode. Maps are reported as |gradient| scaled by its own
maximum, so values land in [0, 1]; an all-flat model legitimately yields
the all-zero map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import CountModel, aleatoric_loss
from .simdata import write_pgm
from .tensor import Tape, Tensor, backward, release_graph

__all__ = ["SaliencyMap", "saliency", "export_panels", "resize_nearest"]


@dataclass
class SaliencyMap:
    scores: np.ndarray  # (H, W), non-negative, in [0, 1]
    max_value: float  # |gradient| maximum before scaling; 0 for an all-zero map
    raw: np.ndarray  # signed input gradient, same shape


def saliency(model: CountModel, mask: Tensor, target: str = "prediction",
             truth: float | None = None, squared: bool = False) -> SaliencyMap:
    """Input-gradient saliency of the counter for one image.

    ``target`` selects the differentiated scalar: "prediction" (the count
    output) or "loss" (the attenuated regression loss, requires ``truth``).
    """
    if target not in ("prediction", "loss"):
        raise ValueError(f"saliency target must be 'prediction' or 'loss', got {target!r}")
    if target == "loss" and truth is None:
        raise ValueError("saliency target 'loss' requires the ground-truth count")
    if mask.data.ndim != 4 or mask.shape[0] != 1 or mask.shape[1] != 1:
        raise ValueError(f"saliency expects a single (1, 1, H, W) mask, got {mask.shape}")

    x = Tensor(mask.data.copy(), requires_grad=True, dtype=mask.dtype)
    with Tape():
        out = model.forward(x, mode="eval")
        if target == "prediction":
            scalar = out.count.sum()
        else:
            t = Tensor(np.full((1, 1), float(truth)), dtype=x.dtype)
            scalar = aleatoric_loss(out.count, t, out.logvar, squared=squared)
    backward(scalar)
    model.registry.zero_grad()
    release_graph(scalar)

    raw = x.grad[0, 0].copy() if x.grad is not None else np.zeros(mask.shape[2:], dtype=mask.dtype)
    mag = np.abs(raw)
    peak = float(mag.max())
    scores = mag / peak if peak > 0 else np.zeros_like(mag)
    return SaliencyMap(scores=scores, max_value=peak, raw=raw)


def resize_nearest(img: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Nearest-neighbor resize of a 2-d array to (H, W)."""
    h, w = img.shape
    oh, ow = out_hw
    rows = (np.arange(oh) * h // oh).clip(0, h - 1)
    cols = (np.arange(ow) * w // ow).clip(0, w - 1)
    return img[rows][:, cols]


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def export_panels(image: np.ndarray, pred_mask: np.ndarray, logvar_mask: np.ndarray,
                  sal, out_path_prefix: str) -> None:
    """Write the four inspection panels as PGMs.

    ``image`` is uint8; ``pred_mask`` is clamped to [0, 1]; the uncertainty
    panel shows sigma = exp(s/2) min-max normalized per image (a constant
    sigma field renders all-zero); ``sal`` is a SaliencyMap or an array
    already in [0, 1]. All inputs must share one spatial shape, so callers
    upscale half-resolution outputs (nearest-neighbor) beforehand.
    """
    scores = sal.scores if isinstance(sal, SaliencyMap) else np.asarray(sal)
    shapes = {image.shape, pred_mask.shape, logvar_mask.shape, scores.shape}
    if len(shapes) != 1:
        raise ValueError(f"panel shapes differ: {sorted(shapes)}")

    write_pgm(np.asarray(image, dtype=np.uint8), f"{out_path_prefix}_input.pgm")
    write_pgm(_to_u8(np.clip(pred_mask, 0.0, 1.0)), f"{out_path_prefix}_mask.pgm")

    sigma = np.exp(np.asarray(logvar_mask, dtype=np.float64) / 2.0)
    span = sigma.max() - sigma.min()
    uncert = (sigma - sigma.min()) / span if span > 0 else np.zeros_like(sigma)
    write_pgm(_to_u8(uncert), f"{out_path_prefix}_uncert.pgm")
    write_pgm(_to_u8(scores), f"{out_path_prefix}_saliency.pgm")
