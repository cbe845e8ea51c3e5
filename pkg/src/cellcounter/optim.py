"""ADAM optimizer, training loops for both networks, splits, and metrics.

Training is bit-reproducible given (seed, dataset, config) in
single-threaded mode: initialization, epoch shuffles, and every batch
composition derive from the counter-based RNG, and no wall-clock value
feeds back into the computation (timings are recorded but never used).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ._rng import CounterRng
from .models import (
    CountConfig,
    CountModel,
    FpnConfig,
    FpnModel,
    aleatoric_loss,
    avgpool2,
    build_counter,
    build_fpn,
    ci95,
    fpn_loss,
)
from .tensor import Tape, Tensor, backward, release_graph

__all__ = [
    "Adam",
    "adam_step",
    "TrainReport",
    "split_dataset",
    "train_fpn",
    "train_counter",
    "metrics",
]

# Shuffle streams live far away from the per-parameter init streams so the
# same (seed, stream) pair is never consumed for two purposes.
_FPN_SHUFFLE_BASE = 1_000_000_000
_COUNT_SHUFFLE_BASE = 2_000_000_000


class Adam:
    """Bias-corrected ADAM. Moments are allocated lazily per parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params) -> None:
        """One update over (name, Tensor) pairs; parameters without a
        gradient are skipped."""
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in named_params:
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            if m.shape != p.data.shape:
                raise ValueError(
                    f"optimizer state shape {m.shape} does not match parameter "
                    f"{name!r} shape {p.data.shape}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / b1t
            vhat = v / b2t
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict:
        moments = {}
        for name in self.m:
            moments[f"{name}.m"] = self.m[name].copy()
            moments[f"{name}.v"] = self.v[name].copy()
        return {"step": self.t, "moments": moments}

    def load_state(self, state: dict) -> None:
        self.t = int(state["step"])
        self.m, self.v = {}, {}
        for key, arr in state["moments"].items():
            base, kind = key.rsplit(".", 1)
            target = self.m if kind == "m" else self.v
            target[base] = np.array(arr)


def adam_step(named_params, state: Adam) -> None:
    """Apply one ADAM update using ``state``; see :meth:`Adam.step`."""
    state.step(named_params)


@dataclass
class TrainReport:
    """Per-epoch statistics plus the final held-out metrics bundle."""

    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_metric, seconds)
    final: dict = field(default_factory=dict)
    best_epoch: int = 0

    def to_csv(self, path: str) -> None:
        lines = ["epoch,train_loss,val_metric,seconds"]
        for e, tl, vm, sec in self.epochs:
            lines.append(f"{e},{tl:.6f},{vm:.6f},{sec:.3f}")
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")


def split_dataset(entries, train_fraction: float = 0.8, seed: int = 0):
    """Seeded shuffle-then-split into disjoint, exhaustive index lists.

    ``entries`` may be a sequence or a plain count.
    """
    n = entries if isinstance(entries, int) else len(entries)
    if n < 1:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in [0, 1], got {train_fraction}")
    perm = CounterRng(seed, stream=0).permutation(n)
    k = int(train_fraction * n)
    return list(perm[:k]), list(perm[k:])


def _to_float(img: np.ndarray) -> np.ndarray:
    """Grayscale image/mask to float32 in [0, 1]; float input passes through."""
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a.astype(np.float32) / 255.0
    return a.astype(np.float32)


def _half_res_target(mask: np.ndarray) -> np.ndarray:
    m = _to_float(mask)[None, None]
    return avgpool2(m)[0, 0]


def _log_line(log, epoch, loss, val, sec):
    if log is not None:
        log(f"epoch={epoch} loss={loss:.6f} val={val:.6f} sec={sec:.3f}")


def train_fpn(train_samples, val_samples=None, config: FpnConfig | None = None,
              epochs: int = 10, lr: float = 1e-3, batch: int = 2, seed: int = 0,
              squared: bool = False, log=print):
    """Train the segmenter on (image, mask) pairs.

    The per-epoch validation metric is the plain mean squared error of the
    scale-1 mask (the loss itself is ``fpn_loss``); the returned model
    carries the best-validation parameters, ties broken by earlier epoch.
    """
    if len(train_samples) == 0:
        raise ValueError("train_fpn needs a nonempty dataset")
    config = config or FpnConfig()
    if val_samples is None or len(val_samples) == 0:
        val_samples = train_samples

    model = build_fpn(config, seed)
    opt = Adam(lr)
    xs = [_to_float(img) for img, _ in train_samples]
    ys = [_half_res_target(msk) for _, msk in train_samples]
    vxs = [_to_float(img) for img, _ in val_samples]
    vys = [_half_res_target(msk) for _, msk in val_samples]

    report = TrainReport()
    best_val = None
    best_state = model.registry.state_dict()
    n = len(xs)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        perm = CounterRng(seed, stream=_FPN_SHUFFLE_BASE + epoch).permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, batch):
            idx = perm[lo : lo + batch]
            x = Tensor(np.stack([xs[i] for i in idx])[:, None])
            y = Tensor(np.stack([ys[i] for i in idx])[:, None])
            model.registry.zero_grad()
            with Tape():
                out = model.forward(x, mode="train")
                loss = fpn_loss(out, y, tv_weight=config.tv_weight, squared=squared)
            backward(loss)
            opt.step(model.registry.trainable())
            release_graph(loss)
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= n

        val = _fpn_val_mse(model, vxs, vys, batch)
        sec = time.perf_counter() - t0
        report.epochs.append((epoch, epoch_loss, val, sec))
        _log_line(log, epoch, epoch_loss, val, sec)
        if best_val is None or val < best_val:
            best_val = val
            best_state = model.registry.state_dict()
            report.best_epoch = epoch

    model.registry.load_state(best_state)
    report.final = {"mask_mse": best_val if best_val is not None else float("nan")}
    return model, report


def _fpn_val_mse(model: FpnModel, vxs, vys, batch: int) -> float:
    se, count = 0.0, 0
    for lo in range(0, len(vxs), batch):
        x = Tensor(np.stack(vxs[lo : lo + batch])[:, None])
        y = np.stack(vys[lo : lo + batch])[:, None]
        pred = model.forward(x, mode="eval").masks[0].data
        se += float(((pred - y) ** 2).sum())
        count += y.size
    return se / count


def train_counter(train_samples, val_samples=None, config: CountConfig | None = None,
                  epochs: int = 10, lr: float = 1e-4, batch: int = 5, seed: int = 0,
                  squared: bool = False, log=print):
    """Train the counter on (mask, count) pairs.

    The per-epoch validation metric is count MSE; the final bundle is
    :func:`metrics` evaluated on the validation set with the
    best-validation parameters.
    """
    if len(train_samples) == 0:
        raise ValueError("train_counter needs a nonempty dataset")
    config = config or CountConfig()
    if val_samples is None or len(val_samples) == 0:
        val_samples = train_samples

    model = build_counter(config, seed)
    opt = Adam(lr)
    xs = [_to_float(msk) for msk, _ in train_samples]
    ts = np.array([float(c) for _, c in train_samples], dtype=np.float32)
    vxs = [_to_float(msk) for msk, _ in val_samples]
    vts = np.array([float(c) for _, c in val_samples], dtype=np.float32)

    report = TrainReport()
    best_val = None
    best_state = model.registry.state_dict()
    n = len(xs)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        perm = CounterRng(seed, stream=_COUNT_SHUFFLE_BASE + epoch).permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, batch):
            idx = perm[lo : lo + batch]
            x = Tensor(np.stack([xs[i] for i in idx])[:, None])
            y = Tensor(ts[idx][:, None])
            model.registry.zero_grad()
            with Tape():
                out = model.forward(x, mode="train")
                loss = aleatoric_loss(out.count, y, out.logvar, squared=squared)
            backward(loss)
            opt.step(model.registry.trainable())
            release_graph(loss)
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= n

        preds, logvars = _counter_predict(model, vxs, batch)
        val = float(np.mean((preds - vts) ** 2))
        sec = time.perf_counter() - t0
        report.epochs.append((epoch, epoch_loss, val, sec))
        _log_line(log, epoch, epoch_loss, val, sec)
        if best_val is None or val < best_val:
            best_val = val
            best_state = model.registry.state_dict()
            report.best_epoch = epoch

    model.registry.load_state(best_state)
    preds, logvars = _counter_predict(model, vxs, batch)
    if len(vts) >= 2:
        report.final = metrics(preds, logvars, vts)
    else:
        report.final = {"mse": float(np.mean((preds - vts) ** 2))}
    return model, report


def _counter_predict(model: CountModel, vxs, batch: int):
    preds, logvars = [], []
    for lo in range(0, len(vxs), batch):
        x = Tensor(np.stack(vxs[lo : lo + batch])[:, None])
        out = model.forward(x, mode="eval")
        preds.append(out.count.data[:, 0])
        logvars.append(out.logvar.data[:, 0])
    return np.concatenate(preds), np.concatenate(logvars)


def metrics(preds, logvars, truths) -> dict:
    """Count-regression metrics bundle: mse, r2, l1_mean, l1_max, ci_coverage.

    r2 uses 1 - SSE/SST; a constant truth vector (SST = 0) yields 1.0 for
    an exact predictor and 0.0 otherwise, keeping r2 <= 1 everywhere.
    """
    p = np.asarray(preds, dtype=np.float64)
    s = np.asarray(logvars, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if not (p.shape == s.shape == t.shape):
        raise ValueError(f"length mismatch: preds {p.shape}, logvars {s.shape}, truths {t.shape}")
    if p.ndim != 1 or p.size < 2:
        raise ValueError(f"metrics needs at least 2 samples, got shape {p.shape}")

    err = p - t
    sse = float((err**2).sum())
    sst = float(((t - t.mean()) ** 2).sum())
    if sst == 0.0:
        r2 = 1.0 if sse == 0.0 else 0.0
    else:
        r2 = 1.0 - sse / sst

    covered = 0
    for pi, si, ti in zip(p, s, t):
        lo, hi = ci95(pi, si)
        if lo <= ti <= hi:
            covered += 1

    return {
        "mse": float(np.mean(err**2)),
        "r2": r2,
        "l1_mean": float(np.mean(np.abs(err))),
        "l1_max": float(np.max(np.abs(err))),
        "ci_coverage": covered / p.size,
    }
