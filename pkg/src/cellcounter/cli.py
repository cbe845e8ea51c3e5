"""Command-line front end.

Subcommands: ``generate``, ``train-fpn``, ``train-count``, ``predict``,
``evaluate``, ``saliency``. Every run resolves one flat configuration
(defaults <- config file <- key=value overrides), prints it as a header,
then acts; unknown keys are fatal so typos cannot silently fall back to
defaults. Results go to stdout as ``key=value`` lines. Exit codes: 0 ok,
1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from .models import CountConfig, FpnConfig, FpnModel, CountModel, build_counter, build_fpn
from .interpret import export_panels, resize_nearest, saliency
from .nn import load_checkpoint, save_checkpoint
from .optim import metrics, split_dataset, train_counter, train_fpn
from .simdata import GenConfig, generate_dataset, load_dataset, read_pgm
from .tensor import Tensor, set_num_threads
from .validation import as_unit_float

__all__ = ["RunConfig", "main"]


def _parse_hw(key, text):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"config key {key}: expected <height>x<width>, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_bool(key, text):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"config key {key}: expected true/false, got {text!r}")


def _parse_ints(key, text):
    return tuple(int(t.strip()) for t in text.split(","))


def _parse_floats(key, text):
    return tuple(float(t.strip()) for t in text.split(","))


# key -> (kind, default). Kinds: int, float, bool, str, hw, ints, floats.
SCHEMA = {
    "seed": ("int", 0),
    "threads": ("int", 1),
    "data.dir": ("str", "data"),
    "data.n": ("int", 200),
    "data.mask_fraction": ("float", 0.25),
    "data.train_fraction": ("float", 0.8),
    "gen.render_hw": ("hw", (520, 696)),
    "gen.output_hw": ("hw", (192, 256)),
    "gen.count_min": ("int", 1),
    "gen.count_max": ("int", 100),
    "gen.cluster_prob": ("float", 0.25),
    "gen.mean_area": ("float", 250.0),
    "gen.area_spread": ("float", 0.2),
    "gen.blur_sigmas": ("floats", (1.0, 4.0, 7.0, 10.0)),
    "gen.noise_std": ("float", 8.0),
    "fpn.width_multiplier": ("float", 1.0),
    "fpn.pyramid_depth": ("int", 4),
    "fpn.down_filters": ("ints", (64, 128, 128, 128)),
    "fpn.lateral_filters": ("int", 128),
    "fpn.head_filters": ("int", 256),
    "fpn.leaky_slope": ("float", 0.01),
    "fpn.tv_weight": ("float", 1e-4),
    "fpn.epochs": ("int", 10),
    "fpn.lr": ("float", 1e-3),
    "fpn.batch": ("int", 2),
    "fpn.squared_residual": ("bool", False),
    "count.width_multiplier": ("float", 1.0),
    "count.conv_plan": ("ints", (64, 128, 256, 256, 512, 512, 512, 512)),
    "count.pool_after": ("ints", (1, 2, 4, 6, 8)),
    "count.fc_dims": ("ints", (1024, 512, 1)),
    "count.leaky_slope": ("float", 0.01),
    "count.epochs": ("int", 10),
    "count.lr": ("float", 1e-4),
    "count.batch": ("int", 5),
    "count.squared_residual": ("bool", False),
    "paths.fpn_checkpoint": ("str", "fpn.cckp"),
    "paths.count_checkpoint": ("str", "counter.cckp"),
    "paths.fpn_report": ("str", "fpn_report.csv"),
    "paths.count_report": ("str", "counter_report.csv"),
    "paths.metrics": ("str", "metrics.csv"),
    "paths.failures": ("str", "failures.csv"),
    "eval.split": ("str", "test"),
    "interpret.target": ("str", "prediction"),
    "interpret.truth": ("float", float("nan")),
}

_PARSERS = {
    "int": lambda key, text: int(text),
    "float": lambda key, text: float(text),
    "bool": _parse_bool,
    "str": lambda key, text: text,
    "hw": _parse_hw,
    "ints": _parse_ints,
    "floats": _parse_floats,
}


def _render(kind, value):
    if kind == "bool":
        return "true" if value else "false"
    if kind == "hw":
        return f"{value[0]}x{value[1]}"
    if kind in ("ints", "floats"):
        return ",".join(str(v) for v in value)
    if kind == "float" and math.isnan(value):
        return "nan"
    return str(value)


class RunConfig:
    """Fully resolved flat configuration for one command invocation."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    @staticmethod
    def _parse_pair(key: str, text: str) -> tuple:
        key = key.strip()
        if key not in SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        kind = SCHEMA[key][0]
        try:
            return key, _PARSERS[kind](key, text.strip())
        except ValueError as e:
            if str(e).startswith("config key"):
                raise
            raise ValueError(f"config key {key}: cannot parse {text.strip()!r} as {kind}")

    @classmethod
    def resolve(cls, config_path: str | None, overrides: list) -> "RunConfig":
        values = {key: default for key, (kind, default) in SCHEMA.items()}
        if config_path is not None:
            with open(config_path, "r") as fh:
                for ln, raw in enumerate(fh.read().split("\n"), start=1):
                    line = raw.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ValueError(f"{config_path} line {ln}: expected key = value, got {raw!r}")
                    key, _, text = line.partition("=")
                    key, value = cls._parse_pair(key, text)
                    values[key] = value
        for token in overrides:
            if "=" not in token:
                raise ValueError(f"override {token!r} is not of the form key=value")
            key, _, text = token.partition("=")
            key, value = cls._parse_pair(key, text)
            values[key] = value
        return cls(values)

    def header_lines(self) -> list:
        lines = ["# resolved config"]
        for key in sorted(self.values):
            lines.append(f"{key} = {_render(SCHEMA[key][0], self.values[key])}")
        lines.append("# end config")
        return lines

    def gen_config(self) -> GenConfig:
        v = self.values
        return GenConfig(render_hw=v["gen.render_hw"], output_hw=v["gen.output_hw"],
                         count_range=(v["gen.count_min"], v["gen.count_max"]),
                         cluster_prob=v["gen.cluster_prob"], mean_area=v["gen.mean_area"],
                         area_spread=v["gen.area_spread"], blur_sigmas=v["gen.blur_sigmas"],
                         noise_std=v["gen.noise_std"], seed=v["seed"])

    def fpn_config(self) -> FpnConfig:
        v = self.values
        return FpnConfig(pyramid_depth=v["fpn.pyramid_depth"],
                         lateral_filters=v["fpn.lateral_filters"],
                         head_filters=v["fpn.head_filters"],
                         down_filters=v["fpn.down_filters"],
                         leaky_slope=v["fpn.leaky_slope"], tv_weight=v["fpn.tv_weight"],
                         width_multiplier=v["fpn.width_multiplier"])

    def count_config(self, input_hw) -> CountConfig:
        v = self.values
        return CountConfig(conv_plan=v["count.conv_plan"], pool_after=v["count.pool_after"],
                           fc_dims=v["count.fc_dims"], leaky_slope=v["count.leaky_slope"],
                           width_multiplier=v["count.width_multiplier"], input_hw=tuple(input_hw))


def _load_fpn(cfg: RunConfig) -> FpnModel:
    model = build_fpn(cfg.fpn_config(), seed=cfg["seed"])
    tensors, _ = load_checkpoint(cfg["paths.fpn_checkpoint"])
    model.registry.load_state(tensors)
    return model


def _load_counter(cfg: RunConfig, input_hw) -> CountModel:
    model = build_counter(cfg.count_config(input_hw), seed=cfg["seed"])
    tensors, _ = load_checkpoint(cfg["paths.count_checkpoint"])
    model.registry.load_state(tensors)
    return model


def _fpn_masks(model: FpnModel, images, batch: int):
    """Scale-1 masks and log-variances, upscaled to frame resolution."""
    h, w = images[0].shape
    masks = np.empty((len(images), h, w))
    logvars = np.empty((len(images), h, w))
    for lo in range(0, len(images), max(1, batch)):
        chunk = [as_unit_float(img) for img in images[lo : lo + max(1, batch)]]
        out = model.forward(Tensor(np.stack(chunk)[:, None]), mode="eval")
        for j in range(len(chunk)):
            masks[lo + j] = resize_nearest(out.masks[0].data[j, 0], (h, w))
            logvars[lo + j] = resize_nearest(out.logvars[0].data[j, 0], (h, w))
    return np.clip(masks, 0.0, 1.0), logvars


def _counter_counts(model: CountModel, masks, batch: int):
    preds = np.empty(len(masks))
    logvars = np.empty(len(masks))
    for lo in range(0, len(masks), max(1, batch)):
        chunk = masks[lo : lo + max(1, batch)]
        out = model.forward(Tensor(np.asarray(chunk)[:, None]), mode="eval")
        preds[lo : lo + len(chunk)] = out.count.data[:, 0]
        logvars[lo : lo + len(chunk)] = out.logvar.data[:, 0]
    return preds, logvars


def _split_indices(cfg: RunConfig, n: int):
    return split_dataset(n, cfg["data.train_fraction"], cfg["seed"])


def cmd_generate(cfg: RunConfig, args) -> int:
    entries = generate_dataset(cfg.gen_config(), cfg["data.n"], cfg["data.dir"],
                               cfg["data.mask_fraction"])
    masked = sum(1 for e in entries if e.mask_filename is not None)
    print(f"generated={len(entries)}")
    print(f"masked={masked}")
    print(f"dir={cfg['data.dir']}")
    return 0


def cmd_train_fpn(cfg: RunConfig, args) -> int:
    data = load_dataset(cfg["data.dir"])
    train_idx, test_idx = _split_indices(cfg, len(data))
    train = [(data[i][1], data[i][2]) for i in train_idx if data[i][2] is not None]
    val = [(data[i][1], data[i][2]) for i in test_idx if data[i][2] is not None]
    if not train:
        raise ValueError("no masked samples in the training split; raise data.mask_fraction")
    model, report = train_fpn(train, val, config=cfg.fpn_config(),
                              epochs=cfg["fpn.epochs"], lr=cfg["fpn.lr"],
                              batch=cfg["fpn.batch"], seed=cfg["seed"],
                              squared=cfg["fpn.squared_residual"])
    save_checkpoint(model.registry, None, cfg["paths.fpn_checkpoint"])
    report.to_csv(cfg["paths.fpn_report"])
    print(f"train_samples={len(train)}")
    print(f"val_samples={len(val) or len(train)}")
    print(f"best_epoch={report.best_epoch}")
    print(f"mask_mse={report.final['mask_mse']:.6f}")
    print(f"checkpoint={cfg['paths.fpn_checkpoint']}")
    print(f"report={cfg['paths.fpn_report']}")
    return 0


def cmd_train_count(cfg: RunConfig, args) -> int:
    data = load_dataset(cfg["data.dir"])
    fpn = _load_fpn(cfg)
    images = [img for _, img, _ in data]
    masks, _ = _fpn_masks(fpn, images, cfg["fpn.batch"])
    counts = [float(entry.count) for entry, _, _ in data]
    train_idx, test_idx = _split_indices(cfg, len(data))
    train = [(masks[i], counts[i]) for i in train_idx]
    val = [(masks[i], counts[i]) for i in test_idx]
    model, report = train_counter(train, val, config=cfg.count_config(images[0].shape),
                                  epochs=cfg["count.epochs"], lr=cfg["count.lr"],
                                  batch=cfg["count.batch"], seed=cfg["seed"],
                                  squared=cfg["count.squared_residual"])
    save_checkpoint(model.registry, None, cfg["paths.count_checkpoint"])
    report.to_csv(cfg["paths.count_report"])
    print(f"train_samples={len(train)}")
    print(f"val_samples={len(val) or len(train)}")
    print(f"best_epoch={report.best_epoch}")
    for key, value in sorted(report.final.items()):
        print(f"{key}={value:.6f}")
    print(f"checkpoint={cfg['paths.count_checkpoint']}")
    print(f"report={cfg['paths.count_report']}")
    return 0


def _pipeline_single(cfg: RunConfig, image_path: str):
    image = read_pgm(image_path)
    fpn = _load_fpn(cfg)
    masks, logvars = _fpn_masks(fpn, [image], batch=1)
    counter = _load_counter(cfg, image.shape)
    return image, masks[0], logvars[0], counter


def cmd_predict(cfg: RunConfig, args) -> int:
    image, mask, logvar_map, counter = _pipeline_single(cfg, args.image)
    preds, logvars = _counter_counts(counter, [mask], batch=1)
    halfwidth = 1.96 * math.exp(logvars[0] / 2.0)
    print(f"count={preds[0]:.2f} ci95={halfwidth:.2f}")
    if args.panels is not None:
        sal = saliency(counter, Tensor(mask[None, None]), target="prediction")
        export_panels(image, mask, logvar_map, sal, args.panels)
        print(f"panels={args.panels}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    data = load_dataset(cfg["data.dir"])
    train_idx, test_idx = _split_indices(cfg, len(data))
    which = cfg["eval.split"]
    if which == "train":
        idx = train_idx
    elif which == "test":
        idx = test_idx
    elif which == "all":
        idx = list(range(len(data)))
    else:
        raise ValueError(f"config key eval.split: expected train/test/all, got {which!r}")
    if len(idx) < 2:
        raise ValueError(f"evaluation split {which!r} has {len(idx)} samples, needs >= 2")

    fpn = _load_fpn(cfg)
    images = [data[i][1] for i in idx]
    masks, _ = _fpn_masks(fpn, images, cfg["fpn.batch"])
    counter = _load_counter(cfg, images[0].shape)
    preds, logvars = _counter_counts(counter, masks, cfg["count.batch"])
    truths = np.array([float(data[i][0].count) for i in idx])

    scores = metrics(preds, logvars, truths)
    order = ("mse", "r2", "l1_mean", "l1_max", "ci_coverage")
    with open(cfg["paths.metrics"], "w", newline="") as fh:
        fh.write("metric,value\n")
        for key in order:
            fh.write(f"{key},{scores[key]:.6f}\n")

    with open(cfg["paths.failures"], "w", newline="") as fh:
        fh.write("filename,count,pred,lo,hi\n")
        n_fail = 0
        for row, i in enumerate(idx):
            hw = 1.96 * math.exp(logvars[row] / 2.0)
            lo, hi = max(0.0, preds[row] - hw), preds[row] + hw
            if not (lo <= truths[row] <= hi):
                entry = data[i][0]
                fh.write(f"{entry.filename},{entry.count},{preds[row]:.6f},{lo:.6f},{hi:.6f}\n")
                n_fail += 1

    print(f"n_eval={len(idx)}")
    for key in order:
        print(f"{key}={scores[key]:.6f}")
    print(f"n_failures={n_fail}")
    print(f"metrics={cfg['paths.metrics']}")
    print(f"failures={cfg['paths.failures']}")
    return 0


def cmd_saliency(cfg: RunConfig, args) -> int:
    image, mask, logvar_map, counter = _pipeline_single(cfg, args.image)
    target = cfg["interpret.target"]
    truth = cfg["interpret.truth"]
    sal = saliency(counter, Tensor(mask[None, None]), target=target,
                   truth=None if math.isnan(truth) else truth,
                   squared=cfg["count.squared_residual"])
    prefix = args.out if args.out is not None else args.image.rsplit(".", 1)[0]
    export_panels(image, mask, logvar_map, sal, prefix)
    print(f"saliency_max={sal.max_value:.6g}")
    print(f"panels={prefix}")
    return 0


class _Parser(argparse.ArgumentParser):
    # Usage mistakes are validation errors (exit 1), not argparse's exit 2.
    def error(self, message):
        raise ValueError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cellcounter",
                     description="Synthetic microscopy cell segmentation and counting.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, image_arg=False, panels=False, out=False):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if image_arg:
            p.add_argument("image", help="input PGM frame")
        if panels:
            p.add_argument("--panels", default=None, metavar="PREFIX",
                           help="also export inspection panels with this path prefix")
        if out:
            p.add_argument("--out", default=None, metavar="PREFIX",
                           help="panel path prefix (default: image path without extension)")
        p.add_argument("-c", "--config", default=None, help="key = value config file")
        # Bare key=value tokens are pulled out before argparse runs (see
        # main); this positional only documents them in --help.
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="config overrides applied after the file")
        return p

    add("generate", cmd_generate, "write a synthetic dataset")
    add("train-fpn", cmd_train_fpn, "train the segmenter on the masked split")
    add("train-count", cmd_train_count, "train the counter on segmenter-produced masks")
    add("predict", cmd_predict, "count cells in one frame", image_arg=True, panels=True)
    add("evaluate", cmd_evaluate, "score a manifest split and list CI failures")
    add("saliency", cmd_saliency, "export inspection panels for one frame",
        image_arg=True, out=True)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    # Overrides are the bare key=value tokens; letting argparse route them
    # would break whenever an option sits between two positionals.
    overrides = [t for t in argv if "=" in t and not t.startswith("-")]
    rest = [t for t in argv if "=" not in t or t.startswith("-")]
    try:
        args = _build_parser().parse_args(rest)
        cfg = RunConfig.resolve(args.config, args.overrides + overrides)
        set_num_threads(cfg["threads"])
        for line in cfg.header_lines():
            print(line)
        return args.func(cfg, args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
