"""Deterministic synthetic fluorescence-microscopy generator and image I/O.

Samples emulate a SIMCEP-style benchmark: elliptical cells placed
sequentially (with a clustering coin), rendered with radial intensity
falloff over a dark background, defocused with a per-image Gaussian blur,
noised, quantized, and area-downscaled to the output size. The binary
foreground mask is rendered pre-blur and downscaled by any-overlap max
pooling. The ground-truth count is the number of placed cells, whatever
the overlap.

Determinism contract: sample ``index`` draws from ``CounterRng(seed,
stream=index)`` in a fixed order: count; then per cell [cluster coin
(only once another cell exists), placement (anchor index, angle, radius or
two uniforms), area normal, eccentricity, orientation, intensity jitter];
then one normal per render pixel for noise. Identical (config, index)
therefore yields identical bytes on every platform.

Image files are binary PGM (P5), maxval 255, header ``P5\\n<w> <h>\\n255\\n``;
the reader also accepts ASCII P2 and ``#`` comment lines. The manifest is
a CSV ``filename,count,mask_filename`` with LF line endings.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from ._rng import CounterRng

__all__ = [
    "GenConfig",
    "SyntheticSample",
    "ManifestEntry",
    "generate_sample",
    "generate_dataset",
    "write_pgm",
    "read_pgm",
    "write_manifest",
    "read_manifest",
    "load_dataset",
    "gaussian_blur",
    "area_downscale",
    "maxpool_downscale",
]


@dataclass
class GenConfig:
    """Generator settings; sizes are (height, width) pixel pairs."""

    render_hw: tuple = (520, 696)
    output_hw: tuple = (192, 256)
    count_range: tuple = (1, 100)
    cluster_prob: float = 0.25
    mean_area: float = 250.0
    area_spread: float = 0.2  # std as a fraction of mean_area
    eccentricity_range: tuple = (1.0, 2.0)
    blur_sigmas: tuple = (1.0, 4.0, 7.0, 10.0)
    noise_std: float = 8.0
    seed: int = 0
    cluster_radius_factor: float = 2.0  # cluster disk radius in mean-radius units
    background: float = 10.0
    peak: float = 200.0
    jitter_range: tuple = (0.7, 1.0)
    falloff: float = 0.45  # intensity drop from center to ellipse edge
    placement_margin: float = 0.0  # keep centers this many render px off the border
    reject_overlaps: bool = False  # redraw overlapping cells (validation aid)

    def __post_init__(self):
        lo, hi = self.count_range
        if not (1 <= lo <= hi <= 100):
            raise ValueError(f"count_range must lie within [1, 100], got {self.count_range}")
        if not 0.0 <= self.cluster_prob <= 1.0:
            raise ValueError(f"cluster_prob must be in [0, 1], got {self.cluster_prob}")
        if self.mean_area <= 0:
            raise ValueError(f"mean_area must be positive, got {self.mean_area}")
        if min(self.blur_sigmas) < 0:
            raise ValueError(f"blur sigmas must be >= 0, got {self.blur_sigmas}")

    def mean_radius(self) -> float:
        return math.sqrt(self.mean_area / math.pi)


@dataclass
class SyntheticSample:
    image: np.ndarray  # uint8 (H, W) at output size
    mask: np.ndarray  # uint8 (H, W), values 0/255
    count: int
    meta: dict


@dataclass
class ManifestEntry:
    filename: str
    count: int
    mask_filename: str | None = None


# ---------------------------------------------------------------------------
# image transforms


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3 sigma, reflect padding."""
    if sigma <= 0:
        return img.astype(np.float64, copy=True)
    r = int(math.ceil(3.0 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    k /= k.sum()

    out = img.astype(np.float64)
    pad = np.pad(out, ((0, 0), (r, r)), mode="reflect")
    acc = np.zeros_like(out)
    for i in range(2 * r + 1):
        acc += k[i] * pad[:, i : i + out.shape[1]]
    pad = np.pad(acc, ((r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(acc)
    for i in range(2 * r + 1):
        out += k[i] * pad[i : i + acc.shape[0], :]
    return out


def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-interval overlap matrix for area-preserving downscaling."""
    if n_out > n_in:
        raise ValueError(f"cannot downscale {n_in} -> {n_out}")
    scale = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for r in range(int(math.floor(lo)), int(math.ceil(hi))):
            w[i, r] = (min(hi, r + 1) - max(lo, r)) / scale
    return w


def area_downscale(img: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Exact area-average downscale to (H, W), fractional ratios included."""
    wr = _overlap_weights(img.shape[0], out_hw[0])
    wc = _overlap_weights(img.shape[1], out_hw[1])
    return wr @ img.astype(np.float64) @ wc.T


def maxpool_downscale(img: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Any-overlap window maximum at (H, W); used for binary masks."""
    h, w = img.shape
    oh, ow = out_hw
    sh, sw = h / oh, w / ow
    out = np.zeros(out_hw, dtype=img.dtype)
    for i in range(oh):
        r0, r1 = int(math.floor(i * sh)), int(math.ceil((i + 1) * sh))
        for j in range(ow):
            c0, c1 = int(math.floor(j * sw)), int(math.ceil((j + 1) * sw))
            out[i, j] = img[r0:r1, c0:c1].max()
    return out


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255)


# ---------------------------------------------------------------------------
# sample generation


def _draw_cell(rng: CounterRng, cfg: GenConfig, centers: list) -> dict:
    h, w = cfg.render_hw
    m = cfg.placement_margin
    if centers and rng.uniform() < cfg.cluster_prob:
        anchor = centers[rng.randint(0, len(centers) - 1)]
        radius = cfg.cluster_radius_factor * cfg.mean_radius()
        ang = rng.uniform() * 2.0 * math.pi
        rad = radius * math.sqrt(rng.uniform())
        cy = min(max(anchor[0] + rad * math.sin(ang), m), h - 1 - m)
        cx = min(max(anchor[1] + rad * math.cos(ang), m), w - 1 - m)
    else:
        cy = m + rng.uniform() * (h - 1 - 2 * m)
        cx = m + rng.uniform() * (w - 1 - 2 * m)

    area = max(1.0, cfg.mean_area * (1.0 + cfg.area_spread * rng.normal()))
    ecc_lo, ecc_hi = cfg.eccentricity_range
    ecc = ecc_lo + rng.uniform() * (ecc_hi - ecc_lo)
    theta = rng.uniform() * math.pi
    j_lo, j_hi = cfg.jitter_range
    jitter = j_lo + rng.uniform() * (j_hi - j_lo)

    # area = pi * a * b with aspect ratio a / b = ecc
    b = math.sqrt(area / (math.pi * ecc))
    a = ecc * b
    return {"cy": cy, "cx": cx, "a": a, "b": b, "theta": theta, "jitter": jitter}


def _cells_overlap(c1: dict, c2: dict) -> bool:
    # conservative circle test on major semi-axes
    d = math.hypot(c1["cy"] - c2["cy"], c1["cx"] - c2["cx"])
    return d < c1["a"] + c2["a"]


def _render(cells: list, cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.render_hw
    img = np.full((h, w), cfg.background, dtype=np.float64)
    mask = np.zeros((h, w), dtype=np.uint8)
    for c in cells:
        a, b = c["a"], c["b"]
        r = int(math.ceil(a)) + 1
        r0, r1 = max(0, int(c["cy"]) - r), min(h, int(c["cy"]) + r + 1)
        c0, c1 = max(0, int(c["cx"]) - r), min(w, int(c["cx"]) + r + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        dy = yy - c["cy"]
        dx = xx - c["cx"]
        ct, st = math.cos(c["theta"]), math.sin(c["theta"])
        u = ((dx * ct + dy * st) / a) ** 2 + ((-dx * st + dy * ct) / b) ** 2
        inside = u <= 1.0
        peak = cfg.background + (cfg.peak - cfg.background) * c["jitter"]
        shade = peak * (1.0 - cfg.falloff * u)
        region = img[r0:r1, c0:c1]
        np.maximum(region, np.where(inside, shade, region), out=region)
        mask[r0:r1, c0:c1][inside] = 255
    return img, mask


def generate_sample(cfg: GenConfig, index: int) -> SyntheticSample:
    """Render sample ``index``; bit-identical for identical (config, index)."""
    rng = CounterRng(cfg.seed, stream=index)
    lo, hi = cfg.count_range
    count = rng.randint(lo, hi)

    cells: list[dict] = []
    centers: list[tuple] = []
    for _ in range(count):
        cell = _draw_cell(rng, cfg, centers)
        if cfg.reject_overlaps:
            tries = 0
            while any(_cells_overlap(cell, prev) for prev in cells) and tries < 200:
                cell = _draw_cell(rng, cfg, centers)
                tries += 1
        cells.append(cell)
        centers.append((cell["cy"], cell["cx"]))

    img, mask = _render(cells, cfg)
    sigma = float(cfg.blur_sigmas[rng.randint(0, len(cfg.blur_sigmas) - 1)])
    img = gaussian_blur(img, sigma)
    if cfg.noise_std > 0:
        img = img + cfg.noise_std * rng.normal(img.size).reshape(img.shape)
    img = _quantize(img)

    out_img = _quantize(area_downscale(img, cfg.output_hw)).astype(np.uint8)
    pooled = maxpool_downscale(mask, cfg.output_hw)
    out_mask = np.where(pooled >= 128, 255, 0).astype(np.uint8)

    meta = {
        "seed": cfg.seed,
        "index": index,
        "blur_sigma": sigma,
        "placements": [(c["cy"], c["cx"]) for c in cells],
        "areas": [math.pi * c["a"] * c["b"] for c in cells],
    }
    return SyntheticSample(image=out_img, mask=out_mask, count=count, meta=meta)


def generate_dataset(cfg: GenConfig, n: int, out_dir: str, mask_fraction: float) -> list:
    """Write n samples under ``out_dir`` and return the manifest entries.

    Layout: ``images/img_<i>.pgm``, ``masks/img_<i>.pgm`` for the first
    ceil(mask_fraction * n) samples, and ``manifest.csv``.
    """
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    if not 0.0 <= mask_fraction <= 1.0:
        raise ValueError(f"mask_fraction must be in [0, 1], got {mask_fraction}")
    n_masks = int(math.ceil(mask_fraction * n))
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    if n_masks:
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)

    entries = []
    for i in range(n):
        sample = generate_sample(cfg, i)
        img_rel = f"images/img_{i}.pgm"
        write_pgm(sample.image, os.path.join(out_dir, img_rel))
        mask_rel = None
        if i < n_masks:
            mask_rel = f"masks/img_{i}.pgm"
            write_pgm(sample.mask, os.path.join(out_dir, mask_rel))
        entries.append(ManifestEntry(filename=img_rel, count=sample.count, mask_filename=mask_rel))
    write_manifest(entries, os.path.join(out_dir, "manifest.csv"))
    return entries


# ---------------------------------------------------------------------------
# PGM I/O


def write_pgm(img: np.ndarray, path: str) -> None:
    """Binary PGM (P5), maxval 255."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError(f"write_pgm expects a 2-d image, got shape {a.shape}")
    if a.dtype != np.uint8:
        raise ValueError(f"write_pgm expects uint8 pixels, got {a.dtype}")
    h, w = a.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + a.tobytes())


class _PgmScanner:
    """Token scanner over PGM bytes, skipping whitespace and # comments."""

    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.pos = 0

    def fail(self, msg: str, at: int | None = None):
        raise ValueError(f"{self.path}: {msg} at byte offset {self.pos if at is None else at}")

    def _skip_separators(self):
        while self.pos < len(self.blob):
            ch = self.blob[self.pos : self.pos + 1]
            if ch in b" \t\r\n":
                self.pos += 1
            elif ch == b"#":
                while self.pos < len(self.blob) and self.blob[self.pos : self.pos + 1] != b"\n":
                    self.pos += 1
            else:
                return

    def token(self, what: str) -> bytes:
        self._skip_separators()
        if self.pos >= len(self.blob):
            self.fail(f"missing {what}")
        start = self.pos
        while self.pos < len(self.blob) and self.blob[self.pos : self.pos + 1] not in b" \t\r\n#":
            self.pos += 1
        return self.blob[start : self.pos]

    def integer(self, what: str) -> int:
        at = self.pos
        tok = self.token(what)
        try:
            return int(tok)
        except ValueError:
            self.fail(f"invalid {what} {tok!r}", at=at)


def read_pgm(path: str) -> np.ndarray:
    """Read binary (P5) or ASCII (P2) PGM as a uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    s = _PgmScanner(blob, path)
    magic = s.token("magic")
    if magic not in (b"P5", b"P2"):
        raise ValueError(f"{path}: bad magic {magic!r} at byte offset 0, expected P5 or P2")
    w = s.integer("width")
    h = s.integer("height")
    if w < 1 or h < 1:
        raise ValueError(f"{path}: invalid dimensions {w}x{h}")
    at = s.pos
    maxval = s.integer("maxval")
    if not 1 <= maxval <= 255:
        s.fail(f"unsupported maxval {maxval} (need 1..255)", at=at)

    if magic == b"P5":
        # exactly one whitespace byte separates maxval from the payload
        if s.pos >= len(blob) or blob[s.pos : s.pos + 1] not in b" \t\r\n":
            s.fail("missing whitespace before payload")
        s.pos += 1
        need = w * h
        if len(blob) - s.pos < need:
            raise ValueError(
                f"{path}: payload truncated at byte offset {len(blob)}, "
                f"expected {need} pixels from offset {s.pos}"
            )
        return np.frombuffer(blob[s.pos : s.pos + need], dtype=np.uint8).reshape(h, w).copy()

    vals = np.empty(w * h, dtype=np.uint8)
    for i in range(w * h):
        at = s.pos
        v = s.integer("pixel value")
        if not 0 <= v <= maxval:
            s.fail(f"pixel value {v} exceeds maxval {maxval}", at=at)
        vals[i] = v
    return vals.reshape(h, w)


# ---------------------------------------------------------------------------
# manifest I/O


MANIFEST_HEADER = "filename,count,mask_filename"


def write_manifest(entries, path: str) -> None:
    lines = [MANIFEST_HEADER]
    for e in entries:
        mask = e.mask_filename if e.mask_filename else ""
        lines.append(f"{e.filename},{e.count},{mask}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> list:
    with open(path, "r", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != MANIFEST_HEADER:
        got = lines[0] if lines else ""
        raise ValueError(f"{path}: line 1: bad header {got!r}, expected {MANIFEST_HEADER!r}")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}: line {lineno}: expected 3 fields, got {len(parts)}")
        fname, count_s, mask = parts
        if not fname:
            raise ValueError(f"{path}: line {lineno}: empty filename")
        try:
            count = int(count_s)
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: invalid count {count_s!r}") from None
        if count < 0:
            raise ValueError(f"{path}: line {lineno}: negative count {count}")
        entries.append(ManifestEntry(filename=fname, count=count, mask_filename=mask or None))
    return entries


def load_dataset(root: str) -> list:
    """Read manifest plus referenced images/masks.

    Returns a list of (entry, image, mask-or-None) triples.
    """
    entries = read_manifest(os.path.join(root, "manifest.csv"))
    out = []
    for e in entries:
        img = read_pgm(os.path.join(root, e.filename))
        mask = read_pgm(os.path.join(root, e.mask_filename)) if e.mask_filename else None
        out.append((e, img, mask))
    return out
