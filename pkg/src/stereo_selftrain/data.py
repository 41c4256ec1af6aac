"""Synthetic stereo scenes with exact ground truth, disparity codecs, manifests.

Disparity convention: a left pixel at column x with disparity d appears in
the right image at column x - d, i.e. ``left(x, y) == right(x - d, y)``.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import uniform_filter

from .core import DisparityMap, StereoSample
from .errors import ConfigError, FormatError

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    height: int = 128
    width: int = 256
    n_layers: int = 3
    disparity_range: tuple = (0.0, 32.0)
    # lattice spacings (px) and amplitudes of the value-noise octaves
    texture_scales: tuple = (2.0, 6.0, 16.0)
    texture_weights: tuple = (0.5, 0.3, 0.2)
    texture: str = "noise"
    contrast: float = 1.0
    color_saturation: float = 1.0
    # probability that a foreground layer gets a near-flat texture
    flat_prob: float = 0.0
    flat_contrast: float = 0.03
    # max |disparity change| across a layer due to slant, as a fraction of the range
    slant: float = 0.15
    layer_size: tuple = (0.2, 0.5)
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.disparity_range = tuple(float(v) for v in self.disparity_range)
        self.texture_scales = tuple(self.texture_scales)
        self.texture_weights = tuple(self.texture_weights)
        self.layer_size = tuple(self.layer_size)
        lo, hi = self.disparity_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad disparity_range {self.disparity_range}")
        if self.texture not in ("noise", "checker"):
            raise ValueError(f"unknown texture {self.texture!r}")
        if len(self.texture_scales) != len(self.texture_weights):
            raise ValueError("texture_scales and texture_weights differ in length")
        if self.height < 4 or self.width < 4:
            raise ValueError("synthetic images must be at least 4x4")


# Two disjoint regimes used as source and target domains. A: smooth multi-octave
# noise, disparities 0-12 px. B: a dim, weakly coloured 3 px checkerboard
# (period 6 px, so matches are ambiguous) with disparities up to 16 px.
DOMAINS = {
    "A": dict(texture="noise", texture_scales=(2.0, 6.0, 16.0), texture_weights=(0.5, 0.3, 0.2),
              contrast=1.0, color_saturation=1.0, disparity_range=(0.0, 12.0), flat_prob=0.0),
    "B": dict(texture="checker", texture_scales=(3.0,), texture_weights=(1.0,),
              contrast=0.6, color_saturation=0.3, disparity_range=(0.0, 16.0), flat_prob=0.0),
}


def domain_config(name: str, **overrides) -> SyntheticConfig:
    if name not in DOMAINS:
        raise ValueError(f"unknown synthetic domain {name!r}; known: {sorted(DOMAINS)}")
    params = dict(DOMAINS[name])
    params.update(overrides)
    return SyntheticConfig(**params)


class _Texture:
    """Multi-octave value noise or checkerboard, evaluable at fractional columns."""

    def __init__(self, rng, cfg: SyntheticConfig, x_min, x_max, height, contrast):
        self.octaves = []
        base = rng.uniform(0.2, 0.8, size=3)
        tint = rng.uniform(-1, 1, size=3) * 0.5 * cfg.color_saturation
        weights = np.asarray(cfg.texture_weights, dtype=np.float64)
        weights = weights / max(weights.sum(), 1e-12)
        for s, wgt in zip(cfg.texture_scales, weights):
            nx = int(math.ceil((x_max - x_min) / s)) + 3
            ny = int(math.ceil(height / s)) + 3
            lattice = rng.uniform(-0.5, 0.5, size=(ny, nx, 1))
            chroma = rng.uniform(-0.5, 0.5, size=(ny, nx, 3)) * cfg.color_saturation
            self.octaves.append((s, wgt, lattice + 0.5 * chroma))
        self.x_min = x_min
        self.base = base
        self.tint = tint
        self.contrast = contrast
        self.checker = cfg.texture == "checker"

    def __call__(self, x, y):
        """Colour at float columns ``x`` and integer rows ``y`` (same shape)."""
        out = np.zeros(x.shape + (3,))
        for s, wgt, lattice in self.octaves:
            u = (x - self.x_min) / s
            v = y / s
            if self.checker:
                val = (np.floor(u).astype(int) + np.floor(v).astype(int)) % 2 - 0.5
                out += wgt * val[..., None] * np.ones(3)
                continue
            u0 = np.floor(u).astype(int)
            v0 = np.floor(v).astype(int)
            fu = (u - u0)[..., None]
            fv = (v - v0)[..., None]
            g = lattice
            top = g[v0, u0] * (1 - fu) + g[v0, u0 + 1] * fu
            bot = g[v0 + 1, u0] * (1 - fu) + g[v0 + 1, u0 + 1] * fu
            out += wgt * (top * (1 - fv) + bot * fv)
        return self.base + self.tint * 0.3 + self.contrast * out


@dataclass
class _Layer:
    # disparity plane d = a + b*x + c*y in left-image coordinates
    a: float
    b: float
    c: float
    texture: _Texture
    shape: str = "full"
    cx: float = 0.0
    cy: float = 0.0
    rx: float = 0.0
    ry: float = 0.0

    def disparity(self, x, y):
        return self.a + self.b * x + self.c * y

    def covers(self, x, y):
        if self.shape == "full":
            return np.ones(np.broadcast(x, y).shape, dtype=bool)
        dx = (x - self.cx) / self.rx
        dy = (y - self.cy) / self.ry
        if self.shape == "ellipse":
            return dx * dx + dy * dy <= 1.0
        return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)

    def left_x_from_right(self, xr, y):
        # x_r = x_l - (a + b x_l + c y)  =>  x_l = (x_r + a + c y) / (1 - b)
        return (xr + self.a + self.c * y) / (1.0 - self.b)


def _make_layers(rng, cfg: SyntheticConfig):
    H, W = cfg.height, cfg.width
    lo, hi = cfg.disparity_range
    span = hi - lo
    margin_x = hi + 4
    layers = []

    def plane(center_d, budget, cx, cy):
        # slope such that the plane moves by at most ``budget`` over the frame
        b = rng.uniform(-1, 1) * budget / W
        c = rng.uniform(-1, 1) * budget / H
        a = center_d - b * cx - c * cy
        return a, b, c

    budget = cfg.slant * span / 2
    d_bg = lo + budget + rng.uniform(0, 0.3) * max(span - 2 * budget, 0)
    a, b, c = plane(d_bg, budget, W / 2, H / 2)
    tex = _Texture(rng, cfg, -margin_x, W + margin_x, H, cfg.contrast)
    layers.append(_Layer(a, b, c, tex))

    for _ in range(cfg.n_layers):
        d = lo + budget + rng.uniform(0, 1) * max(span - 2 * budget, 0)
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        rx = rng.uniform(*cfg.layer_size) * W / 2
        ry = rng.uniform(*cfg.layer_size) * H / 2
        a, b, c = plane(d, budget, cx, cy)
        flat = rng.uniform() < cfg.flat_prob
        contrast = cfg.flat_contrast if flat else cfg.contrast
        tex = _Texture(rng, cfg, -margin_x, W + margin_x, H, contrast)
        shape = "ellipse" if rng.uniform() < 0.5 else "rect"
        layers.append(_Layer(a, b, c, tex, shape, cx, cy, rx, ry))
    return layers


def _zbuffer(layers, xs_for_layer, y):
    """Winning (max-disparity) layer index among covering layers, per pixel."""
    best_d = np.full(y.shape, -np.inf)
    best = np.zeros(y.shape, dtype=int)
    for i, layer in enumerate(layers):
        x = xs_for_layer(i, layer)
        d = layer.disparity(x, y)
        hit = layer.covers(x, y) & (d > best_d)
        best_d = np.where(hit, d, best_d)
        best = np.where(hit, i, best)
    return best, best_d


def _render(layers, xs_for_layer, y):
    idx, disp = _zbuffer(layers, xs_for_layer, y)
    img = np.zeros(y.shape + (3,))
    for i, layer in enumerate(layers):
        sel = idx == i
        if sel.any():
            img[sel] = layer.texture(xs_for_layer(i, layer)[sel], y[sel])
    return img, idx, disp


def generate_synthetic(config: SyntheticConfig, seed: Optional[int] = None, sample_id: str = "") -> StereoSample:
    """Layered, textured planar scene; right view rendered from the same surfaces.

    Left-view pixels whose surface point is hidden (or out of frame) in the
    right view are marked invalid.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    H, W = config.height, config.width
    layers = _make_layers(rng, config)
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)

    left, left_idx, gt = _render(layers, lambda i, l: x, y)
    right, _, _ = _render(layers, lambda i, l: l.left_x_from_right(x, y), y)

    # visibility of each left pixel in the right view
    xr = x - gt
    right_idx, _ = _zbuffer(layers, lambda i, l: l.left_x_from_right(xr, y), y)
    valid = (right_idx == left_idx) & (xr >= 0) & (xr <= W - 1)

    if config.noise_std > 0:
        left = left + rng.normal(0, config.noise_std, left.shape)
        right = right + rng.normal(0, config.noise_std, right.shape)
    left = np.clip(left, 0, 1).astype(np.float32)
    right = np.clip(right, 0, 1).astype(np.float32)
    return StereoSample(left, right, DisparityMap(gt.astype(np.float32)), valid,
                        id=sample_id or f"synthetic-{seed}")


def generate_set(config: SyntheticConfig, n: int, seed: int, prefix: str = "s") -> list[StereoSample]:
    """``n`` samples with per-sample seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_synthetic(config, int(s), f"{prefix}{i:04d}") for i, s in enumerate(seeds)]


def block_matching(left, right, max_disp: int, radius: int = 3) -> np.ndarray:
    """Brute-force SAD block matching over every integer disparity (reference only)."""
    gl = np.asarray(left, dtype=np.float64).mean(axis=-1)
    gr = np.asarray(right, dtype=np.float64).mean(axis=-1)
    H, W = gl.shape
    k = 2 * radius + 1
    costs = np.full((max_disp + 1, H, W), np.inf)
    for d in range(max_disp + 1):
        diff = np.full((H, W), np.nan)
        diff[:, d:] = np.abs(gl[:, d:] - gr[:, :W - d])
        filled = np.nan_to_num(diff, nan=1.0)
        cost = uniform_filter(filled, size=k, mode="nearest")
        cost[:, :d] = np.inf
        costs[d] = cost
    return np.argmin(costs, axis=0).astype(np.float32)


# --------------------------------------------------------------------------
# PFM
# --------------------------------------------------------------------------

def write_pfm(disparity, path, little_endian: bool = True):
    """Single-channel PFM, rows stored bottom-up; scale sign encodes endianness."""
    values = disparity.values if isinstance(disparity, DisparityMap) else np.asarray(disparity)
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    h, w = values.shape
    dtype = "<f4" if little_endian else ">f4"
    scale = -1.0 if little_endian else 1.0
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(f"{scale}\n".encode())
        f.write(np.flipud(values).astype(dtype).tobytes())


def read_pfm(path) -> tuple[DisparityMap, np.ndarray]:
    """Read a single-channel PFM. Returns (map, validity); inf/nan become invalid."""
    data = Path(path).read_bytes()
    pos = 0

    def next_line():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated PFM header", pos)
        line, start = data[pos:end], pos
        pos = end + 1
        return line.strip(), start

    magic, off = next_line()
    if magic == b"PF":
        raise FormatError("colour PFM ('PF') not supported; expected 'Pf'", off)
    if magic != b"Pf":
        raise FormatError(f"bad PFM magic {magic[:8]!r}", off)
    dims, off = next_line()
    m = re.fullmatch(rb"(\d+)\s+(\d+)", dims)
    if not m:
        raise FormatError(f"bad PFM dimensions line {dims[:32]!r}", off)
    w, h = int(m.group(1)), int(m.group(2))
    if w <= 0 or h <= 0:
        raise FormatError(f"non-positive PFM dimensions {w}x{h}", off)
    scale_line, off = next_line()
    try:
        scale = float(scale_line)
    except ValueError:
        raise FormatError(f"bad PFM scale {scale_line[:32]!r}", off) from None
    if scale == 0 or not math.isfinite(scale):
        raise FormatError("PFM scale must be finite and non-zero", off)
    dtype = "<f4" if scale < 0 else ">f4"
    need = 4 * w * h
    if len(data) - pos < need:
        raise FormatError(f"truncated PFM payload: need {need} bytes, have {len(data) - pos}",
                          len(data))
    values = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    values = np.flipud(values).astype(np.float32)
    valid = np.isfinite(values)
    values = np.where(valid, values, 0.0).astype(np.float32)
    return DisparityMap(values), valid


# --------------------------------------------------------------------------
# KITTI 16-bit PNG
# --------------------------------------------------------------------------

def write_kitti_png(disparity, valid, path):
    """Store ``round(256 * d)`` as uint16; invalid pixels are 0.

    Valid disparities below 1/256 are stored as 1 so they stay valid.
    """
    values = disparity.values if isinstance(disparity, DisparityMap) else np.asarray(disparity)
    valid = np.asarray(valid, dtype=bool)
    stored = np.clip(np.round(np.asarray(values, dtype=np.float64) * 256.0), 1, 65535)
    stored = np.where(valid, stored, 0).astype(np.uint16)
    Image.fromarray(stored).save(path, format="PNG")


def read_kitti_png(path) -> tuple[DisparityMap, np.ndarray]:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise FormatError(f"cannot decode PNG {path}: {exc}") from exc
    if img.mode not in ("I;16", "I;16B", "I;16L"):
        raise FormatError(f"expected 16-bit single-channel PNG, got mode {img.mode!r}")
    stored = np.asarray(img, dtype=np.uint16)
    valid = stored > 0
    return DisparityMap(stored.astype(np.float32) / 256.0), valid


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    return arr


def write_image(image, path):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

GT_FORMATS = ("pfm", "kitti-png")


@dataclass
class SampleRef:
    left: Path
    right: Path
    gt: Optional[Path] = None
    gt_format: Optional[str] = None
    id: str = ""

    def load(self) -> StereoSample:
        left, right = read_image(self.left), read_image(self.right)
        if left.shape != right.shape:
            raise FormatError(f"{self.id}: left {left.shape} and right {right.shape} differ")
        if self.gt is None:
            return StereoSample(left, right, id=self.id)
        if self.gt_format == "pfm":
            disp, valid = read_pfm(self.gt)
        else:
            disp, valid = read_kitti_png(self.gt)
        if disp.shape != left.shape[:2]:
            raise FormatError(f"{self.id}: gt shape {disp.shape} != image shape {left.shape[:2]}")
        return StereoSample(left, right, disp, valid, id=self.id)


@dataclass
class DatasetManifest:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    eval: list = field(default_factory=list)
    kinds: dict = field(default_factory=dict)

    def load(self, split: str) -> list[StereoSample]:
        return [ref.load() for ref in getattr(self, split)]


_ENTRY_KEYS = {"left", "right", "gt", "gt_format", "id"}


def _parse_entry(raw, split, index, root: Path, require_gt: Optional[bool]) -> SampleRef:
    where = f"{split}[{index}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: entry must be a mapping")
    unknown = set(raw) - _ENTRY_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    for key in ("left", "right"):
        if key not in raw:
            raise ConfigError(f"{where}: missing '{key}'")
    gt = raw.get("gt")
    fmt = raw.get("gt_format")
    if gt is not None:
        if fmt is None:
            suffix = Path(gt).suffix.lower()
            fmt = {".pfm": "pfm", ".png": "kitti-png"}.get(suffix)
            if fmt is None:
                raise ConfigError(f"{where}: cannot infer gt_format from {gt!r}")
        if fmt not in GT_FORMATS:
            raise ConfigError(f"{where}: gt_format must be one of {GT_FORMATS}, got {fmt!r}")
    elif fmt is not None:
        raise ConfigError(f"{where}: gt_format given without gt")
    if require_gt is True and gt is None:
        raise ConfigError(f"{where}: labeled entries need 'gt'")
    if require_gt is False and gt is not None:
        raise ConfigError(f"{where}: unlabeled entries must not carry gt")
    paths = {}
    for key in ("left", "right", "gt"):
        if raw.get(key) is None:
            continue
        p = Path(raw[key])
        p = p if p.is_absolute() else root / p
        if not p.exists():
            raise ConfigError(f"{where}: {key} file not found: {p}")
        paths[key] = p
    return SampleRef(paths["left"], paths["right"], paths.get("gt"), fmt,
                     str(raw.get("id", f"{split}-{index}")))


def load_manifest(path) -> DatasetManifest:
    """Parse a YAML manifest with ``labeled``/``unlabeled``/``eval`` entry lists.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"manifest {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("manifest must be a mapping")
    unknown = set(raw) - {"labeled", "unlabeled", "eval", "kinds"}
    if unknown:
        raise ConfigError(f"unknown manifest keys {sorted(unknown)}")
    root = path.parent
    manifest = DatasetManifest(kinds=dict(raw.get("kinds") or {}))
    for split, require_gt in (("labeled", True), ("unlabeled", False), ("eval", None)):
        entries = raw.get(split) or []
        if not isinstance(entries, list):
            raise ConfigError(f"'{split}' must be a list")
        refs = [_parse_entry(e, split, i, root, require_gt) for i, e in enumerate(entries)]
        setattr(manifest, split, refs)
    return manifest


def write_dataset(samples: Sequence[StereoSample], directory, split: str,
                  gt_format: str = "pfm", with_gt: bool = True) -> list[dict]:
    """Write samples as PNG images (+ gt) and return manifest entries."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        entry = {"id": s.id, "left": f"{split}/{s.id}_left.png", "right": f"{split}/{s.id}_right.png"}
        (directory / split).mkdir(exist_ok=True)
        write_image(s.left, directory / entry["left"])
        write_image(s.right, directory / entry["right"])
        if with_gt and s.has_gt:
            if gt_format == "pfm":
                entry["gt"] = f"{split}/{s.id}_disp.pfm"
                # occluded pixels are written as inf so validity survives the round trip
                vals = np.where(s.validity, s.gt_disparity.values, np.inf)
                write_pfm(vals, directory / entry["gt"])
            else:
                entry["gt"] = f"{split}/{s.id}_disp.png"
                write_kitti_png(s.gt_disparity, s.validity, directory / entry["gt"])
            entry["gt_format"] = gt_format
        entries.append(entry)
    return entries


def write_manifest(path, labeled=(), unlabeled=(), eval=(), kinds=None):
    doc = {"labeled": list(labeled), "unlabeled": list(unlabeled), "eval": list(eval)}
    if kinds:
        doc["kinds"] = dict(kinds)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))
