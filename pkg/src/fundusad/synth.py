"""Appearance-consistent synthetic lesion generation.

A lesion is built by augmenting a source image, cutting a random crop,
shaping it with a thresholded gradient-noise mask, and blending it into a
target image. The blend weight ramps from ``alpha`` at the mask boundary
to 1 at the interior point farthest from background, so pasted lesions
keep smooth edges instead of hard seams.

Everything is deterministic given the explicit seed: batch generation can
run one sample per worker with per-sample seeds from `derive_seed`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imaging


class SynthesisError(RuntimeError):
    """Raised when no admissible sample can be produced."""


AUGMENTATION_POOL = (
    "sharpen",
    "solarize",
    "gamma_contrast",
    "hue_change",
    "color_temperature",
    "auto_contrast",
    "color_shift",
)

# Parameter ranges for the sampled augmentations. The identity settings
# (gamma 1, solarize threshold 1, all shifts/amounts 0) are fixed points
# of apply_augmentation but fall outside these sampling ranges.
AUG_PARAM_RANGES = {
    "sharpen": {"amount": (0.5, 2.0)},
    "solarize": {"threshold": (0.3, 0.9)},
    "gamma_contrast": {"gamma": (0.5, 2.0)},
    "hue_change": {"shift": (-0.1, 0.1)},
    "color_temperature": {"shift": (-0.2, 0.2)},
    "auto_contrast": {},
    "color_shift": {"dr": (-0.1, 0.1), "dg": (-0.1, 0.1), "db": (-0.1, 0.1)},
}


def derive_seed(base: int, *parts) -> int:
    """Stable 64-bit sub-seed from a base seed and a label path."""
    text = ":".join([str(int(base))] + [str(p) for p in parts])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the lesion generator.

    alpha: blend floor of the fusion weights, in (0, 1].
    perlin_res_range: inclusive lattice-period range; periods are drawn
        from the powers of two inside it (default {2, 4, 8, 16}).
    perlin_threshold: cut level on the [0, 1]-mapped noise field.
    crop_frac_range: crop side as a fraction of the image side, drawn
        independently per axis.
    fg_frac_range: admissible mask foreground fraction; masks outside it
        are resampled with a fresh sub-seed.
    n_augs: number of augmentations sampled without replacement.
    max_resample: attempts before giving up on an admissible mask.
    use_self_mix: blend with distance-ramp weights; off pastes hard (W=1).
    use_perlin_mask: shape lesions with noise; off uses the full crop
        rectangle as the mask.
    """

    alpha: float = 0.7
    perlin_res_range: tuple[int, int] = (2, 16)
    perlin_threshold: float = 0.6
    crop_frac_range: tuple[float, float] = (0.06, 0.4)
    fg_frac_range: tuple[float, float] = (0.05, 0.8)
    n_augs: int = 3
    max_resample: int = 20
    use_self_mix: bool = True
    use_perlin_mask: bool = True

    def validate(self) -> "SynthConfig":
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        lo, hi = self.crop_frac_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_frac_range must lie in (0, 1], got {self.crop_frac_range}")
        lo, hi = self.fg_frac_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"fg_frac_range must lie in (0, 1), got {self.fg_frac_range}")
        if not (0 <= self.n_augs <= len(AUGMENTATION_POOL)):
            raise ValueError(f"n_augs must be in [0, {len(AUGMENTATION_POOL)}]")
        if self.max_resample < 1:
            raise ValueError("max_resample must be >= 1")
        if not _period_choices(self.perlin_res_range):
            raise ValueError(
                f"perlin_res_range {self.perlin_res_range} contains no power-of-two period"
            )
        return self


@dataclass(frozen=True)
class Augmentation:
    name: str
    params: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SynthSample:
    """A generated anomaly with full provenance.

    `crop_src` / `crop_dst` are (top, left, height, width) rectangles in
    source and target coordinates. `image` equals the target exactly
    outside `crop_dst`, and all mask foreground lies inside it.
    """

    image: np.ndarray
    mask: np.ndarray
    seed: int
    crop_src: tuple[int, int, int, int]
    crop_dst: tuple[int, int, int, int]
    augs: tuple[Augmentation, ...]


def _period_choices(res_range: tuple[int, int]) -> list[int]:
    lo, hi = int(res_range[0]), int(res_range[1])
    return [2 ** k for k in range(0, 11) if lo <= 2 ** k <= hi]


def generate_perlin(h: int, w: int, res: int, seed: int) -> np.ndarray:
    """Classic 2-D gradient noise mapped affinely to [0, 1].

    Unit gradient vectors sit on a lattice with period `res` pixels;
    values between lattice points use quintic-smoothstep interpolation.
    Raw gradient noise is zero at lattice points and bounded by
    +-sqrt(1/2), so the affine map ``0.5 + raw / sqrt(2)`` sends lattice
    points to exactly 0.5 and the field into [0, 1]. Deterministic in
    (h, w, res, seed).
    """
    if h < 1 or w < 1:
        raise ValueError("field dimensions must be >= 1")
    if res < 1:
        raise ValueError("lattice period must be >= 1")
    rng = np.random.default_rng(np.uint64(seed))
    gh = int(np.ceil(h / res)) + 1
    gw = int(np.ceil(w / res)) + 1
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(gh, gw))
    grad_y = np.sin(angles)
    grad_x = np.cos(angles)

    ys = np.arange(h, dtype=np.float64) / res
    xs = np.arange(w, dtype=np.float64) / res
    y0 = np.minimum(np.floor(ys).astype(np.int64), gh - 2)
    x0 = np.minimum(np.floor(xs).astype(np.int64), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    # Dot products between corner gradients and the offset to each pixel.
    iy0 = np.add.outer(y0, np.zeros(w, dtype=np.int64))
    ix0 = np.add.outer(np.zeros(h, dtype=np.int64), x0)
    n00 = grad_y[iy0, ix0] * fy + grad_x[iy0, ix0] * fx
    n01 = grad_y[iy0, ix0 + 1] * fy + grad_x[iy0, ix0 + 1] * (fx - 1.0)
    n10 = grad_y[iy0 + 1, ix0] * (fy - 1.0) + grad_x[iy0 + 1, ix0] * fx
    n11 = grad_y[iy0 + 1, ix0 + 1] * (fy - 1.0) + grad_x[iy0 + 1, ix0 + 1] * (fx - 1.0)

    u = _fade(fx)
    v = _fade(fy)
    top = n00 * (1.0 - u) + n01 * u
    bot = n10 * (1.0 - u) + n11 * u
    raw = top * (1.0 - v) + bot * v
    return 0.5 + raw / np.sqrt(2.0)


def _fade(t: np.ndarray) -> np.ndarray:
    """Quintic smoothstep 6t^5 - 15t^4 + 10t^3."""
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def threshold_mask(fld: np.ndarray, t: float) -> np.ndarray:
    """Binary mask: 1 where the field is >= t."""
    fld = np.asarray(fld, dtype=np.float64)
    if not np.all(np.isfinite(fld)):
        raise ValueError("field contains non-finite values")
    return (fld >= t).astype(np.uint8)


def sample_augmentations(rng: np.random.Generator, n: int,
                         ranges: dict | None = None) -> list[Augmentation]:
    """Draw n distinct augmentations, in application order, with parameters.

    Names come without replacement from AUGMENTATION_POOL; each parameter
    is uniform over its range. Deterministic given the generator state.
    """
    if n > len(AUGMENTATION_POOL):
        raise ValueError(f"cannot draw {n} distinct augmentations from a pool of {len(AUGMENTATION_POOL)}")
    ranges = AUG_PARAM_RANGES if ranges is None else ranges
    idx = rng.choice(len(AUGMENTATION_POOL), size=n, replace=False)
    out = []
    for i in idx:
        name = AUGMENTATION_POOL[int(i)]
        params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ranges[name].items()}
        out.append(Augmentation(name=name, params=params))
    return out


def apply_augmentation(img: np.ndarray, aug: Augmentation) -> np.ndarray:
    """Apply one parameterized augmentation; output stays in [0, 1]."""
    img = imaging.validate_image(np.asarray(img, dtype=np.float64))
    p = aug.params
    if aug.name == "sharpen":
        out = _unsharp(img, p["amount"])
    elif aug.name == "solarize":
        t = p["threshold"]
        # threshold >= 1 is the identity: nothing can sit above it
        out = np.where(img >= t, 1.0 - img, img) if t < 1.0 else img.copy()
    elif aug.name == "gamma_contrast":
        out = np.power(img, p["gamma"])
    elif aug.name == "hue_change":
        hsv = _rgb_to_hsv(img)
        hsv[:, :, 0] = np.mod(hsv[:, :, 0] + p["shift"], 1.0)
        out = _hsv_to_rgb(hsv)
    elif aug.name == "color_temperature":
        s = p["shift"]
        out = img * np.array([1.0 + s, 1.0, 1.0 - s])
    elif aug.name == "auto_contrast":
        out = img.copy()
        for c in range(3):
            lo, hi = out[:, :, c].min(), out[:, :, c].max()
            if hi > lo:
                out[:, :, c] = (out[:, :, c] - lo) / (hi - lo)
    elif aug.name == "color_shift":
        out = img + np.array([p["dr"], p["dg"], p["db"]])
    else:
        raise ValueError(f"unknown augmentation {aug.name!r}")
    return np.clip(out, 0.0, 1.0)


def _unsharp(img: np.ndarray, amount: float) -> np.ndarray:
    """Unsharp mask with a 3x3 binomial blur and replicated edges."""
    if amount == 0.0:
        return img.copy()
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    blur = np.zeros_like(img)
    weights = ((1, 2, 1), (2, 4, 2), (1, 2, 1))
    for dy in range(3):
        for dx in range(3):
            blur += weights[dy][dx] * padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    blur /= 16.0
    return img + amount * (img - blur)


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    maxc = img.max(axis=2)
    minc = img.min(axis=2)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    # hue sector by dominant channel; 0 where the color is achromatic
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, np.mod(h / 6.0, 1.0), 0.0)
    return np.stack([h, s, v], axis=2)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[:, :, 0], hsv[:, :, 1], hsv[:, :, 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=2)


_EDT_INF = 1e20


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each pixel to the nearest background.

    Background (0) pixels get distance 0. Uses the two-pass lower-envelope
    algorithm on squared distances, linear time per dimension, so results
    are exact, not chamfer approximations. A mask with no background at
    all measures distance to the nearest virtual pixel just outside the
    image border.
    """
    mask = imaging.validate_mask(mask)
    h, w = mask.shape
    if not np.any(mask == 0):
        ys = np.minimum(np.arange(h) + 1, h - np.arange(h))
        xs = np.minimum(np.arange(w) + 1, w - np.arange(w))
        return np.minimum.outer(ys, xs).astype(np.float64)
    f = np.where(mask == 0, 0.0, _EDT_INF)
    g = np.empty_like(f)
    for j in range(w):
        g[:, j] = _edt_1d_sq(f[:, j])
    out = np.empty_like(g)
    for i in range(h):
        out[i, :] = _edt_1d_sq(g[i, :])
    return np.sqrt(out)


def _edt_1d_sq(f: np.ndarray) -> np.ndarray:
    """1-D squared distance transform via the lower envelope of parabolas."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    z[0], z[1] = -_EDT_INF, _EDT_INF
    k = 0
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _EDT_INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def fusion_weights(d: np.ndarray, alpha: float) -> np.ndarray:
    """Blend weights W = (1 - alpha) * (D - min D)/(max D - min D) + alpha.

    Values span exactly [alpha, 1]. A constant distance map (max == min)
    leaves the normalization undefined, in which case W is alpha
    everywhere, the infimum of the nondegenerate case.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    d = np.asarray(d, dtype=np.float64)
    lo = d.min()
    hi = d.max()
    if hi == lo:
        return np.full_like(d, alpha)
    return (1.0 - alpha) * (d - lo) / (hi - lo) + alpha


def self_mix_paste(c_s: np.ndarray, c_t: np.ndarray, p: np.ndarray,
                   w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Blend the source crop over the target crop through the smoothing mask.

    C = (P * W) * C_s + (1 - P * W) * C_t, with the mask broadcast across
    channels; the returned label mask is P itself (supervision stays hard
    even though the blend is soft). Every output pixel lies between the
    corresponding source and target values.
    """
    c_s = imaging.validate_image(np.asarray(c_s, dtype=np.float64))
    c_t = imaging.validate_image(np.asarray(c_t, dtype=np.float64))
    p = imaging.validate_mask(p)
    w = np.asarray(w, dtype=np.float64)
    shape = c_s.shape[:2]
    if c_t.shape[:2] != shape or p.shape != shape or w.shape != shape:
        raise ValueError(
            f"dimension mismatch: c_s {shape}, c_t {c_t.shape[:2]}, p {p.shape}, w {w.shape}"
        )
    pw = (p.astype(np.float64) * w)[:, :, None]
    return pw * c_s + (1.0 - pw) * c_t, p.astype(np.uint8).copy()


def generate_anomaly(source: np.ndarray, target: np.ndarray,
                     cfg: SynthConfig, seed: int) -> SynthSample:
    """Run the full generator: augment, crop, mask, blend, paste.

    Draw order from the single seeded stream: augmentation names and
    parameters, crop fractions per axis, source crop position, then per
    mask attempt a lattice period and noise sub-seed, and finally the
    destination position. The result is a pure function of
    (source, target, cfg, seed).
    """
    cfg.validate()
    source = imaging.validate_image(np.asarray(source, dtype=np.float64))
    target = imaging.validate_image(np.asarray(target, dtype=np.float64))
    if source.shape != target.shape:
        raise ValueError(f"source {source.shape} and target {target.shape} must match")
    h, w = target.shape[:2]
    rng = np.random.default_rng(np.uint64(seed))

    augs = sample_augmentations(rng, cfg.n_augs)
    augmented = source
    for aug in augs:
        augmented = apply_augmentation(augmented, aug)

    lo, hi = cfg.crop_frac_range
    ch = max(1, int(round(rng.uniform(lo, hi) * h)))
    cw = max(1, int(round(rng.uniform(lo, hi) * w)))
    if ch > h or cw > w:
        raise SynthesisError(f"crop {ch}x{cw} larger than image {h}x{w}")
    sy = int(rng.integers(0, h - ch + 1))
    sx = int(rng.integers(0, w - cw + 1))
    c_s = augmented[sy:sy + ch, sx:sx + cw]

    if cfg.use_perlin_mask:
        p = None
        fg_lo, fg_hi = cfg.fg_frac_range
        for _ in range(cfg.max_resample):
            res = int(rng.choice(_period_choices(cfg.perlin_res_range)))
            sub = int(rng.integers(0, 2 ** 63))
            candidate = threshold_mask(generate_perlin(ch, cw, res, sub), cfg.perlin_threshold)
            frac = float(candidate.mean())
            if fg_lo <= frac <= fg_hi:
                p = candidate
                break
        if p is None:
            raise SynthesisError(
                f"no admissible mask within {cfg.max_resample} attempts "
                f"(foreground fraction outside {cfg.fg_frac_range})"
            )
    else:
        p = np.ones((ch, cw), dtype=np.uint8)

    if cfg.use_self_mix:
        weights = fusion_weights(distance_transform(p), cfg.alpha)
    else:
        weights = np.ones((ch, cw), dtype=np.float64)

    ty = int(rng.integers(0, h - ch + 1))
    tx = int(rng.integers(0, w - cw + 1))
    c_t = target[ty:ty + ch, tx:tx + cw]
    crop, crop_mask = self_mix_paste(c_s, c_t, p, weights)

    image = target.copy()
    image[ty:ty + ch, tx:tx + cw] = crop
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[ty:ty + ch, tx:tx + cw] = crop_mask

    return SynthSample(
        image=image,
        mask=mask,
        seed=int(seed),
        crop_src=(sy, sx, ch, cw),
        crop_dst=(ty, tx, ch, cw),
        augs=tuple(augs),
    )


def texture_image(h: int, w: int, seed: int) -> np.ndarray:
    """Procedural colored-noise texture used as an out-of-domain source.

    Stands in for an external texture collection when ablating the
    source domain: three independent gradient-noise fields drive hue,
    saturation and value of an HSV image.
    """
    fields = [generate_perlin(h, w, res, derive_seed(seed, "tex", k))
              for k, res in enumerate((8, 16, 4))]
    hsv = np.stack([
        fields[0],
        0.3 + 0.7 * fields[1],
        0.2 + 0.8 * fields[2],
    ], axis=2)
    return np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)


def write_batch(src_paths: Sequence, out_dir, count: int, cfg: SynthConfig,
                base_seed: int, threads: int = 1) -> list[dict]:
    """Generate `count` samples from a pool of normal images and write them.

    Layout under ``out_dir``: ``images/<id>.png``, ``masks/<id>.png`` and
    ``manifest.jsonl`` with one record per sample (seed, source/target
    filenames, crop rectangles, augmentation list). Together with the
    generator config these records regenerate any sample bit-exactly.
    Source/target images are drawn with replacement and must share
    dimensions.
    """
    cfg.validate()
    if count < 0:
        raise ValueError("count must be >= 0")
    src_paths = [Path(p) for p in src_paths]
    if count > 0 and not src_paths:
        raise ValueError("need at least one source image")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    images = [imaging.load_image(p) for p in src_paths]
    shape = images[0].shape if images else None
    for p, img in zip(src_paths, images):
        if img.shape != shape:
            raise ValueError(
                f"{p}: dimensions {img.shape[:2]} differ from {src_paths[0]}: {shape[:2]}"
            )

    def build(i: int) -> dict:
        pair_rng = np.random.default_rng(np.uint64(derive_seed(base_seed, "pair", i)))
        si = int(pair_rng.integers(0, len(images)))
        ti = int(pair_rng.integers(0, len(images)))
        gen_seed = derive_seed(base_seed, "gen", i)
        sample = generate_anomaly(images[si], images[ti], cfg, gen_seed)
        name = f"{i:06d}"
        imaging.save_image(out_dir / "images" / f"{name}.png", sample.image)
        imaging.save_mask(out_dir / "masks" / f"{name}.png", sample.mask)
        return {
            "id": name,
            "seed": sample.seed,
            "source": src_paths[si].name,
            "target": src_paths[ti].name,
            "crop_src": list(sample.crop_src),
            "crop_dst": list(sample.crop_dst),
            "augs": [{"name": a.name, "params": a.params} for a in sample.augs],
        }

    if threads > 1 and count > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(build, range(count)))
    else:
        records = [build(i) for i in range(count)]

    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records
