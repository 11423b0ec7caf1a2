"""Dataset pools, synthetic sketch generation and the batching pipeline.

Images are float32 numpy arrays of shape (H, W) with values in [0, 1]:
0 is ink, 1 is paper. Three pools feed training: aligned rough/clean pairs,
rough-only inputs and clean-only targets. The on-disk layout is::

    root/
      pairs/rough/<stem>.<ext>   aligned by filename stem with
      pairs/clean/<stem>.<ext>
      rough/*.<ext>              unpaired rough inputs (optional)
      clean/*.<ext>              unpaired clean targets (optional)

Batching applies the training-time augmentation: size-weighted image choice,
random downsample level, 90-degree rotations and flips, random crops, target
thresholding, input mean subtraction and identity injection.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(ValueError):
    """Malformed dataset directory or incompatible pool configuration."""


@dataclass
class DatasetPools:
    """The three sample pools plus the supervised-input mean."""

    supervised: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    rough_only: list[np.ndarray] = field(default_factory=list)
    clean_only: list[np.ndarray] = field(default_factory=list)
    input_mean: float = 0.0

    def counts(self) -> tuple[int, int, int]:
        return len(self.supervised), len(self.rough_only), len(self.clean_only)


@dataclass(frozen=True)
class AugmentationConfig:
    patch_size: int = 384
    # eight extra downsample levels, 7/6 .. 14/6
    downsample_levels: tuple[float, ...] = tuple(n / 6 for n in range(7, 15))
    threshold: float = 0.9
    identity_probability: float = 0.10
    rotate_flip: bool = True
    size_weighted: bool = True

    def __post_init__(self):
        if any(level < 1 for level in self.downsample_levels):
            raise ValueError("downsample levels must be >= 1")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")
        if not 0.0 <= self.identity_probability < 1.0:
            raise ValueError("identity_probability must be in [0, 1)")


@dataclass
class Batch:
    """One training mini-batch; patch stacks are (N, 1, P, P) float tensors."""

    supervised_x: torch.Tensor
    supervised_y: torch.Tensor
    unsup_x: torch.Tensor
    unsup_y: torch.Tensor

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.supervised_x.shape[0], self.unsup_x.shape[0],
                self.unsup_y.shape[0])


# ---------------------------------------------------------------------------
# Image I/O

def to_grayscale(img: Image.Image) -> np.ndarray:
    arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    return arr


def load_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return to_grayscale(img)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def save_image(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_EXTENSIONS)


def compute_input_mean(pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean pixel value over the supervised inputs (and only those)."""
    if not pairs:
        return 0.0
    total = sum(float(x.sum()) for x, _ in pairs)
    count = sum(x.size for x, _ in pairs)
    return total / count


def load_dataset(root: str | Path) -> DatasetPools:
    """Load the documented directory layout into pools.

    Pairs are matched by filename stem between pairs/rough and pairs/clean;
    unmatched stems or dimension mismatches within a pair are rejected.
    """
    root = Path(root)
    rough_dir = root / "pairs" / "rough"
    clean_dir = root / "pairs" / "clean"
    rough_files = {p.stem: p for p in _list_images(rough_dir)}
    clean_files = {p.stem: p for p in _list_images(clean_dir)}
    unmatched = set(rough_files) ^ set(clean_files)
    if unmatched:
        raise DatasetError(
            f"unmatched pair stems under {root}/pairs: {sorted(unmatched)}")
    pairs = []
    for stem in sorted(rough_files):
        x = load_image(rough_files[stem])
        y = load_image(clean_files[stem])
        if x.shape != y.shape:
            raise DatasetError(
                f"pair {stem!r} has mismatched dimensions "
                f"{x.shape} vs {y.shape}")
        pairs.append((x, y))
    rough = [load_image(p) for p in _list_images(root / "rough")]
    clean = [load_image(p) for p in _list_images(root / "clean")]
    return DatasetPools(pairs, rough, clean, compute_input_mean(pairs))


def export_dataset(pools: DatasetPools, root: str | Path) -> None:
    """Write pools back out in the directory layout accepted by load_dataset."""
    root = Path(root)
    (root / "pairs" / "rough").mkdir(parents=True, exist_ok=True)
    (root / "pairs" / "clean").mkdir(parents=True, exist_ok=True)
    (root / "rough").mkdir(parents=True, exist_ok=True)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    for i, (x, y) in enumerate(pools.supervised):
        save_image(x, root / "pairs" / "rough" / f"pair_{i:04d}.png")
        save_image(y, root / "pairs" / "clean" / f"pair_{i:04d}.png")
    for i, x in enumerate(pools.rough_only):
        save_image(x, root / "rough" / f"rough_{i:04d}.png")
    for i, y in enumerate(pools.clean_only):
        save_image(y, root / "clean" / f"clean_{i:04d}.png")


# ---------------------------------------------------------------------------
# Synthetic sketch generation

@dataclass(frozen=True)
class SyntheticSketchSpec:
    """Parameters of the synthetic rough/clean sketch generator.

    Clean images are thin dark curves on white paper; the rough counterpart
    overlays jittered overdraw copies of each curve, faint construction
    lines and background noise. Deterministic under a seed.
    """

    canvas_size: int = 128
    stroke_count: tuple[int, int] = (3, 6)
    jitter: float = 2.5          # control-point jitter amplitude, pixels
    overdraw: int = 3            # rough strokes per clean line
    noise_density: float = 0.002  # fraction of pixels with background specks
    construction_lines: int = 2
    construction_darkness: tuple[float, float] = (0.6, 0.8)
    rough_darkness: tuple[float, float] = (0.25, 0.55)


def _stamp(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray,
           value: float) -> None:
    h, w = canvas.shape
    xi = np.clip(np.rint(xs).astype(int), 0, w - 1)
    yi = np.clip(np.rint(ys).astype(int), 0, h - 1)
    # ink accumulates darkest-wins; soft halo one pixel wide
    np.minimum.at(canvas, (yi, xi), value)
    halo = min(1.0, value + 0.35)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        np.minimum.at(canvas,
                      (np.clip(yi + dy, 0, h - 1), np.clip(xi + dx, 0, w - 1)),
                      halo)


def _draw_curve(canvas: np.ndarray, p0, p1, p2, value: float) -> None:
    """Rasterize a quadratic Bezier curve by dense point stamping."""
    approx_len = (np.hypot(*(np.subtract(p1, p0)))
                  + np.hypot(*(np.subtract(p2, p1))))
    n = max(int(approx_len * 3), 8)
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = ((1 - t) ** 2 * np.asarray(p0) + 2 * (1 - t) * t * np.asarray(p1)
           + t ** 2 * np.asarray(p2))
    _stamp(canvas, pts[:, 0], pts[:, 1], value)


def _random_curve(rng: np.random.Generator, size: int):
    margin = size * 0.08
    p0 = rng.uniform(margin, size - margin, 2)
    p2 = rng.uniform(margin, size - margin, 2)
    mid = (p0 + p2) / 2
    p1 = mid + rng.uniform(-size * 0.25, size * 0.25, 2)
    return p0, p1, p2


def _render_pair(spec: SyntheticSketchSpec, rng: np.random.Generator
                 ) -> tuple[np.ndarray, np.ndarray]:
    size = spec.canvas_size
    clean = np.ones((size, size), dtype=np.float32)
    rough = np.ones((size, size), dtype=np.float32)
    n_strokes = rng.integers(spec.stroke_count[0], spec.stroke_count[1] + 1)
    for _ in range(n_strokes):
        p0, p1, p2 = _random_curve(rng, size)
        darkness = rng.uniform(0.02, 0.15)
        _draw_curve(clean, p0, p1, p2, darkness)
        # first overdraw copy traces the clean stroke; extra copies jitter
        _draw_curve(rough, p0 + rng.normal(0, spec.jitter, 2),
                    p1 + rng.normal(0, spec.jitter, 2),
                    p2 + rng.normal(0, spec.jitter, 2), darkness)
        for _ in range(spec.overdraw - 1):
            jit = [rng.normal(0, spec.jitter, 2) for _ in range(3)]
            _draw_curve(rough, p0 + jit[0], p1 + jit[1], p2 + jit[2],
                        rng.uniform(*spec.rough_darkness))
    for _ in range(spec.construction_lines):
        p0 = rng.uniform(0, size, 2)
        p2 = rng.uniform(0, size, 2)
        _draw_curve(rough, p0, (p0 + p2) / 2, p2,
                    rng.uniform(*spec.construction_darkness))
    if spec.noise_density > 0:
        n_specks = rng.binomial(size * size, spec.noise_density)
        ys = rng.integers(0, size, n_specks)
        xs = rng.integers(0, size, n_specks)
        np.minimum.at(rough, (ys, xs),
                      rng.uniform(0.3, 0.8, n_specks).astype(np.float32))
    return rough, clean


def _render_single(spec: SyntheticSketchSpec, rng: np.random.Generator,
                   which: str) -> np.ndarray:
    rough, clean = _render_pair(spec, rng)
    return rough if which == "rough" else clean


def generate_synthetic(spec: SyntheticSketchSpec,
                       n_pairs: int, n_rough: int, n_clean: int,
                       seed: int = 0,
                       unsup_spec: SyntheticSketchSpec | None = None
                       ) -> DatasetPools:
    """Generate synthetic pools. The unsupervised pools use distinct seeds
    so they are never aligned with the supervised pairs; pass ``unsup_spec``
    to give them a different drawing style (distribution shift).
    """
    if min(n_pairs, n_rough, n_clean) < 0:
        raise ValueError("counts must be non-negative")
    unsup_spec = unsup_spec or spec
    pair_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    rough_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    clean_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    pairs = [_render_pair(spec, pair_rng) for _ in range(n_pairs)]
    rough = [_render_single(unsup_spec, rough_rng, "rough")
             for _ in range(n_rough)]
    clean = [_render_single(unsup_spec, clean_rng, "clean")
             for _ in range(n_clean)]
    return DatasetPools(pairs, rough, clean, compute_input_mean(pairs))


# ---------------------------------------------------------------------------
# Augmentation pipeline

def threshold_target(patch: np.ndarray, threshold: float) -> np.ndarray:
    """Snap near-ink values to pure black: pixels strictly below the
    threshold become 0, everything else is unchanged. Idempotent."""
    return np.where(patch < threshold, np.float32(0.0),
                    patch).astype(np.float32)


def subtract_mean(patch: np.ndarray, input_mean: float) -> np.ndarray:
    if not np.isfinite(input_mean):
        raise ValueError("input mean must be finite")
    return (patch - np.float32(input_mean)).astype(np.float32)


def _resize_area(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Area-averaging downscale (antialiases thin strokes)."""
    pil = Image.fromarray(np.ascontiguousarray(image, dtype=np.float32),
                          mode="F")
    return np.asarray(pil.resize((new_w, new_h), Image.BOX), dtype=np.float32)


def _pick_index(sizes: list[int], size_weighted: bool,
                rng: np.random.Generator) -> int:
    if size_weighted:
        p = np.asarray(sizes, dtype=np.float64)
        return int(rng.choice(len(sizes), p=p / p.sum()))
    return int(rng.integers(len(sizes)))


def _transform(patch: np.ndarray, k_rot: int, flip: bool) -> np.ndarray:
    out = np.rot90(patch, k_rot)
    if flip:
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


def sample_patch(pools: DatasetPools, pool_selector: str,
                 augmentation: AugmentationConfig,
                 rng: np.random.Generator):
    """Draw one augmented patch (or aligned pair for the supervised pool).

    ``pool_selector`` is "pair", "rough" or "clean". The source image is
    picked with probability proportional to its area when size-weighted; a
    downsample level is drawn uniformly from {1} plus the configured levels
    (restricted to levels at which the image still fits the patch size);
    rotation/flip and the crop window are shared between pair members.
    """
    if pool_selector == "pair":
        items = pools.supervised
    elif pool_selector == "rough":
        items = pools.rough_only
    elif pool_selector == "clean":
        items = pools.clean_only
    else:
        raise ValueError(f"unknown pool {pool_selector!r}")
    if not items:
        raise DatasetError(f"the {pool_selector} pool is empty")

    def dims(item):
        return item[0].shape if pool_selector == "pair" else item.shape

    patch = augmentation.patch_size
    if all(min(dims(it)) < patch for it in items):
        raise DatasetError(
            f"every image in the {pool_selector} pool is smaller than "
            f"patch_size {patch}; use a smaller patch_size")
    sizes = [dims(it)[0] * dims(it)[1] for it in items]
    for _ in range(1000):
        idx = _pick_index(sizes, augmentation.size_weighted, rng)
        h, w = dims(items[idx])
        levels = [lv for lv in (1.0, *augmentation.downsample_levels)
                  if int(h / lv) >= patch and int(w / lv) >= patch]
        if not levels:
            continue
        level = levels[int(rng.integers(len(levels)))]
        k_rot = int(rng.integers(4)) if augmentation.rotate_flip else 0
        flip = bool(rng.integers(2)) if augmentation.rotate_flip else False
        nh, nw = int(h / level), int(w / level)
        top = int(rng.integers(nh - patch + 1))
        left = int(rng.integers(nw - patch + 1))

        def extract(image: np.ndarray) -> np.ndarray:
            scaled = image if level == 1.0 else _resize_area(image, nh, nw)
            crop = scaled[top:top + patch, left:left + patch]
            return _transform(crop, k_rot, flip)

        if pool_selector == "pair":
            x, y = items[idx]
            return extract(x), extract(y)
        return extract(items[idx])
    raise DatasetError(
        f"could not draw a {patch}px patch from the {pool_selector} pool")


def _stack(patches: list[np.ndarray], patch_size: int) -> torch.Tensor:
    if not patches:
        return torch.zeros((0, 1, patch_size, patch_size))
    return torch.from_numpy(np.stack(patches)).unsqueeze(1)


def make_batch(pools: DatasetPools,
               counts: tuple[int, int, int],
               augmentation: AugmentationConfig,
               rng: np.random.Generator,
               threshold_targets: bool = True) -> Batch:
    """Assemble one mini-batch: ``counts`` supervised pairs, rough-only and
    clean-only patches. With probability ``identity_probability`` a
    supervised pair is replaced by (y*, y*) so already-clean inputs map to
    themselves. Targets (and the clean pool) are thresholded; all network
    inputs are mean-subtracted.
    """
    n_sup, n_rough, n_clean = counts
    mean = pools.input_mean
    sup_x, sup_y = [], []
    for _ in range(n_sup):
        x, y = sample_patch(pools, "pair", augmentation, rng)
        if rng.random() < augmentation.identity_probability:
            x = y
        if threshold_targets:
            y = threshold_target(y, augmentation.threshold)
        sup_x.append(subtract_mean(x, mean))
        sup_y.append(y)
    unsup_x = []
    for _ in range(n_rough):
        x = sample_patch(pools, "rough", augmentation, rng)
        unsup_x.append(subtract_mean(x, mean))
    unsup_y = []
    for _ in range(n_clean):
        y = sample_patch(pools, "clean", augmentation, rng)
        if threshold_targets:
            y = threshold_target(y, augmentation.threshold)
        unsup_y.append(y)
    p = augmentation.patch_size
    return Batch(_stack(sup_x, p), _stack(sup_y, p),
                 _stack(unsup_x, p), _stack(unsup_y, p))


def swap_for_pencil_mode(pools: DatasetPools,
                         keep_unsupervised: bool = False) -> DatasetPools:
    """Swap supervised inputs and targets for pencil-drawing training.

    Clean drawings become inputs and rough drawings targets; the input mean
    is recomputed over the new inputs. Unsupervised pools are dropped by
    default (pencil training uses pairs only); with ``keep_unsupervised``
    the rough/clean pools swap roles instead.
    """
    if not pools.supervised:
        raise DatasetError("pencil mode needs a non-empty supervised pool")
    swapped = [(y, x) for x, y in pools.supervised]
    rough = list(pools.clean_only) if keep_unsupervised else []
    clean = list(pools.rough_only) if keep_unsupervised else []
    return DatasetPools(swapped, rough, clean, compute_input_mean(swapped))
