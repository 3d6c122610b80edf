"""Grid tiling of slide rasters and per-patch feature vectors."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import AlignmentError, EmptyResultError, FormatError, ValidationError
from .records import FeatureMatrix, Patch

DEFAULT_PATCH_SIZE = 256
DEFAULT_TISSUE_THRESHOLD = 0.5
DEFAULT_TOY_DIM = 32
BACKGROUND_LUMINANCE = 0.8
N_BINS = 8


def load_image(path) -> np.ndarray:
    """Read a PNG/PPM raster as an (H, W, C) uint8 array."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable PNG/PPM image") from exc
    return arr[:, :, None] if arr.ndim == 2 else arr


def _as_unit(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValidationError(f"image must be (H, W) or (H, W, C), got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    img = img.astype(np.float64)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValidationError("floating-point images must lie in [0, 1]")
    return img


def tile_image(image, patch_size: int = DEFAULT_PATCH_SIZE,
               tissue_threshold: float = DEFAULT_TISSUE_THRESHOLD,
               wsi_id: str = "wsi") -> List[Patch]:
    """Cut ``image`` into non-overlapping square tiles anchored at the origin.

    Trailing partial tiles are dropped.  A pixel counts as tissue when its
    channel-mean luminance is below ``BACKGROUND_LUMINANCE``; a tile is kept
    when its tissue share reaches ``tissue_threshold``.  Kept patches are
    numbered in row-major grid order.
    """
    if int(patch_size) != patch_size or patch_size < 1:
        raise ValidationError(f"patch_size must be a positive integer, got {patch_size!r}")
    if not 0.0 <= tissue_threshold <= 1.0:
        raise ValidationError(f"tissue_threshold must lie in [0, 1], got {tissue_threshold!r}")
    img = _as_unit(image)
    h, w = img.shape[:2]
    rows, cols = h // patch_size, w // patch_size
    if rows == 0 or cols == 0:
        raise EmptyResultError(f"image {w}x{h} is smaller than one {patch_size}px patch")

    tissue = img.mean(axis=2) < BACKGROUND_LUMINANCE
    tissue = tissue[:rows * patch_size, :cols * patch_size]
    frac = tissue.reshape(rows, patch_size, cols, patch_size).mean(axis=(1, 3))

    patches = []
    for r, c in zip(*np.nonzero(frac >= tissue_threshold)):
        patches.append(Patch(wsi_id, len(patches), int(r), int(c), float(frac[r, c])))
    return patches


def extract_toy_features(image, patch: Patch, dim: int = DEFAULT_TOY_DIM,
                         patch_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Histogram-and-moments descriptor of one patch.

    Per channel: an 8-bin intensity histogram summing to 1, then the mean
    and standard deviation of intensities in [0, 1].  The concatenation is
    repeated or cut to exactly ``dim`` entries.
    """
    if int(dim) != dim or dim < 1:
        raise ValidationError(f"dim must be a positive integer, got {dim!r}")
    img = _as_unit(image)
    r0, c0 = patch.grid_row * patch_size, patch.grid_col * patch_size
    if r0 + patch_size > img.shape[0] or c0 + patch_size > img.shape[1]:
        raise ValidationError(f"patch {patch.key} lies outside the image")
    tile = img[r0:r0 + patch_size, c0:c0 + patch_size].reshape(-1, img.shape[2])

    hists, moments = [], []
    for ch in tile.T:
        counts, _ = np.histogram(ch, bins=N_BINS, range=(0.0, 1.0))
        hists.append(counts / counts.sum())
        # a flat channel has exactly zero spread; ch.std() can leave ~1e-17
        moments.extend([ch.mean(), 0.0 if ch.min() == ch.max() else ch.std()])
    base = np.concatenate(hists + [np.asarray(moments)])
    return np.resize(base, int(dim))


def extract_features(image, patches: Sequence[Patch], dim: int = DEFAULT_TOY_DIM,
                     patch_size: int = DEFAULT_PATCH_SIZE, workers: int = 1) -> FeatureMatrix:
    """Toy features for every patch; row order follows ``patches``."""
    if not patches:
        raise EmptyResultError("no patches to extract features from")
    fn = lambda p: extract_toy_features(image, p, dim, patch_size)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(fn, patches))
    else:
        rows = [fn(p) for p in patches]
    return FeatureMatrix(np.vstack(rows), [p.key for p in patches])


def align_external_features(patches: Sequence[Patch], matrix: FeatureMatrix,
                            index: Optional[Sequence[Tuple[str, int]]] = None) -> FeatureMatrix:
    """Reorder externally computed feature rows to follow ``patches``.

    ``index[i]`` is the ``(wsi_id, patch_id)`` of row ``i`` of ``matrix``;
    it defaults to ``matrix.row_keys``.  Patches and rows must correspond
    one-to-one.
    """
    if index is None:
        index = matrix.row_keys
    if index is None:
        raise AlignmentError("no patch index supplied for external features")
    if len(index) != matrix.n_nodes:
        raise AlignmentError(f"index has {len(index)} rows but matrix has {matrix.n_nodes}")
    row_of: Dict[Tuple[str, int], int] = {}
    for i, (wsi, pid) in enumerate(index):
        key = (str(wsi), int(pid))
        if key in row_of:
            raise AlignmentError(f"patch {key} mapped to rows {row_of[key]} and {i}")
        row_of[key] = i
    order = []
    for p in patches:
        if p.key not in row_of:
            raise AlignmentError(f"no feature row for patch {p.key}")
        order.append(row_of[p.key])
    if len(set(order)) != len(order):
        raise AlignmentError("patch list contains duplicate patches")
    if len(order) != matrix.n_nodes:
        unused = sorted(set(row_of) - {p.key for p in patches})
        raise AlignmentError(f"feature rows without a patch: {unused[:5]}")
    return FeatureMatrix(matrix.values[order], [p.key for p in patches])
