"""Hyperspectral data pipeline: cubes, patches, PCA, semi-supervised splits.

Everything here is pure given (inputs, seed).  The combined pipeline is in
:func:`prepare_dataset`, which enforces the no-leakage rules in code: band
scaling and PCA are fit on training pixels only, and the labeled/unlabeled/
test index sets partition the labeled pixels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import cube_io
from .errors import ConfigError, DataError
from .rng import Rng


@dataclass
class HsiCube:
    """height x width x bands reflectance plus an integer label map
    (0 = unlabeled background, classes 1..K)."""

    reflectance: np.ndarray
    ground_truth: np.ndarray
    num_classes: int

    def __post_init__(self):
        r, g = self.reflectance, self.ground_truth
        if r.ndim != 3:
            raise DataError(f"reflectance must be (h, w, bands), got shape {r.shape}")
        if g.shape != r.shape[:2]:
            raise DataError(
                f"ground truth shape {g.shape} does not match image {r.shape[:2]}"
            )
        if not np.all(np.isfinite(r)):
            raise DataError("reflectance contains non-finite values")
        if g.min() < 0:
            raise DataError("ground-truth labels must be >= 0")
        if g.max() > self.num_classes:
            raise DataError(
                f"ground truth contains label {int(g.max())} but only "
                f"{self.num_classes} classes are declared"
            )

    @property
    def height(self) -> int:
        return self.reflectance.shape[0]

    @property
    def width(self) -> int:
        return self.reflectance.shape[1]

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]

    def labeled_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of all pixels with a nonzero label, row-major order."""
        return np.nonzero(self.ground_truth)


@dataclass
class PatchSet:
    """One window per labeled pixel plus its (0-based) class index."""

    patches: np.ndarray  # (n, w, w, c)
    labels: np.ndarray  # (n,) in 0..K-1
    centers: np.ndarray  # (n, 2) row, col
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def window(self) -> int:
        return self.patches.shape[1]


@dataclass
class PcaModel:
    mean: np.ndarray  # (c,)
    components: np.ndarray  # (c, k), orthonormal columns, descending variance
    explained_variance: np.ndarray  # (k,), non-increasing


@dataclass
class SemiSplit:
    """Disjoint index sets over patch centers; covers all labeled pixels."""

    labeled_train: np.ndarray
    unlabeled_train: np.ndarray
    test: np.ndarray
    seed: int

    def train_indices(self) -> np.ndarray:
        return np.concatenate([self.labeled_train, self.unlabeled_train])


# ---------------------------------------------------------------------------
# ingestion and scaling
# ---------------------------------------------------------------------------


def load_cube(data_path, gt_path, expected_classes: int | None = None, scale: bool = True) -> HsiCube:
    """Read reflectance + ground-truth HSICUBE1 files into a validated cube.

    With ``scale=True`` each band is min-max scaled to [0, 1] over the whole
    scene; pass ``scale=False`` when the split-aware :func:`scale_bands` will
    run later (as :func:`prepare_dataset` does).
    """
    data = cube_io.read_array(data_path)
    gt = cube_io.read_array(gt_path)
    if data.ndim != 3:
        raise DataError(f"{data_path}: expected a 3-d cube, got shape {data.shape}")
    if not np.issubdtype(gt.dtype, np.integer):
        raise DataError(f"{gt_path}: ground truth must be an integer array, got {gt.dtype}")
    if data.dtype == np.float32:
        data = data.astype(np.float64)
    elif data.dtype != np.float64:
        raise DataError(f"{data_path}: reflectance must be float32 or float64, got {data.dtype}")
    k = int(expected_classes) if expected_classes is not None else int(gt.max())
    cube = HsiCube(data, gt.astype(np.int64), num_classes=k)
    if scale:
        cube = scale_bands(cube)
    return cube


def scale_bands(cube: HsiCube, fit_coords: tuple[np.ndarray, np.ndarray] | None = None) -> HsiCube:
    """Band-wise min-max scaling to [0, 1].

    ``fit_coords`` restricts the min/max fit to those (rows, cols) pixels
    (the training pixels in the leakage-free pipeline); all other pixels are
    transformed with the fitted range and clipped to the [-0.5, 1.5] guard
    band.  Without ``fit_coords`` the fit uses the whole scene.
    """
    r = cube.reflectance
    fit = r if fit_coords is None else r[fit_coords]
    lo = fit.min(axis=tuple(range(fit.ndim - 1)))
    hi = fit.max(axis=tuple(range(fit.ndim - 1)))
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = (r - lo) / span
    scaled = np.clip(scaled, -0.5, 1.5)
    return HsiCube(scaled, cube.ground_truth, cube.num_classes)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def extract_patches(cube: HsiCube, window: int) -> PatchSet:
    """One window x window x bands patch per labeled pixel.

    Mirror padding (symmetric reflection including the border pixel) keeps
    labeled border pixels; window 1 yields plain per-pixel spectra.
    """
    window = int(window)
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be odd and >= 1, got {window}")
    rows, cols = cube.labeled_coords()
    pad = window // 2
    if pad:
        padded = np.pad(cube.reflectance, ((pad, pad), (pad, pad), (0, 0)), mode="symmetric")
    else:
        padded = cube.reflectance
    win = sliding_window_view(padded, (window, window), axis=(0, 1))  # (h, w, c, win, win)
    patches = win[rows, cols].transpose(0, 2, 3, 1).copy()  # (n, win, win, c)
    labels = cube.ground_truth[rows, cols].astype(np.int64) - 1
    centers = np.stack([rows, cols], axis=1).astype(np.int64)
    return PatchSet(patches, labels, centers, cube.num_classes)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


def pca_fit(spectra: np.ndarray, k: int) -> PcaModel:
    """Eigendecomposition of the sample covariance of mean-centered spectra.

    Components are returned in descending eigenvalue order with a
    deterministic sign: each component's largest-magnitude entry is positive.
    """
    n, c = spectra.shape
    k = int(k)
    if not (1 <= k <= c):
        raise ConfigError(f"need 1 <= k <= {c} components, got {k}")
    if c > n:
        raise ConfigError(f"PCA needs at least as many samples as bands ({n} < {c})")
    mean = spectra.mean(axis=0)
    centered = spectra - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order]
    evals = evals[order]
    biggest = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[biggest, np.arange(k)])
    signs[signs == 0] = 1.0
    return PcaModel(mean=mean, components=comps * signs, explained_variance=evals)


def pca_transform(model: PcaModel, spectra: np.ndarray) -> np.ndarray:
    return (spectra - model.mean) @ model.components


def pca_inverse(model: PcaModel, reduced: np.ndarray) -> np.ndarray:
    return reduced @ model.components.T + model.mean


def pca_reduce_cube(cube: HsiCube, model: PcaModel) -> HsiCube:
    h, w, c = cube.reflectance.shape
    flat = cube.reflectance.reshape(-1, c)
    reduced = pca_transform(model, flat).reshape(h, w, -1)
    return HsiCube(reduced, cube.ground_truth, cube.num_classes)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def _stratified_test_counts(class_counts: np.ndarray, fraction: float) -> np.ndarray:
    """Largest-remainder apportionment: per-class test counts proportional to
    class size, summing exactly to round(fraction * total)."""
    total_test = int(round(fraction * class_counts.sum()))
    quotas = fraction * class_counts
    base = np.floor(quotas).astype(np.int64)
    remainder = total_test - int(base.sum())
    if remainder > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:remainder]] += 1
    elif remainder < 0:
        order = np.argsort(quotas - base, kind="stable")
        base[order[: -remainder]] -= 1
    return base


def make_split(
    patchset,
    n_per_class: int | None,
    test_fraction: float = 0.25,
    seed: int = 0,
) -> SemiSplit:
    """Stratified test draw first, then n labeled points per class from the
    remainder; everything else becomes the unlabeled pool.

    The test set is drawn before any labeled sampling, so runs at different
    ``n_per_class`` under one seed share a test set.  ``n_per_class=None``
    uses every non-test point as labeled (full-label runs).
    """
    labels = patchset.labels if hasattr(patchset, "labels") else np.asarray(patchset)
    if not (0.0 < test_fraction < 1.0):
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    classes = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    test_counts = _stratified_test_counts(counts, test_fraction)
    rng = Rng(seed)
    test_parts, rest_parts = [], []
    for c, t in zip(classes, test_counts):
        idx = np.nonzero(labels == c)[0]
        perm = idx[rng.permutation(len(idx))]
        test_parts.append(perm[:t])
        rest_parts.append(perm[t:])
    labeled_parts, unlabeled_parts = [], []
    for c, rest in zip(classes, rest_parts):
        if n_per_class is None:
            labeled_parts.append(rest)
            continue
        if len(rest) < n_per_class:
            raise DataError(
                f"class {int(c) + 1} has only {len(rest)} non-test points, "
                f"need {n_per_class} labeled"
            )
        pick = rng.choice(len(rest), size=n_per_class, replace=False)
        chosen = np.zeros(len(rest), dtype=bool)
        chosen[pick] = True
        labeled_parts.append(rest[chosen])
        unlabeled_parts.append(rest[~chosen])
    return SemiSplit(
        labeled_train=np.sort(np.concatenate(labeled_parts)),
        unlabeled_train=np.sort(np.concatenate(unlabeled_parts))
        if unlabeled_parts
        else np.array([], dtype=np.int64),
        test=np.sort(np.concatenate(test_parts)),
        seed=int(seed),
    )


def balance_labels(indices: np.ndarray, labels: np.ndarray, strategy: str, rng: Rng) -> np.ndarray:
    """Resample an index set so every class occurs equally often.

    upsample: with replacement up to the majority count; downsample: without
    replacement down to the minority count.  Used for full-label runs;
    n-per-class splits are balanced by construction.
    """
    if strategy not in ("upsample", "downsample"):
        raise ConfigError(f"strategy must be 'upsample' or 'downsample', got {strategy!r}")
    indices = np.asarray(indices)
    lab = labels[indices]
    classes = np.unique(lab)
    counts = {c: int((lab == c).sum()) for c in classes}
    target = max(counts.values()) if strategy == "upsample" else min(counts.values())
    out = []
    for c in classes:
        pool = indices[lab == c]
        if len(pool) == target:
            out.append(pool)
        elif strategy == "upsample":
            out.append(rng.choice(pool, size=target, replace=True))
        else:
            out.append(rng.choice(pool, size=target, replace=False))
    return np.concatenate(out)


def export_split_csv(path, patchset: PatchSet, split: SemiSplit) -> None:
    """Write (index, row, col, class, role) rows for external auditing."""
    roles = {}
    for name, idx in (
        ("labeled", split.labeled_train),
        ("unlabeled", split.unlabeled_train),
        ("test", split.test),
    ):
        for i in idx:
            roles[int(i)] = name
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "row", "col", "class", "role"])
        for i in range(len(patchset)):
            r, c = patchset.centers[i]
            w.writerow([i, int(r), int(c), int(patchset.labels[i]) + 1, roles[i]])


# ---------------------------------------------------------------------------
# the leakage-free pipeline
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    patches: PatchSet
    split: SemiSplit
    pca: PcaModel | None


def prepare_dataset(
    cube: HsiCube,
    window: int,
    pca_components: int | None,
    n_per_class: int | None,
    test_fraction: float = 0.25,
    seed: int = 0,
) -> PreparedData:
    """Split -> train-only band scaling -> train-only PCA -> patches.

    The split is computed on labels alone, so the scaling and PCA fits can
    be restricted to training pixels; the disjointness of the fit set and
    the test set is asserted here rather than assumed.
    """
    rows, cols = cube.labeled_coords()
    labels = cube.ground_truth[rows, cols].astype(np.int64) - 1
    split = make_split(labels, n_per_class, test_fraction, seed)
    n = len(labels)
    all_idx = np.sort(
        np.concatenate([split.labeled_train, split.unlabeled_train, split.test])
    )
    if not np.array_equal(all_idx, np.arange(n)):
        raise DataError("split does not partition the labeled pixels")
    train_idx = split.train_indices()
    if np.intersect1d(train_idx, split.test).size:
        raise DataError("train/test overlap detected")
    fit_coords = (rows[train_idx], cols[train_idx])
    cube = scale_bands(cube, fit_coords=fit_coords)
    pca = None
    if pca_components is not None:
        train_spectra = cube.reflectance[fit_coords]
        pca = pca_fit(train_spectra, pca_components)
        cube = pca_reduce_cube(cube, pca)
    patches = extract_patches(cube, window)
    return PreparedData(patches=patches, split=split, pca=pca)
