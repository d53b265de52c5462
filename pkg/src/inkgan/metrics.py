"""SSIM and Frechet-distance evaluation with a pluggable feature extractor.

Images enter the metrics in the unit-range representation ([0, 1] floats,
CHW). SSIM uses windowed statistics with the standard constants K1=0.01,
K2=0.03 and dynamic range L=1; channels are averaged after per-channel maps.
The Frechet distance is computed between Gaussian fits of feature
embeddings; instead of a pretrained network, the default extractor is a
documented deterministic map (16x16 downsample, flatten, fixed seeded
random projection to 64 dims, tanh), so distances are only comparable
within one extractor identity.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .data import resize
from .errors import MetricError, ShapeError

METRIC_CSV_HEADER = ("epoch", "fid", "ssim_mean", "ssim_std", "sample_size")


@dataclass
class SsimConfig:
    window: str = "gaussian"  # "gaussian" (11x11, sigma 1.5) or "uniform" (8x8)
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window not in ("gaussian", "uniform"):
            raise MetricError(f"unknown ssim window {self.window!r}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise MetricError("ssim constants K1, K2 must be positive")

    def window_array(self):
        """Normalized 2-D window (sums to 1)."""
        if self.window == "uniform":
            w = np.ones((8, 8), dtype=np.float64)
        else:
            half = 5
            ax = np.arange(-half, half + 1, dtype=np.float64)
            g = np.exp(-(ax**2) / (2 * 1.5**2))
            w = np.outer(g, g)
        return w / w.sum()


def _windowed_mean(plane, win):
    """Weighted window sums at every valid position via sliding windows."""
    view = np.lib.stride_tricks.sliding_window_view(plane, win.shape)
    return np.tensordot(view, win, axes=((2, 3), (0, 1)))


def ssim(a, b, cfg=None):
    """Mean SSIM over all valid window positions and channels; ssim(a, a) = 1."""
    cfg = cfg or SsimConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: image shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim: expected CHW or HW images, got shape {a.shape}")
    win = cfg.window_array()
    if a.shape[1] < win.shape[0] or a.shape[2] < win.shape[1]:
        raise MetricError(
            f"ssim: image {a.shape[1]}x{a.shape[2]} smaller than window {win.shape}"
        )
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    per_channel = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mu_x = _windowed_mean(x, win)
        mu_y = _windowed_mean(y, win)
        xx = _windowed_mean(x * x, win) - mu_x * mu_x
        yy = _windowed_mean(y * y, win) - mu_y * mu_y
        xy = _windowed_mean(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        per_channel.append(np.mean(num / den))
    return float(np.mean(per_channel))


# ---------------------------------------------------------------------------
# feature embedding


class FeatureExtractor:
    """Deterministic image -> feature-vector map with an identity tag.

    The default map downsamples each channel to 16x16 with the pipeline's
    corner-aligned bilinear filter, flattens, applies a fixed seeded gaussian
    random projection to `dim` components and squashes with tanh. The same
    image gives the same features in any process; a trained embedder can be
    slotted in by subclassing and overriding extract().
    """

    def __init__(self, dim=64, seed=0, side=16):
        self.dim = dim
        self.seed = seed
        self.side = side
        self.name = f"rp{side}x{side}-d{dim}-s{seed}"
        self._projection = None

    def _project_matrix(self, in_dim):
        if self._projection is None or self._projection.shape[1] != in_dim:
            rng = np.random.default_rng(self.seed)
            self._projection = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(self.dim, in_dim))
        return self._projection

    def extract(self, image):
        """image: CHW (or HW) floats in [0, 1] -> float64 vector of length dim."""
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise MetricError(f"extract: expected CHW image, got shape {arr.shape}")
        small = np.stack([resize(ch, self.side) for ch in arr])
        flat = small.reshape(-1)
        w = self._project_matrix(flat.size)
        return np.tanh(w @ flat)

    def extract_all(self, images):
        return np.stack([self.extract(img) for img in images])


# ---------------------------------------------------------------------------
# gaussian fits and the Frechet distance


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise MetricError(
                f"covariance shape {self.sigma.shape} does not match mean of {self.mu.size}"
            )


def fit_gaussian(features):
    """Sample mean and unbiased (n-1) covariance, symmetrized."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise MetricError(f"fit_gaussian: need at least 2 feature vectors, got {feats.shape}")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (feats.shape[0] - 1)
    sigma = (sigma + sigma.T) / 2
    return GaussianStats(mu=mu, sigma=sigma)


def _psd_sqrt(matrix, tol=1e-8):
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in (-tol, 0) are clamped to 0; anything below -tol means the
    input was not PSD within tolerance.
    """
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2)
    if np.min(vals) < -tol:
        raise MetricError(f"matrix not PSD within tolerance: min eigenvalue {np.min(vals):.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(p, q):
    """||mu_p - mu_q||^2 + Tr(Sp + Sq - 2 (Sp Sq)^(1/2)).

    The cross term is evaluated through the symmetric form
    (Sp^(1/2) Sq Sp^(1/2))^(1/2), which is PSD by construction.
    """
    if p.mu.shape != q.mu.shape:
        raise MetricError(f"dimension mismatch: {p.mu.shape} vs {q.mu.shape}")
    diff = p.mu - q.mu
    sp_half = _psd_sqrt(p.sigma)
    inner = sp_half @ q.sigma @ sp_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if np.min(vals) < -1e-8:
        raise MetricError(f"cross term not PSD within tolerance: {np.min(vals):.3e}")
    trace_sqrt = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    dist = float(diff @ diff + np.trace(p.sigma) + np.trace(q.sigma) - 2 * trace_sqrt)
    return max(dist, 0.0)


def sqrt_cross_term(p, q):
    """(Sp^(1/2) Sq Sp^(1/2))^(1/2); exposed for verification tests."""
    sp_half = _psd_sqrt(p.sigma)
    return _psd_sqrt(sp_half @ q.sigma @ sp_half)


# ---------------------------------------------------------------------------
# sample evaluation


@dataclass
class MetricRecord:
    epoch: int
    fid: float
    ssim_mean: float
    ssim_std: float
    sample_size: int


def evaluate_sample(
    generated,
    references,
    extractor,
    cfg=None,
    generated_ids=None,
    reference_ids=None,
    epoch=0,
):
    """SSIM mean/std over aligned pairs plus the Frechet distance of the sets.

    generated and references are sequences of unit-range CHW images, aligned
    one to one for SSIM. When ids are supplied they must agree pairwise;
    a shuffled alignment is an error rather than a silent mismatch.
    """
    if len(generated) == 0 or len(references) == 0:
        raise MetricError("evaluate_sample: empty image set")
    if len(generated) != len(references):
        raise MetricError(
            f"evaluate_sample: {len(generated)} generated vs {len(references)} references"
        )
    if (generated_ids is None) != (reference_ids is None):
        raise MetricError("evaluate_sample: supply both id lists or neither")
    if generated_ids is not None:
        if list(generated_ids) != list(reference_ids):
            raise MetricError("evaluate_sample: id lists are misaligned")
    cfg = cfg or SsimConfig()

    scores = [ssim(g, r, cfg) for g, r in zip(generated, references)]
    n = len(scores)
    ssim_mean = float(np.mean(scores))
    ssim_std = float(np.std(scores, ddof=1)) if n >= 2 else 0.0

    fid = frechet_distance(
        fit_gaussian(extractor.extract_all(generated)),
        fit_gaussian(extractor.extract_all(references)),
    )
    return MetricRecord(
        epoch=epoch, fid=fid, ssim_mean=ssim_mean, ssim_std=ssim_std, sample_size=n
    )


# ---------------------------------------------------------------------------
# metric CSV (LF endings, '.' decimal separator)


def append_metric_record(path, record):
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRIC_CSV_HEADER)
        writer.writerow(
            [
                record.epoch,
                repr(record.fid),
                repr(record.ssim_mean),
                repr(record.ssim_std),
                record.sample_size,
            ]
        )


def read_metric_records(path):
    if not os.path.exists(path):
        raise MetricError(f"missing metrics file {path}")
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_CSV_HEADER:
            raise MetricError(f"{path}: unexpected header {header}")
        for row in reader:
            if not row:
                continue
            records.append(
                MetricRecord(
                    epoch=int(row[0]),
                    fid=float(row[1]),
                    ssim_mean=float(row[2]),
                    ssim_std=float(row[3]),
                    sample_size=int(row[4]),
                )
            )
    return records
