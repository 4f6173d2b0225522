"""Generation and segmentation quality metrics, plus the evaluation report."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .rng import stream
from .styling import FeatureExtractor

_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW = 11
_SIGMA = 1.5


@dataclass(frozen=True)
class GaussianStats:
    """Sample mean and unbiased covariance of a feature set."""

    mean: np.ndarray
    cov: np.ndarray
    count: int


def gaussian_stats(features: np.ndarray | list[np.ndarray]) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"gaussian_stats needs >= 2 feature vectors, got shape {x.shape}")
    mu = x.mean(axis=0)
    d = x - mu
    cov = (d.T @ d) / (x.shape[0] - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mean=mu, cov=cov, count=x.shape[0])


def _sqrtm_psd(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric PSD square root via eigendecomposition; negative
    eigenvalues clip to 0. Returns (root, most negative eigenvalue)."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    neg = float(vals.min())
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, neg


def fid(a: GaussianStats, b: GaussianStats, jitter: float = 1e-6) -> tuple[float, bool]:
    """Frechet distance between two Gaussians.

    Returns (value, jittered): when the inner product matrix is numerically
    indefinite, epsilon*I is added to both covariances and the computation
    repeats; the flag records that this happened. The value clamps at 0.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"fid: dimension mismatch {a.mean.shape} vs {b.mean.shape}")

    def compute(cov_a, cov_b):
        ra, _ = _sqrtm_psd(cov_a)
        inner = ra @ cov_b @ ra
        root, neg = _sqrtm_psd(inner)
        scale = max(float(np.abs(np.linalg.eigvalsh(inner)).max()), 1.0)
        ok = neg > -1e-9 * scale
        diff = a.mean - b.mean
        val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(root))
        return val, ok

    value, ok = compute(a.cov, b.cov)
    jittered = False
    if not ok:
        eye = np.eye(a.cov.shape[0])
        value, _ = compute(a.cov + jitter * eye, b.cov + jitter * eye)
        jittered = True
    return max(value, 0.0), jittered


def fid_value(a: GaussianStats, b: GaussianStats) -> float:
    return fid(a, b)[0]


def _gauss_kernel() -> np.ndarray:
    x = np.arange(_WINDOW, dtype=np.float64) - (_WINDOW - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * _SIGMA**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering over the trailing two axes of [C,H,W]."""
    win = np.lib.stride_tricks.sliding_window_view(img, _WINDOW, axis=1)
    img = np.einsum("chwk,k->chw", win, k)
    win = np.lib.stride_tricks.sliding_window_view(img, _WINDOW, axis=2)
    return np.einsum("chwk,k->chw", win, k)


def _ssim_maps(a: np.ndarray, b: np.ndarray, k: np.ndarray, drange: float):
    c1 = (0.01 * drange) ** 2
    c2 = (0.03 * drange) ** 2
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a**2
    var_b = _filter_valid(b * b, k) - mu_b**2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def _downsample2(img: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    return img[:, : h - h % 2, : w - w % 2].reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def max_msssim_levels(height: int, width: int) -> int:
    """Largest pyramid depth that keeps an 11x11 window valid at the top."""
    levels = 0
    side = min(height, width)
    while side >= _WINDOW:
        levels += 1
        side //= 2
    return levels


def ms_ssim(
    a: np.ndarray,
    b: np.ndarray,
    levels: int | None = None,
    weights: tuple[float, ...] | None = None,
    drange: float = 2.0,
) -> float:
    """Multi-scale structural similarity over an 11x11 Gaussian window.

    Contrast-structure terms at every level, luminance at the coarsest;
    per-level exponents are the (renormalized) canonical weights. Inputs
    are [H,W] or [C,H,W]; default dynamic range 2 for [-1,1] data.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ms_ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"ms_ssim expects [H,W] or [C,H,W], got {a.shape}")
    hi, wi = a.shape[1:]
    feasible = max_msssim_levels(hi, wi)
    if feasible < 1:
        raise ValueError(f"image {a.shape} smaller than the {_WINDOW}x{_WINDOW} window")
    if levels is None:
        levels = min(feasible, len(_MSSSIM_WEIGHTS))
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if levels > feasible:
        raise ValueError(
            f"{levels} levels need min dim >= {_WINDOW * 2 ** (levels - 1)}; "
            f"max feasible for {a.shape} is {feasible}"
        )
    if weights is None:
        w = np.asarray(_MSSSIM_WEIGHTS[:levels], dtype=np.float64)
        w = w / w.sum()
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.size != levels:
            raise ValueError(f"{levels} levels need {levels} weights, got {w.size}")
        if abs(w.sum() - 1.0) > 1e-6:
            raise ValueError("weights must sum to 1")

    k = _gauss_kernel()
    value = 1.0
    for lvl in range(levels):
        lum, cs = _ssim_maps(a, b, k, drange)
        if lvl < levels - 1:
            value *= max(cs.mean(), 0.0) ** w[lvl]
            a, b = _downsample2(a), _downsample2(b)
        else:
            value *= max((lum * cs).mean(), 0.0) ** w[lvl]
    return float(value)


def seg_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(Dice, IoU) between binary masks; both-empty counts as perfect."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"seg_metrics: shapes differ {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"seg_metrics: {name} mask is not binary (values {vals[:5]})")
    p = pred.astype(bool)
    g = gt.astype(bool)
    inter = float(np.sum(p & g))
    p_sum = float(p.sum())
    g_sum = float(g.sum())
    union = p_sum + g_sum - inter
    if p_sum + g_sum == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (p_sum + g_sum)
    iou = inter / union if union > 0 else 1.0
    return dice, iou


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------


@dataclass
class ReportCell:
    tag: str
    metric: str
    repeat: int
    value: float
    seed: int
    dataset_hash: str
    note: str = ""


@dataclass
class MetricsReport:
    cells: list[ReportCell] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["tag,metric,repeat,value,seed,dataset_hash,note"]
        for c in self.cells:
            val = "" if np.isnan(c.value) else f"{c.value:.6f}"
            lines.append(f"{c.tag},{c.metric},{c.repeat},{val},{c.seed},{c.dataset_hash},{c.note}")
        return "\n".join(lines) + "\n"

    def to_text_table(self) -> str:
        tags = sorted({c.tag for c in self.cells}, key=_tag_order)
        repeats = sorted({c.repeat for c in self.cells})
        by_key = {(c.tag, c.metric, c.repeat): c for c in self.cells}
        header = ["data type".ljust(22)]
        for metric in ("fid", "ms_ssim"):
            for r in repeats:
                header.append(f"{metric}[{r}]".rjust(12))
        lines = ["".join(header), "-" * (22 + 12 * 2 * len(repeats))]
        for tag in tags:
            row = [tag.ljust(22)]
            for metric in ("fid", "ms_ssim"):
                for r in repeats:
                    cell = by_key.get((tag, metric, r))
                    if cell is None or np.isnan(cell.value):
                        row.append("absent".rjust(12))
                    else:
                        row.append(f"{cell.value:12.4f}")
            lines.append("".join(row))
        return "\n".join(lines) + "\n"


def _tag_order(tag: str) -> tuple:
    order = ["real", "gan", "diff", "styled-diff", "full-diff", "full-styled-diff", "noise"]
    low = tag.lower()
    for i, prefix in enumerate(order):
        if low.startswith(prefix):
            return (i, low)
    return (len(order), low)


def dataset_hash(samples: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s, dtype=np.float32).tobytes())
    return h.hexdigest()[:16]


def feature_tokens(samples: list[np.ndarray], extractor: FeatureExtractor) -> np.ndarray:
    """Global-token embeddings of the color channels, resized if needed."""
    from .data import resize_chw  # local import; data also consumes metrics helpers

    rows = []
    batch = []
    for s in samples:
        img = s[:3] if s.shape[0] == 4 else s
        if img.shape[1] != extractor.input_size or img.shape[2] != extractor.input_size:
            img = resize_chw(img, extractor.input_size)
        batch.append(img.astype(np.float32))
    chunk = 64
    for i in range(0, len(batch), chunk):
        rows.append(extractor.tokens_np(np.stack(batch[i : i + chunk])))
    return np.concatenate(rows, axis=0)


def eval_report(
    datasets: dict[str, list[np.ndarray]],
    reference: list[np.ndarray],
    extractor: FeatureExtractor,
    repeats: int = 3,
    seed: int = 0,
    msssim_pairs: int = 64,
) -> MetricsReport:
    """FID against the reference and within-set mean pairwise MS-SSIM.

    Every data-type tag (including a synthetic "real" row for the
    reference itself) is evaluated `repeats` times with per-repeat shuffle
    seeds; empty tag sets yield rows marked absent.
    """
    if not reference:
        raise ValueError("reference set is empty")
    report = MetricsReport()
    ref_tokens = feature_tokens(reference, extractor)
    ref_stats = gaussian_stats(ref_tokens)
    all_sets = {"real": reference, **{k: v for k, v in datasets.items() if k != "real"}}
    for tag, samples in all_sets.items():
        if len(samples) < 2:
            for metric in ("fid", "ms_ssim"):
                for rep in range(repeats):
                    report.cells.append(
                        ReportCell(tag, metric, rep, float("nan"), seed, "", note="absent")
                    )
            continue
        dhash = dataset_hash(samples)
        tokens = ref_tokens if samples is reference else feature_tokens(samples, extractor)
        stats = gaussian_stats(tokens)
        for rep in range(repeats):
            rng = stream(seed, "eval", tag, rep)
            value, jittered = fid(stats, ref_stats)
            note = "jittered" if jittered else ""
            report.cells.append(ReportCell(tag, "fid", rep, value, seed, dhash, note))
            n = len(samples)
            pair_vals = []
            for _ in range(min(msssim_pairs, n * (n - 1) // 2)):
                i, j = rng.choice(n, size=2, replace=False)
                a = samples[i][:3] if samples[i].shape[0] == 4 else samples[i]
                b = samples[j][:3] if samples[j].shape[0] == 4 else samples[j]
                pair_vals.append(ms_ssim(a, b))
            report.cells.append(
                ReportCell(tag, "ms_ssim", rep, float(np.mean(pair_vals)), seed, dhash)
            )
    return report
