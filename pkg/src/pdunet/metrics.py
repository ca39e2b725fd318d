"""Image quality metrics and the rank-sum test used to compare methods."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# truncate so the Gaussian support is 11x11 (radius int(3.5 * 1.5 + 0.5) = 5)
_TRUNCATE = 3.5
ALPHA = 0.05
EXACT_MAX_N = 20


class MetricError(ValueError):
    """Arguments to a metric are invalid (shape mismatch, empty mask, ...)."""


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _blur(x):
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=_TRUNCATE, mode="reflect")


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Gaussian-windowed SSIM map (11x11, sigma 1.5, symmetric boundary)."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise MetricError(f"ssim expects 2-D images, got {a.ndim}-D")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _blur(a), _blur(b)
    saa = _blur(a * a) - mu_a * mu_a
    sbb = _blur(b * b) - mu_b * mu_b
    sab = _blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    return float(ssim_map(a, b, data_range).mean())


def to_hu(mu, mu_water: float = 0.2):
    return 1000.0 * (np.asarray(mu, dtype=np.float64) - mu_water) / mu_water


def rmse_hu(a, b, mu_water: float = 0.2) -> float:
    a, b = _pair(a, b)
    d = to_hu(a, mu_water) - to_hu(b, mu_water)
    return float(np.sqrt(np.mean(d * d)))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


# ------------------------------------------------------------------ Mann-Whitney U


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p: float
    method: str
    n_x: int
    n_y: int

    def __iter__(self):
        return iter((self.u, self.p))


def _midranks(values: np.ndarray) -> np.ndarray:
    return stats.rankdata(values, method="average")


def _exact_u_distribution(ranks2: np.ndarray, n_x: int) -> dict:
    """Distribution of the doubled rank sum of ``n_x`` items drawn from ``ranks2``.

    Dynamic programming over items; state is (items chosen, doubled rank sum).
    Returns {doubled_sum: count}.
    """
    table = [dict() for _ in range(n_x + 1)]
    table[0][0] = 1
    for r in ranks2:
        for k in range(min(n_x, len(ranks2)) - 1, -1, -1):
            row = table[k]
            if not row:
                continue
            nxt = table[k + 1]
            for s, c in row.items():
                nxt[s + r] = nxt.get(s + r, 0) + c
    return table[n_x]


def mann_whitney_u(x, y, alternative: str = "two-sided", method: str = "auto") -> MannWhitneyResult:
    """Rank-sum test; ``u`` counts pairs with x > y (ties count one half).

    ``alternative="greater"`` tests whether x tends to exceed y. Exact
    enumeration (tie-aware) is used when both samples have at most 20 items,
    otherwise the tie-corrected normal approximation with continuity correction.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise MetricError("both samples must be non-empty")
    if alternative not in ("two-sided", "greater", "less"):
        raise MetricError(f"unknown alternative {alternative!r}")
    n1, n2 = x.size, y.size
    pooled = np.concatenate([x, y])
    ranks = _midranks(pooled)
    r1 = ranks[:n1].sum()
    u = float(r1 - n1 * (n1 + 1) / 2)
    if method == "auto":
        method = "exact" if max(n1, n2) <= EXACT_MAX_N else "normal"

    if method == "exact":
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        dist = _exact_u_distribution(ranks2, n1)
        total = sum(dist.values())
        s_obs = int(np.rint(2 * r1))
        le = sum(c for s, c in dist.items() if s <= s_obs) / total
        ge = sum(c for s, c in dist.items() if s >= s_obs) / total
    elif method == "normal":
        n = n1 + n2
        _, counts = np.unique(pooled, return_counts=True)
        tie = float(np.sum(counts**3 - counts))
        var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1)))
        mean = n1 * n2 / 2.0
        if var <= 0:
            le = ge = 1.0
        else:
            sd = math.sqrt(var)
            le = float(stats.norm.cdf((u - mean + 0.5) / sd))
            ge = float(stats.norm.sf((u - mean - 0.5) / sd))
    else:
        raise MetricError(f"unknown method {method!r}")

    if alternative == "greater":
        p = ge
    elif alternative == "less":
        p = le
    else:
        p = 2 * min(le, ge)
    return MannWhitneyResult(u, float(min(1.0, max(0.0, p))), method, n1, n2)


# ------------------------------------------------------------------ slice selection and ROI


def median_ssim_slice(ssim_a, ssim_b, ids=None, decimals: int = 3):
    """Slice whose SSIM matches the median (to ``decimals``) for both methods.

    Without a joint match, the slice minimising the summed absolute distance to
    the two medians is returned (earliest on ties).
    """
    a = np.asarray(ssim_a, dtype=np.float64)
    b = np.asarray(ssim_b, dtype=np.float64)
    if a.size == 0 or a.shape != b.shape:
        raise MetricError("need equal-length, non-empty SSIM lists")
    ids = list(range(a.size)) if ids is None else list(ids)
    med_a, med_b = np.median(a), np.median(b)
    ra, rb = round(float(med_a), decimals), round(float(med_b), decimals)
    for i in range(a.size):
        if round(float(a[i]), decimals) == ra and round(float(b[i]), decimals) == rb:
            return ids[i]
    return ids[int(np.argmin(np.abs(a - med_a) + np.abs(b - med_b)))]


def patch_slices(center, shape, size: int = 32) -> tuple[slice, slice]:
    """``size``-square window around ``center`` (row, col), shifted to stay inside ``shape``."""
    out = []
    for c, n in zip(center, shape):
        if size > n:
            raise MetricError(f"patch of {size} does not fit in axis of {n}")
        start = int(round(c - size / 2))
        start = min(max(start, 0), n - size)
        out.append(slice(start, start + size))
    return tuple(out)


def roi_metrics(pred, gt, mask=None, center=None, patch: int = 32, mu_water: float = 0.2, data_range: float = 1.0) -> dict:
    """SSIM and RMSE on a masked bounding-box crop or on a square patch."""
    pred, gt = _pair(pred, gt)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise MetricError(f"mask shape {mask.shape} != image shape {pred.shape}")
        if not mask.any():
            raise MetricError("ROI mask is empty")
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        sl = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
        m = mask[sl]
        p, g = np.where(m, pred[sl], 0.0), np.where(m, gt[sl], 0.0)
    elif center is not None:
        sl = patch_slices(center, pred.shape, patch)
        p, g = pred[sl], gt[sl]
    else:
        raise MetricError("roi_metrics needs a mask or a patch centre")
    return {
        "ssim": ssim(p, g, data_range),
        "rmse_hu": rmse_hu(p, g, mu_water),
        "rows": [sl[0].start, sl[0].stop],
        "cols": [sl[1].start, sl[1].stop],
    }


# ------------------------------------------------------------------ report


@dataclass
class MetricsReport:
    """Per-item SSIM/RMSE for several methods, with summaries and pairwise tests."""

    items: list = field(default_factory=list)
    ssim: dict = field(default_factory=dict)
    rmse_hu: dict = field(default_factory=dict)

    def add(self, method: str, item, pred, gt, mu_water: float = 0.2, scale: float = 1.0):
        """``scale`` divides both images before SSIM (normalised intensity scale)."""
        if item not in self.items:
            self.items.append(item)
        self.ssim.setdefault(method, []).append(ssim(np.asarray(pred) / scale, np.asarray(gt) / scale))
        self.rmse_hu.setdefault(method, []).append(rmse_hu(pred, gt, mu_water))

    @property
    def methods(self) -> list:
        return list(self.ssim)

    def summary(self) -> dict:
        out = {}
        for m in self.methods:
            s = np.asarray(self.ssim[m])
            r = np.asarray(self.rmse_hu[m])
            out[m] = {
                "n": int(s.size),
                "ssim_mean": float(s.mean()),
                "ssim_std": float(s.std()),
                "rmse_hu_mean": float(r.mean()),
                "rmse_hu_std": float(r.std()),
            }
        return out

    def pairwise_pvalues(self) -> dict:
        out = {}
        ms = self.methods
        for i, a in enumerate(ms):
            for b in ms[i + 1 :]:
                res = mann_whitney_u(self.ssim[a], self.ssim[b])
                out[f"{a} vs {b}"] = {"u": res.u, "p": res.p, "significant": res.p < ALPHA, "n_x": res.n_x, "n_y": res.n_y}
        return out

    def to_json(self) -> dict:
        return {"summary": self.summary(), "ssim_pvalues": self.pairwise_pvalues(), "alpha": ALPHA}

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item", "method", "ssim", "rmse_hu"])
            for m in self.methods:
                for item, s, r in zip(self.items, self.ssim[m], self.rmse_hu[m]):
                    w.writerow([item, m, repr(s), repr(r)])
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["item"] not in rep.items:
                    rep.items.append(row["item"])
                rep.ssim.setdefault(row["method"], []).append(float(row["ssim"]))
                rep.rmse_hu.setdefault(row["method"], []).append(float(row["rmse_hu"]))
        return rep
