"""Handcrafted texture descriptors (LPQ, GLCM/Haralick) and a softmax-regression classifier."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LPQ_BINS = 256
HARALICK_NAMES = (
    "asm", "contrast", "correlation", "sum_of_squares_variance", "inverse_difference_moment",
    "sum_average", "sum_variance", "sum_entropy", "entropy", "difference_variance",
    "difference_entropy", "info_measure_corr_1", "info_measure_corr_2",
)


# ------------------------------------------------------------------ LPQ


@dataclass
class LpqConfig:
    window: int = 9
    freq: float | None = None  # defaults to 1 / window
    whiten: bool = False
    rho: float = 0.9  # pixel correlation used by the whitening model

    def validate(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"LPQ window must be odd and >= 3, got {self.window}")
        return self

    @property
    def a(self):
        return 1.0 / self.window if self.freq is None else self.freq


def _lpq_filters(cfg):
    r = (cfg.window - 1) // 2
    x = np.arange(-r, r + 1)
    w0 = np.ones_like(x, dtype=np.complex128)
    w1 = np.exp(-2j * np.pi * cfg.a * x)
    w2 = np.conj(w1)
    # (row filter, column filter) for frequencies (a,0), (0,a), (a,a), (a,-a); u runs along columns
    return [(w0, w1), (w1, w0), (w1, w1), (w2, w1)]


def _separable_valid(img, col_filter, row_filter):
    m = len(col_filter)
    tmp = sliding_window_view(img, m, axis=1) @ col_filter
    return np.einsum("ijk,k->ij", sliding_window_view(tmp, m, axis=0), row_filter)


def _whitening_matrix(cfg):
    m = cfg.window
    yy, xx = np.mgrid[:m, :m]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(float)
    dist = np.sqrt(((pos[:, None] - pos[None]) ** 2).sum(-1))
    cov = cfg.rho ** dist
    rows = []
    for rf, cf in _lpq_filters(cfg):
        q = np.outer(rf, cf).ravel()
        rows += [q.real, q.imag]
    basis = np.array(rows)
    d = basis @ cov @ basis.T
    # tiny diagonal offsets keep the singular vectors in a stable order
    scale = np.diag(1 + np.arange(8)[::-1] * 1e-6)
    _, _, vt = np.linalg.svd(scale @ d @ scale)
    return vt


def lpq_codes(image, cfg=None):
    """8-bit phase codes for every valid pixel (extent (H-M+1) x (W-M+1))."""
    cfg = (cfg or LpqConfig()).validate()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < cfg.window:
        raise ValueError(f"image {img.shape} is smaller than the LPQ window {cfg.window}")
    # zero-mean input makes the codes exactly offset invariant; coefficients vanish analytically
    # for constant regions, so values within rounding noise are snapped to 0
    img = img - img.mean()
    parts = []
    for rf, cf in _lpq_filters(cfg):
        resp = _separable_valid(img, cf, rf)
        parts += [resp.real, resp.imag]
    resp = np.stack(parts)
    if cfg.whiten:
        resp = np.tensordot(_whitening_matrix(cfg), resp, axes=1)
    tol = 1e-9 * (np.abs(img).max() + 1.0) * cfg.window ** 2
    resp[np.abs(resp) < tol] = 0.0
    bits = (resp >= 0).astype(np.int64)
    weights = (1 << np.arange(8))[:, None, None]
    return (bits * weights).sum(axis=0)


def lpq_descriptor(image, cfg=None):
    codes = lpq_codes(image, cfg)
    hist = np.bincount(codes.ravel(), minlength=LPQ_BINS).astype(np.float64)
    return hist / hist.sum()


# ------------------------------------------------------------------ GLCM / Haralick


@dataclass
class GlcmConfig:
    levels: int = 16
    distance: int = 1
    angles: tuple = (0, 45, 90, 135)

    def validate(self):
        if self.levels < 2:
            raise ValueError("need at least 2 gray levels")
        if self.distance < 1:
            raise ValueError("distance must be >= 1")
        bad = set(self.angles) - set(_OFFSETS)
        if bad:
            raise ValueError(f"unsupported angles {sorted(bad)}")
        return self


# (row, col) displacement per unit distance
_OFFSETS = {0: (0, 1), 45: (-1, 1), 90: (-1, 0), 135: (-1, -1)}


def quantize(image, levels):
    """Uniform binning over the observed sample range; constant images map to level 0."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.intp)
    q = np.floor((img - lo) / (hi - lo) * levels).astype(np.intp)
    return np.minimum(q, levels - 1)


def glcm(image, cfg=None):
    """Symmetric, normalised co-occurrence matrix averaged over the configured angles."""
    cfg = (cfg or GlcmConfig()).validate()
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("empty image")
    if min(img.shape) <= cfg.distance:
        raise ValueError(f"image {img.shape} too small for distance {cfg.distance}")
    q = quantize(img, cfg.levels)
    h, w = q.shape
    L = cfg.levels
    total = np.zeros((L, L))
    for angle in cfg.angles:
        dr, dc = (cfg.distance * s for s in _OFFSETS[angle])
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        a = q[r0:r1, c0:c1].ravel()
        b = q[r0 + dr:r1 + dr, c0 + dc:c1 + dc].ravel()
        m = np.bincount(a * L + b, minlength=L * L).reshape(L, L).astype(np.float64)
        m += m.T
        total += m / m.sum()
    return total / len(cfg.angles)


def _entropy(p):
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum()) + 0.0  # + 0.0 turns -0.0 into 0.0


def haralick_features(p):
    """The 13 Haralick statistics, in the order of ``HARALICK_NAMES`` (log base 2)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("GLCM must be square")
    if (p < 0).any() or abs(p.sum() - 1) > 1e-6:
        raise ValueError("GLCM must be non-negative and sum to 1")
    L = p.shape[0]
    i, j = np.indices((L, L))
    px, py = p.sum(axis=1), p.sum(axis=0)
    lv = np.arange(L)
    mux, muy = (lv * px).sum(), (lv * py).sum()
    sdx = np.sqrt(((lv - mux) ** 2 * px).sum())
    sdy = np.sqrt(((lv - muy) ** 2 * py).sum())

    p_sum = np.bincount((i + j).ravel(), weights=p.ravel(), minlength=2 * L - 1)
    p_diff = np.bincount(np.abs(i - j).ravel(), weights=p.ravel(), minlength=L)
    ks = np.arange(2 * L - 1)
    kd = np.arange(L)

    asm = (p ** 2).sum()
    contrast = (kd ** 2 * p_diff).sum()
    if sdx * sdy > 1e-12:
        corr = ((i * j * p).sum() - mux * muy) / (sdx * sdy)
        corr = float(np.clip(corr, -1, 1))
    else:
        corr = 1.0
    ss_var = ((i - mux) ** 2 * p).sum()
    idm = (p / (1 + (i - j) ** 2)).sum()
    sum_avg = (ks * p_sum).sum()
    sum_var = ((ks - sum_avg) ** 2 * p_sum).sum()
    sum_ent = _entropy(p_sum)
    ent = _entropy(p)
    diff_mean = (kd * p_diff).sum()
    diff_var = ((kd - diff_mean) ** 2 * p_diff).sum()
    diff_ent = _entropy(p_diff)

    hx, hy = _entropy(px), _entropy(py)
    outer = np.outer(px, py)
    nz = (p > 0) & (outer > 0)
    hxy1 = float(-(p[nz] * np.log2(outer[nz])).sum())
    onz = outer > 0
    hxy2 = float(-(outer[onz] * np.log2(outer[onz])).sum())
    denom = max(hx, hy)
    imc1 = (ent - hxy1) / denom if denom > 0 else 0.0
    imc2 = float(np.sqrt(max(0.0, 1 - np.exp(-2 * (hxy2 - ent)))))

    return np.array([asm, contrast, corr, ss_var, idm, sum_avg, sum_var, sum_ent,
                     ent, diff_var, diff_ent, imc1, imc2], dtype=np.float64)


# ------------------------------------------------------------------ feature vectors


@dataclass
class FeatureVector:
    values: np.ndarray
    spans: dict = field(default_factory=dict)  # descriptor name -> (start, stop)


def feature_names():
    return [f"lpq_{k}" for k in range(LPQ_BINS)] + [f"hd_{n}" for n in HARALICK_NAMES]


def extract_features(patch, lpq=None, glcm_cfg=None):
    h = lpq_descriptor(patch, lpq)
    hd = haralick_features(glcm(patch, glcm_cfg))
    return FeatureVector(np.concatenate([h, hd]), {"lpq": (0, LPQ_BINS), "haralick": (LPQ_BINS, LPQ_BINS + 13)})


def write_feature_csv(path, rows, labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(feature_names() + ["label"])
        for vec, label in zip(rows, labels):
            values = vec.values if isinstance(vec, FeatureVector) else vec
            writer.writerow([repr(float(v)) for v in values] + [label])


def read_feature_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    x = np.array([[float(v) for v in r[:-1]] for r in rows])
    return x, [r[-1] for r in rows]


# ------------------------------------------------------------------ linear classifier


@dataclass
class LinearConfig:
    lr: float = 0.5
    epochs: int = 500
    l2: float = 1e-3


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    history: list = field(default_factory=list)

    def scores(self, features):
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return x @ self.weights + self.bias


def _as_matrix(features):
    rows = [f.values if isinstance(f, FeatureVector) else np.asarray(f) for f in features]
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"feature lengths differ: {sorted(lengths)}")
    return np.array(rows, dtype=np.float64)


def train_linear(features, labels, config=None, n_classes=None):
    """Multinomial logistic regression by full-batch gradient descent with an L2 penalty."""
    config = config or LinearConfig()
    x = _as_matrix(features)
    y = np.asarray(labels, dtype=np.intp)
    k = int(n_classes or y.max() + 1)
    if len(np.unique(y)) < 2:
        raise ValueError("training set holds a single class")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    xs = (x - mean) / std
    n, d = xs.shape
    w = np.zeros((d, k))
    b = np.zeros(k)
    onehot = np.eye(k)[y]
    history = []
    for _ in range(config.epochs):
        z = xs @ w + b
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(onehot * logp).sum() / n + 0.5 * config.l2 * (w ** 2).sum()
        history.append(float(loss))
        g = (np.exp(logp) - onehot) / n
        w -= config.lr * (xs.T @ g + config.l2 * w)
        b -= config.lr * g.sum(axis=0)
    return LinearModel(w, b, mean, std, history)


def predict_linear(model, features):
    """Argmax class; ties go to the lowest class index."""
    return np.argmax(model.scores(_as_matrix(features)), axis=1)
