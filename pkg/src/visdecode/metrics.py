"""Reconstruction evaluation metrics.

Low-level (PixCorr, SSIM), high-level (feature two-way identification,
correlation distance, Frechet distance), semantic (n-way top-1), and the
coefficient-matrix / permutation-test machinery used for zero-shot
evaluation, plus the mean cosine distance between scenario texts and
training image features.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


class MetricError(ValueError):
    pass


@dataclass
class CoefficientMatrix:
    """Pearson correlations, rows = reconstructed-image embeddings,
    columns = ground-truth text embeddings."""

    values: np.ndarray
    row_ids: list[str]
    col_ids: list[str]


@dataclass
class PermutationResult:
    observed: float
    null_samples: np.ndarray
    p_value: float


@dataclass
class MetricReport:
    entries: dict = field(default_factory=dict)
    config_hash: str = ""

    def add(self, name: str, value: float, chance: float | None = None,
            n_trials: int | None = None) -> None:
        if not np.isfinite(value):
            raise MetricError(f"non-finite metric value for {name}")
        self.entries[name] = {"value": float(value)}
        if chance is not None:
            self.entries[name]["chance"] = float(chance)
        if n_trials is not None:
            self.entries[name]["n_trials"] = int(n_trials)

    def to_json(self) -> str:
        return json.dumps({"config_hash": self.config_hash,
                           "metrics": self.entries}, indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "MetricReport":
        raw = json.loads(Path(path).read_text())
        return cls(entries=raw["metrics"], config_hash=raw["config_hash"])


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("Pearson correlation undefined for constant input")
    return float(a @ b / (na * nb))


def pixcorr(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation over flattened pixels."""
    if a.shape != b.shape:
        raise MetricError("image shapes differ")
    return _pearson(a, b)


def _to_gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=2) if img.ndim == 3 else img


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         sigma: float = 1.5, truncate: float = 2.0, data_range: float = 1.0) -> float:
    """Mean local SSIM on grayscale images with a 7x7 Gaussian window."""
    if a.shape != b.shape:
        raise MetricError("image shapes differ")
    x = _to_gray(np.asarray(a, dtype=np.float64))
    y = _to_gray(np.asarray(b, dtype=np.float64))
    radius = int(truncate * sigma + 0.5)
    if min(x.shape) < 2 * radius + 1:
        raise MetricError("image smaller than SSIM window")

    def blur(z):
        return gaussian_filter(z, sigma=sigma, truncate=truncate, mode="reflect")

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def coefficient_matrix(image_embeds: np.ndarray, text_embeds: np.ndarray,
                       row_ids=None, col_ids=None) -> CoefficientMatrix:
    """Pearson product-moment correlation of every (image, text) row pair."""
    image_embeds = np.asarray(image_embeds, dtype=np.float64)
    text_embeds = np.asarray(text_embeds, dtype=np.float64)
    if image_embeds.shape[0] < 2:
        raise MetricError("need at least 2 rows")
    a = image_embeds - image_embeds.mean(axis=1, keepdims=True)
    b = text_embeds - text_embeds.mean(axis=1, keepdims=True)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise MetricError("constant embedding row")
    values = (a / na[:, None]) @ (b / nb[:, None]).T
    n, m = values.shape
    return CoefficientMatrix(
        values=values,
        row_ids=list(row_ids) if row_ids is not None else [str(i) for i in range(n)],
        col_ids=list(col_ids) if col_ids is not None else [str(j) for j in range(m)],
    )


def two_way_identification(m: CoefficientMatrix) -> float:
    """Mean over rows of the fraction of off-diagonal entries strictly below
    the diagonal (ties count as failures)."""
    v = m.values
    n = v.shape[0]
    if n < 2 or v.shape[1] != n:
        raise MetricError("need a square matrix with n >= 2")
    diag = np.diag(v)
    less = (v < diag[:, None]).sum(axis=1)  # diagonal never < itself
    return float(np.mean(less / (n - 1)))


def feature_two_way(recon_feats: np.ndarray, truth_feats: np.ndarray) -> float:
    """Two-way identification accuracy over feature rows."""
    return two_way_identification(coefficient_matrix(recon_feats, truth_feats))


def correlation_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Mean over rows of 1 - Pearson correlation between paired rows."""
    feats_a, feats_b = np.asarray(feats_a), np.asarray(feats_b)
    if feats_a.shape != feats_b.shape:
        raise MetricError("feature shapes differ")
    return float(np.mean([1.0 - _pearson(a, b) for a, b in zip(feats_a, feats_b)]))


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray,
                     eps: float = 1e-6) -> float:
    """Frechet distance between the Gaussian moments of two feature sets.

    The matrix square root is taken via eigendecomposition of the
    symmetrized product; covariances are regularized by +eps*I.
    """
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    d = feats_a.shape[1]
    cov_a = np.cov(feats_a, rowvar=False).reshape(d, d) + eps * np.eye(d)
    cov_b = np.cov(feats_b, rowvar=False).reshape(d, d) + eps * np.eye(d)

    # sqrt(cov_a @ cov_b) has the same trace as sqrt(A^1/2 B A^1/2), which is
    # symmetric PSD and safe to eigendecompose.
    wa, va = np.linalg.eigh(cov_a)
    wa = np.clip(wa, 0, None)
    sqrt_a = (va * np.sqrt(wa)) @ va.T
    inner = sqrt_a @ cov_b @ sqrt_a
    wi = np.linalg.eigvalsh((inner + inner.T) / 2)
    if np.min(wi) < -1e-8 * max(1.0, np.max(np.abs(wi))):
        raise MetricError("product matrix not PSD after regularization")
    tr_sqrt = np.sum(np.sqrt(np.clip(wi, 0, None)))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)


def n_way_top1(classifier, recon_images, truth_images, n_way: int = 50,
               n_trials: int = 1000, rng: np.random.Generator | None = None,
               n_classes: int | None = None) -> float:
    """Semantic n-way top-1 accuracy.

    Per trial a reconstruction is drawn, n_way-1 distractor classes plus the
    truth image's class are kept, and the trial succeeds iff the
    reconstruction's top class within that candidate set equals the truth
    image's top class within the same set.  `classifier(image)` must return
    a score vector over all classes.
    """
    rng = rng or np.random.default_rng(0)
    recon_scores = np.asarray([classifier(img) for img in recon_images])
    truth_scores = np.asarray([classifier(img) for img in truth_images])
    total_classes = n_classes or recon_scores.shape[1]
    if total_classes < n_way:
        raise MetricError(f"need at least {n_way} classes, have {total_classes}")
    n_items = recon_scores.shape[0]

    hits = 0
    for _ in range(n_trials):
        i = int(rng.integers(n_items))
        truth_class = int(np.argmax(truth_scores[i]))
        others = [c for c in range(total_classes) if c != truth_class]
        distractors = rng.choice(others, size=n_way - 1, replace=False)
        candidates = np.concatenate([[truth_class], distractors])
        recon_top = candidates[np.argmax(recon_scores[i][candidates])]
        truth_top = candidates[np.argmax(truth_scores[i][candidates])]
        hits += int(recon_top == truth_top)
    return hits / n_trials


def permutation_test(m: CoefficientMatrix, statistic=two_way_identification,
                     n_perm: int = 5000,
                     rng: np.random.Generator | None = None) -> PermutationResult:
    """Permutation test of a coefficient-matrix statistic.

    The null is built by permuting the row (image-embedding) order against
    the fixed column order; the p-value uses the add-one convention
    p = (1 + #{null >= observed}) / (n_perm + 1).
    """
    if m.values.shape[0] < 3:
        raise MetricError("need at least 3 rows for a permutation test")
    if n_perm < 100:
        warnings.warn("n_perm < 100 gives a very coarse p-value")
    rng = rng or np.random.default_rng(0)
    observed = statistic(m)
    null = np.empty(n_perm)
    for k in range(n_perm):
        perm = rng.permutation(m.values.shape[0])
        null[k] = statistic(CoefficientMatrix(values=m.values[perm],
                                              row_ids=m.row_ids, col_ids=m.col_ids))
    p = (1 + int(np.sum(null >= observed))) / (n_perm + 1)
    return PermutationResult(observed=float(observed), null_samples=null,
                             p_value=float(p))


def mean_cosine_distance(scenario_vectors: np.ndarray,
                         image_vectors: np.ndarray) -> float:
    """Average of 1 - cosine(u, v) over all (scenario, image) vector pairs."""
    u = np.asarray(scenario_vectors, dtype=np.float64)
    v = np.asarray(image_vectors, dtype=np.float64)
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise MetricError("zero-norm vector")
    cos = (u / nu[:, None]) @ (v / nv[:, None]).T
    return float(np.mean(1.0 - cos))
