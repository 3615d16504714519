"""Post-hoc analyses over a trained decoding pipeline.

K-means clustering of image latents with elbow diagnostics, gradient-based
parcel saliency with top-k region extraction, network-masking ablation
sweeps, and the zero-shot imagination evaluation with its scale analysis.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .metrics import (CoefficientMatrix, MetricError, PermutationResult,
                      coefficient_matrix, mean_cosine_distance, permutation_test,
                      two_way_identification)
from .preproc import NetworkMap


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray        # [k, d]
    assignments: np.ndarray      # [n]
    ssd: float


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((x - c) ** 2, axis=1) for c in centroids], axis=0)
        total = d2.sum()
        if total <= 0:
            centroids.append(x[rng.integers(len(x))])
        else:
            centroids.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centroids)


def kmeans_fit(latents: np.ndarray, k: int, seed: int = 42,
               max_iter: int = 300) -> ClusterModel:
    """Lloyd iterations with k-means++ seeding until assignment fixpoint.

    Empty clusters are re-seeded from the point farthest from its centroid.
    The SSD is asserted non-increasing every iteration.
    """
    x = np.asarray(latents, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise AnalysisError(f"need n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)
    prev_ssd = np.inf
    assignments = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = ((x[:, None] - centroids[None]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = x[new_assign == c]
            if len(members) == 0:
                farthest = int(np.argmax(d2[np.arange(n), new_assign]))
                centroids[c] = x[farthest]
                new_assign[farthest] = c
            else:
                centroids[c] = members.mean(axis=0)
        ssd = float(((x - centroids[new_assign]) ** 2).sum())
        assert ssd <= prev_ssd + 1e-9, "k-means SSD increased"
        if np.array_equal(new_assign, assignments) and np.isfinite(prev_ssd):
            break
        assignments, prev_ssd = new_assign, ssd
    return ClusterModel(k=k, centroids=centroids, assignments=assignments, ssd=ssd)


def elbow_curve(latents: np.ndarray, k_range, seed: int = 42,
                n_restarts: int = 5) -> list[tuple[int, float]]:
    """Best-of-restarts SSD per k; the curve is forced monotone by carrying
    the best seen SSD forward."""
    curve = []
    best_so_far = np.inf
    for k in sorted(k_range):
        ssd = min(kmeans_fit(latents, k, seed=seed + r).ssd
                  for r in range(n_restarts))
        best_so_far = min(best_so_far, ssd)
        curve.append((k, best_so_far))
    return curve


def save_cluster_assignments(path, model: ClusterModel, trial_ids) -> None:
    lines = ["trial_id\tcluster\n"]
    lines += [f"{tid}\t{c}\n" for tid, c in zip(trial_ids, model.assignments)]
    Path(path).write_text("".join(lines))


def cluster_label_frequencies(model: ClusterModel,
                              token_batch: list[list[str]]) -> list[dict]:
    """Word-frequency table per cluster (stands in for the word clouds)."""
    tables = []
    for c in range(model.k):
        freq: dict[str, int] = {}
        for i in np.flatnonzero(model.assignments == c):
            for tok in token_batch[i]:
                freq[tok] = freq.get(tok, 0) + 1
        tables.append(dict(sorted(freq.items(), key=lambda kv: -kv[1])))
    return tables


# ---------------------------------------------------------------------------
# Saliency
# ---------------------------------------------------------------------------

@dataclass
class SaliencyMap:
    importance: np.ndarray       # [P], nonnegative
    target: str
    subjects_averaged: int


def gradcam_saliency(encode_fn, clip_groups: list[np.ndarray], target_fn,
                     target_name: str = "decoding") -> SaliencyMap:
    """Input-level gradient saliency.

    For each group (one per subject), the mean absolute gradient of the
    scalar target with respect to every input parcel is accumulated over
    clips and TRs; group maps are then averaged.  `encode_fn` maps a
    [B, L, P] tensor to model outputs, `target_fn` reduces those outputs to
    a scalar per batch element.
    """
    maps = []
    for clips in clip_groups:
        x = torch.as_tensor(np.asarray(clips), dtype=torch.float32)
        x.requires_grad_(True)
        out = encode_fn(x)
        score = target_fn(out).sum()
        score.backward()
        grad = x.grad.detach().numpy()
        maps.append(np.abs(grad).mean(axis=(0, 1)))
    importance = np.mean(maps, axis=0)
    if np.all(importance == 0):
        warnings.warn("zero gradient everywhere; saliency map is all-zero")
    return SaliencyMap(importance=importance, target=target_name,
                       subjects_averaged=len(clip_groups))


def top_k_regions(saliency: SaliencyMap, network_map: NetworkMap,
                  k: int = 20) -> list[tuple[int, str, float]]:
    """Top-k parcels by importance (ties by parcel index), with labels."""
    imp = saliency.importance
    if k > len(imp):
        raise AnalysisError("k exceeds parcel count")
    order = np.lexsort((np.arange(len(imp)), -imp))[:k]
    return [(int(p), network_map.labels[network_map.assignment[p]],
             float(imp[p])) for p in order]


def network_histogram(regions: list[tuple[int, str, float]]) -> dict[str, int]:
    hist: dict[str, int] = {}
    for _, label, _ in regions:
        hist[label] = hist.get(label, 0) + 1
    return hist


def save_saliency_csv(path, saliency: SaliencyMap, network_map: NetworkMap) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parcel", "network", "importance"])
        for p, imp in enumerate(saliency.importance):
            writer.writerow([p, network_map.labels[network_map.assignment[p]],
                             f"{imp:.8g}"])


# ---------------------------------------------------------------------------
# Network ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationResult:
    masked_network: str
    semantic_accuracy: float
    full_brain_accuracy: float
    deltas: dict


def ablate_network(pipeline, trials, network_label: str,
                   full_brain_accuracy: float | None = None,
                   seed: int = 0) -> AblationResult:
    """Re-evaluate semantic accuracy with one network zeroed end to end.

    `pipeline.semantic_accuracy(trials, masked_networks=..., seed=...)` is
    the evaluation contract; the mask is applied to every clip before
    encoding and reconstruction.
    """
    if full_brain_accuracy is None:
        full_brain_accuracy = pipeline.semantic_accuracy(trials, seed=seed)
    masked = pipeline.semantic_accuracy(trials, masked_networks=[network_label],
                                        seed=seed)
    return AblationResult(
        masked_network=network_label,
        semantic_accuracy=masked,
        full_brain_accuracy=full_brain_accuracy,
        deltas={"semantic": masked - full_brain_accuracy},
    )


def save_ablation_csv(path, results: list[AblationResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["masked_network", "semantic_accuracy",
                         "full_brain_accuracy", "delta"])
        for r in results:
            writer.writerow([r.masked_network, r.semantic_accuracy,
                             r.full_brain_accuracy, r.deltas["semantic"]])


# ---------------------------------------------------------------------------
# Zero-shot evaluation and scale analysis
# ---------------------------------------------------------------------------

@dataclass
class ScaleAnalysisResult:
    per_scenario: list[dict]      # scenario_id, accuracy, mean_cosine_distance
    rank_correlation: float
    p_value: float
    degenerate: bool = False


def _scenario_matrix(pipeline, scenarios) -> CoefficientMatrix:
    """Reconstruct each scenario from its repeat-averaged signal and
    correlate recon image embeddings against scenario text embeddings."""
    if len(scenarios) < 3:
        raise AnalysisError("need at least 3 scenarios")
    recon_embeds = []
    text_embeds = []
    for scn in scenarios:
        series = np.mean(scn.parcel_clips, axis=0)
        image = pipeline.reconstruct_series(series, scn.onset_tr)
        recon_embeds.append(pipeline.embed_image(image))
        text_embeds.append(pipeline.embed_text(scn.description_tokens))
    ids = [s.scenario_id for s in scenarios]
    return coefficient_matrix(np.array(recon_embeds), np.array(text_embeds),
                              row_ids=ids, col_ids=ids)


def zero_shot_eval(pipeline, scenarios, n_perm: int = 5000,
                   seed: int = 0) -> tuple[float, PermutationResult]:
    """Two-way identification of scenario reconstructions against their
    ground-truth texts, with a row-permutation significance test."""
    matrix = _scenario_matrix(pipeline, scenarios)
    accuracy = two_way_identification(matrix)
    perm = permutation_test(matrix, n_perm=n_perm,
                            rng=np.random.default_rng(seed))
    return accuracy, perm


def scale_analysis(pipeline, scenarios, train_image_latents: np.ndarray,
                   n_perm: int = 5000, seed: int = 0) -> ScaleAnalysisResult:
    """Correlate per-scenario decoding accuracy with the scenario's mean
    cosine distance to the training-image latents (Spearman, permutation p).
    """
    bands = {s.distance_band for s in scenarios}
    if len(scenarios) < 5 or not {"near", "far"} <= bands:
        raise AnalysisError("need >= 5 scenarios spanning near and far bands")
    matrix = _scenario_matrix(pipeline, scenarios)
    n = len(scenarios)
    diag = np.diag(matrix.values)
    accuracies = ((matrix.values < diag[:, None]).sum(axis=1)) / (n - 1)

    distances = np.array([
        mean_cosine_distance(pipeline.embed_text(s.description_tokens)[None],
                             train_image_latents)
        for s in scenarios])

    per_scenario = [
        {"scenario_id": s.scenario_id, "band": s.distance_band,
         "accuracy": float(a), "mean_cosine_distance": float(d)}
        for s, a, d in zip(scenarios, accuracies, distances)]

    if np.ptp(accuracies) == 0 or np.ptp(distances) == 0:
        return ScaleAnalysisResult(per_scenario=per_scenario,
                                   rank_correlation=float("nan"),
                                   p_value=float("nan"), degenerate=True)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = float(stats.spearmanr(distances, accuracies).statistic)
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    for i in range(n_perm):
        null[i] = stats.spearmanr(distances,
                                  rng.permutation(accuracies)).statistic
    # one-sided: evidence for a negative association
    p = (1 + int(np.sum(null <= rho))) / (n_perm + 1)
    return ScaleAnalysisResult(per_scenario=per_scenario,
                               rank_correlation=rho, p_value=float(p))
