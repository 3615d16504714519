"""Series conditioning and clip segmentation.

Raw parcel series are detrended, high-pass filtered with discrete-cosine
regressors, z-scored per parcel, then cut into fixed-length clips starting
one TR after stimulus onset to absorb the hemodynamic delay.  The module
also owns the synthetic parcel-to-network map used for masking ablations.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NETWORK_LABELS = (
    "visual",
    "somatomotor",
    "dorsal_attention",
    "ventral_attention",
    "limbic",
    "frontoparietal",
    "default_mode",
)

DEFAULT_DELAY = 1
DEFAULT_CLIP_LENGTH = 5


class PreprocError(ValueError):
    pass


@dataclass
class ParcelTimeSeries:
    data: np.ndarray          # [T, P]
    tr_seconds: float = 2.0
    subject_id: str = "sub00"


@dataclass
class BoldClip:
    data: np.ndarray          # [L, P]
    source_trial: str
    start_tr: int


@dataclass
class ParcellationAtlas:
    """Nonnegative voxel weights per parcel, rows normalized to sum 1."""

    weights: np.ndarray       # [P, n_voxels]
    parcel_names: list[str]

    def __post_init__(self):
        sums = self.weights.sum(axis=1)
        if np.any(self.weights < 0) or np.any(sums <= 0):
            raise PreprocError("atlas rows must be nonnegative with positive sum")
        self.weights = self.weights / sums[:, None]


@dataclass
class NetworkMap:
    assignment: np.ndarray    # [P] of indices into labels
    labels: tuple[str, ...] = NETWORK_LABELS

    def __post_init__(self):
        if len(self.labels) != 7 or any(not lab for lab in self.labels):
            raise PreprocError("expected exactly 7 nonempty network labels")

    def parcels_of(self, label: str) -> np.ndarray:
        if label not in self.labels:
            raise PreprocError(f"unknown network label {label!r}")
        return np.flatnonzero(self.assignment == self.labels.index(label))


def make_network_map(n_parcels: int, informative_set=()) -> NetworkMap:
    """Seven contiguous parcel bands; the visual band is widened when needed
    so it contains every informative parcel."""
    edges = np.linspace(0, n_parcels, 8).round().astype(int)
    assignment = np.zeros(n_parcels, dtype=int)
    for i in range(7):
        assignment[edges[i]:edges[i + 1]] = i
    if len(informative_set) > 0:
        lo, hi = min(informative_set), max(informative_set)
        if lo < edges[0] or hi >= edges[1]:
            # shift the visual band to cover the informative span
            assignment[lo:hi + 1] = 0
    return NetworkMap(assignment=assignment)


def parcellate(volume_series: np.ndarray, atlas: ParcellationAtlas,
               tr_seconds: float = 2.0, subject_id: str = "sub00") -> ParcelTimeSeries:
    """Project [T, n_voxels] volumes onto atlas parcels (weighted average)."""
    if volume_series.ndim != 2 or volume_series.shape[1] != atlas.weights.shape[1]:
        raise PreprocError(
            f"voxel count {volume_series.shape} does not match atlas "
            f"{atlas.weights.shape}")
    return ParcelTimeSeries(data=volume_series @ atlas.weights.T,
                            tr_seconds=tr_seconds, subject_id=subject_id)


def _dct_regressors(n: int, tr_seconds: float, cutoff_hz: float) -> np.ndarray:
    """DCT-II basis columns with frequency below the cutoff (SPM-style)."""
    order = int(np.floor(2.0 * n * tr_seconds * cutoff_hz))
    t = np.arange(n)
    cols = [np.cos(np.pi * (t + 0.5) * k / n) for k in range(1, order + 1)]
    return np.column_stack(cols) if cols else np.empty((n, 0))


def condition_series(series: ParcelTimeSeries,
                     highpass_cutoff_hz: float = 0.01) -> ParcelTimeSeries:
    """Detrend, high-pass via DCT regression, then z-score each parcel.

    Columns that are constant after detrending are emitted as zeros with a
    warning instead of NaN.
    """
    x = np.asarray(series.data, dtype=np.float64)
    n = x.shape[0]
    if n < 8:
        raise PreprocError("need at least 8 TRs to condition")

    # linear detrend + low-frequency DCT regressors in one regression
    t = np.arange(n)
    design = np.column_stack([np.ones(n), t - t.mean(),
                              _dct_regressors(n, series.tr_seconds, highpass_cutoff_hz)])
    beta, *_ = np.linalg.lstsq(design, x, rcond=None)
    resid = x - design @ beta

    std = resid.std(axis=0)
    flat = std < 1e-12
    if np.any(flat):
        warnings.warn(f"{int(flat.sum())} constant parcel column(s) set to zero")
    std_safe = np.where(flat, 1.0, std)
    out = (resid - resid.mean(axis=0)) / std_safe
    out[:, flat] = 0.0
    return ParcelTimeSeries(data=out, tr_seconds=series.tr_seconds,
                            subject_id=series.subject_id)


def segment_clips(series: ParcelTimeSeries, onsets: list[int],
                  delay: int = DEFAULT_DELAY, length: int = DEFAULT_CLIP_LENGTH,
                  trial_ids: list[str] | None = None) -> list[BoldClip]:
    """Cut [length]-TR clips starting delay TRs after each onset."""
    n = series.data.shape[0]
    ids = trial_ids or [f"clip-{i}" for i in range(len(onsets))]
    clips = []
    for onset, tid in zip(onsets, ids):
        start = onset + delay
        if onset < 0 or start + length > n:
            raise PreprocError(f"onset {onset} out of range for trial {tid}")
        clips.append(BoldClip(data=series.data[start:start + length].copy(),
                              source_trial=tid, start_tr=start))
    return clips


def apply_network_mask(clip: BoldClip, network_map: NetworkMap,
                       masked_networks) -> BoldClip:
    """Zero every parcel column belonging to a masked network."""
    data = clip.data.copy()
    for label in masked_networks:
        data[:, network_map.parcels_of(label)] = 0.0
    return BoldClip(data=data, source_trial=clip.source_trial,
                    start_tr=clip.start_tr)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_clips(root: str | Path, clips: list[BoldClip], meta: dict | None = None) -> None:
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    manifest = {"clips": [], "meta": meta or {}}
    for c in clips:
        c.data.astype("<f4").tofile(root / "clips" / f"{c.source_trial}.f32")
        manifest["clips"].append({
            "trial_id": c.source_trial,
            "start_tr": c.start_tr,
            "shape": list(c.data.shape),
        })
    (root / "clip_manifest.json").write_text(json.dumps(manifest, indent=1))


def load_clips(root: str | Path) -> list[BoldClip]:
    root = Path(root)
    manifest = json.loads((root / "clip_manifest.json").read_text())
    clips = []
    for entry in manifest["clips"]:
        data = np.fromfile(root / "clips" / f"{entry['trial_id']}.f32",
                           dtype="<f4").astype(np.float64).reshape(entry["shape"])
        clips.append(BoldClip(data=data, source_trial=entry["trial_id"],
                              start_tr=entry["start_tr"]))
    return clips


def save_network_map(path: str | Path, network_map: NetworkMap) -> None:
    lines = ["parcel_index\tnetwork_label\n"]
    for p, idx in enumerate(network_map.assignment):
        lines.append(f"{p}\t{network_map.labels[idx]}\n")
    Path(path).write_text("".join(lines))


def load_network_map(path: str | Path) -> NetworkMap:
    rows = Path(path).read_text().splitlines()[1:]
    assignment = np.array([NETWORK_LABELS.index(r.split("\t")[1]) for r in rows])
    return NetworkMap(assignment=assignment)
