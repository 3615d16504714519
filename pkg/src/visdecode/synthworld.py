"""Synthetic generative world with known informative parcels.

Every trial's parcel time series is produced by a fixed linear mixing of a
class latent vector into a small "informative" subset of parcels, plus
additive Gaussian noise.  Because the ground truth is known, downstream
claims (decoding accuracy, saliency localization, ablation causality) can
be checked against construction rather than against irreproducible
recordings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SHAPE = (32, 32, 3)

# Word pool used to build class label texts.  Large enough that every class
# in a desk-scale world gets its own words; shared words across classes would
# couple their text embeddings and blur the familiarity axis.
_WORDS = [
    "dog", "cat", "tree", "river", "house", "car", "bird", "mountain",
    "chair", "lamp", "boat", "cloud", "flower", "road", "window", "stone",
    "field", "tower", "bridge", "garden", "horse", "train", "beach", "forest",
    "cup", "book", "clock", "mirror", "door", "fence", "hill", "lake",
    "apple", "barn", "candle", "desk", "engine", "feather", "glove", "hat",
    "island", "jar", "kite", "ladder", "meadow", "nest", "ocean", "piano",
    "quilt", "rope", "sail", "tent", "umbrella", "valley", "wheel", "xylophone",
    "yarn", "zebra", "anchor", "bell", "cactus", "drum", "easel", "fountain",
    "gate", "hammer", "igloo", "jungle", "kettle", "lantern", "mask", "needle",
    "orchard", "pond", "quarry", "rocket", "shovel", "trail", "urn", "violin",
    "wagon", "axe", "basket", "canyon", "dune", "ember", "flag", "grove",
    "harbor", "inlet", "jetty", "knoll", "lagoon", "marsh", "notch", "oasis",
    "pier", "quay", "ridge", "spring", "thicket", "upland", "vine", "waterfall",
]


class WorldError(ValueError):
    """Raised when a world specification cannot be satisfied."""


@dataclass
class WorldSpec:
    """Declarative description of the synthetic world."""

    n_parcels: int = 1024
    n_classes: int = 50
    latent_dim: int = 768
    informative_set: tuple[int, ...] = ()
    noise_sigma: float = 0.1
    seed: int = 42
    mixing_scale: float = 1.0

    def validate(self) -> None:
        if len(self.informative_set) == 0:
            raise WorldError("informative_set must be non-empty")
        if self.n_classes < 2:
            raise WorldError("need at least 2 classes")
        if self.noise_sigma < 0:
            raise WorldError("noise_sigma must be >= 0")
        idx = np.asarray(self.informative_set)
        if not np.all(np.diff(idx) > 0):
            raise WorldError("informative_set must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.n_parcels:
            raise WorldError("informative_set indices out of range")


@dataclass
class SyntheticTrial:
    trial_id: str
    class_id: int
    image: np.ndarray            # [H, W, C] in [0, 1]
    label_text: list[str]
    parcel_series: np.ndarray    # [T, n_parcels]
    onset_tr: int
    subject_id: str


@dataclass
class ScenarioSpec:
    scenario_id: str
    description_tokens: list[str]
    target_latent: np.ndarray    # [latent_dim]
    n_repeats: int
    distance_band: str           # "near" | "far"
    parcel_clips: list[np.ndarray] = field(default_factory=list)
    onset_tr: int = 3


@dataclass
class World:
    """Realized world: class latents, mixing matrix and an image renderer."""

    spec: WorldSpec
    class_latents: np.ndarray    # [n_classes, latent_dim], unit rows
    mixing_matrix: np.ndarray    # [n_parcels, latent_dim], zero off informative rows
    label_texts: list[list[str]]
    _class_patterns: np.ndarray  # [n_classes, H, W, C]

    def render(self, class_id: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Render the class image, with per-trial pixel jitter if rng given."""
        img = self._class_patterns[class_id].copy()
        if rng is not None and self.spec.noise_sigma > 0:
            img += self.spec.noise_sigma * 0.5 * rng.standard_normal(img.shape)
        return np.clip(img, 0.0, 1.0)


def _class_pattern(class_rng: np.random.Generator) -> np.ndarray:
    """Distinct 32x32x3 color-block pattern for one class."""
    coarse = class_rng.uniform(0.0, 1.0, size=(4, 4, 3))
    return np.kron(coarse, np.ones((8, 8, 1)))


def _label_tokens(class_id: int, word_pool: np.ndarray) -> list[str]:
    """Class text: a unique id token plus two words reserved for this class.

    Words wrap around only when the pool is exhausted (tiny worlds)."""
    n = len(word_pool)
    w1 = word_pool[(2 * class_id) % n]
    w2 = word_pool[(2 * class_id + 1) % n]
    return [f"class{class_id:02d}", str(w1), str(w2)]


def generate_world(spec: WorldSpec) -> World:
    """Build the world deterministically from (spec, seed).

    Class latents are unit-norm with pairwise cosine similarity < 0.5;
    candidates violating the bound are resampled.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))

    latents = np.zeros((spec.n_classes, spec.latent_dim))
    for k in range(spec.n_classes):
        for _ in range(1000):
            v = rng.standard_normal(spec.latent_dim)
            v /= np.linalg.norm(v)
            if k == 0 or np.max(latents[:k] @ v) < 0.5:
                latents[k] = v
                break
        else:
            raise WorldError(
                f"could not place {spec.n_classes} latents with cosine < 0.5 "
                f"in dimension {spec.latent_dim}"
            )

    mixing = np.zeros((spec.n_parcels, spec.latent_dim))
    info = np.asarray(spec.informative_set)
    mixing[info] = (
        spec.mixing_scale
        * rng.standard_normal((len(info), spec.latent_dim))
        / np.sqrt(spec.latent_dim)
    )

    word_pool = np.random.default_rng(
        np.random.SeedSequence([spec.seed, 6])).permutation(_WORDS)
    patterns = np.empty((spec.n_classes, *IMAGE_SHAPE))
    texts = []
    for k in range(spec.n_classes):
        class_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, k]))
        patterns[k] = _class_pattern(class_rng)
        texts.append(_label_tokens(k, word_pool))

    return World(spec=spec, class_latents=latents, mixing_matrix=mixing,
                 label_texts=texts, _class_patterns=patterns)


def _make_series(world: World, latent: np.ndarray, onset_tr: int, n_tr: int,
                 delay: int, clip_length: int, rng: np.random.Generator,
                 gain: float = 1.0) -> np.ndarray:
    """Noise floor everywhere plus mixed latent in the stimulus window.

    gain scales the stimulus-locked signal only (1.0 for perception trials;
    imagination scenarios use lower gains for less familiar content)."""
    spec = world.spec
    series = spec.noise_sigma * rng.standard_normal((n_tr, spec.n_parcels))
    start = onset_tr + delay
    series[start:start + clip_length] += gain * (world.mixing_matrix @ latent)
    return series


def _class_schedule(n_items: int, n_classes: int, n_common: int,
                    common_boost: float) -> list[int]:
    """Deterministic class assignment with an optional familiarity skew.

    The first pass round-robins every class so coverage is guaranteed.
    A common_boost fraction of the remaining slots goes to the "common"
    classes (the first n_common) with Zipf weights 1/(k+1), so class
    frequency decays smoothly with class index, mirroring the long-tailed
    frequency of everyday visual content; the rest round-robins the full
    roster.
    """
    ids = [i % n_classes for i in range(min(n_items, n_classes))]
    extra = n_items - len(ids)
    n_common = min(max(n_common, 1), n_classes)
    n_boosted = int(round(extra * common_boost))
    weights = 1.0 / (1.0 + np.arange(n_common))
    quota = n_boosted * weights / weights.sum()
    counts = np.floor(quota).astype(int)
    # largest-remainder rounding so the counts sum exactly to n_boosted
    for k in np.argsort(-(quota - counts))[:n_boosted - counts.sum()]:
        counts[k] += 1
    for k, c in enumerate(counts):
        ids += [k] * int(c)
    ids += [j % n_classes for j in range(extra - n_boosted)]
    return ids


def generate_trials(
    world: World,
    n_train: int,
    n_test: int,
    n_subjects: int = 1,
    n_tr: int = 12,
    delay: int = 1,
    clip_length: int = 5,
    n_common: int = 10,
    common_boost: float = 0.5,
) -> tuple[list[SyntheticTrial], list[SyntheticTrial]]:
    """Sample train and test trial sets with full class coverage on both.

    Training classes are intentionally unbalanced: the common classes appear
    more often, so the training latent distribution has a familiarity axis.
    """
    if n_train < 1 or n_test < 1:
        raise WorldError("n_train and n_test must be >= 1")
    spec = world.spec
    schedules = {
        "train": _class_schedule(n_train, spec.n_classes, n_common, common_boost),
        "test": _class_schedule(n_test, spec.n_classes, n_common, common_boost),
    }

    def make(split: str, index: int) -> SyntheticTrial:
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, 2 if split == "train" else 3, index]))
        class_id = schedules[split][index]
        subject = f"sub{index % n_subjects:02d}"
        onset = int(rng.integers(2, n_tr - delay - clip_length + 1))
        latent = world.class_latents[class_id] + \
            0.2 * spec.noise_sigma * rng.standard_normal(spec.latent_dim)
        series = _make_series(world, latent, onset, n_tr, delay, clip_length, rng)
        image = world.render(class_id, rng)
        return SyntheticTrial(
            trial_id=f"{split}-{index:05d}",
            class_id=class_id,
            image=image,
            label_text=list(world.label_texts[class_id]),
            parcel_series=series,
            onset_tr=onset,
            subject_id=subject,
        )

    train = [make("train", i) for i in range(n_train)]
    test = [make("test", i) for i in range(n_test)]
    return train, test


def _far_latent(world: World, rng: np.random.Generator) -> np.ndarray:
    """Unit vector at cosine distance >= 0.8 from every class latent."""
    for _ in range(2000):
        v = rng.standard_normal(world.spec.latent_dim)
        v /= np.linalg.norm(v)
        if np.max(world.class_latents @ v) <= 0.2:
            return v
    raise WorldError("latent_dim too small to place far scenarios")


def _off_manifold(world: World, rng: np.random.Generator) -> np.ndarray:
    """Unit vector orthogonal to every class latent."""
    u = rng.standard_normal(world.spec.latent_dim)
    for v in world.class_latents:
        u -= (u @ v) * v / (v @ v)
    norm = np.linalg.norm(u)
    if norm < 1e-9:
        raise WorldError("latent_dim too small for off-manifold directions")
    return u / norm


def generate_scenarios(
    world: World,
    n_scenarios: int,
    n_repeats: int = 5,
    n_tr: int = 12,
    delay: int = 1,
    clip_length: int = 5,
    near_fraction: float = 0.5,
    max_tilt: float = 0.5,
    max_context: int = 7,
    min_gain: float = 0.05,
    far_gain: float = 0.03,
    max_novel: int = 12,
    anchor_span: int = 1,
) -> list[ScenarioSpec]:
    """Near/far imagination scenarios with repeated noisy clips.

    Near scenarios blend an anchor class with a few context classes, plus a
    graded off-manifold tilt: the first near scenarios anchor on common
    (frequently trained) classes, later ones on rarer classes with more
    tilt.  Two further quantities track the grade: the description mixes in
    up to max_novel novel tokens (unfamiliar scenes are described with
    unfamiliar words), and the signal gain decays geometrically from 1.0 to
    min_gain (imagination produces a weaker stimulus-locked response for
    less familiar content), so familiarity and decodability fall together
    by construction.  Every near target stays within cosine distance 0.3 of
    its anchor class latent; far scenarios are at distance >= 0.8 from
    every class latent, carry only novel tokens, and use far_gain.
    """
    if n_scenarios < 2:
        raise WorldError("need at least 2 scenarios")
    if n_repeats < 1:
        raise WorldError("n_repeats must be >= 1")
    spec = world.spec
    n_near = max(1, int(round(near_fraction * n_scenarios)))
    n_near = min(n_near, n_scenarios - 1)  # keep at least one far

    scenarios = []
    for s in range(n_scenarios):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 4, s]))
        if s < n_near:
            grade = s / max(n_near - 1, 1)          # 0 = most familiar
            # anchors stay among the common (low-index, frequently trained)
            # classes; the quadratic map keeps early scenarios on the very
            # commonest ones
            span = min(anchor_span, spec.n_classes)
            anchor = int(round(grade ** 2 * (span - 1)))
            n_ctx = int(round((1.0 - grade) * max_context))
            context = [(anchor + 1 + j) % spec.n_classes for j in range(n_ctx)]
            blend = 0.85 * world.class_latents[anchor]
            if context:
                ctx = world.class_latents[context].mean(axis=0)
                ctx /= np.linalg.norm(ctx)
                blend = blend + np.sqrt(1 - 0.85 ** 2) * ctx
            blend /= np.linalg.norm(blend)
            tilt = max_tilt * grade
            latent = np.sqrt(1 - tilt ** 2) * blend \
                + tilt * _off_manifold(world, rng)
            if latent @ world.class_latents[anchor] < 0.7:
                raise WorldError("near scenario drifted out of band")
            tokens = list(world.label_texts[anchor])
            tokens += [f"novel{s:02d}x{j}"
                       for j in range(int(round(grade * max_novel)))]
            band = "near"
            gain = min_gain ** grade
        else:
            latent = _far_latent(world, rng)
            tokens = [f"novel{s:02d}a", f"novel{s:02d}b", f"novel{s:02d}c"]
            band = "far"
            gain = far_gain
        onset = 3
        clips = [
            _make_series(world, latent, onset, n_tr, delay, clip_length,
                         np.random.default_rng(np.random.SeedSequence([spec.seed, 5, s, r])),
                         gain=gain)
            for r in range(n_repeats)
        ]
        scenarios.append(ScenarioSpec(
            scenario_id=f"scn-{s:03d}",
            description_tokens=tokens,
            target_latent=latent,
            n_repeats=n_repeats,
            distance_band=band,
            parcel_clips=clips,
            onset_tr=onset,
        ))
    return scenarios


# ---------------------------------------------------------------------------
# On-disk dataset format: manifest.json + series/<id>.f32 + images/<id>.f32
# + labels.tsv.  Matrices are row-major little-endian float32.
# ---------------------------------------------------------------------------

def _write_f32(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr.astype("<f4").tofile(path)


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4").astype(np.float64)
    return arr.reshape(shape)


def save_dataset(root: str | Path, trials: list[SyntheticTrial],
                 split: str = "train") -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() \
        else {"trials": []}
    known = {t["trial_id"] for t in manifest["trials"]}
    rows = []
    for t in trials:
        _write_f32(root / "series" / f"{t.trial_id}.f32", t.parcel_series)
        _write_f32(root / "images" / f"{t.trial_id}.f32", t.image)
        rows.append(f"{t.trial_id}\t{t.class_id}\t{' '.join(t.label_text)}\n")
        if t.trial_id in known:
            raise WorldError(f"duplicate trial_id {t.trial_id}")
        manifest["trials"].append({
            "trial_id": t.trial_id,
            "split": split,
            "class_id": t.class_id,
            "subject_id": t.subject_id,
            "onset_tr": t.onset_tr,
            "series_shape": list(t.parcel_series.shape),
            "image_shape": list(t.image.shape),
        })
    manifest_path.write_text(json.dumps(manifest, indent=1))
    with open(root / "labels.tsv", "a") as fh:
        fh.writelines(rows)


def load_dataset(root: str | Path, split: str | None = None) -> list[SyntheticTrial]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    labels = {}
    with open(root / "labels.tsv") as fh:
        for line in fh:
            tid, cid, text = line.rstrip("\n").split("\t")
            labels[tid] = (int(cid), text.split(" "))
    trials = []
    for entry in manifest["trials"]:
        if split is not None and entry["split"] != split:
            continue
        tid = entry["trial_id"]
        class_id, tokens = labels[tid]
        trials.append(SyntheticTrial(
            trial_id=tid,
            class_id=class_id,
            image=_read_f32(root / "images" / f"{tid}.f32", tuple(entry["image_shape"])),
            label_text=tokens,
            parcel_series=_read_f32(root / "series" / f"{tid}.f32",
                                    tuple(entry["series_shape"])),
            onset_tr=entry["onset_tr"],
            subject_id=entry["subject_id"],
        ))
    return trials
