"""Experiment orchestration: configuration, staged execution and reports.

Stages (synth, preprocess, pretrain, contrastive, prior, reconstruct,
evaluate, cluster, saliency, ablate, zeroshot, report) run against a run
directory.  Each stage records its config hash in the run manifest and is
skipped when re-run unchanged.  All randomness derives from the config
seed, so a full run is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import analysis, contrast, metrics, preproc, prior, synthworld
from .encoder import (EncoderConfig, FmriEncoder, ImageEncoder, TextEncoder,
                      default_registry, load_state_blob, save_state_blob,
                      ssl_pretrain_step)


class PipelineError(RuntimeError):
    pass


class MissingArtifactError(PipelineError):
    pass


STAGES = ["synth", "preprocess", "pretrain", "contrastive", "prior",
          "reconstruct", "evaluate", "cluster", "saliency", "ablate",
          "zeroshot", "report"]


@dataclass
class ExperimentConfig:
    seed: int = 42
    mode: str = "individual"          # "individual" | "universal"

    # synthetic world
    n_parcels: int = 64
    n_classes: int = 50
    latent_dim: int = 128
    n_informative: int = 32
    noise_sigma: float = 0.05
    mixing_scale: float = 2.0
    n_train: int = 200
    n_test: int = 20
    n_common: int = 5             # frequently trained ("familiar") classes
    common_boost: float = 0.8
    near_fraction: float = 0.75   # share of scenarios in the near band
    n_subjects: int = 1
    n_scenarios: int = 24
    n_repeats: int = 5
    n_tr: int = 12

    # preprocessing
    highpass_cutoff_hz: float = 0.01
    delay: int = 1
    clip_length: int = 5

    # encoder
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4

    # training
    lr: float = 1e-3                  # paper-scale profile uses 1e-4
    batch_size: int = 50
    ssl_enabled: bool = True
    ssl_steps: int = 300
    align_steps: int = 600
    contrast_steps: int = 2000
    contrast_decay: float = 0.03
    contrast_sparse: float = 0.4
    contrast_parcel_l1: float = 0.1
    prior_steps: int = 2000
    prior_decay: float = 0.02
    decoder_steps: int = 1500

    # diffusion prior
    alpha: float = 0.3
    n_tokens: int = 9
    sample_steps: int = 20
    best_of: int = 2

    # metrics
    n_way: int = 50
    n_trials: int = 1000
    n_perm: int = 5000

    # clustering
    n_clusters: int = 5
    elbow_max_k: int = 10

    def informative_set(self) -> tuple[int, ...]:
        # informative parcels sit inside the first ("visual") network band
        start = 2
        return tuple(range(start, start + self.n_informative))

    def world_spec(self) -> synthworld.WorldSpec:
        return synthworld.WorldSpec(
            n_parcels=self.n_parcels, n_classes=self.n_classes,
            latent_dim=self.latent_dim, informative_set=self.informative_set(),
            noise_sigma=self.noise_sigma, seed=self.seed,
            mixing_scale=self.mixing_scale)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_dim=self.n_parcels, model_dim=self.model_dim,
            n_layers=self.n_layers, n_heads=self.n_heads,
            clip_length=self.clip_length, seed=self.seed)

    def training_steps(self, base: int) -> int:
        # universal mode scales steps by subject count
        return base * self.n_subjects if self.mode == "universal" else base

    @classmethod
    def from_yaml(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        cfg = cls(**raw)
        if overrides:
            cfg = replace(cfg, **overrides)
        return cfg

    def to_yaml(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(asdict(self)))


class ToyClassifier:
    """Nearest-class-template classifier over the world's image patterns."""

    def __init__(self, world: synthworld.World):
        self.templates = world._class_patterns.reshape(world.spec.n_classes, -1)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        diff = self.templates - np.asarray(image).ravel()[None]
        return -np.sum(diff ** 2, axis=1)


class DecodingPipeline:
    """Trained components plus the glue needed for evaluation and analyses."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.world = synthworld.generate_world(config.world_spec())
        self.network_map = preproc.make_network_map(
            config.n_parcels, config.informative_set())
        self.registry = default_registry(config.seed)
        self.classifier = ToyClassifier(self.world)
        ecfg = config.encoder_config()
        self.image_encoder = ImageEncoder(config.model_dim, config.n_tokens,
                                          seed=config.seed)
        self.text_encoder = TextEncoder(config.model_dim, seed=config.seed)
        self.contrastive = contrast.ContrastiveModel(
            ecfg, self.image_encoder, self.text_encoder)
        self.prior = prior.DiffusionPrior(
            model_dim=config.model_dim, n_tokens=config.n_tokens,
            alpha=config.alpha, seed=config.seed)
        self.decoder = prior.ImageDecoder(config.n_tokens, config.model_dim,
                                          seed=config.seed)

    # -- preprocessing ------------------------------------------------------

    def condition_trial(self, trial: synthworld.SyntheticTrial) -> preproc.BoldClip:
        return self.condition_series(trial.parcel_series, trial.onset_tr,
                                     trial.trial_id, trial.subject_id)

    def condition_series(self, series: np.ndarray, onset_tr: int,
                         trial_id: str = "series",
                         subject_id: str = "sub00") -> preproc.BoldClip:
        pts = preproc.ParcelTimeSeries(data=series, subject_id=subject_id)
        conditioned = preproc.condition_series(pts, self.config.highpass_cutoff_hz)
        return preproc.segment_clips(conditioned, [onset_tr],
                                     delay=self.config.delay,
                                     length=self.config.clip_length,
                                     trial_ids=[trial_id])[0]

    def _clip_tensor(self, clips: list[preproc.BoldClip],
                     masked_networks=None) -> torch.Tensor:
        if masked_networks:
            clips = [preproc.apply_network_mask(c, self.network_map,
                                                masked_networks) for c in clips]
        return torch.as_tensor(np.stack([c.data for c in clips]),
                               dtype=torch.float32)

    # -- encoding and reconstruction ---------------------------------------

    @torch.no_grad()
    def encode_clips(self, clips: list[preproc.BoldClip],
                     masked_networks=None) -> np.ndarray:
        """Unit-norm contrastive fMRI latents for a list of clips."""
        x = self._clip_tensor(clips, masked_networks)
        return self.contrastive.encode_fmri(x).numpy()

    @torch.no_grad()
    def embed_image(self, image: np.ndarray) -> np.ndarray:
        t = torch.as_tensor(np.asarray(image)[None], dtype=torch.float32)
        return self.image_encoder(t)[0].numpy()

    @torch.no_grad()
    def embed_text(self, tokens: list[str]) -> np.ndarray:
        return self.text_encoder([tokens])[0].numpy()

    @torch.no_grad()
    def reconstruct_clips(self, clips: list[preproc.BoldClip],
                          masked_networks=None,
                          seed: int | None = None) -> list[np.ndarray]:
        """Best-of-n diffusion reconstruction for each clip."""
        cfg = self.config
        z = torch.as_tensor(self.encode_clips(clips, masked_networks),
                            dtype=torch.float32)
        images = []
        base_seed = cfg.seed if seed is None else seed
        for i in range(z.shape[0]):
            candidates = []
            for j in range(cfg.best_of):
                rng = np.random.default_rng(
                    np.random.SeedSequence([base_seed, 7, i, j]))
                grid = self.prior.sample(z[i:i + 1], n_steps=cfg.sample_steps,
                                         rng=rng)
                img = self.decoder(grid)[0].numpy()
                candidates.append(prior.ReconstructionCandidate(
                    image=img, image_latent=grid[0].numpy(),
                    similarity_to_fmri=0.0))
            best = prior.select_best(candidates, z[i].numpy())
            images.append(best.image)
        return images

    def reconstruct_series(self, series: np.ndarray, onset_tr: int) -> np.ndarray:
        clip = self.condition_series(series, onset_tr)
        return self.reconstruct_clips([clip])[0]

    # -- evaluation ---------------------------------------------------------

    def semantic_accuracy(self, trials: list[synthworld.SyntheticTrial],
                          masked_networks=None, seed: int = 0) -> float:
        clips = [self.condition_trial(t) for t in trials]
        recons = self.reconstruct_clips(clips, masked_networks)
        truths = [t.image for t in trials]
        return metrics.n_way_top1(
            self.classifier, recons, truths, n_way=self.config.n_way,
            n_trials=self.config.n_trials,
            rng=np.random.default_rng(np.random.SeedSequence([self.config.seed, 8, seed])),
            n_classes=self.config.n_classes)

    def evaluate(self, trials: list[synthworld.SyntheticTrial],
                 recons: list[np.ndarray] | None = None) -> metrics.MetricReport:
        """Full Table-1-style metric report on a test set."""
        cfg = self.config
        if recons is None:
            clips = [self.condition_trial(t) for t in trials]
            recons = self.reconstruct_clips(clips)
        truths = [t.image for t in trials]
        report = metrics.MetricReport(
            config_hash=metrics.config_hash(asdict(cfg)))

        report.add("low/pixcorr", float(np.mean(
            [metrics.pixcorr(r, t) for r, t in zip(recons, truths)])))
        report.add("low/ssim", float(np.mean(
            [metrics.ssim(r, t) for r, t in zip(recons, truths)])))

        def feats(name, tag, images):
            return np.array([self.registry.extract(name, tag, im) for im in images])

        for name, tag, col in [("alexnet", "2", "high/alexnet2"),
                               ("alexnet", "5", "high/alexnet5"),
                               ("inception", "pool", "high/inception"),
                               ("clip", "vision", "high/clip")]:
            report.add(col, metrics.feature_two_way(feats(name, tag, recons),
                                                    feats(name, tag, truths)),
                       chance=0.5)
        for name, tag, col in [("eff", "out", "high/eff"),
                               ("swav", "out", "high/swav")]:
            report.add(col, metrics.correlation_distance(
                feats(name, tag, recons), feats(name, tag, truths)))

        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 9]))
        report.add("semantic/top1", metrics.n_way_top1(
            self.classifier, recons, truths, n_way=cfg.n_way,
            n_trials=cfg.n_trials, rng=rng, n_classes=cfg.n_classes),
            chance=1.0 / cfg.n_way, n_trials=cfg.n_trials)

        rp_recon = feats("rp", "64", recons)
        rp_truth = feats("rp", "64", truths)
        report.add("dist/fid", metrics.frechet_distance(rp_recon, rp_truth))

        clips = [self.condition_trial(t) for t in trials]
        z_f = self.encode_clips(clips)
        z_i = np.array([self.embed_image(t.image) for t in trials])
        z_t = np.array([self.embed_text(t.label_text) for t in trials])
        report.add("retrieval/brain_vision",
                   contrast.retrieval_accuracy(z_f, z_i), chance=1.0 / len(trials))
        report.add("retrieval/brain_language",
                   contrast.retrieval_accuracy(z_f, z_t), chance=1.0 / len(trials))
        return report

    # -- checkpoints --------------------------------------------------------

    def save(self, run_dir: Path) -> None:
        ckpt = Path(run_dir) / "checkpoints"
        save_state_blob(ckpt / "contrastive.blob", self.contrastive.state_dict())
        save_state_blob(ckpt / "prior.blob", self.prior.state_dict())
        save_state_blob(ckpt / "decoder.blob", self.decoder.state_dict())

    def load(self, run_dir: Path) -> None:
        ckpt = Path(run_dir) / "checkpoints"
        for name, module in [("contrastive.blob", self.contrastive),
                             ("prior.blob", self.prior),
                             ("decoder.blob", self.decoder)]:
            path = ckpt / name
            if not path.exists():
                raise MissingArtifactError(f"missing checkpoint {path}")
            module.load_state_dict({k: v for k, v in load_state_blob(path).items()})


# ---------------------------------------------------------------------------
# Staged runner
# ---------------------------------------------------------------------------

class Run:
    """A run directory with manifest-based stage caching."""

    def __init__(self, run_dir, config: ExperimentConfig):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.manifest_path = self.dir / "run_manifest.json"
        self.manifest = (json.loads(self.manifest_path.read_text())
                         if self.manifest_path.exists() else {"stages": {}})
        self._pipeline: DecodingPipeline | None = None
        self._stage_deps = {
            "synth": [], "preprocess": ["synth"], "pretrain": ["preprocess"],
            "contrastive": ["preprocess"], "prior": ["contrastive"],
            "reconstruct": ["prior"], "evaluate": ["reconstruct"],
            "cluster": ["synth"], "saliency": ["contrastive"],
            "ablate": ["prior"], "zeroshot": ["prior"],
            "report": ["evaluate"],
        }

    @property
    def hash(self) -> str:
        return metrics.config_hash(asdict(self.config))

    def _done(self, stage: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        return bool(entry) and entry["config_hash"] == self.hash

    def _record(self, stage: str, artifacts: list[str]) -> None:
        self.manifest["stages"][stage] = {
            "config_hash": self.hash,
            "timestamp": time.time(),
            "artifacts": artifacts,
        }
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1))

    def pipeline(self) -> DecodingPipeline:
        if self._pipeline is None:
            self._pipeline = DecodingPipeline(self.config)
            if self._done("prior"):
                self._pipeline.load(self.dir)
            elif self._done("contrastive"):
                ckpt = self.dir / "checkpoints" / "contrastive.blob"
                self._pipeline.contrastive.load_state_dict(load_state_blob(ckpt))
        return self._pipeline

    # -- stage bodies -------------------------------------------------------

    def _load_trials(self, split: str):
        data_dir = self.dir / "dataset"
        if not (data_dir / "manifest.json").exists():
            raise MissingArtifactError("missing dataset; run the synth stage")
        return synthworld.load_dataset(data_dir, split=split)

    def _load_scenarios(self):
        path = self.dir / "scenarios.json"
        if not path.exists():
            raise MissingArtifactError("missing scenarios; run the synth stage")
        meta = json.loads(path.read_text())
        scenarios = []
        for entry in meta:
            clips = [np.fromfile(self.dir / "scenario_clips" / f"{entry['scenario_id']}-{r}.f32",
                                 dtype="<f4").astype(np.float64).reshape(entry["clip_shape"])
                     for r in range(entry["n_repeats"])]
            scenarios.append(synthworld.ScenarioSpec(
                scenario_id=entry["scenario_id"],
                description_tokens=entry["tokens"],
                target_latent=np.array(entry["target_latent"]),
                n_repeats=entry["n_repeats"],
                distance_band=entry["band"],
                parcel_clips=clips,
                onset_tr=entry["onset_tr"]))
        return scenarios

    def _stage_synth(self):
        cfg = self.config
        pipe = self.pipeline()
        train, test = synthworld.generate_trials(
            pipe.world, cfg.n_train, cfg.n_test, n_subjects=cfg.n_subjects,
            n_tr=cfg.n_tr, delay=cfg.delay, clip_length=cfg.clip_length,
            n_common=cfg.n_common, common_boost=cfg.common_boost)
        data_dir = self.dir / "dataset"
        if (data_dir / "manifest.json").exists():
            (data_dir / "manifest.json").unlink()
            (data_dir / "labels.tsv").unlink(missing_ok=True)
        synthworld.save_dataset(data_dir, train, split="train")
        synthworld.save_dataset(data_dir, test, split="test")

        scenarios = synthworld.generate_scenarios(
            pipe.world, cfg.n_scenarios, n_repeats=cfg.n_repeats,
            n_tr=cfg.n_tr, delay=cfg.delay, clip_length=cfg.clip_length,
            near_fraction=cfg.near_fraction)
        meta = []
        clip_dir = self.dir / "scenario_clips"
        clip_dir.mkdir(exist_ok=True)
        for s in scenarios:
            for r, clip in enumerate(s.parcel_clips):
                clip.astype("<f4").tofile(clip_dir / f"{s.scenario_id}-{r}.f32")
            meta.append({
                "scenario_id": s.scenario_id, "tokens": s.description_tokens,
                "target_latent": list(map(float, s.target_latent)),
                "n_repeats": s.n_repeats, "band": s.distance_band,
                "onset_tr": s.onset_tr,
                "clip_shape": list(s.parcel_clips[0].shape)})
        (self.dir / "scenarios.json").write_text(json.dumps(meta))
        return ["dataset", "scenarios.json", "scenario_clips"]

    def _conditioned_clips(self, split: str):
        pipe = self.pipeline()
        trials = self._load_trials(split)
        return trials, [pipe.condition_trial(t) for t in trials]

    def _stage_preprocess(self):
        pipe = self.pipeline()
        for split in ("train", "test"):
            _, clips = self._conditioned_clips(split)
            preproc.save_clips(self.dir / f"preproc_{split}", clips,
                               meta={"split": split})
        preproc.save_network_map(self.dir / "network_map.tsv", pipe.network_map)
        return ["preproc_train", "preproc_test", "network_map.tsv"]

    def _stage_pretrain(self):
        cfg = self.config
        pipe = self.pipeline()
        if not cfg.ssl_enabled or cfg.ssl_steps == 0:
            return []
        trials = self._load_trials("train")
        series = np.stack([
            preproc.condition_series(
                preproc.ParcelTimeSeries(t.parcel_series),
                cfg.highpass_cutoff_hz).data
            for t in trials])
        windows = torch.as_tensor(series, dtype=torch.float32)
        model = pipe.contrastive.fmri_encoder
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 10]))
        losses = []
        for _ in range(cfg.training_steps(cfg.ssl_steps)):
            idx = rng.choice(len(windows), size=min(cfg.batch_size, len(windows)),
                             replace=False)
            losses.append(ssl_pretrain_step(model, opt, windows[idx]))
        save_state_blob(self.dir / "checkpoints" / "ssl.blob", model.state_dict())
        with open(self.dir / "ssl_loss.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(enumerate(losses))
        return ["checkpoints/ssl.blob", "ssl_loss.csv"]

    def _stage_contrastive(self):
        cfg = self.config
        pipe = self.pipeline()
        trials, clips = self._conditioned_clips("train")
        images = np.stack([t.image for t in trials])
        tokens = [t.label_text for t in trials]
        clip_data = np.stack([c.data for c in clips])

        contrast.align_clip_encoders(
            pipe.image_encoder, pipe.text_encoder, images, tokens,
            steps=cfg.align_steps, batch_size=cfg.batch_size,
            seed=cfg.seed + 11)
        result = contrast.train_contrastive(
            pipe.contrastive, clip_data, images, tokens,
            steps=cfg.training_steps(cfg.contrast_steps),
            batch_size=cfg.batch_size, lr=cfg.lr,
            weight_decay=cfg.contrast_decay, seed=cfg.seed + 12,
            eval_every=max(1, cfg.contrast_steps // 10),
            sparse_p=cfg.contrast_sparse,
            parcel_l1=cfg.contrast_parcel_l1)
        result.save_csv(self.dir / "contrast_loss.csv")
        save_state_blob(self.dir / "checkpoints" / "contrastive.blob",
                        pipe.contrastive.state_dict())
        return ["checkpoints/contrastive.blob", "contrast_loss.csv"]

    def _stage_prior(self):
        cfg = self.config
        pipe = self.pipeline()
        trials, clips = self._conditioned_clips("train")
        images_t = torch.as_tensor(np.stack([t.image for t in trials]),
                                   dtype=torch.float32)
        with torch.no_grad():
            target_grids = pipe.image_encoder.grid(images_t)

        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13]))
        opt = torch.optim.AdamW(pipe.prior.parameters(), lr=cfg.lr,
                                weight_decay=cfg.prior_decay)
        losses = []
        n = len(clips)
        for _ in range(cfg.training_steps(cfg.prior_steps)):
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            batch_clips = [prior.augment_fmri(clips[i], rng) for i in idx]
            z = torch.as_tensor(pipe.encode_clips(batch_clips), dtype=torch.float32)
            losses.append(prior.prior_train_step(
                pipe.prior, opt, z, target_grids[idx], rng))
        with open(self.dir / "prior_loss.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(enumerate(losses))

        prior.train_decoder(pipe.decoder, target_grids, images_t,
                            steps=cfg.decoder_steps, batch_size=cfg.batch_size,
                            seed=cfg.seed + 14)
        pipe.save(self.dir)
        return ["checkpoints/prior.blob", "checkpoints/decoder.blob",
                "prior_loss.csv"]

    def _stage_reconstruct(self):
        pipe = self.pipeline()
        trials, clips = self._conditioned_clips("test")
        recons = pipe.reconstruct_clips(clips)
        recon_dir = self.dir / "recon"
        recon_dir.mkdir(exist_ok=True)
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
            have_mpl = True
        except ImportError:
            have_mpl = False
        for t, img in zip(trials, recons):
            img.astype("<f4").tofile(recon_dir / f"{t.trial_id}.f32")
            if have_mpl:
                plt.imsave(recon_dir / f"{t.trial_id}.png", np.clip(img, 0, 1))
        return ["recon"]

    def _stage_evaluate(self):
        pipe = self.pipeline()
        trials = self._load_trials("test")
        recon_dir = self.dir / "recon"
        recons = [np.fromfile(recon_dir / f"{t.trial_id}.f32", dtype="<f4")
                  .astype(np.float64).reshape(synthworld.IMAGE_SHAPE)
                  for t in trials]
        report = pipe.evaluate(trials, recons=recons)
        report.save(self.dir / "report.json")
        return ["report.json"]

    def _stage_cluster(self):
        cfg = self.config
        pipe = self.pipeline()
        trials = self._load_trials("train")
        latents = np.array([pipe.embed_image(t.image) for t in trials])
        model = analysis.kmeans_fit(latents, cfg.n_clusters, seed=cfg.seed)
        analysis.save_cluster_assignments(self.dir / "clusters.tsv", model,
                                          [t.trial_id for t in trials])
        curve = analysis.elbow_curve(latents, range(1, cfg.elbow_max_k + 1),
                                     seed=cfg.seed)
        with open(self.dir / "elbow.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "ssd"])
            writer.writerows(curve)
        freq = analysis.cluster_label_frequencies(
            model, [t.label_text for t in trials])
        (self.dir / "cluster_words.json").write_text(json.dumps(freq, indent=1))
        return ["clusters.tsv", "elbow.csv", "cluster_words.json"]

    def _stage_saliency(self):
        pipe = self.pipeline()
        trials, clips = self._conditioned_clips("train")
        by_subject: dict[str, list] = {}
        for t, c in zip(trials, clips):
            by_subject.setdefault(t.subject_id, []).append(c)
        images_by_subject = {}
        for t in trials:
            images_by_subject.setdefault(t.subject_id, []).append(t.image)

        groups, targets = [], []
        for sub, subj_clips in sorted(by_subject.items()):
            groups.append(np.stack([c.data for c in subj_clips]))
            imgs = torch.as_tensor(np.stack(images_by_subject[sub]),
                                   dtype=torch.float32)
            with torch.no_grad():
                targets.append(pipe.image_encoder(imgs))

        maps = []
        for g, z_img in zip(groups, targets):
            sal = analysis.gradcam_saliency(
                pipe.contrastive.encode_fmri, [g],
                lambda z, z_img=z_img: (z * z_img).sum(dim=-1),
                target_name="matched-image similarity")
            maps.append(sal.importance)
        saliency = analysis.SaliencyMap(
            importance=np.mean(maps, axis=0),
            target="matched-image similarity",
            subjects_averaged=len(groups))
        analysis.save_saliency_csv(self.dir / "saliency.csv", saliency,
                                   pipe.network_map)
        top = analysis.top_k_regions(saliency, pipe.network_map, k=20)
        (self.dir / "saliency_top20.json").write_text(json.dumps(
            {"regions": top,
             "network_histogram": analysis.network_histogram(top)}, indent=1))
        return ["saliency.csv", "saliency_top20.json"]

    def _stage_ablate(self):
        pipe = self.pipeline()
        trials = self._load_trials("test")
        full = pipe.semantic_accuracy(trials, seed=1)
        results = [analysis.ablate_network(pipe, trials, label,
                                           full_brain_accuracy=full, seed=1)
                   for label in pipe.network_map.labels]
        analysis.save_ablation_csv(self.dir / "ablation.csv", results)
        return ["ablation.csv"]

    def _stage_zeroshot(self):
        cfg = self.config
        pipe = self.pipeline()
        scenarios = self._load_scenarios()
        accuracy, perm = analysis.zero_shot_eval(pipe, scenarios,
                                                 n_perm=cfg.n_perm,
                                                 seed=cfg.seed)
        trials = self._load_trials("train")
        train_latents = np.array([pipe.embed_image(t.image) for t in trials])
        scale = analysis.scale_analysis(pipe, scenarios, train_latents,
                                        n_perm=cfg.n_perm, seed=cfg.seed)
        out = {
            "two_way_accuracy": accuracy,
            "p_value": perm.p_value,
            "scale": {
                "rank_correlation": scale.rank_correlation,
                "p_value": scale.p_value,
                "degenerate": scale.degenerate,
                "per_scenario": scale.per_scenario,
            },
        }
        (self.dir / "zeroshot.json").write_text(json.dumps(out, indent=1))
        return ["zeroshot.json"]

    def _stage_report(self):
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        artifacts = []
        report = metrics.MetricReport.load(self.dir / "report.json")
        table_path = self.dir / "report_table.csv"
        with open(table_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value", "chance"])
            for name in sorted(report.entries):
                entry = report.entries[name]
                writer.writerow([name, entry["value"], entry.get("chance", "")])
        artifacts.append("report_table.csv")

        def plot_csv(path, out, xlab, ylab):
            if not Path(path).exists():
                return
            with open(path) as fh:
                rows = list(csv.reader(fh))[1:]
            xs = [float(r[0]) for r in rows]
            ys = [float(r[1]) for r in rows]
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.plot(xs, ys)
            ax.set_xlabel(xlab)
            ax.set_ylabel(ylab)
            fig.tight_layout()
            fig.savefig(out, dpi=100)
            plt.close(fig)
            artifacts.append(Path(out).name)

        plot_csv(self.dir / "contrast_loss.csv", self.dir / "contrast_loss.png",
                 "step", "loss")
        plot_csv(self.dir / "prior_loss.csv", self.dir / "prior_loss.png",
                 "step", "loss")
        plot_csv(self.dir / "elbow.csv", self.dir / "elbow.png", "k", "ssd")

        zs_path = self.dir / "zeroshot.json"
        if zs_path.exists():
            scale = json.loads(zs_path.read_text())["scale"]
            pts = scale["per_scenario"]
            fig, ax = plt.subplots(figsize=(5, 4))
            for band, marker in [("near", "o"), ("far", "x")]:
                sel = [p for p in pts if p["band"] == band]
                ax.scatter([p["mean_cosine_distance"] for p in sel],
                           [p["accuracy"] for p in sel], marker=marker,
                           label=band)
            ax.set_xlabel("mean cosine distance to training images")
            ax.set_ylabel("two-way accuracy")
            ax.legend()
            fig.tight_layout()
            fig.savefig(self.dir / "scale_analysis.png", dpi=100)
            plt.close(fig)
            artifacts.append("scale_analysis.png")
        return artifacts

    # -- public API ---------------------------------------------------------

    def run_stage(self, stage: str, force: bool = False) -> str:
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}")
        if not force and self._done(stage):
            return "cached"
        for dep in self._stage_deps[stage]:
            if not self._done(dep):
                raise MissingArtifactError(
                    f"stage {stage!r} requires {dep!r}; run it first")
        artifacts = getattr(self, f"_stage_{stage}")()
        self._record(stage, artifacts)
        return "done"

    def run_all(self, force: bool = False) -> dict[str, str]:
        return {stage: self.run_stage(stage, force=force) for stage in STAGES}
