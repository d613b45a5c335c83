"""Three-stage training loop, checkpoints and the CSV metric log."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datagen import MultiViewSample
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig, Prediction
from .losses import (
    FeatureExtractor,
    LossWeights,
    combine_stage1,
    discriminator_accuracy,
    generator_adv_loss,
    hinge_d_loss,
    perceptual_same_view,
    sameview_ablation_loss,
    stage1_terms,
)
from .mesh import DeformedMesh, build_icosphere
from .render import rasterize
from .uv_project import build_gan_batch, check_fake_support

log = logging.getLogger(__name__)

MODES = ("staged", "same_view", "no_multistage")
LOG_COLUMNS = ("iter", "stage", "loss", "p_nv", "sil", "lap", "p_sv", "adv", "d_loss", "d_acc", "wall_time")


@dataclass
class StageSchedule:
    stage1_iters: int = 400
    stage2_iters: int = 300
    stage3_iters: int = 300
    learning_rate_g: float = 1e-4
    learning_rate_d: float = 1e-4
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        for k in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if int(getattr(self, k)) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.learning_rate_g > 0 and self.learning_rate_d > 0):
            raise ValueError("learning rates must be positive")

    @classmethod
    def from_total(cls, total: int, fractions=(0.4, 0.3, 0.3), **kw) -> "StageSchedule":
        s1 = int(round(total * fractions[0]))
        s2 = int(round(total * fractions[1]))
        return cls(stage1_iters=s1, stage2_iters=s2, stage3_iters=total - s1 - s2, **kw)

    @property
    def total(self) -> int:
        return self.stage1_iters + self.stage2_iters + self.stage3_iters

    @property
    def boundaries(self) -> tuple[int, int, int]:
        """Iteration counts at which stages 1, 2 and 3 end."""
        a = self.stage1_iters
        return a, a + self.stage2_iters, self.total

    def stage_at(self, iteration: int) -> int:
        b1, b2, _ = self.boundaries
        if iteration < b1:
            return 1
        if iteration < b2:
            return 2
        return 3


@dataclass
class TrainConfig:
    schedule: StageSchedule = field(default_factory=StageSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig.toy)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig.toy)
    template_level: int = 3
    mode: str = "staged"
    sigma: float = 1e-4
    checkpoint_every: int = 0
    data: Optional[str] = None
    phi_seed: int = 0
    phi_weights: Optional[str] = None
    betas: tuple = (0.5, 0.999)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.generator.texture_size != self.discriminator.texture_size:
            raise ValueError("generator and discriminator texture sizes differ")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return {
            "schedule": asdict(self.schedule),
            "weights": self.weights.to_dict(),
            "generator": self.generator.to_dict(),
            "discriminator": self.discriminator.to_dict(),
            "template_level": self.template_level,
            "mode": self.mode,
            "sigma": self.sigma,
            "checkpoint_every": self.checkpoint_every,
            "data": self.data,
            "phi_seed": self.phi_seed,
            "phi_weights": self.phi_weights,
            "betas": list(self.betas),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        kw = {}
        if "schedule" in d:
            kw["schedule"] = StageSchedule(**d.pop("schedule"))
        if "weights" in d:
            kw["weights"] = LossWeights(**d.pop("weights"))
        if "generator" in d:
            kw["generator"] = GeneratorConfig.from_dict(d.pop("generator"))
        if "discriminator" in d:
            kw["discriminator"] = DiscriminatorConfig.from_dict(d.pop("discriminator"))
        return cls(**kw, **d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def sample_view_pair(sample: MultiViewSample, rng: np.random.Generator) -> tuple[int, int]:
    """Input view uniform over all views, target uniform over the others."""
    n = sample.n_views if hasattr(sample, "n_views") else int(sample)
    if n < 2:
        raise ValueError("novel-view training needs at least two views per object")
    v1 = int(rng.integers(n))
    v2 = (v1 + 1 + int(rng.integers(n - 1))) % n
    return v1, v2


@dataclass
class Batch:
    samples: list
    view1: list
    view2: list
    z: torch.Tensor
    image_v1: torch.Tensor
    image_v2: torch.Tensor
    mask_v1: torch.Tensor
    mask_v2: torch.Tensor
    cams_v1: list
    cams_v2: list

    def as_dict(self) -> dict:
        return {"image_v1": self.image_v1, "image_v2": self.image_v2, "mask_v1": self.mask_v1, "mask_v2": self.mask_v2}


def make_batch(samples: Sequence[MultiViewSample], indices, rng: np.random.Generator, latent_dim: int) -> Batch:
    chosen = [samples[int(i)] for i in indices]
    pairs = [sample_view_pair(s, rng) for s in chosen]
    v1 = [p[0] for p in pairs]
    v2 = [p[1] for p in pairs]
    z = torch.from_numpy(rng.standard_normal((len(chosen), latent_dim))).float()
    return Batch(
        samples=chosen,
        view1=v1,
        view2=v2,
        z=z,
        image_v1=torch.stack([s.images[v] for s, v in zip(chosen, v1)]),
        image_v2=torch.stack([s.images[v] for s, v in zip(chosen, v2)]),
        mask_v1=torch.stack([s.masks[v] for s, v in zip(chosen, v1)]),
        mask_v2=torch.stack([s.masks[v] for s, v in zip(chosen, v2)]),
        cams_v1=[s.cameras[v] for s, v in zip(chosen, v1)],
        cams_v2=[s.cameras[v] for s, v in zip(chosen, v2)],
    )


def _render_pair(pred: Prediction, cams_a: list, cams_b: list, sigma: float):
    """Render one prediction from two camera sets in a single rasterizer call."""
    verts = pred.mesh.batched()
    both = DeformedMesh(torch.cat([verts, verts]), pred.mesh.template)
    out = rasterize(both, torch.cat([pred.texture, pred.texture]), list(cams_a) + list(cams_b), sigma)
    b = verts.shape[0]

    class _Half:
        def __init__(self, sl):
            self.image = out.image[sl]
            self.silhouette = out.silhouette[sl]
            self.coverage = out.coverage[sl]

    return _Half(slice(0, b)), _Half(slice(b, 2 * b))


def _as_float(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


class Trainer:
    """Owns the networks, optimizers and iteration counter for one run.

    Batches are drawn from ``np.random.default_rng([seed, iteration])`` so
    a resumed run sees exactly the batches the original would have.
    """

    def __init__(self, config: TrainConfig, samples: Sequence[MultiViewSample], out_dir=None):
        if not samples:
            raise ValueError("empty dataset")
        self.config = config
        self.samples = list(samples)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.template = build_icosphere(config.template_level)
        torch.manual_seed(config.schedule.seed)
        self.G = Generator(config.generator, self.template)
        self.D = Discriminator(config.discriminator)
        self.phi = FeatureExtractor(seed=config.phi_seed, weights_path=config.phi_weights)
        s = config.schedule
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=s.learning_rate_g, betas=config.betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=s.learning_rate_d, betas=config.betas)
        self.iteration = 0
        self.counters = {"renders_v1": 0, "renders_v2": 0, "projections": 0, "d_steps": 0, "g_steps": 0}
        self.history: list[dict] = []
        self._t0 = time.perf_counter()

    # ----- sampling

    def stage(self, iteration: Optional[int] = None) -> int:
        it = self.iteration if iteration is None else iteration
        if self.config.mode == "same_view":
            return 0
        if self.config.mode == "no_multistage":
            return 3
        return self.config.schedule.stage_at(it)

    def batch_for(self, iteration: int) -> Batch:
        s = self.config.schedule
        rng = np.random.default_rng([s.seed, iteration])
        idx = rng.integers(0, len(self.samples), size=s.batch_size)
        return make_batch(self.samples, idx, rng, self.config.generator.latent_dim)

    # ----- steps

    def _check_finite(self, loss: torch.Tensor, what: str):
        if not torch.isfinite(loss).all():
            self._abort(f"non-finite {what} at iteration {self.iteration}")

    def _abort(self, message: str):
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "nonfinite.pt")
        raise FloatingPointError(message)

    def _predict(self, image, z) -> Prediction:
        try:
            return self.G(image, z)
        except FloatingPointError as e:
            self._abort(f"{e} at iteration {self.iteration}")

    def _g_update(self, loss: torch.Tensor):
        self._check_finite(loss, "generator loss")
        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_g.step()
        self.counters["g_steps"] += 1

    def train_step_stage1(self, batch: Batch) -> dict:
        pred = self._predict(batch.image_v1, batch.z)
        r2 = rasterize(pred.mesh, pred.texture, batch.cams_v2, self.config.sigma)
        self.counters["renders_v2"] += 1
        terms = stage1_terms(batch.as_dict(), r2, pred.mesh, self.phi)
        loss = combine_stage1(terms, self.config.weights)
        self._g_update(loss)
        return {"loss": loss, **terms}

    def _stage2_terms(self, batch: Batch, pred: Prediction) -> tuple[torch.Tensor, dict]:
        r1, r2 = _render_pair(pred, batch.cams_v1, batch.cams_v2, self.config.sigma)
        self.counters["renders_v1"] += 1
        self.counters["renders_v2"] += 1
        terms = stage1_terms(batch.as_dict(), r2, pred.mesh, self.phi)
        terms["p_sv"] = perceptual_same_view(batch.image_v1, r1.image, r1.silhouette, self.phi)
        loss = combine_stage1(terms, self.config.weights) + self.config.weights.lambda_ps * terms["p_sv"]
        return loss, terms

    def train_step_stage2(self, batch: Batch) -> dict:
        pred = self._predict(batch.image_v1, batch.z)
        loss, terms = self._stage2_terms(batch, pred)
        self._g_update(loss)
        return {"loss": loss, **terms}

    def gan_inputs(self, batch: Batch, pred: Prediction):
        """Online projections with the current mesh; recomputed every call."""
        cond, real, _ = build_gan_batch(batch.samples, pred, batch.view1, batch.view2)
        self.counters["projections"] += 1
        return cond, real

    def discriminator_step(self, batch: Batch, pred: Prediction, cond, real) -> dict:
        fake = pred.texture.detach() * real.visibility[:, None]
        check_fake_support(fake, real.visibility)
        emb = self.D.embed_condition(cond.texture, cond.visibility)
        real_logits = self.D.score(real.texture, real.visibility, cond.texture, cond.visibility, emb)
        fake_logits = self.D.score(fake, real.visibility, cond.texture, cond.visibility, emb)
        d_loss = hinge_d_loss(real_logits, fake_logits)
        self._check_finite(d_loss, "discriminator loss")
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()
        self.counters["d_steps"] += 1
        with torch.no_grad():
            acc = discriminator_accuracy(real_logits, fake_logits, real.visibility)
        return {"d_loss": d_loss, "d_acc": acc}

    def train_step_stage3(self, batch: Batch) -> dict:
        pred = self._predict(batch.image_v1, batch.z)
        cond, real = self.gan_inputs(batch, pred)
        d_metrics = self.discriminator_step(batch, pred, cond, real)

        loss, terms = self._stage2_terms(batch, pred)
        fake = pred.texture * real.visibility[:, None]
        check_fake_support(fake, real.visibility)
        self.D.requires_grad_(False)
        try:
            fake_logits = self.D.score(fake, real.visibility, cond.texture, cond.visibility)
        finally:
            self.D.requires_grad_(True)
        terms["adv"] = generator_adv_loss(fake_logits)
        loss = loss + self.config.weights.lambda_adv * terms["adv"]
        self._g_update(loss)
        return {"loss": loss, **terms, **d_metrics}

    def train_step_same_view(self, batch: Batch) -> dict:
        pred = self._predict(batch.image_v1, batch.z)
        r1 = rasterize(pred.mesh, pred.texture, batch.cams_v1, self.config.sigma)
        self.counters["renders_v1"] += 1
        loss = sameview_ablation_loss(
            batch.image_v1, r1.image, batch.mask_v1, r1.silhouette, self.config.weights, self.phi, pred.mesh
        )
        self._g_update(loss)
        return {"loss": loss}

    def step(self) -> dict:
        stage = self.stage()
        batch = self.batch_for(self.iteration)
        fn = {
            0: self.train_step_same_view,
            1: self.train_step_stage1,
            2: self.train_step_stage2,
            3: self.train_step_stage3,
        }[stage]
        metrics = {k: _as_float(v) for k, v in fn(batch).items()}
        row = {"iter": self.iteration, "stage": stage, **metrics, "wall_time": time.perf_counter() - self._t0}
        self.history.append(row)
        self.iteration += 1
        return row

    # ----- run loop

    def run(self, until: Optional[int] = None, callback=None) -> list[dict]:
        """Train up to ``until`` iterations (default: the full schedule)."""
        total = self.config.schedule.total if until is None else min(until, self.config.schedule.total)
        b1, b2, _ = self.config.schedule.boundaries
        every = self.config.checkpoint_every
        rows = []
        while self.iteration < total:
            row = self.step()
            rows.append(row)
            self._append_log(row)
            it = self.iteration
            if self.out_dir is not None:
                if self.config.mode == "staged" and it == b1:
                    log.info("stage 1 finished at iteration %d", it)
                    self.save_checkpoint(self.out_dir / "stage1.pt")
                if self.config.mode == "staged" and it == b2:
                    self.save_checkpoint(self.out_dir / "stage2.pt")
                if every and it % every == 0:
                    self.save_checkpoint(self.out_dir / f"iter_{it:06d}.pt")
                if it == self.config.schedule.total:
                    self.save_checkpoint(self.out_dir / "final.pt")
            if callback is not None:
                callback(self, row)
        return rows

    @property
    def log_path(self) -> Optional[Path]:
        return None if self.out_dir is None else self.out_dir / "log.csv"

    def _append_log(self, row: dict):
        if self.log_path is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        new = not self.log_path.exists()
        with open(self.log_path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            if new:
                w.writeheader()
            w.writerow({k: (repr(row[k]) if isinstance(row.get(k), float) else row.get(k, "")) for k in LOG_COLUMNS})

    def _truncate_log(self):
        """Drop log rows at or after the current iteration (used on resume)."""
        if self.log_path is None or not self.log_path.exists():
            return
        rows = read_log(self.log_path)
        keep = [r for r in rows if int(r["iter"]) < self.iteration]
        with open(self.log_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            w.writeheader()
            w.writerows(keep)

    # ----- checkpoints

    def state_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "iteration": self.iteration,
            "stage": self.stage(),
            "generator": self.G.state_dict(),
            "discriminator": self.D.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "counters": dict(self.counters),
        }

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    def load_state_dict(self, state: dict):
        self.G.load_state_dict(state["generator"])
        self.D.load_state_dict(state["discriminator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        torch.set_rng_state(state["torch_rng"])
        self.iteration = int(state["iteration"])
        self.counters.update(state.get("counters", {}))

    @classmethod
    def resume(cls, checkpoint, samples, out_dir=None) -> "Trainer":
        state = load_checkpoint(checkpoint)
        trainer = cls(TrainConfig.from_dict(state["config"]), samples, out_dir)
        trainer.load_state_dict(state)
        trainer._truncate_log()
        return trainer


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=True)


def generator_from_checkpoint(path) -> tuple[Generator, TrainConfig]:
    state = load_checkpoint(path)
    config = TrainConfig.from_dict(state["config"])
    g = Generator(config.generator, build_icosphere(config.template_level))
    g.load_state_dict(state["generator"])
    g.eval()
    return g, config


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def run(config: TrainConfig, samples, out_dir=None, resume=None) -> Trainer:
    """Train to the end of the schedule, optionally resuming from a checkpoint."""
    trainer = Trainer.resume(resume, samples, out_dir) if resume else Trainer(config, samples, out_dir)
    if trainer.out_dir is not None and not resume:
        trainer.out_dir.mkdir(parents=True, exist_ok=True)
        if trainer.log_path.exists():
            trainer.log_path.unlink()
        with open(trainer.out_dir / "config.json", "w") as f:
            json.dump(config.to_dict(), f, indent=1)
    trainer.run()
    return trainer


__all__ = [
    "MODES",
    "LOG_COLUMNS",
    "StageSchedule",
    "TrainConfig",
    "Batch",
    "Trainer",
    "sample_view_pair",
    "make_batch",
    "load_checkpoint",
    "generator_from_checkpoint",
    "read_log",
    "moving_average",
    "run",
]
