"""Dataset rendering and the teacher / student training loops."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Graph, adam_step
from .drr import DRRImage, march, normalize_image, slab_edges
from .network import Setup, StudentModel, TeacherModel, recon_loss, total_loss, view_queries
from .phantom import PhantomSpec, generate_phantom, sample_training_points

log = logging.getLogger(__name__)


@dataclass
class PhantomCase:
    seed: int
    spec: PhantomSpec
    originals: np.ndarray  # (M, H, W) normalised
    augmented: np.ndarray  # (M, K, H, W) normalised per image
    raw_originals: list[DRRImage] = field(default_factory=list, repr=False)
    raw_augmented: list[list[DRRImage]] = field(default_factory=list, repr=False)


def render_case(seed: int, setup: Setup, dims: int = 64, step: float | None = None) -> PhantomCase:
    """Phantom + its original and slab-masked renders for every view."""
    spec, vol = generate_phantom(seed, dims, setup.space)
    originals, augmented, raw_o, raw_a = [], [], [], []
    for i, (geom, slabs) in enumerate(zip(setup.geoms, setup.slabs)):
        stack = march(vol, geom, slab_edges(slabs), step)
        full = DRRImage(stack.sum(axis=0), view=i)
        slab_imgs = [DRRImage(s, view=i) for s in stack]
        raw_o.append(full)
        raw_a.append(slab_imgs)
        originals.append(normalize_image(full).pixels)
        augmented.append(np.stack([normalize_image(s).pixels for s in slab_imgs]))
    return PhantomCase(seed, spec, np.stack(originals), np.stack(augmented), raw_o, raw_a)


def case_from_images(seed: int, spec: PhantomSpec, raw_originals: list[DRRImage], raw_augmented: list[list[DRRImage]]) -> PhantomCase:
    originals = np.stack([normalize_image(img).pixels for img in raw_originals])
    augmented = np.stack([np.stack([normalize_image(s).pixels for s in view]) for view in raw_augmented])
    return PhantomCase(seed, spec, originals, augmented, raw_originals, raw_augmented)


@dataclass
class FitSettings:
    epochs: int = 60
    lr: float = 3e-4
    n_points: int = 2048
    seed: int = 0
    alpha: float = 0.2
    val_points: int = 4096
    warmup_epochs: int = 0

    def lr_at(self, step: int, steps_per_epoch: int) -> float:
        """Linear warm-up from lr / 100 over ``warmup_epochs``, constant after."""
        if self.warmup_epochs <= 0:
            return self.lr
        frac = min(1.0, step / (self.warmup_epochs * steps_per_epoch))
        return self.lr * (0.01 + 0.99 * frac)


def _val_batches(cases: list[PhantomCase], n: int):
    return [sample_training_points(c.spec, n, seed=10_000_000 + c.seed) for c in cases]


def _step_points(case: PhantomCase, n: int, seed: int, epoch: int):
    return sample_training_points(case.spec, n, seed=(seed * 1_000_003 + epoch) * 1_000_033 + case.seed)


def _fit(
    params: ad.ParamStore,
    step_fn: Callable[[PhantomCase, object], tuple[ad.Tensor, ad.Tensor, float]],
    val_fn: Callable[[PhantomCase, object], float],
    train: list[PhantomCase],
    val: list[PhantomCase],
    cfg: FitSettings,
    tag: str,
) -> list[dict]:
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0xF17])
    val_sets = _val_batches(val, cfg.val_points)
    best, best_state, trace, step = np.inf, params.state(), [], 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        for ci in rng.permutation(len(train)):
            case = train[ci]
            batch = _step_points(case, cfg.n_points, cfg.seed, epoch)
            params.zero_grad()
            state.lr = cfg.lr_at(step, len(train))
            with Graph() as g:
                loss, recon, distill = step_fn(case, batch)
            g.backward(loss)
            adam_step(params, state)
            step += 1
            sums += (recon.item(), distill, loss.item())
        means = sums / len(train)
        val_recon = float(np.mean([val_fn(c, b) for c, b in zip(val, val_sets)])) if val else float("nan")
        if not val or val_recon < best:
            best, best_state = val_recon, params.state()
        trace.append({"step": step, "epoch": epoch, "recon": means[0], "distill": means[1], "total": means[2], "val_recon": val_recon})
        log.info("%s epoch %d recon %.5f distill %.5f val %.5f", tag, epoch, means[0], means[1], val_recon)
    params.load_state(best_state)
    return trace


def train_teacher(setup: Setup, train: list[PhantomCase], val: list[PhantomCase], cfg: FitSettings, channels: int = 16, hidden=(64, 64, 32)):
    """Minimise the reconstruction loss on slab-masked inputs; returns (best-val model, trace)."""
    model = TeacherModel.create(channels, setup.K, setup.M, cfg.seed, hidden)
    feat_hw = (setup.geoms[0].height // 4, setup.geoms[0].width // 4)

    def step_fn(case, batch):
        pred, _ = model.forward(case.augmented, view_queries(setup, batch.points, feat_hw))
        loss = recon_loss(pred, batch.labels)
        return loss, loss, 0.0

    def val_fn(case, batch):
        pred, _ = model.forward(case.augmented, view_queries(setup, batch.points, feat_hw))
        return float(np.mean((pred.data - batch.labels) ** 2))

    trace = _fit(model.params, step_fn, val_fn, train, val, cfg, "teacher")
    return model, trace


def train_student(
    setup: Setup,
    train: list[PhantomCase],
    val: list[PhantomCase],
    cfg: FitSettings,
    teacher: TeacherModel | None,
    channels: int = 16,
    layers=(3,),
    hidden=(64, 64, 32),
    spatial: bool | None = None,
):
    """Minimise recon + alpha * distillation; best model chosen by validation recon loss only.

    ``spatial`` defaults to ``alpha > 0``: without distillation the student drops
    its expansion branch and is the plain pixel-aligned baseline.
    """
    spatial = cfg.alpha > 0 if spatial is None else spatial
    if cfg.alpha > 0 and not spatial:
        raise ValueError("distillation needs the spatial branch")
    if cfg.alpha > 0 and teacher is None:
        raise ValueError("a teacher checkpoint is required when alpha > 0")
    if teacher is not None and (teacher.K != setup.K or teacher.channels != channels):
        raise ValueError(f"teacher (K={teacher.K}, C={teacher.channels}) incompatible with student (K={setup.K}, C={channels})")
    model = StudentModel.create(channels, setup.K, setup.M, cfg.seed, layers, hidden, spatial)
    feat_hw = (setup.geoms[0].height // 4, setup.geoms[0].width // 4)
    stacks = {}
    if cfg.alpha > 0:
        teacher.params.freeze()
        stacks = {c.seed: teacher.feature_stacks(c.augmented, layers) for c in train}
    L = len(layers)

    def step_fn(case, batch):
        queries = view_queries(setup, batch.points, feat_hw)
        pred, distill = model.forward(case.originals, queries, stacks.get(case.seed))
        recon = recon_loss(pred, batch.labels)
        loss = total_loss(recon, distill, cfg.alpha, setup.M, L)
        dsum = float(sum(d.item() for d in distill)) / (setup.M * L) if distill else 0.0
        return loss, recon, dsum

    def val_fn(case, batch):
        pred, _ = model.forward(case.originals, view_queries(setup, batch.points, feat_hw))
        return float(np.mean((pred.data - batch.labels) ** 2))

    trace = _fit(model.params, step_fn, val_fn, train, val, cfg, "student")
    return model, trace
