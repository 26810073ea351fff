"""Pixel-aligned occupancy-field networks: teacher (slab images) and student (original images).

Both models share the same skeleton: a small strided conv encoder per input
image, pixel-aligned feature lookup by projecting query points onto each
view's feature plane, and an MLP with a 2-channel sigmoid head (left, right).

The teacher encodes the K slab-masked renders of every view with one shared
encoder and fuses the K point features by inverse view-depth distance.  The
student encodes only the original render twice: its student branch is
expanded to K feature planes (matched against the teacher planes) and fused
the same way, the additional branch is queried directly.  Per view the MLP
sees ``[fused, additional]``; views are concatenated in view order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .geometry import ConeBeamGeometry, ReconSpace, ViewSlabs, depth_weights, project_points

STAGE_CHANNELS = (8, 16)  # stages 1-2; stage 3 emits C channels


@dataclass
class Setup:
    """Acquisition setup shared by data generation, training and inference."""

    geoms: list[ConeBeamGeometry]
    space: ReconSpace
    slabs: list[ViewSlabs]

    @property
    def M(self) -> int:
        return len(self.geoms)

    @property
    def K(self) -> int:
        return self.slabs[0].K


# ---------------------------------------------------------------------------
# parameters


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_encoder(params: ParamStore, prefix: str, channels: int, rng: np.random.Generator) -> None:
    widths = [1, *STAGE_CHANNELS, channels]
    for s in range(3):
        ci, co = widths[s], widths[s + 1]
        params.add(f"{prefix}.conv{s + 1}.w", _he(rng, (co, ci, 3, 3), ci * 9))
        params.add(f"{prefix}.conv{s + 1}.b", np.zeros(co))


def stage_channels(stage: int, channels: int) -> int:
    return (*STAGE_CHANNELS, channels)[stage - 1]


def init_mlp(params: ParamStore, prefix: str, in_width: int, hidden: Sequence[int], rng: np.random.Generator) -> None:
    widths = [in_width, *hidden, 2]
    for i in range(len(widths) - 1):
        params.add(f"{prefix}.l{i}.w", _he(rng, (widths[i], widths[i + 1]), widths[i]))
        params.add(f"{prefix}.l{i}.b", np.zeros(widths[i + 1]))


def encode(params: ParamStore, prefix: str, images: Tensor) -> list[Tensor]:
    """Stage outputs for images (B, 1, H, W); the last one is (B, C, H/4, W/4)."""
    x = images
    outs = []
    for s in range(3):
        stride = 1 if s == 0 else 2
        x = ad.relu(ad.conv2d(x, params[f"{prefix}.conv{s + 1}.w"], params[f"{prefix}.conv{s + 1}.b"], stride=stride, padding=1))
        outs.append(x)
    return outs


def mlp_forward(params: ParamStore, prefix: str, x: Tensor) -> Tensor:
    n_layers = sum(1 for k in params.names() if k.startswith(prefix + ".") and k.endswith(".w"))
    width = params[f"{prefix}.l0.w"].shape[0]
    if x.shape[-1] != width:
        raise ValueError(f"MLP expects input width {width}, got {x.shape[-1]}")
    for i in range(n_layers):
        x = ad.linear(x, params[f"{prefix}.l{i}.w"], params[f"{prefix}.l{i}.b"])
        x = ad.relu(x) if i < n_layers - 1 else ad.sigmoid(x)
    return x


# ---------------------------------------------------------------------------
# pixel-aligned queries and fusion


@dataclass
class ViewQuery:
    coords: np.ndarray  # (N, 2) feature-plane (col, row)
    depth: np.ndarray  # (N,) view-depth mm
    weights: np.ndarray  # (N, K) depth-fusion weights


def feature_coords(u: np.ndarray, v: np.ndarray, image_hw: tuple[int, int], feat_hw: tuple[int, int]) -> np.ndarray:
    """Map detector pixel coordinates onto a feature plane with aligned pixel footprints."""
    (H, W), (h, w) = image_hw, feat_hw
    return np.stack([(u + 0.5) * w / W - 0.5, (v + 0.5) * h / H - 0.5], axis=-1)


def view_queries(setup: Setup, points: np.ndarray, feat_hw: tuple[int, int]) -> list[ViewQuery]:
    out = []
    for geom, slabs in zip(setup.geoms, setup.slabs):
        u, v, d = project_points(geom, points)
        out.append(ViewQuery(feature_coords(u, v, geom.detector_px, feat_hw), d, depth_weights(d, slabs)))
    return out


def query_pixel_aligned(plane: Tensor, geom: ConeBeamGeometry, points: np.ndarray) -> Tensor:
    """Features (N, C) of one (C, h, w) plane at the projections of ``points``."""
    u, v, _ = project_points(geom, points)
    coords = feature_coords(u, v, geom.detector_px, plane.shape[-2:])
    return ad.bilinear_sample(plane, coords)


def fuse_depth_weighted(features: Sequence[Tensor], weights: np.ndarray) -> Tensor:
    """``sum_k w[:, k] * f_k`` with per-point constant weights (N, K)."""
    weights = np.asarray(weights)
    if weights.ndim == 1:
        weights = np.broadcast_to(weights, (features[0].shape[0], len(weights)))
    if weights.shape[-1] != len(features):
        raise ValueError(f"got {len(features)} feature folds for {weights.shape[-1]} slabs")
    return ad.weighted_sum(features, [weights[:, k : k + 1] for k in range(len(features))])


def _sample_views(planes: Tensor, queries: list[ViewQuery], per_view: int) -> Tensor:
    """Sample (M*per_view, C, h, w) planes; view i's planes use view i's coords -> (M*per_view, N, C)."""
    coords = np.concatenate([np.broadcast_to(q.coords, (per_view, *q.coords.shape)) for q in queries], axis=0)
    return ad.bilinear_sample(planes, coords)


def _fused_per_view(sampled: Tensor, queries: list[ViewQuery], K: int) -> list[Tensor]:
    n, c = sampled.shape[1], sampled.shape[2]
    fused = []
    for i, q in enumerate(queries):
        folds = [ad.reshape(ad.slice_axis(sampled, 0, i * K + k, i * K + k + 1), (n, c)) for k in range(K)]
        fused.append(folds[0] if K == 1 else fuse_depth_weighted(folds, q.weights))
    return fused


def recon_loss(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over points and both channels of the squared occupancy error."""
    if pred is None:
        raise ad.UsageError("recon_loss needs predictions")
    return ad.reduce_mean(ad.square(ad.sub(pred, Tensor(np.asarray(labels, dtype=pred.dtype)))))


def distill_loss(teacher: np.ndarray, student: Tensor) -> Tensor:
    """``(1/K) sum_k mean((T_k - S_k)^2)`` over K equally sized planes; teacher is a constant.

    With equal plane sizes this is the mean over the whole (K, C, h, w) stack.
    """
    teacher = np.asarray(teacher)
    if teacher.shape != student.shape:
        raise ValueError(f"distillation shapes differ: teacher {teacher.shape} vs student {student.shape}")
    return ad.reduce_mean(ad.square(ad.sub(Tensor(teacher.astype(student.dtype)), student)))


def total_loss(recon: Tensor, distill: Sequence[Tensor], alpha: float, M: int, L: int) -> Tensor:
    """``recon + alpha / (M L) * sum(distill)`` over the M x L per-view, per-layer terms."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0 or not distill:
        return recon
    coef = alpha / (M * L)
    return ad.weighted_sum([recon, *distill], [1.0] + [coef] * len(distill))


# ---------------------------------------------------------------------------
# models


@dataclass
class TeacherModel:
    params: ParamStore
    channels: int
    K: int
    hidden: tuple[int, ...] = (64, 64, 32)

    @classmethod
    def create(cls, channels: int, K: int, M: int, seed: int, hidden=(64, 64, 32)) -> "TeacherModel":
        rng = np.random.default_rng([seed, 0x7EAC])
        params = ParamStore()
        init_encoder(params, "enc", channels, rng)
        init_mlp(params, "mlp", M * channels, hidden, rng)
        return cls(params, channels, K, tuple(hidden))

    def encode(self, aug_images: np.ndarray) -> list[Tensor]:
        """aug_images (M, K, H, W) normalised -> stage outputs over the M*K images."""
        m, k, h, w = aug_images.shape
        if k != self.K:
            raise ValueError(f"teacher built for K={self.K}, got {k} slab images")
        return encode(self.params, "enc", Tensor(aug_images.reshape(m * k, 1, h, w).astype(np.float32)))

    def forward(self, aug_images: np.ndarray, queries: list[ViewQuery]) -> tuple[Tensor, list[Tensor]]:
        stages = self.encode(aug_images)
        sampled = _sample_views(stages[-1], queries, self.K)
        fused = _fused_per_view(sampled, queries, self.K)
        x = fused[0] if len(fused) == 1 else ad.concat(fused, axis=-1)
        return mlp_forward(self.params, "mlp", x), stages

    def feature_stacks(self, aug_images: np.ndarray, layers: Sequence[int]) -> dict[int, np.ndarray]:
        """Detached teacher planes per distillation stage, each (M*K, c, h, w)."""
        stages = self.encode(aug_images)
        return {j: stages[j - 1].data.copy() for j in layers}


@dataclass
class StudentModel:
    """Student network; ``spatial=False`` keeps only the additional extractor (the
    no-spatial-division baseline: one encoder per original image, direct lookup)."""

    params: ParamStore
    channels: int
    K: int
    layers: tuple[int, ...] = (3,)
    hidden: tuple[int, ...] = (64, 64, 32)
    spatial: bool = True

    @classmethod
    def create(
        cls, channels: int, K: int, M: int, seed: int, layers=(3,), hidden=(64, 64, 32), spatial: bool = True
    ) -> "StudentModel":
        rng = np.random.default_rng([seed, 0x57D7])
        params = ParamStore()
        if spatial:
            init_encoder(params, "enc_s", channels, rng)
        init_encoder(params, "enc_add", channels, rng)
        if spatial:
            for j in sorted(set(layers) | {3}):
                c = stage_channels(j, channels)
                params.add(f"expand{j}.w", _he(rng, (K * c, c, 1, 1), c))
                params.add(f"expand{j}.b", np.zeros(K * c))
        init_mlp(params, "mlp", M * (2 if spatial else 1) * channels, hidden, rng)
        return cls(params, channels, K, tuple(layers), tuple(hidden), spatial)

    def expand(self, stage_out: Tensor, j: int) -> Tensor:
        """(M, c, h, w) -> 1x1 conv to K*c channels -> (M*K, c, h, w), k-major channel groups."""
        m, c, h, w = stage_out.shape
        e = ad.conv2d(stage_out, self.params[f"expand{j}.w"], self.params[f"expand{j}.b"])
        return ad.reshape(e, (m * self.K, c, h, w))

    def encode(self, images: np.ndarray) -> tuple[dict[int, Tensor], Tensor]:
        """images (M, H, W) -> expanded student planes per stage, additional-branch planes."""
        m, h, w = images.shape
        x = Tensor(images.reshape(m, 1, h, w).astype(np.float32))
        expanded = {}
        if self.spatial:
            s_stages = encode(self.params, "enc_s", x)
            expanded = {j: self.expand(s_stages[j - 1], j) for j in sorted(set(self.layers) | {3})}
        add_planes = encode(self.params, "enc_add", x)[-1]
        return expanded, add_planes

    def point_features(self, expanded: dict[int, Tensor], add_planes: Tensor, queries: list[ViewQuery]) -> list[Tensor]:
        """Per-view point features in MLP input order: ``[fused, additional]`` per view."""
        add = _sample_views(add_planes, queries, 1)
        n, c = add.shape[1], add.shape[2]
        fused = _fused_per_view(_sample_views(expanded[3], queries, self.K), queries, self.K) if self.spatial else None
        feats = []
        for i in range(len(queries)):
            if fused is not None:
                feats.append(fused[i])
            feats.append(ad.reshape(ad.slice_axis(add, 0, i, i + 1), (n, c)))
        return feats

    def forward(
        self,
        images: np.ndarray,
        queries: list[ViewQuery],
        teacher_stacks: dict[int, np.ndarray] | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        expanded, add_planes = self.encode(images)
        distill = []
        if teacher_stacks is not None:
            if not self.spatial:
                raise ValueError("a student without the spatial branch has nothing to distil into")
            K = self.K
            for i in range(len(queries)):
                for j in self.layers:
                    s = ad.slice_axis(expanded[j], 0, i * K, (i + 1) * K)
                    distill.append(distill_loss(teacher_stacks[j][i * K : (i + 1) * K], s))
        return predict_occupancy(self.params, self.point_features(expanded, add_planes, queries)), distill


def predict_occupancy(params: ParamStore, per_view_features: Sequence[Tensor], prefix: str = "mlp") -> Tensor:
    """Concatenate per-view point features (N, c_i) and run the occupancy MLP -> (N, 2)."""
    x = per_view_features[0] if len(per_view_features) == 1 else ad.concat(per_view_features, axis=-1)
    return mlp_forward(params, prefix, x)


# ---------------------------------------------------------------------------
# dense inference


def _grid_chunk(space: ReconSpace, R: int, start: int, stop: int) -> np.ndarray:
    idx = np.arange(start, stop)
    ix, iy, iz = idx // (R * R), (idx // R) % R, idx % R
    lo, ext = space.lo_arr, space.extent
    ijk = np.stack([ix, iy, iz], axis=1)
    return lo + (ijk + 0.5) * ext / R


def infer_occupancy_grid(
    model: "StudentModel | TeacherModel",
    setup: Setup,
    images: np.ndarray,
    R: int,
    chunk: int = 8192,
) -> np.ndarray:
    """Evaluate the field at R^3 voxel centers of the reconstruction space -> (R, R, R, 2).

    ``images`` are the normalised originals (M, H, W) for a student, or the
    slab stacks (M, K, H, W) for a teacher.  Features are encoded once; points
    are generated and evaluated chunk by chunk, so scratch memory does not
    grow with R.
    """
    if R < 8:
        raise ValueError(f"grid resolution must be >= 8, got {R}")
    out = np.empty(R**3 * 2, dtype=np.float32).reshape(R**3, 2)
    if isinstance(model, StudentModel):
        expanded, add_planes = model.encode(images)
        feat_hw = add_planes.shape[-2:]
    else:
        planes = model.encode(images)[-1]
        feat_hw = planes.shape[-2:]
    for start in range(0, R**3, chunk):
        stop = min(start + chunk, R**3)
        queries = view_queries(setup, _grid_chunk(setup.space, R, start, stop), feat_hw)
        if isinstance(model, StudentModel):
            feats = model.point_features(expanded, add_planes, queries)
        else:
            feats = _fused_per_view(_sample_views(planes, queries, model.K), queries, model.K)
        out[start:stop] = predict_occupancy(model.params, feats).data
    return out.reshape(R, R, R, 2)
