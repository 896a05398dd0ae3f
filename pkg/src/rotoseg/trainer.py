"""Staged training: MIM pretraining, segmentation fine-tuning, weight transfer.

Synthetic ellipsoid phantoms stand in for real scans. A stage draws its
initialization, data crops, MIM masks and DropPath decisions from four
independent streams spawned from ``StageConfig.seed``, so a stage is fully
reproducible from its config and data.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import from_mapping, to_mapping
from .errors import ConfigError, ContractError, DataError, NumericalError
from .io import Volume, read_checkpoint, write_checkpoint
from .model import ModelConfig, ParamStore, forward_mim, forward_seg, init_params, trainable_names
from .objectives import dice_ce, make_mask_plan, mim_loss
from .optim import OptimizerState, adamw_step
from .preprocess import normalize_zscore
from .tensor import Tensor, clip_global_norm

log = logging.getLogger(__name__)

STAGE_KINDS = ("pretrain_mim", "finetune_seg")
TRANSFER_POLICIES = ("encoder_only", "all_matching")


# -- phantoms ------------------------------------------------------------------


@dataclass
class PhantomSpec:
    """Ellipsoid organs on a noisy background.

    Centers are drawn as fractions of each extent from ``center_range`` and
    radii (in voxels) as fractions of each extent from ``radius_range``.
    Organ ``k`` (1-based) gets intensity ``intensity_means[k-1]`` (default
    ``k``) plus per-voxel texture of std ``intensity_stds[k-1]`` (default 0).
    Overlaps go to the higher label.
    """

    extents: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organs: int = 3
    center_range: tuple[float, float] = (0.25, 0.75)
    radius_range: tuple[float, float] = (0.15, 0.25)
    intensity_means: tuple[float, ...] | None = None
    intensity_stds: tuple[float, ...] | None = None
    background: float = 0.0
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.organs < 0:
            raise ConfigError("organ count must be non-negative")
        lo, hi = self.radius_range
        if lo <= 0 or hi < lo:
            raise ConfigError(f"radius_range must satisfy 0 < lo <= hi, got {self.radius_range}")
        for name in ("intensity_means", "intensity_stds"):
            value = getattr(self, name)
            if value is not None and len(value) != self.organs:
                raise ConfigError(f"{name} needs {self.organs} entries, got {len(value)}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Deterministic (image, label) pair; image float32, labels uint16."""
    rng = np.random.default_rng(spec.seed)
    ext = np.array(spec.extents, dtype=np.float64)
    grid = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in spec.extents), indexing="ij")
    labels = np.zeros(spec.extents, dtype=np.uint16)
    image = np.full(spec.extents, spec.background, dtype=np.float64)
    means = spec.intensity_means or tuple(float(k) for k in range(1, spec.organs + 1))
    stds = spec.intensity_stds or (0.0,) * spec.organs
    for k in range(1, spec.organs + 1):
        center = rng.uniform(*spec.center_range, size=3) * ext
        radii = rng.uniform(*spec.radius_range, size=3) * ext
        if np.any(radii <= 0):
            raise ConfigError(f"organ {k} has degenerate radii {radii}")
        inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0
        labels[inside] = k
    for k in range(1, spec.organs + 1):
        region = labels == k
        image[region] = means[k - 1]
        if stds[k - 1] > 0:
            image[region] += rng.normal(0.0, stds[k - 1], size=int(region.sum()))
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return Volume(image.astype(np.float32), spec.spacing), Volume(labels, spec.spacing)


def remap_labels(labels: np.ndarray, label_map: Mapping[int, int] | None) -> np.ndarray:
    """Apply ``label_map``; labels without an entry become background."""
    if not label_map:
        return labels
    lut = np.zeros(int(max(labels.max(initial=0), max(label_map))) + 1, dtype=np.uint16)
    for src, dst in label_map.items():
        lut[src] = dst
    return lut[labels]


class CaseSource:
    """Samples (image [1,D,H,W], labels [D,H,W]) training crops from a case list.

    Images are z-score normalized once at construction.
    """

    def __init__(self, cases: Sequence[tuple[Volume, Volume | None]], crop=None):
        if not cases:
            raise DataError("no training cases")
        self.images = [normalize_zscore(img).channel_first() for img, _ in cases]
        self.labels = [None if lab is None else np.asarray(lab.array) for _, lab in cases]
        self.crop = None if crop is None else tuple(int(c) for c in crop)
        for img in self.images:
            if self.crop and any(c > e for c, e in zip(self.crop, img.shape[1:])):
                raise DataError(f"crop {self.crop} larger than case extents {img.shape[1:]}")

    @classmethod
    def from_phantoms(cls, spec: PhantomSpec, cases: int = 1, crop=None) -> "CaseSource":
        return cls([generate_phantom(replace(spec, seed=spec.seed + i)) for i in range(cases)], crop)

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, rng: np.random.Generator):
        i = int(rng.integers(len(self.images))) if len(self.images) > 1 else 0
        img, lab = self.images[i], self.labels[i]
        if self.crop is None:
            return img, lab
        origin = [int(rng.integers(e - c + 1)) for e, c in zip(img.shape[1:], self.crop)]
        sl = tuple(slice(o, o + c) for o, c in zip(origin, self.crop))
        return img[(slice(None),) + sl], None if lab is None else lab[sl]


# -- folds ---------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignment: dict  # case id -> fold index

    def test_cases(self, fold: int) -> list:
        return [c for c, f in self.assignment.items() if f == fold]

    def train_cases(self, fold: int) -> list:
        return [c for c, f in self.assignment.items() if f != fold]

    @property
    def fold_sizes(self) -> list[int]:
        return [len(self.test_cases(f)) for f in range(self.k)]


def make_folds(case_ids: Sequence, k: int = 5, seed: int = 0) -> FoldSplit:
    """Shuffle cases with ``seed`` and deal them round-robin into ``k`` folds."""
    ids = list(case_ids)
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if len(set(ids)) != len(ids):
        raise DataError("case ids must be unique")
    if len(ids) < k:
        raise DataError(f"{len(ids)} cases cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    fold_of = {int(j): i % k for i, j in enumerate(order)}
    return FoldSplit(k, {ids[j]: fold_of[j] for j in range(len(ids))})


# -- stages --------------------------------------------------------------------


@dataclass
class StageConfig:
    stage_kind: str = "pretrain_mim"
    epochs: int = 1000
    steps_per_epoch: int = 250
    batch_size: int = 2
    lr: float = 3e-4
    weight_decay: float = 5e-2
    clip_norm: float = 1.0
    mask_ratio: float = 0.6
    num_classes: int | None = None
    seed: int = 0
    transfer_from: str | None = None
    transfer_policy: str | None = None
    label_map: dict[int, int] | None = None
    crop: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.stage_kind not in STAGE_KINDS:
            raise ConfigError(f"stage_kind must be one of {STAGE_KINDS}, got {self.stage_kind!r}")
        if (self.transfer_from is None) != (self.transfer_policy is None):
            raise ConfigError("transfer_policy must be given exactly when transfer_from is")
        if self.transfer_policy is not None and self.transfer_policy not in TRANSFER_POLICIES:
            raise ConfigError(f"transfer_policy must be one of {TRANSFER_POLICIES}")
        if self.epochs < 0 or self.steps_per_epoch < 0 or self.batch_size < 1:
            raise ConfigError("epochs and steps_per_epoch must be >= 0, batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ConfigError("lr and weight_decay must be >= 0, clip_norm > 0")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "StageConfig":
        return from_mapping(cls, values, strict=False)


@dataclass
class TransferReport:
    policy: str
    dispositions: dict[str, str] = field(default_factory=dict)

    def names(self, disposition: str) -> list[str]:
        return [n for n, d in self.dispositions.items() if d == disposition]

    @property
    def copied(self) -> list[str]:
        return self.names("copied")

    @property
    def reinitialized(self) -> list[str]:
        return self.names("reinitialized")

    @property
    def skipped(self) -> list[str]:
        return [n for n, d in self.dispositions.items() if d.startswith("skipped")]

    def format(self) -> str:
        return "".join(f"{d}\t{n}\n" for n, d in self.dispositions.items())


def transfer_weights(target: ParamStore, source, policy: str) -> TransferReport:
    """Copy matching tensors from ``source`` (checkpoint path or mapping) into ``target``.

    ``target`` must already hold a fresh initialization: anything not copied
    keeps it. ``encoder_only`` copies only ``enc.`` tensors; ``all_matching``
    copies every tensor whose name and shape match.
    """
    if policy not in TRANSFER_POLICIES:
        raise ConfigError(f"unknown transfer policy {policy!r}")
    if isinstance(source, (str, Path)):
        source, _ = read_checkpoint(source)
    src = {n: (t.data if isinstance(t, Tensor) else np.asarray(t)) for n, t in source.items()}
    report = TransferReport(policy)
    for name, t in target.items():
        if policy == "encoder_only" and not name.startswith("enc."):
            report.dispositions[name] = "reinitialized"
        elif name not in src:
            report.dispositions[name] = "skipped:missing"
        elif src[name].shape != t.shape:
            report.dispositions[name] = "skipped:shape_mismatch"
        else:
            t.data = np.array(src[name], dtype=t.dtype)
            report.dispositions[name] = "copied"
    if not report.copied:
        raise ContractError("transfer matched no tensors; is this the right checkpoint?")
    return report


@dataclass
class StageResult:
    params: ParamStore
    model_cfg: ModelConfig
    losses: list[float]
    grad_norms: list[float]
    metadata: dict[str, str]
    transfer: TransferReport | None = None


def stage_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(4)
    return {k: np.random.default_rng(s) for k, s in zip(("init", "data", "mask", "drop"), children)}


def run_stage(stage: StageConfig, data: CaseSource, model_cfg: ModelConfig, out_path=None) -> StageResult:
    """Run ``stage.total_steps`` AdamW steps and optionally write a checkpoint."""
    if stage.num_classes is not None:
        model_cfg = replace(model_cfg, num_classes=stage.num_classes)
    rngs = stage_streams(stage.seed)
    params = init_params(model_cfg, rngs["init"])
    transfer = None
    if stage.transfer_from is not None:
        transfer = transfer_weights(params, stage.transfer_from, stage.transfer_policy)
        log.info("transfer (%s): %d copied, %d reinitialized, %d skipped", stage.transfer_policy,
                 len(transfer.copied), len(transfer.reinitialized), len(transfer.skipped))

    mim = stage.stage_kind == "pretrain_mim"
    names = trainable_names(params, "mim" if mim else "seg")
    train = {n: params[n] for n in names}
    opt = OptimizerState.create(train, lr=stage.lr, weight_decay=stage.weight_decay)
    losses: list[float] = []
    norms: list[float] = []
    last_finite = None

    for step in range(stage.total_steps):
        for p in train.values():
            p.grad = None
        total = None
        for _ in range(stage.batch_size):
            image, labels = data.sample(rngs["data"])
            if mim:
                n_tokens = int(np.prod([e // p for e, p in zip(image.shape[1:], model_cfg.patch_size)]))
                plan = make_mask_plan(n_tokens, stage.mask_ratio, rng=rngs["mask"])
                recon = forward_mim(image, plan.mask, params, model_cfg, True, rngs["drop"])
                loss = mim_loss(recon, image, plan, model_cfg.patch_size)
            else:
                if labels is None:
                    raise DataError("segmentation stage needs label volumes")
                logits = forward_seg(image, params, model_cfg, True, rngs["drop"])
                loss = dice_ce(logits, remap_labels(labels, stage.label_map))
            total = loss if total is None else total + loss
        total = total * (1.0 / stage.batch_size)
        value = total.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at step {step}; last finite loss {last_finite}")
        total.backward()
        grads = {n: p.grad for n, p in train.items()}
        norms.append(clip_global_norm(grads.values(), stage.clip_norm))
        adamw_step(train, grads, opt)
        losses.append(value)
        last_finite = value
        if step % 50 == 0 or step == stage.total_steps - 1:
            log.info("step %d loss %.5f grad-norm %.4f", step, value, norms[-1])

    metadata = {
        "stage_kind": stage.stage_kind,
        "seed": str(stage.seed),
        "step_count": str(opt.step_count),
        "rng_state": json.dumps(rngs["data"].bit_generator.state, sort_keys=True),
        **to_mapping(model_cfg, "model."),
        **{k: v for k, v in to_mapping(stage, "stage.").items() if k != "stage.transfer_from"},
    }
    for p in params.values():
        p.grad = None
    if out_path is not None:
        write_checkpoint(out_path, params, metadata)
    return StageResult(params, model_cfg, losses, norms, metadata, transfer)


def load_model(path) -> tuple[ParamStore, ModelConfig, dict[str, str]]:
    """Rebuild a ParamStore and ModelConfig from a checkpoint written by run_stage."""
    tensors, metadata = read_checkpoint(path)
    cfg = from_mapping(ModelConfig, metadata, prefix="model.", strict=False)
    params = {n: Tensor(a, requires_grad=True, dtype=np.float32, name=n) for n, a in tensors.items()}
    expected = init_params(cfg, np.random.default_rng(0))
    for name, t in expected.items():
        if name not in params or params[name].shape != t.shape:
            raise DataError(f"checkpoint tensor {name!r} missing or mis-shaped for its model config")
    return params, cfg, metadata
