"""Staged training, evaluation and experiment drivers.

The attention crop is not differentiable, so a view model is trained in
stages: ``global`` (global backbone and head), ``local`` (global frozen, local
backbone and head on attention crops), ``combine`` (both backbones frozen,
average and fusion heads) and ``multiview`` (three frozen view models, a
fusion head over their concatenated features). Every stage writes one
self-contained checkpoint and keeps the epoch with the best validation R²,
counting the untrained starting point as epoch 0.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import functional as F
from .attention import DEFAULT_COVERAGE, DEFAULT_TAU, Box
from .backbone import RegressionHead, build_backbone, get_profile
from .branches import (BRANCH_MODES, MULTIVIEW_MODES, NormStats, ViewModel, branch_features, check_mode,
                       global_forward, multiview_combine, roi_crops)
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Manifest, Sample, dataset_digest
from .errors import CheckpointError, ConfigurationError, TrainingError
from .metrics import iou, mae, r2_score
from .optim import Adam
from .phantom import VIEWS, SplitMix64, derive_seed
from .tensor import Tensor

log = logging.getLogger(__name__)

STAGES = ("global", "local", "combine", "multiview")
STAGE_KEYS = {"global": 1, "local": 2, "combine": 3, "multiview": 4}
CHECKPOINT_SUFFIX = ".gagb"
EVAL_BATCH = 32


@dataclass
class TrainConfig:
    profile: str = "desk"
    variant: str = "resnet18"
    view: str = "axial"
    branch: str = "global"
    tau: float | None = None
    kappa: float = DEFAULT_COVERAGE
    shared_local: bool = False
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    data_dir: str | Path = "data"
    out: str | Path = "checkpoints"

    def __post_init__(self):
        if self.tau is None:
            self.tau = DEFAULT_TAU.get(self.variant, 0.3)

    def validate(self) -> None:
        get_profile(self.profile)
        if self.variant not in DEFAULT_TAU:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {sorted(DEFAULT_TAU)}")
        if self.view not in VIEWS:
            raise ConfigurationError(f"unknown view {self.view!r}; expected one of {VIEWS}")
        check_mode(self.branch)
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.kappa <= 1.0:
            raise ConfigurationError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2 (batch norm), got {self.batch_size}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigurationError(f"lr must be a finite non-negative number, got {self.lr}")


def checkpoint_path(out, stage: str, view: str | None = None) -> Path:
    """Conventional location of a stage checkpoint under ``out``."""
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage == "multiview":
        return Path(out) / f"multiview{CHECKPOINT_SUFFIX}"
    return Path(out) / view / f"{stage}{CHECKPOINT_SUFFIX}"


@dataclass
class Split:
    samples: list[Sample]
    images: np.ndarray  # float32 [N, 1, S, S], raw gray levels
    ages: np.ndarray  # float64 days

    def __len__(self):
        return len(self.samples)


def load_split(manifest: Manifest, view: str, split: str, size: int | None = None) -> Split:
    samples = sorted(manifest.select(view, split), key=lambda s: s.sample_id)
    if not samples:
        raise ConfigurationError(f"no {view!r} samples in split {split!r}")
    if split == "val" and len(samples) < 2:
        raise ConfigurationError(f"validation split has {len(samples)} {view!r} sample; selecting by R2 "
                                 "needs at least 2 (generate more subjects)")
    images = np.stack([manifest.image(s) for s in samples]).astype(np.float32)[:, None]
    if size is not None and images.shape[-2:] != (size, size):
        raise ConfigurationError(
            f"images are {images.shape[-2]}x{images.shape[-1]} but the model profile expects {size}x{size}")
    return Split(samples, images, np.array([s.age_days for s in samples], dtype=np.float64))


@dataclass
class TrainResult:
    stage: str
    path: Path
    history: list[dict]
    best_epoch: int
    best_val_r2: float
    seconds: float
    model: object = None


# ---------------------------------------------------------------------------
# generic loop


def batches(n: int, batch_size: int, seed: int, stage: str, epoch: int) -> list[np.ndarray]:
    """Seeded epoch order cut into batches; a trailing singleton joins the previous batch."""
    order = np.array(SplitMix64.stream(seed, STAGE_KEYS[stage], epoch).shuffle(list(range(n))), dtype=np.int64)
    cuts = list(range(0, n, batch_size))
    out = [order[c:c + batch_size] for c in cuts]
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def fit(params: list[Tensor], loss_fn: Callable[[np.ndarray], Tensor], n_train: int,
        val_fn: Callable[[], float], snapshot: Callable[[], object], restore: Callable[[object], None],
        config: TrainConfig, stage: str) -> tuple[list[dict], int, float]:
    """Adam over ``params`` with best-validation retention. Returns (history, best epoch, best R²)."""
    if n_train < 2:
        raise ConfigurationError(f"stage {stage!r} needs at least 2 training samples, got {n_train}")
    opt = Adam(params, lr=config.lr)
    best_r2 = val_fn()
    best_epoch, best_state = 0, snapshot()
    history = [{"epoch": 0, "train_loss": float("nan"), "val_r2": best_r2}]
    log.info("%s epoch 0 val_r2=%.4f", stage, best_r2)
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for bi, idx in enumerate(batches(n_train, config.batch_size, config.seed, stage, epoch)):
            loss = loss_fn(idx)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"stage {stage!r}: non-finite loss {value} at epoch {epoch}, batch {bi} "
                                    f"(lr={config.lr}, batch_size={len(idx)})")
            opt.zero_grad()
            loss.backward(params=params)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        r2 = val_fn()
        history.append({"epoch": epoch, "train_loss": total / count, "val_r2": r2})
        log.info("%s epoch %d loss=%.4f val_r2=%.4f", stage, epoch, total / count, r2)
        if r2 > best_r2:
            best_r2, best_epoch, best_state = r2, epoch, snapshot()
    restore(best_state)
    return history, best_epoch, best_r2


def _safe_r2(y_true, y_pred) -> float:
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if not np.all(np.isfinite(y_pred)):
        return -math.inf
    return r2_score(y_true, y_pred)


def _batched(fn: Callable[[np.ndarray], np.ndarray], n: int, size: int = EVAL_BATCH) -> np.ndarray:
    return np.concatenate([fn(np.arange(i, min(i + size, n))) for i in range(0, n, size)])


# ---------------------------------------------------------------------------
# eval-mode feature extraction


@dataclass
class Forward:
    """Everything one eval pass of a view model produces for a split."""

    f_g: np.ndarray
    f_l: np.ndarray | None
    boxes: list[Box]
    fallback: np.ndarray
    crops: np.ndarray | None = None


def forward_split(vm: ViewModel, images: np.ndarray, want_local: bool, keep_crops: bool = False) -> Forward:
    fg, fl, boxes, fb, crops = [], [], [], [], []
    for i in range(0, len(images), EVAL_BATCH):
        x = vm.norm.images(images[i:i + EVAL_BATCH])
        _, feats, fmap = global_forward(vm, Tensor(x), training=False)
        fg.append(feats.data)
        c, rois = roi_crops(vm, x, fmap.data)
        boxes.extend(r.box for r in rois)
        fb.extend(r.fallback for r in rois)
        if keep_crops:
            crops.append(c)
        if want_local:
            _, lf = vm.local_backbone.forward_features(Tensor(c), False)
            fl.append(lf.data)
    return Forward(np.concatenate(fg), np.concatenate(fl) if want_local else None, boxes, np.array(fb),
                   np.concatenate(crops) if keep_crops else None)


def _head_predict(head: RegressionHead, feats: np.ndarray) -> np.ndarray:
    return head(Tensor(feats)).data.astype(np.float64)


# ---------------------------------------------------------------------------
# stages


def _stage_meta(config: TrainConfig, stage: str, best_epoch: int, best_r2: float) -> dict[str, object]:
    return {"stage": stage, "branch": config.branch, "seed": config.seed, "epochs": config.epochs,
            "batch_size": config.batch_size, "lr": config.lr, "best_epoch": best_epoch, "best_val_r2": best_r2}


def load_view_model(path) -> tuple[ViewModel, dict[str, str]]:
    tensors, meta = load_checkpoint(path)
    if meta.get("stage") == "multiview":
        raise CheckpointError(f"{path} is a multi-view checkpoint, not a single-view model")
    return ViewModel.from_tensors(tensors, meta), meta


def _save_view(vm: ViewModel, path: Path, config: TrainConfig, stage: str, best_epoch: int, best_r2: float) -> None:
    save_checkpoint(path, vm.tensors(), {**vm.meta(), **_stage_meta(config, stage, best_epoch, best_r2)})


def train_global(config: TrainConfig, manifest: Manifest, out: Path) -> TrainResult:
    t0 = time.perf_counter()
    profile = get_profile(config.profile)
    train = load_split(manifest, config.view, "train", profile.input_size)
    val = load_split(manifest, config.view, "val", profile.input_size)
    norm = NormStats.fit(train.images, train.ages)
    cfg = profile.backbone_config(config.variant)
    bb = build_backbone(cfg, derive_seed(config.seed, STAGE_KEYS["global"], 0) & 0xFFFFFFFF)
    head = RegressionHead.create(cfg.feature_dim, derive_seed(config.seed, STAGE_KEYS["global"], 1) & 0xFFFFFFFF)
    vm = ViewModel(config.view, config.profile, config.variant, bb, norm, heads={"global": head},
                   tau=config.tau, kappa=config.kappa)
    xtr, ztr = norm.images(train.images), norm.ages_to_z(train.ages)
    xval = norm.images(val.images)

    def loss_fn(idx):
        _, feats = bb.forward_features(Tensor(xtr[idx]), training=True)
        return F.mse_loss(head(feats), Tensor(ztr[idx]))

    def val_fn():
        pred = _batched(lambda idx: _head_predict(head, bb.forward_features(Tensor(xval[idx]))[1].data), len(val))
        return _safe_r2(val.ages, norm.z_to_ages(pred))

    def snapshot():
        return bb.state_dict(), head.state_dict("h")

    def restore(state):
        bb.load_state_dict(state[0])
        head.load_state_dict(state[1], "h")

    params = bb.parameters() + head.parameters()
    history, best_epoch, best_r2 = fit(params, loss_fn, len(train), val_fn, snapshot, restore, config, "global")
    path = out
    _save_view(vm, path, config, "global", best_epoch, best_r2)
    return TrainResult("global", path, history, best_epoch, best_r2, time.perf_counter() - t0, vm)


def _frozen_copy(arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in arrays.items()}


def train_local(config: TrainConfig, manifest: Manifest, out: Path, base: Path) -> TrainResult:
    t0 = time.perf_counter()
    vm, _ = load_view_model(base)
    if vm.view != config.view:
        raise CheckpointError(f"{base} holds view {vm.view!r}, config asks for {config.view!r}")
    vm.tau, vm.kappa = config.tau, config.kappa
    vm.shared_local = config.shared_local
    vm.global_backbone.freeze()
    size = vm.input_size
    train = load_split(manifest, config.view, "train", size)
    val = load_split(manifest, config.view, "val", size)
    # the global branch is frozen, so each image's crop is fixed for the whole stage
    ctr = forward_split(vm, train.images, want_local=False, keep_crops=True).crops
    cval = forward_split(vm, val.images, want_local=False, keep_crops=True).crops
    lb = vm.ensure_local(derive_seed(config.seed, STAGE_KEYS["local"], 0) & 0xFFFFFFFF)
    head = RegressionHead.create(vm.feature_dim, derive_seed(config.seed, STAGE_KEYS["local"], 1) & 0xFFFFFFFF)
    vm.heads["local"] = head
    ztr = vm.norm.ages_to_z(train.ages)
    # a shared backbone is the frozen global one: only the head trains, BN stays in eval mode
    shared = config.shared_local

    def loss_fn(idx):
        _, feats = lb.forward_features(Tensor(ctr[idx]), training=not shared)
        return F.mse_loss(head(feats), Tensor(ztr[idx]))

    def val_fn():
        pred = _batched(lambda idx: _head_predict(head, lb.forward_features(Tensor(cval[idx]))[1].data), len(val))
        return _safe_r2(val.ages, vm.norm.z_to_ages(pred))

    def snapshot():
        return lb.state_dict(), head.state_dict("h")

    def restore(state):
        lb.load_state_dict(state[0])
        head.load_state_dict(state[1], "h")

    params = head.parameters() if shared else lb.parameters() + head.parameters()
    history, best_epoch, best_r2 = fit(params, loss_fn, len(train), val_fn, snapshot, restore, config, "local")
    vm.global_backbone.freeze(False)
    _save_view(vm, out, config, "local", best_epoch, best_r2)
    return TrainResult("local", out, history, best_epoch, best_r2, time.perf_counter() - t0, vm)


def _fit_head(head: RegressionHead, feats_tr: np.ndarray, z_tr: np.ndarray, feats_val: np.ndarray,
              val: Split, norm: NormStats, config: TrainConfig, stage: str) -> tuple[list[dict], int, float]:
    def loss_fn(idx):
        return F.mse_loss(head(Tensor(feats_tr[idx])), Tensor(z_tr[idx]))

    def val_fn():
        return _safe_r2(val.ages, norm.z_to_ages(_head_predict(head, feats_val)))

    def restore(state):
        head.load_state_dict(state, "h")

    return fit(head.parameters(), loss_fn, len(feats_tr), val_fn, lambda: head.state_dict("h"), restore,
               config, stage)


def _average_init(*heads: RegressionHead) -> tuple[np.ndarray, np.ndarray]:
    w = np.mean([h.weight.data for h in heads], axis=0)
    b = np.mean([h.bias.data for h in heads], axis=0)
    return w, b


def train_combine(config: TrainConfig, manifest: Manifest, out: Path, base: Path) -> TrainResult:
    """Fit the average and fusion heads on frozen global and local features.

    Both heads start from the mean of the two single-branch heads: for fusion
    that is ``[W_g/2 | W_l/2]``, which reproduces the mean of the global and
    local predictions before any training.
    """
    t0 = time.perf_counter()
    vm, _ = load_view_model(base)
    if vm.local_backbone is None or "local" not in vm.heads:
        raise CheckpointError(f"{base} has no trained local branch; run the local stage first")
    vm.kappa = config.kappa
    size = vm.input_size
    train = load_split(manifest, config.view, "train", size)
    val = load_split(manifest, config.view, "val", size)
    ftr = forward_split(vm, train.images, want_local=True)
    fval = forward_split(vm, val.images, want_local=True)
    ztr = vm.norm.ages_to_z(train.ages)
    hg, hl = vm.heads["global"], vm.heads["local"]

    w, b = _average_init(hg, hl)
    avg = RegressionHead(Tensor(w.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True))
    fus_w = np.concatenate([hg.weight.data, hl.weight.data], axis=1) * 0.5
    fusion = RegressionHead(Tensor(fus_w.astype(np.float32), requires_grad=True), Tensor(b.copy(), requires_grad=True))

    def rows(fw: Forward, mode: str) -> np.ndarray:
        return branch_features(mode, Tensor(fw.f_g), Tensor(fw.f_l)).data

    h_avg = _fit_head(avg, rows(ftr, "average"), ztr, rows(fval, "average"), val, vm.norm, config, "combine")
    h_fus = _fit_head(fusion, rows(ftr, "fusion"), ztr, rows(fval, "fusion"), val, vm.norm, config, "combine")
    vm.heads["average"], vm.heads["fusion"] = avg, fusion
    history = [{"head": "average", **h} for h in h_avg[0]] + [{"head": "fusion", **h} for h in h_fus[0]]
    meta_cfg = replace(config, branch="fusion")
    _save_view(vm, out, meta_cfg, "combine", h_fus[1], h_fus[2])
    return TrainResult("combine", out, history, h_fus[1], h_fus[2], time.perf_counter() - t0, vm)


def _aligned(manifest: Manifest, split: str, size: int) -> dict[str, Split]:
    per = {v: load_split(manifest, v, split, size) for v in VIEWS}
    ids = [s.sample_id for s in per[VIEWS[0]].samples]
    for v in VIEWS[1:]:
        if [s.sample_id for s in per[v].samples] != ids:
            raise ConfigurationError(f"split {split!r}: view {v!r} does not cover the same subjects as {VIEWS[0]!r}")
    return per


def view_row_features(vm: ViewModel, images: np.ndarray, branch: str) -> tuple[np.ndarray, Forward]:
    fw = forward_split(vm, images, want_local=branch != "global")
    return branch_features(branch, Tensor(fw.f_g), None if fw.f_l is None else Tensor(fw.f_l)).data, fw


@dataclass
class MultiViewModel:
    views: dict[str, ViewModel]
    branch: str = "global"
    fusion: RegressionHead | None = None

    @property
    def norm(self) -> NormStats:
        return self.views[VIEWS[0]].norm

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for v in VIEWS:
            out.update(self.views[v].tensors(prefix=f"{v}."))
        if self.fusion is not None:
            out.update(self.fusion.state_dict("multiview.fusion"))
        return out

    def meta(self) -> dict[str, object]:
        first = self.views[VIEWS[0]]
        meta = {"profile": first.profile, "variant": first.variant, "view": "all", "branch": self.branch,
                "tau": first.tau, "kappa": first.kappa, **self.norm.to_meta()}
        for v in VIEWS:
            for k, val in self.views[v].meta().items():
                meta[f"{v}.{k}"] = val
        return meta

    @classmethod
    def from_checkpoint(cls, tensors: Mapping[str, np.ndarray], meta: Mapping[str, str]) -> "MultiViewModel":
        views = {}
        for v in VIEWS:
            sub = {k[len(v) + 1:]: val for k, val in meta.items() if k.startswith(f"{v}.")}
            views[v] = ViewModel.from_tensors(tensors, sub, prefix=f"{v}.")
        fusion = None
        if "multiview.fusion.weight" in tensors:
            fusion = RegressionHead.create(tensors["multiview.fusion.weight"].shape[1], 0)
            fusion.load_state_dict(tensors, "multiview.fusion")
        return cls(views, meta.get("branch", "global"), fusion)


def load_view_models(base: Path, stage_hint: Sequence[str] = ("combine", "local", "global")) -> dict[str, ViewModel]:
    """The most complete single-view checkpoint of every view under ``base``."""
    views = {}
    for v in VIEWS:
        for stage in stage_hint:
            p = checkpoint_path(base, stage, v)
            if p.exists():
                views[v] = load_view_model(p)[0]
                break
        else:
            raise CheckpointError(f"no checkpoint for view {v!r} under {base}; train all three views first")
    return views


def train_multiview(config: TrainConfig, manifest: Manifest, out: Path, base: Path) -> TrainResult:
    """Fit a linear head on the concatenated per-view features of ``config.branch``.

    The head starts as block averaging, ``[W_a/3 | W_s/3 | W_c/3]``, which
    reproduces the multi-view average before training.
    """
    t0 = time.perf_counter()
    views = load_view_models(base)
    for vm in views.values():
        vm.head(config.branch)
    size = views[VIEWS[0]].input_size
    train, val = _aligned(manifest, "train", size), _aligned(manifest, "val", size)
    ftr = np.concatenate([view_row_features(views[v], train[v].images, config.branch)[0] for v in VIEWS], axis=1)
    fval = np.concatenate([view_row_features(views[v], val[v].images, config.branch)[0] for v in VIEWS], axis=1)
    heads = [views[v].heads[config.branch] for v in VIEWS]
    w = np.concatenate([h.weight.data for h in heads], axis=1) / 3.0
    b = np.mean([h.bias.data for h in heads], axis=0)
    fusion = RegressionHead(Tensor(w.astype(np.float32), requires_grad=True),
                            Tensor(b.astype(np.float32), requires_grad=True))
    mv = MultiViewModel(views, config.branch, fusion)
    ztr = mv.norm.ages_to_z(train[VIEWS[0]].ages)
    history, best_epoch, best_r2 = _fit_head(fusion, ftr, ztr, fval, val[VIEWS[0]], mv.norm, config, "multiview")
    save_checkpoint(out, mv.tensors(), {**mv.meta(), **_stage_meta(config, "multiview", best_epoch, best_r2)})
    return TrainResult("multiview", out, history, best_epoch, best_r2, time.perf_counter() - t0, mv)


def train_stage(config: TrainConfig, stage: str, manifest: Manifest | None = None, base=None,
                out=None) -> TrainResult:
    """Run one training stage and write its checkpoint.

    ``base`` is the upstream checkpoint (the global checkpoint for ``local``,
    the local checkpoint for ``combine``) or, for ``multiview``, the directory
    holding the per-view checkpoints. It defaults to the conventional path
    under ``config.out``; ``out`` likewise defaults to the stage's
    conventional path.
    """
    config.validate()
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if manifest is None:
        manifest = Manifest.read(config.data_dir)
    out = Path(out) if out is not None else checkpoint_path(config.out, stage, config.view)
    if stage == "global":
        return train_global(config, manifest, out)
    if stage == "multiview":
        base = Path(base) if base is not None else Path(config.out)
        return train_multiview(config, manifest, out, base)
    upstream = {"local": "global", "combine": "local"}[stage]
    base = Path(base) if base is not None else checkpoint_path(config.out, upstream, config.view)
    if not base.exists():
        raise CheckpointError(f"stage {stage!r} needs the {upstream!r} checkpoint, not found at {base}")
    return (train_local if stage == "local" else train_combine)(config, manifest, out, base)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    r2: float
    mae: float
    mean_iou: float
    mean_crop_area: float
    fallback_rate: float
    age_true: np.ndarray
    age_pred: np.ndarray
    extra: dict = field(default_factory=dict)

    def csv(self) -> str:
        lines = ["age_true,age_pred"]
        lines += [f"{t:.2f},{p:.4f}" for t, p in zip(self.age_true, self.age_pred)]
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.csv().encode("utf-8"))
        return path

    def summary(self) -> str:
        return f"R2={self.r2:.4f} MAE={self.mae:.2f} days"


def _box_stats(fw: Forward, samples: Sequence[Sample]) -> tuple[float, float, float]:
    ious = [iou(b, s.gt_box) for b, s in zip(fw.boxes, samples)]
    return float(np.mean(ious)), float(np.mean([b.area for b in fw.boxes])), float(np.mean(fw.fallback))


def evaluate_view(vm: ViewModel, manifest: Manifest, split: str = "test", branch: str = "global") -> EvalReport:
    check_mode(branch)
    head = vm.head(branch)
    data = load_split(manifest, vm.view, split, vm.input_size)
    feats, fw = view_row_features(vm, data.images, branch)
    pred = vm.norm.z_to_ages(_head_predict(head, feats))
    m_iou, area, fb = _box_stats(fw, data.samples)
    return EvalReport(r2_score(data.ages, pred), mae(data.ages, pred), m_iou, area, fb, data.ages, pred)


def evaluate_multiview(mv: MultiViewModel, manifest: Manifest, split: str = "test", mode: str = "average",
                       branch: str | None = None) -> EvalReport:
    check_mode(mode, MULTIVIEW_MODES, "multi-view mode")
    branch = mv.branch if branch is None else branch
    data = _aligned(manifest, split, mv.views[VIEWS[0]].input_size)
    feats, preds, stats = {}, {}, []
    for v in VIEWS:
        vm = mv.views[v]
        feats[v], fw = view_row_features(vm, data[v].images, branch)
        preds[v] = vm.norm.z_to_ages(_head_predict(vm.head(branch), feats[v]))
        stats.append(_box_stats(fw, data[v].samples))
    if mode == "average":
        pred = multiview_combine("average", preds)
    else:
        if mv.fusion is None or branch != mv.branch:
            raise CheckpointError(f"no multi-view fusion head trained for branch {branch!r}")
        pred = mv.norm.z_to_ages(multiview_combine("fusion", feats, mv.fusion).data)
    ages = data[VIEWS[0]].ages
    m_iou, area, fb = (float(np.mean(c)) for c in zip(*stats))
    per_view = {v: r2_score(ages, preds[v]) for v in VIEWS}
    return EvalReport(r2_score(ages, pred), mae(ages, pred), m_iou, area, fb, ages, pred,
                      {"per_view_r2": per_view})


def evaluate(checkpoint, manifest: Manifest, split: str = "test", branch: str | None = None,
             multiview_mode: str = "average") -> EvalReport:
    """Evaluate a stage checkpoint; single-view unless the checkpoint is multi-view."""
    tensors, meta = load_checkpoint(checkpoint)
    if meta.get("stage") == "multiview":
        return evaluate_multiview(MultiViewModel.from_checkpoint(tensors, meta), manifest, split, multiview_mode,
                                  branch)
    vm = ViewModel.from_tensors(tensors, meta)
    if branch is None:
        branch = meta.get("branch", "global")
    return evaluate_view(vm, manifest, split, branch)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class SweepPoint:
    tau: float
    r2_test: float
    mean_crop_area: float
    mean_iou: float


def threshold_sweep(config: TrainConfig, taus: Sequence[float], out_dir, manifest: Manifest | None = None,
                    base=None) -> list[SweepPoint]:
    """Retrain the local stage at each threshold and score the local branch on the test split.

    Writes ``sweep.csv`` (``tau,r2_test``) and ``crop_area.csv``
    (``tau,mean_crop_area``), both sorted by tau.
    """
    config.validate()
    if manifest is None:
        manifest = Manifest.read(config.data_dir)
    base = Path(base) if base is not None else checkpoint_path(config.out, "global", config.view)
    if not base.exists():
        raise CheckpointError(f"threshold sweep needs a global checkpoint, not found at {base}")
    out_dir = Path(out_dir)
    points = []
    for tau in sorted(set(float(t) for t in taus)):
        cfg = replace(config, tau=tau, branch="local")
        cfg.validate()
        res = train_stage(cfg, "local", manifest, base=base, out=out_dir / f"tau_{tau:g}" / f"local{CHECKPOINT_SUFFIX}")
        rep = evaluate_view(res.model, manifest, "test", "local")
        points.append(SweepPoint(tau, rep.r2, rep.mean_crop_area, rep.mean_iou))
        log.info("sweep tau=%g r2_test=%.4f crop_area=%.1f", tau, rep.r2, rep.mean_crop_area)
    write_sweep(points, out_dir)
    return points


def write_sweep(points: Sequence[SweepPoint], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = sorted(points, key=lambda p: p.tau)
    (out_dir / "sweep.csv").write_bytes(
        ("tau,r2_test\n" + "".join(f"{p.tau:g},{p.r2_test:.6f}\n" for p in points)).encode())
    (out_dir / "crop_area.csv").write_bytes(
        ("tau,mean_crop_area\n" + "".join(f"{p.tau:g},{p.mean_crop_area:.4f}\n" for p in points)).encode())


BENCH_TAUS = (0.05, 0.3, 0.9)


def run_benchmark(data_dir, out_dir, seed: int, epochs: int = 20, variant: str = "resnet18",
                  attention_view: str = "axial", taus: Sequence[float] = BENCH_TAUS) -> dict:
    """One seed of the desk benchmark; writes and returns ``results.json``.

    Trains the global branch of all three views, then for ``attention_view``
    the local branch at every tau in ``taus`` and the combination heads on
    top of the default-tau local branch. Timings are recorded per part.
    """
    manifest = Manifest.read(data_dir)
    out = Path(out_dir)
    default_tau = DEFAULT_TAU[variant]
    base = TrainConfig(profile="desk", variant=variant, epochs=epochs, seed=seed, data_dir=data_dir, out=out)
    res: dict = {"seed": seed, "epochs": epochs, "variant": variant, "attention_view": attention_view,
                 "dataset_digest": dataset_digest(data_dir), "seconds": {}, "global": {}}
    views = [attention_view] + [v for v in VIEWS if v != attention_view]
    for v in views:
        r = train_stage(replace(base, view=v), "global", manifest)
        rep = evaluate_view(r.model, manifest, "test", "global")
        res["seconds"][f"global.{v}"] = r.seconds
        res["global"][v] = {"r2_test": rep.r2, "mae_test": rep.mae, "mean_iou": rep.mean_iou,
                            "best_epoch": r.best_epoch, "val_r2": r.best_val_r2}
    cfg = replace(base, view=attention_view, tau=default_tau)
    gpath = checkpoint_path(out, "global", attention_view)
    t = time.perf_counter()
    points = []
    for tau in sorted(set(taus) | {default_tau}):
        lpath = checkpoint_path(out, "local", attention_view) if tau == default_tau else \
            out / "sweep" / f"tau_{tau:g}" / f"local{CHECKPOINT_SUFFIX}"
        r = train_stage(replace(cfg, tau=tau, branch="local"), "local", manifest, base=gpath, out=lpath)
        rep = evaluate_view(r.model, manifest, "test", "local")
        res["seconds"][f"local.tau_{tau:g}"] = r.seconds
        points.append(SweepPoint(tau, rep.r2, rep.mean_crop_area, rep.mean_iou))
    write_sweep([p for p in points if p.tau in taus], out / "sweep")
    res["sweep"] = [asdict(p) for p in points]
    r = train_stage(replace(cfg, branch="fusion"), "combine", manifest)
    res["seconds"]["combine"] = r.seconds
    for mode in BRANCH_MODES:
        rep = evaluate_view(r.model, manifest, "test", mode)
        res[f"branch.{mode}"] = {"r2_test": rep.r2, "mae_test": rep.mae}
        if mode == "fusion":
            rep.write_csv(out / "eval_fusion_test.csv")
    mv = MultiViewModel(load_view_models(out, ("global",)), "global")
    rep = evaluate_multiview(mv, manifest, "test", "average", "global")
    res["multiview.average"] = {"r2_test": rep.r2, "mae_test": rep.mae, "per_view_r2": rep.extra["per_view_r2"]}
    s = res["seconds"]
    res["seconds"]["attention_part"] = s[f"global.{attention_view}"] + s[f"local.tau_{default_tau:g}"] + s["combine"]
    res["seconds"]["total"] = time.perf_counter() - t + sum(s[f"global.{v}"] for v in VIEWS)
    (out / "results.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    return res
