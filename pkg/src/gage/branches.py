"""Global and attention-cropped local branches, and how their outputs combine.

A :class:`ViewModel` owns everything needed to predict age from one imaging
plane: the global backbone (which also supplies the attention map), an
independent local backbone that sees the attention crop, and one linear head
per branch mode. Heads predict z-scored ages; :class:`NormStats` maps back to
days.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attention import DEFAULT_COVERAGE, DEFAULT_TAU, RoiResult, extract_roi
from .backbone import Backbone, RegressionHead, build_backbone, get_profile
from .errors import CheckpointError, ConfigurationError, DimensionError, MissingViewError
from .phantom import VIEWS
from .tensor import Tensor, concat

BRANCH_MODES = ("global", "local", "average", "fusion")
MULTIVIEW_MODES = ("average", "fusion")


def check_mode(mode: str, allowed: Sequence[str] = BRANCH_MODES, what: str = "branch mode") -> str:
    if mode not in allowed:
        raise ConfigurationError(f"unknown {what} {mode!r}; expected one of {tuple(allowed)}")
    return mode


@dataclass(frozen=True)
class NormStats:
    """Pixel and age standardization constants, fitted on the train split."""

    pixel_mean: float
    pixel_std: float
    age_mean: float
    age_std: float

    def __post_init__(self):
        for name in ("pixel_std", "age_std"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigurationError(f"{name} must be a positive finite number, got {v}")

    @classmethod
    def fit(cls, images: np.ndarray, ages: np.ndarray) -> "NormStats":
        images = np.asarray(images, dtype=np.float64)
        ages = np.asarray(ages, dtype=np.float64)
        return cls(float(images.mean()), float(images.std()), float(ages.mean()), float(ages.std()))

    def images(self, x) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float32) - np.float32(self.pixel_mean))
                / np.float32(self.pixel_std)).astype(np.float32)

    def ages_to_z(self, ages) -> np.ndarray:
        return ((np.asarray(ages, dtype=np.float64) - self.age_mean) / self.age_std).astype(np.float32)

    def z_to_ages(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.age_std + self.age_mean

    def to_meta(self) -> dict[str, float]:
        return {"pixel_mean": self.pixel_mean, "pixel_std": self.pixel_std,
                "age_mean": self.age_mean, "age_std": self.age_std}

    @classmethod
    def from_meta(cls, meta: Mapping[str, str]) -> "NormStats":
        try:
            return cls(*(float(meta[k]) for k in ("pixel_mean", "pixel_std", "age_mean", "age_std")))
        except KeyError as exc:
            raise CheckpointError(f"checkpoint metadata lacks normalization key {exc}") from None


@dataclass
class ViewModel:
    view: str
    profile: str
    variant: str
    global_backbone: Backbone
    norm: NormStats
    local_backbone: Backbone | None = None
    heads: dict[str, RegressionHead] = field(default_factory=dict)
    tau: float | None = None
    kappa: float = DEFAULT_COVERAGE
    shared_local: bool = False  # local branch reuses the global backbone's weights

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ConfigurationError(f"unknown view {self.view!r}; expected one of {VIEWS}")
        if self.tau is None:
            self.tau = DEFAULT_TAU[self.variant]
        if self.shared_local:
            self.local_backbone = self.global_backbone
        elif self.local_backbone is not None:
            g, l = self.global_backbone.config, self.local_backbone.config
            if g.input_size != l.input_size or g.feature_dim != l.feature_dim:
                raise ConfigurationError("global and local backbones must share a profile and feature dim")

    @property
    def feature_dim(self) -> int:
        return self.global_backbone.feature_dim

    @property
    def stride(self) -> int:
        return self.global_backbone.config.overall_stride

    @property
    def input_size(self) -> int:
        return self.global_backbone.config.input_size

    @property
    def min_side(self) -> int:
        return get_profile(self.profile).min_side

    def head(self, mode: str) -> RegressionHead:
        check_mode(mode)
        if mode not in self.heads:
            raise CheckpointError(f"view model {self.view!r} has no trained {mode!r} head")
        return self.heads[mode]

    def ensure_local(self, seed: int) -> Backbone:
        if self.shared_local:
            self.local_backbone = self.global_backbone
        elif self.local_backbone is None:
            self.local_backbone = build_backbone(self.global_backbone.config, seed)
        return self.local_backbone

    # -- serialization -------------------------------------------------------
    def tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}global.{k}": v for k, v in self.global_backbone.state_dict().items()}
        if self.local_backbone is not None and not self.shared_local:
            out.update({f"{prefix}local.{k}": v for k, v in self.local_backbone.state_dict().items()})
        for mode in BRANCH_MODES:
            if mode in self.heads:
                out.update(self.heads[mode].state_dict(f"{prefix}head.{mode}"))
        return out

    def meta(self) -> dict[str, object]:
        return {"profile": self.profile, "variant": self.variant, "view": self.view, "tau": self.tau,
                "kappa": self.kappa, "shared_local": int(self.shared_local), **self.norm.to_meta()}

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], meta: Mapping[str, str],
                     prefix: str = "") -> "ViewModel":
        try:
            profile, variant, view = meta["profile"], meta["variant"], meta["view"]
            tau, kappa = float(meta["tau"]), float(meta["kappa"])
            shared = meta.get("shared_local", "0") == "1"
        except KeyError as exc:
            raise CheckpointError(f"checkpoint metadata lacks key {exc}") from None
        cfg = get_profile(profile).backbone_config(variant)

        def backbone(part: str) -> Backbone | None:
            keys = {k[len(prefix) + len(part) + 1:]: v for k, v in tensors.items()
                    if k.startswith(f"{prefix}{part}.")}
            if not keys:
                return None
            bb = build_backbone(cfg, 0)
            try:
                bb.load_state_dict(keys)
            except (KeyError, DimensionError) as exc:
                raise CheckpointError(f"{part} backbone does not match profile {profile!r}/{variant}: {exc}") from None
            return bb

        gb = backbone("global")
        if gb is None:
            raise CheckpointError("checkpoint has no global backbone tensors")
        heads = {}
        for mode in BRANCH_MODES:
            key = f"{prefix}head.{mode}.weight"
            if key in tensors:
                head = RegressionHead.create(tensors[key].shape[1], 0)
                head.load_state_dict(tensors, f"{prefix}head.{mode}")
                heads[mode] = head
        local = None if shared else backbone("local")
        return cls(view, profile, variant, gb, NormStats.from_meta(meta), local, heads, tau, kappa, shared)


# ---------------------------------------------------------------------------


def global_forward(vm: ViewModel, x: Tensor, training: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Return (prediction, pooled features, last-stage feature maps)."""
    fmap, feats = vm.global_backbone.forward_features(x, training)
    y = vm.heads["global"](feats) if "global" in vm.heads else None
    return y, feats, fmap


def roi_crops(vm: ViewModel, x: np.ndarray, feature_maps: np.ndarray) -> tuple[np.ndarray, list[RoiResult]]:
    """Attention crops of each image in ``x`` [N, 1, S, S], resized to S."""
    fmaps = np.asarray(getattr(feature_maps, "data", feature_maps))
    if fmaps.shape[0] != x.shape[0]:
        raise DimensionError(f"{fmaps.shape[0]} feature maps for {x.shape[0]} images")
    rois = [extract_roi(fmaps[i], x[i, 0], vm.tau, vm.kappa, vm.stride, vm.input_size, vm.min_side)
            for i in range(x.shape[0])]
    crops = np.stack([r.crop for r in rois])[:, None].astype(np.float32)
    return crops, rois


def local_forward(vm: ViewModel, x, feature_maps, training: bool = False
                  ) -> tuple[Tensor | None, Tensor, list[RoiResult]]:
    """Crop by attention, then run the local backbone; the crop is a constant."""
    if vm.local_backbone is None:
        raise CheckpointError(f"view model {vm.view!r} has no local backbone")
    crops, rois = roi_crops(vm, np.asarray(getattr(x, "data", x)), feature_maps)
    _, feats = vm.local_backbone.forward_features(Tensor(crops), training)
    y = vm.heads["local"](feats) if "local" in vm.heads else None
    return y, feats, rois


def branch_features(mode: str, f_g: Tensor, f_l: Tensor | None) -> Tensor:
    """The feature vector a given branch mode feeds to its head."""
    check_mode(mode)
    if mode == "global":
        return f_g
    if f_l is None:
        raise ConfigurationError(f"branch mode {mode!r} needs local features")
    if mode == "local":
        return f_l
    if f_g.shape != f_l.shape:
        raise DimensionError(f"global features {f_g.shape} and local features {f_l.shape} differ")
    if mode == "average":
        return (f_g + f_l) * 0.5
    return concat([f_g, f_l], axis=1)


def combine_branch(mode: str, f_g: Tensor, f_l: Tensor | None, heads: Mapping[str, RegressionHead]) -> Tensor:
    check_mode(mode)
    if mode not in heads:
        raise ConfigurationError(f"no head for branch mode {mode!r}")
    return heads[mode](branch_features(mode, f_g, f_l))


def _require_views(per_view: Mapping[str, object]) -> None:
    missing = [v for v in VIEWS if v not in per_view]
    if missing:
        raise MissingViewError(f"multi-view combination needs all of {VIEWS}; missing {missing}")


def multiview_combine(mode: str, per_view: Mapping[str, object], head: RegressionHead | None = None):
    """Join per-view outputs.

    ``average`` takes per-view scalar predictions and returns their mean.
    ``fusion`` takes per-view feature vectors [N, D], concatenates them in
    axial, sagittal, coronal order and applies ``head``.
    """
    check_mode(mode, MULTIVIEW_MODES, "multi-view mode")
    _require_views(per_view)
    if mode == "average":
        preds = [np.asarray(getattr(per_view[v], "data", per_view[v]), dtype=np.float64) for v in VIEWS]
        if len({p.shape for p in preds}) != 1:
            raise DimensionError(f"per-view predictions differ in shape: {[p.shape for p in preds]}")
        return (preds[0] + preds[1] + preds[2]) / 3.0
    if head is None:
        raise ConfigurationError("multi-view fusion needs a trained head")
    feats = [per_view[v] if isinstance(per_view[v], Tensor) else Tensor(per_view[v]) for v in VIEWS]
    return head(concat(feats, axis=1))
