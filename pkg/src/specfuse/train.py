"""Training (specialize) and evaluation (fuse) loops for the toy model."""

from __future__ import annotations

import ast
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fuse import fuse_assignment, select_levels
from .gt import RelabelPolicy, derive_gt, relabel, supervised_counts
from .metrics import (
    downsample_majority,
    iou_from_confusion,
    level_confusions,
    level_pair_confusion,
    level_pair_matrix,
    class_level_delta,
    confusion,
    pixel_accuracy,
)
from .model import HeadConfig, PyramidNet
from .pyramid import PyramidSpec
from .synth import SynthConfig, gen_batch

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")


@dataclass
class TrainConfig:
    # pyramid
    levels: int = 4
    finest_stride: int = 4
    num_classes: int = 6
    tau: float = 0.9
    # heads
    backbone_channels: int = 32
    unity_channels: int = 8
    semantic_channels: int = 16
    key_channels: int = 0
    pool_sizes: tuple = (1, 3, 6, 8)
    # data
    height: int = 64
    width: int = 64
    n_sites: int = 20
    dont_care_rate: float = 0.1
    data_seed: int = 0
    eval_seed: int = 1
    # optimisation
    seed: int = 0
    policy: str = "final"
    lr: float = 0.05
    momentum: float = 0.9
    poly_power: float = 0.9
    max_iter: int = 2000
    batch_size: int = 4

    def __post_init__(self):
        self.pool_sizes = tuple(self.pool_sizes)
        RelabelPolicy(self.policy)

    @property
    def spec(self) -> PyramidSpec:
        return PyramidSpec(self.levels, self.finest_stride, self.num_classes, self.tau)

    @property
    def head(self) -> HeadConfig:
        return HeadConfig(
            spec=self.spec,
            backbone_channels=self.backbone_channels,
            unity_channels=self.unity_channels,
            semantic_channels=self.semantic_channels,
            key_channels=self.key_channels or None,
            pool_sizes=self.pool_sizes,
        )

    def synth(self, seed: int) -> SynthConfig:
        return SynthConfig(seed, self.height, self.width, self.num_classes, self.n_sites, self.dont_care_rate)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pool_sizes"] = list(self.pool_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments) into a :class:`TrainConfig`."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            values[key] = value
    return TrainConfig.from_dict(values)


def load_config(path) -> TrainConfig:
    with open(path) as f:
        return parse_config_text(f.read())


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    return base_lr * (1 - iteration / max_iter) ** power


def build_model(cfg: TrainConfig, dtype=ad.DEFAULT_DTYPE) -> PyramidNet:
    return PyramidNet(cfg.head, seed=cfg.seed, dtype=dtype)


def pyramid_loss_tensor(semantic, unity, targets) -> ad.Tensor:
    """Eq.-1 style loss on a batch; ``targets`` is one relabeled GtPyramid per image."""
    L = len(semantic)
    ce = [ad.masked_ce(s, np.stack([t.semantic[i] for t in targets])) for i, s in enumerate(semantic)]
    bce = [ad.masked_bce(u, np.stack([t.unity[i] for t in targets])) for i, u in enumerate(unity)]
    total_ce = ce[0]
    for term in ce[1:]:
        total_ce = total_ce + term
    total_bce = bce[0]
    for term in bce[1:]:
        total_bce = total_bce + term
    return total_ce * (1.0 / L) + total_bce * (1.0 / (L - 1))


def relabeled_targets(labels: np.ndarray, unity, spec: PyramidSpec, policy) -> list:
    """Per-image relabeled pyramids; ``unity`` values are used detached from the graph."""
    out = []
    for i, y in enumerate(labels):
        gt = derive_gt(y, spec)
        pred = [np.asarray(u.data[i]) for u in unity]
        out.append(relabel(gt, pred, policy, spec.tau))
    return out


@dataclass
class SGDMomentum:
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def step(self, params, lr: float) -> None:
        for p in params:
            v = self.velocity.get(p.name)
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self.velocity[p.name] = v
            p.data -= p.dtype.type(lr) * v


def train_step(model: PyramidNet, rgb: np.ndarray, labels: np.ndarray, opt: SGDMomentum,
               policy, lr: float, iteration: int = 0) -> tuple[float, list[int]]:
    """One forward/relabel/backward/update pass; returns the loss and supervised counts per level."""
    spec = model.cfg.spec
    model.train()
    params = model.parameters()
    ad.zero_grad(params)
    with np.errstate(over="ignore", invalid="ignore"):
        semantic, unity = model(ad.Tensor(np.asarray(rgb, dtype=model.dtype)))
        targets = relabeled_targets(labels, unity, spec, policy)
        loss = pyramid_loss_tensor(semantic, unity, targets)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(iteration, value)
    loss.backward()
    opt.step(params, lr)
    counts = np.sum([supervised_counts(t) for t in targets], axis=0).tolist()
    return value, counts


def train(cfg: TrainConfig, log_rows: list | None = None, model: PyramidNet | None = None,
          progress_every: int = 0) -> PyramidNet:
    """Run ``cfg.max_iter`` SGD steps on fresh synthetic batches."""
    model = build_model(cfg) if model is None else model
    opt = SGDMomentum(cfg.momentum)
    data = cfg.synth(cfg.data_seed)
    for it in range(cfg.max_iter):
        lr = poly_lr(cfg.lr, it, cfg.max_iter, cfg.poly_power)
        idx = range(it * cfg.batch_size, (it + 1) * cfg.batch_size)
        rgb, labels = gen_batch(data, idx)
        loss, counts = train_step(model, rgb, labels, opt, cfg.policy, lr, it)
        if log_rows is not None:
            log_rows.append({"iter": it, "lr": lr, "loss": loss, "supervised": counts})
        if progress_every and (it % progress_every == 0 or it == cfg.max_iter - 1):
            log.info("iter %d lr %.5f loss %.4f supervised %s", it, lr, loss, counts)
    model.eval()
    return model


@dataclass
class EvalReport:
    """Accumulated confusion counts over an evaluation set (all at the finest stride)."""

    spec: PyramidSpec
    fused: np.ndarray          # (C, C)
    per_level: np.ndarray      # (L, C, C)
    level_pair: np.ndarray     # (L, L, C, C)
    assigned: np.ndarray       # (L,) assigned positions
    selected: np.ndarray       # (L,) selected cells

    @property
    def pixel_accuracy(self) -> float:
        return pixel_accuracy(self.fused)

    @property
    def fused_iou(self):
        return iou_from_confusion(self.fused)

    @property
    def miou(self) -> float:
        return self.fused_iou.mean

    def level_miou(self, level: int) -> float:
        return iou_from_confusion(self.per_level[level - 1]).mean

    def level_pair_matrix(self) -> np.ndarray:
        return level_pair_matrix(self.level_pair)

    def class_level_delta(self) -> np.ndarray:
        return class_level_delta(self.per_level, self.fused)

    @property
    def labels_read_ratio(self) -> float:
        return float(self.selected.sum() / self.assigned.sum())


def evaluate(model: PyramidNet, synth: SynthConfig, n_samples: int, tau: float | None = None,
             finest_only: bool = False, chunk: int = 20) -> EvalReport:
    """Fuse predictions on ``n_samples`` synthetic images and accumulate confusions.

    ``finest_only`` discards the coarser levels and reads every position
    from the finest semantic level.
    """
    spec = model.cfg.spec
    L, C = spec.num_levels, spec.num_classes
    tau = spec.tau if tau is None else tau
    was_training = model.training
    model.eval()
    fused_cm = np.zeros((C, C), dtype=np.int64)
    per_level = np.zeros((L, C, C), dtype=np.int64)
    pair = np.zeros((L, L, C, C), dtype=np.int64)
    assigned = np.zeros(L, dtype=np.int64)
    selected = np.zeros(L, dtype=np.int64)
    for start in range(0, n_samples, chunk):
        rgb, labels = gen_batch(synth, range(start, min(n_samples, start + chunk)))
        for pred, y in zip(model.predict(rgb), labels):
            gt = downsample_majority(y, spec.finest_stride, C)
            if finest_only:
                assignment = np.full(gt.shape, L, dtype=np.int64)
            else:
                assignment = fuse_assignment(pred.unity, spec, tau)
            fused = select_levels(pred.semantic, assignment, spec).argmax(0)
            fused_cm += confusion(fused, gt, C)
            lv, _ = level_confusions(pred.semantic, fused, gt, spec)
            per_level += lv
            pair += level_pair_confusion(pred.semantic, assignment, gt, spec)
            for i, level in enumerate(spec.levels):
                mask = assignment == level
                assigned[i] += mask.sum()
                r = spec.ratio(level)
                selected[i] += mask.reshape(mask.shape[0] // r, r, mask.shape[1] // r, r).any((1, 3)).sum()
    model.train(was_training)
    return EvalReport(spec, fused_cm, per_level, pair, assigned, selected)


def toy_config(levels: int = 2, seed: int = 0) -> TrainConfig:
    """Tiny configuration used for finite-difference checks."""
    if levels == 2:
        geom = dict(levels=2, finest_stride=2, height=8, width=8, pool_sizes=(1, 3))
    else:
        geom = dict(levels=levels, finest_stride=1, height=2 ** levels, width=2 ** levels, pool_sizes=(1, 3))
    return TrainConfig(num_classes=3, backbone_channels=8, unity_channels=4, semantic_channels=8,
                       n_sites=3, dont_care_rate=0.1, seed=seed, data_seed=seed, batch_size=1, **geom)


def gradcheck_model(cfg: TrainConfig, step: float = 1e-5, policy: str | None = None) -> float:
    """Max relative backprop-vs-finite-difference error of the full loss over every parameter.

    Runs in float64 on one synthetic batch.  The relabel mask is computed
    once and frozen so the objective is smooth in the parameters.
    """
    model = PyramidNet(cfg.head, seed=cfg.seed, dtype=np.float64)
    rgb, labels = gen_batch(cfg.synth(cfg.data_seed), range(cfg.batch_size))
    x = ad.Tensor(rgb.astype(np.float64))
    _, unity = model(x)
    targets = relabeled_targets(labels, unity, cfg.spec, policy or cfg.policy)

    def objective():
        semantic, unity = model(x)
        return pyramid_loss_tensor(semantic, unity, targets)

    return ad.grad_check(objective, model.parameters(), step=step)
