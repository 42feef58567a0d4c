"""Training and evaluation harness: batch composition, optimisation loop, IoU metrics."""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from boxboot import diffnet, pnm
from boxboot.loss_core import (
    BootstrapParams,
    GaussianLogitMap,
    LossBreakdown,
    RegionMode,
    TargetMask,
    bootstrap_weight,
    clamp_log_var,
    composite_binary_loss,
    l2_binary_loss,
    plain_binary_loss,
)
from boxboot.loss_multiclass import McConfig, composite_multiclass_loss, plain_multiclass_loss
from boxboot.synthdata import Dataset, rasterize_box_target

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "loss", "iou_c1", "iou_c2", "miou", "sigma2_in_mask", "sigma2_in_band", "flip_frac"]
EVAL_CHUNK = 16


class LossVariant(str, enum.Enum):
    BCE_PLAIN = "BcePlain"
    L2_UNC = "L2Unc"
    BCE_UNC_BOOTSTRAP = "BceUncBootstrap"
    MULTI_CLASS = "MultiClass"


@dataclass
class TrainConfig:
    loss_variant: LossVariant = LossVariant.BCE_UNC_BOOTSTRAP
    region_mode: RegionMode = RegionMode.UNC_BOX_ONLY
    tau: float = 2.5
    slope: float = 0.2
    lr: float = 5e-4
    batch_size: int = 8
    pp_sampling_chance: float = 0.25
    t_samples: int = 20
    steps: int = 5000
    eval_every: int = 500
    seed: int = 0
    export_masks: bool = False

    def __post_init__(self) -> None:
        self.loss_variant = LossVariant(self.loss_variant)
        self.region_mode = RegionMode(self.region_mode)
        if not 0 <= self.pp_sampling_chance <= 1:
            raise ValueError(f"pp_sampling_chance must lie in [0, 1], got {self.pp_sampling_chance}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        # validates tau/slope and t_samples
        self.bootstrap_params
        McConfig(self.t_samples, self.seed)

    @property
    def bootstrap_params(self) -> BootstrapParams:
        return BootstrapParams(self.tau, self.slope)


@dataclass
class MetricsRecord:
    step: int
    loss: float
    iou: list[float]  # per object class, index 0 is class 1
    miou: float
    sigma2_in_mask: float
    sigma2_in_band: float
    flip_frac: float

    def csv_row(self) -> list[str]:
        ious = [repr(v) for v in self.iou] + [""] * (2 - len(self.iou))
        return [
            str(self.step),
            repr(self.loss),
            *ious,
            repr(self.miou),
            repr(self.sigma2_in_mask),
            repr(self.sigma2_in_band),
            repr(self.flip_frac),
        ]


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, params: dict, history: list[MetricsRecord]):
        super().__init__(message)
        self.step = step
        self.params = params
        self.history = history


def network_classes(n_object_classes: int, variant: LossVariant) -> int:
    """Output channels per head: 1 for binary losses, objects + background otherwise."""
    if n_object_classes == 1 and variant is not LossVariant.MULTI_CLASS:
        return 1
    if variant in (LossVariant.L2_UNC, LossVariant.BCE_UNC_BOOTSTRAP):
        raise ValueError(f"{variant.value} is a binary loss; the dataset has {n_object_classes} object classes")
    return n_object_classes + 1


@dataclass
class TrainData:
    """Dense arrays for a dataset: images plus both kinds of targets per image."""

    images: np.ndarray  # (N, 3, H, W)
    true_y: np.ndarray  # (N, H, W)
    box_y: np.ndarray  # (N, H, W)
    in_box: np.ndarray  # (N, H, W)
    pixel_perfect: np.ndarray  # (N,)
    train: np.ndarray  # (N,)
    classes: int
    ids: list[str] = field(default_factory=list)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> TrainData:
        boxes = [rasterize_box_target(s) for s in dataset.scenes]
        return cls(
            images=np.stack([s.image for s in dataset.scenes]),
            true_y=np.stack([s.true_mask for s in dataset.scenes]),
            box_y=np.stack([b.y for b in boxes]),
            in_box=np.stack([b.in_box for b in boxes]),
            pixel_perfect=np.asarray(dataset.split.pixel_perfect, dtype=bool),
            train=np.asarray(dataset.split.train, dtype=bool),
            classes=dataset.classes,
            ids=list(dataset.ids),
        )

    @property
    def pp_pool(self) -> np.ndarray:
        return np.flatnonzero(self.train & self.pixel_perfect)

    @property
    def bb_pool(self) -> np.ndarray:
        return np.flatnonzero(self.train & ~self.pixel_perfect)

    @property
    def val_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.train)


@dataclass
class Batch:
    ids: np.ndarray
    images: np.ndarray
    targets: TargetMask


def compose_batch(data: TrainData, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Fill each slot with a pixel-perfect image with probability ``pp_sampling_chance``.

    Pixel-perfect slots carry the true mask, box-derived slots the rasterized boxes.
    """
    chance = cfg.pp_sampling_chance
    pp_pool, bb_pool = data.pp_pool, data.bb_pool
    if chance > 0 and len(pp_pool) == 0:
        raise ValueError("no pixel-perfect training images to sample from")
    if chance < 1 and len(bb_pool) == 0:
        raise ValueError("no box-derived training images to sample from")
    ids = np.empty(cfg.batch_size, dtype=np.int64)
    kinds = np.empty(cfg.batch_size, dtype=bool)
    for slot in range(cfg.batch_size):
        pp = bool(rng.random() < chance)
        pool = pp_pool if pp else bb_pool
        ids[slot] = pool[rng.integers(len(pool))]
        kinds[slot] = pp
    y = np.where(kinds[:, None, None], data.true_y[ids], data.box_y[ids])
    targets = TargetMask(y=y, in_box=data.in_box[ids], pixel_perfect=kinds[:, None, None])
    return Batch(ids=ids, images=data.images[ids], targets=targets)


def compute_loss(
    logits: GaussianLogitMap, targets: TargetMask, cfg: TrainConfig, step: int = 0, image_ids=None
) -> LossBreakdown:
    variant = cfg.loss_variant
    if logits.n_classes == 1:
        if variant is LossVariant.BCE_PLAIN:
            return plain_binary_loss(logits, targets)
        if variant is LossVariant.L2_UNC:
            return l2_binary_loss(logits, targets, cfg.region_mode)
        if variant is LossVariant.BCE_UNC_BOOTSTRAP:
            return composite_binary_loss(logits, targets, cfg.bootstrap_params, cfg.region_mode)
    else:
        if variant is LossVariant.BCE_PLAIN:
            return plain_multiclass_loss(logits, targets)
        if variant is LossVariant.MULTI_CLASS:
            mc = McConfig(cfg.t_samples, cfg.seed)
            return composite_multiclass_loss(logits, targets, cfg.tau, mc, step, image_ids)
    raise ValueError(f"loss variant {variant.value} does not apply to {logits.n_classes}-channel logits")


def predict_mask(logits: GaussianLogitMap, threshold: float = 0.0) -> np.ndarray:
    """(N, H, W) class ids from the mean logits.

    Binary: foreground iff ``mu > threshold``.  Multi-class: argmax over classes,
    ties to the lowest index.
    """
    if logits.n_classes == 1:
        return (logits.mu[:, 0] > threshold).astype(np.int64)
    return np.argmax(logits.mu, axis=1)


def iou(pred: np.ndarray, true: np.ndarray, class_id: int) -> float:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {true.shape}")
    p = pred == class_id
    t = true == class_id
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union


def _threshold(cfg: TrainConfig) -> float:
    # the L2 head regresses 0/1 targets, the others output logits
    return 0.5 if cfg.loss_variant is LossVariant.L2_UNC else 0.0


def predict(params: dict, images: np.ndarray) -> GaussianLogitMap:
    mus, log_vars = [], []
    for start in range(0, len(images), EVAL_CHUNK):
        out, _ = diffnet.forward(params, images[start : start + EVAL_CHUNK])
        mus.append(out.mu)
        log_vars.append(out.log_var)
    return GaussianLogitMap(np.concatenate(mus), np.concatenate(log_vars))


def evaluate(params: dict, data: TrainData, cfg: TrainConfig, step: int = 0, loss: float = float("nan")) -> MetricsRecord:
    """Metrics on the validation images against their true masks (dataset-level IoU)."""
    val = data.val_ids
    logits = predict(params, data.images[val])
    pred = predict_mask(logits, _threshold(cfg))
    true = data.true_y[val]
    ious = [iou(pred, true, c) for c in range(1, data.classes + 1)]
    var = np.exp(clamp_log_var(logits.log_var)).max(axis=1)
    in_mask = true > 0
    band = data.in_box[val] & ~in_mask
    in_box = data.in_box[val]
    return MetricsRecord(
        step=step,
        loss=float(loss),
        iou=ious,
        miou=float(np.mean(ious)),
        sigma2_in_mask=float(var[in_mask].mean()) if in_mask.any() else float("nan"),
        sigma2_in_band=float(var[band].mean()) if band.any() else float("nan"),
        flip_frac=float((var[in_box] > cfg.tau).mean()) if in_box.any() else 0.0,
    )


def _diagnose(logits: GaussianLogitMap, loss: LossBreakdown, cfg: TrainConfig) -> str:
    parts = []
    if not np.all(np.isfinite(logits.mu)):
        parts.append("mean logits")
    if not np.all(np.isfinite(logits.log_var)):
        parts.append("log-variance")
    if not np.isfinite(loss.value):
        parts.append("loss value")
    if not (np.all(np.isfinite(loss.d_mu)) and np.all(np.isfinite(loss.d_log_var))):
        parts.append("loss gradients")
    return f"{cfg.loss_variant.value} term non-finite in: {', '.join(parts) or 'unknown'}"


def train(dataset: Dataset | TrainData, cfg: TrainConfig, dtype=np.float64) -> tuple[dict, list[MetricsRecord]]:
    """Run ``cfg.steps`` Adam steps; evaluate every ``eval_every`` steps and at the end."""
    data = dataset if isinstance(dataset, TrainData) else TrainData.from_dataset(dataset)
    n_out = network_classes(data.classes, cfg.loss_variant)
    params = {k: v.astype(dtype) for k, v in diffnet.init_params(n_out, seed=cfg.seed).items()}
    state = diffnet.AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    history: list[MetricsRecord] = []
    running, count = 0.0, 0
    for step in range(1, cfg.steps + 1):
        batch = compose_batch(data, cfg, rng)
        logits, cache = diffnet.forward(params, batch.images)
        loss = compute_loss(logits, batch.targets, cfg, step, batch.ids)
        if not (np.isfinite(loss.value) and np.all(np.isfinite(loss.d_mu)) and np.all(np.isfinite(loss.d_log_var))):
            raise TrainingAborted(f"non-finite loss at step {step}: {_diagnose(logits, loss, cfg)}", step, params, history)
        grads = diffnet.backward(params, cache, loss.d_mu, loss.d_log_var)
        diffnet.adam_step(params, grads, state)
        running += loss.value
        count += 1
        if step % cfg.eval_every == 0 or step == cfg.steps:
            record = evaluate(params, data, cfg, step, running / count)
            history.append(record)
            log.info("step %d loss %.4f miou %.4f", step, record.loss, record.miou)
            running, count = 0.0, 0
    return params, history


def write_metrics(path, history: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        writer.writerows(record.csv_row() for record in history)


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _to_byte(x: np.ndarray) -> np.ndarray:
    # linear scale to 0..255, rounding half up
    return np.floor(np.clip(x, 0, 1) * 255 + 0.5).astype(np.uint8)


def export_masks(params: dict, data: TrainData, cfg: TrainConfig, out_dir) -> list[Path]:
    """Write prediction, bootstrap-weight and flip PGMs for every validation image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    val = data.val_ids
    logits = predict(params, data.images[val])
    pred = predict_mask(logits, _threshold(cfg))
    log_var = logits.log_var.max(axis=1)
    weight = bootstrap_weight(log_var, cfg.bootstrap_params)
    scale = max(logits.n_classes - 1, 1)
    written = []
    for k, i in enumerate(val):
        sid = data.ids[i]
        for name, img in (
            (f"pred_{sid}.pgm", _to_byte(pred[k] / scale)),
            (f"w_{sid}.pgm", _to_byte(weight[k])),
            (f"flip_{sid}.pgm", _to_byte((weight[k] < 0.5) & data.in_box[i])),
        ):
            pnm.write_pgm(out / name, img)
            written.append(out / name)
    return written

