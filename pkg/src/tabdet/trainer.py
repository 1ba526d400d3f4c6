"""Teacher-student training: burn-in, pseudo-labels, EMA and the schedule.

Every random draw inside a step comes from a generator seeded by
``(seed, step, role, image id)``, so the labeled branch of a step does not
depend on whether the unlabeled branch runs.  That is what makes an α = 0
run reproduce the supervised-only run bit for bit.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import PseudoLabelSet, StrongConfig, ViewTransform, strong_augment, weak_augment
from .checkpoint import save_params
from .geometry import pairwise_iou
from .evaluation import MetricsReport, evaluate
from .matching import CostWeights, LossReport, supervised_loss, total_loss, unsupervised_loss
from .model import Detector, ModelConfig, scores_and_boxes
from .optim import OptimState, adamw_step, clip_grad_norm
from .synthdata import AnnotatedImage, ConfigError, DatasetSplit

ROLE_LABELED, ROLE_UNLABELED, ROLE_WEAK, ROLE_SHUFFLE = 1, 2, 3, 4


@dataclass
class TrainerConfig:
    alpha: float = 0.25
    threshold: float = 0.7
    topk: int = 3
    ema_momentum: float = 0.996
    burn_in: int = 500
    epochs: int = 60
    lr_drop_epoch: int | None = None  # defaults to 11/12 of the epochs
    batch_size: int = 8
    label_fraction: float = 0.1
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    eval_interval: int = 1
    steps_per_epoch: int | None = None  # defaults to one pass over the larger pool
    supervised_only: bool = False
    augment: bool = True  # False feeds the student raw pages (overfit checks)
    pseudo_nms: float | None = None  # optional IoU for suppressing duplicate pseudo-labels (off by default)
    model: dict = field(default_factory=dict)  # ModelConfig overrides

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.topk < 1:
            raise ConfigError(f"topk must be >= 1, got {self.topk}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"EMA momentum must lie in [0, 1], got {self.ema_momentum}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 1 or self.batch_size < 2 or self.eval_interval < 1:
            raise ConfigError("epochs and eval_interval must be >= 1 and batch_size >= 2")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")
        if self.pseudo_nms is not None and not 0.0 < self.pseudo_nms <= 1.0:
            raise ConfigError(f"pseudo_nms must lie in (0, 1], got {self.pseudo_nms}")

    @property
    def drop_epoch(self) -> int:
        if self.lr_drop_epoch is not None:
            return self.lr_drop_epoch
        return self.epochs * 11 // 12

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown trainer config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainerConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None


def lr_schedule(epoch: int, cfg: TrainerConfig) -> float:
    """Constant learning rate, cut to a tenth from the drop epoch on."""
    return cfg.lr * 0.1 if epoch >= cfg.drop_epoch else cfg.lr


def ema_update(teacher: dict[str, T.Tensor], student: dict[str, T.Tensor], m: float) -> None:
    """θ_t ← m·θ_t + (1−m)·θ_s, in place."""
    if teacher.keys() != student.keys():
        raise T.DimensionError("teacher and student parameter names differ")
    for k, p in teacher.items():
        s = student[k].data
        if s.shape != p.shape:
            raise T.DimensionError(f"parameter {k}: teacher {p.shape}, student {s.shape}")
        p.data = m * p.data + (1.0 - m) * s


def select_pseudo_labels(scores, boxes, threshold: float, topk: int,
                         nms_iou: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Keep scores ≥ threshold, then the ``topk`` best of those (ties by query order).

    With ``nms_iou`` set, a survivor overlapping a better-scoring kept box
    by more than that IoU is dropped before the top-k cut.
    """
    scores = np.asarray(scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    keep = np.flatnonzero(scores >= threshold)
    keep = keep[np.argsort(-scores[keep], kind="stable")]
    if nms_iou is not None and len(keep) > 1:
        ious = pairwise_iou(boxes[keep], boxes[keep])
        chosen: list[int] = []
        for i in range(len(keep)):
            if all(ious[i, j] <= nms_iou for j in chosen):
                chosen.append(i)
        keep = keep[chosen]
    keep = keep[:topk]
    return boxes[keep], scores[keep]


def generate_pseudo_labels(teacher: Detector, images, cfg: TrainerConfig, rngs) -> list[PseudoLabelSet]:
    """Teacher predictions on weak views, filtered and mapped back to the page."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    views, transforms = [], []
    for img, rng in zip(images, rngs):
        v, _, t = weak_augment(img, None, rng)
        views.append(v)
        transforms.append(t)
    with T.no_grad():
        out = teacher(np.stack(views))[-1]
    scores, boxes = scores_and_boxes(out)
    result = []
    for b, t in enumerate(transforms):
        kb, ks = select_pseudo_labels(scores[b], boxes[b], cfg.threshold, cfg.topk, cfg.pseudo_nms)
        result.append(PseudoLabelSet(t.invert(kb), ks, t))
    return result


def _rng(seed: int, step: int, role: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, role, image_id])


@dataclass
class TrainState:
    student: Detector
    teacher: Detector
    optim: OptimState
    step: int = 0
    teacher_ready: bool = False


@dataclass
class StepResult:
    report: LossReport
    lr: float
    n_pseudo: int
    grad_norm: float


def train_step(state: TrainState, labeled: list[AnnotatedImage], unlabeled: list[AnnotatedImage],
               cfg: TrainerConfig, epoch: int, weights: CostWeights = CostWeights()) -> StepResult:
    """One optimizer step of the student, then the teacher's EMA update.

    During burn-in (and in supervised-only mode) the teacher is not consulted
    and the unsupervised coefficient is 0.  At the first step after burn-in
    the student is copied into the teacher.
    """
    step = state.step
    semi = not cfg.supervised_only and step >= cfg.burn_in and len(unlabeled) > 0
    if semi and not state.teacher_ready:
        state.teacher.load_state_dict(state.student.state_dict())
        state.teacher_ready = True

    def student_view(image, boxes, role, image_id):
        if not cfg.augment:
            return image, np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        v, b, _ = strong_augment(image, boxes, _rng(cfg.seed, step, role, image_id))
        return v, b

    imgs, gts = [], []
    for doc in labeled:
        v, b = student_view(doc.image, doc.boxes, ROLE_LABELED, doc.id)
        imgs.append(v)
        gts.append(b)
    l_s = supervised_loss(state.student(np.stack(imgs)), gts, weights).value

    l_u = None
    n_pseudo = 0
    if semi:
        pseudo = generate_pseudo_labels(state.teacher, np.stack([d.image for d in unlabeled]), cfg,
                                        [_rng(cfg.seed, step, ROLE_WEAK, d.id) for d in unlabeled])
        u_imgs, u_boxes = [], []
        for doc, pl in zip(unlabeled, pseudo):
            v, b = student_view(doc.image, pl.boxes, ROLE_UNLABELED, doc.id)
            u_imgs.append(v)
            u_boxes.append(b)
            n_pseudo += len(b)
        l_u = unsupervised_loss(state.student(np.stack(u_imgs)), u_boxes, weights).value

    L, report = total_loss(l_s, l_u, cfg.alpha if semi else 0.0)
    grads = T.backward(L, state.student.params)
    gnorm = clip_grad_norm(grads, cfg.grad_clip)
    lr = lr_schedule(epoch, cfg)
    adamw_step(state.student.params, grads, state.optim, lr=lr)
    T.zero_grad(state.student.params.values())
    if state.teacher_ready:
        ema_update(state.teacher.params, state.student.params, cfg.ema_momentum)
    state.step += 1
    return StepResult(report, lr, n_pseudo, gnorm)


def predict_arrays(model: Detector, docs: list[AnnotatedImage], chunk: int = 16):
    """``{id: boxes}``, ``{id: scores}`` of the final decoder layer."""
    boxes, scores = {}, {}
    for i in range(0, len(docs), chunk):
        part = docs[i:i + chunk]
        with T.no_grad():
            out = model(np.stack([d.image for d in part]))[-1]
        s, b = scores_and_boxes(out)
        for j, d in enumerate(part):
            boxes[d.id] = b[j]
            scores[d.id] = s[j]
    return boxes, scores


def evaluate_model(model: Detector, docs: list[AnnotatedImage]) -> MetricsReport:
    boxes, scores = predict_arrays(model, docs)
    return evaluate(boxes, scores, {d.id: d.boxes for d in docs})


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict]  # per evaluation
    losses: list[dict]  # per step
    final: MetricsReport | None

    @property
    def reporting_model(self) -> Detector:
        return self.state.teacher if self.state.teacher_ready else self.state.student


def steps_per_epoch(n_lab: int, n_unl: int, cfg: TrainerConfig) -> int:
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    half = cfg.batch_size // 2
    return max(1, math.ceil(max(n_lab, n_unl) / half))


def _cycle_batches(ids: list[int], n_steps: int, per_step: int, rng: np.random.Generator) -> list[list[int]]:
    """``n_steps`` batches drawn from reshuffled passes over ``ids``."""
    need = n_steps * per_step
    stream: list[int] = []
    while len(stream) < need:
        stream.extend(int(i) for i in rng.permutation(ids))
    return [stream[k * per_step:(k + 1) * per_step] for k in range(n_steps)]


def run_training(docs: list[AnnotatedImage], split: DatasetSplit, cfg: TrainerConfig,
                 out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Epoch loop over :func:`train_step` with periodic evaluation of the reporting model.

    The reporting model is the teacher once burn-in has ended and the
    student before that (and throughout supervised-only runs).
    """
    if not split.labeled:
        raise ConfigError("the labeled split is empty")
    by_id = {d.id: d for d in docs}
    missing = [i for i in split.labeled + split.unlabeled + split.validation if i not in by_id]
    if missing:
        raise ConfigError(f"split references missing image ids {missing[:5]}")
    mcfg = cfg.model_config()
    student = Detector(mcfg, seed=cfg.seed)
    teacher = student.clone()
    state = TrainState(student, teacher, OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay))
    half = cfg.batch_size // 2
    unl_ids = [] if cfg.supervised_only else split.unlabeled
    n_steps = steps_per_epoch(len(split.labeled), len(split.unlabeled), cfg)
    val_docs = [by_id[i] for i in split.validation]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_f = open(out / "metrics.jsonl", "w") if out is not None else None
    history, losses = [], []
    final = None
    try:
        for epoch in range(cfg.epochs):
            shuffle = _rng(cfg.seed, epoch, ROLE_SHUFFLE, 0)
            lab_batches = _cycle_batches(split.labeled, n_steps, half, shuffle)
            unl_batches = _cycle_batches(unl_ids, n_steps, half, shuffle) if unl_ids else [[]] * n_steps
            t0 = time.perf_counter()
            acc = {"L": 0.0, "L_s": 0.0, "L_u": 0.0, "n_pseudo": 0.0}
            for lb, ub in zip(lab_batches, unl_batches):
                res = train_step(state, [by_id[i] for i in lb], [by_id[i] for i in ub], cfg, epoch)
                row = {"step": state.step - 1, "epoch": epoch, "lr": res.lr, "n_pseudo": res.n_pseudo,
                       **res.report.to_dict()}
                losses.append(row)
                for k in acc:
                    acc[k] += row[k] / n_steps
            if (epoch + 1) % cfg.eval_interval == 0:
                model = state.teacher if state.teacher_ready else state.student
                final = evaluate_model(model, val_docs) if val_docs else None
                entry = {"epoch": epoch + 1, "step": state.step, **acc, "lr": lr_schedule(epoch, cfg),
                         "evaluated": "teacher" if state.teacher_ready else "student",
                         "seconds": round(time.perf_counter() - t0, 3)}
                if final is not None:
                    entry.update(mAP=final.mAP, AP50=final.AP50, AP75=final.AP75, AR=final.AR)
                history.append(entry)
                if log_f is not None:
                    log_f.write(json.dumps(entry, sort_keys=True) + "\n")
                    log_f.flush()
                if log is not None:
                    log(entry)
    finally:
        if log_f is not None:
            log_f.close()
    result = TrainResult(state, history, losses, final)
    if out is not None:
        meta = {"model": mcfg.to_dict(), "trainer": cfg.to_dict(), "step": state.step,
                "role": "teacher" if state.teacher_ready else "student"}
        save_params(out / "final.ckpt", result.reporting_model.state_dict(), meta)
        save_params(out / "student.ckpt", state.student.state_dict(), {**meta, "role": "student"})
    return result
