"""Baseline and distillation training loops for the toy teacher/student pair."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from dpk.archive import load_checkpoint, read_archive, save_checkpoint
from dpk.config import DistillConfig, dump_config, mask_plan
from dpk.harness.data import ArrayDataset, synthetic_dataset
from dpk.harness.models import FeatureTaps, ToyConvNet, parameter_checksum
from dpk.losses import LossWeights, feature_loss, logits_kd_loss, total_loss
from dpk.masking import ScheduleState, batch_masks, derive_seed, schedule_ratio
from dpk.similarity import (
    CosineProjector,
    DegenerateBatchError,
    SimilarityTrace,
    TraceEntry,
    cka_minibatch,
    cosine_gap,
    merge_small_batches,
)
from dpk.transform import StageTransform, TransformParams

logger = logging.getLogger(__name__)


class TeacherNotFoundError(FileNotFoundError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class EvalReport:
    top1: float
    top5: float
    n_examples: int
    cls_loss: float
    logits_loss: float = 0.0
    feat_loss: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def true_class_rank(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """0-based rank of the true class; ties go to the smaller class index."""
    true = logits.gather(1, labels[:, None])
    idx = torch.arange(logits.shape[1], device=logits.device)
    ahead = (logits > true) | ((logits == true) & (idx[None, :] < labels[:, None]))
    return ahead.sum(1)


@torch.no_grad()
def evaluate(model: nn.Module, dataset: ArrayDataset, batch_size: int = 500,
             teacher: nn.Module | None = None, tau: float = 4.0) -> EvalReport:
    """Top-1/top-5 accuracy (percent) and mean losses of ``model`` on ``dataset``.

    Top-5 falls back to top-min(5, classes) for fewer than five classes.
    """
    was_training = model.training
    model.eval()
    hits1 = hits5 = 0
    cls_sum = kd_sum = 0.0
    n = len(dataset)
    try:
        for start in range(0, n, batch_size):
            x = torch.from_numpy(dataset.images[start : start + batch_size])
            y = torch.from_numpy(dataset.labels[start : start + batch_size])
            logits = model(x)
            rank = true_class_rank(logits, y)
            hits1 += int((rank < 1).sum())
            hits5 += int((rank < min(5, logits.shape[1])).sum())
            cls_sum += float(F.cross_entropy(logits, y, reduction="sum"))
            if teacher is not None:
                kd_sum += float(logits_kd_loss(logits, teacher(x), tau)) * len(y)
    finally:
        model.train(was_training)
    return EvalReport(100.0 * hits1 / n, 100.0 * hits5 / n, n, cls_sum / n, kd_sum / n)


class ModelPair:
    """Frozen teacher plus trainable student, tapped at the mapped stages."""

    def __init__(self, teacher: nn.Module, student: nn.Module, stage_map=(("stage4", "stage4"),)):
        self.teacher = teacher.eval().requires_grad_(False)
        self.student = student
        self.stage_map = [tuple(p) for p in stage_map]
        self._t_taps = FeatureTaps(teacher, sorted({t for _, t in self.stage_map}))
        self._s_taps = FeatureTaps(student, sorted({s for s, _ in self.stage_map}))

    def forward(self, images):
        self.teacher.eval()
        with torch.no_grad():
            t_logits = self.teacher(images)
        t_feats = dict(self._t_taps.features)
        s_logits = self.student(images)
        s_feats = dict(self._s_taps.features)
        return s_logits, s_feats, t_logits, t_feats

    def stage_shapes(self, images):
        with torch.no_grad():
            was = self.student.training
            self.student.eval()
            _, s_feats, _, t_feats = self.forward(images[:1])
            self.student.train(was)
        return {
            (s, t): (tuple(s_feats[s].shape[1:]), tuple(t_feats[t].shape[1:]))
            for s, t in self.stage_map
        }

    def teacher_checksum(self) -> str:
        return parameter_checksum(self.teacher)

    def close(self):
        self._t_taps.remove()
        self._s_taps.remove()


def stage_key(pair) -> str:
    s, t = pair
    return s if s == t else f"{s}->{t}"


@dataclass
class RunState:
    seed: int
    mask_seed: int
    schedules: dict
    step: int = 0
    epoch: int = 0
    trace: SimilarityTrace = field(default_factory=SimilarityTrace)


@dataclass
class StepMetrics:
    cls: float
    logits: float
    feat: float
    total: float
    ratios: dict
    ckas: dict
    cosines: dict


def build_transforms(pair: ModelPair, cfg: DistillConfig, sample: torch.Tensor, seed: int) -> nn.ModuleDict:
    t = cfg.transform
    params = TransformParams(t.variant, t.patch_size, t.dim, t.encoder_blocks, t.decoder_blocks, t.heads)
    modules = {}
    for stages, (s_shape, t_shape) in pair.stage_shapes(sample).items():
        key = stage_key(stages)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, f"transform:{key}"))
            modules[key] = StageTransform(s_shape, t_shape, params)
    return nn.ModuleDict(modules)


def new_run_state(cfg: DistillConfig, pair: ModelPair) -> RunState:
    _, schedule, pi0 = mask_plan(cfg)
    schedules = {
        stage_key(p): ScheduleState.initial(
            schedule, pi0, linear_decrement=cfg.mask.linear_decrement, ema=cfg.schedule.ema
        )
        for p in pair.stage_map
    }
    mask_seed = cfg.mask.seed if cfg.mask.seed is not None else derive_seed(cfg.seed, "mask")
    return RunState(seed=cfg.seed, mask_seed=mask_seed, schedules=schedules)


def _flat64(t: torch.Tensor) -> np.ndarray:
    return t.detach().to(torch.float64).reshape(t.shape[0], -1).numpy()


def distill_step(images, labels, pair: ModelPair, transforms: nn.ModuleDict, cfg: DistillConfig,
                 state: RunState, optimizer, projector: CosineProjector | None = None,
                 out_dir: Path | None = None) -> StepMetrics:
    """One optimizer step of the hybrid-feature objective.

    For every mapped stage: measure teacher/student similarity on the
    detached features, update the mask ratio, stitch and decode, and score
    the decoded map against the raw teacher features. Logits KD and the
    classification loss are added before a single backward pass.
    """
    pattern, schedule, _ = mask_plan(cfg)
    stage_weights = cfg.model.stage_weights or [1.0] * len(pair.stage_map)
    weights = LossWeights(cfg.kd.alpha, cfg.kd.beta, tuple(stage_weights))

    s_logits, s_feats, t_logits, t_feats = pair.forward(images)
    cls = F.cross_entropy(s_logits, labels)
    kd = logits_kd_loss(s_logits, t_logits, cfg.kd.tau, cfg.kd.tau_squared)

    feat = torch.zeros((), dtype=cls.dtype)
    per_stage = {}
    ratios, ckas, cosines = {}, {}, {}
    for (s_id, t_id), w in zip(pair.stage_map, stage_weights):
        key = stage_key((s_id, t_id))
        fs, ft = s_feats[s_id], t_feats[t_id]
        x, y = _flat64(fs), _flat64(ft)
        try:
            cka = cka_minibatch([x], [y])
        except (DegenerateBatchError, ValueError):
            cka = float("nan")
        try:
            cos = cosine_gap(x, y, projector)
        except ValueError:
            cos = float("nan")
        similarity = {"cka": cka, "cosine": cos}.get(schedule)
        ratio = schedule_ratio(state.schedules[key], similarity)
        ratios[key], ckas[key], cosines[key] = ratio, cka, cos

        stage_feat = torch.zeros((), dtype=cls.dtype)
        if weights.beta > 0:
            module = transforms[key]
            masks = torch.from_numpy(
                batch_masks(pattern, module.grid, ratio, len(labels), state.mask_seed, state.step)
            )
            pred = module(fs, ft, masks, cfg.mask.filler)
            stage_feat = feature_loss(pred, ft, masks, cfg.kd.region)
        per_stage[key] = stage_feat
        feat = feat + w * stage_feat

    loss = total_loss(cls, kd, feat, weights)
    if not torch.isfinite(loss):
        _dump_nonfinite(out_dir, state.step, s_feats, t_feats, pair.stage_map)
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: cls={cls.item()}, logits={kd.item()}, "
            f"feat={ {k: v.item() for k, v in per_stage.items()} }"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()

    cls_v, kd_v = cls.item(), kd.item()
    for key in per_stage:
        state.trace.append(TraceEntry(
            step=state.step, stage=key, cka=ckas[key], cosine=cosines[key], ratio=ratios[key],
            epoch=state.epoch, cls_loss=cls_v, logits_loss=kd_v, feat_loss=per_stage[key].item(),
        ))
    state.step += 1
    return StepMetrics(cls_v, kd_v, feat.item(), loss.item(), ratios, ckas, cosines)


def _dump_nonfinite(out_dir, step, s_feats, t_feats, stage_map):
    if out_dir is None:
        return
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    arrays = {}
    for s, t in stage_map:
        arrays[f"student_{s}"] = s_feats[s].detach().numpy()
        arrays[f"teacher_{t}"] = t_feats[t].detach().numpy()
    path = Path(out_dir) / f"nonfinite_step{step}.npz"
    np.savez(path, **arrays)
    logger.error("non-finite loss; stage tensors written to %s", path)


# ---------------------------------------------------------------- runs


@dataclass
class RunResult:
    model: nn.Module
    report: EvalReport
    initial_report: EvalReport
    trace: SimilarityTrace
    out_dir: Path | None = None
    transforms: nn.ModuleDict | None = None


def load_datasets(cfg: DistillConfig) -> tuple[ArrayDataset, ArrayDataset]:
    d = cfg.dataset
    if d.name == "synthetic":
        return synthetic_dataset(d.n_train, d.n_test, d.image_size, d.num_classes, d.noise, d.seed)
    splits = []
    for path in (d.path, d.test_path or d.path):
        arrays = read_archive(path)
        if "images" not in arrays or "labels" not in arrays:
            raise ValueError(f"{path}: dataset archives need 'images' and 'labels' tensors")
        splits.append(ArrayDataset(arrays["images"].astype(np.float32), arrays["labels"].astype(np.int64)))
    return tuple(splits)


def build_model(width: float, num_classes: int, seed: int, purpose: str) -> ToyConvNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, purpose))
        return ToyConvNet(width, num_classes)


def save_model(path, model: ToyConvNet, cfg: DistillConfig) -> None:
    meta = {"arch": "ToyConvNet", "width": model.width, "num_classes": model.num_classes}
    save_checkpoint(path, model.state_dict(), seed=cfg.seed, config_digest=cfg.digest(), metadata=meta)


def load_model(path) -> ToyConvNet:
    path = Path(path)
    if not path.is_file():
        raise TeacherNotFoundError(f"checkpoint not found: {path}")
    header, arrays = load_checkpoint(path)
    meta = header["metadata"]
    if meta.get("arch") != "ToyConvNet":
        raise ValueError(f"{path}: unsupported architecture {meta.get('arch')!r}")
    model = ToyConvNet(meta["width"], meta["num_classes"])
    state = model.state_dict()
    model.load_state_dict({k: torch.from_numpy(arrays[k]).to(state[k].dtype) for k in state})
    return model


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    sizes = merge_small_batches([min(batch_size, n - i) for i in range(0, n, batch_size)])
    start = 0
    for size in sizes:
        yield perm[start : start + size]
        start += size


def _lr(cfg: DistillConfig, step: int, total: int, warmup: int = 0) -> float:
    """Learning rate at ``step``: linear warmup over ``warmup`` steps, then the schedule."""
    scale = min(1.0, (step + 1) / warmup) if warmup else 1.0
    if cfg.optim.lr_schedule == "constant" or total == 0:
        return cfg.optim.lr * scale
    return cfg.optim.lr * scale * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return len(merge_small_batches([min(batch_size, n - i) for i in range(0, n, batch_size)]))


def _optimizer(cfg, params):
    return torch.optim.SGD(params, lr=cfg.optim.lr, momentum=cfg.optim.momentum,
                           weight_decay=cfg.optim.weight_decay)


def _prepare_out(cfg: DistillConfig, out_dir) -> Path | None:
    out = Path(out_dir if out_dir is not None else cfg.out) if (out_dir is not False) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
    return out


def _write_report(out: Path | None, name: str, report: EvalReport, initial: EvalReport, extra=None):
    if out is None:
        return
    payload = {"final": report.to_dict(), "initial": initial.to_dict(), **(extra or {})}
    (out / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_baseline(cfg: DistillConfig, out_dir=None, datasets=None) -> RunResult:
    """Supervised training with the classification loss only.

    ``model.role`` picks the width (teacher or student) and the init seed
    stream; a student baseline starts from exactly the weights a
    distillation run with the same seed would start from.
    """
    torch.use_deterministic_algorithms(True)
    train_set, test_set = datasets or load_datasets(cfg)
    role = cfg.model.role
    width = cfg.model.teacher_width if role == "teacher" else cfg.model.student_width
    model = build_model(width, cfg.dataset.num_classes, cfg.seed, role)
    out = _prepare_out(cfg, out_dir)

    initial = evaluate(model, test_set)
    optimizer = _optimizer(cfg, model.parameters())
    rng = np.random.default_rng(derive_seed(cfg.seed, "data-order"))
    per_epoch = _steps_per_epoch(len(train_set), cfg.optim.batch_size)
    total, warmup = cfg.optim.epochs * per_epoch, cfg.optim.warmup_epochs * per_epoch
    step = 0
    X, Y = torch.from_numpy(train_set.images), torch.from_numpy(train_set.labels)
    model.train()
    for epoch in range(cfg.optim.epochs):
        for idx in _batches(len(train_set), cfg.optim.batch_size, rng):
            for g in optimizer.param_groups:
                g["lr"] = _lr(cfg, step, total, warmup)
            loss = F.cross_entropy(model(X[idx]), Y[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite classification loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
        logger.info("baseline epoch %d: loss %.4f", epoch, loss.item())

    report = evaluate(model, test_set) if cfg.optim.epochs else initial
    if out is not None:
        save_model(out / "model.ckpt", model, cfg)
    _write_report(out, "report.json", report, initial, {"role": role})
    return RunResult(model, report, initial, SimilarityTrace(), out)


def run_distillation(cfg: DistillConfig, teacher: nn.Module | None = None, out_dir=None,
                     datasets=None) -> RunResult:
    """Distill a fresh student from a frozen teacher.

    The teacher comes from ``model.teacher_checkpoint`` unless passed in.
    Writes ``student.ckpt``, ``trace.csv`` and ``report.json`` to the output
    directory (pass ``out_dir=False`` to skip writing).
    """
    torch.use_deterministic_algorithms(True)
    if teacher is None:
        path = cfg.model.teacher_checkpoint
        if not path:
            raise TeacherNotFoundError("model.teacher_checkpoint is not set")
        teacher = load_model(path)
    train_set, test_set = datasets or load_datasets(cfg)
    student = build_model(cfg.model.student_width, cfg.dataset.num_classes, cfg.seed, "student")
    pair = ModelPair(teacher, student, cfg.model.stages)
    out = _prepare_out(cfg, out_dir)
    checksum = pair.teacher_checksum()

    X, Y = torch.from_numpy(train_set.images), torch.from_numpy(train_set.labels)
    transforms = build_transforms(pair, cfg, X[:1], cfg.seed)
    state = new_run_state(cfg, pair)
    projector = CosineProjector(derive_seed(cfg.seed, "cosine-projection"))
    optimizer = _optimizer(cfg, [*student.parameters(), *transforms.parameters()])

    initial = evaluate(student, test_set)
    rng = np.random.default_rng(derive_seed(cfg.seed, "data-order"))
    per_epoch = _steps_per_epoch(len(train_set), cfg.optim.batch_size)
    total, warmup = cfg.optim.epochs * per_epoch, cfg.optim.warmup_epochs * per_epoch
    student.train()
    transforms.train()
    try:
        for epoch in range(cfg.optim.epochs):
            state.epoch = epoch
            for sched in state.schedules.values():
                sched.epoch = epoch
            for idx in _batches(len(train_set), cfg.optim.batch_size, rng):
                for g in optimizer.param_groups:
                    g["lr"] = _lr(cfg, state.step, total, warmup)
                m = distill_step(X[idx], Y[idx], pair, transforms, cfg, state, optimizer, projector, out)
            logger.info("distill epoch %d: cls %.4f kd %.4f feat %.4f ratio %s",
                        epoch, m.cls, m.logits, m.feat, m.ratios)
    finally:
        pair.close()
    if pair.teacher_checksum() != checksum:
        raise RuntimeError("teacher parameters changed during distillation")

    report = evaluate(student, test_set) if cfg.optim.epochs else initial
    if out is not None:
        save_model(out / "student.ckpt", student, cfg)
        state.trace.write_csv(out / "trace.csv")
    _write_report(out, "report.json", report, initial, {"teacher_checksum": checksum})
    return RunResult(student, report, initial, state.trace, out, transforms)
