import copy

import numpy as np
import pytest
import torch
from torch import nn

from dpk.config import build_config
from dpk.harness.data import ArrayDataset, synthetic_dataset
from dpk.harness.models import FeatureTaps, ToyConvNet, parameter_checksum
from dpk.harness.train import (
    ModelPair,
    NonFiniteLossError,
    TeacherNotFoundError,
    _lr,
    _optimizer,
    build_model,
    build_transforms,
    distill_step,
    evaluate,
    load_model,
    new_run_state,
    run_baseline,
    run_distillation,
    save_model,
    true_class_rank,
)
from dpk.similarity import CosineProjector
from dpk.transform import reset_transform_calls, transform_call_count
from oracles import topk_loop

TINY = [
    "dataset.n_train=96", "dataset.n_test=40", "dataset.image_size=16",
    "optim.batch_size=32", "optim.epochs=1",
    "transform.dim=16", "transform.encoder_blocks=1", "transform.decoder_blocks=1", "transform.heads=2",
]


def tiny_cfg(*extra):
    return build_config({}, [*TINY, *extra])


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(96, 40, 16, 10, 0.1, 1234)


@pytest.fixture(scope="module")
def tiny_teacher():
    return build_model(1.0, 10, 0, "teacher")


class FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits


def _dataset(labels):
    labels = np.asarray(labels, dtype=np.int64)
    return ArrayDataset(np.zeros((len(labels), 3, 4, 4), np.float32), labels)


def test_evaluate_perfect_and_rank_three():
    labels = np.arange(20) % 10
    perfect = torch.full((20, 10), -1.0)
    perfect[torch.arange(20), torch.from_numpy(labels)] = 5.0
    r = evaluate(FixedLogits(perfect), _dataset(labels))
    assert (r.top1, r.top5) == (100.0, 100.0)

    third = torch.arange(10, dtype=torch.float32).repeat(20, 1)
    # place the true class at the third-largest logit
    for i, y in enumerate(labels):
        row = torch.arange(10, dtype=torch.float32)
        row[y], row[7] = row[7].clone(), row[y].clone()
        third[i] = row
    r = evaluate(FixedLogits(third), _dataset(labels))
    assert (r.top1, r.top5) == (0.0, 100.0)


def test_evaluate_matches_sort_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randint(-3, 4, (100, 10), generator=g).float()  # plenty of ties
    labels = torch.randint(0, 10, (100,), generator=g).numpy()
    r = evaluate(FixedLogits(logits), _dataset(labels), batch_size=1000)
    assert r.top1 == pytest.approx(topk_loop(logits.tolist(), labels, 1))
    assert r.top5 == pytest.approx(topk_loop(logits.tolist(), labels, 5))
    assert 0 <= r.top1 <= r.top5 <= 100


def test_true_class_rank_ties_favor_smaller_index():
    logits = torch.tensor([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    assert true_class_rank(logits, torch.tensor([0, 1])).tolist() == [0, 1]


def test_evaluate_top5_with_few_classes():
    logits = torch.tensor([[0.0, 1.0, 2.0]] * 3)
    r = evaluate(FixedLogits(logits), _dataset([0, 1, 2]))
    assert r.top5 == 100.0


def test_toy_models_and_taps():
    t, s = ToyConvNet(1.0), ToyConvNet(0.5)
    x = torch.randn(2, 3, 32, 32)
    taps_t, taps_s = FeatureTaps(t, ["stage4"]), FeatureTaps(s, ["stage4", "stage2"])
    t(x), s(x)
    assert taps_t.features["stage4"].shape == (2, 128, 4, 4)
    assert taps_s.features["stage4"].shape == (2, 64, 4, 4)
    assert taps_s.features["stage2"].shape == (2, 16, 16, 16)
    taps_s.remove()
    with pytest.raises(KeyError):
        FeatureTaps(s, ["stage9"])


def test_synthetic_dataset_is_deterministic_and_balanced():
    a = synthetic_dataset(200, 50, 16, 10, 0.1, 7)
    b = synthetic_dataset.__wrapped__(200, 50, 16, 10, 0.1, 7)
    np.testing.assert_array_equal(a[0].images, b[0].images)
    assert a[0].images.dtype == np.float32 and a[0].images.shape == (200, 3, 16, 16)
    assert np.bincount(a[0].labels, minlength=10).min() > 0


def _pair(cfg, teacher):
    student = build_model(cfg.model.student_width, 10, cfg.seed, "student")
    return ModelPair(teacher, student, cfg.model.stages)


def test_beta_zero_gives_transforms_no_gradient(tiny_data, tiny_teacher):
    cfg = tiny_cfg("kd.beta=0")
    pair = _pair(cfg, tiny_teacher)
    X, Y = torch.from_numpy(tiny_data[0].images[:16]), torch.from_numpy(tiny_data[0].labels[:16])
    transforms = build_transforms(pair, cfg, X[:1], cfg.seed)
    opt = _optimizer(cfg, [*pair.student.parameters(), *transforms.parameters()])
    before = copy.deepcopy(transforms.state_dict())
    m = distill_step(X, Y, pair, transforms, cfg, new_run_state(cfg, pair), opt)
    assert m.feat == 0.0
    assert all(p.grad is None or not p.grad.any() for p in transforms.parameters())
    assert all(torch.equal(before[k], v) for k, v in transforms.state_dict().items())
    pair.close()


def test_teacher_frozen_over_steps(tiny_data, tiny_teacher):
    cfg = tiny_cfg()
    pair = _pair(cfg, tiny_teacher)
    checksum = pair.teacher_checksum()
    X, Y = torch.from_numpy(tiny_data[0].images), torch.from_numpy(tiny_data[0].labels)
    transforms = build_transforms(pair, cfg, X[:1], cfg.seed)
    state = new_run_state(cfg, pair)
    opt = _optimizer(cfg, [*pair.student.parameters(), *transforms.parameters()])
    for i in range(3):
        distill_step(X[32 * i : 32 * i + 32], Y[32 * i : 32 * i + 32], pair, transforms, cfg, state, opt)
    assert pair.teacher_checksum() == checksum
    assert all(not p.requires_grad for p in tiny_teacher.parameters())
    assert len(state.trace) == 3
    pair.close()


def test_one_step_reduces_loss_on_same_batch(tiny_data, tiny_teacher):
    cfg = tiny_cfg("mask.strategy=random", "mask.ratio=0.5", "optim.lr=0.001")
    pair = _pair(cfg, tiny_teacher)
    X, Y = torch.from_numpy(tiny_data[0].images[:32]), torch.from_numpy(tiny_data[0].labels[:32])
    transforms = build_transforms(pair, cfg, X[:1], cfg.seed)
    state = new_run_state(cfg, pair)
    params = [*pair.student.parameters(), *transforms.parameters()]
    first = distill_step(X, Y, pair, transforms, cfg, state, _optimizer(cfg, params))
    # re-evaluate with identical masks and a zero learning rate
    state.step = 0
    state.trace = type(state.trace)()
    frozen = torch.optim.SGD(params, lr=0.0)
    second = distill_step(X, Y, pair, transforms, cfg, state, frozen)
    assert second.total < first.total
    pair.close()


def test_nonfinite_loss_aborts_with_dump(tmp_path, tiny_data):
    cfg = tiny_cfg()
    teacher = build_model(1.0, 10, 0, "teacher")
    with torch.no_grad():
        teacher.fc.bias.fill_(float("inf"))
    pair = _pair(cfg, teacher)
    X, Y = torch.from_numpy(tiny_data[0].images[:8]), torch.from_numpy(tiny_data[0].labels[:8])
    transforms = build_transforms(pair, cfg, X[:1], cfg.seed)
    opt = _optimizer(cfg, pair.student.parameters())
    with pytest.raises(NonFiniteLossError, match="non-finite loss at step 0"):
        distill_step(X, Y, pair, transforms, cfg, new_run_state(cfg, pair), opt, out_dir=tmp_path)
    dump = np.load(tmp_path / "nonfinite_step0.npz")
    assert set(dump.files) == {"student_stage4", "teacher_stage4"}
    pair.close()


def test_zero_weights_reproduce_baseline(tiny_data, tiny_teacher):
    cfg = tiny_cfg("kd.alpha=0", "kd.beta=0")
    distilled = run_distillation(cfg, teacher=tiny_teacher, out_dir=False, datasets=tiny_data)
    baseline = run_baseline(cfg, out_dir=False, datasets=tiny_data)
    assert parameter_checksum(distilled.model) == parameter_checksum(baseline.model)
    assert distilled.report == baseline.report


def test_zero_epochs_is_a_no_op(tiny_data, tiny_teacher):
    cfg = tiny_cfg("optim.epochs=0")
    fresh = build_model(cfg.model.student_width, 10, cfg.seed, "student")
    result = run_distillation(cfg, teacher=tiny_teacher, out_dir=False, datasets=tiny_data)
    assert parameter_checksum(result.model) == parameter_checksum(fresh)
    assert result.report == result.initial_report
    assert len(result.trace) == 0
    base = run_baseline(cfg, out_dir=False, datasets=tiny_data)
    assert base.report == base.initial_report


def test_baseline_one_epoch_lowers_loss():
    cfg = build_config({}, ["optim.epochs=1", "model.role=student"])
    result = run_baseline(cfg, out_dir=False)
    assert result.report.cls_loss < result.initial_report.cls_loss


def test_run_writes_artifacts_and_trace_rows(tmp_path, tiny_data, tiny_teacher):
    cfg = tiny_cfg("model.stages=[[stage4, stage4], [stage3, stage3]]", "optim.epochs=2")
    result = run_distillation(cfg, teacher=tiny_teacher, out_dir=tmp_path, datasets=tiny_data)
    for name in ("student.ckpt", "trace.csv", "report.json", "config.yaml"):
        assert (tmp_path / name).is_file()
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0] == "step,stage,cka,cosine,ratio,cls_loss,logits_loss,feat_loss"
    assert len(rows) - 1 == 2 * 3 * 2  # epochs * steps * stages
    assert sorted(result.trace.stages()) == ["stage3", "stage4"]
    reloaded = load_model(tmp_path / "student.ckpt")
    assert parameter_checksum(reloaded) == parameter_checksum(result.model)


def test_inference_path_never_touches_transforms(tiny_data, tiny_teacher):
    result = run_distillation(tiny_cfg(), teacher=tiny_teacher, out_dir=False, datasets=tiny_data)
    assert transform_call_count() > 0
    reset_transform_calls()
    evaluate(result.model, tiny_data[1])
    assert transform_call_count() == 0
    transform_names = {n for n, _ in result.transforms.named_parameters()}
    assert not transform_names & set(result.model.state_dict())
    assert not any(getattr(m, "training_only", False) for m in result.model.modules())


def test_same_seed_same_trace_bytes(tmp_path, tiny_data, tiny_teacher):
    cfg = tiny_cfg()
    run_distillation(cfg, teacher=tiny_teacher, out_dir=tmp_path / "a", datasets=tiny_data)
    run_distillation(cfg, teacher=tiny_teacher, out_dir=tmp_path / "b", datasets=tiny_data)
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    assert (tmp_path / "a" / "student.ckpt").read_bytes() == (tmp_path / "b" / "student.ckpt").read_bytes()


def test_missing_teacher_names_path(tmp_path, tiny_data):
    missing = tmp_path / "nowhere" / "teacher.ckpt"
    cfg = tiny_cfg(f"model.teacher_checkpoint={missing}")
    with pytest.raises(TeacherNotFoundError, match="nowhere"):
        run_distillation(cfg, out_dir=False, datasets=tiny_data)


def test_checkpoint_round_trip(tmp_path):
    model = build_model(0.5, 10, 3, "student")
    save_model(tmp_path / "m.ckpt", model, build_config())
    assert parameter_checksum(load_model(tmp_path / "m.ckpt")) == parameter_checksum(model)


def test_cosine_projection_is_cached():
    p = CosineProjector(1)
    x = np.ones((2, 6))
    np.testing.assert_array_equal(p(x, 3), p(x, 3))
    assert len(p._cache) == 1
    assert p(x, 6) is x


def test_warmup_ramps_linearly_then_follows_cosine():
    cfg = build_config({}, [("optim.lr", 0.1)])
    total, warmup = 100, 10
    assert _lr(cfg, 0, total, warmup) == pytest.approx(0.1 * 0.1 * 0.5 * (1 + np.cos(0)))
    assert _lr(cfg, 4, total, warmup) == pytest.approx(0.1 * 0.5 * 0.5 * (1 + np.cos(np.pi * 0.04)))
    for step in (9, 50, 99):
        assert _lr(cfg, step, total, warmup) == pytest.approx(_lr(cfg, step, total))
    constant = build_config({}, [("optim.lr_schedule", "constant")])
    assert _lr(constant, 1, total, 4) == pytest.approx(0.05 * 0.5)
