from __future__ import annotations

import json
import math

import numpy as np
import pytest

from streampoint import synthdata
from streampoint.errors import FormatError, InvalidInputError, NumericFault
from streampoint.model import ModelConfig, load_checkpoint
from streampoint.substrate.nn import Parameter
from streampoint.trainer import (
    AdamState,
    TrainConfig,
    adamw_step,
    clip_gradients,
    draw_sample,
    lr_schedule,
    preset,
    sequence_loss,
    train,
)

TOY = ModelConfig.toy()


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    synthdata.generate_dataset(range(4), root, n_views=5, camera_only_prob=0.0,
                               height=TOY.height, width=TOY.width)
    return root


def _cfg(**kw):
    base = dict(model=TOY, warmup_steps=2, stage_a_steps=6, views=3, lr0=1e-3, checkpoint_every=3)
    base.update(kw)
    return TrainConfig(**base)


def _log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def _strip_wall(rows):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]


# -- schedule -----------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig(lr0=1e-4, warmup_steps=10, stage_a_steps=100)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(5, cfg) == pytest.approx(5e-5, abs=1e-18)
    assert lr_schedule(10, cfg) == 1e-4
    assert abs(lr_schedule(100, cfg)) <= 1e-12
    assert lr_schedule(55, cfg) == pytest.approx(5e-5, rel=1e-12)


def test_lr_schedule_monotone_after_warmup():
    cfg = TrainConfig(warmup_steps=20, stage_a_steps=200)
    lrs = [lr_schedule(s, cfg) for s in range(20, 201)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_config_invariants():
    with pytest.raises(InvalidInputError):
        TrainConfig(lr0=0.0)
    with pytest.raises(InvalidInputError):
        TrainConfig(warmup_steps=10, stage_a_steps=10)
    with pytest.raises(InvalidInputError):
        preset("nope")
    cfg = preset("generalize")
    assert cfg.total_steps == 6000 and cfg.stage_ends() == [3000, 5000, 6000]
    assert [cfg.stage_at(s) for s in (1, 3000, 3001, 5000, 5001)] == ["A", "A", "B", "B", "C"]
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- optimizer ------------------------------------------------------------------------

def _param(value):
    return Parameter(value, dtype=np.float64)


def test_adamw_zero_gradient_no_decay_is_identity():
    p = _param([1.0, -2.0, 3.0])
    cfg = TrainConfig(weight_decay=0.0)
    state = AdamState()
    for step in range(1, 6):
        adamw_step({"p": p}, {"p": np.zeros(3)}, state, step, 0.01, cfg)
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_adamw_decoupled_decay():
    p = _param([2.0])
    cfg = TrainConfig(weight_decay=0.1)
    state = AdamState()
    for step in range(1, 4):
        adamw_step({"p": p}, {"p": np.zeros(1)}, state, step, 0.01, cfg)
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.001) ** step, rel=1e-14)


def _scalar_adamw(x, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * wd * x
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adamw_matches_scalar_reference():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(20, 5))
    x0 = rng.normal(size=5)
    p = _param(x0)
    cfg = TrainConfig(weight_decay=0.05)
    state = AdamState()
    for step, g in enumerate(grads, start=1):
        adamw_step({"p": p}, {"p": g}, state, step, 0.003, cfg)
    for i in range(5):
        ref = _scalar_adamw(x0[i], grads[:, i], 0.003, 0.9, 0.95, 1e-8, 0.05)
        assert p.data[i] == pytest.approx(ref, abs=1e-14)


def test_adamw_constant_gradient_step_is_lr():
    p = _param([0.0])
    cfg = TrainConfig(weight_decay=0.0)
    state = AdamState()
    prev = 0.0
    for step in range(1, 201):
        adamw_step({"p": p}, {"p": np.array([0.37])}, state, step, 0.01, cfg)
        delta = prev - p.data[0]
        prev = p.data[0]
    assert delta == pytest.approx(0.01, rel=1e-6)
    assert p.data[0] == pytest.approx(_scalar_adamw(0.0, [0.37] * 200, 0.01, 0.9, 0.95, 1e-8, 0.0), abs=1e-13)


def test_adamw_errors():
    p = _param([1.0])
    with pytest.raises(NumericFault, match="weight"):
        adamw_step({"weight": p}, {"weight": np.array([np.nan])}, AdamState(), 1, 0.1, TrainConfig())
    with pytest.raises(InvalidInputError):
        adamw_step({"p": p}, {"p": np.ones(1)}, AdamState(), 0, 0.1, TrainConfig())
    with pytest.raises(InvalidInputError):
        adamw_step({"p": p}, {"p": np.ones(2)}, AdamState(), 1, 0.1, TrainConfig())


def test_adam_state_tensor_roundtrip():
    state = AdamState({"a.w": np.ones(2)}, {"a.w": np.full(2, 3.0)})
    back = AdamState.from_tensors(state.tensors())
    assert back.m["a.w"].tolist() == [1, 1] and back.v["a.w"].tolist() == [3, 3]


def test_clip_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(grads, 1.0) == pytest.approx(5.0)
    assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0, rel=1e-9)
    small = {"a": np.array([0.3])}
    clip_gradients(small, 1.0)
    assert small["a"][0] == 0.3


# -- sampling and loss ----------------------------------------------------------------

def test_draw_sample_deterministic_and_shaped(toy_data):
    data = [synthdata.read_sequence(p) for p in synthdata.list_sequences(toy_data)]
    cfg = _cfg(raymap_prob=0.5, max_views_c=5)
    a, sa = draw_sample(data, "A", cfg, np.random.default_rng([0, 1]))
    b, sb = draw_sample(data, "A", cfg, np.random.default_rng([0, 1]))
    assert sa == sb and len(a) == 3
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a.frames, b.frames))
    assert a.frames[0].kind is synthdata.Kind.IMAGE
    lengths = {len(draw_sample(data, "C", cfg, np.random.default_rng([0, k]))[0]) for k in range(40)}
    assert lengths <= {3, 4, 5} and len(lengths) > 1


def test_single_view_stack_loss_is_mean_of_independent_views(toy_data):
    from streampoint.model import StreamModel
    from streampoint.substrate import no_grad

    data = [synthdata.read_sequence(p) for p in synthdata.list_sequences(toy_data)]
    cfg = _cfg(color_jitter=False)
    model = StreamModel(TOY, seed=0).astype(np.float64)
    sample = synthdata.window(data[0], 0, 3)
    with no_grad():
        stacked, br = sequence_loss(model, sample, True, cfg)
        each = [float(sequence_loss(model, synthdata.window(sample, i, 1), False, cfg)[0].data) for i in range(3)]
    assert float(stacked.data) == pytest.approx(np.mean(each), rel=1e-12)
    assert br["loss_total"] == float(stacked.data)


# -- training loop ----------------------------------------------------------------------

def test_training_log_and_checkpoints(toy_data, tmp_path):
    res = train(_cfg(), toy_data, tmp_path / "run")
    rows = _log(res.log_path)
    assert [r["step"] for r in rows] == list(range(1, 7))
    assert set(rows[0]) == {"step", "stage", "lr", "loss_total", "loss_conf", "loss_pose", "loss_rgb",
                            "grad_norm", "wall_ms"}
    for r in rows:
        parts = r["loss_conf"] + r["loss_pose"] + r["loss_rgb"]
        assert parts == pytest.approx(r["loss_total"], abs=1e-6)
    names = sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir())
    assert names == ["step_000003", "step_000006"]
    assert res.checkpoint.name == "step_000006"


def test_identical_seeds_identical_logs(toy_data, tmp_path):
    a = train(_cfg(), toy_data, tmp_path / "a")
    b = train(_cfg(), toy_data, tmp_path / "b")
    assert _strip_wall(_log(a.log_path)) == _strip_wall(_log(b.log_path))
    c = train(_cfg(seed=1), toy_data, tmp_path / "c")
    assert _strip_wall(_log(a.log_path)) != _strip_wall(_log(c.log_path))


def test_resume_is_bit_identical(toy_data, tmp_path):
    cfg = _cfg(stage_a_steps=8, checkpoint_every=100)
    full = train(cfg, toy_data, tmp_path / "full")
    half = train(cfg, toy_data, tmp_path / "half", stop_after=4)
    assert half.checkpoint.name == "step_000004"
    resumed = train(cfg, toy_data, tmp_path / "half", resume_from=half.checkpoint)
    ma, _, ea = load_checkpoint(full.checkpoint)
    mb, _, eb = load_checkpoint(resumed.checkpoint)
    for (na, pa), (nb, pb) in zip(ma.named_parameters().items(), mb.named_parameters().items()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    assert all(ea[k].tobytes() == eb[k].tobytes() for k in ea)
    assert _strip_wall(_log(full.log_path)) == _strip_wall(_log(resumed.log_path))


def test_stage_c_freezes_image_encoder(toy_data, tmp_path):
    cfg = _cfg(stage_a_steps=2, stage_c_steps=3, warmup_steps=1, max_views_c=5, checkpoint_every=100)
    res = train(cfg, toy_data, tmp_path / "run")
    assert [r["stage"] for r in res.history] == ["A", "A", "C", "C", "C"]
    before, _, _ = load_checkpoint(tmp_path / "run" / "checkpoints" / "step_000002")
    after, _, _ = load_checkpoint(res.checkpoint)
    pb, pa = before.named_parameters(), after.named_parameters()
    frozen = [k for k in pb if k.startswith("image_encoder.")]
    assert frozen
    assert all(pb[k].data.tobytes() == pa[k].data.tobytes() for k in frozen)
    assert any(pb[k].data.tobytes() != pa[k].data.tobytes() for k in pb if k not in frozen)


def test_train_errors(tmp_path, toy_data):
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError):
        train(_cfg(), tmp_path / "empty", tmp_path / "out")
    with pytest.raises(InvalidInputError):
        train(_cfg(model=ModelConfig()), toy_data, tmp_path / "out2")
