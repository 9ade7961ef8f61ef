import json

import numpy as np
import pyarrow.fs as fs
import pytest

from altlora import AltloraException, ContractError, MissingInputError, NonFiniteError
from altlora.config import CHECKPOINT_NAME, METRICS_NAME
from altlora.losses import LossConfig
from altlora.model import ModelConfig, TranscriberModel
from altlora.numerics import parameter
from altlora.synthdata import BOS, EOS, PAD, GenConfig, generate_sample
from altlora.training import (
    OptimizerState,
    TrainPlan,
    adam_step,
    batch_indices,
    collate,
    load_plan,
    make_schedule,
    run_experiment,
    select_inputs,
    train_step,
)

MODEL = ModelConfig(hidden_dim=8, encoder_layers=1, decoder_layers=1, lora_rank=2, lora_alpha=2.0)


def make_samples(n, config=GenConfig(), stage="finetune"):
    return [generate_sample(seed, config, stage) for seed in range(n)]


def read_bytes(file_path):
    with fs.LocalFileSystem().open_input_stream(file_path) as stream:
        return stream.read()


def test_train_plan(tmp_path):
    """Test training.TrainPlan and training.load_plan"""

    plan = TrainPlan.from_dict({"loss": {"strategy": "mix"}, "peak_lr": "3e-3", "total_steps": 10})
    assert plan.loss == LossConfig("mix")
    assert plan.peak_lr == 0.003
    assert TrainPlan.from_dict(plan.to_dict()) == plan

    with pytest.raises(AltloraException) as e:
        TrainPlan.from_dict({"steps": 10})
    assert "steps" in str(e.value)
    with pytest.raises(ContractError):
        TrainPlan(warmup_frac=1.0)
    with pytest.raises(ContractError):
        TrainPlan(phase="evaluate")
    with pytest.raises(ContractError):
        TrainPlan(total_steps=1)

    file_path = str(tmp_path / "plan.json")
    with open(file_path, "w") as f:
        json.dump({"loss": {"strategy": "cns", "cns_kind": "L1", "weight": 0.1}, "seed": 3}, f)
    plan = load_plan(file_path)
    assert plan.loss.cell_id == "cns-l1-w0.1"
    assert plan.seed == 3

    with pytest.raises(MissingInputError):
        load_plan(str(tmp_path / "missing.json"))


def test_make_schedule():
    """Test training.make_schedule"""

    lr = make_schedule(1000, 1e-3, 0.1)
    assert lr.warmup_steps == 100
    assert lr(0) == 0.0
    assert lr(50) == pytest.approx(5e-4)
    assert lr(100) == 1e-3
    assert lr(550) == pytest.approx(5e-4)
    assert lr(1000) == 0.0

    # the warmup is at least one step and leaves one step of decay
    assert make_schedule(2, 1.0, 0.01).warmup_steps == 1
    assert make_schedule(10, 1.0, 0.99).warmup_steps == 9
    assert make_schedule(10, 1.0, 0.3).warmup_steps == 3

    with pytest.raises(ContractError):
        make_schedule(1, 1.0)

    rng = np.random.default_rng(0)
    for _ in range(10):
        T = int(rng.integers(2, 2000))
        frac = float(rng.uniform(0.01, 0.99))
        lr = make_schedule(T, 2.0, frac)
        W = lr.warmup_steps
        values = np.array([lr(k) for k in range(T + 1)])

        assert 1 <= W <= T - 1
        assert values[0] == 0.0 and values[T] == 0.0
        assert values[W] == 2.0
        assert np.argmax(values) == W
        assert np.all(np.diff(values[: W + 1]) > 0)
        assert np.all(np.diff(values[W:]) < 0)


def test_adam_step():
    """Test training.adam_step"""

    # first step moves by lr * g / (|g| + eps)
    p = parameter([1.0, -2.0, 0.0])
    p.grad = np.array([0.5, -3.0, 0.0])
    adam_step({"p": p}, OptimizerState(), 0.1)
    assert np.allclose(p.values, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 3.0 / (3.0 + 1e-8), 0.0])

    # zero gradient, no movement
    p = parameter([1.5])
    p.grad = np.zeros(1)
    state = adam_step({"p": p}, OptimizerState(), 0.1)
    assert p.values.tolist() == [1.5]
    assert state.step == 1

    # f(x) = x^2 against the update recurrence
    x = parameter([1.0])
    state = OptimizerState()
    ref, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        g = 2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)

        x.grad = 2 * x.values
        adam_step({"x": x}, state, 0.01)
        assert abs(x.values[0] - ref) <= 1e-12

    # nothing moves when any gradient isn't finite
    a, b = parameter([1.0]), parameter([2.0])
    a.grad, b.grad = np.array([1.0]), np.array([np.nan])
    state = OptimizerState()
    with pytest.raises(NonFiniteError) as e:
        adam_step({"a": a, "b": b}, state, 0.1)
    assert "b" in str(e.value)
    assert a.values.tolist() == [1.0]
    assert state.step == 0


def test_select_inputs():
    """Test training.select_inputs"""

    sample = generate_sample(0, GenConfig())
    rng = np.random.default_rng(0)
    assert [tag for tag, _ in select_inputs("voc", sample, rng)] == ["v"]
    assert [tag for tag, _ in select_inputs("mix", sample, rng)] == ["m"]
    assert [tag for tag, _ in select_inputs("both", sample, rng)] == ["v", "m"]
    assert [tag for tag, _ in select_inputs("cns", sample, rng)] == ["v", "m"]
    assert select_inputs("mix", sample, rng)[0][1] is sample.X_m

    draws = [select_inputs("random", sample, rng)[0][0] for _ in range(10_000)]
    assert 0.45 <= draws.count("v") / len(draws) <= 0.55

    with pytest.raises(ContractError):
        select_inputs("vocals", sample, rng)


def test_collate():
    """Test training.collate"""

    features = [np.ones((6, 4)), 2 * np.ones((3, 4))]
    batch = collate(features, [[BOS, 5, 6, EOS], [BOS, 7, EOS]])

    assert batch.X.shape == (2, 6, 4)
    assert batch.mask.tolist() == [[True] * 6, [True] * 3 + [False] * 3]
    assert not np.any(batch.X[1, 3:])
    assert batch.y_in.tolist() == [[BOS, 5, 6], [BOS, 7, PAD]]
    assert batch.y_out.tolist() == [[5, 6, EOS], [7, EOS, PAD]]


def test_batch_indices():
    """Test training.batch_indices"""

    order = batch_indices(10, 4, np.random.default_rng(0))
    epoch = [next(order) for _ in range(2)]
    assert all(len(batch) == 4 for batch in epoch)
    assert len(set(np.concatenate(epoch).tolist())) == 8

    # smaller corpus than a batch
    order = batch_indices(3, 8, np.random.default_rng(0))
    assert sorted(next(order).tolist()) == [0, 1, 2]

    again = batch_indices(10, 4, np.random.default_rng(0))
    assert all(np.array_equal(next(again), batch) for batch in epoch)


def test_train_step_breakdown():
    """Test training.train_step loss breakdowns"""

    samples = make_samples(4)
    plan = TrainPlan(loss=LossConfig("cns", "L2", 10.0), total_steps=10, batch_size=4)
    model = TranscriberModel(MODEL, seed=0)
    model.attach_lora(seed=1)
    metrics = train_step(
        model, samples, plan, OptimizerState(), 1e-3, np.random.default_rng(0), np.random.default_rng(1)
    )
    L = metrics.losses
    assert L.total == pytest.approx((L.alt_v + L.alt_m) / 2 + 10.0 * L.cns, rel=1e-12)
    assert L.cns > 0.0
    assert set(metrics.to_record()) == {"step", "lr", "L_v", "L_m", "L_CNS", "L_total"}

    # single domain strategies report the other domain as 0
    plan = TrainPlan(loss=LossConfig("voc"), total_steps=10, batch_size=4)
    metrics = train_step(
        model, samples, plan, OptimizerState(), 1e-3, np.random.default_rng(0), np.random.default_rng(1)
    )
    assert metrics.losses.alt_m == 0.0
    assert metrics.losses.cns == 0.0
    assert metrics.losses.alt_v == pytest.approx(metrics.losses.total, rel=1e-12)

    # without interference both domains agree and the consistency term vanishes
    quiet = make_samples(4, GenConfig(gain_range=(0.0, 0.0)))
    model = TranscriberModel(ModelConfig(**{**MODEL.to_dict(), "lora_dropout": 0.0}), seed=0)
    model.attach_lora(seed=1)
    plan = TrainPlan(loss=LossConfig("both"), total_steps=10, batch_size=4)
    metrics = train_step(
        model, quiet, plan, OptimizerState(), 1e-3, np.random.default_rng(0), np.random.default_rng(1)
    )
    assert metrics.losses.alt_v == metrics.losses.alt_m
    assert metrics.losses.cns == 0.0
    assert metrics.losses.total == pytest.approx(metrics.losses.alt_v, rel=1e-12)



def test_train_step_random_coin_stream():
    """Test training.train_step random strategy draws one coin per sample, whatever the batch holds"""

    plan = TrainPlan(loss=LossConfig("random"), total_steps=10, batch_size=4)
    other = GenConfig(gain_range=(0.0, 0.2))
    batches = [make_samples(4), [generate_sample(seed, other) for seed in range(50, 54)]]

    states = []
    for samples in batches:
        model = TranscriberModel(MODEL, seed=0)
        model.attach_lora(seed=1)
        coin_rng = np.random.default_rng(9)
        train_step(model, samples, plan, OptimizerState(), 1e-3, coin_rng, np.random.default_rng(1))
        states.append(coin_rng.bit_generator.state)

    reference = np.random.default_rng(9)
    reference.random(4)
    assert states[0] == states[1] == reference.bit_generator.state


def test_train_step_non_finite():
    """Test training.train_step on a non-finite loss"""

    model = TranscriberModel(MODEL, seed=0)
    model.attach_lora(seed=1)
    model.params["output.bias"].values[5] = np.inf
    before = model.digest()

    plan = TrainPlan(loss=LossConfig("mix"), total_steps=10, batch_size=2)
    with pytest.raises(NonFiniteError):
        train_step(
            model,
            make_samples(2),
            plan,
            OptimizerState(),
            1e-3,
            np.random.default_rng(0),
            np.random.default_rng(1),
        )
    assert model.digest() == before


def test_finetune_frozen_base():
    """Test training.run_experiment leaves the base weights untouched"""

    model = TranscriberModel(MODEL, seed=2)
    base = model.base_digest()
    plan = TrainPlan(loss=LossConfig("cns"), total_steps=100, batch_size=4, seed=3)
    model, history = run_experiment(plan, make_samples(12), model=model)

    assert model.base_digest() == base
    assert len(history) == 100
    assert [m.step for m in history] == list(range(1, 101))
    assert any(np.any(adapter.B.values) for adapter in model.adapters.values())
    assert model.seeds == [2, 3]


def test_run_experiment_determinism(tmp_path):
    """Test training.run_experiment output files twice with the same seed"""

    samples = make_samples(10)
    pretrained = str(tmp_path / "pretrain" / CHECKPOINT_NAME)
    pretrain = TrainPlan(phase="pretrain", loss=LossConfig("voc"), total_steps=5, batch_size=4)
    run_experiment(pretrain, samples, model_config=MODEL, out_dir=str(tmp_path / "pretrain"))

    plan = TrainPlan(loss=LossConfig("random"), total_steps=6, batch_size=4, seed=1)
    for run in ("a", "b"):
        run_experiment(plan, samples, checkpoint=pretrained, out_dir=str(tmp_path / run))

    for name in (METRICS_NAME, CHECKPOINT_NAME):
        assert read_bytes(str(tmp_path / "a" / name)) == read_bytes(str(tmp_path / "b" / name))

    # another seed, other adapters
    plan = TrainPlan(loss=LossConfig("random"), total_steps=6, batch_size=4, seed=2)
    run_experiment(plan, samples, checkpoint=pretrained, out_dir=str(tmp_path / "c"))
    assert read_bytes(str(tmp_path / "a" / CHECKPOINT_NAME)) != read_bytes(
        str(tmp_path / "c" / CHECKPOINT_NAME)
    )

    records = [json.loads(line) for line in read_bytes(str(tmp_path / "a" / METRICS_NAME)).splitlines()]
    assert [r["step"] for r in records] == list(range(1, 7))
    assert records[0]["lr"] == 0.0


def test_run_experiment_missing_checkpoint(tmp_path):
    """Test training.run_experiment without a pretrained model"""

    plan = TrainPlan(total_steps=2, batch_size=2)
    with pytest.raises(MissingInputError) as e:
        run_experiment(plan, make_samples(2))
    assert "pretrain" in str(e.value)

    with pytest.raises(MissingInputError):
        run_experiment(plan, make_samples(2), checkpoint=str(tmp_path / CHECKPOINT_NAME))

    with pytest.raises(MissingInputError):
        run_experiment(plan, [], model=TranscriberModel(MODEL))


def test_pretrain_reduces_loss():
    """Test training.run_experiment pretraining lowers the transcription loss"""

    plan = TrainPlan(
        phase="pretrain", loss=LossConfig("voc"), peak_lr=3e-3, total_steps=60, batch_size=8
    )
    _, history = run_experiment(plan, make_samples(40, stage="pretrain"), model_config=MODEL)

    first = np.mean([m.losses.total for m in history[:5]])
    last = np.mean([m.losses.total for m in history[-5:]])
    assert last < first


@pytest.mark.slow
def test_pretrain_converges():
    """Test training.run_experiment 200 pretraining steps cut the loss by a third"""

    plan = TrainPlan(
        phase="pretrain", loss=LossConfig("voc"), peak_lr=3e-3, total_steps=200, batch_size=16
    )
    _, history = run_experiment(plan, make_samples(200, stage="pretrain"), model_config=ModelConfig())

    first = np.mean([m.losses.total for m in history[:10]])
    last = np.mean([m.losses.total for m in history[-10:]])
    assert last <= 0.7 * first


def test_run_experiment_progress(capsys):
    """Test training.run_experiment progress lines"""

    plan = TrainPlan(phase="pretrain", loss=LossConfig("voc"), total_steps=4, batch_size=2, log_every=2)
    _, history = run_experiment(plan, make_samples(4, stage="pretrain"), model_config=MODEL, verbose=True)

    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[1] for line in lines] == ["2/4", "4/4"]
    assert f"running={history[-1].running_total:.4f}" in lines[-1]
    assert lines[-1].endswith("s")
    assert "time=" in lines[-1]
    assert all(m.wall_time >= 0.0 for m in history)
    assert history[0].running_total == history[0].losses.total


@pytest.mark.slow
def test_finetune_converges():
    """Test training.run_experiment 200 fine-tuning steps cut the loss by 30% from step 0"""

    pretrain = TrainPlan(
        phase="pretrain", loss=LossConfig("voc"), peak_lr=3e-3, total_steps=300, batch_size=16
    )
    model, _ = run_experiment(pretrain, make_samples(200, stage="pretrain"), model_config=ModelConfig())

    plan = TrainPlan(loss=LossConfig("mix"), total_steps=200, seed=1)
    samples = [generate_sample(seed, GenConfig()) for seed in range(1000, 1016)]
    model, history = run_experiment(plan, samples, model=model)

    last = np.mean([m.losses.total for m in history[-10:]])
    assert last <= 0.7 * history[0].losses.total
