"""Pretraining and LoRA fine-tuning loops

Adam with bias correction under a linear warmup and decay learning rate.
Every strategy runs one backward pass on L_total per step:

    voc, mix, random   single-domain transcription loss
    both               (L_v + L_m) / 2
    cns                (L_v + L_m) / 2 + w * L_CNS
"""

import math
from dataclasses import asdict, dataclass, field
from datetime import datetime
from os import path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pyarrow.fs as fs
import typer
import yaml

from altlora import (
    ContractError,
    MissingInputError,
    NonFiniteError,
    file_exists,
    from_dict,
    write_jsonl,
)
from altlora.config import CHECKPOINT_NAME, METRICS_NAME
from altlora.losses import LossBreakdown, LossConfig, alt_loss, combined_loss, consistency_loss
from altlora.model import (
    PHASES,
    ModelConfig,
    TranscriberModel,
    decoder_forward,
    encode,
    load_checkpoint,
    named_trainable_parameters,
    save_checkpoint,
    set_phase,
)
from altlora.numerics import Tensor, backward, no_grad, zero_grad
from altlora.synthdata import PAD, PairedSample

# Plan


@dataclass
class TrainPlan:
    phase: str = "finetune"
    loss: LossConfig = field(default_factory=LossConfig)
    peak_lr: float = 1e-3
    total_steps: int = 1000
    warmup_frac: float = 0.1
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        for name in ("peak_lr", "warmup_frac", "beta1", "beta2", "eps"):
            setattr(self, name, float(getattr(self, name)))

        if self.phase not in PHASES:
            raise ContractError(f"Error, phase must be pretrain or finetune, got {self.phase!r}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ContractError(f"Error, warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.batch_size < 1:
            raise ContractError(f"Error, batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 2:
            raise ContractError(f"Error, total_steps must be >= 2, got {self.total_steps}")
        if self.peak_lr < 0.0 or self.log_every < 1:
            raise ContractError("Error, peak_lr must be >= 0 and log_every >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainPlan":
        return from_dict(cls, data, "plan")

    def to_dict(self) -> dict:
        return asdict(self)


def load_plan(file_path: str, input_fs: fs.FileSystem = fs.LocalFileSystem()) -> TrainPlan:
    """TrainPlan from a JSON (or YAML) plan file, unknown fields rejected"""

    if not file_exists(file_path, input_fs):
        raise MissingInputError(f"Error, plan file {file_path} doesn't exist")

    with input_fs.open_input_stream(file_path) as stream:
        return TrainPlan.from_dict(yaml.safe_load(stream.read().decode("utf-8")))


# Optimization


def make_schedule(total_steps: int, peak: float, warmup_frac: float = 0.1) -> Callable:
    """Linear warmup to peak at step W = ceil(warmup_frac * T), then linear decay to 0 at T

    W is kept within [1, T - 1] so the curve peaks exactly once.
    """

    if total_steps < 2:
        raise ContractError(f"Error, schedule needs at least 2 steps, got {total_steps}")

    T = total_steps
    W = min(max(math.ceil(round(warmup_frac * T, 9)), 1), T - 1)

    def lr(step: int) -> float:
        if step <= W:
            return peak * step / W
        return peak * (T - step) / (T - W)

    lr.warmup_steps = W
    return lr


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Dict[str, Tensor],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """One Adam update, with bias correction, of the named params from their .grad

    The gradients are all checked before any parameter moves.
    """

    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"Error, no gradient for parameter {name}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"Error, non-finite gradient for parameter {name}")

    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v

        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + eps)

    return state


# Batches


def select_inputs(
    strategy: str, sample: PairedSample, rng: np.random.Generator
) -> List[Tuple[str, Tensor]]:
    """Domain-tagged inputs fed to the model for one sample

    random draws one coin per sample from rng, vocal when the draw is below 0.5.
    """

    if strategy == "voc":
        return [("v", sample.X_v)]
    if strategy == "mix":
        return [("m", sample.X_m)]
    if strategy == "random":
        return [("v", sample.X_v)] if rng.random() < 0.5 else [("m", sample.X_m)]
    if strategy in ("both", "cns"):
        return [("v", sample.X_v), ("m", sample.X_m)]

    raise ContractError(f"Error, unknown strategy {strategy!r}")


@dataclass
class Batch:
    X: np.ndarray  # [B, T, F], zero padded
    mask: np.ndarray  # [B, T]
    y_in: np.ndarray  # [B, L], BOS ... without the last token
    y_out: np.ndarray  # [B, L], shifted targets ending in EOS, PAD padded


def collate(features: List[np.ndarray], token_ids: List[list]) -> Batch:
    B = len(features)
    T = max(X.shape[0] for X in features)
    F = features[0].shape[1]
    L = max(len(y) for y in token_ids) - 1

    X = np.zeros((B, T, F))
    mask = np.zeros((B, T), dtype=bool)
    y_in = np.full((B, L), PAD, dtype=np.int64)
    y_out = np.full((B, L), PAD, dtype=np.int64)
    for b, (features_b, y) in enumerate(zip(features, token_ids)):
        X[b, : features_b.shape[0]] = features_b
        mask[b, : features_b.shape[0]] = True
        y_in[b, : len(y) - 1] = y[:-1]
        y_out[b, : len(y) - 1] = y[1:]

    return Batch(X, mask, y_in, y_out)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless batches of sample indices, reshuffled uniformly every epoch

    The tail of an epoch shorter than batch_size is dropped.
    """

    size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield order[start : start + size]


# Steps


@dataclass
class TrainMetrics:
    step: int
    lr: float
    losses: LossBreakdown
    running_total: float = 0.0
    wall_time: float = 0.0

    def to_record(self) -> dict:
        """Metrics log record, wall time left out"""

        return {"step": self.step, "lr": self.lr, **self.losses.to_dict()}


def _forward(model, X, mask, batch, rng):
    encoded = encode(model, X, True, rng, mask)
    return encoded, decoder_forward(model, encoded, batch.y_in, True, rng)


def train_step(
    model: TranscriberModel,
    samples: List[PairedSample],
    plan: TrainPlan,
    state: OptimizerState,
    lr: float,
    coin_rng: np.random.Generator,
    dropout_rng: np.random.Generator,
) -> TrainMetrics:
    """Zero the gradients, one backward pass on L_total, one adam_step

    For voc, mix and random, L_v and L_m report the loss over the samples fed
    from each domain (0 when none was). For both, L_CNS is reported but not
    trained on.

    Raise:
        NonFiniteError when L_total or a gradient isn't finite, parameters untouched
    """

    loss = plan.loss
    params = named_trainable_parameters(model, plan.phase)
    zero_grad(params.values())
    start = datetime.now()

    if loss.strategy in ("both", "cns"):
        batch = collate([s.X_v.values for s in samples], [s.y for s in samples])
        X_m = collate([s.X_m.values for s in samples], [s.y for s in samples]).X

        encoded_v, logits_v = _forward(model, batch.X, batch.mask, batch, dropout_rng)
        encoded_m, logits_m = _forward(model, X_m, batch.mask, batch, dropout_rng)
        L_v = alt_loss(logits_v, batch.y_out)
        L_m = alt_loss(logits_m, batch.y_out)

        if loss.strategy == "cns":
            L_cns = consistency_loss(encoded_v.E, encoded_m.E, loss.cns_kind, batch.mask)
            L_total = combined_loss(L_v, L_m, L_cns, loss.weight)
        else:
            with no_grad():
                L_cns = consistency_loss(encoded_v.E, encoded_m.E, loss.cns_kind, batch.mask)
            L_total = combined_loss(L_v, L_m, L_cns.item(), 0.0)

        breakdown = LossBreakdown(L_v.item(), L_m.item(), L_cns.item(), L_total.item())
    else:
        inputs = [select_inputs(loss.strategy, s, coin_rng)[0] for s in samples]
        batch = collate([X.values for _, X in inputs], [s.y for s in samples])

        _, logits = _forward(model, batch.X, batch.mask, batch, dropout_rng)
        L_total = alt_loss(logits, batch.y_out)

        is_vocal = np.array([tag == "v" for tag, _ in inputs])[:, None]
        with no_grad():
            L_v = alt_loss(logits, np.where(is_vocal, batch.y_out, PAD)).item()
            L_m = alt_loss(logits, np.where(is_vocal, PAD, batch.y_out)).item()

        breakdown = LossBreakdown(L_v, L_m, 0.0, L_total.item())

    if not math.isfinite(breakdown.total):
        raise NonFiniteError(f"Error, non-finite L_total {breakdown.total}")

    backward(L_total)
    adam_step(params, state, lr, plan.beta1, plan.beta2, plan.eps)

    return TrainMetrics(
        step=state.step,
        lr=lr,
        losses=breakdown,
        wall_time=(datetime.now() - start).total_seconds(),
    )


# Experiment


def run_experiment(
    plan: TrainPlan,
    samples: List[PairedSample],
    model: Optional[TranscriberModel] = None,
    checkpoint: Optional[str] = None,
    model_config: Optional[ModelConfig] = None,
    out_dir: Optional[str] = None,
    verbose: bool = False,
    output_fs: fs.FileSystem = fs.LocalFileSystem(),
) -> Tuple[TranscriberModel, List[TrainMetrics]]:
    """Train a model by plan on samples and write its metrics log and checkpoint

    pretrain starts from a model initialized with plan.seed (or the given
    model); finetune loads checkpoint (or takes the given model), attaches
    adapters seeded by plan.seed and leaves the base weights untouched.

    Deterministic given plan.seed, the samples and the starting weights.

    Parameters:
        training plan (TrainPlan): plan
        training samples (list): samples
        starting model (TranscriberModel): model
        starting checkpoint file (str): checkpoint
        config of a fresh pretraining model (ModelConfig): model_config
        directory for model.arrow and metrics.jsonl (str): out_dir
        echo progress lines (bool): verbose
        output filesystem (pyarrow.fs.FileSystem): output_fs

    Returns:
        trained model and per-step metrics (TranscriberModel, list)
    """

    if not samples:
        raise MissingInputError("Error, no training samples")

    if model is None and checkpoint is not None:
        if not file_exists(checkpoint, output_fs):
            raise MissingInputError(f"Error, checkpoint {checkpoint} doesn't exist")
        model = load_checkpoint(checkpoint, output_fs)
        if verbose:
            typer.echo(f"Loaded {checkpoint}")

    if plan.phase == "finetune":
        if model is None:
            raise MissingInputError(
                "Error, fine-tuning needs a pretrained checkpoint, run pretrain first"
            )
        model.attach_lora(plan.seed)
    elif model is None:
        model = TranscriberModel(model_config or ModelConfig(), seed=plan.seed)

    set_phase(model, plan.phase)
    base_digest = model.base_digest()

    order_seq, coin_seq, dropout_seq = np.random.SeedSequence(plan.seed).spawn(3)
    order = batch_indices(len(samples), plan.batch_size, np.random.default_rng(order_seq))
    coin_rng = np.random.default_rng(coin_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    schedule = make_schedule(plan.total_steps, plan.peak_lr, plan.warmup_frac)
    state = OptimizerState()
    last_good = checkpoint or "none, training from initialization"
    history = []
    running = 0.0

    for k in range(plan.total_steps):
        batch = [samples[i] for i in next(order)]
        try:
            metrics = train_step(model, batch, plan, state, schedule(k), coin_rng, dropout_rng)
        except NonFiniteError as e:
            raise NonFiniteError(f"{e} at step {k + 1}, last good checkpoint: {last_good}")

        running = metrics.losses.total if k == 0 else 0.9 * running + 0.1 * metrics.losses.total
        metrics.running_total = running
        history.append(metrics)

        if verbose and (metrics.step % plan.log_every == 0 or metrics.step == plan.total_steps):
            typer.echo(
                f"step {metrics.step}/{plan.total_steps} lr={metrics.lr:.6g} "
                f"L_total={metrics.losses.total:.4f} running={metrics.running_total:.4f} "
                f"time={metrics.wall_time:.3f}s"
            )

    if plan.phase == "finetune" and model.base_digest() != base_digest:
        raise ContractError("Error, fine-tuning changed the frozen base weights")

    if out_dir is not None:
        output_fs.create_dir(out_dir, recursive=True)
        metrics_path = write_jsonl(
            f"{out_dir}{path.sep}{METRICS_NAME}", [m.to_record() for m in history], output_fs
        )
        model_path = save_checkpoint(model, f"{out_dir}{path.sep}{CHECKPOINT_NAME}", output_fs)
        if verbose:
            typer.echo(f"Created {metrics_path}")
            typer.echo(f"Created {model_path}")

    return model, history
