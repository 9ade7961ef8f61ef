"""Toy encoder-decoder transcriber with LoRA adapters

The encoder maps feature frames [T x F] to representations E [T x H] (no
temporal downsampling). The decoder attends causally to its own token prefix
and to E, and projects to vocabulary logits. LoRA adapters sit on the query
and value projections of every self- and cross-attention layer.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np
import pyarrow as pa
import pyarrow.fs as fs
import yaml

from altlora import (
    AltloraException,
    ContractError,
    DimensionError,
    MissingInputError,
    arrays_digest,
    file_exists,
    from_dict,
)
from altlora.config import CHECKPOINT_FORMAT, VERSION
from altlora.numerics import (
    Tensor,
    add,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    parameter,
    permute,
    reshape,
    scale,
    softmax,
    transpose,
)
from altlora.synthdata import BOS, VOCAB_SIZE

PHASES = ("pretrain", "finetune")
NEG = -1e9  # additive attention mask


@dataclass
class ModelConfig:
    feature_dim: int = 16
    hidden_dim: int = 32
    num_heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    vocab_size: int = VOCAB_SIZE
    max_audio_frames: int = 64
    max_token_len: int = 32
    lora_rank: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1

    def __post_init__(self):
        self.lora_alpha = float(self.lora_alpha)
        self.lora_dropout = float(self.lora_dropout)

        if self.hidden_dim % self.num_heads:
            raise ContractError(
                f"Error, hidden_dim {self.hidden_dim} isn't divisible by num_heads {self.num_heads}"
            )
        if self.vocab_size < 4:
            raise ContractError(f"Error, vocab_size must be >= 4, got {self.vocab_size}")
        if self.max_audio_frames < 1 or self.max_token_len < 1:
            raise ContractError("Error, max_audio_frames and max_token_len must be >= 1")
        if self.lora_rank < 1:
            raise ContractError(f"Error, lora_rank must be >= 1, got {self.lora_rank}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ContractError(f"Error, lora_dropout must be in [0, 1), got {self.lora_dropout}")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return from_dict(cls, data, "model")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LoraAdapter:
    """Low-rank delta (alpha/rank)·B·A added to a frozen weight"""

    A: Tensor  # [rank x d_in]
    B: Tensor  # [d_out x rank]
    rank: int
    alpha: float
    dropout: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.values @ self.A.values)


@dataclass
class EncoderOutput:
    E: Tensor
    mask: np.ndarray  # frame validity


def _sinusoids(length: int, channels: int) -> np.ndarray:
    half = channels // 2
    timescales = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.arange(length)[:, None] * timescales[None, :]
    table = np.zeros((length, channels))
    table[:, :half] = np.sin(angles)
    table[:, half : 2 * half] = np.cos(angles)
    return table


def adapted_ids(config: ModelConfig) -> list:
    """Query and value projections of every attention layer"""

    ids = []
    for i in range(config.encoder_layers):
        ids += [f"encoder.{i}.self_attn.q", f"encoder.{i}.self_attn.v"]
    for i in range(config.decoder_layers):
        for attn in ("self_attn", "cross_attn"):
            ids += [f"decoder.{i}.{attn}.q", f"decoder.{i}.{attn}.v"]
    return ids


class TranscriberModel:
    """Base weights, fixed buffers and the attached LoRA adapters

    Parameters:
        model configuration (ModelConfig): config
        weight initialization seed (int): seed
    """

    def __init__(self, config: ModelConfig, seed: int = 0, initialize: bool = True):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {
            "encoder.position": _sinusoids(config.max_audio_frames, config.hidden_dim)
        }
        self.adapters: Dict[str, LoraAdapter] = {}
        self.seeds = [seed]
        self._dropout_rng: Optional[np.random.Generator] = None

        if initialize:
            self._initialize(np.random.default_rng(seed))

    def _initialize(self, rng: np.random.Generator):
        c = self.config
        H = c.hidden_dim

        def linear(name, d_out, d_in):
            self.params[f"{name}.weight"] = parameter(
                rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
            )
            self.params[f"{name}.bias"] = parameter(np.zeros(d_out))

        def norm(name):
            self.params[f"{name}.gain"] = parameter(np.ones(H))
            self.params[f"{name}.bias"] = parameter(np.zeros(H))

        def attention(name):
            for projection in ("q", "k", "v", "o"):
                linear(f"{name}.{projection}", H, H)

        def mlp(name):
            linear(f"{name}.fc1", 4 * H, H)
            linear(f"{name}.fc2", H, 4 * H)

        linear("input", H, c.feature_dim)
        for i in range(c.encoder_layers):
            norm(f"encoder.{i}.ln1")
            attention(f"encoder.{i}.self_attn")
            norm(f"encoder.{i}.ln2")
            mlp(f"encoder.{i}.mlp")
        norm("encoder.ln")

        self.params["token.embedding"] = parameter(
            0.1 * rng.standard_normal((c.vocab_size, H))
        )
        self.params["decoder.position"] = parameter(
            0.1 * rng.standard_normal((c.max_token_len, H))
        )
        for i in range(c.decoder_layers):
            norm(f"decoder.{i}.ln1")
            attention(f"decoder.{i}.self_attn")
            norm(f"decoder.{i}.ln2")
            attention(f"decoder.{i}.cross_attn")
            norm(f"decoder.{i}.ln3")
            mlp(f"decoder.{i}.mlp")
        norm("decoder.ln")
        linear("output", c.vocab_size, H)

    def attach_lora(self, seed: int) -> None:
        """Adapters with A ~ N(0, 1/d_in) and B = 0 on every adapted projection"""

        c = self.config
        rng = np.random.default_rng(seed)
        for adapter_id in adapted_ids(c):
            d_out, d_in = self.params[f"{adapter_id}.weight"].shape
            self.adapters[adapter_id] = LoraAdapter(
                A=parameter(rng.standard_normal((c.lora_rank, d_in)) / np.sqrt(d_in)),
                B=parameter(np.zeros((d_out, c.lora_rank))),
                rank=c.lora_rank,
                alpha=c.lora_alpha,
                dropout=c.lora_dropout,
            )
        self.seeds.append(seed)
        self._dropout_rng = None

    def dropout_rng(self) -> np.random.Generator:
        """Adapter dropout stream seeded from the seed lineage, used when no rng is passed"""

        if self._dropout_rng is None:
            self._dropout_rng = np.random.default_rng([int(seed) for seed in self.seeds])
        return self._dropout_rng

    def base_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"param/{name}": p.values for name, p in self.params.items()}
        arrays.update({f"buffer/{name}": b for name, b in self.buffers.items()})
        return arrays

    def adapter_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for adapter_id, adapter in self.adapters.items():
            arrays[f"lora/{adapter_id}/A"] = adapter.A.values
            arrays[f"lora/{adapter_id}/B"] = adapter.B.values
        return arrays

    def base_digest(self) -> str:
        return arrays_digest(self.base_arrays())

    def digest(self) -> str:
        arrays = self.base_arrays()
        arrays.update(self.adapter_arrays())
        return arrays_digest(arrays)


# Layers


def lora_linear(
    adapter: Optional[LoraAdapter],
    W: Tensor,
    x: Tensor,
    train_mode: bool = False,
    bias: Optional[Tensor] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """W·x (+ bias) + (alpha/rank)·B·(A·drop(x))

    Dropout touches the adapter branch only, and only in train mode.
    """

    if W.shape[1] != x.shape[-1]:
        raise DimensionError(f"lora_linear: weight {W.shape} doesn't accept input {x.shape}")

    out = matmul(x, transpose(W))
    if bias is not None:
        out = add(out, bias)
    if adapter is None:
        return out

    if adapter.A.shape != (adapter.rank, W.shape[1]) or adapter.B.shape != (
        W.shape[0],
        adapter.rank,
    ):
        raise DimensionError(
            f"lora_linear: adapter A {adapter.A.shape} B {adapter.B.shape} don't fit weight {W.shape}"
        )

    branch = x
    if train_mode and adapter.dropout > 0.0:
        if rng is None:
            raise ContractError("lora_linear: train mode dropout needs an rng")
        branch = dropout(x, adapter.dropout, rng)

    delta = matmul(matmul(branch, transpose(adapter.A)), transpose(adapter.B))
    return add(out, scale(delta, adapter.scaling))


def _linear(model, name, x, train_mode, rng):
    return lora_linear(
        model.adapters.get(name),
        model.params[f"{name}.weight"],
        x,
        train_mode,
        model.params[f"{name}.bias"],
        rng,
    )


def _norm(model, name, x):
    return layer_norm(x, model.params[f"{name}.gain"], model.params[f"{name}.bias"])


def _mlp(model, name, x, train_mode, rng):
    hidden = gelu(_linear(model, f"{name}.fc1", x, train_mode, rng))
    return _linear(model, f"{name}.fc2", hidden, train_mode, rng)


def _attention(model, name, x, memory, mask_bias, train_mode, rng):
    """Multi-head attention of x [B,Tq,H] over memory [B,Tk,H]

    mask_bias broadcasts to [B, heads, Tq, Tk]; NEG entries are masked out.
    """

    B, Tq, H = x.shape
    Tk = memory.shape[1]
    heads = model.config.num_heads
    dh = H // heads

    def split(t, length):
        return permute(reshape(t, (B, length, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(model, f"{name}.q", x, train_mode, rng), Tq)
    k = split(_linear(model, f"{name}.k", memory, train_mode, rng), Tk)
    v = split(_linear(model, f"{name}.v", memory, train_mode, rng), Tk)

    scores = add(scale(matmul(q, transpose(k)), 1.0 / np.sqrt(dh)), Tensor(mask_bias))
    context = matmul(softmax(scores), v)
    context = reshape(permute(context, (0, 2, 1, 3)), (B, Tq, H))

    return _linear(model, f"{name}.o", context, train_mode, rng)


# Forward passes


def encode(
    model: TranscriberModel,
    X,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    mask: Optional[np.ndarray] = None,
) -> EncoderOutput:
    """Encoder representations E of features X [T x F] or a padded batch [B x T x F]

    In train mode without rng, adapter dropout draws from model.dropout_rng().

    Raise:
        ContractError when T exceeds max_audio_frames, window the input first
        (decoding.longform_decode)
    """

    X = X if isinstance(X, Tensor) else Tensor(X)
    c = model.config
    batched = X.ndim == 3
    if not batched:
        X = reshape(X, (1,) + X.shape)

    B, T, F = X.shape
    if T > c.max_audio_frames:
        raise ContractError(
            f"Error, {T} frames exceed max_audio_frames {c.max_audio_frames}, "
            "window the input (see decoding.longform_decode)"
        )
    if train_mode and rng is None:
        rng = model.dropout_rng()
    if F != c.feature_dim:
        raise DimensionError(f"encode: expected {c.feature_dim} features, got {F}")
    if not np.all(np.isfinite(X.values)):
        raise ContractError("Error, encoder input contains NaN or Inf")

    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(B, T)
    key_bias = np.where(mask, 0.0, NEG)[:, None, None, :]

    position = Tensor(model.buffers["encoder.position"][:T])
    h = add(_linear(model, "input", X, train_mode, rng), position)
    for i in range(c.encoder_layers):
        x = _norm(model, f"encoder.{i}.ln1", h)
        h = add(h, _attention(model, f"encoder.{i}.self_attn", x, x, key_bias, train_mode, rng))
        x = _norm(model, f"encoder.{i}.ln2", h)
        h = add(h, _mlp(model, f"encoder.{i}.mlp", x, train_mode, rng))
    E = _norm(model, "encoder.ln", h)

    if not batched:
        return EncoderOutput(reshape(E, (T, c.hidden_dim)), mask[0])
    return EncoderOutput(E, mask)


def decoder_forward(
    model: TranscriberModel,
    encoded: EncoderOutput,
    y_in,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Teacher-forced logits [L x V] (or [B x L x V]) for token prefix y_in

    Position t depends only on y_in[0..t] and E.
    """

    if train_mode and rng is None:
        rng = model.dropout_rng()

    c = model.config
    y = np.asarray(y_in, dtype=np.int64)
    batched = y.ndim == 2
    if not batched:
        y = y[None, :]

    B, L = y.shape
    if L < 1 or np.any(y[:, 0] != BOS):
        raise ContractError("Error, decoder input must begin with BOS")
    if L > c.max_token_len:
        raise ContractError(f"Error, {L} tokens exceed max_token_len {c.max_token_len}")

    E = encoded.E
    mask = np.asarray(encoded.mask, dtype=bool)
    if E.ndim == 2:
        E = reshape(E, (1,) + E.shape)
        mask = mask[None, :]
    if E.shape[0] != B:
        raise DimensionError(f"decoder_forward: {E.shape[0]} encodings for {B} sequences")

    causal_bias = np.triu(np.full((L, L), NEG), k=1)[None, None, :, :]
    cross_bias = np.where(mask, 0.0, NEG)[:, None, None, :]

    h = add(
        embedding(model.params["token.embedding"], y),
        embedding(model.params["decoder.position"], np.arange(L)),
    )
    for i in range(c.decoder_layers):
        x = _norm(model, f"decoder.{i}.ln1", h)
        h = add(h, _attention(model, f"decoder.{i}.self_attn", x, x, causal_bias, train_mode, rng))
        x = _norm(model, f"decoder.{i}.ln2", h)
        h = add(h, _attention(model, f"decoder.{i}.cross_attn", x, E, cross_bias, train_mode, rng))
        x = _norm(model, f"decoder.{i}.ln3", h)
        h = add(h, _mlp(model, f"decoder.{i}.mlp", x, train_mode, rng))

    logits = _linear(model, "output", _norm(model, "decoder.ln", h), train_mode, rng)
    if not batched:
        return reshape(logits, (L, c.vocab_size))
    return logits


# Parameters


def named_trainable_parameters(model: TranscriberModel, phase: str) -> Dict[str, Tensor]:
    """pretrain: every base weight; finetune: the A and B of every adapter"""

    if phase not in PHASES:
        raise ContractError(f"Error, unknown phase {phase!r}")

    if phase == "pretrain":
        return dict(model.params)

    named = {}
    for adapter_id, adapter in model.adapters.items():
        named[f"lora/{adapter_id}/A"] = adapter.A
        named[f"lora/{adapter_id}/B"] = adapter.B
    return named


def trainable_parameters(model: TranscriberModel, phase: str) -> list:
    return list(named_trainable_parameters(model, phase).values())


def set_phase(model: TranscriberModel, phase: str) -> None:
    """Freeze every tensor that phase doesn't train"""

    trainable = {id(p) for p in trainable_parameters(model, phase)}
    for p in model.params.values():
        p.requires_grad = id(p) in trainable
    for adapter in model.adapters.values():
        adapter.A.requires_grad = id(adapter.A) in trainable
        adapter.B.requires_grad = id(adapter.B) in trainable


def merge_adapters(model: TranscriberModel) -> TranscriberModel:
    """Adapter-free copy whose adapted weights are W + (alpha/rank)·B·A"""

    merged = TranscriberModel(model.config, initialize=False)
    merged.seeds = list(model.seeds)
    merged.buffers = {name: b.copy() for name, b in model.buffers.items()}
    merged.params = {name: parameter(p.values) for name, p in model.params.items()}
    for adapter_id, adapter in model.adapters.items():
        weight = merged.params[f"{adapter_id}.weight"]
        weight.values = weight.values + adapter.delta()

    return merged


# Checkpoint


def save_checkpoint(
    model: TranscriberModel,
    file_path: str,
    output_fs: fs.FileSystem = fs.LocalFileSystem(),
) -> str:
    """Arrow IPC file, one row per named array, YAML metadata in the schema

    Identical content produces identical bytes.
    """

    arrays = model.base_arrays()
    arrays.update(model.adapter_arrays())
    names = sorted(arrays)

    metadata = {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "adapted": bool(model.adapters),
        "seeds": [int(seed) for seed in model.seeds],
    }

    table = pa.table(
        {
            "name": pa.array(names, type=pa.string()),
            "shape": pa.array([list(arrays[n].shape) for n in names], type=pa.list_(pa.int64())),
            "values": pa.array(
                [arrays[n].reshape(-1) for n in names], type=pa.list_(pa.float64())
            ),
        }
    ).replace_schema_metadata({"altlora": yaml.safe_dump(metadata, sort_keys=True)})

    file_path = output_fs.normalize_path(file_path)
    with output_fs.open_output_stream(file_path, compression=None) as out:
        with pa.ipc.new_file(out, table.schema) as writer:
            writer.write_table(table)

    return file_path


def load_checkpoint(
    file_path: str, input_fs: fs.FileSystem = fs.LocalFileSystem()
) -> TranscriberModel:
    """Rebuild a TranscriberModel saved by save_checkpoint, bit-exact

    Raise:
        MissingInputError when file_path doesn't exist
    """

    if not file_exists(file_path, input_fs):
        raise MissingInputError(f"Error, checkpoint {file_path} doesn't exist")

    with input_fs.open_input_file(file_path) as source:
        table = pa.ipc.open_file(source).read_all()

    metadata = yaml.safe_load(table.schema.metadata[b"altlora"].decode())
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise AltloraException(
            f"Error, checkpoint format {metadata.get('format')} isn't {CHECKPOINT_FORMAT}"
        )

    config = ModelConfig.from_dict(metadata["config"])
    model = TranscriberModel(config, initialize=False)
    model.seeds = list(metadata["seeds"])

    column = table.column("values").combine_chunks()
    flat = column.flatten().to_numpy(zero_copy_only=False)
    offsets = column.offsets.to_numpy(zero_copy_only=False)

    arrays = {}
    names, shapes = table.column("name").to_pylist(), table.column("shape").to_pylist()
    for i, (name, shape) in enumerate(zip(names, shapes)):
        arrays[name] = np.array(flat[offsets[i] : offsets[i + 1]], dtype=np.float64).reshape(shape)

    lora = {}
    for name, values in arrays.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            model.params[rest] = parameter(values)
        elif kind == "buffer":
            model.buffers[rest] = values
        elif kind == "lora":
            adapter_id, _, matrix = rest.rpartition("/")
            lora.setdefault(adapter_id, {})[matrix] = values

    for adapter_id, matrices in lora.items():
        model.adapters[adapter_id] = LoraAdapter(
            A=parameter(matrices["A"]),
            B=parameter(matrices["B"]),
            rank=config.lora_rank,
            alpha=config.lora_alpha,
            dropout=config.lora_dropout,
        )

    return model


def describe(model: TranscriberModel) -> str:
    """YAML summary of a model: config, parameter counts and digests"""

    summary = {
        "config": model.config.to_dict(),
        "base_parameters": int(sum(p.size for p in model.params.values())),
        "adapter_parameters": int(
            sum(a.A.size + a.B.size for a in model.adapters.values())
        ),
        "base_digest": model.base_digest(),
        "seeds": [int(seed) for seed in model.seeds],
    }
    return yaml.safe_dump(summary, sort_keys=False)
