"""Greedy and long-form transcription

Long inputs are cut into consecutive non-overlapping windows of window_frames
(the last one may be shorter), every window is decoded on its own and the
texts are joined by a single space. The model isn't told whether a window
comes from a vocal track or a mixture.
"""

from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
import pyarrow as pa
import pyarrow.fs as fs
import pyarrow.json as pj

from altlora import ContractError, MissingInputError, file_exists, from_dict, write_jsonl
from altlora.config import CONDITIONS
from altlora.model import TranscriberModel, decoder_forward, encode
from altlora.numerics import Tensor, no_grad
from altlora.synthdata import BOS, EOS, PairedSample, detokenize


@dataclass
class DecodeConfig:
    max_tokens: int = 32
    window_frames: int = 63
    domain_agnostic: bool = True

    def __post_init__(self):
        if self.max_tokens < 2:
            raise ContractError(f"Error, max_tokens must be >= 2, got {self.max_tokens}")
        if self.window_frames < 1:
            raise ContractError(f"Error, window_frames must be >= 1, got {self.window_frames}")
        if not self.domain_agnostic:
            raise ContractError("Error, decoding is always domain-agnostic")

    @classmethod
    def from_dict(cls, data: dict) -> "DecodeConfig":
        return from_dict(cls, data, "decode")

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self, model: TranscriberModel) -> None:
        if self.window_frames > model.config.max_audio_frames:
            raise ContractError(
                f"Error, window_frames {self.window_frames} exceeds the model's "
                f"max_audio_frames {model.config.max_audio_frames}"
            )


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)


def greedy_decode(model: TranscriberModel, X, config: DecodeConfig) -> List[int]:
    """Token ids from BOS, appending the argmax token until EOS or the length limit

    Ties go to the lowest token id. The limit is the smaller of max_tokens and
    the model's max_token_len.
    """

    config.check(model)
    X = _values(X)
    if X.shape[0] > config.window_frames:
        raise ContractError(
            f"Error, {X.shape[0]} frames exceed window_frames {config.window_frames}, "
            "use longform_decode"
        )

    limit = min(config.max_tokens, model.config.max_token_len)
    tokens = [BOS]
    with no_grad():
        encoded = encode(model, X)
        while len(tokens) < limit:
            logits = decoder_forward(model, encoded, tokens)
            token = int(np.argmax(logits.values[-1]))
            tokens.append(token)
            if token == EOS:
                break

    return tokens


def split_windows(frames: int, window_frames: int) -> List[Tuple[int, int]]:
    """(start, stop) of consecutive windows covering every frame exactly once"""

    return [(start, min(start + window_frames, frames)) for start in range(0, frames, window_frames)]


def longform_decode(model: TranscriberModel, X_long, config: DecodeConfig) -> str:
    X_long = _values(X_long)
    if X_long.shape[0] < 1:
        raise ContractError("Error, nothing to decode, the input has no frames")

    texts = [
        detokenize(greedy_decode(model, X_long[start:stop], config))
        for start, stop in split_windows(X_long.shape[0], config.window_frames)
    ]

    return " ".join(texts)


def transcribe(
    model: TranscriberModel,
    samples: List[PairedSample],
    config: DecodeConfig,
    conditions: Optional[tuple] = None,
) -> List[dict]:
    """Transcript rows (id, condition, hypothesis), samples outer and conditions inner"""

    conditions = conditions or CONDITIONS
    for condition in conditions:
        if condition not in CONDITIONS:
            raise ContractError(f"Error, unknown condition {condition!r}")

    rows = []
    for sample in samples:
        for condition in conditions:
            X = sample.X_m if condition == "mix" else sample.X_v
            rows.append(
                {
                    "id": sample.sample_id,
                    "condition": condition,
                    "hypothesis": longform_decode(model, X, config),
                }
            )

    return rows


def write_transcripts(
    file_path: str, rows: List[dict], output_fs: fs.FileSystem = fs.LocalFileSystem()
) -> str:
    return write_jsonl(file_path, rows, output_fs)


def read_transcripts(
    file_path: str, input_fs: fs.FileSystem = fs.LocalFileSystem()
) -> List[dict]:
    if not file_exists(file_path, input_fs):
        raise MissingInputError(f"Error, transcripts {file_path} don't exist, run decode first")

    parse_options = pj.ParseOptions(
        explicit_schema=pa.schema(
            [("id", pa.string()), ("condition", pa.string()), ("hypothesis", pa.string())]
        )
    )
    with input_fs.open_input_stream(file_path) as stream:
        return pj.read_json(stream, parse_options=parse_options).to_pylist()
