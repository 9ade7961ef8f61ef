# python -m altlora synthdata sample --seed 7
# python -m altlora synthdata clean "looooove me"

"""Synthetic paired vocal/mixture corpus

A song is a few lines of words drawn from a per-language toy lexicon. Every
character is rendered as frames_per_token copies of a fixed feature embedding
plus Gaussian jitter: the "separated vocal". The "mixture" adds a gain-scaled
accompaniment, a second random token stream rendered through its own
embedding table, on top of the vocal.
"""

import functools
import re
from dataclasses import asdict, dataclass, field
from os import path
from typing import List, Tuple

import numpy as np
import pyarrow.fs as fs
import pyarrow.json as pj
import typer

from altlora import (
    AlphabetError,
    ContractError,
    MissingInputError,
    arrays_digest,
    from_dict,
    write_jsonl,
)
from altlora.numerics import Tensor

program = typer.Typer()

# Tokenizer


PAD, BOS, EOS = 0, 1, 2
SPECIALS = ["<pad>", "<bos>", "<eos>"]
ALPHABET = " abcdefghijklmnopqrstuvwxyz"
VOCAB = SPECIALS + list(ALPHABET)
VOCAB_SIZE = len(VOCAB)

_CHAR_ID = {char: i + len(SPECIALS) for i, char in enumerate(ALPHABET)}


def tokenize(text: str) -> List[int]:
    """Character ids framed as [BOS] ... [EOS]

    Raise:
        AlphabetError naming the first character outside lowercase a-z and space
    """

    ids = [BOS]
    for position, char in enumerate(text):
        if char not in _CHAR_ID:
            raise AlphabetError(
                f"Error, character {char!r} at position {position} is outside the alphabet"
            )
        ids.append(_CHAR_ID[char])
    ids.append(EOS)

    return ids


def detokenize(tokens) -> str:
    """Text of the ids between BOS and the first EOS, padding skipped"""

    chars = []
    for token in tokens:
        token = int(token)
        if token == EOS:
            break
        if token >= len(SPECIALS):
            chars.append(VOCAB[token])

    return "".join(chars)


# Lyrics preprocessing


_VOWEL_RUN = re.compile(r"([aeiouAEIOU])\1{2,}")


def clean_lyrics(text: str) -> str:
    """Collapse runs of three or more identical vowels, the sung cues, to one vowel"""

    return _VOWEL_RUN.sub(r"\1", text)


def merge_segments(lines: List[Tuple[str, int]], max_frames: int) -> List[list]:
    """Greedy left-to-right packing of consecutive lines into segments

    A line joins the open segment unless the segment would exceed max_frames.
    Lines are never split and keep their order.

    Parameters:
        (text, frame_count) per line (list): lines
        segment frame budget (int): max_frames

    Returns:
        segments, each a list of (text, frame_count) (list)
    """

    segments = []
    current = []
    current_frames = 0
    for index, (text, frames) in enumerate(lines):
        if frames > max_frames:
            raise ContractError(
                f"Error, line {index} {text!r} has {frames} frames, more than {max_frames}"
            )

        if current and current_frames + frames > max_frames:
            segments.append(current)
            current = []
            current_frames = 0

        current.append((text, frames))
        current_frames += frames

    if current:
        segments.append(current)

    return segments


# Generation


LEXICONS = {
    "en": ["love", "you", "baby", "oh", "my", "heart", "night", "fire", "dream", "la"],
    "fr": ["amour", "coeur", "nuit", "mon", "belle", "la", "vie", "toi"],
    "it": ["amore", "cuore", "mio", "notte", "sole", "vita", "ciao", "la"],
    "pt": ["amor", "meu", "noite", "vida", "sol", "mar", "luz", "la"],
}
SPLITS = ("pretrain", "train", "dev", "test")
SPLIT_STRIDE = 100_000  # seeds per split, a split holds at most this many songs


@dataclass
class GenConfig:
    """Synthetic corpus parameters

    jitter is the fine-tuning feature noise, pretrain_jitter the cleaner
    pretraining noise; gain_range is the accompaniment gain [g_lo, g_hi].
    """

    languages: list = field(default_factory=lambda: ["en", "fr", "it", "pt"])
    words_per_line: tuple = (1, 3)
    lines_per_song: tuple = (1, 4)
    frames_per_token: int = 3
    feature_dim: int = 16
    jitter: float = 0.3
    pretrain_jitter: float = 0.1
    gain_range: tuple = (0.5, 1.5)
    distractor_frames: int = 4
    cue_rate: float = 0.1
    max_frames: int = 63
    embedding_seed: int = 11
    distractor_seed: int = 17
    corpus_seed: int = 0
    split_songs: dict = field(
        default_factory=lambda: {"pretrain": 1500, "train": 400, "dev": 40, "test": 40}
    )

    def __post_init__(self):
        self.words_per_line = tuple(int(n) for n in self.words_per_line)
        self.lines_per_song = tuple(int(n) for n in self.lines_per_song)
        self.gain_range = tuple(float(g) for g in self.gain_range)
        self.jitter = float(self.jitter)
        self.pretrain_jitter = float(self.pretrain_jitter)
        self.cue_rate = float(self.cue_rate)

        g_lo, g_hi = self.gain_range
        if not 0.0 <= g_lo <= g_hi:
            raise ContractError(
                f"Error, gain_range must satisfy 0 <= g_lo <= g_hi: {self.gain_range}"
            )
        if self.jitter < 0.0 or self.pretrain_jitter < 0.0:
            raise ContractError("Error, jitter must be non-negative")
        if self.frames_per_token < 1 or self.distractor_frames < 1:
            raise ContractError("Error, frames_per_token and distractor_frames must be >= 1")
        for language in self.languages:
            if language not in LEXICONS:
                raise ContractError(f"Error, no lexicon for language {language!r}")
        for split in self.split_songs:
            if split not in SPLITS:
                raise ContractError(f"Error, unknown split {split!r}")
            if not 0 <= int(self.split_songs[split]) <= SPLIT_STRIDE:
                raise ContractError(
                    f"Error, split {split} must have 0 to {SPLIT_STRIDE} songs, "
                    f"got {self.split_songs[split]}"
                )

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        return from_dict(cls, data, "gen")

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("words_per_line", "lines_per_song", "gain_range"):
            data[key] = list(data[key])
        return data


@dataclass
class PairedSample:
    """Lyrics tokens with their paired vocal and mixture features"""

    sample_id: str
    language: str
    text: str
    y: list
    X_v: Tensor
    X_m: Tensor
    gain: float
    raw_text: str = ""
    seed: int = 0
    segment: int = 0

    @property
    def duration_frames(self) -> int:
        return self.X_v.shape[0]


@functools.lru_cache(maxsize=16)
def _table(seed: int, feature_dim: int) -> np.ndarray:
    table = np.random.default_rng(seed).standard_normal((VOCAB_SIZE, feature_dim))
    table.flags.writeable = False
    return table


def vocal_table(config: GenConfig) -> np.ndarray:
    return _table(config.embedding_seed, config.feature_dim)


def distractor_table(config: GenConfig) -> np.ndarray:
    return _table(config.distractor_seed, config.feature_dim)


def _stretch_vowel(word: str, rng: np.random.Generator) -> str:
    vowels = [i for i, char in enumerate(word) if char in "aeiou"]
    if not vowels:
        return word

    at = vowels[int(rng.integers(len(vowels)))]
    return word[:at] + word[at] * int(rng.integers(3, 6)) + word[at + 1 :]


def _line(rng: np.random.Generator, config: GenConfig, language: str) -> str:
    lexicon = LEXICONS[language]
    lo, hi = config.words_per_line
    words = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        word = lexicon[int(rng.integers(len(lexicon)))]
        if rng.random() < config.cue_rate:
            word = _stretch_vowel(word, rng)
        words.append(word)

    return " ".join(words)


def generate_song(seed: int, config: GenConfig) -> Tuple[str, List[str]]:
    """Language tag and raw (uncleaned) lyric lines of a song"""

    rng = np.random.default_rng([seed, 0])
    language = config.languages[int(rng.integers(len(config.languages)))]
    lo, hi = config.lines_per_song
    lines = [_line(rng, config, language) for _ in range(int(rng.integers(lo, hi + 1)))]

    return language, lines


def render(
    text: str,
    seed: int,
    config: GenConfig,
    stage: str = "finetune",
    segment: int = 0,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Vocal features, mixture features and gain of a text, fully determined by seed

    The pretrain stage uses pretrain_jitter and no accompaniment.
    """

    rng = np.random.default_rng([seed, segment, 1])
    chars = tokenize(text)[1:-1]
    fpt = config.frames_per_token
    frames = len(chars) * fpt

    jitter = config.pretrain_jitter if stage == "pretrain" else config.jitter
    X_v = np.repeat(vocal_table(config)[chars], fpt, axis=0)
    X_v = X_v + jitter * rng.standard_normal((frames, config.feature_dim))

    # draws happen for every stage so the stream doesn't depend on it
    gain = float(rng.uniform(*config.gain_range))
    n_distractors = -(-frames // config.distractor_frames)
    distractors = rng.integers(len(SPECIALS), VOCAB_SIZE, n_distractors)
    D = np.repeat(distractor_table(config)[distractors], config.distractor_frames, axis=0)
    D = D[:frames].reshape(frames, config.feature_dim)

    if stage == "pretrain":
        gain = 0.0

    return X_v, X_v + gain * D, gain


def make_sample(record: dict, config: GenConfig) -> PairedSample:
    """Render a corpus record into a PairedSample"""

    X_v, X_m, gain = render(
        record["text"], record["seed"], config, record["stage"], record["segment"]
    )

    return PairedSample(
        sample_id=record["id"],
        language=record["language"],
        text=record["text"],
        y=tokenize(record["text"]),
        X_v=Tensor(X_v),
        X_m=Tensor(X_m),
        gain=gain,
        raw_text=record["raw_text"],
        seed=record["seed"],
        segment=record["segment"],
    )


def generate_sample(seed: int, config: GenConfig, stage: str = "finetune") -> PairedSample:
    """One lyric line with its paired features, fully determined by seed"""

    language, lines = generate_song(seed, config)
    raw_text = lines[0]

    return make_sample(
        {
            "id": f"sample-{seed}",
            "seed": seed,
            "segment": 0,
            "stage": stage,
            "language": language,
            "raw_text": raw_text,
            "text": clean_lyrics(raw_text),
        },
        config,
    )


# Corpus


def split_seed(config: GenConfig, split: str, index: int) -> int:
    """Seeds of different splits never overlap"""

    return config.corpus_seed * 1_000_000 + SPLITS.index(split) * SPLIT_STRIDE + index


def _generation_params(config: GenConfig, stage: str) -> dict:
    return {
        "frames_per_token": config.frames_per_token,
        "distractor_frames": config.distractor_frames,
        "jitter": config.pretrain_jitter if stage == "pretrain" else config.jitter,
        "gain_range": [0.0, 0.0] if stage == "pretrain" else list(config.gain_range),
    }


def build_split(split: str, config: GenConfig) -> List[dict]:
    """Corpus records of a split

    The test split keeps whole songs for long-form decoding, the other splits
    merge consecutive lines into segments that fit the model window. Each line
    budget includes one separator token so the joined text fits max_frames.
    """

    stage = "pretrain" if split == "pretrain" else "finetune"
    fpt = config.frames_per_token
    records = []
    for index in range(config.split_songs.get(split, 0)):
        seed = split_seed(config, split, index)
        language, raw_lines = generate_song(seed, config)

        if split == "test":
            segments = [[(raw, 0) for raw in raw_lines]]
        else:
            lines = [(raw, fpt * (len(clean_lyrics(raw)) + 1)) for raw in raw_lines]
            segments = merge_segments(lines, config.max_frames + fpt)

        for segment, members in enumerate(segments):
            raw_text = " ".join(raw for raw, _ in members)
            records.append(
                {
                    "id": f"{split}-{index:05d}-{segment}",
                    "split": split,
                    "seed": seed,
                    "segment": segment,
                    "stage": stage,
                    "language": language,
                    "raw_text": raw_text,
                    "text": clean_lyrics(raw_text),
                    "gen": _generation_params(config, stage),
                }
            )

    return records


def write_corpus(
    corpus_dir: str,
    config: GenConfig,
    output_fs: fs.FileSystem = fs.LocalFileSystem(),
    verbose: bool = False,
) -> List[str]:
    """Write one JSON-lines file per split and language tag

    Features aren't stored, they are rendered again from seed and text on load.
    """

    file_paths = []
    for split in SPLITS:
        records = build_split(split, config)
        for language in sorted({record["language"] for record in records}):
            file_path = write_jsonl(
                f"{corpus_dir}{path.sep}{split}{path.sep}{language}.jsonl",
                [record for record in records if record["language"] == language],
                output_fs,
            )
            file_paths.append(file_path)
            if verbose:
                typer.echo(f"Created {file_path}")

    return file_paths


def read_records(
    corpus_dir: str, split: str, input_fs: fs.FileSystem = fs.LocalFileSystem()
) -> List[dict]:
    """Records of a split, ordered by id

    Raise:
        MissingInputError when the split has no corpus file
    """

    selector = fs.FileSelector(f"{corpus_dir}{path.sep}{split}", allow_not_found=True)
    infos = sorted(
        (info for info in input_fs.get_file_info(selector) if info.path.endswith(".jsonl")),
        key=lambda info: info.path,
    )
    if not infos:
        raise MissingInputError(
            f"Error, no {split} corpus in {corpus_dir}, run gen-data first"
        )

    records = []
    for info in infos:
        with input_fs.open_input_stream(info.path) as stream:
            records.extend(pj.read_json(stream).to_pylist())

    return sorted(records, key=lambda record: record["id"])


def read_corpus(
    corpus_dir: str,
    split: str,
    config: GenConfig,
    input_fs: fs.FileSystem = fs.LocalFileSystem(),
) -> List[PairedSample]:
    return [make_sample(record, config) for record in read_records(corpus_dir, split, input_fs)]


def samples_digest(samples: List[PairedSample]) -> str:
    """Digest of the rendered features and texts of a list of samples"""

    arrays = {}
    for sample in samples:
        arrays[f"{sample.sample_id}/{sample.text}/v"] = sample.X_v.values
        arrays[f"{sample.sample_id}/{sample.text}/m"] = sample.X_m.values

    return arrays_digest(arrays)


@program.command(name="sample")
def sample_program(
    seed: int = typer.Option(0, "--seed", help="Sample seed"),
    stage: str = typer.Option("finetune", "--stage", help="pretrain or finetune"),
) -> None:
    """Generate one paired sample and print its lyrics and shapes"""

    sample = generate_sample(seed, GenConfig(), stage)
    typer.echo(f"language: {sample.language}")
    typer.echo(f"raw: {sample.raw_text}")
    typer.echo(f"text: {sample.text}")
    typer.echo(f"frames: {sample.duration_frames}")
    typer.echo(f"gain: {sample.gain:.4f}")


@program.command(name="clean")
def clean_program(text: str) -> None:
    """Remove over-repeated vowels from lyrics"""

    typer.echo(clean_lyrics(text))
