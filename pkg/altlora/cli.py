# python -m altlora gen-data --spec data/experiment_small.json --out runs/small
# python -m altlora pretrain --spec data/experiment_small.json --out runs/small
# python -m altlora finetune --spec data/experiment_small.json --out runs/small --strategy cns-l2-w1 --seed 0
# python -m altlora decode --spec data/experiment_small.json --out runs/small --strategy pretrained
# python -m altlora eval --spec data/experiment_small.json --out runs/small
# python -m altlora grid --spec data/experiment.json --out runs/full --jobs 8

"""Experiment grid commands

The experiment spec file fixes the corpus, the model, the pretraining plan,
the fine-tuning grid, the decoding and the seeds. Every command reads it and
writes its outputs under --out (see EXPERIMENTS.md for the layout).
"""

import multiprocessing
from dataclasses import dataclass, field, replace
from datetime import datetime
from io import TextIOWrapper
from os import path
from typing import Dict, List, Optional

import pyarrow.fs as fs
import typer
import yaml

from altlora import (
    AltloraException,
    ContractError,
    MissingInputError,
    file_exists,
)
from altlora.config import (
    CHECKPOINT_NAME,
    CONDITIONS,
    DEFAULT_JOBS,
    DEFAULT_OUT,
    DEFAULT_SPEC,
    RAW_CELL,
)
from altlora.decoding import DecodeConfig, read_transcripts, transcribe, write_transcripts
from altlora.evaluation import (
    comparison,
    markdown_table,
    score_transcripts,
    trend_checks,
    write_markdown,
    write_report_csv,
)
from altlora.model import ModelConfig, load_checkpoint
from altlora.synthdata import GenConfig, read_corpus, read_records, write_corpus
from altlora.training import TrainPlan, run_experiment

program = typer.Typer()

SPEC_FIELDS = (
    "gen",
    "model",
    "pretrain",
    "finetune_defaults",
    "finetune",
    "decode",
    "seeds",
    "output_dir",
)

# Spec


@dataclass
class ExperimentSpec:
    """Everything an experiment grid needs, loaded from one spec file

    finetune holds one TrainPlan per grid cell; each cell runs once per seed.
    """

    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainPlan = field(
        default_factory=lambda: TrainPlan(phase="pretrain", peak_lr=3e-3, total_steps=2000)
    )
    finetune: List[TrainPlan] = field(default_factory=list)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = DEFAULT_OUT

    def __post_init__(self):
        if self.pretrain.phase != "pretrain":
            raise ContractError("Error, the pretrain plan must have phase pretrain")

        cell_ids = [plan.loss.cell_id for plan in self.finetune]
        duplicates = sorted({c for c in cell_ids if cell_ids.count(c) > 1})
        if duplicates:
            raise ContractError(f"Error, duplicate grid cells: {', '.join(duplicates)}")
        if RAW_CELL in cell_ids:
            raise ContractError(f"Error, {RAW_CELL} is reserved for the raw pretrained model")
        for plan in self.finetune:
            if plan.phase != "finetune":
                raise ContractError(f"Error, grid cell {plan.loss.cell_id} must have phase finetune")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ContractError("Error, seeds must be a non-empty list of distinct integers")

        if self.gen.feature_dim != self.model.feature_dim:
            raise ContractError(
                f"Error, gen.feature_dim {self.gen.feature_dim} != model.feature_dim {self.model.feature_dim}"
            )
        if self.gen.max_frames > self.model.max_audio_frames:
            raise ContractError("Error, gen.max_frames exceeds model.max_audio_frames")
        if self.gen.max_frames // self.gen.frames_per_token + 1 > self.model.max_token_len:
            raise ContractError("Error, training segments don't fit model.max_token_len")
        if self.decode.window_frames > self.model.max_audio_frames:
            raise ContractError("Error, decode.window_frames exceeds model.max_audio_frames")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if not isinstance(data, dict):
            raise AltloraException("Error, the experiment spec must be a mapping")
        unknown = sorted(set(data) - set(SPEC_FIELDS))
        if unknown:
            raise AltloraException(f"Error, unknown field(s) in spec: {', '.join(unknown)}")

        defaults = data.get("finetune_defaults", {})
        kwargs = {
            "gen": GenConfig.from_dict(data.get("gen", {})),
            "model": ModelConfig.from_dict(data.get("model", {})),
            "pretrain": TrainPlan.from_dict({"phase": "pretrain", **data.get("pretrain", {})}),
            "finetune": [
                TrainPlan.from_dict({"phase": "finetune", **defaults, **entry})
                for entry in data.get("finetune", [])
            ],
            "decode": DecodeConfig.from_dict(data.get("decode", {})),
        }
        if "seeds" in data:
            kwargs["seeds"] = [int(seed) for seed in data["seeds"]]
        if "output_dir" in data:
            kwargs["output_dir"] = data["output_dir"]

        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "gen": self.gen.to_dict(),
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": [plan.to_dict() for plan in self.finetune],
            "decode": self.decode.to_dict(),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    @property
    def cell_ids(self) -> List[str]:
        return [plan.loss.cell_id for plan in self.finetune]

    def plan(self, cell_id: str, seed: int) -> TrainPlan:
        if seed not in self.seeds:
            raise ContractError(f"Error, seed {seed} isn't in the spec seeds {self.seeds}")
        for plan in self.finetune:
            if plan.loss.cell_id == cell_id:
                return replace(plan, seed=seed)

        raise ContractError(
            f"Error, unknown grid cell {cell_id!r}, expected one of {', '.join(self.cell_ids)}"
        )

    def runs(self) -> List[tuple]:
        """(cell id, seed) of every transcript the report needs, raw model first"""

        return [(RAW_CELL, self.pretrain.seed)] + [
            (cell_id, seed) for cell_id in self.cell_ids for seed in self.seeds
        ]


def load_spec(file_path: str, input_fs: fs.FileSystem = fs.LocalFileSystem()) -> ExperimentSpec:
    """ExperimentSpec from a JSON (or YAML) spec file"""

    if not file_exists(file_path, input_fs):
        raise MissingInputError(f"Error, spec file {file_path} doesn't exist")

    with input_fs.open_input_stream(file_path) as stream:
        data = yaml.safe_load(stream.read().decode("utf-8"))

    return ExperimentSpec.from_dict(data or {})


# Layout


class Layout:
    """Output file paths under an experiment directory"""

    def __init__(self, out: str):
        self.out = out

    def join(self, *parts) -> str:
        return path.sep.join((self.out,) + tuple(str(part) for part in parts))

    @property
    def metadata(self) -> str:
        return self.join("experiment_metadata.yml")

    @property
    def corpus(self) -> str:
        return self.join("corpus")

    @property
    def pretrain(self) -> str:
        return self.join("pretrain")

    def finetune(self, cell_id: str, seed: int) -> str:
        return self.join("finetune", cell_id, f"seed-{seed}")

    def checkpoint(self, cell_id: str, seed: int) -> str:
        run_dir = self.pretrain if cell_id == RAW_CELL else self.finetune(cell_id, seed)
        return f"{run_dir}{path.sep}{CHECKPOINT_NAME}"

    def transcripts(self, cell_id: str, seed: int) -> str:
        return self.join("transcripts", cell_id, f"seed-{seed}.jsonl")

    def report(self, *parts) -> str:
        return self.join("report", *parts)


def _out(spec: ExperimentSpec, out: Optional[str]) -> Layout:
    return Layout(out or spec.output_dir)


# Commands


def cmd_gen_data(
    spec: ExperimentSpec,
    out: Optional[str] = None,
    verbose: bool = False,
    output_fs: fs.FileSystem = fs.LocalFileSystem(),
) -> List[str]:
    """Write the corpus of every split and language, and the resolved spec metadata"""

    layout = _out(spec, out)
    try:
        output_fs.create_dir(layout.out, recursive=True)

        metadata_path = output_fs.normalize_path(layout.metadata)
        with output_fs.open_output_stream(metadata_path, compression=None) as stream:
            with TextIOWrapper(stream, encoding="utf-8") as tout:
                yaml.dump(spec.to_dict(), tout, default_flow_style=False, sort_keys=False)
        if verbose:
            typer.echo(f"Created {metadata_path}")

        return write_corpus(layout.corpus, spec.gen, output_fs, verbose)
    except OSError as e:
        raise AltloraException(f"Error, can't write the corpus under {layout.out}: {e}")


def cmd_pretrain(
    spec: ExperimentSpec,
    out: Optional[str] = None,
    verbose: bool = False,
    output_fs: fs.FileSystem = fs.LocalFileSystem(),
) -> str:
    """Pretrain the base model on the pretrain split, return its checkpoint path"""

    layout = _out(spec, out)
    samples = read_corpus(layout.corpus, "pretrain", spec.gen, output_fs)
    run_experiment(
        spec.pretrain,
        samples,
        model_config=spec.model,
        out_dir=layout.pretrain,
        verbose=verbose,
        output_fs=output_fs,
    )

    return layout.checkpoint(RAW_CELL, spec.pretrain.seed)


def cmd_finetune(
    spec: ExperimentSpec,
    cell_id: str,
    seed: int,
    out: Optional[str] = None,
    verbose: bool = False,
    output_fs: fs.FileSystem = fs.LocalFileSystem(),
) -> str:
    """Fine-tune adapters of the pretrained model for one grid cell and seed"""

    layout = _out(spec, out)
    plan = spec.plan(cell_id, seed)

    checkpoint = layout.checkpoint(RAW_CELL, spec.pretrain.seed)
    if not file_exists(checkpoint, output_fs):
        raise MissingInputError(
            f"Error, pretrained checkpoint {checkpoint} doesn't exist, run pretrain first"
        )

    samples = read_corpus(layout.corpus, "train", spec.gen, output_fs)
    run_experiment(
        plan,
        samples,
        checkpoint=checkpoint,
        out_dir=layout.finetune(cell_id, seed),
        verbose=verbose,
        output_fs=output_fs,
    )

    return layout.checkpoint(cell_id, seed)


def cmd_decode(
    spec: ExperimentSpec,
    cell_id: str,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    verbose: bool = False,
    output_fs: fs.FileSystem = fs.LocalFileSystem(),
) -> str:
    """Transcribe the test split under both conditions with one checkpoint

    cell_id pretrained decodes the raw pretrained model.
    """

    layout = _out(spec, out)
    if cell_id == RAW_CELL:
        seed = spec.pretrain.seed
    else:
        spec.plan(cell_id, seed)

    checkpoint = layout.checkpoint(cell_id, seed)
    if not file_exists(checkpoint, output_fs):
        step = "pretrain" if cell_id == RAW_CELL else f"finetune --strategy {cell_id} --seed {seed}"
        raise MissingInputError(f"Error, checkpoint {checkpoint} doesn't exist, run {step} first")

    model = load_checkpoint(checkpoint, output_fs)
    samples = read_corpus(layout.corpus, "test", spec.gen, output_fs)
    rows = transcribe(model, samples, spec.decode)

    file_path = write_transcripts(layout.transcripts(cell_id, seed), rows, output_fs)
    if verbose:
        typer.echo(f"Created {file_path}")

    return file_path


def cmd_eval(
    spec: ExperimentSpec,
    out: Optional[str] = None,
    verbose: bool = False,
    output_fs: fs.FileSystem = fs.LocalFileSystem(),
) -> Dict[str, str]:
    """Score every transcript, write per-seed reports and the comparison table

    Raise:
        MissingInputError listing every (cell, seed, condition) without transcripts
    """

    layout = _out(spec, out)
    references = {r["id"]: r for r in read_records(layout.corpus, "test", output_fs)}

    transcripts = {}
    missing = []
    for cell_id, seed in spec.runs():
        file_path = layout.transcripts(cell_id, seed)
        if not file_exists(file_path, output_fs):
            missing += [f"{cell_id}/seed-{seed}/{condition}" for condition in CONDITIONS]
            continue

        rows = read_transcripts(file_path, output_fs)
        for condition in CONDITIONS:
            covered = {row["id"] for row in rows if row["condition"] == condition}
            if covered != set(references):
                missing.append(f"{cell_id}/seed-{seed}/{condition}")
        transcripts[(cell_id, seed)] = rows

    if missing:
        raise MissingInputError(f"Error, missing transcripts: {', '.join(missing)}")

    per_seed = {}
    for (cell_id, seed), rows in transcripts.items():
        report = score_transcripts(rows, references)
        per_seed.setdefault(cell_id, {})[seed] = report
        file_path = write_report_csv(layout.report(cell_id, f"seed-{seed}.csv"), report.rows(), output_fs)
        if verbose:
            typer.echo(f"Created {file_path}")

    rows = comparison(per_seed)
    checks = trend_checks(per_seed)
    files = {
        "csv": write_report_csv(layout.report("comparison.csv"), rows, output_fs),
        "md": write_markdown(layout.report("comparison.md"), markdown_table(rows, checks), output_fs),
    }
    if verbose:
        for file_path in files.values():
            typer.echo(f"Created {file_path}")
        for check in checks:
            result = {True: "pass", False: "fail", None: "skipped"}[check.passed]
            typer.echo(f"{check.name}: {result} ({check.detail})")

    return files


def _finetune_job(args: tuple) -> str:
    spec, cell_id, seed, out = args
    return cmd_finetune(spec, cell_id, seed, out)


def _decode_job(args: tuple) -> str:
    spec, cell_id, seed, out = args
    return cmd_decode(spec, cell_id, seed, out)


def _map(function, jobs: List[tuple], workers: int) -> List[str]:
    """Run jobs in order, or in a pool of spawned worker processes"""

    workers = min(workers, len(jobs))
    if workers <= 1:
        return [function(job) for job in jobs]

    with multiprocessing.get_context("spawn").Pool(workers) as pool:
        return pool.map(function, jobs, chunksize=1)


def cmd_grid(
    spec: ExperimentSpec,
    out: Optional[str] = None,
    jobs: int = DEFAULT_JOBS,
    verbose: bool = False,
) -> Dict[str, str]:
    """gen-data, pretrain, every (cell, seed) finetune and decode, then eval

    Cells run in up to jobs worker processes, they share only read-only files.
    """

    out = out or spec.output_dir
    cmd_gen_data(spec, out, verbose)
    cmd_pretrain(spec, out, verbose)

    cells = [(spec, cell_id, seed, out) for cell_id, seed in spec.runs()[1:]]
    for file_path in _map(_finetune_job, cells, jobs):
        if verbose:
            typer.echo(f"Created {file_path}")

    runs = [(spec, cell_id, seed, out) for cell_id, seed in spec.runs()]
    for file_path in _map(_decode_job, runs, jobs):
        if verbose:
            typer.echo(f"Created {file_path}")

    return cmd_eval(spec, out, verbose)


# Command-line programs


def _fail(e: AltloraException, what: str) -> None:
    typer.secho(f"Error {what}")
    typer.secho(str(e), err=True, fg=typer.colors.RED, bold=True)
    exit(1)


SPEC_OPTION = typer.Option(DEFAULT_SPEC, "--spec", help="Experiment spec file")
OUT_OPTION = typer.Option(None, "--out", help="Output directory, the spec output_dir by default")
STRATEGY_OPTION = typer.Option(..., "--strategy", help="Grid cell id, e.g. cns-l2-w1")
SEED_OPTION = typer.Option(0, "--seed", help="Fine-tuning seed")


@program.command(name="gen-data")
def gen_data_program(spec_path: str = SPEC_OPTION, out: Optional[str] = OUT_OPTION) -> None:
    """Generate the synthetic paired corpus

    Command-line program for cli.cmd_gen_data function
    """

    start = datetime.now()
    try:
        cmd_gen_data(load_spec(spec_path), out, verbose=True)
    except AltloraException as e:
        _fail(e, "generating data")
    typer.echo(f"Duration: {datetime.now() - start}")


@program.command(name="pretrain")
def pretrain_program(spec_path: str = SPEC_OPTION, out: Optional[str] = OUT_OPTION) -> None:
    """Pretrain the base transcriber on clean vocal-like data"""

    start = datetime.now()
    try:
        cmd_pretrain(load_spec(spec_path), out, verbose=True)
    except AltloraException as e:
        _fail(e, "pretraining")
    typer.echo(f"Duration: {datetime.now() - start}")


@program.command(name="finetune")
def finetune_program(
    spec_path: str = SPEC_OPTION,
    out: Optional[str] = OUT_OPTION,
    strategy: str = STRATEGY_OPTION,
    seed: int = SEED_OPTION,
) -> None:
    """Fine-tune LoRA adapters for one grid cell and seed"""

    start = datetime.now()
    try:
        cmd_finetune(load_spec(spec_path), strategy, seed, out, verbose=True)
    except AltloraException as e:
        _fail(e, f"fine-tuning {strategy} seed {seed}")
    typer.echo(f"Duration: {datetime.now() - start}")


@program.command(name="decode")
def decode_program(
    spec_path: str = SPEC_OPTION,
    out: Optional[str] = OUT_OPTION,
    strategy: str = STRATEGY_OPTION,
    seed: int = SEED_OPTION,
) -> None:
    """Transcribe the test split with a fine-tuned (or the pretrained) model"""

    start = datetime.now()
    try:
        cmd_decode(load_spec(spec_path), strategy, seed, out, verbose=True)
    except AltloraException as e:
        _fail(e, f"decoding {strategy}")
    typer.echo(f"Duration: {datetime.now() - start}")


@program.command(name="eval")
def eval_program(spec_path: str = SPEC_OPTION, out: Optional[str] = OUT_OPTION) -> None:
    """Score transcripts and write the WER reports and comparison table"""

    start = datetime.now()
    try:
        cmd_eval(load_spec(spec_path), out, verbose=True)
    except AltloraException as e:
        _fail(e, "evaluating")
    typer.echo(f"Duration: {datetime.now() - start}")


@program.command(name="grid")
def grid_program(
    spec_path: str = SPEC_OPTION,
    out: Optional[str] = OUT_OPTION,
    jobs: int = typer.Option(DEFAULT_JOBS, "--jobs", help="Worker processes"),
) -> None:
    """Run the whole experiment: data, pretraining, grid, decoding and reports"""

    start = datetime.now()
    try:
        if jobs < 1:
            raise ContractError(f"Error, --jobs must be >= 1, got {jobs}")
        cmd_grid(load_spec(spec_path), out, jobs, verbose=True)
    except AltloraException as e:
        _fail(e, "running the grid")
    typer.echo(f"Duration: {datetime.now() - start}")
