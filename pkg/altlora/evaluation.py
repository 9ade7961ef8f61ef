# python -m altlora wer score "Hello,  WORLD!" "hello word"

"""Word error rate scoring and reports

Texts are normalized (lowercase, punctuation removed, whitespace collapsed)
before a word-level Levenshtein alignment. Among the minimal alignments the
one with the fewest insertions plus deletions is kept, so a wrong word counts
as one substitution. Subsets pool the error counts over their samples:

    pooled wer = sum(S + D + I) / sum(ref_words)
"""

import statistics
import unicodedata
from dataclasses import dataclass, field
from io import TextIOWrapper
from os import path
from typing import Dict, List, Optional, Tuple

import pyarrow as pa
import pyarrow.csv as pc
import pyarrow.fs as fs
import typer

from altlora import AltloraException, ContractError
from altlora.config import CONDITIONS, RAW_CELL

program = typer.Typer()

OVERALL = "overall"
CONDITION_LABELS = {"mix": "Mix", "voc": "Voc"}
REPORT_COLUMNS = ["subset", "condition", "S", "D", "I", "ref_words", "wer"]

# Scoring


def normalize_text(s: str) -> str:
    """Lowercase, drop unicode punctuation (apostrophes included), collapse whitespace"""

    s = "".join(char for char in s.lower() if not unicodedata.category(char).startswith("P"))
    return " ".join(s.split())


@dataclass
class WerDetail:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def empty_reference(self) -> bool:
        return self.ref_words == 0

    @property
    def wer(self) -> float:
        """errors / ref_words, or the raw error count with an empty reference"""

        if self.ref_words == 0:
            return float(self.errors)
        return self.errors / self.ref_words

    def __add__(self, other: "WerDetail") -> "WerDetail":
        return WerDetail(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_words + other.ref_words,
        )


def wer(ref: str, hyp: str) -> WerDetail:
    ref_words = normalize_text(ref).split()
    hyp_words = normalize_text(hyp).split()

    # cell: (cost, deletions + insertions, S, D, I), compared lexicographically
    previous = [(j, j, 0, 0, j) for j in range(len(hyp_words) + 1)]
    for i, ref_word in enumerate(ref_words, start=1):
        current = [(i, i, 0, i, 0)]
        for j, hyp_word in enumerate(hyp_words, start=1):
            diagonal = previous[j - 1]
            if ref_word == hyp_word:
                match = diagonal
            else:
                match = (diagonal[0] + 1, diagonal[1], diagonal[2] + 1, diagonal[3], diagonal[4])
            up = previous[j]
            deletion = (up[0] + 1, up[1] + 1, up[2], up[3] + 1, up[4])
            left = current[j - 1]
            insertion = (left[0] + 1, left[1] + 1, left[2], left[3], left[4] + 1)
            current.append(min(match, deletion, insertion))
        previous = current

    _, _, S, D, I = previous[-1]
    return WerDetail(S, D, I, len(ref_words))


# Aggregation


@dataclass
class WerReport:
    """Per-sample details keyed by (sample id, condition) and pooled rows keyed by
    (subset, condition), subsets being the language tags plus overall"""

    samples: Dict[Tuple[str, str], WerDetail] = field(default_factory=dict)
    pooled: Dict[Tuple[str, str], WerDetail] = field(default_factory=dict)

    @property
    def subsets(self) -> List[str]:
        languages = sorted({subset for subset, _ in self.pooled if subset != OVERALL})
        return languages + [OVERALL]

    def rows(self) -> List[dict]:
        rows = []
        for subset in self.subsets:
            for condition in CONDITIONS:
                detail = self.pooled.get((subset, condition))
                if detail is None:
                    continue
                rows.append(
                    {
                        "subset": subset,
                        "condition": condition,
                        "S": detail.substitutions,
                        "D": detail.deletions,
                        "I": detail.insertions,
                        "ref_words": detail.ref_words,
                        "wer": detail.wer,
                    }
                )
        return rows


def aggregate(details: Dict[Tuple[str, str], WerDetail], subset_map: Dict[str, str]) -> WerReport:
    """Pool error counts per (subset, condition), overall covering every sample

    Parameters:
        WerDetail by (sample id, condition) (dict): details
        subset tag by sample id (dict): subset_map
    """

    report = WerReport(samples=dict(details))
    for (sample_id, condition), detail in details.items():
        if condition not in CONDITIONS:
            raise ContractError(f"Error, unknown condition {condition!r} for {sample_id}")
        if sample_id not in subset_map:
            raise ContractError(f"Error, sample {sample_id} has no subset tag")

        for subset in (subset_map[sample_id], OVERALL):
            key = (subset, condition)
            report.pooled[key] = report.pooled.get(key, WerDetail()) + detail

    return report


def score_transcripts(rows: List[dict], references: Dict[str, dict]) -> WerReport:
    """WerReport of transcript rows against corpus records keyed by sample id"""

    details = {}
    for row in rows:
        record = references.get(row["id"])
        if record is None:
            raise ContractError(f"Error, transcript of unknown sample {row['id']}")
        details[(row["id"], row["condition"])] = wer(record["text"], row["hypothesis"])

    return aggregate(details, {sample_id: r["language"] for sample_id, r in references.items()})


def write_report_csv(
    file_path: str, rows: List[dict], output_fs: fs.FileSystem = fs.LocalFileSystem()
) -> str:
    """CSV report through pyarrow, columns in row order"""

    file_path = output_fs.normalize_path(file_path)
    output_fs.create_dir(path.dirname(file_path), recursive=True)
    table = pa.Table.from_pylist(rows)
    with output_fs.open_output_stream(file_path, compression=None) as out:
        pc.write_csv(table, out)

    return file_path


# Comparison


def column_labels(subsets: List[str]) -> List[Tuple[str, str, str]]:
    """(label, subset, condition) columns: per language, then overall"""

    return [
        (f"{subset.upper() if subset != OVERALL else 'Overall'} {CONDITION_LABELS[c]}", subset, c)
        for subset in subsets
        for c in CONDITIONS
    ]


def comparison(per_seed: Dict[str, Dict[int, WerReport]]) -> List[dict]:
    """One row per cell, each column the median over seeds of a pooled wer

    The raw pretrained cell comes first, the others keep their order.
    """

    subsets = sorted(
        {s for reports in per_seed.values() for r in reports.values() for s in r.subsets[:-1]}
    ) + [OVERALL]
    columns = column_labels(subsets)

    cells = sorted(per_seed, key=lambda cell: cell != RAW_CELL)
    rows = []
    for cell in cells:
        reports = per_seed[cell]
        row = {"cell": cell, "seeds": len(reports)}
        for label, subset, condition in columns:
            values = [
                r.pooled[(subset, condition)].wer
                for _, r in sorted(reports.items())
                if (subset, condition) in r.pooled
            ]
            row[label] = statistics.median(values) if values else None
        rows.append(row)

    return rows


def _median(per_seed, cell, condition) -> Optional[float]:
    reports = per_seed.get(cell)
    if not reports:
        return None
    return statistics.median(r.pooled[(OVERALL, condition)].wer for r in reports.values())


@dataclass
class TrendCheck:
    name: str
    passed: Optional[bool]  # None when the grid lacks the cells
    detail: str


def trend_checks(
    per_seed: Dict[str, Dict[int, WerReport]],
    cns_cell: str = "cns-l2-w1",
    min_paired_wins: float = 0.8,
) -> List[TrendCheck]:
    """The three qualitative comparisons on seed-median overall WER

    1. every fine-tuned cell beats the raw pretrained model on its training
       domain (voc on Voc, mix on Mix, dual-domain cells on both)
    2. cns_cell is no worse than both on Mix, also in min_paired_wins of the
       seed-paired comparisons
    3. mix is worse than voc on Voc
    """

    checks = []

    raw = {c: _median(per_seed, RAW_CELL, c) for c in CONDITIONS}
    if raw["mix"] is None:
        checks.append(TrendCheck("fine-tuning beats pretrained", None, "no pretrained row"))
    else:
        failures = []
        for cell in per_seed:
            if cell == RAW_CELL:
                continue
            domains = {"voc": ["voc"], "mix": ["mix"]}.get(cell, list(CONDITIONS))
            for condition in domains:
                value = _median(per_seed, cell, condition)
                if not value < raw[condition]:
                    failures.append(f"{cell} {condition} {value:.4f} >= {raw[condition]:.4f}")
        checks.append(
            TrendCheck(
                "fine-tuning beats pretrained",
                not failures,
                "; ".join(failures) or "every cell below the pretrained WER",
            )
        )

    if cns_cell in per_seed and "both" in per_seed:
        cns, both = per_seed[cns_cell], per_seed["both"]
        seeds = sorted(set(cns) & set(both))
        wins = sum(
            cns[s].pooled[(OVERALL, "mix")].wer <= both[s].pooled[(OVERALL, "mix")].wer
            for s in seeds
        )
        cns_mix, both_mix = _median(per_seed, cns_cell, "mix"), _median(per_seed, "both", "mix")
        passed = bool(seeds) and cns_mix <= both_mix and wins >= min_paired_wins * len(seeds)
        checks.append(
            TrendCheck(
                f"{cns_cell} <= both on Mix",
                passed,
                f"median {cns_mix:.4f} vs {both_mix:.4f}, {wins}/{len(seeds)} seeds",
            )
        )
    else:
        checks.append(TrendCheck(f"{cns_cell} <= both on Mix", None, "cells missing"))

    if "mix" in per_seed and "voc" in per_seed:
        mix_voc, voc_voc = _median(per_seed, "mix", "voc"), _median(per_seed, "voc", "voc")
        checks.append(
            TrendCheck(
                "mix worse than voc on Voc",
                mix_voc > voc_voc,
                f"median {mix_voc:.4f} vs {voc_voc:.4f}",
            )
        )
    else:
        checks.append(TrendCheck("mix worse than voc on Voc", None, "cells missing"))

    return checks


def markdown_table(rows: List[dict], checks: Optional[List[TrendCheck]] = None) -> str:
    """Cells as rows, subset/condition columns, WER x 100 with two decimals"""

    labels = [key for key in rows[0] if key not in ("cell", "seeds")] if rows else []
    lines = [
        "| Strategy | Seeds | " + " | ".join(labels) + " |",
        "|---|---:|" + "---:|" * len(labels),
    ]
    for row in rows:
        values = ["-" if row[label] is None else f"{100 * row[label]:.2f}" for label in labels]
        lines.append(f"| {row['cell']} | {row['seeds']} | " + " | ".join(values) + " |")

    if checks:
        lines += ["", "| Check | Result | Detail |", "|---|---|---|"]
        for check in checks:
            result = {True: "pass", False: "fail", None: "skipped"}[check.passed]
            lines.append(f"| {check.name} | {result} | {check.detail} |")

    return "\n".join(lines) + "\n"


def write_markdown(
    file_path: str, text: str, output_fs: fs.FileSystem = fs.LocalFileSystem()
) -> str:
    file_path = output_fs.normalize_path(file_path)
    output_fs.create_dir(path.dirname(file_path), recursive=True)
    with output_fs.open_output_stream(file_path, compression=None) as out:
        with TextIOWrapper(out, encoding="utf-8", newline="\n") as tout:
            tout.write(text)

    return file_path


@program.command(name="score")
def score_program(ref: str, hyp: str) -> None:
    """Word error rate of a hypothesis against a reference

    Command-line program for evaluation.wer function
    """

    try:
        detail = wer(ref, hyp)
    except AltloraException as e:
        typer.secho(str(e), err=True, fg=typer.colors.RED, bold=True)
        exit(1)

    typer.echo(f"S: {detail.substitutions}")
    typer.echo(f"D: {detail.deletions}")
    typer.echo(f"I: {detail.insertions}")
    typer.echo(f"ref_words: {detail.ref_words}")
    typer.echo(f"wer: {detail.wer:.4f}")
