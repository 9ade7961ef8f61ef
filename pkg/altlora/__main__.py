from typing import Optional

import typer

from . import cli, config, evaluation, synthdata

# Program


program = cli.program
program.add_typer(evaluation.program, name="wer")
program.add_typer(synthdata.program, name="synthdata")

# Helpers


def version(value: bool):
    if value:
        typer.echo(config.VERSION)
        raise typer.Exit()


# Command


@program.callback()
def program_main(
    version: Optional[bool] = typer.Option(None, "--version", callback=version)
):
    """Dual-domain LoRA fine-tuning experiments for lyrics transcription."""
    pass


if __name__ == "__main__":
    program(prog_name="altlora")
