from altlora.cli import cmd_grid, load_spec
from altlora.evaluation import wer

## grid
files = cmd_grid(load_spec("data/experiment_small.json"), "runs/small")
print(open(files["md"]).read())

## wer
print(wer("a b c", "a x c"))
