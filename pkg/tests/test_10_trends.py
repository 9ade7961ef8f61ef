import os

import pytest

from altlora.cli import Layout, cmd_grid, load_spec
from altlora.decoding import longform_decode
from altlora.evaluation import wer
from altlora.model import load_checkpoint
from altlora.synthdata import GenConfig, generate_sample

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def full_grid(tmp_path_factory):
    spec = load_spec("data/experiment.json")
    out = str(tmp_path_factory.mktemp("full"))
    files = cmd_grid(spec, out, jobs=os.cpu_count() or 1)
    return spec, out, files


def test_grid_trends(full_grid):
    """Test the default grid reproduces the three strategy orderings"""

    _, _, files = full_grid
    with open(files["md"]) as f:
        text = f.read()

    assert "| fine-tuning beats pretrained | pass |" in text, text
    assert "| cns-l2-w1 <= both on Mix | pass |" in text, text
    assert "| mix worse than voc on Voc | pass |" in text, text


def test_converged_transcription(full_grid):
    """Test a fine-tuned model transcribes held-out clean samples"""

    spec, out, _ = full_grid
    model = load_checkpoint(Layout(out).checkpoint("voc", spec.seeds[0]))
    config = GenConfig(**{**spec.gen.to_dict(), "gain_range": (0.0, 0.0)})

    for seed in range(9_000_000, 9_000_005):
        sample = generate_sample(seed, config)
        assert wer(sample.text, longform_decode(model, sample.X_v, spec.decode)).wer <= 0.1
