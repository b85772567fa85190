import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from smeardx import PipelineConfig, SynthSpec, generate_corpus, run_experiment


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    """Small shared synthetic corpus (30 slides, default template)."""
    root = tmp_path_factory.mktemp("corpus")
    return generate_corpus(30, SynthSpec.default(), seed=11, output_dir=root / "c")


@pytest.fixture(scope="session")
def compare_experiment(corpus_dir, tmp_path_factory):
    """One full compare-mode experiment over the shared corpus."""
    out = tmp_path_factory.mktemp("experiment")
    config = PipelineConfig.from_dict(
        {
            "annotations": str(corpus_dir / "annotations.json"),
            "output_dir": str(out),
            "balance_cap": 20,
            "classifier": {"epochs": 40},
        }
    )
    summary = run_experiment(config, mode="compare")
    return config, summary
