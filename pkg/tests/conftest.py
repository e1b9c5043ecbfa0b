import os
import sys
from pathlib import Path

os.environ["LOG_FILE"] = ""
os.environ["PROGRESS"] = "false"
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from models.domain import TokenInventory  # noqa: E402
from models.schemas import CorpusSpec  # noqa: E402
from services.acoustic_net import init_acoustic_net  # noqa: E402
from services.corpus_sim import generate_corpus  # noqa: E402
from services.token_graphs import build_graph_set, build_hmm_topology, estimate_token_ngram  # noqa: E402


@pytest.fixture
def inventory():
    return TokenInventory(tokens=("sil", "a", "b"), silence_token="sil")


@pytest.fixture
def topology():
    return build_hmm_topology(2)


@pytest.fixture
def bigram(inventory):
    return estimate_token_ngram([["sil", "a", "b", "sil"], ["sil", "b", "a", "a", "sil"], ["sil", "b", "sil"]],
                                2, vocab=inventory.tokens)


@pytest.fixture
def graphs(inventory, topology, bigram):
    return build_graph_set(inventory, topology, bigram)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net(inventory, topology):
    return init_acoustic_net(4, [8, 8], inventory.pdf_count(topology.states_per_unit), seed=7)


@pytest.fixture
def small_corpus(inventory):
    spec = CorpusSpec(n_speakers=2, utts_per_speaker=3, min_tokens=1, max_tokens=2, min_duration=2,
                      max_duration=3, feature_dim=4, silence_frames=(2, 3), seed=5, split="test")
    return generate_corpus(inventory, spec)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text("\n".join([
        "# smoke configuration",
        f"work_dir = {tmp_path / 'work'}",
        "tokens = sil,a,b,c",
        "lm_order = 2",
        "hidden_layers = 1",
        "hidden_width = 8",
        "train_epochs = 1",
        "adapt_epochs = 1",
        "train_speakers = 2",
        "test_speakers = 2",
        "utts_per_speaker = 3",
        "min_tokens = 1",
        "max_tokens = 2",
        "max_duration = 3",
        "feature_dim = 4",
        "sweep_utterances = 1,2",
        "seed = 3",
    ]) + "\n", encoding="utf-8")
    return path
