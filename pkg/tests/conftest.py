from __future__ import annotations

import gzip
import shutil
from pathlib import Path

import pytest

from syllogism_circuits.checkpoint import config_to_json, tensors_from_weights
from syllogism_circuits.tokenizer import Tokenizer
from syllogism_circuits.toy import ToySpec, build_toy, toy_tokenizer, write_toy

DATA = Path(__file__).parent / "data"


def hf_config(cfg) -> dict:
    """GPT-2 release key names for a ModelConfig."""
    j = config_to_json(cfg)
    return {
        "n_layer": j["n_layers"], "n_head": j["n_heads"], "n_embd": j["d_model"], "n_positions": j["n_ctx"],
        "vocab_size": j["n_vocab"], "n_inner": j["d_mlp"], "layer_norm_epsilon": j["layernorm_epsilon"],
        "activation_function": j["activation_function"],
    }


@pytest.fixture(scope="session")
def tok():
    return toy_tokenizer()


@pytest.fixture(scope="session")
def toy(tok):
    w, _ = build_toy(ToySpec(seed=1), tok)
    return w


@pytest.fixture(scope="session")
def toy1(tok):
    w, _ = build_toy(ToySpec(n_layers=1, n_heads=2, d_model=16, seed=2), tok)
    return w


@pytest.fixture(scope="session")
def planted(tok):
    w, _ = build_toy(ToySpec(seed=0, planted=("copy", "suppression", "induction")), tok)
    return w


@pytest.fixture(scope="session")
def toy_ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("toyckpt")
    write_toy(ToySpec(seed=1), d)
    return d


@pytest.fixture(scope="session")
def gpt2_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("gpt2vocab")
    for src, dst in (("gpt2_vocab.json.gz", "vocab.json"), ("gpt2_merges.txt.gz", "merges.txt")):
        with gzip.open(DATA / src, "rb") as f, open(d / dst, "wb") as g:
            shutil.copyfileobj(f, g)
    return d / "vocab.json", d / "merges.txt"


@pytest.fixture(scope="session")
def gpt2_tok(gpt2_files):
    return Tokenizer.from_files(*gpt2_files)


def raw_tensors(weights):
    return tensors_from_weights(weights)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
