import numpy as np
import pytest

from router_upcycling.config import ModelConfig, MoEConfig
from router_upcycling.data import Corpus, encode, load_corpus
from router_upcycling.dense_model import init_dense
from router_upcycling.upcycler import build_router_bank, collect_key_stats, upcycle

TEXTS = {
    "code": "def f(x):\n    return x * 2 + 1\n\nfor i in range(10):\n    print(f(i))\n" * 40,
    "math": "".join(f"{a} + {b} = {a + b}. " for a in range(40) for b in range(7)),
    "prose": "The quick brown fox jumps over the lazy dog while the cat sleeps in the sun. " * 40,
}


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return ModelConfig(d_model=16, n_heads=4, head_dim=4, n_layers=2, ffn_hidden=32, seq_len=32)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    for name, text in TEXTS.items():
        (root / name).mkdir()
        (root / name / "part0.txt").write_text(text)
    return root


@pytest.fixture(scope="session")
def tiny_corpus(corpus_dir) -> Corpus:
    return load_corpus(corpus_dir)


@pytest.fixture(scope="session")
def tiny_dense(tiny_cfg):
    return init_dense(tiny_cfg, seed=3).freeze()


@pytest.fixture(scope="session")
def tiny_stats(tiny_dense, tiny_corpus):
    return collect_key_stats(tiny_dense, tiny_corpus, iters=2, batch=2, seq=16)


@pytest.fixture(scope="session")
def tiny_moe_cfg(tiny_cfg) -> MoEConfig:
    return MoEConfig.for_model(tiny_cfg, n_experts=4, n_routers=4, top_k=2)


@pytest.fixture(scope="session")
def tiny_moe(tiny_dense, tiny_stats, tiny_moe_cfg):
    return upcycle(tiny_dense, build_router_bank(tiny_stats, tiny_moe_cfg), tiny_moe_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def single_domain_corpus(text: str, name: str = "only") -> Corpus:
    return Corpus({name: encode(text.encode())})


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: multi-minute desk-scale training runs")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker and marker.args[0] >= 10:
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, 12):
        if num not in mod.RESULTS:
            terminalreporter.write_line(f"criterion {num:2d}: NOT RUN")
            continue
        ok, detail = mod.RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
