import json

import numpy as np
import pytest

from router_upcycling import checkpoint
from router_upcycling.checkpoint import (
    DenseCheckpoint,
    FormatVersionError,
    FrozenCheckpointError,
    ShapeMismatchError,
    TruncatedBlobError,
)
from router_upcycling.config import ConfigError, ModelConfig
from router_upcycling.data import Corpus, CorpusError, encode
from router_upcycling.dense_model import forward, init_dense
from router_upcycling.trainer import TrainConfig, train_dense

from oracles import ffn_oracle


def test_config_invariants():
    with pytest.raises(ConfigError, match="n_heads\\*head_dim"):
        ModelConfig(d_model=30, n_heads=4, head_dim=8)
    with pytest.raises(ConfigError, match="power of two"):
        ModelConfig(d_model=24, n_heads=3, head_dim=8)
    cfg = ModelConfig()
    assert (cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.seq_len) == (128, 16, 8, 256)


def test_single_token_logits_shape(tiny_dense):
    logits, traces = forward(tiny_dense, [65])
    assert logits.shape == (1, tiny_dense.config.vocab_size)
    assert len(traces) == tiny_dense.config.n_layers
    assert traces[0].keys.shape == (tiny_dense.config.n_heads, 1, tiny_dense.config.head_dim)


def test_causality_future_tokens_do_not_matter(tiny_dense, rng):
    for _ in range(5):
        toks = rng.integers(0, 256, size=12)
        other = toks.copy()
        other[1:] = rng.permutation(other[1:])
        other[5:] = rng.integers(0, 256, size=7)
        a, _ = forward(tiny_dense, toks)
        b, _ = forward(tiny_dense, other)
        assert np.array_equal(a[0], b[0])
        t = 4
        c = toks.copy()
        c[t + 1 :] = rng.integers(0, 256, size=len(c) - t - 1)
        np.testing.assert_array_equal(forward(tiny_dense, c)[0][: t + 1], a[: t + 1])


def test_attention_rows_are_distributions_and_causal(tiny_dense, rng):
    _, traces = forward(tiny_dense, rng.integers(0, 256, size=(2, 10)))
    for tr in traces:
        np.testing.assert_allclose(tr.attn_probs.sum(axis=-1), 1.0, atol=1e-9)
        upper = np.triu(np.ones((10, 10), dtype=bool), k=1)
        assert np.all(tr.attn_probs[..., upper] == 0.0)


def test_forward_is_bit_deterministic(tiny_dense, rng):
    toks = rng.integers(0, 259, size=(3, 16))
    a, ta = forward(tiny_dense, toks)
    b, tb = forward(tiny_dense, toks)
    assert a.tobytes() == b.tobytes()
    assert all(x.keys.tobytes() == y.keys.tobytes() for x, y in zip(ta, tb))


def test_trace_keys_are_the_key_projection(tiny_dense, rng):
    cfg = tiny_dense.config
    toks = rng.integers(0, 256, size=6)
    _, traces = forward(tiny_dense, toks)
    # layer 0: recompute keys from embeddings with explicit loops
    x = tiny_dense.tensors["embed.tok"][toks] + tiny_dense.tensors["embed.pos"][: len(toks)]
    w = tiny_dense.tensors["layer.0.attn_norm.w"]
    hx = x / np.sqrt((x**2).mean(axis=-1, keepdims=True) + 1e-6) * w
    k = hx @ tiny_dense.tensors["layer.0.attn.wk"].T
    expected = k.reshape(len(toks), cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
    np.testing.assert_allclose(traces[0].keys, expected, rtol=1e-12, atol=1e-14)


def test_ffn_matches_scalar_oracle(tiny_dense, rng):
    from router_upcycling.dense_model import as_params, dense_ffn
    from router_upcycling.numeric import Tensor

    params = as_params(tiny_dense.tensors)
    x = rng.normal(size=tiny_dense.config.d_model)
    got = dense_ffn(params, "layer.1.ffn", Tensor(x[None])).data[0]
    want = ffn_oracle(tiny_dense.tensors["layer.1.ffn.w1"], tiny_dense.tensors["layer.1.ffn.w2"], x)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("bad", [[259], [-1], [0, 300]])
def test_out_of_range_token(tiny_dense, bad):
    with pytest.raises(ValueError, match="out-of-range"):
        forward(tiny_dense, bad)


def test_too_long_sequence(tiny_dense):
    with pytest.raises(ValueError, match="seq_len"):
        forward(tiny_dense, np.zeros(tiny_dense.config.seq_len + 1, dtype=int))


# --- checkpoint ------------------------------------------------------------


def test_roundtrip_bitwise(tiny_cfg, tmp_path):
    ckpt = init_dense(tiny_cfg, seed=11)
    checkpoint.save(ckpt, tmp_path / "c")
    back = checkpoint.load(tmp_path / "c")
    assert back.config == ckpt.config and not back.frozen
    assert list(back.tensors) == list(ckpt.tensors)
    for k in ckpt.tensors:
        assert back.tensors[k].tobytes() == ckpt.tensors[k].tobytes()


def test_blob_is_little_endian_float64_in_index_order(tiny_cfg, tmp_path):
    ckpt = init_dense(tiny_cfg, seed=1)
    checkpoint.save(ckpt, tmp_path / "c")
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    blob = (tmp_path / "c" / "weights.bin").read_bytes()
    assert manifest["format_version"] == 1
    assert manifest["config"] == tiny_cfg.to_dict()
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=entry["offset"]).reshape(entry["shape"])
        assert np.array_equal(arr, ckpt.tensors[entry["name"]])


def _edit_manifest(path, fn):
    m = json.loads((path / "manifest.json").read_text())
    fn(m)
    (path / "manifest.json").write_text(json.dumps(m))


def test_manifest_wrong_shape(tiny_cfg, tmp_path):
    checkpoint.save(init_dense(tiny_cfg, 0), tmp_path)

    def bad(m):
        m["tensors"][0]["shape"] = [m["tensors"][0]["shape"][0] + 1, m["tensors"][0]["shape"][1]]

    _edit_manifest(tmp_path, bad)
    with pytest.raises(ShapeMismatchError):
        checkpoint.load(tmp_path)


def test_unknown_format_version(tiny_cfg, tmp_path):
    checkpoint.save(init_dense(tiny_cfg, 0), tmp_path)
    _edit_manifest(tmp_path, lambda m: m.update(format_version=99))
    with pytest.raises(FormatVersionError, match="version"):
        checkpoint.load(tmp_path)


def test_truncated_blob(tiny_cfg, tmp_path):
    checkpoint.save(init_dense(tiny_cfg, 0), tmp_path)
    blob = (tmp_path / "weights.bin").read_bytes()
    (tmp_path / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(TruncatedBlobError):
        checkpoint.load(tmp_path)


def test_trailing_bytes_rejected(tiny_cfg, tmp_path):
    checkpoint.save(init_dense(tiny_cfg, 0), tmp_path)
    with open(tmp_path / "weights.bin", "ab") as f:
        f.write(b"\0" * 8)
    with pytest.raises(ShapeMismatchError, match="trailing"):
        checkpoint.load(tmp_path)


def test_missing_tensor_rejected(tiny_cfg):
    t = dict(init_dense(tiny_cfg, 0).tensors)
    t.pop("lm_head.w")
    with pytest.raises(ShapeMismatchError, match="missing"):
        DenseCheckpoint(tiny_cfg, t)


def test_frozen_rejects_mutation(tiny_dense):
    assert tiny_dense.frozen
    with pytest.raises(FrozenCheckpointError):
        tiny_dense.set("final_norm.w", np.zeros(tiny_dense.config.d_model))
    with pytest.raises(ValueError):
        tiny_dense.tensors["final_norm.w"][0] = 5.0
    with pytest.raises(TypeError):
        tiny_dense.tensors["final_norm.w"] = np.zeros(3)
    thawed = tiny_dense.unfrozen()
    thawed.set("final_norm.w", np.zeros(tiny_dense.config.d_model))
    assert np.all(tiny_dense.tensors["final_norm.w"] == 1.0)


def test_frozen_flag_survives_roundtrip(tiny_dense, tmp_path):
    checkpoint.save(tiny_dense, tmp_path)
    assert checkpoint.load(tmp_path).frozen


# --- training --------------------------------------------------------------


def _text_corpus(n_bytes: int) -> Corpus:
    rng = np.random.default_rng(0)
    words = ["alpha", "beta", "gamma", "delta", "the", "of", "and", "router", "expert", "key"]
    text = " ".join(words[i] for i in rng.integers(0, len(words), size=n_bytes // 5))[:n_bytes]
    return Corpus({"words": encode(text.encode())})


SMALL = TrainConfig(max_lr=3e-3, batch_tokens=128, seq=32)


def test_train_dense_reduces_loss(tiny_cfg):
    ckpt, records = train_dense(tiny_cfg, _text_corpus(100_000), 200, seed=0, train_cfg=SMALL)
    assert not ckpt.frozen
    first = np.mean([r["lm_loss"] for r in records[:10]])
    last = np.mean([r["lm_loss"] for r in records[-10:]])
    assert records[-1]["lm_loss"] < records[0]["lm_loss"]
    assert last < first - 1.0


def test_train_dense_initial_loss_near_uniform(tiny_cfg):
    _, records = train_dense(tiny_cfg, _text_corpus(20_000), 1, seed=0, train_cfg=SMALL)
    assert records[0]["lm_loss"] == pytest.approx(np.log(259), abs=0.05)


def test_train_dense_same_seed_identical(tiny_cfg):
    corpus = _text_corpus(20_000)
    a, _ = train_dense(tiny_cfg, corpus, 15, seed=4, train_cfg=SMALL)
    b, _ = train_dense(tiny_cfg, corpus, 15, seed=4, train_cfg=SMALL)
    c, _ = train_dense(tiny_cfg, corpus, 15, seed=5, train_cfg=SMALL)
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)
    assert any(a.tensors[k].tobytes() != c.tensors[k].tobytes() for k in a.tensors)


def test_train_dense_rejects_zero_steps(tiny_cfg):
    with pytest.raises(ValueError, match="steps"):
        train_dense(tiny_cfg, _text_corpus(1000), 0, seed=0)


def test_empty_corpus_rejected():
    with pytest.raises(CorpusError):
        Corpus({})
