import json

import numpy as np
import pytest

from syllogism_circuits.checkpoint import (
    CheckpointError,
    CheckpointManifest,
    load_model,
    parse_config,
    read_safetensors,
    tensors_from_weights,
    weights_from_tensors,
    write_safetensors,
)
from syllogism_circuits.model import forward_with_cache
from syllogism_circuits.toy import ToySpec, build_toy, write_toy

GPT2_SMALL_CONFIG = {
    "activation_function": "gelu_new", "architectures": ["GPT2LMHeadModel"], "layer_norm_epsilon": 1e-05,
    "model_type": "gpt2", "n_ctx": 1024, "n_embd": 768, "n_head": 12, "n_inner": None, "n_layer": 12,
    "n_positions": 1024, "vocab_size": 50257,
}


@pytest.mark.parametrize("fmt", ["safetensors", "raw-f32-with-index"])
def test_roundtrip_exact(tmp_path, tok, fmt):
    w, _ = build_toy(ToySpec(seed=5), tok)
    manifest = write_toy(ToySpec(seed=5), tmp_path, format=fmt)
    assert manifest.format == fmt
    cfg, loaded = load_model(manifest)
    assert cfg == w.cfg
    for name in w.expected_shapes():
        np.testing.assert_array_equal(getattr(loaded, name), getattr(w, name), err_msg=name)


def test_load_is_pure(toy_ckpt):
    m = CheckpointManifest.from_dir(toy_ckpt)
    _, a = load_model(m)
    _, b = load_model(m)
    toks = np.arange(10)
    np.testing.assert_array_equal(forward_with_cache(a, toks)[0], forward_with_cache(b, toks)[0])


def test_gpt2_small_config_tuple():
    assert parse_config(GPT2_SMALL_CONFIG).as_tuple() == (12, 12, 768, 64, 3072, 1024, 50257)
    assert parse_config(GPT2_SMALL_CONFIG).act_fn == "gelu_new"


def test_config_missing_field():
    with pytest.raises(CheckpointError, match="missing field"):
        parse_config({"n_layer": 1})


def test_truncated_file_is_missing_tensor(tmp_path):
    write_toy(ToySpec(seed=1), tmp_path)
    f = tmp_path / "model.safetensors"
    f.write_bytes(f.read_bytes()[:-4000])
    with pytest.raises(CheckpointError, match="missing tensor"):
        load_model(CheckpointManifest.from_dir(tmp_path))


def test_truncated_raw_file_is_missing_tensor(tmp_path):
    m = write_toy(ToySpec(seed=1), tmp_path, format="raw-f32-with-index")
    f = m.weights_path
    f.write_bytes(f.read_bytes()[:100])
    with pytest.raises(CheckpointError, match="missing tensor"):
        load_model(m)


def test_missing_tensor_named(toy):
    t = tensors_from_weights(toy)
    del t["h.1.mlp.c_fc.bias"]
    with pytest.raises(CheckpointError, match="missing tensor: h.1.mlp.c_fc.bias"):
        weights_from_tensors(toy.cfg, t)


def test_shape_mismatch(toy):
    t = tensors_from_weights(toy)
    t["wpe.weight"] = t["wpe.weight"][:-1]
    with pytest.raises(CheckpointError, match="shape mismatch"):
        weights_from_tensors(toy.cfg, t)


def test_unsupported_dtype(toy):
    t = tensors_from_weights(toy)
    t["ln_f.bias"] = t["ln_f.bias"].astype(np.int32)
    with pytest.raises(CheckpointError, match="unsupported dtype"):
        weights_from_tensors(toy.cfg, t)


def test_untied_lm_head_rejected(toy):
    t = tensors_from_weights(toy)
    t["lm_head.weight"] = t["wte.weight"] + 1.0
    with pytest.raises(CheckpointError, match="differs"):
        weights_from_tensors(toy.cfg, t)


def test_transformer_prefix_and_tied_head_accepted(toy):
    t = {"transformer." + k: v for k, v in tensors_from_weights(toy).items()}
    t["lm_head.weight"] = t["transformer.wte.weight"]
    w = weights_from_tensors(toy.cfg, t)
    np.testing.assert_array_equal(w.W_U, toy.W_E.T)


def test_qkv_split_order(toy):
    t = tensors_from_weights(toy)
    d, dh = toy.cfg.d_model, toy.cfg.d_head
    c_attn = t["h.0.attn.c_attn.weight"]
    np.testing.assert_array_equal(c_attn[:, d + dh : d + 2 * dh], toy.W_K[0, 1])
    np.testing.assert_array_equal(c_attn[:, 2 * d : 2 * d + dh], toy.W_V[0, 0])


def test_reader_agrees_with_safetensors_package(tmp_path, toy):
    st = pytest.importorskip("safetensors.numpy")
    tensors = tensors_from_weights(toy)
    tensors["extra.f16"] = np.arange(6, dtype=np.float16).reshape(2, 3)
    tensors["extra.i64"] = np.arange(5, dtype=np.int64)
    st.save_file(tensors, str(tmp_path / "ref.safetensors"), metadata={"format": "pt"})
    ours, meta = read_safetensors(tmp_path / "ref.safetensors")
    assert meta == {"format": "pt"}
    assert set(ours) == set(tensors)
    for k, v in tensors.items():
        assert ours[k].dtype == v.dtype
        np.testing.assert_array_equal(ours[k], v)
    write_safetensors(tmp_path / "ours.safetensors", tensors)
    back = st.load_file(str(tmp_path / "ours.safetensors"))
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], v)


def test_bf16_decoding(tmp_path):
    torch = pytest.importorskip("torch")
    st = pytest.importorskip("safetensors.torch")
    x = torch.tensor([1.5, -2.25, 3.0e-3], dtype=torch.bfloat16)
    st.save_file({"x": x}, str(tmp_path / "b.safetensors"))
    ours, _ = read_safetensors(tmp_path / "b.safetensors")
    np.testing.assert_array_equal(ours["x"], x.float().numpy())


def test_manifest_reports_missing_files(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_model(CheckpointManifest.from_dir(tmp_path))


def test_manifest_rejects_unknown_format(tmp_path):
    write_toy(ToySpec(seed=1), tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({
        "config_path": "config.json", "weights_path": "model.safetensors", "vocab_path": "vocab.json",
        "merges_path": "merges.txt", "format": "pickle"}))
    with pytest.raises(CheckpointError, match="unsupported checkpoint format"):
        load_model(CheckpointManifest.from_dir(tmp_path))
