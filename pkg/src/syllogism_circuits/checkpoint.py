"""Checkpoint loading: safetensors tensors plus a JSON config, GPT-2 tensor naming.

Tensor name mapping (published GPT-2 checkpoint -> ModelWeights field)::

    wte.weight                 (V, d)     -> W_E, and W_U = W_E.T when tied
    wpe.weight                 (n_ctx, d) -> W_pos
    h.{l}.ln_1.weight/bias                -> ln1_w/ln1_b[l]
    h.{l}.attn.c_attn.weight   (d, 3d)    -> columns [0:d]=Q, [d:2d]=K, [2d:3d]=V;
                                             each split into heads as
                                             W[:, h*d_head:(h+1)*d_head]
    h.{l}.attn.c_attn.bias     (3d,)      -> b_Q/b_K/b_V, same split
    h.{l}.attn.c_proj.weight   (d, d)     -> W_O[l, h] = rows [h*d_head:(h+1)*d_head]
    h.{l}.attn.c_proj.bias                -> b_O[l]
    h.{l}.ln_2.weight/bias                -> ln2_w/ln2_b[l]
    h.{l}.mlp.c_fc.weight      (d, d_mlp) -> W_in[l]
    h.{l}.mlp.c_fc.bias                   -> b_in[l]
    h.{l}.mlp.c_proj.weight    (d_mlp, d) -> W_out[l]
    h.{l}.mlp.c_proj.bias                 -> b_out[l]
    ln_f.weight/bias                      -> lnf_w/lnf_b
    lm_head.weight             (V, d)     -> optional; must equal wte.weight when tied

A leading ``transformer.`` prefix is accepted.  GPT-2 stores its projections as
``Conv1D`` weights (``x @ W``), so no transposes are needed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .model import ModelConfig, ModelWeights

PathLike = Union[str, Path]

_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}
_FLOAT_CODES = ("F64", "F32", "F16", "BF16")


class CheckpointError(ValueError):
    pass


# -- safetensors -------------------------------------------------------------


def read_safetensors(path: PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read every tensor of a safetensors file. Returns ``(tensors, metadata)``.

    Layout: 8-byte little-endian header length N, N bytes of UTF-8 JSON, then the
    data buffer that ``data_offsets`` index into.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: file too short for a safetensors header")
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise CheckpointError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None
    data = memoryview(raw)[8 + n :]
    meta = header.pop("__metadata__", {}) or {}
    tensors = {}
    truncated = []
    for name, info in header.items():
        code = info["dtype"]
        shape = tuple(info["shape"])
        start, end = info["data_offsets"]
        if end > len(data):
            truncated.append(name)
            continue
        buf = data[start:end]
        if code == "BF16":
            bits = np.frombuffer(buf, dtype="<u2").astype(np.uint32) << 16
            arr = bits.view(np.float32)
        elif code in _DTYPES:
            arr = np.frombuffer(buf, dtype=_DTYPES[code])
        else:
            raise CheckpointError(f"unsupported dtype {code} for tensor {name}")
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise CheckpointError(f"tensor {name}: {arr.size} elements for shape {shape}")
        tensors[name] = arr.reshape(shape)
    if truncated:
        raise CheckpointError(f"missing tensor(s) in truncated file {path}: {', '.join(sorted(truncated)[:5])}")
    return tensors, meta


_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def write_safetensors(path: PathLike, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _CODES.get(arr.dtype.str)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        b = arr.tobytes()
        header[name] = {"dtype": code, "shape": list(arr.shape), "data_offsets": [offset, offset + len(b)]}
        blobs.append(b)
        offset += len(b)
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    hbytes += b" " * (-len(hbytes) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


# -- raw float32 with a JSON index ------------------------------------------
#
# ``<weights>`` holds little-endian float32 values back to back;
# ``<weights>.index.json`` maps each tensor name to {"shape": [...], "offset": bytes}.


def index_path(weights_path: PathLike) -> Path:
    return Path(str(weights_path) + ".index.json")


def read_raw_f32(path: PathLike) -> dict[str, np.ndarray]:
    idx_file = index_path(path)
    if not idx_file.is_file():
        raise CheckpointError(f"index file not found: {idx_file}")
    index = json.loads(idx_file.read_text())
    raw = Path(path).read_bytes()
    tensors, truncated = {}, []
    for name, info in index.items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(info["offset"])
        if start + 4 * count > len(raw):
            truncated.append(name)
            continue
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
    if truncated:
        raise CheckpointError(f"missing tensor(s) in truncated file {path}: {', '.join(sorted(truncated)[:5])}")
    return tensors


def write_raw_f32(path: PathLike, tensors: dict[str, np.ndarray]) -> None:
    index, offset = {}, 0
    with open(path, "wb") as f:
        for name in sorted(tensors):
            b = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
            index[name] = {"shape": list(np.shape(tensors[name])), "offset": offset}
            f.write(b)
            offset += len(b)
    index_path(path).write_text(json.dumps(index))


# -- config ------------------------------------------------------------------

_HF_KEYS = {
    "n_layer": "n_layers",
    "n_head": "n_heads",
    "n_embd": "d_model",
    "n_positions": "n_ctx",
    "vocab_size": "n_vocab",
    "layer_norm_epsilon": "layernorm_epsilon",
    "n_inner": "d_mlp",
    "activation_function": "act_fn",
}


def parse_config(raw: dict) -> ModelConfig:
    """Accept either this package's field names or the GPT-2 release names."""
    vals = {}
    for k, v in raw.items():
        key = _HF_KEYS.get(k, k)
        if key in ModelConfig.__dataclass_fields__ and v is not None and key not in vals:
            vals[key] = v
    try:
        d_model = int(vals["d_model"])
        n_heads = int(vals["n_heads"])
        cfg = ModelConfig(
            n_layers=int(vals["n_layers"]),
            n_heads=n_heads,
            d_model=d_model,
            d_head=int(vals.get("d_head", d_model // n_heads)),
            d_mlp=int(vals.get("d_mlp", 4 * d_model)),
            n_ctx=int(vals["n_ctx"]),
            n_vocab=int(vals["n_vocab"]),
            layernorm_epsilon=float(vals.get("layernorm_epsilon", 1e-5)),
            act_fn=str(vals.get("act_fn", "gelu")),
        )
    except KeyError as exc:
        raise CheckpointError(f"config is missing field {exc}") from None
    return cfg


def config_to_json(cfg: ModelConfig) -> dict:
    return {
        "n_layers": cfg.n_layers,
        "n_heads": cfg.n_heads,
        "d_model": cfg.d_model,
        "d_head": cfg.d_head,
        "d_mlp": cfg.d_mlp,
        "n_ctx": cfg.n_ctx,
        "n_vocab": cfg.n_vocab,
        "layernorm_epsilon": cfg.layernorm_epsilon,
        "activation_function": cfg.act_fn,
    }


# -- manifest ----------------------------------------------------------------


FORMATS = ("safetensors", "raw-f32-with-index")


@dataclass(frozen=True)
class CheckpointManifest:
    config_path: Path
    weights_path: Path
    vocab_path: Path
    merges_path: Path
    format: str = "safetensors"

    @classmethod
    def from_dir(cls, directory: PathLike) -> "CheckpointManifest":
        """Standard file names inside one directory (``model.safetensors`` etc.)."""
        d = Path(directory)
        manifest_file = d / "manifest.json"
        if manifest_file.exists():
            raw = json.loads(manifest_file.read_text())
            return cls(*(d / raw[k] for k in ("config_path", "weights_path", "vocab_path", "merges_path")),
                       format=raw.get("format", "safetensors"))
        return cls(d / "config.json", d / "model.safetensors", d / "vocab.json", d / "merges.txt")

    def check(self) -> None:
        if self.format not in FORMATS:
            raise CheckpointError(f"unsupported checkpoint format {self.format!r}; expected one of {FORMATS}")
        paths = [self.config_path, self.weights_path, self.vocab_path, self.merges_path]
        if self.format == "raw-f32-with-index":
            paths.append(index_path(self.weights_path))
        for p in paths:
            if not Path(p).is_file():
                raise CheckpointError(f"checkpoint file not found: {p}")

    def to_json(self, relative_to: PathLike | None = None) -> dict:
        def rel(p):
            return str(Path(p).relative_to(relative_to)) if relative_to else str(p)

        return {"config_path": rel(self.config_path), "weights_path": rel(self.weights_path),
                "vocab_path": rel(self.vocab_path), "merges_path": rel(self.merges_path), "format": self.format}


def _strip_prefix(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for k, v in tensors.items():
        out[k[len("transformer."):] if k.startswith("transformer.") else k] = v
    return out


def weights_from_tensors(cfg: ModelConfig, tensors: dict[str, np.ndarray], tie_tol: float = 1e-6) -> ModelWeights:
    t = _strip_prefix(tensors)
    L, H, d, dh = cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head

    def get(name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in t:
            raise CheckpointError(f"missing tensor: {name}")
        arr = t[name]
        if arr.dtype.kind != "f":
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        if arr.shape != shape:
            raise CheckpointError(f"shape mismatch for {name}: expected {shape}, got {arr.shape}")
        return arr.astype(np.float32)

    def stack(fmt: str, shape) -> np.ndarray:
        return np.stack([get(fmt.format(l), shape) for l in range(L)])

    c_attn = stack("h.{}.attn.c_attn.weight", (d, 3 * d))  # (L, d, 3d)
    c_attn_b = stack("h.{}.attn.c_attn.bias", (3 * d,))

    def split_w(part: int) -> np.ndarray:
        w = c_attn[:, :, part * d : (part + 1) * d]  # (L, d, d)
        return np.ascontiguousarray(w.reshape(L, d, H, dh).transpose(0, 2, 1, 3))

    def split_b(part: int) -> np.ndarray:
        return np.ascontiguousarray(c_attn_b[:, part * d : (part + 1) * d].reshape(L, H, dh))

    W_E = get("wte.weight", (cfg.n_vocab, d))
    W_U = W_E.T.copy()
    if "lm_head.weight" in t:
        lm = get("lm_head.weight", (cfg.n_vocab, d))
        if not np.allclose(lm, W_E, atol=tie_tol):
            raise CheckpointError("lm_head.weight differs from wte.weight; untied embeddings are not supported")

    w = ModelWeights(
        cfg=cfg,
        W_E=W_E,
        W_pos=get("wpe.weight", (cfg.n_ctx, d)),
        ln1_w=stack("h.{}.ln_1.weight", (d,)),
        ln1_b=stack("h.{}.ln_1.bias", (d,)),
        W_Q=split_w(0),
        W_K=split_w(1),
        W_V=split_w(2),
        b_Q=split_b(0),
        b_K=split_b(1),
        b_V=split_b(2),
        W_O=np.ascontiguousarray(stack("h.{}.attn.c_proj.weight", (d, d)).reshape(L, H, dh, d)),
        b_O=stack("h.{}.attn.c_proj.bias", (d,)),
        ln2_w=stack("h.{}.ln_2.weight", (d,)),
        ln2_b=stack("h.{}.ln_2.bias", (d,)),
        W_in=stack("h.{}.mlp.c_fc.weight", (d, cfg.d_mlp)),
        b_in=stack("h.{}.mlp.c_fc.bias", (cfg.d_mlp,)),
        W_out=stack("h.{}.mlp.c_proj.weight", (cfg.d_mlp, d)),
        b_out=stack("h.{}.mlp.c_proj.bias", (d,)),
        lnf_w=get("ln_f.weight", (d,)),
        lnf_b=get("ln_f.bias", (d,)),
        W_U=W_U,
    )
    w.validate()
    if not np.allclose(w.W_U, w.W_E.T, atol=tie_tol):
        raise CheckpointError("tied-embedding check failed: W_U != W_E.T")
    return w


def tensors_from_weights(w: ModelWeights) -> dict[str, np.ndarray]:
    """Inverse of :func:`weights_from_tensors`, in GPT-2 naming."""
    cfg = w.cfg
    L, H, d, dh = cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head
    out = {"wte.weight": w.W_E, "wpe.weight": w.W_pos, "ln_f.weight": w.lnf_w, "ln_f.bias": w.lnf_b}

    def merge_w(W):  # (H, d, dh) -> (d, H*dh)
        return W.transpose(1, 0, 2).reshape(d, H * dh)

    for l in range(L):
        p = f"h.{l}."
        out[p + "ln_1.weight"] = w.ln1_w[l]
        out[p + "ln_1.bias"] = w.ln1_b[l]
        out[p + "attn.c_attn.weight"] = np.concatenate([merge_w(w.W_Q[l]), merge_w(w.W_K[l]), merge_w(w.W_V[l])], axis=1)
        out[p + "attn.c_attn.bias"] = np.concatenate([w.b_Q[l].ravel(), w.b_K[l].ravel(), w.b_V[l].ravel()])
        out[p + "attn.c_proj.weight"] = w.W_O[l].reshape(H * dh, d)
        out[p + "attn.c_proj.bias"] = w.b_O[l]
        out[p + "ln_2.weight"] = w.ln2_w[l]
        out[p + "ln_2.bias"] = w.ln2_b[l]
        out[p + "mlp.c_fc.weight"] = w.W_in[l]
        out[p + "mlp.c_fc.bias"] = w.b_in[l]
        out[p + "mlp.c_proj.weight"] = w.W_out[l]
        out[p + "mlp.c_proj.bias"] = w.b_out[l]
    return {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in out.items()}


def load_model(manifest: CheckpointManifest) -> tuple[ModelConfig, ModelWeights]:
    manifest.check()
    try:
        cfg = parse_config(json.loads(Path(manifest.config_path).read_text()))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest.config_path}: invalid JSON: {exc}") from None
    if manifest.format == "safetensors":
        tensors, _ = read_safetensors(manifest.weights_path)
    else:
        tensors = read_raw_f32(manifest.weights_path)
    return cfg, weights_from_tensors(cfg, tensors)


def save_checkpoint(weights: ModelWeights, directory: PathLike, vocab: dict[str, int], merges: list[tuple[str, str]],
                    format: str = "safetensors") -> CheckpointManifest:
    if format not in FORMATS:
        raise CheckpointError(f"unsupported checkpoint format {format!r}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(config_to_json(weights.cfg), indent=2))
    if format == "safetensors":
        write_safetensors(d / "model.safetensors", tensors_from_weights(weights), {"format": "pt"})
    else:
        write_raw_f32(d / "model.f32", tensors_from_weights(weights))
    (d / "vocab.json").write_text(json.dumps(vocab, ensure_ascii=False))
    with open(d / "merges.txt", "w", encoding="utf-8") as f:
        f.write("#version: 0.2\n")
        for a, b in merges:
            f.write(f"{a} {b}\n")
    if format != "safetensors":
        m = CheckpointManifest(d / "config.json", d / "model.f32", d / "vocab.json", d / "merges.txt", format)
        (d / "manifest.json").write_text(json.dumps(m.to_json(relative_to=d), indent=2))
    return CheckpointManifest.from_dir(d)
