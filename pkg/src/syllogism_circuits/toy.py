"""Tiny deterministic checkpoints for tests, optionally with hand-planted heads.

Planted constructions work in a "balanced" basis: each logical coordinate ``i``
is stored as ``(+v, -v)`` in physical dims ``(2i, 2i+1)``, so every residual
vector has zero mean and LayerNorm reduces to a scalar rescale.  Logical
coordinates are split into a token block, a positional block (two sinusoid
frequencies) and a previous-token block written by the planted previous-token
head.

    copy        head (L-1).1: OV projects onto the token block, QK is zero
    suppression head (L-1).2: the negated copy OV
    induction   head 0.0 attends to the previous position and writes the
                previous token; head 1.0 matches its query token against it
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointManifest, save_checkpoint
from .data import PAIR_WORDS, TEMPLATES
from .model import ModelConfig, ModelWeights, head
from .tokenizer import END_OF_TEXT, _PAT, Tokenizer, bytes_to_unicode

PLANTS = ("copy", "suppression", "induction")
PREV_TOKEN_HEAD = head(0, 0)
INDUCTION_HEAD = head(1, 0)


def copy_head(n_layers: int):
    return head(n_layers - 1, 1)


def suppression_head(n_layers: int):
    return head(n_layers - 1, 2)


# -- vocabulary --------------------------------------------------------------


def _toy_words() -> list[str]:
    words = {" " + c for c in string.ascii_uppercase}
    for pos, neg in PAIR_WORDS.values():
        words |= {" " + pos, " " + neg}
    for templates in TEMPLATES.values():
        for t in templates:
            words.update(p for p in _PAT.findall(t.replace("{", "").replace("}", "")) if p.strip().isalpha())
    return sorted(words)


def _bpe(word: list[str], ranks: dict) -> list[str]:
    parts = list(word)
    while len(parts) > 1:
        cands = [(ranks[p], i) for i, p in enumerate(zip(parts, parts[1:])) if p in ranks]
        if not cands:
            break
        pair = (parts[min(cands)[1]], parts[min(cands)[1] + 1])
        out, i = [], 0
        while i < len(parts):
            if i < len(parts) - 1 and (parts[i], parts[i + 1]) == pair:
                out.append(parts[i] + parts[i + 1])
                i += 2
            else:
                out.append(parts[i])
                i += 1
        parts = out
    return parts


def toy_vocab() -> tuple[dict[str, int], list[tuple[str, str]]]:
    """Byte tokens, merges making every template word one token, then end-of-text."""
    byte_enc = bytes_to_unicode()
    vocab = {c: i for i, c in enumerate(byte_enc.values())}
    merges: list[tuple[str, str]] = []
    ranks: dict[tuple[str, str], int] = {}
    for w in _toy_words():
        mapped = "".join(byte_enc[b] for b in w.encode("utf-8"))
        # appending a merge never changes how earlier words segment: it outranks none of theirs
        while len(parts := _bpe(list(mapped), ranks)) > 1:
            pair = (parts[0], parts[1])
            ranks[pair] = len(merges)
            merges.append(pair)
            vocab.setdefault(pair[0] + pair[1], len(vocab))
    vocab[END_OF_TEXT] = len(vocab)
    return vocab, merges


def toy_tokenizer() -> Tokenizer:
    return Tokenizer(*toy_vocab())


# -- weights -----------------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    seed: int = 0
    planted: tuple[str, ...] = ()
    n_ctx: int = 32
    init_std: float = 0.1
    act_fn: str = "gelu_new"

    def __post_init__(self):
        if self.n_layers not in (1, 2):
            raise ValueError("toy models have 1 or 2 layers")
        if not 1 <= self.n_heads <= 4 or self.d_model > 32 or self.d_model % self.n_heads:
            raise ValueError("toy models have at most 4 heads, d_model <= 32 divisible by n_heads")
        bad = set(self.planted) - set(PLANTS)
        if bad:
            raise ValueError(f"unknown planted mechanisms {sorted(bad)}")
        if self.planted and (self.d_model != 32 or self.n_heads != 4):
            raise ValueError("planted heads need d_model=32 and 4 heads")
        if "induction" in self.planted and self.n_layers != 2:
            raise ValueError("a planted induction circuit needs 2 layers")


_T = slice(0, 6)
_P = slice(6, 10)
_V = slice(10, 16)


def _phys(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (2 * v.shape[-1],), dtype=np.float64)
    out[..., 0::2] = v
    out[..., 1::2] = -v
    return out


def _reader(block: slice, d: int = 32) -> np.ndarray:
    R = np.zeros((d, block.stop - block.start))
    for c, i in enumerate(range(block.start, block.stop)):
        R[2 * i, c], R[2 * i + 1, c] = 0.5, -0.5
    return R


def _writer(block: slice, d: int = 32) -> np.ndarray:
    return 2.0 * _reader(block, d).T


def _pad(m: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    out[: m.shape[0], : m.shape[1]] = m
    return out


def _best_freqs(n_ctx: int) -> tuple[np.ndarray, float]:
    """Two integer frequencies (period 2*n_ctx) maximizing the score gap at offset 0."""
    best = None
    m = np.arange(1, n_ctx)
    for k1 in range(1, n_ctx):
        for k2 in range(k1 + 1, n_ctx):
            w = 2 * math.pi * np.array([k1, k2]) / (2 * n_ctx)
            gap = float((2 - np.cos(np.outer(m, w)).sum(1)).min())
            if best is None or gap > best[1]:
                best = (w, gap)
    return best


def _random_weights(cfg: ModelConfig, rng: np.random.Generator, std: float, ln_noise: float) -> ModelWeights:
    L, H, d, dh, dm = cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head, cfg.d_mlp
    n = lambda *s, sd=std: rng.normal(0.0, sd, size=s)
    return ModelWeights(
        cfg=cfg,
        W_E=n(cfg.n_vocab, d, sd=1.0),
        W_pos=n(cfg.n_ctx, d, sd=0.5),
        ln1_w=1.0 + n(L, d, sd=ln_noise),
        ln1_b=n(L, d, sd=ln_noise),
        W_Q=n(L, H, d, dh),
        W_K=n(L, H, d, dh),
        W_V=n(L, H, d, dh),
        b_Q=n(L, H, dh, sd=ln_noise),
        b_K=n(L, H, dh, sd=ln_noise),
        b_V=n(L, H, dh, sd=ln_noise),
        W_O=n(L, H, dh, d),
        b_O=n(L, d, sd=ln_noise),
        ln2_w=1.0 + n(L, d, sd=ln_noise),
        ln2_b=n(L, d, sd=ln_noise),
        W_in=n(L, d, dm),
        b_in=n(L, dm, sd=ln_noise),
        W_out=n(L, dm, d),
        b_out=n(L, d, sd=ln_noise),
        lnf_w=1.0 + n(d, sd=ln_noise),
        lnf_b=n(d, sd=ln_noise),
        W_U=np.zeros((d, cfg.n_vocab)),
    )


def _plant(w: ModelWeights, spec: ToySpec, rng: np.random.Generator) -> None:
    cfg = w.cfg
    d, dh = cfg.d_model, cfg.d_head
    s_t, s_p = 3.0, 3.0
    tok = rng.normal(size=(cfg.n_vocab, _T.stop - _T.start))
    tok /= np.linalg.norm(tok, axis=1, keepdims=True)
    logical = np.zeros((cfg.n_vocab, d // 2))
    logical[:, _T] = s_t * tok
    w.W_E = _phys(logical)
    freqs, gap = _best_freqs(cfg.n_ctx)
    ang = np.outer(np.arange(cfg.n_ctx), freqs)
    pos = np.zeros((cfg.n_ctx, d // 2))
    pos[:, _P] = s_p * np.stack([np.cos(ang[:, 0]), np.sin(ang[:, 0]), np.cos(ang[:, 1]), np.sin(ang[:, 1])], 1)
    w.W_pos = _phys(pos)
    for name in ("ln1_w", "ln2_w", "lnf_w"):
        setattr(w, name, np.ones_like(getattr(w, name)))
    for name in ("ln1_b", "ln2_b", "lnf_b", "b_Q", "b_K", "b_V", "b_O"):
        setattr(w, name, np.zeros_like(getattr(w, name)))

    # residual rescale by LayerNorm: sigma^2 = mean of squares of the balanced vector
    var0 = 2 * (s_t**2 + 2 * s_p**2) / d
    var1 = 2 * (2 * s_t**2 + 2 * s_p**2) / d
    target_nats = 15.0

    def set_head(c, W_Q=None, W_K=None, W_V=None, W_O=None):
        l, h = c.layer, c.head
        w.W_Q[l, h] = _pad(W_Q, (d, dh)) if W_Q is not None else 0.0
        w.W_K[l, h] = _pad(W_K, (d, dh)) if W_K is not None else 0.0
        w.W_V[l, h] = _pad(W_V, (d, dh)) if W_V is not None else 0.0
        w.W_O[l, h] = _pad(W_O, (dh, d)) if W_O is not None else 0.0

    if "induction" in spec.planted:
        rot = np.zeros((4, 4))
        for i, om in enumerate(freqs):
            c, s = math.cos(om), math.sin(om)
            rot[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = [[c, -s], [s, c]]
        beta = target_nats * math.sqrt(dh) * var0 / (s_p**2 * gap)
        set_head(PREV_TOKEN_HEAD, W_Q=beta * _reader(_P) @ rot, W_K=_reader(_P),
                 W_V=_reader(_T), W_O=math.sqrt(var0) * _writer(_V))
        beta2 = 4 * target_nats * math.sqrt(dh) * var1 / s_t**2
        set_head(INDUCTION_HEAD, W_Q=beta2 * _reader(_T), W_K=_reader(_V))
    if "copy" in spec.planted:
        set_head(copy_head(cfg.n_layers), W_V=_reader(_T), W_O=_writer(_T))
    if "suppression" in spec.planted:
        set_head(suppression_head(cfg.n_layers), W_V=_reader(_T), W_O=-_writer(_T))


def build_toy(spec: ToySpec = ToySpec(), tokenizer: Tokenizer | None = None) -> tuple[ModelWeights, Tokenizer]:
    tokenizer = tokenizer or toy_tokenizer()
    cfg = ModelConfig(
        n_layers=spec.n_layers,
        n_heads=spec.n_heads,
        d_model=spec.d_model,
        d_head=spec.d_model // spec.n_heads,
        d_mlp=4 * spec.d_model,
        n_ctx=spec.n_ctx,
        n_vocab=tokenizer.n_vocab,
        act_fn=spec.act_fn,
    )
    rng = np.random.default_rng(spec.seed)
    if spec.planted:
        w = _random_weights(cfg, rng, std=0.02, ln_noise=0.0)
        _plant(w, spec, rng)
    else:
        w = _random_weights(cfg, rng, std=spec.init_std, ln_noise=0.1)
    w.W_U = w.W_E.T.copy()
    w.validate()
    w.W_U = w.W_E.T.copy()
    return w, tokenizer


def write_toy(spec: ToySpec, directory, format: str = "safetensors") -> CheckpointManifest:
    """Write a complete checkpoint (config, weights, vocab, merges) for ``spec``."""
    tokenizer = toy_tokenizer()
    weights, _ = build_toy(spec, tokenizer)
    vocab, merges = toy_vocab()
    return save_checkpoint(weights, Path(directory), vocab, merges, format=format)
