"""GPT-2 style decoder forward pass with a cache of every internal activation.

Shapes follow the convention ``(batch, pos, ...)``.  A 1-D token sequence is
accepted everywhere and the batch axis is dropped from every returned array.

Head-scoped sites are stored stacked along a head axis and sliced on access:

    head_z       (batch, pos, head, d_head)
    head_result  (batch, pos, head, d_model)
    attn_scores  (batch, head, query_pos, key_pos)
    attn_pattern (batch, head, query_pos, key_pos)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Union

import numpy as np

SITES = (
    "resid_pre",
    "ln1_out",
    "attn_scores",
    "attn_pattern",
    "head_z",
    "head_result",
    "attn_out",
    "resid_mid",
    "mlp_pre",
    "mlp_out",
    "resid_post",
    "final_ln",
    "logits",
)
HEAD_SITES = frozenset({"attn_scores", "attn_pattern", "head_z", "head_result"})
FINAL_SITES = frozenset({"final_ln", "logits"})
# axis of the head dimension in the batched stacked array
_HEAD_AXIS = {"head_z": 2, "head_result": 2, "attn_scores": 1, "attn_pattern": 1}

FINAL = "final"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int
    n_ctx: int
    n_vocab: int
    layernorm_epsilon: float = 1e-5
    act_fn: str = "gelu"  # "gelu" (erf) or "gelu_new" (tanh approximation)

    def __post_init__(self):
        if self.d_head * self.n_heads != self.d_model:
            raise ModelError(
                f"d_head * n_heads must equal d_model ({self.d_head} * {self.n_heads} != {self.d_model})"
            )
        if self.act_fn not in ("gelu", "gelu_new"):
            raise ModelError(f"unsupported activation {self.act_fn!r}")

    def as_tuple(self) -> tuple[int, ...]:
        return (self.n_layers, self.n_heads, self.d_model, self.d_head, self.d_mlp, self.n_ctx, self.n_vocab)


@dataclass
class ModelWeights:
    """All learned parameters, with per-layer tensors stacked on a leading layer axis.

    Attention projections are split per head: ``W_Q[l, h]`` is ``d_model x d_head``
    and ``W_O[l, h]`` is ``d_head x d_model``.
    """

    cfg: ModelConfig
    W_E: np.ndarray  # (n_vocab, d_model)
    W_pos: np.ndarray  # (n_ctx, d_model)
    ln1_w: np.ndarray  # (L, d_model)
    ln1_b: np.ndarray
    W_Q: np.ndarray  # (L, H, d_model, d_head)
    W_K: np.ndarray
    W_V: np.ndarray
    b_Q: np.ndarray  # (L, H, d_head)
    b_K: np.ndarray
    b_V: np.ndarray
    W_O: np.ndarray  # (L, H, d_head, d_model)
    b_O: np.ndarray  # (L, d_model)
    ln2_w: np.ndarray
    ln2_b: np.ndarray
    W_in: np.ndarray  # (L, d_model, d_mlp)
    b_in: np.ndarray  # (L, d_mlp)
    W_out: np.ndarray  # (L, d_mlp, d_model)
    b_out: np.ndarray  # (L, d_model)
    lnf_w: np.ndarray  # (d_model,)
    lnf_b: np.ndarray
    W_U: np.ndarray  # (d_model, n_vocab)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.cfg
        L, H, d, dh, dm = c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_mlp
        return {
            "W_E": (c.n_vocab, d),
            "W_pos": (c.n_ctx, d),
            "ln1_w": (L, d),
            "ln1_b": (L, d),
            "W_Q": (L, H, d, dh),
            "W_K": (L, H, d, dh),
            "W_V": (L, H, d, dh),
            "b_Q": (L, H, dh),
            "b_K": (L, H, dh),
            "b_V": (L, H, dh),
            "W_O": (L, H, dh, d),
            "b_O": (L, d),
            "ln2_w": (L, d),
            "ln2_b": (L, d),
            "W_in": (L, d, dm),
            "b_in": (L, dm),
            "W_out": (L, dm, d),
            "b_out": (L, d),
            "lnf_w": (d,),
            "lnf_b": (d,),
            "W_U": (d, c.n_vocab),
        }

    def validate(self) -> None:
        for name, shape in self.expected_shapes().items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ModelError(f"shape mismatch for {name}: expected {shape}, got {arr.shape}")
            if arr.dtype != np.float32:
                setattr(self, name, arr.astype(np.float32))

    def W_OV(self, layer: int, head: int) -> np.ndarray:
        return self.W_V[layer, head] @ self.W_O[layer, head]

    def W_QK(self, layer: int, head: int) -> np.ndarray:
        return self.W_Q[layer, head] @ self.W_K[layer, head].T


@dataclass(frozen=True, order=True)
class HookSite:
    """Address of one activation: ``HookSite(7, "head_result", 2)``.

    ``layer`` is ``"final"`` for ``final_ln`` and ``logits``.
    """

    layer: Union[int, str]
    site: str
    head: Union[int, None] = None

    def __post_init__(self):
        if self.site not in SITES:
            raise ModelError(f"unknown site {self.site!r}")
        if (self.head is not None) != (self.site in HEAD_SITES):
            raise ModelError(f"head must be given iff site is head-scoped: {self}")
        if (self.layer == FINAL) != (self.site in FINAL_SITES):
            raise ModelError(f"layer 'final' is only valid for final_ln/logits: {self}")

    def __str__(self) -> str:
        if self.head is not None:
            return f"blocks.{self.layer}.{self.site}.{self.head}"
        if self.layer == FINAL:
            return self.site
        return f"blocks.{self.layer}.{self.site}"


def site(layer, name, head=None) -> HookSite:
    return HookSite(layer, name, head)


Replacement = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


class ActivationCache:
    """Every hook-point activation of one (possibly batched) forward pass."""

    def __init__(self, tokens: np.ndarray, cfg: ModelConfig, batched: bool):
        self.tokens = tokens
        self.cfg = cfg
        self.batched = batched
        self._data: dict[tuple, np.ndarray] = {}

    def _store(self, layer, name: str, value: np.ndarray) -> None:
        self._data[(layer, name)] = value

    def stacked(self, layer, name: str) -> np.ndarray:
        """The raw stored array, batch axis always present, heads stacked."""
        try:
            return self._data[(layer, name)]
        except KeyError:
            raise KeyError(f"site {name!r} of layer {layer!r} not in cache") from None

    def __getitem__(self, key: HookSite) -> np.ndarray:
        arr = self.stacked(key.layer, key.site)
        if key.head is not None:
            arr = np.take(arr, key.head, axis=_HEAD_AXIS[key.site])
        return arr if self.batched else arr[0]

    def __contains__(self, key: HookSite) -> bool:
        return (key.layer, key.site) in self._data

    def keys(self) -> Iterator[HookSite]:
        for (layer, name) in self._data:
            if name in HEAD_SITES:
                for h in range(self.cfg.n_heads):
                    yield HookSite(layer, name, h)
            else:
                yield HookSite(layer, name)

    def __len__(self) -> int:
        return sum(1 for _ in self.keys())

    def is_complete(self) -> bool:
        needed = [(l, s) for l in range(self.cfg.n_layers) for s in SITES if s not in FINAL_SITES]
        needed += [(FINAL, s) for s in FINAL_SITES]
        return all(k in self._data for k in needed)

    def final_position(self, layer, name: str) -> np.ndarray:
        """Stacked activation at the last position, shape (batch, ...)."""
        arr = self.stacked(layer, name)
        if name in ("attn_scores", "attn_pattern"):
            return arr[:, :, -1]
        return arr[:, -1]


def linear(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``x @ W`` over the last axis as a single 2-D GEMM (stacked matmul is far slower)."""
    return (x.reshape(-1, x.shape[-1]) @ W).reshape(*x.shape[:-1], W.shape[-1])


def layer_norm(x: np.ndarray, w: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    x = x - x.mean(-1, keepdims=True)
    scale = np.sqrt((x * x).mean(-1, keepdims=True) + eps)
    return (x / scale) * w + b


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray, kind: str = "gelu") -> np.ndarray:
    if kind == "gelu_new":
        return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3)))
    from scipy.special import erf

    return (0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))).astype(x.dtype, copy=False)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def mlp(weights: ModelWeights, layer: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply LN2 and the MLP of ``layer`` to residual vectors ``x``. Returns (pre, out)."""
    c = weights.cfg
    h = layer_norm(x, weights.ln2_w[layer], weights.ln2_b[layer], c.layernorm_epsilon)
    pre = linear(h, weights.W_in[layer]) + weights.b_in[layer]
    out = linear(gelu(pre, c.act_fn), weights.W_out[layer]) + weights.b_out[layer]
    return pre, out


def attention_head(
    weights: ModelWeights,
    layer: int,
    head: int,
    q_input: np.ndarray,
    k_input: np.ndarray,
    v_input: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Run one head on separately supplied (already layer-normed) inputs.

    Inputs are ``(batch, pos, d_model)``.  Returns ``(pattern, result)`` with
    shapes ``(batch, q, k)`` and ``(batch, pos, d_model)``.
    """
    w = weights
    q = linear(q_input, w.W_Q[layer, head]) + w.b_Q[layer, head]
    k = linear(k_input, w.W_K[layer, head]) + w.b_K[layer, head]
    v = linear(v_input, w.W_V[layer, head]) + w.b_V[layer, head]
    scores = q @ np.swapaxes(k, -1, -2) / np.float32(math.sqrt(w.cfg.d_head))
    n = scores.shape[-1]
    scores = np.where(causal_mask(n), scores, -np.inf).astype(np.float32)
    pattern = softmax(scores)
    result = linear(pattern @ v, w.W_O[layer, head])
    return pattern, result


def _check_tokens(cfg: ModelConfig, tokens) -> tuple[np.ndarray, bool]:
    toks = np.asarray(tokens)
    if toks.dtype.kind not in "iu":
        raise ModelError("tokens must be integer ids")
    batched = toks.ndim == 2
    if toks.ndim == 1:
        toks = toks[None]
    elif toks.ndim != 2:
        raise ModelError(f"tokens must be 1-D or 2-D, got shape {toks.shape}")
    if toks.shape[1] == 0:
        raise ModelError("empty token sequence")
    if toks.shape[1] > cfg.n_ctx:
        raise ModelError(f"sequence too long: {toks.shape[1]} > n_ctx={cfg.n_ctx}")
    if toks.min() < 0 or toks.max() >= cfg.n_vocab:
        raise ModelError(f"token id out of range [0, {cfg.n_vocab})")
    return toks.astype(np.int64), batched


class _Hooks:
    def __init__(self, cfg: ModelConfig, replacements: Mapping[HookSite, Replacement], batch: int, batched: bool):
        self.batch = batch
        self.batched = batched
        self.by_key: dict[tuple, list[tuple[HookSite, Replacement]]] = {}
        for key, rep in (replacements or {}).items():
            if not isinstance(key, HookSite):
                raise ModelError(f"replacement keys must be HookSite, got {key!r}")
            if isinstance(key.layer, int) and not 0 <= key.layer < cfg.n_layers:
                raise ModelError(f"unknown site {key}: layer out of range")
            if key.head is not None and not 0 <= key.head < cfg.n_heads:
                raise ModelError(f"unknown site {key}: head out of range")
            self.by_key.setdefault((key.layer, key.site), []).append((key, rep))

    def _apply_one(self, key: HookSite, rep: Replacement, value: np.ndarray) -> np.ndarray:
        # value has the batch axis; the public shape may not
        public = value if self.batched else value[0]
        if callable(rep):
            new = np.asarray(rep(public.copy()), dtype=np.float32)
            if new.shape != public.shape:
                raise ModelError(f"shape mismatch at {key}: transform returned {new.shape}, expected {public.shape}")
        else:
            new = np.asarray(rep, dtype=np.float32)
            if new.shape != public.shape and not (self.batched and new.shape == public.shape[1:]):
                raise ModelError(f"shape mismatch at {key}: got {new.shape}, expected {public.shape}")
        if not self.batched:
            new = new[None]
        return np.broadcast_to(new, value.shape)

    def __call__(self, layer, name: str, value: np.ndarray) -> np.ndarray:
        reps = self.by_key.get((layer, name))
        if not reps:
            return value
        value = value.copy()
        for key, rep in reps:
            if key.head is None:
                value[...] = self._apply_one(key, rep, value)
            else:
                ax = _HEAD_AXIS[name]
                idx = (slice(None),) * ax + (key.head,)
                value[idx] = self._apply_one(key, rep, value[idx])
        return value


def forward_hooked(
    weights: ModelWeights,
    tokens,
    replacements: Mapping[HookSite, Replacement] | None = None,
    cache_sites: Union[set[str], None] = None,
    last_logits_only: bool = False,
) -> tuple[np.ndarray, ActivationCache]:
    """Forward pass with activations replaced before downstream use.

    ``replacements`` maps a :class:`HookSite` to either an array of the site's
    shape (for batched input, a batch-less array is broadcast over the batch) or
    a callable receiving the clean value and returning the new one.

    ``cache_sites`` restricts which site names are stored (all by default).
    With ``last_logits_only`` the final LayerNorm and unembedding run on the
    last position only, so the final sites and the logits have length 1.
    """
    cfg = weights.cfg
    toks, batched = _check_tokens(cfg, tokens)
    B, T = toks.shape
    H = cfg.n_heads
    hook = _Hooks(cfg, replacements or {}, B, batched)
    cache = ActivationCache(toks if batched else toks[0], cfg, batched)
    keep = set(SITES) if cache_sites is None else set(cache_sites)
    eps = cfg.layernorm_epsilon

    def emit(layer, name, value):
        value = hook(layer, name, value)
        if name in keep:
            cache._store(layer, name, value)
        return value

    mask = causal_mask(T)
    inv_sqrt = np.float32(1.0 / math.sqrt(cfg.d_head))
    w = weights
    resid = (w.W_E[toks] + w.W_pos[:T]).astype(np.float32)
    for l in range(cfg.n_layers):
        resid = emit(l, "resid_pre", resid)
        x = emit(l, "ln1_out", layer_norm(resid, w.ln1_w[l], w.ln1_b[l], eps))
        # one GEMM per projection, then (B, H, T, e) for the per-head products
        q, k, v = (
            (linear(x, _fuse_heads(W[l])) + bias[l].reshape(-1)).reshape(B, T, H, -1).transpose(0, 2, 1, 3)
            for W, bias in ((w.W_Q, w.b_Q), (w.W_K, w.b_K), (w.W_V, w.b_V))
        )
        scores = (q @ k.transpose(0, 1, 3, 2)) * inv_sqrt
        scores = emit(l, "attn_scores", np.where(mask, scores, -np.inf).astype(np.float32))
        pattern = emit(l, "attn_pattern", softmax(scores))
        z = emit(l, "head_z", (pattern @ v).transpose(0, 2, 1, 3))
        result = emit(l, "head_result", np.stack([linear(z[:, :, i], w.W_O[l, i]) for i in range(H)], axis=2))
        attn_out = emit(l, "attn_out", result.sum(axis=2) + w.b_O[l])
        resid = emit(l, "resid_mid", resid + attn_out)
        h = layer_norm(resid, w.ln2_w[l], w.ln2_b[l], eps)
        pre = emit(l, "mlp_pre", linear(h, w.W_in[l]) + w.b_in[l])
        mlp_out = emit(l, "mlp_out", linear(gelu(pre, cfg.act_fn), w.W_out[l]) + w.b_out[l])
        resid = emit(l, "resid_post", resid + mlp_out)
    if last_logits_only:
        resid = resid[:, -1:]
    final = emit(FINAL, "final_ln", layer_norm(resid, w.lnf_w, w.lnf_b, eps))
    logits = emit(FINAL, "logits", linear(final, w.W_U))
    return (logits if batched else logits[0]), cache


def _fuse_heads(W: np.ndarray) -> np.ndarray:
    """(H, d_model, d_head) -> (d_model, H * d_head), heads side by side."""
    return W.transpose(1, 0, 2).reshape(W.shape[1], -1)


def forward_with_cache(weights: ModelWeights, tokens) -> tuple[np.ndarray, ActivationCache]:
    return forward_hooked(weights, tokens, {})


def final_logits(weights: ModelWeights, final_resid: np.ndarray, token_ids=None) -> np.ndarray:
    """Final LayerNorm then unembedding of residual vectors (optionally only some columns)."""
    x = layer_norm(final_resid, weights.lnf_w, weights.lnf_b, weights.cfg.layernorm_epsilon)
    W_U = weights.W_U if token_ids is None else weights.W_U[:, token_ids]
    return linear(x, W_U)


@dataclass(frozen=True, order=True)
class ComponentId:
    """An attention head, an MLP, or the embedding; heads print as ``"L.H"``."""

    kind: str  # "head" | "mlp" | "embed"
    layer: int = 0
    head: Union[int, None] = None

    def __post_init__(self):
        if self.kind not in ("head", "mlp", "embed"):
            raise ValueError(f"unknown component kind {self.kind!r}")
        if (self.head is not None) != (self.kind == "head"):
            raise ValueError("head index is required for heads and only for heads")

    def __str__(self) -> str:
        if self.kind == "head":
            return f"{self.layer}.{self.head}"
        if self.kind == "mlp":
            return f"mlp{self.layer}"
        return "embed"

    @classmethod
    def parse(cls, text: str) -> "ComponentId":
        text = text.strip()
        if text == "embed":
            return cls("embed")
        if text.lower().startswith("mlp"):
            return cls("mlp", int(text[3:]))
        layer, _, head = text.partition(".")
        if not head:
            raise ValueError(f"cannot parse component {text!r}; expected 'L.H', 'mlpL' or 'embed'")
        return cls("head", int(layer), int(head))


def head(layer: int, h: int) -> ComponentId:
    return ComponentId("head", layer, h)


def mlp_id(layer: int) -> ComponentId:
    return ComponentId("mlp", layer)


EMBED = ComponentId("embed")


def all_heads(cfg: ModelConfig) -> list[ComponentId]:
    return [head(l, h) for l in range(cfg.n_layers) for h in range(cfg.n_heads)]


def all_mlps(cfg: ModelConfig) -> list[ComponentId]:
    return [mlp_id(l) for l in range(cfg.n_layers)]


def component_output(cache: ActivationCache, comp: ComponentId) -> np.ndarray:
    """The component's write into the residual stream, (batch, pos, d_model)."""
    if comp.kind == "head":
        return cache.stacked(comp.layer, "head_result")[:, :, comp.head]
    if comp.kind == "mlp":
        return cache.stacked(comp.layer, "mlp_out")
    return cache.stacked(0, "resid_pre")


def output_site(comp: ComponentId) -> HookSite:
    if comp.kind == "head":
        return HookSite(comp.layer, "head_result", comp.head)
    if comp.kind == "mlp":
        return HookSite(comp.layer, "mlp_out")
    raise ValueError("the embedding has no replaceable output site")


def decompose_final_residual(cache: ActivationCache) -> list[tuple[ComponentId, np.ndarray]]:
    """Per-component contributions to the final residual at the last position.

    The attention output biases are not attributed to any head; they are folded
    into the embedding term so the contributions sum exactly to the residual.
    """
    cfg = cache.cfg
    try:
        embed = cache.final_position(0, "resid_pre")
        parts = []
        bias = np.zeros_like(embed)
        for l in range(cfg.n_layers):
            result = cache.final_position(l, "head_result")
            attn_out = cache.final_position(l, "attn_out")
            bias = bias + (attn_out - result.sum(axis=1))
            for h in range(cfg.n_heads):
                parts.append((head(l, h), result[:, h]))
            parts.append((mlp_id(l), cache.final_position(l, "mlp_out")))
    except KeyError as exc:
        raise ModelError(f"incomplete cache: {exc}") from None
    out = [(EMBED, embed + bias)] + parts
    if not cache.batched:
        out = [(c, v[0]) for c, v in out]
    return out


def iter_batches(n: int, batch_size: int) -> Iterator[slice]:
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))


@dataclass
class CachedRuns:
    """Selected activations of many prompts, collected in batches."""

    logits_last: np.ndarray  # (N, n_vocab)
    sites: dict[tuple, np.ndarray] = field(default_factory=dict)


def run_batched(
    weights: ModelWeights,
    tokens: np.ndarray,
    replacements=None,
    cache_sites: set[str] = frozenset(),
    batch_size: int = 32,
    last_only: bool = False,
) -> CachedRuns:
    """Run prompts of one length in batches keeping the final logits and chosen sites.

    ``replacements`` is either a mapping applied to every batch (arrays must then
    be batch-less) or a function ``slice -> mapping`` building per-batch patches.
    With ``last_only`` only the last position of each cached site is kept
    (patterns keep only the last query row).
    """
    tokens = np.asarray(tokens)
    chunks: dict[tuple, list[np.ndarray]] = {}
    logits = []
    for sl in iter_batches(len(tokens), batch_size):
        reps = replacements(sl) if callable(replacements) else replacements
        lg, cache = forward_hooked(weights, tokens[sl], reps, cache_sites=set(cache_sites), last_logits_only=True)
        logits.append(lg[:, -1])
        for key in cache._data:
            arr = cache.final_position(*key) if last_only else cache.stacked(*key)
            chunks.setdefault(key, []).append(arr)
    return CachedRuns(np.concatenate(logits), {k: np.concatenate(v) for k, v in chunks.items()})
