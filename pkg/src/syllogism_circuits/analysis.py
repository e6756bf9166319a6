"""QK/OV weight analyses, logit lens, contribution scatters, head labels and
attention-pattern diagnostics.

Weight-space analyses (QK scores, OV slates) use token embeddings only, without
positional embeddings or LayerNorm; cache-based ones use real forward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import SyllogismDataset
from .model import (
    ActivationCache,
    ComponentId,
    HookSite,
    ModelWeights,
    all_heads,
    forward_hooked,
    layer_norm,
    mlp,
    run_batched,
)
from .tokenizer import Tokenizer


class AnalysisError(ValueError):
    pass


def _token_strs(tokenizer: Tokenizer | None, ids) -> list[str]:
    if tokenizer is None:
        return [str(int(i)) for i in ids]
    return [tokenizer.token_str(int(i)).strip() or tokenizer.token_str(int(i)) for i in ids]


# -- QK ----------------------------------------------------------------------


@dataclass
class QKScoreMatrix:
    head: ComponentId
    tokens: list[int]
    token_strs: list[str]
    raw: np.ndarray  # (query, key), scaled by 1/sqrt(d_head)
    scores: np.ndarray  # raw divided by its largest magnitude
    mode: str = "weights"

    def pairs(self) -> list[tuple[str, str, float, int, int]]:
        """All (query, key, score, qpos, kpos) entries with a finite score, best first.

        In ``weights`` mode the score depends only on the token pair, so repeated
        pairs are reported once (first occurrence).
        """
        out = []
        seen = set()
        T = len(self.tokens)
        for i in range(T):
            for j in range(T):
                s = self.scores[i, j]
                if not np.isfinite(s):
                    continue
                if self.mode == "weights":
                    key = (self.tokens[i], self.tokens[j])
                    if key in seen:
                        continue
                    seen.add(key)
                out.append((self.token_strs[i], self.token_strs[j], float(s), i, j))
        out.sort(key=lambda p: (-p[2], p[3], p[4]))
        return out


def qk_prompt_matrix(
    weights: ModelWeights,
    comp: ComponentId,
    tokens,
    tokenizer: Tokenizer | None = None,
    mode: str = "weights",
) -> QKScoreMatrix:
    """Query-key scores of one head over every token pair of a prompt.

    ``weights``: the bilinear form of raw token embeddings through ``W_Q W_K^T``,
    no causal mask.  ``pattern``: pre-softmax scores from a real forward pass
    (causal, with positions and LayerNorm); masked pairs are NaN.
    """
    toks = [int(t) for t in tokens]
    l, h = comp.layer, comp.head
    if mode == "weights":
        X = weights.W_E[toks].astype(np.float64)
        raw = (X @ weights.W_Q[l, h]) @ (X @ weights.W_K[l, h]).T / math.sqrt(weights.cfg.d_head)
    elif mode == "pattern":
        _, cache = forward_hooked(weights, np.array(toks), cache_sites={"attn_scores"})
        raw = cache[HookSite(l, "attn_scores", h)].astype(np.float64)
        raw = np.where(np.isfinite(raw), raw, np.nan)
    else:
        raise AnalysisError(f"unknown QK mode {mode!r}")
    peak = np.nanmax(np.abs(raw)) if np.isfinite(raw).any() else 0.0
    scores = raw / peak if peak > 0 else np.zeros_like(raw)
    return QKScoreMatrix(comp, toks, _token_strs(tokenizer, toks), raw, scores, mode)


def top_qk_pairs(matrix: QKScoreMatrix, k: int) -> list[tuple[str, str, float]]:
    pairs = matrix.pairs()
    if k > len(pairs):
        raise AnalysisError(f"k={k} exceeds the number of token pairs ({len(pairs)})")
    return [(q, key, s) for q, key, s, _, _ in pairs[:k]]


# -- OV ----------------------------------------------------------------------


@dataclass
class TokenLogitSlate:
    source: str
    stage: str
    top: list[tuple[str, int, float]]
    bottom: list[tuple[str, int, float]]
    logits: np.ndarray = field(repr=False)

    def top_ids(self) -> list[int]:
        return [i for _, i, _ in self.top]

    def bottom_ids(self) -> list[int]:
        return [i for _, i, _ in self.bottom]

    def rank(self, token_id: int) -> int:
        """0-based rank of a token by descending logit."""
        return int((self.logits > self.logits[token_id]).sum())

    def to_json(self) -> dict:
        return {"source": self.source, "stage": self.stage,
                "top": [list(t) for t in self.top], "bottom": [list(t) for t in self.bottom]}


def _slate(logits: np.ndarray, source: str, stage: str, k: int, tokenizer) -> TokenLogitSlate:
    k = min(k, len(logits) // 2)
    order = np.argsort(-logits, kind="stable")
    top = order[:k]
    # taken from the same ordering so the two lists stay disjoint under ties
    bottom = order[::-1][:k]
    names = lambda ids: [tokenizer.token_str(int(i)) if tokenizer else str(int(i)) for i in ids]
    return TokenLogitSlate(
        source, stage,
        [(s, int(i), float(logits[i])) for s, i in zip(names(top), top)],
        [(s, int(i), float(logits[i])) for s, i in zip(names(bottom), bottom)],
        logits,
    )


def extended_embedding(weights: ModelWeights, token_id: int) -> np.ndarray:
    """Token embedding plus MLP0 applied to it (through MLP0's LayerNorm)."""
    x = weights.W_E[token_id].astype(np.float32)
    _, out = mlp(weights, 0, x)
    return x + out


def ov_vector(weights: ModelWeights, comp: ComponentId, token_id: int, extended: bool = True) -> np.ndarray:
    x = extended_embedding(weights, token_id) if extended else weights.W_E[token_id]
    return x @ weights.W_V[comp.layer, comp.head] @ weights.W_O[comp.layer, comp.head]


def ov_extended_logits(
    weights: ModelWeights,
    comp: ComponentId,
    source_token: int,
    k: int = 10,
    tokenizer: Tokenizer | None = None,
    extended: bool = True,
) -> TokenLogitSlate:
    v = ov_vector(weights, comp, source_token, extended)
    src = tokenizer.token_str(source_token) if tokenizer else str(source_token)
    return _slate(v @ weights.W_U, src, f"after-OV {comp}", k, tokenizer)


def trace_ov_through_mlp(
    weights: ModelWeights,
    comp: ComponentId,
    mlp_layer: int,
    source_token: int,
    k: int = 10,
    tokenizer: Tokenizer | None = None,
    extended: bool = True,
) -> TokenLogitSlate:
    """After-OV vector plus the given MLP's response to it, unembedded."""
    if mlp_layer < comp.layer:
        raise AnalysisError(f"MLP layer {mlp_layer} is upstream of head {comp}")
    v = ov_vector(weights, comp, source_token, extended)
    _, out = mlp(weights, mlp_layer, v)
    src = tokenizer.token_str(source_token) if tokenizer else str(source_token)
    return _slate((v + out) @ weights.W_U, src, f"after-MLP-layer-{mlp_layer}", k, tokenizer)


# -- logit lens --------------------------------------------------------------

_LENS_SITES = {"resid_pre", "resid_mid", "resid_post", "attn_out", "mlp_out", "head_result"}


def logit_lens(
    weights: ModelWeights,
    cache: ActivationCache,
    position: int,
    through,
    k: int = 10,
    tokenizer: Tokenizer | None = None,
) -> TokenLogitSlate:
    """Final LayerNorm and unembedding applied to one intermediate vector.

    ``through`` is a ComponentId (its residual write) or a HookSite naming a
    residual-stream snapshot.  A batched cache uses its first prompt.
    """
    if isinstance(through, ComponentId):
        if through.kind == "head":
            key = HookSite(through.layer, "head_result", through.head)
        elif through.kind == "mlp":
            key = HookSite(through.layer, "mlp_out")
        else:
            key = HookSite(0, "resid_pre")
    elif isinstance(through, HookSite):
        key = through
        if key.site not in _LENS_SITES:
            raise AnalysisError(f"logit lens is not defined for site {key.site!r}")
    else:
        raise AnalysisError(f"invalid logit-lens target {through!r}")
    vec = cache[key]
    if cache.batched:
        vec = vec[0]
    x = layer_norm(vec[position], weights.lnf_w, weights.lnf_b, weights.cfg.layernorm_epsilon)
    return _slate(x @ weights.W_U, str(key), f"lens@{position}", k, tokenizer)


# -- contribution scatter ----------------------------------------------------


@dataclass
class HeadRuns:
    """Final-position attention rows and head outputs for every head, per prompt."""

    tokens: np.ndarray  # (N, T)
    pattern_last: np.ndarray  # (N, L, H, T)
    result_last: np.ndarray  # (N, L, H, d)


def collect_head_runs(weights: ModelWeights, dataset: SyllogismDataset, batch_size: int = 32) -> HeadRuns:
    runs = run_batched(weights, dataset.clean, cache_sites={"attn_pattern", "head_result"},
                       batch_size=batch_size, last_only=True)
    L = weights.cfg.n_layers
    pat = np.stack([runs.sites[(l, "attn_pattern")] for l in range(L)], axis=1)
    res = np.stack([runs.sites[(l, "head_result")] for l in range(L)], axis=1)
    return HeadRuns(dataset.clean, pat, res)


def _target_ids(dataset: SyllogismDataset, target) -> np.ndarray:
    if target == "incorrect":
        return dataset.incorrect_ids
    if target == "correct":
        return dataset.correct_ids
    if isinstance(target, (int, np.integer)):
        return np.full(len(dataset), int(target))
    raise AnalysisError(f"target must be 'correct', 'incorrect' or a token id, got {target!r}")


def attention_to_token(runs: HeadRuns, target_ids: np.ndarray, exclude_last: bool = True) -> np.ndarray:
    """Final-position attention mass on the target token's positions, (N, L, H)."""
    mask = runs.tokens == target_ids[:, None]
    if exclude_last:
        mask[:, -1] = False
    return np.einsum("nlht,nt->nlh", runs.pattern_last, mask.astype(np.float32))


@dataclass
class Scatter:
    head: ComponentId
    attn: np.ndarray
    contribution: np.ndarray
    r: float
    degenerate: bool

    def rows(self):
        return [(i, float(a), float(c)) for i, (a, c) in enumerate(zip(self.attn, self.contribution))]


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0, True
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt((xc @ xc) * (yc @ yc))
    if denom == 0:
        return 0.0, True
    return float(xc @ yc / denom), False


def head_contribution_scatter(
    weights: ModelWeights,
    comp: ComponentId,
    dataset: SyllogismDataset,
    target="incorrect",
    runs: HeadRuns | None = None,
) -> Scatter:
    """Per prompt: attention on the target token vs ``<head output, W_U[target]>``."""
    ids = _target_ids(dataset, target)
    present = (dataset.clean[:, :-1] == ids[:, None]).any(axis=1)
    if not present.all():
        bad = int(np.flatnonzero(~present)[0])
        raise AnalysisError(f"target token {int(ids[bad])} absent from instance {bad}")
    runs = runs or collect_head_runs(weights, dataset)
    attn = attention_to_token(runs, ids)[:, comp.layer, comp.head]
    out = runs.result_last[:, comp.layer, comp.head]  # (N, d)
    contrib = np.einsum("nd,dn->n", out, weights.W_U[:, ids])
    r, degenerate = pearson(attn, contrib)
    return Scatter(comp, attn, contrib, r, degenerate)


# -- classification ----------------------------------------------------------


class HeadLabel(str, Enum):
    TRUTH = "TruthHead"
    NEGATIVE_TRUTH = "NegativeTruthHead"
    INHIBITION = "CorrectTruthInhibition"
    REINFORCEMENT = "CorrectTruthReinforcement"
    UNCLASSIFIED = "Unclassified"


@dataclass(frozen=True)
class Thresholds:
    attn: float = 0.3
    r: float = 0.35
    k: int = 10


@dataclass
class HeadClassification:
    head: ComponentId
    label: HeadLabel
    evidence: dict

    def to_json(self) -> dict:
        return {"head": str(self.head), "label": self.label.value, "evidence": self.evidence}


def label_from_evidence(ev: dict, th: Thresholds = Thresholds()) -> HeadLabel:
    """Decision rules, checked in order:

    1. TruthHead: SS attention on the stated truth token > attn and the OV slate
       of that token keeps it in the top k.
    2. NegativeTruthHead: OS attention on the stated truth token > attn and the
       OV slate puts it in the bottom k.
    3. CorrectTruthInhibition / Reinforcement: CS attention on the incorrect
       token > attn and the attention/contribution correlation r > r (or < -r).
    """
    ss, os_, cs = ev.get("attn_ss"), ev.get("attn_os"), ev.get("attn_cs_incorrect")
    if ss is not None and ss > th.attn and ev["ov_in_top"]:
        return HeadLabel.TRUTH
    if os_ is not None and os_ > th.attn and ev["ov_in_bottom"]:
        return HeadLabel.NEGATIVE_TRUTH
    if cs is not None and cs > th.attn:
        r = ev["r_cs"]
        if r > th.r:
            return HeadLabel.INHIBITION
        if r < -th.r:
            return HeadLabel.REINFORCEMENT
    return HeadLabel.UNCLASSIFIED


def _stated_ids(dataset: SyllogismDataset) -> np.ndarray:
    return np.array([dataset.pair.id_of(i.truth_assignment["T1"]) for i in dataset.instances])


def classify_heads(
    weights: ModelWeights,
    dataset_ss: SyllogismDataset | None,
    dataset_os: SyllogismDataset | None,
    dataset_cs: SyllogismDataset | None,
    thresholds: Thresholds = Thresholds(),
) -> list[HeadClassification]:
    pairs = {d.pair for d in (dataset_ss, dataset_os, dataset_cs) if d is not None}
    if len(pairs) != 1:
        raise AnalysisError("classification datasets must share one binary pair")
    pair = pairs.pop()
    cfg = weights.cfg
    att_ss = att_os = att_cs = r_cs = None
    if dataset_ss is not None:
        att_ss = attention_to_token(collect_head_runs(weights, dataset_ss), _stated_ids(dataset_ss)).mean(0)
    if dataset_os is not None:
        att_os = attention_to_token(collect_head_runs(weights, dataset_os), _stated_ids(dataset_os)).mean(0)
    if dataset_cs is not None:
        runs_cs = collect_head_runs(weights, dataset_cs)
        ids = dataset_cs.incorrect_ids
        att = attention_to_token(runs_cs, ids)
        att_cs = att.mean(0)
        contrib = np.einsum("nlhd,dn->nlh", runs_cs.result_last, weights.W_U[:, ids])
        r_cs = np.zeros((cfg.n_layers, cfg.n_heads))
        for l in range(cfg.n_layers):
            for h in range(cfg.n_heads):
                r_cs[l, h], _ = pearson(att[:, l, h], contrib[:, l, h])
    out = []
    for comp in all_heads(cfg):
        l, h = comp.layer, comp.head
        slate = ov_extended_logits(weights, comp, pair.positive_id, thresholds.k)
        rank = slate.rank(pair.positive_id)
        ev = {
            "attn_ss": None if att_ss is None else float(att_ss[l, h]),
            "attn_os": None if att_os is None else float(att_os[l, h]),
            "attn_cs_incorrect": None if att_cs is None else float(att_cs[l, h]),
            "r_cs": None if r_cs is None else float(r_cs[l, h]),
            "ov_rank": rank,
            "ov_in_top": rank < thresholds.k,
            "ov_in_bottom": rank >= cfg.n_vocab - thresholds.k,
        }
        out.append(HeadClassification(comp, label_from_evidence(ev, thresholds), ev))
    return out


# -- attention diagnostics ---------------------------------------------------


def repeated_random_probe(n_vocab: int, half_len: int, seed: int = 0, batch: int = 1, exclude=()) -> np.ndarray:
    """Batch of ``[r, r]`` sequences where ``r`` has ``half_len`` distinct random tokens."""
    rng = np.random.default_rng(seed)
    pool = np.setdiff1d(np.arange(n_vocab), np.asarray(list(exclude), dtype=np.int64))
    rows = []
    for _ in range(batch):
        r = rng.choice(pool, size=half_len, replace=False)
        rows.append(np.concatenate([r, r]))
    return np.array(rows, dtype=np.int64)


def _diagnostic_masks(tokens: np.ndarray):
    """Per prompt (T, T) masks for previous-token, duplicate-token and induction targets."""
    T = tokens.shape[-1]
    eq = tokens[..., :, None] == tokens[..., None, :]  # (N, q, k)
    lower = np.tril(np.ones((T, T), dtype=bool), -1)
    dup = eq & lower
    prev = np.zeros((T, T), dtype=bool)
    prev[np.arange(1, T), np.arange(T - 1)] = True
    # key j is an induction target of query i when token j-1 equals token i and j-1 < i
    ind = np.zeros_like(eq)
    ind[..., :, 1:] = eq[..., :, :-1] & np.tril(np.ones((T, T - 1), dtype=bool), -1)
    return prev, dup, ind


def attention_diagnostics_all(weights: ModelWeights, probe) -> dict[ComponentId, dict[str, float]]:
    probe = np.atleast_2d(np.asarray(probe, dtype=np.int64))
    if probe.shape[1] < 3:
        raise AnalysisError("probe too short: need at least 3 tokens")
    _, cache = forward_hooked(weights, probe, cache_sites={"attn_pattern"})
    prev, dup, ind = _diagnostic_masks(probe)
    has_dup = dup.any(-1)  # (N, q)
    out = {}
    for l in range(weights.cfg.n_layers):
        pat = cache.stacked(l, "attn_pattern")  # (N, H, q, k)
        prev_s = (pat * prev).sum(-1)[..., 1:].mean(axis=(0, 2))
        dup_mass = (pat * dup[:, None]).sum(-1)  # (N, H, q)
        ind_mass = (pat * ind[:, None]).sum(-1)
        n_rep = has_dup.sum()
        for h in range(weights.cfg.n_heads):
            if n_rep:
                d = float(dup_mass[:, h][has_dup].mean())
                i = float(ind_mass[:, h][has_dup].mean())
            else:
                d = i = 0.0
            out[ComponentId("head", l, h)] = {
                "prev_token_score": float(prev_s[h]),
                "duplicate_token_score": d,
                "induction_score": i,
            }
    return out


def attention_diagnostics(weights: ModelWeights, comp: ComponentId, probe) -> dict[str, float]:
    return attention_diagnostics_all(weights, probe)[comp]


def copy_score(weights: ModelWeights, comp: ComponentId, token_ids, k: int = 5, extended: bool = True) -> float:
    """Fraction of source tokens that land in the top k of their own OV slate."""
    hits = [ov_extended_logits(weights, comp, int(t), k, extended=extended).rank(int(t)) < k for t in token_ids]
    return float(np.mean(hits))


def suppression_score(weights: ModelWeights, comp: ComponentId, token_ids, k: int = 5, extended: bool = True) -> float:
    """Fraction of source tokens that land in the bottom k of their own OV slate."""
    V = weights.cfg.n_vocab
    hits = [ov_extended_logits(weights, comp, int(t), k, extended=extended).rank(int(t)) >= V - k for t in token_ids]
    return float(np.mean(hits))


__all__ = [
    "QKScoreMatrix", "qk_prompt_matrix", "top_qk_pairs", "TokenLogitSlate", "ov_extended_logits",
    "trace_ov_through_mlp", "logit_lens", "head_contribution_scatter", "classify_heads",
    "label_from_evidence", "attention_diagnostics", "attention_diagnostics_all", "repeated_random_probe",
    "Thresholds", "HeadLabel", "HeadClassification", "copy_score", "suppression_score",
]
