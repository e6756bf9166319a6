import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracle import qk_scores_loop

from syllogism_circuits.analysis import (
    AnalysisError,
    HeadLabel,
    Thresholds,
    attention_diagnostics,
    attention_diagnostics_all,
    classify_heads,
    copy_score,
    head_contribution_scatter,
    label_from_evidence,
    logit_lens,
    ov_extended_logits,
    ov_vector,
    pearson,
    qk_prompt_matrix,
    repeated_random_probe,
    suppression_score,
    top_qk_pairs,
    trace_ov_through_mlp,
)
from syllogism_circuits.data import generate, parse_pair
from syllogism_circuits.model import HookSite, forward_hooked, forward_with_cache, head
from syllogism_circuits.toy import (
    INDUCTION_HEAD,
    PREV_TOKEN_HEAD,
    ToySpec,
    build_toy,
    copy_head,
    suppression_head,
)

PROMPT = [5, 90, 17, 90, 300, 5, 41]


def _replace(w, **arrays):
    return dataclasses.replace(w, **{k: v.copy() for k, v in arrays.items()})


# -- QK ----------------------------------------------------------------------


def test_qk_weights_match_loop_oracle(toy):
    m = qk_prompt_matrix(toy, head(1, 2), PROMPT)
    ref = qk_scores_loop(toy.W_E, toy.W_Q[1, 2], toy.W_K[1, 2], PROMPT)
    np.testing.assert_allclose(m.raw, ref, rtol=1e-5, atol=1e-6)
    assert np.abs(m.scores).max() == pytest.approx(1.0)


def test_qk_zero_form_gives_zero_scores(toy):
    w = _replace(toy, W_Q=np.zeros_like(toy.W_Q))
    m = qk_prompt_matrix(w, head(0, 0), PROMPT)
    assert not m.raw.any() and not m.scores.any()


@settings(max_examples=25, deadline=None)
@given(c=st.floats(0.1, 10.0), h=st.integers(0, 3))
def test_qk_is_bilinear_in_embeddings(toy, c, h):
    base = qk_prompt_matrix(toy, head(0, h), PROMPT)
    scaled = qk_prompt_matrix(_replace(toy, W_E=toy.W_E * c), head(0, h), PROMPT)
    np.testing.assert_allclose(scaled.raw, base.raw * c * c, rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(scaled.scores, base.scores, atol=1e-5)


def test_qk_pattern_mode_is_masked_forward_scores(toy):
    m = qk_prompt_matrix(toy, head(1, 1), PROMPT, mode="pattern")
    _, cache = forward_with_cache(toy, PROMPT)
    s = cache[HookSite(1, "attn_scores", 1)]
    tri = np.tril_indices(len(PROMPT))
    np.testing.assert_allclose(m.raw[tri], s[tri], atol=1e-6)
    assert np.isnan(m.raw[np.triu_indices(len(PROMPT), 1)]).all()
    assert len(m.pairs()) == len(PROMPT) * (len(PROMPT) + 1) // 2


def test_top_pairs_dedupe_and_bounds(toy):
    m = qk_prompt_matrix(toy, head(0, 3), PROMPT)
    distinct = len(set(PROMPT)) ** 2
    pairs = m.pairs()
    assert len(pairs) == distinct
    top = top_qk_pairs(m, distinct)
    assert [s for _, _, s in top] == sorted((s for _, _, s in top), reverse=True)
    assert top[0][2] == pytest.approx(m.scores.max())
    with pytest.raises(AnalysisError, match="exceeds"):
        top_qk_pairs(m, distinct + 1)
    with pytest.raises(AnalysisError):
        qk_prompt_matrix(toy, head(0, 0), PROMPT, mode="other")


# -- OV and MLP trace --------------------------------------------------------


def test_slates_are_disjoint_and_sorted(toy):
    s = ov_extended_logits(toy, head(1, 0), 42, k=10)
    assert not set(s.top_ids()) & set(s.bottom_ids())
    vals = [v for _, _, v in s.top]
    assert vals == sorted(vals, reverse=True)
    assert s.rank(s.top_ids()[0]) == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_copy_and_suppression(tok, seed):
    w, _ = build_toy(ToySpec(seed=seed, planted=("copy", "suppression")), tok)
    ids = list(range(0, w.cfg.n_vocab, 7))
    assert copy_score(w, copy_head(2), ids) > 0.5
    assert suppression_score(w, suppression_head(2), ids) > 0.5
    assert suppression_score(w, copy_head(2), ids) == 0.0
    s = ov_extended_logits(w, suppression_head(2), 100)
    assert 100 in s.bottom_ids()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_heads_do_not_look_like_copiers(tok, seed):
    w, _ = build_toy(ToySpec(seed=seed), tok)
    ids = list(range(0, w.cfg.n_vocab, 7))
    assert max(copy_score(w, head(l, h), ids) for l in range(2) for h in range(4)) < 0.5


def test_trace_matches_injection_oracle(toy):
    comp, tok_id = head(0, 2), 77
    s = trace_ov_through_mlp(toy, comp, 1, tok_id, k=5)
    inject = ov_vector(toy, comp, tok_id)[None]
    _, cache = forward_hooked(toy, [tok_id], {HookSite(1, "resid_mid"): inject})
    ref = cache[HookSite(1, "resid_post")][0] @ toy.W_U
    np.testing.assert_allclose(s.logits, ref, rtol=1e-5, atol=1e-5)


def test_trace_with_silent_mlp_equals_ov_slate(toy):
    w = _replace(toy, W_out=np.zeros_like(toy.W_out), b_out=np.zeros_like(toy.b_out))
    a = trace_ov_through_mlp(w, head(0, 1), 1, 12)
    b = ov_extended_logits(w, head(0, 1), 12)
    np.testing.assert_array_equal(a.logits, b.logits)
    assert a.top_ids() == b.top_ids()


def test_trace_rejects_upstream_mlp(toy):
    with pytest.raises(AnalysisError, match="upstream"):
        trace_ov_through_mlp(toy, head(1, 0), 0, 12)


# -- logit lens --------------------------------------------------------------


def test_lens_on_final_residual_is_the_model(toy):
    logits, cache = forward_with_cache(toy, PROMPT)
    for pos in (0, 3, len(PROMPT) - 1):
        s = logit_lens(toy, cache, pos, HookSite(1, "resid_post"))
        np.testing.assert_allclose(s.logits, logits[pos], atol=1e-5)
        assert s.top_ids()[0] == int(np.argmax(logits[pos]))


def test_lens_of_zero_vector_is_prompt_independent(toy):
    w = _replace(toy, W_O=toy.W_O.copy())
    w.W_O[1, 3] = 0.0
    slates = [logit_lens(w, forward_with_cache(w, p)[1], -1, head(1, 3)) for p in ([1, 2, 3], [200, 9])]
    assert slates[0].top_ids() == slates[1].top_ids()
    np.testing.assert_allclose(slates[0].logits, w.lnf_b @ w.W_U, atol=1e-5)


def test_lens_rejects_non_residual_site(toy):
    _, cache = forward_with_cache(toy, PROMPT)
    with pytest.raises(AnalysisError):
        logit_lens(toy, cache, 0, HookSite(0, "attn_pattern", 0))


# -- scatter -----------------------------------------------------------------


@pytest.fixture(scope="module")
def cs(tok):
    return generate(tok, "cs", parse_pair(tok, "true/false"), 24, seed=0)


def test_pearson_affine_invariance_and_degenerate():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    r, flag = pearson(x, y)
    assert not flag and r == pytest.approx(np.corrcoef(x, y)[0, 1])
    assert pearson(3 * x + 2, 0.5 * y - 7)[0] == pytest.approx(r)
    assert pearson(x, np.full(50, 1.5)) == (0.0, True)


def test_scatter_values_match_forward(toy, cs):
    sc = head_contribution_scatter(toy, head(1, 1), cs)
    _, cache = forward_with_cache(toy, cs.clean)
    out = cache[HookSite(1, "head_result", 1)][:, -1]
    ref = np.einsum("nd,dn->n", out, toy.W_U[:, cs.incorrect_ids])
    np.testing.assert_allclose(sc.contribution, ref, rtol=1e-5, atol=1e-5)
    assert ((sc.attn >= 0) & (sc.attn <= 1)).all()


def test_silent_head_scatter_is_degenerate(toy, cs):
    w = _replace(toy, W_O=toy.W_O.copy())
    w.W_O[0, 0] = 0.0
    sc = head_contribution_scatter(w, head(0, 0), cs)
    assert sc.degenerate and sc.r == 0.0


def test_scatter_rejects_absent_target(toy, cs):
    with pytest.raises(AnalysisError, match="absent"):
        head_contribution_scatter(toy, head(0, 0), cs, target=cs.clean.max() + 1)


# -- classification ----------------------------------------------------------


def _ev(**kw):
    base = dict(attn_ss=0.0, attn_os=0.0, attn_cs_incorrect=0.0, r_cs=0.0, ov_in_top=False, ov_in_bottom=False)
    base.update(kw)
    return base


@pytest.mark.parametrize(
    "ev, label",
    [
        (_ev(attn_ss=0.5, ov_in_top=True), HeadLabel.TRUTH),
        (_ev(attn_ss=0.5), HeadLabel.UNCLASSIFIED),
        (_ev(attn_ss=0.3, ov_in_top=True), HeadLabel.UNCLASSIFIED),
        (_ev(attn_os=0.4, ov_in_bottom=True), HeadLabel.NEGATIVE_TRUTH),
        (_ev(attn_ss=0.4, ov_in_top=True, attn_os=0.4, ov_in_bottom=True), HeadLabel.TRUTH),
        (_ev(attn_cs_incorrect=0.31, r_cs=0.4), HeadLabel.INHIBITION),
        (_ev(attn_cs_incorrect=0.31, r_cs=-0.4), HeadLabel.REINFORCEMENT),
        (_ev(attn_cs_incorrect=0.31, r_cs=0.2), HeadLabel.UNCLASSIFIED),
        (_ev(attn_cs_incorrect=0.1, r_cs=0.9), HeadLabel.UNCLASSIFIED),
        (_ev(attn_ss=None, attn_os=None, attn_cs_incorrect=None, r_cs=None), HeadLabel.UNCLASSIFIED),
    ],
)
def test_label_rules(ev, label):
    assert label_from_evidence(ev) == label


def test_thresholds_are_configurable():
    ev = _ev(attn_cs_incorrect=0.25, r_cs=0.3)
    assert label_from_evidence(ev) == HeadLabel.UNCLASSIFIED
    assert label_from_evidence(ev, Thresholds(attn=0.2, r=0.25)) == HeadLabel.INHIBITION


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_model_heads_are_unclassified(tok, seed):
    # regression baseline: every head of a seeded random toy is Unclassified
    w, _ = build_toy(ToySpec(seed=seed), tok)
    pair = parse_pair(tok, "true/false")
    res = classify_heads(w, *(generate(tok, k, pair, 40, seed=0) for k in ("ss", "os", "cs")))
    assert len(res) == 8
    assert all(r.label == HeadLabel.UNCLASSIFIED for r in res)
    assert all(0.0 <= r.evidence["attn_ss"] <= 1.0 for r in res)


def test_classify_requires_one_pair(toy, tok):
    a = generate(tok, "ss", parse_pair(tok, "true/false"), 4)
    b = generate(tok, "os", parse_pair(tok, "right/wrong"), 4)
    with pytest.raises(AnalysisError, match="pair"):
        classify_heads(toy, a, b, None)


# -- attention diagnostics ---------------------------------------------------


def test_probe_shape_and_distinct_halves():
    p = repeated_random_probe(400, 10, seed=3, batch=4, exclude=[0, 1])
    assert p.shape == (4, 20)
    assert (p[:, :10] == p[:, 10:]).all()
    assert all(len(set(r[:10])) == 10 for r in p)
    assert not np.isin(p, [0, 1]).any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_induction_and_prev_token(tok, seed):
    w, _ = build_toy(ToySpec(seed=seed, planted=("induction",)), tok)
    probe = repeated_random_probe(w.cfg.n_vocab, 12, seed=seed, batch=4)
    diag = attention_diagnostics_all(w, probe)
    assert diag[PREV_TOKEN_HEAD]["prev_token_score"] > 0.9
    assert diag[INDUCTION_HEAD]["induction_score"] > 0.5
    others = [v["induction_score"] for c, v in diag.items() if c != INDUCTION_HEAD]
    assert max(others) < 0.5


def test_diagnostics_without_repeats_are_zero(toy):
    d = attention_diagnostics(toy, head(1, 0), np.arange(10, 30))
    assert d["duplicate_token_score"] == 0.0 and d["induction_score"] == 0.0
    assert 0.0 <= d["prev_token_score"] <= 1.0


def test_diagnostics_reject_short_probe(toy):
    with pytest.raises(AnalysisError, match="too short"):
        attention_diagnostics(toy, head(0, 0), [4, 5])
