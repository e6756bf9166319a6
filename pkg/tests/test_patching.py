import csv

import numpy as np
import pytest

from syllogism_circuits.data import generate, parse_pair
from syllogism_circuits.model import (
    EMBED,
    HookSite,
    all_heads,
    all_mlps,
    final_logits,
    forward_hooked,
    forward_with_cache,
    head,
    layer_norm,
    mlp_id,
    softmax,
)
from syllogism_circuits.patching import (
    CSV_COLUMNS,
    EffectMatrix,
    PatchingError,
    direct_effect_sweep,
    heatmap_svg,
    mean_cache,
    mlp_effect_modes,
    path_patch_sweep,
    read_grid_csv,
    resolve_source,
    write_grid_csv,
)


@pytest.fixture(scope="module")
def ds(tok):
    return generate(tok, "os", parse_pair(tok, "true/false"), 12, seed=0)


@pytest.fixture(scope="module")
def mean(toy, ds):
    return mean_cache(toy, ds)


def _ld(logits, ds):
    idx = np.arange(len(ds))
    return logits[idx, -1, ds.correct_ids].astype(np.float64) - logits[idx, -1, ds.incorrect_ids]


def _frozen(cache, cfg):
    reps = {}
    for l in range(cfg.n_layers):
        for h in range(cfg.n_heads):
            reps[HookSite(l, "head_result", h)] = cache[HookSite(l, "head_result", h)].copy()
        reps[HookSite(l, "mlp_out")] = cache[HookSite(l, "mlp_out")].copy()
    return reps


def test_mean_cache_is_positionwise_mean(toy, ds, mean):
    _, cache = forward_with_cache(toy, ds.clean)
    for key in (HookSite(0, "resid_pre"), HookSite(1, "head_result", 2), HookSite(1, "mlp_out"), HookSite(0, "attn_pattern", 1)):
        np.testing.assert_allclose(mean[key], cache[key].mean(0), atol=1e-6)


def test_mean_of_identical_prompts_is_clean(toy, ds):
    same = np.repeat(ds.clean[:1], 4, axis=0)
    m = mean_cache(toy, same)
    _, cache = forward_with_cache(toy, same[0])
    np.testing.assert_allclose(m[HookSite(1, "mlp_out")], cache[HookSite(1, "mlp_out")], atol=1e-6)


@pytest.mark.parametrize("sweep", ["direct", "q", "k", "v", "mlp-in", "mlp-attn", "mlp-noattn"])
def test_self_patch_is_zero(toy, ds, sweep):
    if sweep == "direct":
        m = direct_effect_sweep(toy, ds, source="clean")
    elif sweep in ("q", "k", "v"):
        m = path_patch_sweep(toy, ds, head(1, 3), sweep, source="clean")
    elif sweep == "mlp-in":
        m = path_patch_sweep(toy, ds, mlp_id(1), "in", source="clean")
    else:
        m = mlp_effect_modes(toy, ds, with_attention=sweep == "mlp-attn", source="clean")
    assert max(abs(d) for d, _ in m.entries.values()) <= 1e-6


@pytest.mark.parametrize("source", ["dataset-mean", "corrupted-prompt"])
def test_direct_effect_matches_two_path_oracle(toy, ds, mean, source):
    cfg = toy.cfg
    m = direct_effect_sweep(toy, ds, source=source, mean=mean)
    clean_logits, cache = forward_with_cache(toy, ds.clean)
    _, cor = forward_with_cache(toy, ds.corrupted)
    ald_clean = _ld(clean_logits, ds).mean()
    assert m.ald_clean == pytest.approx(ald_clean, abs=1e-5)
    for comp in [head(0, 1), head(1, 2), mlp_id(0), mlp_id(1)]:
        reps = _frozen(cache, cfg)
        key = HookSite(comp.layer, "head_result", comp.head) if comp.kind == "head" else HookSite(comp.layer, "mlp_out")
        src = mean[key][-1] if source == "dataset-mean" else cor[key][:, -1]
        reps[key][:, -1] = src
        lg, _ = forward_hooked(toy, ds.clean, reps)
        ald = _ld(lg, ds).mean()
        assert m.ald_patched(comp) == pytest.approx(ald, abs=1e-5)
        assert m.delta(comp) == pytest.approx((ald - ald_clean) / abs(ald_clean), abs=1e-4)


def _head_oracle(w, l, h, q_in, k_in, v_in):
    q = q_in @ w.W_Q[l, h] + w.b_Q[l, h]
    k = k_in @ w.W_K[l, h] + w.b_K[l, h]
    v = v_in @ w.W_V[l, h] + w.b_V[l, h]
    T = q.shape[1]
    s = np.einsum("bqe,bke->bqk", q, k) / np.sqrt(w.cfg.d_head)
    s = np.where(np.tril(np.ones((T, T), bool)), s, -np.inf)
    return (softmax(s) @ v) @ w.W_O[l, h]


@pytest.mark.parametrize("site", ["q", "k", "v"])
def test_head_path_patch_matches_oracle(toy, ds, mean, site):
    cfg = toy.cfg
    recv = head(1, 1)
    m = path_patch_sweep(toy, ds, recv, site, source="dataset-mean", mean=mean)
    assert set(m.entries) == {EMBED, *[head(0, h) for h in range(cfg.n_heads)], mlp_id(0)}
    _, cache = forward_with_cache(toy, ds.clean)
    final = cache[HookSite(1, "resid_post")][:, -1].astype(np.float64)
    clean_recv = cache[HookSite(1, "head_result", 1)][:, -1]
    for sender in [EMBED, head(0, 2), mlp_id(0)]:
        if sender == EMBED:
            key = HookSite(0, "resid_pre")
        elif sender.kind == "head":
            key = HookSite(0, "head_result", sender.head)
        else:
            key = HookSite(0, "mlp_out")
        resid = cache[HookSite(1, "resid_pre")] - cache[key] + mean[key]
        x = layer_norm(resid, toy.ln1_w[1], toy.ln1_b[1], cfg.layernorm_epsilon)
        ln = cache[HookSite(1, "ln1_out")]
        ins = [x if s == site else ln for s in "qkv"]
        new_recv = _head_oracle(toy, 1, 1, *ins)[:, -1]
        lg = final_logits(toy, final - clean_recv + new_recv)
        ld = lg[np.arange(len(ds)), ds.correct_ids] - lg[np.arange(len(ds)), ds.incorrect_ids]
        assert m.ald_patched(sender) == pytest.approx(ld.mean(), abs=1e-5)


def test_mlp_path_patch_matches_hooked_oracle(toy, ds, mean):
    cfg = toy.cfg
    m = path_patch_sweep(toy, ds, mlp_id(1), "in", source="dataset-mean", mean=mean)
    assert head(1, 0) in m.entries  # same-layer heads feed the MLP
    _, cache = forward_with_cache(toy, ds.clean)
    final = cache[HookSite(1, "resid_post")][:, -1].astype(np.float64)
    for sender in [head(0, 3), head(1, 2), mlp_id(0)]:
        reps = _frozen(cache, cfg)
        del reps[HookSite(1, "mlp_out")]
        key = HookSite(sender.layer, "head_result", sender.head) if sender.kind == "head" else HookSite(sender.layer, "mlp_out")
        reps[key] = np.broadcast_to(mean[key], cache[key].shape).copy()
        _, patched = forward_hooked(toy, ds.clean, reps)
        new_recv = patched[HookSite(1, "mlp_out")][:, -1]
        lg = final_logits(toy, final - cache[HookSite(1, "mlp_out")][:, -1] + new_recv)
        ld = lg[np.arange(len(ds)), ds.correct_ids] - lg[np.arange(len(ds)), ds.incorrect_ids]
        assert m.ald_patched(sender) == pytest.approx(ld.mean(), abs=1e-5)


def test_mlp_modes_match_hooked_oracle(toy, ds, mean):
    cfg = toy.cfg
    _, cache = forward_with_cache(toy, ds.clean)
    with_attn = mlp_effect_modes(toy, ds, with_attention=True, mean=mean)
    without = mlp_effect_modes(toy, ds, with_attention=False, mean=mean)
    key = HookSite(0, "mlp_out")
    reps = {key: mean[key]}
    lg, _ = forward_hooked(toy, ds.clean, reps)
    assert without.ald_patched(mlp_id(0)) == pytest.approx(_ld(lg, ds).mean(), abs=1e-5)
    for h in range(cfg.n_heads):
        reps[HookSite(1, "head_result", h)] = cache[HookSite(1, "head_result", h)]
    lg, _ = forward_hooked(toy, ds.clean, reps)
    assert with_attn.ald_patched(mlp_id(0)) == pytest.approx(_ld(lg, ds).mean(), abs=1e-5)


def test_last_mlp_modes_equal_direct_effect(toy, ds, mean):
    direct = direct_effect_sweep(toy, ds, components=[mlp_id(1)], mean=mean)
    for wa in (True, False):
        modes = mlp_effect_modes(toy, ds, with_attention=wa, mean=mean, layers=[1])
        assert modes.delta(mlp_id(1)) == pytest.approx(direct.delta(mlp_id(1)), abs=1e-5)


def test_order_violations(toy, ds):
    with pytest.raises(PatchingError, match="same component"):
        path_patch_sweep(toy, ds, head(1, 0), "q", senders=[head(1, 0)], source="clean")
    with pytest.raises(PatchingError, match="not upstream"):
        path_patch_sweep(toy, ds, head(0, 0), "q", senders=[head(1, 0)], source="clean")
    with pytest.raises(PatchingError, match="not upstream"):
        path_patch_sweep(toy, ds, head(1, 0), "q", senders=[head(1, 2)], source="clean")
    with pytest.raises(PatchingError, match="site"):
        path_patch_sweep(toy, ds, head(1, 0), "in", source="clean")
    with pytest.raises(PatchingError, match="out of range"):
        direct_effect_sweep(toy, ds, components=[head(5, 0)], source="clean")


def test_sources():
    assert resolve_source("mean") == "dataset-mean"
    assert resolve_source("corrupted") == "corrupted-prompt"
    with pytest.raises(PatchingError):
        resolve_source("random")


def test_effect_csv_schema_and_roundtrip(tmp_path, toy, ds, mean):
    m = direct_effect_sweep(toy, ds, mean=mean)
    m.to_csv(tmp_path / "e.csv")
    with open(tmp_path / "e.csv") as f:
        assert next(csv.reader(f)) == list(CSV_COLUMNS)
    back = EffectMatrix.from_csv(tmp_path / "e.csv")
    assert set(back.entries) == set(all_heads(toy.cfg) + all_mlps(toy.cfg))
    for c in back.entries:
        assert back.delta(c) == pytest.approx(m.delta(c), abs=1e-6)
    grid = m.head_grid(toy.cfg.n_layers, toy.cfg.n_heads)
    write_grid_csv(tmp_path / "g.csv", grid)
    np.testing.assert_allclose(read_grid_csv(tmp_path / "g.csv"), grid, atol=1e-6)


def test_ranking_helpers():
    m = EffectMatrix("direct-to-logits", "dataset-mean", 1.0)
    for i, d in enumerate([0.3, -0.5, -0.1, 0.9]):
        m.entries[head(0, i)] = (d, 1.0 + d)
    assert m.most_negative(2) == [head(0, 1), head(0, 2)]
    assert m.largest_abs(1) == [head(0, 3)]


def test_heatmap_svg(tmp_path):
    heatmap_svg(tmp_path / "h.svg", np.array([[0.5, -1.0], [0.0, 0.25]]), "demo")
    text = (tmp_path / "h.svg").read_text()
    assert text.lstrip().startswith("<?xml") and "<svg" in text
