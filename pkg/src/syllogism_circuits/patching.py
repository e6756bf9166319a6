"""Mean ablation and path patching.

Every effect is reported as ``(ALD_patched - ALD_clean) / |ALD_clean|``, so a
negative delta means the patched component was helping the correct answer.

Sources for the replacement activation:

* ``dataset-mean``     position-wise mean over the dataset's clean runs
* ``corrupted-prompt`` the same component on the aligned corrupted prompt
* ``clean``            the component's own clean activation (identity patch)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SyllogismDataset
from .metrics import logit_diffs
from .model import (
    EMBED,
    SITES,
    ComponentId,
    HookSite,
    ModelWeights,
    _HEAD_AXIS,
    all_heads,
    all_mlps,
    attention_head,
    component_output,
    forward_hooked,
    iter_batches,
    layer_norm,
    mlp,
    output_site,
)

SOURCES = ("dataset-mean", "corrupted-prompt", "clean")
_SOURCE_ALIASES = {"mean": "dataset-mean", "corrupted": "corrupted-prompt"}
MODES = ("direct-to-logits", "q-input", "k-input", "v-input", "mlp-in", "mlp-with-attn", "mlp-without-attn")
CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("component", "kind", "mode", "source", "delta", "ald_patched")


class PatchingError(ValueError):
    pass


def resolve_source(source: str) -> str:
    source = _SOURCE_ALIASES.get(source, source)
    if source not in SOURCES:
        raise PatchingError(f"unknown source {source!r}; choose from {SOURCES}")
    return source


class MeanCache:
    """Position-wise mean of every site over a dataset's clean runs (no batch axis)."""

    def __init__(self, data: dict[tuple, np.ndarray], n: int, n_heads: int):
        self._data = data
        self.n = n
        self.n_heads = n_heads

    def stacked(self, layer, name: str) -> np.ndarray:
        return self._data[(layer, name)]

    def __getitem__(self, key: HookSite) -> np.ndarray:
        arr = self._data[(key.layer, key.site)]
        if key.head is not None:
            arr = np.take(arr, key.head, axis=_HEAD_AXIS[key.site] - 1)
        return arr

    def __contains__(self, key: HookSite) -> bool:
        return (key.layer, key.site) in self._data

    def output(self, comp: ComponentId) -> np.ndarray:
        """Mean residual write of a component, (pos, d_model)."""
        if comp.kind == "embed":
            return self._data[(0, "resid_pre")]
        return self[output_site(comp)]


def mean_cache(weights: ModelWeights, dataset_or_tokens, sites=None, batch_size: int = 32) -> MeanCache:
    tokens = dataset_or_tokens.clean if isinstance(dataset_or_tokens, SyllogismDataset) else np.asarray(dataset_or_tokens)
    if tokens.ndim != 2 or len(tokens) == 0:
        raise PatchingError("mean cache needs a non-empty batch of equal-length prompts")
    keep = set(SITES) if sites is None else set(sites)
    sums: dict[tuple, np.ndarray] = {}
    for sl in iter_batches(len(tokens), batch_size):
        _, cache = forward_hooked(weights, tokens[sl], cache_sites=keep)
        for key, arr in cache._data.items():
            s = arr.sum(axis=0, dtype=np.float64)
            sums[key] = s if key not in sums else sums[key] + s
    n = len(tokens)
    return MeanCache({k: (v / n).astype(np.float32) for k, v in sums.items()}, n, weights.cfg.n_heads)


@dataclass
class EffectMatrix:
    mode: str
    source: str
    ald_clean: float
    entries: dict[ComponentId, tuple[float, float]] = field(default_factory=dict)  # delta, ald_patched
    receiver: ComponentId | None = None

    def delta(self, comp: ComponentId) -> float:
        return self.entries[comp][0]

    def ald_patched(self, comp: ComponentId) -> float:
        return self.entries[comp][1]

    def components(self, kind: str | None = None) -> list[ComponentId]:
        return [c for c in self.entries if kind is None or c.kind == kind]

    def most_negative(self, k: int, kind: str | None = None) -> list[ComponentId]:
        return sorted(self.components(kind), key=lambda c: self.entries[c][0])[:k]

    def largest_abs(self, k: int, kind: str | None = None) -> list[ComponentId]:
        return sorted(self.components(kind), key=lambda c: -abs(self.entries[c][0]))[:k]

    def head_grid(self, n_layers: int, n_heads: int) -> np.ndarray:
        grid = np.full((n_layers, n_heads), np.nan)
        for c, (d, _) in self.entries.items():
            if c.kind == "head":
                grid[c.layer, c.head] = d
        return grid

    def mlp_deltas(self, n_layers: int) -> np.ndarray:
        out = np.full(n_layers, np.nan)
        for c, (d, _) in self.entries.items():
            if c.kind == "mlp":
                out[c.layer] = d
        return out

    def merged(self, other: "EffectMatrix") -> "EffectMatrix":
        """Entries of both sweeps (e.g. heads direct plus MLPs with attention)."""
        m = EffectMatrix(f"{self.mode}+{other.mode}", self.source, self.ald_clean, dict(self.entries))
        m.entries.update(other.entries)
        return m

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for c, (d, ald) in self.entries.items():
                w.writerow([str(c), c.kind, self.mode, self.source, f"{d:.6f}", f"{ald:.6f}"])

    @classmethod
    def from_csv(cls, path, ald_clean: float = float("nan")) -> "EffectMatrix":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise PatchingError(f"{path}: no rows")
        m = cls(rows[0]["mode"], rows[0]["source"], ald_clean)
        for r in rows:
            m.entries[ComponentId.parse(r["component"])] = (float(r["delta"]), float(r["ald_patched"]))
        return m


def _normalized(ald_patched: float, ald_clean: float) -> float:
    if ald_clean == 0:
        return 0.0 if ald_patched == 0 else float("inf") * np.sign(ald_patched)
    return (ald_patched - ald_clean) / abs(ald_clean)


_DIRECT_SITES = {"resid_pre", "head_result", "mlp_out", "resid_post"}


def direct_effect_sweep(
    weights: ModelWeights,
    dataset: SyllogismDataset,
    components: list[ComponentId] | None = None,
    source: str = "dataset-mean",
    mean: MeanCache | None = None,
    batch_size: int = 32,
) -> EffectMatrix:
    """Replace each component's final-position residual write, keep every other
    write clean, then recompute the final LayerNorm and unembedding."""
    cfg = weights.cfg
    source = resolve_source(source)
    comps = components if components is not None else all_heads(cfg) + all_mlps(cfg)
    _check_components(cfg, comps)
    if source == "dataset-mean" and mean is None:
        mean = mean_cache(weights, dataset, sites=_DIRECT_SITES, batch_size=batch_size)
    n = len(dataset)
    ld_clean = np.zeros(n)
    ld_patched = np.zeros((n, len(comps)))
    for sl in iter_batches(n, batch_size):
        _, cache = forward_hooked(weights, dataset.clean[sl], cache_sites=_DIRECT_SITES)
        final = cache.stacked(cfg.n_layers - 1, "resid_post")[:, -1].astype(np.float64)  # (B, d)
        clean_out = np.stack([component_output(cache, c)[:, -1] for c in comps], axis=1)  # (B, C, d)
        if source == "clean":
            src = clean_out
        elif source == "dataset-mean":
            src = np.stack([mean.output(c)[-1] for c in comps])[None]  # (1, C, d)
        else:
            _, cor = forward_hooked(weights, dataset.corrupted[sl], cache_sites=_DIRECT_SITES)
            src = np.stack([component_output(cor, c)[:, -1] for c in comps], axis=1)
        patched = final[:, None] - clean_out + src
        ids = np.stack([dataset.correct_ids[sl], dataset.incorrect_ids[sl]], axis=1)  # (B, 2)
        ld_clean[sl] = _pair_ld(weights, final, ids)
        ld_patched[sl] = _pair_ld(weights, patched, ids[:, None, :].repeat(len(comps), 1))
    return _effects("direct-to-logits", source, comps, ld_clean, ld_patched)


def _pair_ld(weights: ModelWeights, resid: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """LD for residual vectors ``resid[..., d]`` with per-row ``ids[..., 2]``."""
    x = layer_norm(np.asarray(resid, dtype=np.float64), weights.lnf_w, weights.lnf_b, weights.cfg.layernorm_epsilon)
    u = weights.W_U.T[ids]  # (..., 2, d)
    lg = np.einsum("...d,...kd->...k", x, u)
    return lg[..., 0] - lg[..., 1]


def _effects(mode, source, comps, ld_clean, ld_patched, receiver=None) -> EffectMatrix:
    ald_clean = float(ld_clean.mean())
    m = EffectMatrix(mode, source, ald_clean, receiver=receiver)
    for j, c in enumerate(comps):
        ald = float(ld_patched[:, j].mean())
        m.entries[c] = (_normalized(ald, ald_clean), ald)
    return m


def _check_components(cfg, comps):
    for c in comps:
        if c.kind == "embed":
            continue
        if not 0 <= c.layer < cfg.n_layers or (c.kind == "head" and not 0 <= c.head < cfg.n_heads):
            raise PatchingError(f"component {c} out of range for this model")


def _check_order(sender: ComponentId, receiver: ComponentId) -> None:
    if sender == receiver:
        raise PatchingError(f"sender and receiver are the same component ({sender})")
    if receiver.kind == "embed":
        raise PatchingError("the embedding cannot be a receiver")
    if sender.kind == "embed":
        return
    if sender.layer < receiver.layer:
        return
    if sender.layer == receiver.layer and sender.kind == "head" and receiver.kind == "mlp":
        return
    raise PatchingError(f"sender {sender} is not upstream of receiver {receiver}")


def path_patch_sweep(
    weights: ModelWeights,
    dataset: SyllogismDataset,
    receiver: ComponentId,
    site: str,
    senders: list[ComponentId] | None = None,
    source: str = "dataset-mean",
    mean: MeanCache | None = None,
    batch_size: int = 32,
) -> EffectMatrix:
    """Effect of each sender on the logits through ``receiver``'s input only.

    For a head receiver ``site`` is one of ``q``, ``k``, ``v``; for an MLP
    receiver it is ``in``.  The sender's write into the receiver's residual
    input is swapped for the source value, the receiver is recomputed from that
    input (its other inputs stay clean), and the change in the receiver's
    final-position output is added to the otherwise clean final residual.
    """
    cfg = weights.cfg
    source = resolve_source(source)
    if receiver.kind == "head" and site not in ("q", "k", "v"):
        raise PatchingError(f"head receivers take site q, k or v, not {site!r}")
    if receiver.kind == "mlp" and site != "in":
        raise PatchingError("MLP receivers take site 'in'")
    if senders is None:
        senders = [EMBED] + [c for c in all_heads(cfg) + all_mlps(cfg) if _upstream(c, receiver)]
    _check_components(cfg, senders + [receiver])
    for s in senders:
        _check_order(s, receiver)
    if source == "dataset-mean" and mean is None:
        mean = mean_cache(weights, dataset, sites={"resid_pre", "head_result", "mlp_out"}, batch_size=batch_size)
    R = receiver.layer
    n = len(dataset)
    ld_clean = np.zeros(n)
    ld_patched = np.zeros((n, len(senders)))
    eps = cfg.layernorm_epsilon
    keep = {"resid_pre", "resid_mid", "ln1_out", "head_result", "mlp_out", "resid_post"}
    for sl in iter_batches(n, batch_size):
        _, cache = forward_hooked(weights, dataset.clean[sl], cache_sites=keep)
        cor = None
        if source == "corrupted-prompt":
            _, cor = forward_hooked(weights, dataset.corrupted[sl], cache_sites=keep)
        final = cache.stacked(cfg.n_layers - 1, "resid_post")[:, -1].astype(np.float64)
        ids = np.stack([dataset.correct_ids[sl], dataset.incorrect_ids[sl]], axis=1)
        ld_clean[sl] = _pair_ld(weights, final, ids)
        if receiver.kind == "head":
            resid_in = cache.stacked(R, "resid_pre")
            clean_ln = cache.stacked(R, "ln1_out")
        else:
            resid_in = cache.stacked(R, "resid_mid")

        # baseline and patched receiver outputs go through the same code path
        def receiver_out(inp):
            if receiver.kind == "head":
                x = layer_norm(inp, weights.ln1_w[R], weights.ln1_b[R], eps)
                q_in, k_in, v_in = (x if site == "q" else clean_ln), (x if site == "k" else clean_ln), (x if site == "v" else clean_ln)
                _, result = attention_head(weights, R, receiver.head, q_in, k_in, v_in)
                return result[:, -1].astype(np.float64)
            return mlp(weights, R, inp[:, -1])[1].astype(np.float64)

        clean_recv = receiver_out(resid_in)
        for j, s in enumerate(senders):
            sender_clean = component_output(cache, s)
            if source == "clean":
                sender_src = sender_clean
            elif source == "dataset-mean":
                sender_src = mean.output(s)[None]
            else:
                sender_src = component_output(cor, s)
            new_in = (resid_in.astype(np.float64) - sender_clean + sender_src).astype(np.float32)
            new_recv = receiver_out(new_in)
            ld_patched[sl, j] = _pair_ld(weights, final - clean_recv + new_recv, ids)
    mode = f"{site}-input" if receiver.kind == "head" else "mlp-in"
    return _effects(mode, source, senders, ld_clean, ld_patched, receiver=receiver)


def _upstream(c: ComponentId, receiver: ComponentId) -> bool:
    try:
        _check_order(c, receiver)
        return True
    except PatchingError:
        return False


def head_input_path_patch(
    weights: ModelWeights,
    dataset: SyllogismDataset,
    sender: ComponentId,
    receiver_head: ComponentId,
    site: str,
    source: str = "dataset-mean",
    mean: MeanCache | None = None,
) -> float:
    """Normalized delta of a single sender -> receiver-input -> logits path."""
    _check_order(sender, receiver_head)
    m = path_patch_sweep(weights, dataset, receiver_head, site, [sender], source, mean)
    return m.delta(sender)


def mlp_effect_modes(
    weights: ModelWeights,
    dataset: SyllogismDataset,
    with_attention: bool = True,
    source: str = "dataset-mean",
    mean: MeanCache | None = None,
    layers: list[int] | None = None,
    batch_size: int = 32,
) -> EffectMatrix:
    """Patch each MLP's output at every position and let the network recompute.

    With ``with_attention`` every attention head's output is restored to its
    clean value, so the MLP acts only through the residual stream and later
    MLPs.  Without it, downstream heads recompute from the patched stream and
    the effect includes paths mediated by attention.
    """
    cfg = weights.cfg
    source = resolve_source(source)
    layers = list(range(cfg.n_layers)) if layers is None else layers
    comps = [ComponentId("mlp", l) for l in layers]
    _check_components(cfg, comps)
    if source == "dataset-mean" and mean is None:
        mean = mean_cache(weights, dataset, sites={"mlp_out"}, batch_size=batch_size)
    n = len(dataset)
    ld_clean = np.zeros(n)
    ld_patched = np.zeros((n, len(comps)))
    for sl in iter_batches(n, batch_size):
        ids_c, ids_i = dataset.correct_ids[sl], dataset.incorrect_ids[sl]
        clean_logits, cache = forward_hooked(weights, dataset.clean[sl], cache_sites={"head_result", "mlp_out"})
        ld_clean[sl] = logit_diffs(clean_logits[:, -1], ids_c, ids_i)
        cor = None
        if source == "corrupted-prompt":
            _, cor = forward_hooked(weights, dataset.corrupted[sl], cache_sites={"mlp_out"})
        for j, c in enumerate(comps):
            if source == "clean":
                src = cache.stacked(c.layer, "mlp_out")
            elif source == "dataset-mean":
                src = mean.stacked(c.layer, "mlp_out")
            else:
                src = cor.stacked(c.layer, "mlp_out")
            reps = {HookSite(c.layer, "mlp_out"): src}
            if with_attention:
                for l in range(c.layer + 1, cfg.n_layers):
                    for h in range(cfg.n_heads):
                        reps[HookSite(l, "head_result", h)] = cache.stacked(l, "head_result")[:, :, h]
            lg, _ = forward_hooked(weights, dataset.clean[sl], reps, cache_sites=set())
            ld_patched[sl, j] = logit_diffs(lg[:, -1], ids_c, ids_i)
    mode = "mlp-with-attn" if with_attention else "mlp-without-attn"
    return _effects(mode, source, comps, ld_clean, ld_patched)


def write_grid_csv(path, grid: np.ndarray, row_label: str = "layer") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([row_label] + [f"h{h}" for h in range(grid.shape[1])])
        for l, row in enumerate(grid):
            w.writerow([l] + [f"{v:.6f}" for v in row])


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def heatmap_svg(path, grid: np.ndarray, title: str = "") -> None:
    """Diverging heatmap centred on zero with the min/max printed in the title."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    g = np.atleast_2d(grid)
    lim = float(np.nanmax(np.abs(g))) if np.isfinite(g).any() else 1.0
    lim = lim or 1.0
    fig, ax = plt.subplots(figsize=(max(3.0, 0.45 * g.shape[1] + 1.5), max(2.0, 0.4 * g.shape[0] + 1.0)))
    im = ax.imshow(g, cmap="RdBu", vmin=-lim, vmax=lim, aspect="auto")
    ax.set_xlabel("head" if g.shape[0] > 1 else "layer")
    ax.set_ylabel("layer" if g.shape[0] > 1 else "")
    ax.set_title(f"{title}  min={np.nanmin(g):.3f} max={np.nanmax(g):.3f}".strip(), fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
