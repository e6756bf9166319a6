"""Command-line front end: ``syllogism-circuits {gen,eval,patch,circuit,analyze}``.

Every run writes its outputs plus a ``config.json`` with the fully resolved
arguments into ``--out``.  Passing that file back with ``--config`` replays the
run.  Outputs are staged and only moved into place once all of them succeed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager, nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    Thresholds,
    attention_diagnostics_all,
    classify_heads,
    head_contribution_scatter,
    ov_extended_logits,
    qk_prompt_matrix,
    repeated_random_probe,
    top_qk_pairs,
    trace_ov_through_mlp,
)
from .checkpoint import CheckpointError, CheckpointManifest, load_model
from .circuits import BUILTIN_CIRCUITS, CircuitSpec, transfer_matrix
from .data import PAIR_WORDS, SyllogismDataset, SyllogismKind, generate, parse_pair
from .metrics import average_logit_diff, model_runner
from .model import ComponentId, ModelError
from .patching import (
    CSV_SCHEMA_VERSION,
    PatchingError,
    direct_effect_sweep,
    heatmap_svg,
    mlp_effect_modes,
    path_patch_sweep,
    write_grid_csv,
)
from .tokenizer import Tokenizer, TokenizerError

CHECKPOINT_ENV = "SYLLOGISM_CHECKPOINT"
FAST_N = 50
FORMATS = ("csv", "json", "svg")
EXAMPLE_PROMPTS = {
    "ss": "Statement E is true. Statement S matches statement E. Statement S is true",
    "os": "Statement E and statement S are opposites. Statement E is true. Statement S is false",
}


class CliError(Exception):
    pass


# -- outputs -----------------------------------------------------------------


class Outputs:
    """Files staged in a temporary directory and moved into ``out`` on success."""

    def __init__(self, out: Path, formats: set[str]):
        self.out = out
        self.formats = formats
        self.stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        self.written.append(name)
        return self.stage / name

    def json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, default=_json_default))

    def wants(self, fmt: str) -> bool:
        return fmt in self.formats


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (Path, ComponentId)):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


@contextmanager
def staged_outputs(out: Path, formats: set[str]):
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    o = Outputs(out, formats)
    try:
        yield o
    except BaseException:
        shutil.rmtree(o.stage, ignore_errors=True)
        if created and not any(out.iterdir()):
            out.rmdir()
        raise
    for name in o.written:
        os.replace(o.stage / name, out / name)
    shutil.rmtree(o.stage, ignore_errors=True)


# -- loading -----------------------------------------------------------------


def resolve_checkpoint(arg: str | None) -> Path:
    path = arg or os.environ.get(CHECKPOINT_ENV)
    if not path:
        raise CliError(f"no checkpoint given: pass --checkpoint DIR or set {CHECKPOINT_ENV}")
    return Path(path).resolve()


def load(args):
    manifest = CheckpointManifest.from_dir(resolve_checkpoint(args.checkpoint))
    cfg, weights = load_model(manifest)
    tokenizer = Tokenizer.from_files(manifest.vocab_path, manifest.merges_path)
    if tokenizer.n_vocab != cfg.n_vocab:
        raise CliError(f"tokenizer has {tokenizer.n_vocab} tokens but the model expects {cfg.n_vocab}")
    return weights, tokenizer


def dataset_from_args(args, tokenizer: Tokenizer, pair_text: str | None = None, kind: str | None = None) -> SyllogismDataset:
    if getattr(args, "dataset", None) and pair_text is None and kind is None:
        return SyllogismDataset.from_jsonl(args.dataset)
    pair = parse_pair(tokenizer, pair_text or args.pair)
    return generate(tokenizer, kind or args.kind, pair, args.n, seed=args.seed, template_index=args.template,
                    corruption=args.corruption, prepend_eot=args.prepend_eot)


def resolved_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    if cfg.get("checkpoint") is None and os.environ.get(CHECKPOINT_ENV):
        cfg["checkpoint"] = os.environ[CHECKPOINT_ENV]
    return {"version": __version__, "csv_schema": CSV_SCHEMA_VERSION, "args": cfg}


# -- commands ----------------------------------------------------------------


def cmd_gen(args, out: Outputs) -> None:
    _, tokenizer = load(args)
    ds = dataset_from_args(args, tokenizer)
    ds.to_jsonl(out.path("dataset.jsonl"))
    print(f"wrote {len(ds)} {ds.kind.name} prompts ({ds.seq_len} tokens each)")
    print("example:", ds.instances[0].clean_text, "->", ds.instances[0].correct_word.strip())


def cmd_eval(args, out: Outputs) -> None:
    weights, tokenizer = load(args)
    ds = dataset_from_args(args, tokenizer)
    summary = average_logit_diff(model_runner(weights, batch_size=args.batch_size), ds)
    report = {"kind": ds.kind.value, "template": ds.template_index, "pair": ds.pair.label, **summary.to_json()}
    out.json("summary.json", report)
    with open(out.path("instances.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["instance", "clean_text", "correct", "incorrect", "logit_diff"])
        for i, (inst, ld) in enumerate(zip(ds.instances, summary.lds)):
            w.writerow([i, inst.clean_text, tokenizer.token_str(inst.correct_id), tokenizer.token_str(inst.incorrect_id), f"{ld:.6f}"])
    print(f"ALD {summary.ald:.4f} (n={summary.n}, std={summary.std:.4f})")
    for word, v in summary.per_class.items():
        print(f"  gold {word!r}: {v:.4f}")
    print(f"odds ratio exp(ALD) = {summary.odds_ratio:.4f}")


def _parse_component(text: str) -> ComponentId:
    try:
        return ComponentId.parse(text)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def cmd_patch(args, out: Outputs) -> None:
    weights, tokenizer = load(args)
    cfg = weights.cfg
    ds = dataset_from_args(args, tokenizer)
    if args.mode == "heads-direct":
        m = direct_effect_sweep(weights, ds, source=args.source, batch_size=args.batch_size)
        grid = m.head_grid(cfg.n_layers, cfg.n_heads)
        write_grid_csv(out.path("heads_grid.csv"), grid)
        _write_mlp_csv(out.path("mlps.csv"), m.mlp_deltas(cfg.n_layers))
        if out.wants("svg"):
            heatmap_svg(out.path("heads_heatmap.svg"), grid, f"{ds.kind.value} direct effect")
        top = m.most_negative(7, "head")
        print("most negative head deltas:", ", ".join(f"{c} {m.delta(c):+.3f}" for c in top))
    elif args.mode == "mlps-direct":
        m = mlp_effect_modes(weights, ds, with_attention=args.with_attention, source=args.source, batch_size=args.batch_size)
        deltas = m.mlp_deltas(cfg.n_layers)
        _write_mlp_csv(out.path("mlps.csv"), deltas)
        if out.wants("svg"):
            heatmap_svg(out.path("mlps_heatmap.svg"), deltas[None], f"{ds.kind.value} {m.mode}")
        print("MLP deltas:", ", ".join(f"{l}:{d:+.3f}" for l, d in enumerate(deltas)))
    else:
        if not args.receiver:
            raise CliError("--mode qkv needs --receiver (e.g. 7.2 or mlp9)")
        recv = _parse_component(args.receiver)
        sites = ["in"] if recv.kind == "mlp" else (["q", "k", "v"] if args.site == "all" else [args.site])
        rows = []
        for s in sites:
            part = path_patch_sweep(weights, ds, recv, s, source=args.source, batch_size=args.batch_size)
            rows += [(c, s, *part.entries[c]) for c in part.entries]
            if out.wants("svg"):
                heatmap_svg(out.path(f"senders_{s}_heatmap.svg"), part.head_grid(cfg.n_layers, cfg.n_heads),
                            f"senders -> {recv} {s}")
        with open(out.path("effects.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["receiver", "site", "sender", "kind", "source", "delta", "ald_patched"])
            for c, s, d, ald in rows:
                w.writerow([str(recv), s, str(c), c.kind, part.source, f"{d:.6f}", f"{ald:.6f}"])
        print(f"{len(rows)} sender paths into {recv} written")
        return
    m.to_csv(out.path("effects.csv"))
    if out.wants("json"):
        out.json("effects.json", {"mode": m.mode, "source": m.source, "ald_clean": m.ald_clean,
                                  "deltas": {str(c): d for c, (d, _) in m.entries.items()}})


def _write_mlp_csv(path, deltas) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "delta"])
        for l, d in enumerate(deltas):
            w.writerow([l, f"{d:.6f}"])


def _circuit_from_args(args, cfg) -> CircuitSpec:
    if args.full_model:
        return CircuitSpec.full(cfg)
    name = args.circuit or ("C_SS" if args.kind == "ss" else "C_OS")
    if name not in BUILTIN_CIRCUITS and not Path(name).is_file():
        raise CliError(f"circuit {name!r} is neither builtin ({', '.join(BUILTIN_CIRCUITS)}) nor a file")
    return CircuitSpec.load(name)


def cmd_circuit(args, out: Outputs) -> None:
    weights, tokenizer = load(args)
    circuit = _circuit_from_args(args, weights.cfg)
    circuit.validate(weights.cfg)
    labels = list(PAIR_WORDS) if args.pairs == "all" else [p.strip() for p in (args.pairs or args.pair).split(",")]
    datasets = {}
    for label in labels:
        try:
            datasets[label] = dataset_from_args(args, tokenizer, pair_text=label)
        except (TokenizerError, ValueError) as exc:
            datasets[label] = exc
    table = transfer_matrix(weights, circuit, datasets)
    table.to_csv(out.path("transfer.csv"))
    out.json("transfer.json", table.to_json())
    out.json("circuit.json", circuit.to_json())
    for r in table.rows:
        if r.error:
            print(f"{r.pair:>20}: {r.error}")
        else:
            print(f"{r.pair:>20}: model {r.model_ald:.4f}  circuit {r.circuit_ald:.4f}  faithfulness {r.faithfulness:.4f}")


# -- analyze -----------------------------------------------------------------


def _token(tokenizer: Tokenizer, text: str) -> int:
    return tokenizer.single_token_id(text)


def _slate_rows(slate):
    return [("top", i, s, tid, lg) for i, (s, tid, lg) in enumerate(slate.top)] + \
           [("bottom", i, s, tid, lg) for i, (s, tid, lg) in enumerate(slate.bottom)]


def _write_slate(out: Outputs, name: str, slate) -> None:
    out.json(f"{name}.json", slate.to_json())
    if out.wants("csv"):
        with open(out.path(f"{name}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["list", "rank", "token", "token_id", "logit"])
            for row in _slate_rows(slate):
                w.writerow([*row[:4], f"{row[4]:.6f}"])
    print("top:   ", [s for s, _, _ in slate.top])
    print("bottom:", [s for s, _, _ in slate.bottom])


def cmd_analyze(args, out: Outputs) -> None:
    weights, tokenizer = load(args)
    a = args.analysis
    if a == "qk":
        comp = _parse_component(args.head)
        prompt = args.prompt or EXAMPLE_PROMPTS["ss" if args.kind == "ss" else "os"]
        mat = qk_prompt_matrix(weights, comp, tokenizer.encode(prompt), tokenizer, mode=args.qk_mode)
        pairs = top_qk_pairs(mat, args.k)
        out.json("qk_pairs.json", {"head": str(comp), "prompt": prompt, "mode": mat.mode,
                                   "top": [list(p) for p in pairs]})
        if out.wants("csv"):
            with open(out.path("qk_matrix.csv"), "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["query\\key", *mat.token_strs])
                for s, row in zip(mat.token_strs, mat.scores):
                    w.writerow([s, *(f"{v:.6f}" for v in row)])
        for q, k, s in pairs:
            print(f"{s:.4f}: ({q!r}, {k!r})")
    elif a == "ov-slate":
        comp = _parse_component(args.head)
        slate = ov_extended_logits(weights, comp, _token(tokenizer, args.source_token), args.k, tokenizer,
                                   extended=not args.no_extended)
        _write_slate(out, "ov_slate", slate)
    elif a == "mlp-trace":
        comp = _parse_component(args.head)
        tid = _token(tokenizer, args.source_token)
        before = ov_extended_logits(weights, comp, tid, args.k, tokenizer, extended=not args.no_extended)
        after = trace_ov_through_mlp(weights, comp, args.mlp, tid, args.k, tokenizer, extended=not args.no_extended)
        _write_slate(out, "after_ov", before)
        _write_slate(out, "after_mlp", after)
    elif a == "scatter":
        comp = _parse_component(args.head)
        ds = dataset_from_args(args, tokenizer)
        sc = head_contribution_scatter(weights, comp, ds, args.target)
        with open(out.path("scatter.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["instance", "attn_prob", "contribution"])
            for i, at, c in sc.rows():
                w.writerow([i, f"{at:.6f}", f"{c:.6f}"])
        out.json("scatter.json", {"head": str(comp), "target": args.target, "r": sc.r, "degenerate": sc.degenerate})
        print(f"r = {sc.r:.4f}{' (degenerate)' if sc.degenerate else ''}")
    elif a == "classify":
        th = Thresholds(args.theta_attn, args.theta_r, args.k)
        sets = {k: dataset_from_args(args, tokenizer, kind=k) for k in ("ss", "os", "cs")}
        labels = classify_heads(weights, sets["ss"], sets["os"], sets["cs"], th)
        out.json("classify.json", {"thresholds": asdict(th),
                                   "heads": [c.to_json() for c in labels]})
        by_label: dict[str, list[str]] = {}
        for c in labels:
            by_label.setdefault(c.label.value, []).append(str(c.head))
        for label, heads in sorted(by_label.items()):
            shown = heads if label != "Unclassified" else [f"{len(heads)} heads"]
            print(f"{label}: {', '.join(shown)}")
    elif a == "diagnostics":
        probe = repeated_random_probe(weights.cfg.n_vocab, args.half_len, args.seed, args.probes)
        scores = attention_diagnostics_all(weights, probe)
        with open(out.path("diagnostics.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["head", "prev_token_score", "duplicate_token_score", "induction_score"])
            for c, s in scores.items():
                w.writerow([str(c), *(f"{s[k]:.6f}" for k in ("prev_token_score", "duplicate_token_score", "induction_score"))])
        best = sorted(scores, key=lambda c: -scores[c]["induction_score"])[: args.k]
        out.json("diagnostics.json", {str(c): s for c, s in scores.items()})
        print("top induction heads:", ", ".join(f"{c} {scores[c]['induction_score']:.3f}" for c in best))


# -- parser ------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _formats(text: str) -> set[str]:
    fmts = {f.strip() for f in text.split(",") if f.strip()}
    bad = fmts - set(FORMATS)
    if bad:
        raise argparse.ArgumentTypeError(f"unknown format(s) {sorted(bad)}; choose from {FORMATS}")
    return fmts


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run")
    g.add_argument("--checkpoint", help=f"checkpoint directory (default: ${CHECKPOINT_ENV})")
    g.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
    g.add_argument("--formats", type=_formats, default={"csv", "json"}, help="comma list of csv,json,svg")
    g.add_argument("--config", help="resolved config.json of an earlier run; its arguments become defaults")
    g.add_argument("--batch-size", type=_positive_int, default=32)
    g.add_argument("--jobs", type=_positive_int, default=None, help="cap on BLAS worker threads")
    d = p.add_argument_group("data")
    d.add_argument("--kind", choices=[k.value for k in SyllogismKind], default="ss")
    d.add_argument("--template", type=int, default=None, help="1-based template index (default per kind)")
    d.add_argument("--pair", default="true/false")
    d.add_argument("--n", type=_positive_int, default=500)
    d.add_argument("--fast", action="store_true", help=f"use n={FAST_N}")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--corruption", choices=["flip", "resample-letters", "mean"], default="flip")
    d.add_argument("--prepend-eot", action="store_true")
    d.add_argument("--dataset", help="read prompts from a gen-written JSONL file instead")
    return p


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = _common()
    parser = argparse.ArgumentParser(prog="syllogism-circuits", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("gen", parents=[common], help="generate a syllogism dataset")
    p.set_defaults(func=cmd_gen)
    subs["gen"] = p

    p = sub.add_parser("eval", parents=[common], help="average logit difference of the full model")
    p.set_defaults(func=cmd_eval)
    subs["eval"] = p

    p = sub.add_parser("patch", parents=[common], help="activation and path patching sweeps")
    p.add_argument("--mode", choices=["heads-direct", "mlps-direct", "qkv"], default="heads-direct")
    p.add_argument("--source", default="dataset-mean", help="dataset-mean | corrupted-prompt | clean")
    p.add_argument("--with-attention", action=argparse.BooleanOptionalAction, default=True,
                   help="for mlps-direct: keep attention outputs clean")
    p.add_argument("--receiver", help="for qkv: receiving component, e.g. 7.2 or mlp9")
    p.add_argument("--site", choices=["q", "k", "v", "all"], default="all")
    p.set_defaults(func=cmd_patch)
    subs["patch"] = p

    p = sub.add_parser("circuit", parents=[common], help="circuit faithfulness and transfer across pairs")
    p.add_argument("--circuit", help=f"builtin ({', '.join(BUILTIN_CIRCUITS)}) or JSON file")
    p.add_argument("--full-model", action="store_true", help="evaluate the full model as the circuit")
    p.add_argument("--pairs", help="comma list of pairs, or 'all' for the five builtin pairs")
    p.set_defaults(func=cmd_circuit)
    subs["circuit"] = p

    p = sub.add_parser("analyze", parents=[common], help="weight and attention analyses")
    p.add_argument("analysis", choices=["qk", "ov-slate", "mlp-trace", "scatter", "classify", "diagnostics"])
    p.add_argument("--head", default="7.2")
    p.add_argument("--prompt")
    p.add_argument("--qk-mode", choices=["weights", "pattern"], default="weights")
    p.add_argument("--source-token", default=" true")
    p.add_argument("--mlp", type=int, default=10)
    p.add_argument("--no-extended", action="store_true", help="use the raw embedding instead of embedding + MLP0")
    p.add_argument("--k", type=_positive_int, default=None)
    p.add_argument("--target", default="incorrect", choices=["correct", "incorrect"])
    p.add_argument("--theta-attn", type=float, default=Thresholds.attn)
    p.add_argument("--theta-r", type=float, default=Thresholds.r)
    p.add_argument("--half-len", type=_positive_int, default=20)
    p.add_argument("--probes", type=_positive_int, default=10)
    p.set_defaults(func=cmd_analyze)
    subs["analyze"] = p
    return parser, subs


def _apply_config(argv: list[str], subs) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    raw = json.loads(Path(known.config).read_text())
    saved = dict(raw.get("args", raw))
    if saved.get("command") not in (None, known.command):
        raise CliError(f"config was written by {saved['command']!r}, not {known.command!r}")
    saved.pop("command", None)
    saved.pop("analysis", None)
    if "formats" in saved and isinstance(saved["formats"], list):
        saved["formats"] = set(saved["formats"])
    subs[known.command].set_defaults(**saved)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        _apply_config(argv, subs)
    except (CliError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.fast:
        args.n = FAST_N
    if getattr(args, "k", "unset") is None:
        args.k = 3 if args.analysis == "qk" else 10
    out = Path(args.out or Path("runs") / args.command)
    try:
        limiter = nullcontext()
        if args.jobs:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=args.jobs)
        with limiter, staged_outputs(out, args.formats) as o:
            config = resolved_config(args)
            config["args"]["formats"] = sorted(args.formats)
            o.json("config.json", config)
            args.func(args, o)
    except (CliError, CheckpointError, ModelError, PatchingError, TokenizerError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"outputs in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
