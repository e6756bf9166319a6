from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SyllogismDataset
from .metrics import EvalSummary, average_logit_diff, faithfulness, model_runner
from .model import ComponentId, HookSite, ModelConfig, ModelWeights, all_heads, all_mlps, head, mlp_id
from .patching import MeanCache, mean_cache


@dataclass
class CircuitSpec:
    """A set of heads and MLPs; everything else is mean-ablated when evaluated.

    Embeddings and LayerNorms are never ablated.
    """

    name: str
    included: frozenset[ComponentId]
    notes: str = ""
    full_model: bool = False

    def validate(self, cfg: ModelConfig) -> None:
        for c in self.included:
            if c.kind == "embed":
                continue
            if not 0 <= c.layer < cfg.n_layers or (c.kind == "head" and not 0 <= c.head < cfg.n_heads):
                raise ValueError(f"circuit {self.name!r}: component {c} out of range")

    def excluded(self, cfg: ModelConfig) -> list[ComponentId]:
        if self.full_model:
            return []
        return [c for c in all_heads(cfg) + all_mlps(cfg) if c not in self.included]

    @classmethod
    def full(cls, cfg: ModelConfig) -> "CircuitSpec":
        return cls("full-model", frozenset(all_heads(cfg) + all_mlps(cfg)), full_model=True)

    def to_json(self) -> dict:
        heads = sorted(c for c in self.included if c.kind == "head")
        mlps = sorted(c.layer for c in self.included if c.kind == "mlp")
        return {"name": self.name, "heads": [str(h) for h in heads], "mlps": mlps, "notes": self.notes}

    @classmethod
    def from_json(cls, raw: dict) -> "CircuitSpec":
        comps = {ComponentId.parse(h) for h in raw.get("heads", [])}
        comps |= {mlp_id(int(l)) for l in raw.get("mlps", [])}
        return cls(raw.get("name", "circuit"), frozenset(comps), raw.get("notes", ""))

    @classmethod
    def load(cls, path) -> "CircuitSpec":
        text = str(path)
        if text in BUILTIN_CIRCUITS:
            return BUILTIN_CIRCUITS[text]
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def _circuit(name, heads, mlps=(), notes=""):
    comps = {head(*map(int, h.split("."))) for h in heads} | {mlp_id(l) for l in mlps}
    return CircuitSpec(name, frozenset(comps), notes)


C_SS = _circuit("C_SS", ["7.2", "9.1", "9.9", "10.1", "10.4"], notes="Truth Heads only")
C_OS = _circuit(
    "C_OS",
    ["7.3", "8.8", "8.10", "9.7", "10.7"],
    [8, 9, 10],
    notes="Negative Truth Heads plus the late MLPs that rescale truth logits",
)
C_OS_WITH_11_10 = _circuit("C_OS+11.10", ["7.3", "8.8", "8.10", "9.7", "10.7", "11.10"], [8, 9, 10])
BUILTIN_CIRCUITS = {c.name: c for c in (C_SS, C_OS, C_OS_WITH_11_10)}


def ablation_replacements(circuit: CircuitSpec, cfg: ModelConfig, mean: MeanCache) -> dict[HookSite, np.ndarray]:
    reps = {}
    for c in circuit.excluded(cfg):
        if c.kind == "head":
            key = HookSite(c.layer, "head_result", c.head)
        else:
            key = HookSite(c.layer, "mlp_out")
        reps[key] = mean[key]
    return reps


def eval_circuit(
    weights: ModelWeights,
    circuit: CircuitSpec,
    dataset: SyllogismDataset,
    mean: MeanCache | None = None,
    batch_size: int = 32,
) -> EvalSummary:
    """ALD with every component outside the circuit replaced by its dataset mean at all positions."""
    circuit.validate(weights.cfg)
    excluded = circuit.excluded(weights.cfg)
    if excluded and mean is None:
        mean = mean_cache(weights, dataset, sites={"head_result", "mlp_out"}, batch_size=batch_size)
    reps = ablation_replacements(circuit, weights.cfg, mean) if excluded else {}
    return average_logit_diff(model_runner(weights, reps, batch_size), dataset)


@dataclass
class TransferRow:
    pair: str
    model_ald: float | None
    circuit_ald: float | None
    error: str = ""

    @property
    def faithfulness(self) -> float | None:
        if self.model_ald is None or self.circuit_ald is None:
            return None
        return faithfulness(self.model_ald, self.circuit_ald)


@dataclass
class TransferTable:
    circuit: str
    kind: str
    rows: list[TransferRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        """Layout: one row for the full model, one for the circuit, one column per pair."""
        labels = [r.pair for r in self.rows]

        def fmt(v):
            return "" if v is None else f"{v:.4f}"

        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["", *labels])
            w.writerow(["model", *(fmt(r.model_ald) for r in self.rows)])
            w.writerow([self.circuit, *(fmt(r.circuit_ald) for r in self.rows)])
            w.writerow(["faithfulness", *(fmt(r.faithfulness) for r in self.rows)])
            w.writerow(["status", *(r.error or "ok" for r in self.rows)])

    def to_json(self) -> dict:
        return {
            "circuit": self.circuit,
            "kind": self.kind,
            "rows": [
                {"pair": r.pair, "model_ald": r.model_ald, "circuit_ald": r.circuit_ald,
                 "faithfulness": r.faithfulness, "error": r.error}
                for r in self.rows
            ],
        }


def transfer_matrix(weights: ModelWeights, circuit: CircuitSpec, datasets: dict[str, SyllogismDataset | Exception]) -> TransferTable:
    """Model and circuit ALD per binary pair.

    ``datasets`` maps a pair label to its dataset, or to the exception raised when
    building it (an unusable pair); such rows are reported and skipped.
    """
    kinds = {d.kind.value for d in datasets.values() if isinstance(d, SyllogismDataset)}
    table = TransferTable(circuit.name, ",".join(sorted(kinds)))
    for label, ds in datasets.items():
        if isinstance(ds, Exception):
            table.rows.append(TransferRow(label, None, None, f"unusable pair: {ds}"))
            continue
        mean = mean_cache(weights, ds, sites={"head_result", "mlp_out"})
        full = average_logit_diff(model_runner(weights), ds)
        circ = eval_circuit(weights, circuit, ds, mean)
        table.rows.append(TransferRow(label, full.ald, circ.ald))
    return table
