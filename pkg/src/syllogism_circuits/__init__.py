"""Hooked GPT-2 inference and circuit analysis for truth-value syllogisms."""

from .checkpoint import CheckpointError, CheckpointManifest, load_model, save_checkpoint
from .circuits import BUILTIN_CIRCUITS, C_OS, C_SS, CircuitSpec, eval_circuit, transfer_matrix
from .data import BinaryPair, SyllogismDataset, SyllogismKind, generate, make_pair, parse_pair
from .metrics import EvalSummary, average_logit_diff, faithfulness, logit_diff, model_runner
from .model import (
    ActivationCache,
    ComponentId,
    HookSite,
    ModelConfig,
    ModelError,
    ModelWeights,
    forward_hooked,
    forward_with_cache,
)
from .patching import EffectMatrix, direct_effect_sweep, mean_cache, mlp_effect_modes, path_patch_sweep
from .tokenizer import Tokenizer, TokenizerError

__version__ = "0.1.0"

__all__ = [
    "ActivationCache", "BinaryPair", "CheckpointError", "CheckpointManifest", "ComponentId", "EvalSummary",
    "HookSite", "ModelConfig", "ModelError", "ModelWeights", "SyllogismDataset", "SyllogismKind", "Tokenizer",
    "TokenizerError", "average_logit_diff", "faithfulness", "forward_hooked", "forward_with_cache", "generate",
    "load_model", "logit_diff", "make_pair", "model_runner", "parse_pair", "save_checkpoint",
    "BUILTIN_CIRCUITS", "C_OS", "C_SS", "CircuitSpec", "eval_circuit", "transfer_matrix",
    "EffectMatrix", "direct_effect_sweep", "mean_cache", "mlp_effect_modes", "path_patch_sweep",
]
