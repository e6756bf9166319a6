"""Reference implementations written independently of the package.

``brute_force_logits`` reads GPT-2-named tensors directly (fused c_attn, no
per-head split) and loops over positions and heads in float64.
"""

from __future__ import annotations

import math

import numpy as np


def _ln(x, w, b, eps):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return (x - mu) / math.sqrt(var + eps) * w + b


def _gelu(x, kind):
    if kind == "gelu_new":
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    return np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])


def brute_force_logits(tensors: dict, config: dict, tokens) -> np.ndarray:
    """Logits (pos, vocab) for one sequence; ``config`` uses GPT-2 release keys."""
    t = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    L, H, d = config["n_layer"], config["n_head"], config["n_embd"]
    eps = config.get("layer_norm_epsilon", 1e-5)
    act = config.get("activation_function", "gelu")
    dh = d // H
    T = len(tokens)
    resid = [t["wte.weight"][tok] + t["wpe.weight"][i] for i, tok in enumerate(tokens)]
    for l in range(L):
        p = f"h.{l}."
        xs = [_ln(r, t[p + "ln_1.weight"], t[p + "ln_1.bias"], eps) for r in resid]
        qkv = [x @ t[p + "attn.c_attn.weight"] + t[p + "attn.c_attn.bias"] for x in xs]
        z = [np.zeros(d) for _ in range(T)]
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(T):
                q = qkv[i][:d][sl]
                scores = [q @ qkv[j][d : 2 * d][sl] / math.sqrt(dh) for j in range(i + 1)]
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                tot = sum(e)
                z[i][sl] = sum((e[j] / tot) * qkv[j][2 * d :][sl] for j in range(i + 1))
        resid = [r + zi @ t[p + "attn.c_proj.weight"] + t[p + "attn.c_proj.bias"] for r, zi in zip(resid, z)]
        out = []
        for r in resid:
            x = _ln(r, t[p + "ln_2.weight"], t[p + "ln_2.bias"], eps)
            hid = _gelu(x @ t[p + "mlp.c_fc.weight"] + t[p + "mlp.c_fc.bias"], act)
            out.append(r + hid @ t[p + "mlp.c_proj.weight"] + t[p + "mlp.c_proj.bias"])
        resid = out
    W_U = t.get("lm_head.weight", t["wte.weight"])
    return np.stack([_ln(r, t["ln_f.weight"], t["ln_f.bias"], eps) @ W_U.T for r in resid])


def qk_scores_loop(W_E, W_Q, W_K, tokens) -> np.ndarray:
    """Pairwise q.k / sqrt(d_head) from raw embeddings, one pair at a time."""
    dh = W_Q.shape[1]
    T = len(tokens)
    out = np.zeros((T, T))
    for i in range(T):
        q = np.asarray(W_E[tokens[i]], dtype=np.float64) @ W_Q
        for j in range(T):
            k = np.asarray(W_E[tokens[j]], dtype=np.float64) @ W_K
            out[i, j] = float(q @ k) / math.sqrt(dh)
    return out
