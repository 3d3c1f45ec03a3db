"""Tiny decoder-only language model in plain numpy.

Pre-norm transformer blocks: RMSNorm, multi-head attention with rotary
position embeddings on queries and keys, SwiGLU feed-forward, residual
connections, and an input embedding matrix reused as the output head.
Forward and backward passes are written out by hand; the backward pass is
checked against central finite differences in the test suite.

Parameters live in a plain ``dict[str, np.ndarray]`` keyed by the names
returned from :func:`tensor_shapes`, always in that fixed order when
serialized. All math runs in the dtype of the parameter arrays, so the same
code path serves float32 training and float64 gradient checking.
"""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteLoss, SequenceTooLong, TokenOutOfRange
from .config import ExpertConfig

ROPE_BASE = 10000.0
RMSNORM_EPS = 1e-5
INIT_STD = 0.02

ModelParams = dict[str, np.ndarray]


def tensor_shapes(config: ExpertConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in canonical serialization order."""
    d, f = config.hidden_size, config.intermediate_size
    shapes: list[tuple[str, tuple[int, ...]]] = [("embed", (config.vocab_size, d))]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "attn_norm", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "ffn_norm", (d,)),
            (p + "w_gate", (d, f)),
            (p + "w_up", (d, f)),
            (p + "w_down", (f, d)),
        ]
    shapes.append(("final_norm", (d,)))
    return shapes


def param_count(config: ExpertConfig) -> int:
    """Total number of scalar parameters."""
    return sum(int(np.prod(s)) for _, s in tensor_shapes(config))


def layer_param_count(config: ExpertConfig) -> int:
    """Parameters in the transformer blocks (embedding and final norm excluded)."""
    d, f = config.hidden_size, config.intermediate_size
    return config.num_layers * (4 * d * d + 3 * d * f + 2 * d)


def ffn_param_count(config: ExpertConfig) -> int:
    """Parameters in the feed-forward sublayers only."""
    return config.num_layers * 3 * config.hidden_size * config.intermediate_size


def init_params(config: ExpertConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fresh parameters: norm gains at 1, everything else scaled normal.

    Projections feeding a residual sum (wo, w_down) are drawn with std
    scaled down by sqrt(2 * num_layers) to keep activations bounded as
    depth grows. Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    resid_std = INIT_STD / np.sqrt(2.0 * config.num_layers)
    params: ModelParams = {}
    for name, shape in tensor_shapes(config):
        if name.endswith("_norm"):
            params[name] = np.ones(shape, dtype=dtype)
            continue
        std = resid_std if name.endswith(("wo", "w_down")) else INIT_STD
        params[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return params


def copy_params(params: ModelParams) -> ModelParams:
    return {k: v.copy() for k, v in params.items()}


def params_astype(params: ModelParams, dtype) -> ModelParams:
    return {k: v.astype(dtype) for k, v in params.items()}


def validate_params(config: ExpertConfig, params: ModelParams) -> None:
    """Check the dict carries exactly the expected tensors, finite, right shapes."""
    expected = dict(tensor_shapes(config))
    if set(params) != set(expected):
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, arr in params.items():
        if tuple(arr.shape) != expected[name]:
            raise ValueError(f"{name}: shape {arr.shape} != expected {expected[name]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: contains non-finite values")


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + RMSNORM_EPS)
    return x / r * gain, r


def _rmsnorm_backward(dy, x, gain, r):
    d = x.shape[-1]
    dgain = np.sum(dy * x / r, axis=tuple(range(x.ndim - 1)))
    dyg = dy * gain
    dx = dyg / r - x * (np.sum(dyg * x, axis=-1, keepdims=True) / (d * r ** 3))
    return dx, dgain


def rope_tables(seq_len: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Cosine/sine tables of shape (seq_len, head_dim // 2)."""
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _apply_rope(x, cos, sin):
    # x: (B, H, T, head_dim); dimension i pairs with i + head_dim // 2.
    half = x.shape[-1] // 2
    a, b = x[..., :half], x[..., half:]
    c, s = cos[None, None], sin[None, None]
    return np.concatenate([a * c - b * s, a * s + b * c], axis=-1)


def _rope_backward(dxr, cos, sin):
    half = dxr.shape[-1] // 2
    da, db = dxr[..., :half], dxr[..., half:]
    c, s = cos[None, None], sin[None, None]
    return np.concatenate([da * c + db * s, -da * s + db * c], axis=-1)


def _silu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def _check_tokens(config: ExpertConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    if tokens.shape[1] == 0:
        raise ValueError("token sequence is empty")
    if tokens.shape[1] > config.seq_len:
        raise SequenceTooLong(
            f"sequence length {tokens.shape[1]} exceeds model seq_len {config.seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise TokenOutOfRange(
            f"token ids must lie in [0, {config.vocab_size}), "
            f"got range [{tokens.min()}, {tokens.max()}]")
    return tokens.astype(np.int64)


def _forward_cached(config: ExpertConfig, params: ModelParams, tokens: np.ndarray):
    tokens = _check_tokens(config, tokens)
    B, T = tokens.shape
    H, hd = config.num_heads, config.head_dim
    dtype = params["embed"].dtype
    cos, sin = rope_tables(T, hd, dtype)
    scale = dtype.type(1.0 / np.sqrt(hd))
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)

    h = params["embed"][tokens.reshape(-1)].reshape(B, T, -1)
    cache = {"tokens": tokens, "h0": h, "cos": cos, "sin": sin, "layers": []}

    for i in range(config.num_layers):
        p = f"layers.{i}."
        xn, r_attn = _rmsnorm(h, params[p + "attn_norm"])
        q = (xn @ params[p + "wq"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        k = (xn @ params[p + "wk"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        v = (xn @ params[p + "wv"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        q_rot = _apply_rope(q, cos, sin)
        k_rot = _apply_rope(k, cos, sin)
        scores = (q_rot @ k_rot.transpose(0, 1, 3, 2)) * scale
        scores = np.where(causal[None, None], dtype.type(-np.inf), scores)
        scores -= scores.max(axis=-1, keepdims=True)
        expd = np.exp(scores)
        probs = expd / expd.sum(axis=-1, keepdims=True)
        ctx = probs @ v
        ctx_flat = ctx.transpose(0, 2, 1, 3).reshape(B, T, -1)
        h_mid = h + ctx_flat @ params[p + "wo"]

        yn, r_ffn = _rmsnorm(h_mid, params[p + "ffn_norm"])
        g = yn @ params[p + "w_gate"]
        u = yn @ params[p + "w_up"]
        act, sig = _silu(g)
        h_out = h_mid + (act * u) @ params[p + "w_down"]

        cache["layers"].append({
            "h_in": h, "xn": xn, "r_attn": r_attn,
            "q_rot": q_rot, "k_rot": k_rot, "v": v, "probs": probs,
            "ctx_flat": ctx_flat, "h_mid": h_mid,
            "yn": yn, "r_ffn": r_ffn, "g": g, "u": u, "act": act, "sig": sig,
        })
        h = h_out

    hf, r_final = _rmsnorm(h, params["final_norm"])
    cache["h_last"], cache["hf"], cache["r_final"] = h, hf, r_final
    logits = hf @ params["embed"].T
    return logits, cache


def forward(config: ExpertConfig, params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    """Logits of shape (batch, seq, vocab) for next-token prediction."""
    logits, _ = _forward_cached(config, params, tokens)
    return logits


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def position_logprobs(config: ExpertConfig, params: ModelParams,
                      tokens: np.ndarray) -> np.ndarray:
    """Float64 log p(next token | prefix) at every position.

    Returns shape (seq, vocab) for 1-D input; row t conditions on tokens
    [0..t]. Each row sums to probability one.
    """
    logits = forward(config, params, tokens)
    out = _log_softmax64(logits)
    return out[0] if np.asarray(tokens).ndim == 1 else out


def next_token_logprobs(config: ExpertConfig, params: ModelParams,
                        context: np.ndarray) -> np.ndarray:
    """Float64 log distribution over the token following ``context`` (1-D)."""
    context = np.asarray(context)
    if context.ndim != 1:
        raise ValueError("context must be a 1-D token sequence")
    return position_logprobs(config, params, context)[-1]


def loss_and_grad(config: ExpertConfig, params: ModelParams,
                  inputs: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy and its gradient w.r.t. every parameter.

    ``inputs`` and ``targets`` are (batch, seq) int arrays with targets
    already shifted one position ahead of inputs.
    """
    logits, cache = _forward_cached(config, params, inputs)
    tokens = cache["tokens"]
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None, :]
    if targets.shape != tokens.shape:
        raise ValueError(f"targets shape {targets.shape} != inputs shape {tokens.shape}")
    if targets.min() < 0 or targets.max() >= config.vocab_size:
        raise TokenOutOfRange("target ids out of range")

    B, T = tokens.shape
    dtype = params["embed"].dtype
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(denom)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    loss = float(-picked.mean())
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    grads: ModelParams = {name: np.zeros_like(params[name]) for name in params}
    inv_n = dtype.type(1.0 / (B * T))
    dlogits = (expd / denom) * inv_n
    np.subtract.at(dlogits, (np.arange(B)[:, None], np.arange(T)[None, :], targets), inv_n)

    hf = cache["hf"]
    grads["embed"] += np.einsum("btv,btd->vd", dlogits, hf)
    dhf = dlogits @ params["embed"]
    dh, dg_final = _rmsnorm_backward(dhf, cache["h_last"], params["final_norm"],
                                     cache["r_final"])
    grads["final_norm"] += dg_final

    H, hd = config.num_heads, config.head_dim
    cos, sin = cache["cos"], cache["sin"]
    scale = dtype.type(1.0 / np.sqrt(hd))

    for i in reversed(range(config.num_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]

        # SwiGLU feed-forward block.
        d_ffn_out = dh
        su = c["act"] * c["u"]
        grads[p + "w_down"] += np.einsum("btf,btd->fd", su, d_ffn_out)
        d_su = d_ffn_out @ params[p + "w_down"].T
        d_act = d_su * c["u"]
        d_u = d_su * c["act"]
        d_g = d_act * (c["sig"] * (1.0 + c["g"] * (1.0 - c["sig"])))
        grads[p + "w_gate"] += np.einsum("btd,btf->df", c["yn"], d_g)
        grads[p + "w_up"] += np.einsum("btd,btf->df", c["yn"], d_u)
        d_yn = d_g @ params[p + "w_gate"].T + d_u @ params[p + "w_up"].T
        d_h_mid, dg_ffn = _rmsnorm_backward(d_yn, c["h_mid"], params[p + "ffn_norm"],
                                            c["r_ffn"])
        grads[p + "ffn_norm"] += dg_ffn
        dh = dh + d_h_mid

        # Attention block.
        d_attn_out = dh
        grads[p + "wo"] += np.einsum("btd,bte->de", c["ctx_flat"], d_attn_out)
        d_ctx_flat = d_attn_out @ params[p + "wo"].T
        B_, T_ = d_ctx_flat.shape[:2]
        d_ctx = d_ctx_flat.reshape(B_, T_, H, hd).transpose(0, 2, 1, 3)
        d_probs = d_ctx @ c["v"].transpose(0, 1, 3, 2)
        d_v = c["probs"].transpose(0, 1, 3, 2) @ d_ctx
        d_scores = c["probs"] * (d_probs - np.sum(d_probs * c["probs"], axis=-1,
                                                  keepdims=True))
        d_q_rot = (d_scores @ c["k_rot"]) * scale
        d_k_rot = (d_scores.transpose(0, 1, 3, 2) @ c["q_rot"]) * scale
        d_q = _rope_backward(d_q_rot, cos, sin)
        d_k = _rope_backward(d_k_rot, cos, sin)
        d_qf = d_q.transpose(0, 2, 1, 3).reshape(B_, T_, -1)
        d_kf = d_k.transpose(0, 2, 1, 3).reshape(B_, T_, -1)
        d_vf = d_v.transpose(0, 2, 1, 3).reshape(B_, T_, -1)
        grads[p + "wq"] += np.einsum("btd,bte->de", c["xn"], d_qf)
        grads[p + "wk"] += np.einsum("btd,bte->de", c["xn"], d_kf)
        grads[p + "wv"] += np.einsum("btd,bte->de", c["xn"], d_vf)
        d_xn = (d_qf @ params[p + "wq"].T + d_kf @ params[p + "wk"].T
                + d_vf @ params[p + "wv"].T)
        d_h_in, dg_attn = _rmsnorm_backward(d_xn, c["h_in"], params[p + "attn_norm"],
                                            c["r_attn"])
        grads[p + "attn_norm"] += dg_attn
        dh = dh + d_h_in

    np.add.at(grads["embed"], tokens.reshape(-1), dh.reshape(-1, dh.shape[-1]))
    return loss, grads


def global_grad_norm(grads: ModelParams) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g.astype(np.float64))))
    return float(np.sqrt(total))


if __name__ == "__main__":
    cfg = ExpertConfig(hidden_size=32, intermediate_size=96, num_heads=2, num_layers=2)
    p = init_params(cfg, seed=0)
    toks = np.arange(24).reshape(2, 12) % cfg.vocab_size
    loss, grads = loss_and_grad(cfg, p, toks[:, :-1], toks[:, 1:])
    print(f"params={param_count(cfg)} loss={loss:.4f} gnorm={global_grad_norm(grads):.4f}")
