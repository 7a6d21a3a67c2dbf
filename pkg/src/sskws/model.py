"""Transformer acoustic model over MFCC frames, with explicit backward passes.

Architecture: linear input projection of each 40-dim MFCC vector to the
encoder dimension, learned positional embeddings, a stack of identical
pre-norm transformer blocks (multi-head self-attention and a GELU MLP, each
with a residual connection), mean pooling over time into a two-layer MLP
classification head. Pretraining swaps the classification head for a linear
per-time-step regression head and adds a learned mask token.

Parameters are a flat dict of named numpy arrays; gradients come back under
the same names. Everything is dtype-generic (float32 for training, float64
for gradient checking).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data2vec import MaskSpec, apply_mask, pretrain_loss_and_grad
from .optim import smoothed_cross_entropy_batch

LN_EPS = 1e-5
INIT_STD = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class NonFiniteActivationError(RuntimeError):
    """A forward pass produced NaN or infinity; the message names the block."""


@dataclass(frozen=True)
class KwtConfig:
    """Architecture hyperparameters of one model variant.

    head_hidden is the classifier MLP's hidden width; None means "same as
    mlp_dim" resolved at construction, kept separate so block and head widths
    can vary independently.
    """

    n_blocks: int
    encoder_dim: int
    n_heads: int
    mlp_dim: int
    n_classes: int = 35
    seq_len: int = 98
    feature_dim: int = 40
    head_hidden: int | None = None

    def __post_init__(self):
        if self.encoder_dim % self.n_heads != 0:
            raise ValueError("encoder_dim must be divisible by n_heads")
        if self.head_hidden is None:
            object.__setattr__(self, "head_hidden", self.mlp_dim)
        for name in ("n_blocks", "encoder_dim", "n_heads", "mlp_dim", "n_classes", "seq_len", "feature_dim", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.encoder_dim // self.n_heads


# (n_blocks, encoder_dim, n_heads, mlp_dim); the three named variants keep
# head_dim = 64 and 12 blocks, "tiny" is the desk-scale test model.
VARIANTS = {
    "kwt-1": (12, 64, 1, 256),
    "kwt-2": (12, 128, 2, 512),
    "kwt-3": (12, 192, 3, 768),
    "tiny": (2, 64, 1, 256),
}


def kwt_config(variant: str, n_classes: int = 35, seq_len: int = 98, feature_dim: int = 40) -> KwtConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    n_blocks, dim, heads, mlp = VARIANTS[variant]
    return KwtConfig(n_blocks, dim, heads, mlp, n_classes=n_classes, seq_len=seq_len, feature_dim=feature_dim)


def param_shapes(cfg: KwtConfig, kind: str = "supervised") -> dict[str, tuple[int, ...]]:
    """Canonically ordered tensor name -> shape map for one model.

    kind "supervised" has the classification head; "pretrain" has the mask
    token and the regression head instead.
    """
    if kind not in ("supervised", "pretrain"):
        raise ValueError(f"kind must be 'supervised' or 'pretrain', got {kind!r}")
    d, mlp = cfg.encoder_dim, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (cfg.feature_dim, d),
        "embed.bias": (d,),
        "pos": (cfg.seq_len, d),
    }
    if kind == "pretrain":
        shapes["mask_token"] = (d,)
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "attn.qkv.weight"] = (d, 3 * d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.out.weight"] = (d, d)
        shapes[p + "attn.out.bias"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, mlp)
        shapes[p + "mlp.fc1.bias"] = (mlp,)
        shapes[p + "mlp.fc2.weight"] = (mlp, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    if kind == "supervised":
        shapes["cls_head.fc1.weight"] = (d, cfg.head_hidden)
        shapes["cls_head.fc1.bias"] = (cfg.head_hidden,)
        shapes["cls_head.fc2.weight"] = (cfg.head_hidden, cfg.n_classes)
        shapes["cls_head.fc2.bias"] = (cfg.n_classes,)
    else:
        shapes["reg_head.weight"] = (d, d)
        shapes["reg_head.bias"] = (d,)
    return shapes


def count_parameters(cfg: KwtConfig) -> int:
    """Scalar learnables of the supervised model (head included, no pretrain extras)."""
    return sum(int(np.prod(s)) for s in param_shapes(cfg, "supervised").values())


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 std rejected and redrawn."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_params(
    cfg: KwtConfig, rng: np.random.Generator, kind: str = "supervised", dtype=np.float32
) -> dict[str, np.ndarray]:
    """Fresh parameters: truncated-normal weights (std 0.02), zero biases, unit norm gains."""
    params = {}
    for name, shape in param_shapes(cfg, kind).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = truncated_normal(rng, shape, INIT_STD, dtype)
    return params


@dataclass
class EncoderOutput:
    """Per-block hidden states plus the time-mean of the final block.

    hiddens has exactly n_blocks entries of shape (..., seq_len, encoder_dim);
    pooled equals the column mean of hiddens[-1].
    """

    hiddens: list[np.ndarray]
    pooled: np.ndarray


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh form of GELU; smooth, self-contained derivative below
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = x.reshape(-1, w.shape[0]) @ w
    return y.reshape(*x.shape[:-1], w.shape[1]) + b


def _linear_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    dy2 = dy.reshape(-1, w.shape[1])
    x2 = x.reshape(-1, w.shape[0])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, dw, db


def _ln_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def _ln_backward(dy: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, t, h * dh)


def encoder_forward(
    params: dict[str, np.ndarray],
    cfg: KwtConfig,
    x: np.ndarray,
    masks: MaskSpec | np.ndarray | None = None,
    with_cache: bool = False,
):
    """Run the encoder on (B, T, F) features or a single (T, F) matrix.

    With ``masks`` (boolean (B, T) or a MaskSpec), projected tokens at masked
    steps are replaced by the learned mask token before the positional
    embedding is added; this requires pretrain-kind params. Returns
    (EncoderOutput, cache); the cache (populated when with_cache=True) feeds
    encoder_backward. Raises NonFiniteActivationError naming the first block
    that produces a non-finite value.
    """
    single = x.ndim == 2
    if single:
        if with_cache:
            raise ValueError("with_cache requires batched input")
        x = x[None]
    if x.shape[1] != cfg.seq_len or x.shape[2] != cfg.feature_dim:
        raise ValueError(f"expected input (B, {cfg.seq_len}, {cfg.feature_dim}), got {x.shape}")

    mask_arr = None
    tokens = _linear(x, params["embed.weight"], params["embed.bias"])
    if masks is not None:
        mask_arr = masks.masked if isinstance(masks, MaskSpec) else np.asarray(masks)
        if mask_arr.ndim == 1:
            mask_arr = mask_arr[None]
        tokens = apply_mask(tokens, mask_arr, params["mask_token"])
    h = tokens + params["pos"]

    scale = 1.0 / math.sqrt(cfg.head_dim)
    d = cfg.encoder_dim
    hiddens = []
    block_caches = []
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        a, xhat1, inv1 = _ln_forward(h, params[p + "ln1.gain"], params[p + "ln1.bias"])
        qkv = _linear(a, params[p + "attn.qkv.weight"], params[p + "attn.qkv.bias"])
        q = _split_heads(qkv[..., :d], cfg.n_heads)
        k = _split_heads(qkv[..., d : 2 * d], cfg.n_heads)
        v = _split_heads(qkv[..., 2 * d :], cfg.n_heads)
        scores = np.matmul(q, k.swapaxes(-1, -2)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(np.matmul(probs, v))
        h1 = h + _linear(ctx, params[p + "attn.out.weight"], params[p + "attn.out.bias"])

        m, xhat2, inv2 = _ln_forward(h1, params[p + "ln2.gain"], params[p + "ln2.bias"])
        u = _linear(m, params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"])
        g = gelu(u)
        h2 = h1 + _linear(g, params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"])

        if not np.isfinite(h2).all():
            raise NonFiniteActivationError(f"non-finite activation leaving block {i}")
        hiddens.append(h2)
        if with_cache:
            block_caches.append(
                {"xhat1": xhat1, "inv1": inv1, "a": a, "q": q, "k": k, "v": v,
                 "probs": probs, "ctx": ctx, "xhat2": xhat2, "inv2": inv2, "m": m, "u": u, "g": g}
            )
        h = h2

    pooled = h.mean(axis=1)
    if single:
        return EncoderOutput(hiddens=[hd[0] for hd in hiddens], pooled=pooled[0]), None
    cache = {"x": x, "masks": mask_arr, "blocks": block_caches} if with_cache else None
    return EncoderOutput(hiddens=hiddens, pooled=pooled), cache


def encoder_backward(
    params: dict[str, np.ndarray], cfg: KwtConfig, cache: dict, d_last: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of every encoder parameter given the gradient at the last block's output.

    ``cache`` comes from encoder_forward(with_cache=True) on the same params.
    When the forward pass was masked, the gradient of the mask token is
    included and no input-projection gradient flows through masked rows.
    """
    scale = 1.0 / math.sqrt(cfg.head_dim)
    grads: dict[str, np.ndarray] = {}
    dh = d_last
    for i in reversed(range(cfg.n_blocks)):
        p = f"blocks.{i}."
        c = cache["blocks"][i]
        # MLP branch: h2 = h1 + fc2(gelu(fc1(ln2(h1))))
        dg, grads[p + "mlp.fc2.weight"], grads[p + "mlp.fc2.bias"] = _linear_backward(
            c["g"], params[p + "mlp.fc2.weight"], dh
        )
        du = dg * gelu_grad(c["u"])
        dm, grads[p + "mlp.fc1.weight"], grads[p + "mlp.fc1.bias"] = _linear_backward(
            c["m"], params[p + "mlp.fc1.weight"], du
        )
        dh1_ln, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = _ln_backward(
            dm, c["xhat2"], c["inv2"], params[p + "ln2.gain"]
        )
        dh1 = dh + dh1_ln

        # attention branch: h1 = h + out(attention(ln1(h)))
        dctx, grads[p + "attn.out.weight"], grads[p + "attn.out.bias"] = _linear_backward(
            c["ctx"], params[p + "attn.out.weight"], dh1
        )
        dctx = _split_heads(dctx, cfg.n_heads)
        dprobs = np.matmul(dctx, c["v"].swapaxes(-1, -2))
        dv = np.matmul(c["probs"].swapaxes(-1, -2), dctx)
        dscores = (dprobs - (dprobs * c["probs"]).sum(axis=-1, keepdims=True)) * c["probs"] * scale
        dq = np.matmul(dscores, c["k"])
        dk = np.matmul(dscores.swapaxes(-1, -2), c["q"])
        dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
        da, grads[p + "attn.qkv.weight"], grads[p + "attn.qkv.bias"] = _linear_backward(
            c["a"], params[p + "attn.qkv.weight"], dqkv
        )
        dh_ln, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = _ln_backward(
            da, c["xhat1"], c["inv1"], params[p + "ln1.gain"]
        )
        dh = dh1 + dh_ln

    grads["pos"] = dh.sum(axis=0)
    d_tokens = dh
    if cache["masks"] is not None:
        grads["mask_token"] = d_tokens[cache["masks"]].sum(axis=0)
        d_tokens = d_tokens * (~cache["masks"])[..., None]
    _, grads["embed.weight"], grads["embed.bias"] = _linear_backward(
        cache["x"], params["embed.weight"], d_tokens
    )
    return grads


def classify(out: EncoderOutput | np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Class logits from the pooled encoding via the two-layer GELU MLP head."""
    pooled = out.pooled if isinstance(out, EncoderOutput) else out
    z = pooled @ params["cls_head.fc1.weight"] + params["cls_head.fc1.bias"]
    return gelu(z) @ params["cls_head.fc2.weight"] + params["cls_head.fc2.bias"]


def regress(out: EncoderOutput | np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Per-time-step linear prediction from the final block's hidden states."""
    h = out.hiddens[-1] if isinstance(out, EncoderOutput) else out
    return _linear(h, params["reg_head.weight"], params["reg_head.bias"])


def supervised_loss_grads(
    params: dict[str, np.ndarray],
    cfg: KwtConfig,
    x: np.ndarray,
    labels: np.ndarray,
    label_smoothing: float,
):
    """Smoothed cross entropy on a batch plus gradients for every parameter.

    Returns (loss, logits, grads); grads covers exactly the supervised
    parameter set.
    """
    out, cache = encoder_forward(params, cfg, x, with_cache=True)
    pooled = out.pooled
    z = pooled @ params["cls_head.fc1.weight"] + params["cls_head.fc1.bias"]
    zg = gelu(z)
    logits = zg @ params["cls_head.fc2.weight"] + params["cls_head.fc2.bias"]
    loss, dlogits = smoothed_cross_entropy_batch(logits, labels, label_smoothing)

    grads: dict[str, np.ndarray] = {}
    grads["cls_head.fc2.weight"] = zg.T @ dlogits
    grads["cls_head.fc2.bias"] = dlogits.sum(axis=0)
    dzg = dlogits @ params["cls_head.fc2.weight"].T
    dz = dzg * gelu_grad(z)
    grads["cls_head.fc1.weight"] = pooled.T @ dz
    grads["cls_head.fc1.bias"] = dz.sum(axis=0)
    dpooled = dz @ params["cls_head.fc1.weight"].T

    d_last = np.broadcast_to((dpooled / cfg.seq_len)[:, None, :], out.hiddens[-1].shape).copy()
    grads.update(encoder_backward(params, cfg, cache, d_last))
    return loss, logits, grads


def masked_prediction_loss_grads(
    params: dict[str, np.ndarray],
    cfg: KwtConfig,
    x: np.ndarray,
    masks: np.ndarray,
    targets: np.ndarray,
):
    """Masked-step MSE against precomputed targets plus gradients for every parameter.

    ``masks`` is a boolean (B, T) array; the student encodes the masked token
    sequence while the targets come from an unmasked teacher pass. Returns
    (loss, predictions, grads).
    """
    out, cache = encoder_forward(params, cfg, x, masks=masks, with_cache=True)
    h_last = out.hiddens[-1]
    preds = _linear(h_last, params["reg_head.weight"], params["reg_head.bias"])
    loss, dpred = pretrain_loss_and_grad(preds, targets, masks)

    grads: dict[str, np.ndarray] = {}
    d_last, grads["reg_head.weight"], grads["reg_head.bias"] = _linear_backward(
        h_last, params["reg_head.weight"], dpred
    )
    grads.update(encoder_backward(params, cfg, cache, d_last))
    return loss, preds, grads
