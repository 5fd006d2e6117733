"""Toy pre-norm transformer and the weight containers every other module consumes.

Each block is ``h = x + Attn(rms(x))`` followed by ``y = h + MLP(rms(h))`` with a
parameter-free RMS norm, causal multi-head attention, a ReLU MLP, learned token
and position embeddings, and an output head tied to the token embedding.
Weights map row activations as ``x @ w``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .quantize import QuantizedTensor, dequantize

FORMAT_VERSION = 1
LAYER_TENSORS = ("w_q", "w_k", "w_v", "w_o", "mlp_up", "mlp_down")
RMS_EPS = 1e-6

TEXT, VISION = 0, 1


@dataclass(frozen=True)
class TransformerConfig:
    d: int = 32
    n_layers: int = 4
    n_heads: int = 1
    vocab_size: int = 64
    max_seq_len: int = 64
    d_ff: int = 0  # 0 means 4 * d

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d)
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        for name in ("d", "n_heads", "vocab_size", "max_seq_len", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def tensor_shape(self, name: str) -> tuple:
        return {
            "w_q": (self.d, self.d),
            "w_k": (self.d, self.d),
            "w_v": (self.d, self.d),
            "w_o": (self.d, self.d),
            "mlp_up": (self.d, self.d_ff),
            "mlp_down": (self.d_ff, self.d),
        }[name]


@dataclass(frozen=True, eq=False)
class LowRank:
    """Factor pair ``a @ b`` standing in for a dense matrix; either factor may be quantized."""

    a: Union[np.ndarray, QuantizedTensor]
    b: Union[np.ndarray, QuantizedTensor]

    @property
    def rank(self) -> int:
        return shape_of(self.a)[1]

    @property
    def shape(self) -> tuple:
        return (shape_of(self.a)[0], shape_of(self.b)[1])


Tensor = Union[np.ndarray, QuantizedTensor, LowRank]


def shape_of(t: Tensor) -> tuple:
    return tuple(t.shape)


def materialize(t: Tensor) -> np.ndarray:
    """Dense float64 view of any representation."""
    if isinstance(t, LowRank):
        return materialize(t.a) @ materialize(t.b)
    if isinstance(t, QuantizedTensor):
        return dequantize(t)
    return np.asarray(t, dtype=np.float64)


def param_count(t: Tensor) -> int:
    """Stored weight count of the active representation."""
    if isinstance(t, LowRank):
        return param_count(t.a) + param_count(t.b)
    return int(np.prod(shape_of(t)))


@dataclass(frozen=True, eq=False)
class LayerWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    mlp_up: Tensor
    mlp_down: Tensor

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in LAYER_TENSORS}

    def param_count(self) -> int:
        return sum(param_count(t) for t in self.tensors().values())

    def dense(self) -> dict:
        return {name: materialize(t) for name, t in self.tensors().items()}


@dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    config: TransformerConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: tuple
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate(self)

    def replace_layer(self, index: int, **tensors) -> "ModelCheckpoint":
        layers = list(self.layers)
        layers[index] = replace(layers[index], **tensors)
        return replace(self, layers=tuple(layers))

    def original_param_count(self) -> int:
        """Dense parameter count of the per-layer matrices (embeddings excluded)."""
        per_layer = sum(int(np.prod(self.config.tensor_shape(n))) for n in LAYER_TENSORS)
        return per_layer * self.config.n_layers

    def layer_param_counts(self) -> list:
        return [layer.param_count() for layer in self.layers]


def _check_array(name, arr, shape):
    if isinstance(arr, np.ndarray):
        if tuple(arr.shape) != tuple(shape):
            raise ValueError(f"{name}: shape {arr.shape} != declared {shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: non-finite values")
    elif isinstance(arr, QuantizedTensor):
        if tuple(arr.shape) != tuple(shape):
            raise ValueError(f"{name}: shape {arr.shape} != declared {shape}")
    else:
        raise TypeError(f"{name}: unsupported tensor type {type(arr).__name__}")


def validate(model: ModelCheckpoint) -> None:
    cfg = model.config
    if len(model.layers) != cfg.n_layers:
        raise ValueError(f"layer count {len(model.layers)} != config.n_layers {cfg.n_layers}")
    _check_array("tok_emb", model.tok_emb, (cfg.vocab_size, cfg.d))
    _check_array("pos_emb", model.pos_emb, (cfg.max_seq_len, cfg.d))
    for i, layer in enumerate(model.layers):
        for name, t in layer.tensors().items():
            shape = cfg.tensor_shape(name)
            if isinstance(t, LowRank):
                r = shape_of(t.a)[1]
                if r < 1 or r >= min(shape) or shape_of(t.b)[0] != r:
                    raise ValueError(f"layers.{i}.{name}: bad low-rank factor shapes")
                _check_array(f"layers.{i}.{name}.a", t.a, (shape[0], r))
                _check_array(f"layers.{i}.{name}.b", t.b, (r, shape[1]))
            else:
                _check_array(f"layers.{i}.{name}", t, shape)


def init_model(config: TransformerConfig, seed: int = 0) -> ModelCheckpoint:
    """Random float32 weights, scaled so activations stay O(1) at init."""
    rng = np.random.default_rng(seed)
    d, f = config.d, config.d_ff
    resid = 1.0 / np.sqrt(2.0 * max(config.n_layers, 1))

    def mat(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                w_q=mat((d, d), d**-0.5),
                w_k=mat((d, d), d**-0.5),
                w_v=mat((d, d), d**-0.5),
                w_o=mat((d, d), d**-0.5 * resid),
                mlp_up=mat((d, f), d**-0.5),
                mlp_down=mat((f, d), f**-0.5 * resid),
            )
        )
    return ModelCheckpoint(
        config,
        tok_emb=mat((config.vocab_size, d), 0.2),
        pos_emb=mat((config.max_seq_len, d), 0.1),
        layers=tuple(layers),
    )


# --------------------------------------------------------------------------- forward


@dataclass(frozen=True, eq=False)
class ActivationBatch:
    """Row activations for one layer: ``x`` is N x d; ``token_kinds`` tags rows text/vision."""

    x: np.ndarray
    token_kinds: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("ActivationBatch needs an N x d matrix with N >= 1")
        if not np.all(np.isfinite(x)):
            raise ValueError("ActivationBatch rows must be finite")

    @property
    def n(self) -> int:
        return self.x.shape[0]


def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def softmax(y: np.ndarray, axis: int = -1) -> np.ndarray:
    z = y - np.max(y, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def causal_mask(n: int) -> np.ndarray:
    """True where key position is after the query position."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def _tokens(model: ModelCheckpoint, tokens) -> np.ndarray:
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.ndim != 2 or tok.shape[1] < 1:
        raise ValueError("tokens must be a (batch, seq) array")
    if tok.shape[1] > model.config.max_seq_len:
        raise ValueError(f"sequence length {tok.shape[1]} exceeds max_seq_len")
    if tok.size and (tok.min() < 0 or tok.max() >= model.config.vocab_size):
        raise ValueError("token id out of vocabulary")
    return tok.astype(np.int64)


def _attention(xn, wq, wk, wv, n_heads):
    b, t, d = xn.shape
    dh = d // n_heads
    q = (xn @ wq).reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)
    k = (xn @ wk).reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)
    v = (xn @ wv).reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    scores = np.where(causal_mask(t), -np.inf, scores)
    probs = softmax(scores)
    out = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return out, probs, (q, k, v)


@dataclass
class LayerTrace:
    x_in: np.ndarray  # (B, T, d) residual stream entering the block
    attn_in: np.ndarray  # rms(x_in), input of w_q / w_k / w_v
    attn_mix: np.ndarray  # input of w_o
    probs: np.ndarray  # (B, H, T, T)
    h: np.ndarray  # residual after attention
    mlp_in: np.ndarray  # rms(h), input of mlp_up
    mlp_act: np.ndarray  # relu(mlp_in @ mlp_up), input of mlp_down
    x_out: np.ndarray
    extra: dict = field(default_factory=dict)


def trace(model: ModelCheckpoint, tokens, keep_qk: bool = False):
    """Run the model and keep every block's intermediate activations.

    Returns ``(layer_traces, final_hidden)``; all arrays are float64.
    """
    tok = _tokens(model, tokens)
    t = tok.shape[1]
    x = model.tok_emb.astype(np.float64)[tok] + model.pos_emb.astype(np.float64)[:t]
    traces = []
    for layer in model.layers:
        w = layer.dense()
        xn = rms_norm(x)
        mix, probs, qkv = _attention(xn, w["w_q"], w["w_k"], w["w_v"], model.config.n_heads)
        h = x + mix @ w["w_o"]
        hn = rms_norm(h)
        act = np.maximum(hn @ w["mlp_up"], 0.0)
        y = h + act @ w["mlp_down"]
        tr = LayerTrace(x, xn, mix, probs, h, hn, act, y)
        if keep_qk:
            tr.extra["qkv"] = qkv
        traces.append(tr)
        x = y
    return traces, x


def logits(model: ModelCheckpoint, tokens) -> np.ndarray:
    _, final = trace(model, tokens)
    return rms_norm(final) @ model.tok_emb.astype(np.float64).T


def _flat_kinds(calib, n_rows):
    kinds = getattr(calib, "token_kinds", None)
    if kinds is None:
        return None
    return np.asarray(kinds).reshape(-1)[:n_rows]


def forward_collect(model: ModelCheckpoint, calib) -> list:
    """Per-layer ``(X_in, X_out)`` activation batches over every calibration token.

    Rows are ordered sequence-major. Deterministic in the model and tokens.
    """
    tokens = np.asarray(getattr(calib, "sequences", calib))
    if tokens.size == 0:
        raise ValueError("empty calibration set")
    traces, _ = trace(model, tokens)
    out = []
    for tr in traces:
        d = tr.x_in.shape[-1]
        x_in = tr.x_in.reshape(-1, d)
        kinds = _flat_kinds(calib, x_in.shape[0])
        out.append(
            (ActivationBatch(x_in, kinds), ActivationBatch(tr.x_out.reshape(-1, d), kinds))
        )
    return out


# --------------------------------------------------------------------------- training


def _rms_backward(x, dn):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    n = x / r
    return (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r


def loss_and_grads(params: dict, config: TransformerConfig, tokens: np.ndarray):
    """Mean next-token cross-entropy and its gradient for dense float64 params.

    ``params`` has keys ``tok_emb``, ``pos_emb`` and ``layers.{i}.{name}``.
    """
    tok = np.asarray(tokens, dtype=np.int64)
    bsz, t = tok.shape
    nh, dh = config.n_heads, config.head_dim
    emb = params["tok_emb"]
    x = emb[tok] + params["pos_emb"][:t]
    mask = causal_mask(t)
    cache = []
    for i in range(config.n_layers):
        p = lambda n: params[f"layers.{i}.{n}"]  # noqa: E731
        xn = rms_norm(x)
        q = (xn @ p("w_q")).reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
        k = (xn @ p("w_k")).reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
        v = (xn @ p("w_v")).reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
        sc = np.where(mask, -np.inf, q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh))
        pr = softmax(sc)
        mix = (pr @ v).transpose(0, 2, 1, 3).reshape(bsz, t, -1)
        h = x + mix @ p("w_o")
        hn = rms_norm(h)
        pre = hn @ p("mlp_up")
        act = np.maximum(pre, 0.0)
        y = h + act @ p("mlp_down")
        cache.append((x, xn, q, k, v, pr, mix, h, hn, pre, act))
        x = y

    xf = rms_norm(x)
    lg = xf @ emb.T
    pred = softmax(lg[:, :-1])
    tgt = tok[:, 1:]
    count = bsz * (t - 1)
    picked = np.take_along_axis(pred, tgt[..., None], axis=-1)[..., 0]
    loss = -np.mean(np.log(picked))

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dlg = np.zeros_like(lg)
    dlg[:, :-1] = pred
    np.put_along_axis(dlg[:, :-1], tgt[..., None], np.take_along_axis(pred, tgt[..., None], -1) - 1, -1)
    dlg /= count
    grads["tok_emb"] += np.einsum("btv,btd->vd", dlg, xf)
    dx = _rms_backward(x, dlg @ emb)

    for i in reversed(range(config.n_layers)):
        p = lambda n: params[f"layers.{i}.{n}"]  # noqa: E731
        g = lambda n: grads[f"layers.{i}.{n}"]  # noqa: E731
        x_in, xn, q, k, v, pr, mix, h, hn, pre, act = cache[i]
        dy = dx
        g("mlp_down")[...] += np.einsum("btf,btd->fd", act, dy)
        dact = dy @ p("mlp_down").T
        dpre = dact * (pre > 0)
        g("mlp_up")[...] += np.einsum("btd,btf->df", hn, dpre)
        dh_ = dy + _rms_backward(h, dpre @ p("mlp_up").T)
        g("w_o")[...] += np.einsum("btd,bte->de", mix, dh_)
        dmix = (dh_ @ p("w_o").T).reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
        dpr = dmix @ v.transpose(0, 1, 3, 2)
        dv = pr.transpose(0, 1, 3, 2) @ dmix
        dsc = pr * (dpr - np.sum(dpr * pr, axis=-1, keepdims=True)) / np.sqrt(dh)
        dq = dsc @ k
        dk = dsc.transpose(0, 1, 3, 2) @ q
        merge = lambda a: a.transpose(0, 2, 1, 3).reshape(bsz, t, -1)  # noqa: E731
        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        g("w_q")[...] += np.einsum("btd,bte->de", xn, dq)
        g("w_k")[...] += np.einsum("btd,bte->de", xn, dk)
        g("w_v")[...] += np.einsum("btd,bte->de", xn, dv)
        dxn = dq @ p("w_q").T + dk @ p("w_k").T + dv @ p("w_v").T
        dx = dh_ + _rms_backward(x_in, dxn)

    np.add.at(grads["tok_emb"], tok, dx)
    grads["pos_emb"][:t] += dx.sum(axis=0)
    return loss, grads


def to_params(model: ModelCheckpoint) -> dict:
    params = {
        "tok_emb": model.tok_emb.astype(np.float64),
        "pos_emb": model.pos_emb.astype(np.float64),
    }
    for i, layer in enumerate(model.layers):
        for name, t in layer.dense().items():
            params[f"layers.{i}.{name}"] = t.copy()
    return params


def from_params(params: dict, config: TransformerConfig) -> ModelCheckpoint:
    f32 = lambda a: np.asarray(a, dtype=np.float32)  # noqa: E731
    layers = tuple(
        LayerWeights(**{n: f32(params[f"layers.{i}.{n}"]) for n in LAYER_TENSORS})
        for i in range(config.n_layers)
    )
    return ModelCheckpoint(config, f32(params["tok_emb"]), f32(params["pos_emb"]), layers)


def train(
    model: ModelCheckpoint,
    batches,
    steps: int,
    lr: float = 3e-3,
    weight_decay: float = 0.0,
    betas=(0.9, 0.98),
    warmup: int = 50,
) -> ModelCheckpoint:
    """AdamW with linear warmup and cosine decay; ``batches(step)`` yields token arrays."""
    cfg = model.config
    params = to_params(model)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    s = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2 = betas
    for step in range(1, steps + 1):
        _, grads = loss_and_grads(params, cfg, batches(step))
        warm = min(1.0, step / max(warmup, 1))
        rate = lr * warm * 0.5 * (1 + np.cos(np.pi * step / steps))
        for k in params:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            s[k] = b2 * s[k] + (1 - b2) * grads[k] ** 2
            mhat = m[k] / (1 - b1**step)
            shat = s[k] / (1 - b2**step)
            decay = weight_decay if k.startswith("layers.") else 0.0
            params[k] -= rate * (mhat / (np.sqrt(shat) + 1e-8) + decay * params[k])
    return from_params(params, cfg)
