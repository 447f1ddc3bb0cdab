"""A small bi-encoder with a hand-written backward pass.

Architecture (pre-norm, no bias terms)::

    x = token_embedding[ids]
    for each layer:
        x = x + Attn(LN(x))     # RoPE on q/k, global or sliding-window mask
        x = x + FFN(LN(x))      # gelu (tanh form) or silu
    x = LN(x)
    e = normalize(pool(x) @ projection)

With ``layers == 0`` the encoder is a bag of embeddings: the mean of the
token rows is projected and normalized (pooling setting ignored).

Sequences of different lengths are right-padded within a batch; padded
keys are masked out of attention and padded positions never reach the
pooled output, so their gradient is exactly zero.

All functions preserve the floating dtype of the weights, so the same code
runs in float64 for training and in ``np.longdouble`` for gradient checks.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CLS_ID = 0
LN_EPS = 1e-5
_MASK_FILL = -1e30
_GELU_C = 0.7978845608028654  # sqrt(2/pi)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 256
    dim: int = 32
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 64
    activation: str = "gelu"
    max_len: int = 64
    rope_theta: float = 10000.0
    global_every_k: int = 3
    local_window: int = 32
    pooling: str = "cls"

    def __post_init__(self):
        for name in ("vocab_size", "dim", "heads", "ffn_dim", "max_len", "global_every_k", "local_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.layers < 0:
            raise ValueError(f"layers must be non-negative, got {self.layers}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 2:
            raise ValueError(f"head dim {self.dim // self.heads} must be even for RoPE")
        if self.activation not in ("gelu", "silu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pooling not in ("cls", "mean", "last_token"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if not self.rope_theta > 0:
            raise ValueError("rope_theta must be positive")
        if self.local_window > self.max_len:
            raise ValueError(f"local_window {self.local_window} exceeds max_len {self.max_len}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def special_len(self) -> int:
        """Positions consumed by the prepended CLS token."""
        return 1 if (self.pooling == "cls" and self.layers > 0) else 0

    def is_global(self, layer: int) -> bool:
        return (layer + 1) % self.global_every_k == 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def weight_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape table for every trainable tensor, in canonical order."""
    D, F = config.dim, config.ffn_dim
    shapes = {"token_embedding": (config.vocab_size, D)}
    for l in range(config.layers):
        p = f"layers.{l}."
        shapes[p + "attn_norm"] = (D,)
        shapes[p + "wq"] = (D, D)
        shapes[p + "wk"] = (D, D)
        shapes[p + "wv"] = (D, D)
        shapes[p + "wo"] = (D, D)
        shapes[p + "ffn_norm"] = (D,)
        shapes[p + "w_in"] = (D, F)
        shapes[p + "w_out"] = (F, D)
    if config.layers:
        shapes["final_norm"] = (D,)
    shapes["projection"] = (D, D)
    return shapes


def init_weights(config: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic Gaussian init with std ``1/sqrt(dim)``; norm gains start at 1."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.dim)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith("norm"):
            weights[name] = np.ones(shape)
        else:
            weights[name] = rng.standard_normal(shape) * scale
    return weights


def check_weights(weights: dict, config: EncoderConfig) -> None:
    expected = weight_shapes(config)
    if set(weights) != set(expected):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise ValueError(f"weight names do not match config (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {weights[name].shape}")


def rope_rescale(config: EncoderConfig, new_theta: float, new_max_len: int) -> EncoderConfig:
    """Config for context extension: larger max length and RoPE base."""
    if new_max_len < config.max_len:
        raise ValueError(f"cannot shrink max_len from {config.max_len} to {new_max_len}")
    return dataclasses.replace(config, rope_theta=float(new_theta), max_len=int(new_max_len))


# --------------------------------------------------------------------------
# rotary position encoding


def rope_angles(positions, head_dim: int, theta: float, dtype=np.float64) -> np.ndarray:
    """Angles ``[len(positions), head_dim // 2]``; pair ``t`` turns at ``theta**(-2t/head_dim)``."""
    if head_dim % 2:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    pos = np.asarray(positions, dtype=dtype)
    t = np.arange(head_dim // 2, dtype=dtype)
    inv_freq = np.asarray(theta, dtype=dtype) ** (-2 * t / dtype(head_dim))
    return pos[:, None] * inv_freq[None, :]


def _rotate(x, cos, sin):
    out = np.empty_like(x)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def _rotate_back(g, cos, sin):
    out = np.empty_like(g)
    ge, go = g[..., 0::2], g[..., 1::2]
    out[..., 0::2] = ge * cos + go * sin
    out[..., 1::2] = -ge * sin + go * cos
    return out


def rope_apply(x, positions, theta: float) -> np.ndarray:
    """Rotate consecutive pairs ``(2t, 2t+1)`` of ``x`` [seq, head_dim] by position.

    Rows at position 0 pass through unchanged.
    """
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if x.shape[-1] % 2:
        raise ValueError(f"head_dim must be even, got {x.shape[-1]}")
    ang = rope_angles(positions, x.shape[-1], theta, dtype=x.dtype.type)
    return _rotate(x, np.cos(ang), np.sin(ang))


# --------------------------------------------------------------------------
# building blocks


def _layer_norm(x, gain):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gain, (xhat, rstd)


def _layer_norm_back(dy, gain, cache):
    xhat, rstd = cache
    dgain = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain


def _act(u, kind):
    if kind == "gelu":
        t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
        return 0.5 * u * (1 + t), t
    sig = 0.5 * (1 + np.tanh(0.5 * u))
    return u * sig, sig


def _act_back(du_out, u, aux, kind):
    if kind == "gelu":
        t = aux
        return du_out * (0.5 * (1 + t) + 0.5 * u * (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * u * u))
    sig = aux
    return du_out * sig * (1 + u * (1 - sig))


def _softmax_last(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def prepare_batch(config: EncoderConfig, batch: Sequence[Sequence[int]], stats: dict | None = None):
    """Validate, prepend CLS if needed and right-pad ``batch``.

    Returns ``(ids [B, L], mask [B, L], lengths [B])``. When ``stats`` is
    given, the number of real and padding positions is accumulated into it.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    seqs = []
    for k, seq in enumerate(batch):
        seq = [int(t) for t in seq]
        if not seq:
            raise ValueError(f"sequence {k} is empty")
        if min(seq) < 0 or max(seq) >= config.vocab_size:
            raise ValueError(f"sequence {k} has a token id outside [0, {config.vocab_size})")
        if config.special_len:
            seq = [CLS_ID] + seq
        if len(seq) > config.max_len:
            raise ValueError(f"sequence {k} has length {len(seq)} > max_len {config.max_len}")
        seqs.append(seq)
    lengths = np.array([len(s) for s in seqs])
    L = int(lengths.max())
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
        mask[b, : len(s)] = True
    if stats is not None:
        stats["tokens"] = stats.get("tokens", 0) + int(lengths.sum())
        stats["padding_tokens"] = stats.get("padding_tokens", 0) + int(ids.size - lengths.sum())
        stats["batches"] = stats.get("batches", 0) + 1
    return ids, mask, lengths


# --------------------------------------------------------------------------
# forward / backward


def forward(weights: dict, config: EncoderConfig, batch, stats: dict | None = None):
    """Encode ``batch`` and keep everything the backward pass needs.

    Returns ``(embeddings [B, dim], cache)``.
    """
    ids, mask, lengths = prepare_batch(config, batch, stats)
    E = weights["token_embedding"]
    dt = E.dtype.type
    B, L = ids.shape
    x = E[ids]
    cache = {"ids": ids, "mask": mask, "lengths": lengths, "layers": []}
    if config.layers == 0:
        pooled = (x * mask[..., None]).sum(axis=1) / lengths[:, None].astype(dt)
    else:
        H, hd = config.heads, config.head_dim
        ang = rope_angles(np.arange(L), hd, config.rope_theta, dtype=dt)
        cos, sin = np.cos(ang), np.sin(ang)
        cache["rope"] = (cos, sin)
        key_ok = mask[:, None, None, :]
        pos = np.arange(L)
        window = np.abs(pos[:, None] - pos[None, :]) < config.local_window
        scale = 1.0 / np.sqrt(dt(hd))
        for l in range(config.layers):
            p = f"layers.{l}."
            c = {"x_in": x}
            h, c["ln1"] = _layer_norm(x, weights[p + "attn_norm"])
            c["h"] = h
            q = (h @ weights[p + "wq"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
            k = (h @ weights[p + "wk"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
            v = (h @ weights[p + "wv"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
            qr, kr = _rotate(q, cos, sin), _rotate(k, cos, sin)
            allowed = key_ok if config.is_global(l) else key_ok & window[None, None]
            s = np.where(allowed, (qr @ kr.transpose(0, 1, 3, 2)) * scale, dt(_MASK_FILL))
            attn = _softmax_last(s)
            o = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, config.dim)
            c.update(qr=qr, kr=kr, v=v, attn=attn, o=o)
            x = x + o @ weights[p + "wo"]
            c["x_mid"] = x
            h2, c["ln2"] = _layer_norm(x, weights[p + "ffn_norm"])
            u = h2 @ weights[p + "w_in"]
            a, c["act_aux"] = _act(u, config.activation)
            c.update(h2=h2, u=u, a=a)
            x = x + a @ weights[p + "w_out"]
            cache["layers"].append(c)
        xf, cache["lnf"] = _layer_norm(x, weights["final_norm"])
        cache["xf"] = xf
        if config.pooling == "cls":
            pooled = xf[:, 0]
        elif config.pooling == "mean":
            pooled = (xf * mask[..., None]).sum(axis=1) / lengths[:, None].astype(dt)
        else:
            pooled = xf[np.arange(B), lengths - 1]
    y = pooled @ weights["projection"]
    norms = np.sqrt((y * y).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise FloatingPointError("encoder produced a zero vector")
    out = y / norms
    cache.update(pooled=pooled, out=out, norms=norms)
    return out, cache


def backward(weights: dict, config: EncoderConfig, cache: dict, grad_output) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_output * embeddings)`` for every named weight."""
    out, norms = cache["out"], cache["norms"]
    ids, mask, lengths = cache["ids"], cache["mask"], cache["lengths"]
    g = np.asarray(grad_output, dtype=out.dtype)
    if g.shape != out.shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {out.shape}")
    grads = {name: np.zeros_like(weights[name]) for name in weights}
    B, L = ids.shape
    dt = out.dtype.type

    dy = (g - (g * out).sum(axis=1, keepdims=True) * out) / norms
    grads["projection"] = cache["pooled"].T @ dy
    dpooled = dy @ weights["projection"].T

    if config.layers == 0:
        dx = np.broadcast_to((dpooled / lengths[:, None].astype(dt))[:, None, :], (B, L, config.dim))
        dx = dx * mask[..., None]
    else:
        dxf = np.zeros((B, L, config.dim), dtype=out.dtype)
        if config.pooling == "cls":
            dxf[:, 0] = dpooled
        elif config.pooling == "mean":
            dxf = (dpooled / lengths[:, None].astype(dt))[:, None, :] * mask[..., None]
        else:
            dxf[np.arange(B), lengths - 1] = dpooled
        dx, grads["final_norm"] = _layer_norm_back(dxf, weights["final_norm"], cache["lnf"])
        cos, sin = cache["rope"]
        H, hd = config.heads, config.head_dim
        scale = 1.0 / np.sqrt(dt(hd))
        for l in reversed(range(config.layers)):
            p = f"layers.{l}."
            c = cache["layers"][l]
            # ffn
            grads[p + "w_out"] = np.einsum("blf,bld->fd", c["a"], dx)
            da = dx @ weights[p + "w_out"].T
            du = _act_back(da, c["u"], c["act_aux"], config.activation)
            grads[p + "w_in"] = np.einsum("bld,blf->df", c["h2"], du)
            dh2 = du @ weights[p + "w_in"].T
            dln2, grads[p + "ffn_norm"] = _layer_norm_back(dh2, weights[p + "ffn_norm"], c["ln2"])
            dx = dx + dln2
            # attention
            grads[p + "wo"] = np.einsum("bli,blj->ij", c["o"], dx)
            do = (dx @ weights[p + "wo"].T).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
            attn, v, qr, kr = c["attn"], c["v"], c["qr"], c["kr"]
            dattn = do @ v.transpose(0, 1, 3, 2)
            dv = attn.transpose(0, 1, 3, 2) @ do
            ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
            dq = _rotate_back(ds @ kr, cos, sin)
            dk = _rotate_back(ds.transpose(0, 1, 3, 2) @ qr, cos, sin)

            def merge(t):
                return t.transpose(0, 2, 1, 3).reshape(B, L, config.dim)

            dq, dk, dv = merge(dq), merge(dk), merge(dv)
            h = c["h"]
            grads[p + "wq"] = np.einsum("bli,blj->ij", h, dq)
            grads[p + "wk"] = np.einsum("bli,blj->ij", h, dk)
            grads[p + "wv"] = np.einsum("bli,blj->ij", h, dv)
            dh = dq @ weights[p + "wq"].T + dk @ weights[p + "wk"].T + dv @ weights[p + "wv"].T
            dln1, grads[p + "attn_norm"] = _layer_norm_back(dh, weights[p + "attn_norm"], c["ln1"])
            dx = dx + dln1
        dx = dx * mask[..., None]

    np.add.at(grads["token_embedding"], ids[mask], dx[mask])
    return grads


def encode(weights: dict, config: EncoderConfig, batch, batch_size: int | None = None,
           stats: dict | None = None) -> np.ndarray:
    """Unit-norm embeddings ``[len(batch), dim]``.

    ``batch_size`` splits the input into consecutive chunks (each padded to
    its own longest member); ``None`` encodes everything as one batch.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    if batch_size is None or batch_size >= len(batch):
        return forward(weights, config, batch, stats)[0]
    chunks = [forward(weights, config, batch[i : i + batch_size], stats)[0]
              for i in range(0, len(batch), batch_size)]
    return np.concatenate(chunks, axis=0)


def encode_backward(weights: dict, config: EncoderConfig, batch, grad_output) -> dict[str, np.ndarray]:
    """Weight gradients of ``sum(grad_output * encode(weights, config, batch))``."""
    _, cache = forward(weights, config, list(batch))
    return backward(weights, config, cache, grad_output)
