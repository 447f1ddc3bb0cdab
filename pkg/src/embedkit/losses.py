"""Training objectives with analytic gradients.

* ``contrastive_loss``: softmax cross-entropy of the positive passage against
  a partition that mixes query-negative, query-query and positive-negative
  similarities, each block with its own weight.
* ``kd_loss``: cross-entropy between temperature-softened teacher and
  student score distributions.
* ``mrl_loss``: weighted contrastive loss over a ladder of embedding
  prefixes (Matryoshka truncation).

Gradients are exact derivatives with respect to the *raw* (unnormalized)
embeddings; cosine normalization is differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericsError, as_tensor, log_row_softmax, logsumexp, row_softmax


@dataclass(frozen=True)
class ContrastiveParams:
    tau: float = 0.02
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("alpha", "beta", "gamma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass(frozen=True)
class KDParams:
    tau_kd: float = 1.0
    reduction: str = "sum"

    def __post_init__(self):
        if not self.tau_kd > 0:
            raise ValueError(f"tau_kd must be positive, got {self.tau_kd}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass(frozen=True)
class MRLParams:
    """Prefix ladder for Matryoshka training.

    ``dims`` must be non-increasing and start at the full embedding size;
    repeated rungs are allowed. ``weights`` default to uniform.
    """

    dims: tuple[int, ...]
    weights: tuple[float, ...] = field(default=())

    def __post_init__(self):
        dims = tuple(int(k) for k in self.dims)
        if not dims:
            raise ValueError("MRL ladder needs at least one dimension")
        if any(k < 1 for k in dims):
            raise ValueError(f"MRL dims must be >= 1, got {dims}")
        if any(b > a for a, b in zip(dims, dims[1:])):
            raise ValueError(f"MRL dims must be non-increasing, got {dims}")
        weights = tuple(float(w) for w in self.weights) or (1.0,) * len(dims)
        if len(weights) != len(dims):
            raise ValueError("MRL weights and dims differ in length")
        if any(not w > 0 for w in weights):
            raise ValueError(f"MRL weights must be positive, got {weights}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", weights)


@dataclass
class EmbeddingBatch:
    """Query embeddings ``Q`` [n, d] and passage embeddings ``P`` [n, m, d].

    ``P[i, 0]`` is the positive passage of query ``i``; ``P[i, j>0]`` are
    its negatives.
    """

    Q: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.Q = as_tensor(self.Q, ndim=2, name="Q")
        self.P = as_tensor(self.P, ndim=3, name="P")
        n, d = self.Q.shape
        if n < 1 or d < 1:
            raise ValueError(f"Q must be non-empty, got shape {self.Q.shape}")
        if self.P.shape[0] != n or self.P.shape[2] != d or self.P.shape[1] < 1:
            raise ValueError(f"P shape {self.P.shape} incompatible with Q shape {self.Q.shape}")

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.P.shape[1]

    @property
    def d(self) -> int:
        return self.Q.shape[1]


def _normalize_rows(x: np.ndarray, what: str):
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise NumericsError(f"zero-norm {what} embedding")
    return x / norms, norms


def _unnormalize_grad(g: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(x/|x|)^T g = (g - (g.u) u) / |x|
    return (g - np.sum(g * unit, axis=-1, keepdims=True) * unit) / norms


def _log_weight(w: float) -> float:
    return np.log(w) if w > 0 else -np.inf


def contrastive_loss(batch: EmbeddingBatch, params: ContrastiveParams = ContrastiveParams()):
    """Contrastive loss over a batch and its gradients.

    Returns:
        ``(loss, grad_Q, grad_P)`` with gradient shapes matching ``batch.Q``
        and ``batch.P``.
    """
    Q, P = batch.Q, batch.P
    n, m, _ = P.shape
    tau = params.tau
    qn, qnorm = _normalize_rows(Q, "query")
    pn, pnorm = _normalize_rows(P, "passage")
    pos = pn[:, 0]
    neg = pn[:, 1:]

    s_pos = np.einsum("id,id->i", qn, pos) / tau
    s_qn = np.einsum("id,ijd->ij", qn, neg) / tau
    s_qq = (qn @ qn.T) / tau
    s_pn = np.einsum("id,ijd->ij", pos, neg) / tau

    off_diag = ~np.eye(n, dtype=bool)
    blocks = [
        s_pos[:, None],
        s_qn + _log_weight(params.alpha),
        np.where(off_diag, s_qq + _log_weight(params.beta), -np.inf),
        s_pn + _log_weight(params.gamma),
    ]
    logits = np.concatenate(blocks, axis=1)
    log_z = logsumexp(logits, axis=1)
    loss = float(np.mean(log_z - s_pos))

    w = np.exp(logits - log_z[:, None])
    w_qn = w[:, 1:m]
    w_qq = w[:, m : m + n]
    w_pn = w[:, m + n :]
    # d loss / d s_pos = w_pos - 1, written as minus the rest so it stays accurate near 1
    g_pos = -(w_qn.sum(axis=1) + w_qq.sum(axis=1) + w_pn.sum(axis=1)) / n
    g_qn = w_qn / n
    g_qq = w_qq / n
    g_pn = w_pn / n

    G_q = (
        g_pos[:, None] * pos
        + np.einsum("ij,ijd->id", g_qn, neg)
        + (g_qq + g_qq.T) @ qn
    ) / tau
    G_p = np.empty_like(pn)
    G_p[:, 0] = (g_pos[:, None] * qn + np.einsum("ij,ijd->id", g_pn, neg)) / tau
    G_p[:, 1:] = (g_qn[:, :, None] * qn[:, None, :] + g_pn[:, :, None] * pos[:, None, :]) / tau

    grad_Q = _unnormalize_grad(G_q, qn, qnorm)
    grad_P = _unnormalize_grad(G_p, pn, pnorm)
    return loss, grad_Q, grad_P


def expand_in_batch_negatives(batch: EmbeddingBatch) -> EmbeddingBatch:
    """Append every other query's positive to each query's negative list.

    The output has ``m + n - 1`` passages per query; the positive stays at
    index 0, original negatives keep their order, and shared positives
    follow in ascending query order.
    """
    n, m, d = batch.P.shape
    if n < 2:
        raise ValueError("in-batch negatives need at least two queries")
    positives = batch.P[:, 0]
    out = np.empty((n, m + n - 1, d), dtype=batch.P.dtype)
    out[:, :m] = batch.P
    for i in range(n):
        out[i, m:] = np.delete(positives, i, axis=0)
    return EmbeddingBatch(batch.Q.copy(), out)


def fold_in_batch_gradient(grad_P_expanded: np.ndarray, m: int) -> np.ndarray:
    """Map a gradient on expanded passages back onto the original ``P``."""
    n = grad_P_expanded.shape[0]
    grad = grad_P_expanded[:, :m].copy()
    for i in range(n):
        others = [k for k in range(n) if k != i]
        grad[others, 0] += grad_P_expanded[i, m:]
    return grad


def kd_loss(student_logits, teacher_logits, params: KDParams = KDParams()):
    """Distillation cross-entropy and its gradient w.r.t. student logits.

    Both logit matrices are turned into row distributions by a softmax at
    temperature ``params.tau_kd``. The loss is summed over queries unless
    ``params.reduction == "mean"``.
    """
    s = as_tensor(student_logits, ndim=2, name="student_logits")
    t = as_tensor(teacher_logits, ndim=2, name="teacher_logits")
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: student {s.shape} vs teacher {t.shape}")
    if s.shape[1] < 2:
        raise ValueError("kd_loss needs at least two candidates per query")
    tau = params.tau_kd
    sim_t = row_softmax(t, tau)
    log_sim_s = log_row_softmax(s, tau)
    loss = float(-np.sum(sim_t * log_sim_s))
    grad = (np.exp(log_sim_s) - sim_t) / tau
    if params.reduction == "mean":
        loss /= s.shape[0]
        grad = grad / s.shape[0]
    return loss, grad


def mrl_loss(
    batch: EmbeddingBatch,
    cparams: ContrastiveParams = ContrastiveParams(),
    mparams: MRLParams | None = None,
):
    """Weighted contrastive loss over embedding prefixes.

    Each rung takes the leading ``k`` coordinates of every embedding; the
    cosine inside ``contrastive_loss`` renormalizes the prefix.
    """
    d = batch.d
    if mparams is None:
        mparams = MRLParams((d,))
    if mparams.dims[0] != d:
        raise ValueError(f"MRL ladder must start at the full dimension {d}, got {mparams.dims[0]}")
    if max(mparams.dims) > d:
        raise ValueError(f"MRL dim {max(mparams.dims)} exceeds embedding dim {d}")
    total_w = float(sum(mparams.weights))
    loss = 0.0
    grad_Q = np.zeros_like(batch.Q)
    grad_P = np.zeros_like(batch.P)
    for k, w in zip(mparams.dims, mparams.weights):
        rung = EmbeddingBatch(batch.Q[:, :k], batch.P[:, :, :k])
        lk, gq, gp = contrastive_loss(rung, cparams)
        share = w / total_w
        loss += share * lk
        grad_Q[:, :k] += share * gq
        grad_P[:, :, :k] += share * gp
    return loss, grad_Q, grad_P
