"""Central finite-difference verification of every analytic gradient.

The numeric side never reuses the code it checks. Losses are re-evaluated
by straight-line ``mpmath`` transcriptions of their formulas at 40 digits:
at a similarity temperature of 0.02 many partition terms sit 20-40 nats
below the dominant one, and their gradient contributions are far below what
a float64 difference quotient can resolve. The encoder, which has no such
dynamic range, is differenced with its own forward pass run in 80-bit
``np.longdouble``.

Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``; the
check returns the maximum over coordinates.
"""

from __future__ import annotations

import mpmath
import numpy as np

from . import encoder as enc
from .losses import (
    ContrastiveParams,
    EmbeddingBatch,
    KDParams,
    MRLParams,
    contrastive_loss,
    kd_loss,
    mrl_loss,
)

DPS = 40
LOSS_KINDS = ("contrastive", "kd", "mrl", "encoder")
KD_TEMPERATURES = (0.5, 1.0, 2.0)
TOLERANCES = {"contrastive": 1e-5, "kd": 1e-5, "mrl": 1e-5, "encoder": 1e-4}


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# --------------------------------------------------------------------------
# mpmath oracles


def _mp_vec(v):
    return [mpmath.mpf(float(x)) for x in v]


def _mp_dot(a, b):
    return mpmath.fsum(x * y for x, y in zip(a, b))


def _mp_unit(v):
    nrm = mpmath.sqrt(_mp_dot(v, v))
    return [x / nrm for x in v]


class _ContrastiveOracle:
    """Holds mp unit vectors for queries and passages of one batch."""

    def __init__(self, Q, P, params: ContrastiveParams):
        self.n, self.m, _ = P.shape
        self.tau = mpmath.mpf(params.tau)
        self.alpha = mpmath.mpf(params.alpha)
        self.beta = mpmath.mpf(params.beta)
        self.gamma = mpmath.mpf(params.gamma)
        self.raw = [_mp_vec(q) for q in Q] + [_mp_vec(p) for row in P for p in row]
        self.unit = [_mp_unit(v) for v in self.raw]

    def q(self, i):
        return self.unit[i]

    def p(self, i, j):
        return self.unit[self.n + i * self.m + j]

    def s(self, a, b):
        return _mp_dot(a, b) / self.tau

    def loss(self):
        total = mpmath.mpf(0)
        for i in range(self.n):
            pos = mpmath.exp(self.s(self.q(i), self.p(i, 0)))
            z = pos
            z += self.alpha * mpmath.fsum(mpmath.exp(self.s(self.q(i), self.p(i, j))) for j in range(1, self.m))
            z += self.beta * mpmath.fsum(mpmath.exp(self.s(self.q(i), self.q(k))) for k in range(self.n) if k != i)
            z += self.gamma * mpmath.fsum(mpmath.exp(self.s(self.p(i, 0), self.p(i, j))) for j in range(1, self.m))
            total += mpmath.log(pos / z)
        return -total / self.n

    def perturbed(self, vec_index, coord, delta):
        old_raw, old_unit = self.raw[vec_index], self.unit[vec_index]
        new = list(old_raw)
        new[coord] = new[coord] + delta
        self.raw[vec_index], self.unit[vec_index] = new, _mp_unit(new)
        try:
            return self.loss()
        finally:
            self.raw[vec_index], self.unit[vec_index] = old_raw, old_unit


def contrastive_loss_oracle(Q, P, params: ContrastiveParams = ContrastiveParams()) -> float:
    """Literal high-precision evaluation of the contrastive loss."""
    with mpmath.workdps(DPS):
        return float(_ContrastiveOracle(np.asarray(Q), np.asarray(P), params).loss())


def kd_loss_oracle(student, teacher, params: KDParams = KDParams()) -> float:
    with mpmath.workdps(DPS):
        return float(_kd_mp(np.asarray(student, dtype=float).tolist(), np.asarray(teacher, dtype=float), params))


def _kd_mp(student_rows, teacher, params):
    tau = mpmath.mpf(params.tau_kd)
    total = mpmath.mpf(0)
    for srow, trow in zip(student_rows, teacher):
        te = [mpmath.exp(mpmath.mpf(float(x)) / tau) for x in trow]
        se = [mpmath.exp(mpmath.mpf(x) / tau) for x in srow]
        tz, sz = mpmath.fsum(te), mpmath.fsum(se)
        total -= mpmath.fsum((a / tz) * mpmath.log(b / sz) for a, b in zip(te, se))
    if params.reduction == "mean":
        total /= len(teacher)
    return total


def mrl_loss_oracle(Q, P, cparams: ContrastiveParams, mparams: MRLParams) -> float:
    """Truncate, renormalize and average the per-rung losses explicitly."""
    Q, P = np.asarray(Q), np.asarray(P)
    with mpmath.workdps(DPS):
        wsum = mpmath.fsum(mpmath.mpf(w) for w in mparams.weights)
        total = mpmath.fsum(
            mpmath.mpf(w) * _ContrastiveOracle(Q[:, :k], P[:, :, :k], cparams).loss()
            for k, w in zip(mparams.dims, mparams.weights)
        )
        return float(total / wsum)


# --------------------------------------------------------------------------
# per-kind checks


def _check_contrastive(Q, P, params, eps):
    batch = EmbeddingBatch(Q, P)
    _, gq, gp = contrastive_loss(batch, params)
    analytic = np.concatenate([gq.ravel(), gp.ravel()])
    n, m, d = batch.P.shape
    numeric = []
    with mpmath.workdps(DPS):
        oracle = _ContrastiveOracle(batch.Q, batch.P, params)
        h = mpmath.mpf(eps)
        for vec in range(n + n * m):
            for c in range(d):
                up = oracle.perturbed(vec, c, h)
                dn = oracle.perturbed(vec, c, -h)
                numeric.append(float((up - dn) / (2 * h)))
    return relative_error(analytic, numeric)


def _check_kd(student, teacher, params, eps):
    _, grad = kd_loss(student, teacher, params)
    s = np.asarray(student, dtype=float)
    t = np.asarray(teacher, dtype=float)
    numeric = np.zeros_like(s)
    with mpmath.workdps(DPS):
        h = mpmath.mpf(eps)
        rows = [[mpmath.mpf(float(x)) for x in row] for row in s]
        for i in range(s.shape[0]):
            for j in range(s.shape[1]):
                orig = rows[i][j]
                rows[i][j] = orig + h
                up = _kd_mp(rows, t, params)
                rows[i][j] = orig - h
                dn = _kd_mp(rows, t, params)
                rows[i][j] = orig
                numeric[i, j] = float((up - dn) / (2 * h))
    return relative_error(grad, numeric)


def _check_mrl(Q, P, cparams, mparams, eps):
    batch = EmbeddingBatch(Q, P)
    _, gq, gp = mrl_loss(batch, cparams, mparams)
    analytic = np.concatenate([gq.ravel(), gp.ravel()])
    n, m, d = batch.P.shape
    numeric = []
    with mpmath.workdps(DPS):
        h = mpmath.mpf(eps)
        wsum = mpmath.fsum(mpmath.mpf(w) for w in mparams.weights)
        rungs = [(k, mpmath.mpf(w), _ContrastiveOracle(batch.Q[:, :k], batch.P[:, :, :k], cparams))
                 for k, w in zip(mparams.dims, mparams.weights)]
        base = {k: o.loss() for k, _, o in rungs}
        for vec in range(n + n * m):
            for c in range(d):
                up = mpmath.fsum(w * (o.perturbed(vec, c, h) if c < k else base[k]) for k, w, o in rungs)
                dn = mpmath.fsum(w * (o.perturbed(vec, c, -h) if c < k else base[k]) for k, w, o in rungs)
                numeric.append(float((up - dn) / (2 * h * wsum)))
    return relative_error(analytic, numeric)


def _check_encoder(weights, config, batch, grad_output, eps):
    analytic = enc.encode_backward(weights, config, batch, grad_output)
    wl = {k: np.asarray(v, dtype=np.longdouble) for k, v in weights.items()}
    g = np.asarray(grad_output, dtype=np.longdouble)
    h = np.longdouble(eps)

    def f():
        return np.sum(enc.forward(wl, config, batch)[0] * g)

    worst = 0.0
    for name in sorted(wl):
        arr = wl[name]
        flat = arr.reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.longdouble)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + h
            up = f()
            flat[c] = orig - h
            dn = f()
            flat[c] = orig
            numeric[c] = (up - dn) / (2 * h)
        worst = max(worst, relative_error(analytic[name].ravel(), numeric))
    return worst


def finite_difference_check(loss_kind: str, instance: dict, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``instance`` holds the keyword inputs of the corresponding kind:

    * ``contrastive``: ``Q``, ``P``, ``params``
    * ``kd``: ``student``, ``teacher``, ``params``
    * ``mrl``: ``Q``, ``P``, ``cparams``, ``mparams``
    * ``encoder``: ``weights``, ``config``, ``batch``, ``grad_output``
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    if loss_kind == "contrastive":
        return _check_contrastive(instance["Q"], instance["P"],
                                  instance.get("params", ContrastiveParams()), epsilon)
    if loss_kind == "kd":
        return _check_kd(instance["student"], instance["teacher"],
                         instance.get("params", KDParams()), epsilon)
    if loss_kind == "mrl":
        Q = np.asarray(instance["Q"])
        return _check_mrl(Q, instance["P"], instance.get("cparams", ContrastiveParams()),
                          instance.get("mparams", MRLParams((Q.shape[1],))), epsilon)
    if loss_kind == "encoder":
        return _check_encoder(instance["weights"], instance["config"], instance["batch"],
                              instance["grad_output"], epsilon)
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def random_instance(loss_kind: str, rng: np.random.Generator, index: int | None = None) -> dict:
    """A small random instance of ``loss_kind`` within the checked size limits.

    For ``kd``, passing ``index`` cycles the temperature through 0.5, 1, 2
    instead of drawing it.
    """
    if loss_kind in ("contrastive", "mrl"):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 5))
        d = 8 if loss_kind == "mrl" else int(rng.integers(2, 9))
        inst = {"Q": rng.standard_normal((n, d)), "P": rng.standard_normal((n, m, d))}
        if loss_kind == "contrastive":
            inst["params"] = ContrastiveParams(tau=0.02)
        else:
            inst["cparams"] = ContrastiveParams(tau=0.02)
            inst["mparams"] = MRLParams((8, 4, 2))
        return inst
    if loss_kind == "kd":
        n, m = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        return {"student": rng.standard_normal((n, m)) * 3,
                "teacher": rng.standard_normal((n, m)) * 3,
                "params": KDParams(tau_kd=KD_TEMPERATURES[index % 3] if index is not None
                                   else float(rng.choice(KD_TEMPERATURES)))}
    if loss_kind == "encoder":
        layers = int(rng.integers(1, 3))
        config = enc.EncoderConfig(
            vocab_size=12, dim=8, layers=layers, heads=2, ffn_dim=12,
            activation=str(rng.choice(["gelu", "silu"])), max_len=8, local_window=3,
            global_every_k=2, pooling=str(rng.choice(["cls", "mean", "last_token"])),
        )
        weights = enc.init_weights(config, seed=int(rng.integers(2**31)))
        for name in weights:
            if name.endswith("norm"):
                weights[name] = weights[name] + 0.1 * rng.standard_normal(weights[name].shape)
        lens = rng.integers(1, config.max_len - config.special_len + 1, size=3)
        batch = [rng.integers(0, config.vocab_size, size=int(k)).tolist() for k in lens]
        return {"weights": weights, "config": config, "batch": batch,
                "grad_output": rng.standard_normal((len(batch), config.dim))}
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def run_suite(kinds=LOSS_KINDS, seed: int = 0, instances: int = 20, epsilon: float = 1e-5) -> dict[str, dict]:
    """Check ``instances`` seeded random instances of each kind.

    Returns ``{kind: {"max_rel_error", "tolerance", "instances", "passed"}}``.
    """
    if instances < 1:
        raise ValueError("instances must be >= 1")
    report = {}
    for kind in kinds:
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
        rng = np.random.default_rng([seed, LOSS_KINDS.index(kind)])
        worst = max(finite_difference_check(kind, random_instance(kind, rng, i), epsilon)
                    for i in range(instances))
        report[kind] = {"max_rel_error": worst, "tolerance": TOLERANCES[kind],
                        "instances": instances, "passed": bool(worst <= TOLERANCES[kind])}
    return report
