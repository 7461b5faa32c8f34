"""Multiscale bilinear feature dynamics.

Each pyramid level ``l`` and channel ``c`` has its own one-step predictor

    y_next = y + sum_j (W_j * y + B_j) u_j + (W_0 * y + B_0)

where ``*`` is either the locally connected operator (untied n_f x n_f
filters, zero padding at the border) or a dense matrix product. Index 0 of
the control axis holds the action-independent term, so every parameter
array has a leading axis of length ``J + 1``.

Parameter layouts per level:

* locally connected: ``W`` is ``(J+1, C, R, R, n_f, n_f)``, ``B`` is ``(J+1, C, R, R)``
* fully connected:   ``W`` is ``(J+1, C, R*R, R*R)``,      ``B`` is ``(J+1, C, R*R)``
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .featurize import build_pyramid

log = logging.getLogger(__name__)

LOCAL = "locally-connected"
DENSE = "fully-connected"
VARIANTS = (LOCAL, DENSE)
DENSE_MAX_RESOLUTION = 16


def patches(y: np.ndarray, n_f: int) -> np.ndarray:
    """Zero-padded ``n_f x n_f`` neighbourhoods of every pixel.

    ``out[..., kh, kw, a, b] == y[..., kh + a - n_f//2, kw + b - n_f//2]``
    (zero outside the map).
    """
    if n_f % 2 != 1:
        raise ValueError(f"neighbourhood size must be odd, got {n_f}")
    r = n_f // 2
    pad = [(0, 0)] * (y.ndim - 2) + [(r, r), (r, r)]
    return sliding_window_view(np.pad(y, pad), (n_f, n_f), axis=(-2, -1))


def _flat_patches(y: np.ndarray, n_f: int) -> np.ndarray:
    """Contiguous ``(C*R*R, n_f*n_f)`` copy of :func:`patches` for a ``(C, R, R)`` map."""
    C, R = y.shape[0], y.shape[-1]
    r = n_f // 2
    yp = np.zeros((C, R + 2 * r, R + 2 * r))
    yp[:, r : r + R, r : r + R] = y
    out = np.empty((C, R, R, n_f * n_f))
    for a in range(n_f):
        for b in range(n_f):
            out[..., a * n_f + b] = yp[:, a : a + R, b : b + R]
    return out.reshape(C * R * R, n_f * n_f)


def locally_connected_apply(W: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Untied-filter "convolution" of a single-channel map.

    ``W`` has shape ``(R, R, n_f, n_f)`` and ``y`` shape ``(R, R)``.
    """
    W = np.asarray(W, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if W.ndim != 4 or W.shape[2] != W.shape[3] or W.shape[:2] != y.shape:
        raise ValueError(f"weight shape {W.shape} incompatible with map shape {y.shape}")
    return np.einsum("hwab,hwab->hw", W, patches(y, W.shape[2]))


def lc_to_dense(W: np.ndarray) -> np.ndarray:
    """Dense ``(R*R, R*R)`` matrix equivalent to a locally connected filter bank."""
    R, _, n_f, _ = W.shape
    r = n_f // 2
    D = np.zeros((R * R, R * R))
    for kh in range(R):
        for kw in range(R):
            for a in range(n_f):
                ih = kh + a - r
                if not 0 <= ih < R:
                    continue
                for b in range(n_f):
                    iw = kw + b - r
                    if 0 <= iw < R:
                        D[kh * R + kw, ih * R + iw] = W[kh, kw, a, b]
    return D


@dataclass(frozen=True)
class BilinearModel:
    variant: str
    weights: tuple
    biases: tuple
    n_f: int = 3
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown dynamics variant {self.variant!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one (W, B) pair per pyramid level")
        W0 = self.weights[0]
        for l, (W, B) in enumerate(zip(self.weights, self.biases)):
            R = self.resolution(l)
            if self.variant == LOCAL:
                want_w = (W0.shape[0], W0.shape[1], R, R, self.n_f, self.n_f)
                want_b = (W0.shape[0], W0.shape[1], R, R)
            else:
                want_w = (W0.shape[0], W0.shape[1], R * R, R * R)
                want_b = (W0.shape[0], W0.shape[1], R * R)
            if W.shape != want_w or B.shape != want_b:
                raise ValueError(f"level {l}: parameter shapes {W.shape}/{B.shape}, expected {want_w}/{want_b}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(B))):
                raise ValueError(f"level {l}: non-finite parameters")

    @property
    def n_levels(self) -> int:
        return len(self.weights)

    @property
    def depth(self) -> int:
        return self.n_levels - 1

    @property
    def n_channels(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_controls(self) -> int:
        return self.weights[0].shape[0] - 1

    def resolution(self, level: int) -> int:
        W = self.weights[0]
        r0 = W.shape[2] if self.variant == LOCAL else int(round(np.sqrt(W.shape[2])))
        return r0 >> level

    @property
    def resolutions(self) -> list[int]:
        return [self.resolution(l) for l in range(self.n_levels)]

    @functools.cached_property
    def _flat_local(self):
        k = self.n_f * self.n_f
        return [np.ascontiguousarray(W.reshape(W.shape[0], -1, k)) for W in self.weights]

    def terms(self, y: np.ndarray, level: int) -> np.ndarray:
        """``W_j * y + B_j`` for all ``j`` as a ``(J+1, C, R, R)`` array."""
        y = np.asarray(y, dtype=np.float64)
        R = self.resolution(level)
        if y.shape != (self.n_channels, R, R):
            raise ValueError(f"level {level} expects maps of shape {(self.n_channels, R, R)}, got {y.shape}")
        W, B = self.weights[level], self.biases[level]
        if self.variant == LOCAL:
            Wf = self._flat_local[level]  # (J+1, C*R*R, n_f*n_f)
            P = _flat_patches(y, self.n_f)  # (C*R*R, n_f*n_f)
            out = np.einsum("jpk,pk->jp", Wf, P, optimize=False)
            return out.reshape(B.shape) + B
        out = np.einsum("jcpq,cq->jcp", W, y.reshape(self.n_channels, R * R)) + B
        return out.reshape(-1, self.n_channels, R, R)


def _check_u(model: BilinearModel, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.shape[0] != model.n_controls:
        raise ValueError(f"action has {u.shape[0]} coordinates, model expects {model.n_controls}")
    return u


def predict(model: BilinearModel, y: np.ndarray, u, level: int = 0) -> np.ndarray:
    """One-step prediction of a single level's ``(C, R, R)`` feature map."""
    u = _check_u(model, u)
    t = model.terms(y, level)
    return y + t[0] + np.tensordot(u, t[1:], axes=(0, 0))


def predict_pyramid(model: BilinearModel, pyramid: list[np.ndarray], u) -> list[np.ndarray]:
    if len(pyramid) != model.n_levels:
        raise ValueError(f"pyramid has {len(pyramid)} levels, model has {model.n_levels}")
    return [predict(model, y, u, l) for l, y in enumerate(pyramid)]


def linearize(model: BilinearModel, pyramid: list[np.ndarray]):
    """Null-action predictions and control Jacobians for every level.

    Returns ``(f0, jac)`` with ``f0[l]`` of shape ``(C, R*R)`` and ``jac[l]``
    of shape ``(C, R*R, J)``; ``predict(y, u) == f0 + jac @ u`` exactly since
    the model is linear in the action.
    """
    if len(pyramid) != model.n_levels:
        raise ValueError(f"pyramid has {len(pyramid)} levels, model has {model.n_levels}")
    f0, jac = [], []
    C = model.n_channels
    for l, y in enumerate(pyramid):
        t = model.terms(y, l)
        R = model.resolution(l)
        f0.append((y + t[0]).reshape(C, R * R))
        jac.append(np.moveaxis(t[1:].reshape(-1, C, R * R), 0, -1))
    return f0, jac


def jacobian(model: BilinearModel, pyramid: list[np.ndarray]) -> list[np.ndarray]:
    return linearize(model, pyramid)[1]


def random_model(
    rng: np.random.Generator,
    n_channels: int,
    n_controls: int,
    resolution: int,
    depth: int = 0,
    variant: str = LOCAL,
    n_f: int = 3,
    scale: float = 0.01,
) -> BilinearModel:
    """Gaussian parameters with standard deviation ``scale``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown dynamics variant {variant!r}")
    if resolution % (2**depth):
        raise ValueError(f"resolution {resolution} is not divisible by 2**{depth}")
    Ws, Bs = [], []
    for l in range(depth + 1):
        R = resolution >> l
        if variant == LOCAL:
            ws = (n_controls + 1, n_channels, R, R, n_f, n_f)
            bs = (n_controls + 1, n_channels, R, R)
        else:
            if R > DENSE_MAX_RESOLUTION:
                raise ValueError(
                    f"fully connected dynamics limited to resolution <= {DENSE_MAX_RESOLUTION}, got {R}"
                )
            ws = (n_controls + 1, n_channels, R * R, R * R)
            bs = (n_controls + 1, n_channels, R * R)
        Ws.append(scale * rng.standard_normal(ws))
        Bs.append(scale * rng.standard_normal(bs))
    return BilinearModel(variant, tuple(Ws), tuple(Bs), n_f)


def dense_from_local(model: BilinearModel) -> BilinearModel:
    """Fully connected model computing exactly the same function."""
    if model.variant != LOCAL:
        raise ValueError("expected a locally connected model")
    Ws, Bs = [], []
    for W, B in zip(model.weights, model.biases):
        J1, C, R = W.shape[:3]
        D = np.empty((J1, C, R * R, R * R))
        for j in range(J1):
            for c in range(C):
                D[j, c] = lc_to_dense(W[j, c])
        Ws.append(D)
        Bs.append(B.reshape(J1, C, R * R).copy())
    return BilinearModel(DENSE, tuple(Ws), tuple(Bs), model.n_f)


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 32
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0005
    eps: float = 1e-8
    init_scale: float = 0.01


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        step = c.learning_rate / bc1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g += c.weight_decay * p
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            g *= g
            v += (1.0 - c.beta2) * g
            # reuse g as scratch for the denominator
            np.divide(v, bc2, out=g)
            np.sqrt(g, out=g)
            g += c.eps
            np.divide(m, g, out=g)
            g *= step
            p -= g


class _LocalLevel:
    """Training-time view of one locally connected level.

    Parameters live in float32 ``(k, C*R*R, J+1)`` / ``(C*R*R, J+1)`` layouts
    so that every step of the minibatch pass is a single GEMM or a flat
    elementwise op.
    """

    def __init__(self, W, B, n_f):
        J1, C, R = W.shape[:3]
        self.shape = (J1, C, R)
        self.n_f = n_f
        k = n_f * n_f
        self.W = np.ascontiguousarray(W.reshape(J1, C * R * R, k).transpose(2, 1, 0), dtype=np.float32)
        self.B = np.ascontiguousarray(B.reshape(J1, C * R * R).T, dtype=np.float32)

    def params(self):
        return [self.W, self.B]

    def _patches(self, y):
        # (k, C*R*R, N); each offset is one contiguous block
        J1, C, R = self.shape
        N = y.shape[0]
        n_f = self.n_f
        r = n_f // 2
        yp = np.zeros((C, R + 2 * r, R + 2 * r, N), dtype=np.float32)
        yp[:, r : r + R, r : r + R, :] = y.transpose(1, 2, 3, 0)
        P = np.empty((n_f * n_f, C, R, R, N), dtype=np.float32)
        for a in range(n_f):
            for b in range(n_f):
                P[a * n_f + b] = yp[:, a : a + R, b : b + R, :]
        return P.reshape(n_f * n_f, C * R * R, N)

    def loss_and_grads(self, y, u1, y_next, n_total):
        N = y.shape[0]
        k, p, J1 = self.W.shape
        u1 = u1.astype(np.float32)
        P = self._patches(y)
        M = (self.W.reshape(k * p, J1) @ u1.T).reshape(k, p, N)
        M *= P
        r = M.sum(axis=0)
        r += self.B @ u1.T
        r += y.reshape(N, -1).T
        r -= y_next.reshape(N, -1).T
        loss = float(np.dot(r.ravel().astype(np.float64), r.ravel().astype(np.float64))) / n_total
        u1s = (2.0 / n_total) * u1
        np.multiply(P, r[None], out=P)
        gW = (P.reshape(k * p, N) @ u1s).reshape(k, p, J1)
        gB = r @ u1s
        return loss, [gW, gB]

    def export(self):
        J1, C, R = self.shape
        W = self.W.astype(np.float64).transpose(2, 1, 0).reshape(J1, C, R, R, self.n_f, self.n_f)
        B = self.B.astype(np.float64).T.reshape(J1, C, R, R)
        return W.copy(), B.copy()


class _DenseLevel:
    def __init__(self, W, B):
        self.W = W.copy()
        self.B = B.copy()

    def params(self):
        return [self.W, self.B]

    def loss_and_grads(self, y, u1, y_next, n_total):
        N, C = y.shape[:2]
        yf = y.reshape(N, C, -1)
        out = np.einsum("jcpq,ncq->ncjp", self.W, yf) + self.B.transpose(1, 0, 2)[None]
        pred = yf + np.einsum("ncjp,nj->ncp", out, u1)
        r = pred - y_next.reshape(N, C, -1)
        loss = np.sum(r * r) / n_total
        G = (2.0 / n_total) * r[:, :, None, :] * u1[:, None, :, None]
        gW = np.einsum("ncjp,ncq->jcpq", G, yf)
        gB = G.sum(axis=0).transpose(1, 0, 2)
        return loss, [gW, gB]

    def export(self):
        return self.W.copy(), self.B.copy()


def dataset_loss(model: BilinearModel, y_t, u, y_next) -> float:
    """Mean over samples of the summed per-level squared prediction error."""
    y_t = np.asarray(y_t, dtype=np.float64)
    y_next = np.asarray(y_next, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if len(y_t) == 0:
        raise ValueError("empty dataset")
    pt = build_pyramid(y_t, model.depth)
    pn = build_pyramid(y_next, model.depth)
    total = 0.0
    for i in range(len(y_t)):
        for l in range(model.n_levels):
            d = predict(model, pt[l][i], u[i], l) - pn[l][i]
            total += float(np.sum(d * d))
    return total / len(y_t)


def train_dynamics(
    y_t,
    u,
    y_next,
    depth: int = 0,
    variant: str = LOCAL,
    n_f: int = 3,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    callback=None,
):
    """Fit a bilinear model to level-0 feature triplets with Adam.

    ``y_t`` and ``y_next`` are ``(N, C, R, R)`` standardized features (any
    float dtype), ``u`` is ``(N, J)``. Coarser levels are obtained by mean
    pooling each minibatch. Returns ``(model, losses)`` where ``losses[i]`` is
    the minibatch loss before update ``i``.
    """
    u = np.asarray(u, dtype=np.float64)
    N = len(u)
    if N == 0:
        raise ValueError("empty dataset")
    if len(y_t) != N or len(y_next) != N:
        raise ValueError("y_t, u and y_next must have the same number of samples")
    C, R = y_t.shape[1], y_t.shape[-1]
    rng = np.random.default_rng(seed)
    init = random_model(rng, C, u.shape[1], R, depth, variant, n_f, config.init_scale)
    if variant == LOCAL:
        levels = [_LocalLevel(W, B, n_f) for W, B in zip(init.weights, init.biases)]
    else:
        levels = [_DenseLevel(W, B) for W, B in zip(init.weights, init.biases)]
    params = [p for lv in levels for p in lv.params()]
    opt = _Adam(params, config)
    losses = np.empty(config.iterations)
    batch = min(config.batch_size, N)
    for it in range(config.iterations):
        idx = np.sort(rng.choice(N, size=batch, replace=False))
        yb = np.asarray(y_t[idx], dtype=np.float32)
        yn = np.asarray(y_next[idx], dtype=np.float32)
        u1 = np.concatenate([np.ones((batch, 1)), u[idx]], axis=1)
        pt, pn = build_pyramid(yb, depth), build_pyramid(yn, depth)
        loss = 0.0
        grads = []
        for l, lv in enumerate(levels):
            lo, g = lv.loss_and_grads(pt[l], u1, pn[l], batch)
            loss += lo
            grads.extend(g)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at iteration {it} (last finite {losses[it - 1] if it else None})")
        losses[it] = loss
        opt.step(grads)
        if callback is not None:
            callback(it, loss)
    Ws, Bs = zip(*(lv.export() for lv in levels))
    model = BilinearModel(variant, tuple(Ws), tuple(Bs), n_f, meta={"seed": seed})
    log.info("trained %s dynamics: loss %.4g -> %.4g", variant, losses[0], losses[-1])
    return model, losses
