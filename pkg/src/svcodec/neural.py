"""Minimal coordinate-network stack: Fourier features, MLPs, losses, Adam.

Networks map Fourier-lifted 3-D coordinates through a few dense layers to a
regression value or classification logits.  Everything is plain numpy with
hand-derived gradients; :func:`grad_check` verifies them against central
finite differences in 64-bit mode.

The feature order produced by :func:`ffm_map` is interleaved
``[cos_1, sin_1, cos_2, sin_2, ...]`` and first-layer weights follow that
convention everywhere (including serialized form).  The fused training step
used by the encoder processes features in block order ``[cos... | sin...]``
with the first-layer weight columns permuted accordingly; this is the same
math with a different summation order, chosen because strided writes into an
interleaved batch matrix are measurably slower.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

ACT_RELU = "relu"
ACT_TANH = "tanh"
ACT_SINE = "sine"

HEAD_LINEAR = "linear"
HEAD_LOGITS = "logits"
HEAD_BINARY = "binary"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Activation:
    """Hidden-layer nonlinearity; ``frequency`` applies to sine only."""

    kind: str = ACT_RELU
    frequency: float = 1.0

    def __post_init__(self):
        if self.kind not in (ACT_RELU, ACT_TANH, ACT_SINE):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == ACT_SINE and self.frequency <= 0:
            raise ValueError("sine activation needs frequency > 0")


class FourierFeatures:
    """Random Gaussian frequency matrix lifting R^3 to 2m sinusoidal features.

    The matrix is regenerated from (seed, m, scale) and never stored raw.
    """

    def __init__(self, m: int, scale: float, seed: int, amplitude: float = 1.0):
        if m < 1:
            raise ValueError("feature count m must be >= 1")
        self.m = int(m)
        self.scale = float(scale)
        self.seed = int(seed)
        self.amplitude = float(amplitude)
        rng = np.random.default_rng(self.seed)
        self.matrix = rng.standard_normal((self.m, 3)) * self.scale

    @property
    def out_dim(self) -> int:
        return 2 * self.m


def ffm_map(ff: FourierFeatures, x: np.ndarray) -> np.ndarray:
    """Interleaved [a*cos(2 pi b_i . x), a*sin(2 pi b_i . x), ...] features.

    Accepts one point (3,) or a batch (n, 3); the output matches (2m,) or
    (n, 2m).
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if not np.isfinite(pts).all():
        raise ValueError("ffm_map requires finite inputs")
    theta = 2.0 * np.pi * (pts @ ff.matrix.T)
    out = np.empty((pts.shape[0], 2 * ff.m), dtype=np.float64)
    np.cos(theta, out=out[:, 0::2])
    np.sin(theta, out=out[:, 1::2])
    if ff.amplitude != 1.0:
        out *= ff.amplitude
    return out[0] if single else out


def ffm_map_block(ff: FourierFeatures, pts: np.ndarray, dtype=np.float32,
                  out: Optional[np.ndarray] = None,
                  theta: Optional[np.ndarray] = None) -> np.ndarray:
    """Block-ordered features [cos | sin] for the fused training path."""
    b = (2.0 * np.pi * ff.matrix.T).astype(dtype)
    pts = np.asarray(pts, dtype=dtype)
    n = pts.shape[0]
    if theta is None or theta.shape != (n, ff.m):
        theta = np.empty((n, ff.m), dtype=dtype)
    np.dot(pts, b, out=theta)
    if out is None or out.shape != (n, 2 * ff.m):
        out = np.empty((n, 2 * ff.m), dtype=dtype)
    np.cos(theta, out=out[:, : ff.m])
    np.sin(theta, out=out[:, ff.m:])
    if ff.amplitude != 1.0:
        out *= dtype(ff.amplitude)
    return out


def block_to_interleaved_cols(m: int) -> np.ndarray:
    """Column permutation mapping block feature order to interleaved order."""
    perm = np.empty(2 * m, dtype=np.int64)
    perm[0::2] = np.arange(m)
    perm[1::2] = np.arange(m) + m
    return perm


class MlpParams:
    """Dense layers with one hidden activation and a typed output head.

    ``head`` is 'linear' (regression), 'logits' (k-way classification) or
    'binary' (single logit); classification heads emit raw logits and the
    losses apply softmax/sigmoid internally.
    """

    def __init__(self, layers: List[Tuple[np.ndarray, np.ndarray]],
                 activation: Activation, head: str = HEAD_LINEAR):
        if head not in (HEAD_LINEAR, HEAD_LOGITS, HEAD_BINARY):
            raise ValueError(f"unknown head {head!r}")
        for (w_prev, _), (w_next, _) in zip(layers[:-1], layers[1:]):
            if w_next.shape[1] != w_prev.shape[0]:
                raise ValueError("adjacent layer dimensions do not chain")
        self.layers = layers
        self.activation = activation
        self.head = head

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dims(self) -> List[int]:
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [(w.astype(dtype), b.astype(dtype)) for w, b in self.layers],
            self.activation, self.head,
        )

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers],
                         self.activation, self.head)

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.r_[w.ravel(), b.ravel()] for w, b in self.layers])


def init_mlp(in_dim: int, hidden: Sequence[int], out_dim: int,
             activation: Activation, head: str, seed: int,
             dtype=np.float32) -> MlpParams:
    """Glorot-uniform init; sine nets scale the first layer by 1/frequency."""
    rng = np.random.default_rng(seed)
    dims = [in_dim] + list(hidden) + [out_dim]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if i == 0 and activation.kind == ACT_SINE:
            w /= activation.frequency
        if i == len(dims) - 2:
            # zero output layer: training starts from the zero function,
            # so there is no random initial field to unlearn
            w[...] = 0.0
        layers.append((w.astype(dtype), np.zeros(fan_out, dtype=dtype)))
    return MlpParams(layers, activation, head)


@dataclass
class Batch:
    """Training batch; ``inputs`` are subdomain-normalized coordinates."""

    inputs: np.ndarray          # (n, 3) in [0, 1]^3
    targets: np.ndarray         # (n,) values or labels, or (n, k)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


@dataclass
class LrSchedule:
    """Smooth exponential decay sampled per epoch."""

    lr0: float
    decay: float = 0.975
    interval: float = 100.0

    def __post_init__(self):
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay must be in (0, 1]")
        if self.interval <= 0:
            raise ValueError("interval must be positive")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """lr0 * decay^(epoch / interval) with a real-valued exponent."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.lr0 * schedule.decay ** (epoch / schedule.interval)


# -- forward / loss / gradients ------------------------------------------------


def _apply_activation(act: Activation, z: np.ndarray) -> np.ndarray:
    if act.kind == ACT_RELU:
        return np.maximum(z, 0.0)
    if act.kind == ACT_TANH:
        return np.tanh(z)
    return np.sin(act.frequency * z)


def _activation_deriv(act: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if act.kind == ACT_RELU:
        return (z > 0.0).astype(z.dtype)
    if act.kind == ACT_TANH:
        return 1.0 - a * a
    return act.frequency * np.cos(act.frequency * z)


def _forward_trace(params: MlpParams, feats: np.ndarray):
    acts = [feats]
    pres = []
    a = feats
    for w, b in params.layers[:-1]:
        z = a @ w.T + b
        a = _apply_activation(params.activation, z)
        pres.append(z)
        acts.append(a)
    w, b = params.layers[-1]
    out = a @ w.T + b
    return out, pres, acts


def mlp_forward(params: MlpParams, ff: FourierFeatures, xs: np.ndarray) -> np.ndarray:
    """Deterministic batched forward pass; classification heads return logits."""
    xs = np.asarray(xs)
    single = xs.ndim == 1
    feats = ffm_map(ff, xs).astype(params.layers[0][0].dtype)
    if single:
        feats = feats[None, :]
    out, _, _ = _forward_trace(params, feats)
    return out[0] if single else out


LOSS_MSE = "mse"
LOSS_CE = "ce"
LOSS_BCE = "bce"


def _loss_grad_output(out: np.ndarray, targets: np.ndarray, kind: str):
    """Batch-mean loss and its gradient at the network output."""
    n = out.shape[0]
    if kind == LOSS_MSE:
        t = np.asarray(targets, dtype=out.dtype).reshape(out.shape)
        diff = out - t
        loss = float(np.mean(diff * diff))
        dout = (2.0 / diff.size) * diff
        return loss, dout
    if kind == LOSS_CE:
        labels = np.asarray(targets, dtype=np.int64).reshape(n)
        if labels.min() < 0 or labels.max() >= out.shape[1]:
            raise ValueError("class label outside head arity")
        zmax = out.max(axis=1, keepdims=True)
        ez = np.exp(out - zmax)
        sez = ez.sum(axis=1, keepdims=True)
        logp = out - zmax - np.log(sez)
        loss = float(-np.mean(logp[np.arange(n), labels]))
        dout = ez / sez
        dout[np.arange(n), labels] -= 1.0
        dout /= n
        return loss, dout.astype(out.dtype)
    if kind == LOSS_BCE:
        t = np.asarray(targets, dtype=out.dtype).reshape(out.shape)
        if ((t != 0) & (t != 1)).any():
            raise ValueError("binary targets must be 0 or 1")
        # stable log(1 + exp(-|z|)) formulation
        loss = float(np.mean(np.maximum(out, 0.0) - out * t + np.log1p(np.exp(-np.abs(out)))))
        sig = 1.0 / (1.0 + np.exp(-out))
        dout = (sig - t) / t.size
        return loss, dout.astype(out.dtype)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_and_grad(params: MlpParams, ff: FourierFeatures, batch: Batch,
                  kind: str):
    """Batch-mean loss and exact analytic gradients shaped like ``params``."""
    xs = np.asarray(batch.inputs)
    if np.isnan(xs).any():
        raise ValueError("NaN in batch inputs")
    dtype = params.layers[0][0].dtype
    feats = ffm_map(ff, xs).astype(dtype)
    out, pres, acts = _forward_trace(params, feats)
    loss, dout = _loss_grad_output(out, batch.targets, kind)
    grads = [None] * len(params.layers)
    delta = dout
    for li in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[li]
        grads[li] = (delta.T @ acts[li], delta.sum(axis=0))
        if li > 0:
            da = delta @ w
            delta = da * _activation_deriv(params.activation, pres[li - 1], acts[li])
    return loss, grads


class AdamState:
    """First/second moment buffers shaped like the parameters; zero at t=0."""

    def __init__(self, params: MlpParams):
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        self.t = 0


def adam_step(state: AdamState, params: MlpParams, grads, lr: float):
    """One bias-corrected Adam update (in place); returns (state, params)."""
    state.t += 1
    t = state.t
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for li, ((gw, gb), (w, b)) in enumerate(zip(grads, params.layers)):
        mw, mb = state.m[li]
        vw, vb = state.v[li]
        mw *= ADAM_BETA1
        mw += (1.0 - ADAM_BETA1) * gw
        vw *= ADAM_BETA2
        vw += (1.0 - ADAM_BETA2) * np.square(gw)
        w -= lr * (mw / c1) / (np.sqrt(vw / c2) + ADAM_EPS)
        mb *= ADAM_BETA1
        mb += (1.0 - ADAM_BETA1) * gb
        vb *= ADAM_BETA2
        vb += (1.0 - ADAM_BETA2) * np.square(gb)
        b -= lr * (mb / c1) / (np.sqrt(vb / c2) + ADAM_EPS)
    return state, params


def grad_check(params: MlpParams, ff: FourierFeatures, batch: Batch,
               kind: str, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in 64-bit mode regardless of the stored parameter dtype.
    """
    p64 = params.astype(np.float64)
    _, grads = loss_and_grad(p64, ff, batch, kind)

    def loss_only() -> float:
        loss, _ = loss_and_grad(p64, ff, batch, kind)
        return loss

    max_rel = 0.0
    for li, (w, b) in enumerate(p64.layers):
        for arr, garr in ((w, grads[li][0]), (b, grads[li][1])):
            flat = arr.ravel()
            gflat = np.asarray(garr).ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_only()
                flat[i] = orig - h
                lm = loss_only()
                flat[i] = orig
                num = (lp - lm) / (2.0 * h)
                denom = max(abs(num), abs(gflat[i]), 1e-8)
                max_rel = max(max_rel, abs(num - gflat[i]) / denom)
    return max_rel


# -- fused training step --------------------------------------------------------


class TrainWorkspace:
    """Reusable batch buffers for the fused step (one per worker)."""

    def __init__(self):
        self.bufs: Dict[str, np.ndarray] = {}

    def get(self, name: str, shape, dtype=np.float32) -> np.ndarray:
        buf = self.bufs.get(name)
        if buf is None or buf.shape != tuple(shape) or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self.bufs[name] = buf
        return buf


class FusedNet:
    """Training-time view of (MlpParams, FourierFeatures, AdamState).

    Holds the first-layer weights in block feature order; :meth:`commit`
    writes the canonical interleaved convention back into ``params``.
    """

    def __init__(self, params: MlpParams, ff: FourierFeatures,
                 state: Optional[AdamState] = None):
        self.params = params
        self.ff = ff
        self.state = state if state is not None else AdamState(params)
        self.perm = block_to_interleaved_cols(ff.m)
        self.inv = np.argsort(self.perm)
        self.W = [w.copy() for w, _ in params.layers]
        self.b = [b.copy() for _, b in params.layers]
        self.W[0] = self.W[0][:, self.inv].copy()
        self.mW = [m[0].copy() for m in self.state.m]
        self.vW = [v[0].copy() for v in self.state.v]
        self.mW[0] = self.mW[0][:, self.inv].copy()
        self.vW[0] = self.vW[0][:, self.inv].copy()
        self.mb = [m[1].copy() for m in self.state.m]
        self.vb = [v[1].copy() for v in self.state.v]
        self.t = self.state.t
        self._b2pi = (2.0 * np.pi * ff.matrix.T).astype(np.float32)

    def commit(self) -> None:
        """Write training buffers back into params/state (interleaved)."""
        for li, (w, b) in enumerate(self.params.layers):
            src = self.W[li][:, self.perm] if li == 0 else self.W[li]
            w[...] = src
            b[...] = self.b[li]
            self.state.m[li][0][...] = self.mW[li][:, self.perm] if li == 0 else self.mW[li]
            self.state.v[li][0][...] = self.vW[li][:, self.perm] if li == 0 else self.vW[li]
            self.state.m[li][1][...] = self.mb[li]
            self.state.v[li][1][...] = self.vb[li]
        self.state.t = self.t


def fused_step(net: FusedNet, xb: np.ndarray, yb: np.ndarray, kind: str,
               lr: float, ws: TrainWorkspace) -> float:
    """One forward/backward/Adam step with preallocated buffers.

    Mathematically identical to loss_and_grad + adam_step; summation order
    differs in the first layer (block vs interleaved feature columns).
    """
    act = net.params.activation
    n = xb.shape[0]
    m = net.ff.m
    nh = len(net.W) - 1
    theta = ws.get("theta", (n, m))
    feats = ws.get("feats", (n, 2 * m))
    np.dot(xb, net._b2pi, out=theta)
    np.cos(theta, out=feats[:, :m])
    np.sin(theta, out=feats[:, m:])
    if net.ff.amplitude != 1.0:
        feats *= np.float32(net.ff.amplitude)
    a = feats
    pres = []
    acts = [feats]
    for i in range(nh):
        width = net.W[i].shape[0]
        z = ws.get(f"z{i}", (n, width))
        av = ws.get(f"a{i}", (n, width))
        np.dot(a, net.W[i].T, out=z)
        z += net.b[i]
        if act.kind == ACT_SINE:
            z *= np.float32(act.frequency)
            np.sin(z, out=av)
        elif act.kind == ACT_TANH:
            np.tanh(z, out=av)
        else:
            np.maximum(z, 0.0, out=av)
        pres.append(z)
        acts.append(av)
        a = av
    out = a @ net.W[nh].T
    out += net.b[nh]
    loss, dout = _loss_grad_output(out, yb, kind)
    delta = dout.astype(np.float32, copy=False)
    gW = [None] * (nh + 1)
    gb = [None] * (nh + 1)
    gW[nh] = delta.T @ acts[nh]
    gb[nh] = delta.sum(axis=0)
    da = delta @ net.W[nh]
    for i in range(nh - 1, -1, -1):
        z = pres[i]
        if act.kind == ACT_SINE:
            np.cos(z, out=z)
            z *= np.float32(act.frequency)
        elif act.kind == ACT_TANH:
            av = acts[i + 1]
            np.multiply(av, av, out=z)
            np.subtract(1.0, z, out=z)
        else:
            mask = ws.get(f"gt{i}", z.shape, bool)
            np.greater(z, 0.0, out=mask)
            np.copyto(z, mask, casting="unsafe")
        da *= z
        gW[i] = da.T @ acts[i]
        gb[i] = da.sum(axis=0)
        if i > 0:
            da = da @ net.W[i]
    net.t += 1
    c1 = 1.0 - ADAM_BETA1 ** net.t
    c2 = 1.0 - ADAM_BETA2 ** net.t
    for i in range(nh + 1):
        mw, vw = net.mW[i], net.vW[i]
        mw *= ADAM_BETA1
        mw += (1.0 - ADAM_BETA1) * gW[i]
        vw *= ADAM_BETA2
        vw += (1.0 - ADAM_BETA2) * np.square(gW[i])
        net.W[i] -= lr * (mw / c1) / (np.sqrt(vw / c2) + ADAM_EPS)
        mb, vb = net.mb[i], net.vb[i]
        mb *= ADAM_BETA1
        mb += (1.0 - ADAM_BETA1) * gb[i]
        vb *= ADAM_BETA2
        vb += (1.0 - ADAM_BETA2) * np.square(gb[i])
        net.b[i] -= lr * (mb / c1) / (np.sqrt(vb / c2) + ADAM_EPS)
    return loss


def forward_block(params: MlpParams, ff: FourierFeatures, pts: np.ndarray,
                  chunk: int = 131072) -> np.ndarray:
    """Chunked float32 forward pass using the block feature layout.

    Same math as mlp_forward with first-layer columns permuted; used by the
    inference paths where throughput matters.
    """
    act = params.activation
    perm = block_to_interleaved_cols(ff.m)
    w0 = params.layers[0][0][:, np.argsort(perm)].copy()
    b2pi = (2.0 * np.pi * ff.matrix.T).astype(np.float32)
    outs = []
    for s in range(0, pts.shape[0], chunk):
        p = np.asarray(pts[s:s + chunk], dtype=np.float32)
        theta = p @ b2pi
        a = np.concatenate([np.cos(theta), np.sin(theta)], axis=1)
        if ff.amplitude != 1.0:
            a *= np.float32(ff.amplitude)
        for i, (w, b) in enumerate(params.layers[:-1]):
            z = a @ (w0.T if i == 0 else w.T) + b
            a = _apply_activation(act, z)
        w, b = params.layers[-1]
        outs.append(a @ w.T + b)
    return np.concatenate(outs, axis=0)


def fused_forward(net: FusedNet, pts: np.ndarray, chunk: int = 131072) -> np.ndarray:
    """Chunked forward pass with the block feature layout (training view)."""
    act = net.params.activation
    outs = []
    for s in range(0, pts.shape[0], chunk):
        p = np.asarray(pts[s:s + chunk], dtype=np.float32)
        theta = p @ net._b2pi
        a = np.concatenate([np.cos(theta), np.sin(theta)], axis=1)
        if net.ff.amplitude != 1.0:
            a *= np.float32(net.ff.amplitude)
        for i in range(len(net.W) - 1):
            z = a @ net.W[i].T + net.b[i]
            a = _apply_activation(act, z)
        outs.append(a @ net.W[-1].T + net.b[-1])
    return np.concatenate(outs, axis=0)
