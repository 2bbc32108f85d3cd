"""Define-by-run reverse-mode autodiff on dense float64 arrays.

Small engine sufficient for MLPs and backpropagation through time over
spiking layers: a gradient tape records primitive ops while active, and
``backward`` replays adjoints in reverse creation order (a valid reverse
topological order for a define-by-run graph).
"""
from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand dimensions are not conformable."""


class NumericalError(FloatingPointError):
    """Raised when a non-finite value reaches a guarded operation."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(name: str):
    """Set the dtype new tensors are coerced to ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported dtype {name!r}")
    _DEFAULT_DTYPE = np.dtype(name).type


def default_dtype() -> str:
    return np.dtype(_DEFAULT_DTYPE).name


class Tensor:
    """A float array plus optional gradient-graph bookkeeping.

    Dimensions are immutable after creation; values created from user data
    are coerced to the engine's default dtype and checked finite. Results
    of internal ops (``_checked=True``) keep their dtype as computed.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _checked: bool = False):
        if _checked:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
            if not np.all(np.isfinite(arr)):
                raise NumericalError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Value copy with no gradient history."""
        return Tensor(self.data.copy(), _checked=True)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager; ops executed while the tape is active and
    touching at least one grad-requiring tensor are recorded.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


_TAPES: list[GradTape] = []


class no_grad:
    """Context manager that suppresses all tape recording."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def _active_tape():
    if _TAPES and _TAPES[-1] is not None:
        return _TAPES[-1]
    return None


def _record(out: Tensor, parents, backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape._nodes.append(out)
    return out


def _acc(grads: dict, t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    k = id(t)
    if k in grads:
        grads[k] = grads[k] + g
    else:
        grads[k] = g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class GradientMap:
    """Map from parameter identity to its accumulated adjoint."""

    def __init__(self, raw: dict):
        self._raw = raw

    def get(self, param: Tensor) -> np.ndarray:
        g = self._raw.get(id(param))
        if g is None:
            return np.zeros_like(param.data)
        return np.broadcast_to(g, param.data.shape) if g.shape != param.data.shape else g

    __getitem__ = get


def backward(tape: GradTape, loss: Tensor) -> GradientMap:
    """Accumulate adjoints of ``loss`` w.r.t. everything on the tape.

    Every recorded node is visited exactly once, in reverse creation
    order; parameters not reachable from ``loss`` get exactly zero.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        node._backward(g, grads)
    return GradientMap(grads)


# ---------------------------------------------------------------------------
# primitive operations


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"linear: input {xd.shape} does not match weight {wd.shape}")
    y = xd @ wd.T
    if b is not None:
        if b.data.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {b.data.shape} does not match weight {wd.shape}")
        y = y + b.data
    out = Tensor(y, _checked=True)

    def bwd(g, grads):
        _acc(grads, x, g @ wd)
        if xd.ndim == 1:
            _acc(grads, w, np.outer(g, xd))
        else:
            _acc(grads, w, g.T @ xd)
        if b is not None:
            _acc(grads, b, g if xd.ndim == 1 else g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bwd)


def _ew(op_data, a, b, da, db):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(op_data(a.data, b.data), _checked=True)
    except ValueError as e:
        raise ShapeError(f"shapes {a.data.shape} and {b.data.shape}: {e}") from e

    def bwd(g, grads):
        _acc(grads, a, _unbroadcast(da(g, a.data, b.data), a.data.shape))
        _acc(grads, b, _unbroadcast(db(g, a.data, b.data), b.data.shape))

    return _record(out, (a, b), bwd)


def add(a, b) -> Tensor:
    return _ew(np.add, a, b, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _ew(np.subtract, a, b, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _ew(np.multiply, a, b, lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _checked=True)
    return _record(out, (a,), lambda g, grads: _acc(grads, a, -g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(a.data * mask, _checked=True)
    return _record(out, (a,), lambda g, grads: _acc(grads, a, g * mask))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t, _checked=True)
    return _record(out, (a,), lambda g, grads: _acc(grads, a, g * (1.0 - t * t)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise NumericalError("exp overflow")
    out = Tensor(y, _checked=True)
    return _record(out, (a,), lambda g, grads: _acc(grads, a, g * y))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError("log of non-positive value")
    out = Tensor(np.log(a.data), _checked=True)
    return _record(out, (a,), lambda g, grads: _acc(grads, a, g / a.data))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, _checked=True)
    return _record(out, (a,), lambda g, grads: _acc(grads, a, 2.0 * g * a.data))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the unclipped region."""
    mask = (a.data > lo) & (a.data < hi)
    out = Tensor(np.clip(a.data, lo, hi), _checked=True)
    return _record(out, (a,), lambda g, grads: _acc(grads, a, g * mask))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return _ew(
        np.minimum, a, b,
        lambda g, x, y: g * (x <= y),
        lambda g, x, y: g * (x > y),
    )


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _checked=True)

    def bwd(g, grads):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(grads, a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), _checked=True)

    def bwd(g, grads):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(grads, a, np.broadcast_to(g / n, a.data.shape).copy())

    return _record(out, (a,), bwd)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    out = Tensor(np.concatenate([a.data, b.data], axis=-1), _checked=True)
    na = a.data.shape[-1]

    def bwd(g, grads):
        _acc(grads, a, g[..., :na])
        _acc(grads, b, g[..., na:])

    return _record(out, (a, b), bwd)


def surrogate_spike(h: Tensor, v_th: Tensor, k: float) -> Tensor:
    """Heaviside(h - v_th) forward; fast-sigmoid adjoint in the backward pass.

    Forward output is exactly binary (threshold inclusive: h >= v_th fires).
    The recorded adjoint is dS/dh = 1 / (1 + k*|h - v_th|)^2, centred at the
    threshold so that v_th itself receives the mirrored gradient -dS/dh.
    """
    if k <= 0:
        raise ValueError(f"surrogate slope k must be positive, got {k}")
    diff = h.data - v_th.data
    out = Tensor((diff >= 0.0).astype(diff.dtype), _checked=True)

    def bwd(g, grads):
        d = 1.0 + k * np.abs(diff)
        gh = g / (d * d)
        _acc(grads, h, gh)
        _acc(grads, v_th, _unbroadcast(-gh, v_th.data.shape))

    return _record(out, (h, v_th), bwd)


def lif_step(x: Tensor, w: Tensor, h: Tensor | None, s_prev: Tensor | None,
             beta: Tensor, v_th: Tensor, k: float, zero_reset: bool
             ) -> tuple[Tensor, Tensor]:
    """One fused leaky-integrate-and-fire step: returns (membrane, spikes).

    Computes z = x @ w.T, integrates it into the membrane under the given
    reset rule, and thresholds. Equivalent to composing linear/mul/add/sub
    with ``surrogate_spike``, but recorded as two tape nodes instead of
    six — this is the BPTT inner loop, so the fusion matters.
    """
    if k <= 0:
        raise ValueError(f"surrogate slope k must be positive, got {k}")
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"lif_step: input {xd.shape} does not match weight {wd.shape}")
    z = xd @ wd.T
    if h is None:
        pre_d = z
        fresh = True
    elif zero_reset:
        keep = 1.0 - s_prev.data
        m = beta.data * h.data
        m += z
        pre_d = m * keep
        fresh = False
    else:
        pre_d = beta.data * h.data
        pre_d += z
        pre_d -= s_prev.data * v_th.data
        fresh = False
    pre = Tensor(pre_d, _checked=True)
    diff = pre_d - v_th.data
    s = Tensor((diff >= 0.0).astype(diff.dtype), _checked=True)

    def bwd_pre(g, grads):
        if fresh:
            gz = g
        elif zero_reset:
            gz = g * keep
            _acc(grads, h, gz * beta.data)
            _acc(grads, beta, _unbroadcast(gz * h.data, beta.data.shape))
            _acc(grads, s_prev, -g * m)
        else:
            gz = g
            _acc(grads, h, g * beta.data)
            _acc(grads, beta, _unbroadcast(g * h.data, beta.data.shape))
            _acc(grads, s_prev, -g * v_th.data)
            _acc(grads, v_th, _unbroadcast(-g * s_prev.data, v_th.data.shape))
        _acc(grads, x, gz @ wd)
        if xd.ndim == 1:
            _acc(grads, w, np.outer(gz, xd))
        else:
            _acc(grads, w, gz.T @ xd)

    def bwd_spike(g, grads):
        d = 1.0 + k * np.abs(diff)
        gh = g / (d * d)
        _acc(grads, pre, gh)
        _acc(grads, v_th, _unbroadcast(-gh, v_th.data.shape))

    pre_parents = (x, w) if fresh else (
        (x, w, h, s_prev, beta) if zero_reset else (x, w, h, s_prev, beta, v_th))
    _record(pre, pre_parents, bwd_pre)
    _record(s, (pre, v_th), bwd_spike)
    return pre, s


def fast_sigmoid(h: Tensor, v_th: Tensor, k: float) -> Tensor:
    """Smooth proxy x/(1+k|x|) of the spike function, x = h - v_th.

    Its analytic derivative equals the adjoint recorded by
    ``surrogate_spike``, which lets finite differences validate that
    adjoint independently of the binary forward.
    """
    if k <= 0:
        raise ValueError(f"surrogate slope k must be positive, got {k}")
    x = sub(h, v_th)
    diff = x.data
    out = Tensor(diff / (1.0 + k * np.abs(diff)), _checked=True)

    def bwd(g, grads):
        d = 1.0 + k * np.abs(diff)
        _acc(grads, x, g / (d * d))

    return _record(out, (x,), bwd)


def normal_log_prob(mean: Tensor, log_std: Tensor, u: Tensor) -> Tensor:
    """Elementwise log N(u; mean, exp(log_std))."""
    std = np.exp(log_std.data)
    z = (u.data - mean.data) / std
    out = Tensor(-0.5 * z * z - log_std.data - 0.5 * LOG_2PI, _checked=True)

    def bwd(g, grads):
        gu = -g * z / std
        _acc(grads, u, gu)
        _acc(grads, mean, _unbroadcast(-gu, mean.data.shape))
        _acc(grads, log_std, _unbroadcast(g * (z * z - 1.0), log_std.data.shape))

    return _record(out, (mean, log_std, u), bwd)


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: GradientMap):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            g = grads.get(p)
            if not np.all(np.isfinite(g)):
                raise NumericalError("NaN/Inf gradient; training aborted")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def polyak_average(targets, onlines, tau: float):
    """In-place soft update: target <- (1 - tau)*target + tau*online."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    for t, o in zip(targets, onlines, strict=True):
        if t.data.shape != o.data.shape:
            raise ShapeError(f"polyak shapes differ: {t.data.shape} vs {o.data.shape}")
        t.data *= 1.0 - tau
        t.data += tau * o.data
