"""Minimal reverse-mode autodiff kernels for 1-D audio networks.

Everything is built on flat numpy buffers.  A Tensor wraps an array, an
optional gradient buffer, and a backward closure; calling ``backward()`` on a
scalar loss walks the recorded graph in reverse topological order.  Only the
operations the denoising and feature networks actually need are provided:
dilated 3-tap convolution, leaky ReLU, batch normalization, adaptive
normalization, decimation, temporal average pooling, affine maps,
cross-entropy and L1/L2 losses, Xavier initialization, and Adam.

Training arithmetic is meant to run in float32; the same graph code runs in
float64 for gradient verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LRELU_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for a named sub-stream (epoch, file index, ...).

    Distinct paths give statistically independent streams, and the stream for
    a given (seed, path) can be reconstructed at any time, which is what makes
    per-epoch randomness resumable.
    """
    return make_rng(np.random.SeedSequence((seed, *path)))


class Tensor:
    """Array with optional gradient buffer and backward closure.

    ``grad`` stays ``None`` until backward reaches the tensor; gradients
    accumulate across repeated backward calls until reset (``grad = None``).
    Tensors that do not require grad never record graph edges and are safe to
    share across threads.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no graph participation (shares the buffer)."""
        return Tensor(self.data, requires_grad=False)

    def _accum(self, g):
        # takes ownership of g on first touch (callers pass fresh arrays)
        if self.grad is None:
            if g.shape != self.data.shape or not g.flags.writeable:
                g = np.array(np.broadcast_to(g, self.data.shape))
            self.grad = g
        else:
            self.grad += g

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable .grad buffer."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root, got shape %r"
                             % (self.data.shape,))
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, " \
               f"requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap an array as a constant Tensor (no grad)."""
    if isinstance(x, Tensor):
        return x
    a = np.asarray(x)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return Tensor(a)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_finite(t: Tensor, what: str):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# forward/backward ops


def conv1d_dilated(x: Tensor, kernels: Tensor, dilation: int) -> Tensor:
    """3-tap dilated convolution over the time axis, zero padded.

    ``x`` is (N, C_in), ``kernels`` is (3, C_in, C_out) with tap t covering
    input offset -dilation*(t-1), i.e. out[n] = sum_t x[n - r*(t-1)] @ K[t]
    with out-of-range samples read as zero.  Output is (N, C_out) for every
    N >= 1; no bias.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if x.data.ndim != 2:
        raise ValueError(f"conv input must be (N, C), got shape {x.data.shape}")
    k = kernels.data
    if k.ndim != 3 or k.shape[0] != 3:
        raise ValueError(f"kernels must be (3, C_in, C_out), got {k.shape}")
    n, c_in = x.data.shape
    if k.shape[1] != c_in:
        raise ValueError(
            f"kernel input channels {k.shape[1]} != input channels {c_in}")
    r = int(dilation)
    xp = np.zeros((n + 2 * r, c_in), dtype=x.data.dtype)
    xp[r:r + n] = x.data
    # tap t reads x[n - r*(t-1)]  ->  xp[n + r*(2-t)]
    starts = (2 * r, r, 0)
    stacked = np.concatenate([xp[s:s + n] for s in starts], axis=1)
    y = stacked @ k.reshape(3 * c_in, k.shape[2])

    def backward(g):
        if kernels.requires_grad:
            dk = np.empty_like(k)
            for t, s in enumerate(starts):
                dk[t] = xp[s:s + n].T @ g
            kernels._accum(dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for t, s in enumerate(starts):
                dxp[s:s + n] += g @ k[t].T
            x._accum(dxp[r:r + n])

    return _node(y, (x, kernels), backward)


def lrelu(x: Tensor) -> Tensor:
    """Leaky ReLU max(0.2*x, x); slope at exactly 0 is 1."""
    y = np.maximum(LRELU_SLOPE * x.data, x.data)

    def backward(g):
        gx = np.where(x.data >= 0, x.data.dtype.type(1.0),
                      x.data.dtype.type(LRELU_SLOPE))
        np.multiply(gx, g, out=gx)
        x._accum(gx)

    return _node(y, (x,), backward)


@dataclass
class BatchNormState:
    """Per-channel normalization state for one layer.

    Running statistics start empty; the first batch-mode pass copies the
    batch statistics, later passes blend with momentum
    ``running = momentum*running + (1-momentum)*batch``.  ``gamma``/``beta``
    are optional learned per-channel affine tensors.
    """

    channels: int
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @classmethod
    def with_affine(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        st = cls(channels)
        st.gamma = parameter(np.ones(channels, dtype=dtype))
        st.beta = parameter(np.zeros(channels, dtype=dtype))
        return st

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None

    def set_running(self, mean, var):
        mean = np.asarray(mean)
        var = np.asarray(var)
        if mean.shape != (self.channels,) or var.shape != (self.channels,):
            raise ValueError("running stats must be per-channel vectors")
        self.running_mean = mean.copy()
        self.running_var = var.copy()


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "batch",
               update_running: bool = True,
               gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """Per-channel normalization of a (N, C) tensor over the time axis.

    ``batch`` mode normalizes by the current input's statistics (N >= 2
    required) and, unless ``update_running`` is off, folds them into the
    running estimates.  ``running`` mode applies the stored statistics and
    never updates them.  ``gamma``/``beta`` override the state's affine
    parameters (used when the owner keeps them detached).
    """
    if x.data.ndim != 2:
        raise ValueError(f"batch_norm input must be (N, C), got {x.data.shape}")
    n, c = x.data.shape
    if c != state.channels:
        raise ValueError(f"input has {c} channels, state expects {state.channels}")
    if gamma is None:
        gamma = state.gamma
    if beta is None:
        beta = state.beta
    dt = x.data.dtype

    if mode == "batch":
        if n < 2:
            raise ValueError("batch-mode normalization needs N >= 2 samples")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_running:
            if state.initialized:
                m = dt.type(state.momentum)
                state.running_mean = m * state.running_mean + (1 - m) * mu
                state.running_var = m * state.running_var + (1 - m) * var
            else:
                state.set_running(mu, var)
    elif mode == "running":
        if not state.initialized:
            raise ValueError("running-mode normalization requested before any "
                             "statistics were recorded")
        mu = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    istd = 1.0 / np.sqrt(var + dt.type(state.eps))
    xhat = (x.data - mu) * istd
    if gamma is not None:
        y = xhat * gamma.data + beta.data
    else:
        y = xhat

    if mode == "batch":
        def backward(g):
            gh = g * gamma.data if gamma is not None else g
            if gamma is not None and gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=0))
            if beta is not None and beta.requires_grad:
                beta._accum(g.sum(axis=0))
            if x.requires_grad:
                # full backward through the batch statistics
                sg = gh.sum(axis=0)
                sgx = (gh * xhat).sum(axis=0)
                dx = gh - xhat * (sgx / n)
                dx -= sg / n
                dx *= istd
                x._accum(dx)
    else:
        def backward(g):
            gh = g * gamma.data if gamma is not None else g
            if gamma is not None and gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=0))
            if beta is not None and beta.requires_grad:
                beta._accum(g.sum(axis=0))
            if x.requires_grad:
                x._accum(gh * istd)

    parents = [x]
    if gamma is not None:
        parents += [gamma, beta]
    return _node(y, parents, backward)


def adaptive_norm(x: Tensor, alpha: Tensor, beta: Tensor,
                  state: BatchNormState, mode: str = "batch",
                  update_running: bool = True) -> Tensor:
    """Learned blend alpha*x + beta*BN(x) with scalar alpha, beta."""
    bn = batch_norm(x, state, mode=mode, update_running=update_running)
    y = alpha.data * x.data
    y += beta.data * bn.data

    def backward(g):
        if alpha.requires_grad:
            alpha._accum(np.asarray(np.vdot(g, x.data), dtype=alpha.data.dtype))
        if beta.requires_grad:
            beta._accum(np.asarray(np.vdot(g, bn.data), dtype=beta.data.dtype))
        if x.requires_grad:
            x._accum(alpha.data * g)
        if bn.requires_grad:
            bn._accum(beta.data * g)

    return _node(y, (x, bn, alpha, beta), backward)


def decimate2(x: Tensor) -> Tensor:
    """Keep even-indexed time samples: (N, C) -> (ceil(N/2), C)."""
    if x.data.shape[0] < 1:
        raise ValueError("decimate2 needs at least one sample")
    y = x.data[::2].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[::2] = g
        x._accum(dx)

    return _node(y, (x,), backward)


def avg_pool_time(x: Tensor) -> Tensor:
    """Mean over the time axis: (N, C) -> (1, C)."""
    n = x.data.shape[0]
    if n < 1:
        raise ValueError("avg_pool_time needs at least one sample")
    y = x.data.mean(axis=0, keepdims=True)

    def backward(g):
        x._accum(np.broadcast_to(g / n, x.data.shape))

    return _node(y, (x,), backward)


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map per time step: (N, C_in) @ (C_in, C_out) + bias."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ValueError("linear expects 2-D input and weights")
    if x.data.shape[1] != weights.data.shape[0]:
        raise ValueError(f"linear shape mismatch: input {x.data.shape} "
                         f"vs weights {weights.data.shape}")
    y = x.data @ weights.data + bias.data

    def backward(g):
        if x.requires_grad:
            x._accum(g @ weights.data.T)
        if weights.requires_grad:
            weights._accum(x.data.T @ g)
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))

    return _node(y, (x, weights, bias), backward)


def classify_loss(logits: Tensor, target, mode: str) -> Tensor:
    """Numerically stable cross-entropy of squashed logits against target.

    ``softmax`` mode expects a one-hot target (single-label task); ``sigmoid``
    mode expects a {0,1} multi-hot target and sums the per-class binary
    cross-entropies.
    """
    z = logits.data.reshape(-1)
    t = np.asarray(target, dtype=z.dtype).reshape(-1)
    if t.shape != z.shape:
        raise ValueError(f"target size {t.shape[0]} != logit size {z.shape[0]}")
    if mode == "softmax":
        if not (np.all((t == 0) | (t == 1)) and np.sum(t) == 1):
            raise ValueError("softmax mode requires a one-hot target")
        zmax = z.max()
        lse = zmax + np.log(np.exp(z - zmax).sum())
        loss = lse - float(z @ t)
        probs = np.exp(z - lse)

        def backward(g):
            logits._accum(((probs - t) * g).reshape(logits.data.shape))

    elif mode == "sigmoid":
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("sigmoid mode requires a {0,1} target vector")
        # sum_c softplus(z) - z*t, in the overflow-safe arrangement
        loss = float(np.sum(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))))
        sig = 1.0 / (1.0 + np.exp(-z))

        def backward(g):
            logits._accum(((sig - t) * g).reshape(logits.data.shape))

    else:
        raise ValueError(f"unknown classify_loss mode {mode!r}")

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def _abs_diff_loss(a: Tensor, b: Tensor, squared: bool) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"loss shape mismatch: {a.data.shape} vs {b.data.shape}")
    d = a.data - b.data
    if squared:
        val = np.asarray((d * d).sum(), dtype=a.data.dtype)

        def backward(g):
            gd = 2.0 * d * g
            if a.requires_grad:
                a._accum(gd)
            if b.requires_grad:
                b._accum(-gd)
    else:
        val = np.asarray(np.abs(d).sum(), dtype=a.data.dtype)
        sgn = np.sign(d)  # subgradient 0 at exact ties

        def backward(g):
            gd = sgn * g
            if a.requires_grad:
                a._accum(gd)
            if b.requires_grad:
                b._accum(-gd)

    return _node(val, (a, b), backward)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Unnormalized sum of absolute differences (callers average if needed)."""
    return _abs_diff_loss(a, b, squared=False)


def l2_loss(a: Tensor, b: Tensor) -> Tensor:
    """Unnormalized sum of squared differences."""
    return _abs_diff_loss(a, b, squared=True)


def weighted_sum(terms: list[Tensor], weights) -> Tensor:
    """Scalar sum_i weights[i]*terms[i] with constant weights."""
    w = np.asarray(weights, dtype=np.float64)
    if len(terms) != w.size:
        raise ValueError(f"{len(terms)} terms vs {w.size} weights")
    dt = terms[0].data.dtype
    val = np.asarray(sum(float(wi) * float(t.data) for wi, t in zip(w, terms)),
                     dtype=dt)

    def backward(g):
        for wi, t in zip(w, terms):
            if t.requires_grad:
                t._accum(np.asarray(float(wi) * g, dtype=t.data.dtype))

    return _node(val, tuple(terms), backward)


# ---------------------------------------------------------------------------
# initialization and optimization


def xavier_init(shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Uniform Xavier draw on +-sqrt(6/(fan_in+fan_out)).

    For 3-tap conv kernels (3, C_in, C_out) the fans are 3*C_in and 3*C_out;
    for matrices (C_in, C_out) they are the two dims.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 3:
        if shape[0] != 3:
            raise ValueError(f"conv kernel shape must start with 3 taps, got {shape}")
        fan_in, fan_out = 3 * shape[1], 3 * shape[2]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        raise ValueError(f"cannot derive fans from shape {shape}")
    if fan_in == 0 or fan_out == 0:
        raise ValueError(f"zero fan in shape {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, shape).astype(dtype))


@dataclass
class AdamState:
    """Per-parameter Adam buffers (first/second moments and step count)."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Adam:
    """Adam with bias correction; beta/eps defaults are the canonical ones.

    Parameters whose ``grad`` is ``None`` at step time are skipped entirely
    (their moments and step counts do not advance), matching the usual
    lazy-gradient semantics of alternating multi-task training.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 names: list[str] | None = None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.names = list(names) if names is not None else [
            f"param{i}" for i in range(len(self.params))]
        self.state = [AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                      for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for name, p, st in zip(self.names, self.params, self.state):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
            st.step += 1
            st.m = self.beta1 * st.m + (1 - self.beta1) * g
            st.v = self.beta2 * st.v + (1 - self.beta2) * (g * g)
            mhat = st.m / (1 - self.beta1 ** st.step)
            vhat = st.v / (1 - self.beta2 ** st.step)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
