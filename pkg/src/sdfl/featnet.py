"""Decimating audio classification network and the deep feature loss.

A VGG-flavoured stack: every layer convolves with 3-tap kernels (dilation 1),
batch-normalizes with a learned per-channel affine, applies a leaky ReLU and
drops every other sample, halving the time axis.  Channel width doubles every
5 layers starting from 32, and with the default 14 layers the receptive field
is 2^15 - 1 samples.  Per-task linear heads sit on the time-averaged final
activations; the heads are the only task-dependent parameters.

The same network doubles as a trainable loss: the feature loss between two
waveforms is the weighted sum of per-layer L1 gaps between the activation
stacks they induce, evaluated with frozen parameters and stored statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng


@dataclass(frozen=True)
class TaskSpec:
    """One classification task: label count plus squashing mode
    ("softmax" = exactly one label per file, "sigmoid" = any subset)."""

    name: str
    n_classes: int
    mode: str

    def __post_init__(self):
        if self.mode not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown task mode {self.mode!r}")
        if self.n_classes < 1:
            raise ValueError("task needs at least one class")


@dataclass(frozen=True)
class FeatureNetConfig:
    """Architecture knobs; defaults give the full-size network."""

    n_layers: int = 14
    base_width: int = 32
    widen_every: int = 5

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** (m // self.widen_every)
                for m in range(self.n_layers)]

    def receptive_field(self) -> int:
        return 2 ** (self.n_layers + 1) - 1


@dataclass
class FeatureNetParams:
    config: FeatureNetConfig
    tasks: list[TaskSpec]
    kernels: list[ng.Tensor]            # layer m: (3, W_{m-1}, W_m)
    bn: list[ng.BatchNormState]         # affine per channel
    heads: list[tuple[ng.Tensor, ng.Tensor]]  # per task: (W_last, C_p), (C_p,)

    def trainable(self) -> list[ng.Tensor]:
        out = list(self.kernels)
        for st in self.bn:
            out += [st.gamma, st.beta]
        for w, b in self.heads:
            out += [w, b]
        return out

    def named_parameters(self) -> list[tuple[str, ng.Tensor]]:
        named = []
        for m, t in enumerate(self.kernels):
            named.append((f"layer{m + 1}.kernel", t))
        for m, st in enumerate(self.bn):
            named.append((f"layer{m + 1}.bn.gamma", st.gamma))
            named.append((f"layer{m + 1}.bn.beta", st.beta))
        for task, (w, b) in zip(self.tasks, self.heads):
            named.append((f"head.{task.name}.weight", w))
            named.append((f"head.{task.name}.bias", b))
        return named

    def task_index(self, name: str) -> int:
        for i, t in enumerate(self.tasks):
            if t.name == name:
                return i
        raise KeyError(f"unknown task {name!r}")


def featnet_init(tasks: list[TaskSpec], rng: np.random.Generator,
                 config: FeatureNetConfig = FeatureNetConfig(),
                 dtype=np.float32) -> FeatureNetParams:
    """Xavier kernels and heads, zero head biases, affine at (1, 0),
    empty normalization statistics."""
    if not tasks:
        raise ValueError("need at least one classification task")
    widths = config.widths()
    kernels, bn = [], []
    for m, w_out in enumerate(widths):
        w_in = 1 if m == 0 else widths[m - 1]
        kernels.append(ng.xavier_init((3, w_in, w_out), rng, dtype=dtype))
        bn.append(ng.BatchNormState.with_affine(w_out, dtype=dtype))
    heads = []
    for task in tasks:
        w = ng.xavier_init((widths[-1], task.n_classes), rng, dtype=dtype)
        b = ng.parameter(np.zeros(task.n_classes, dtype=dtype))
        heads.append((w, b))
    return FeatureNetParams(config, list(tasks), kernels, bn, heads)


def _as_input(x, dtype) -> ng.Tensor:
    t = x if isinstance(x, ng.Tensor) else ng.as_tensor(np.asarray(x, dtype=dtype))
    if t.data.ndim == 1:
        lifted = ng.Tensor(t.data.reshape(-1, 1), requires_grad=t.requires_grad)
        if t.requires_grad:
            lifted._parents = (t,)
            lifted._backward = lambda g: t._accum(g.reshape(t.data.shape))
        t = lifted
    if t.data.ndim != 2 or t.data.shape[1] != 1:
        raise ValueError(f"feature-net input must be (N,) or (N, 1), got {t.data.shape}")
    if t.data.shape[0] < 1:
        raise ValueError("feature-net input is empty")
    return t


def _stack(x, params: FeatureNetParams, depth: int, mode: str,
           update_running: bool = True):
    """Forward through ``depth`` layers.

    Returns (decimated activations per layer, last pre-decimation
    activation).  ``frozen`` uses stored statistics and detaches every
    parameter, so the graph only tracks the input — that is what lets the
    loss network score a denoiser output without accumulating gradients of
    its own.
    """
    if mode not in ("train", "frozen"):
        raise ValueError(f"unknown mode {mode!r}")
    if not 1 <= depth <= params.config.n_layers:
        raise ValueError(f"depth {depth} out of range 1..{params.config.n_layers}")
    frozen = mode == "frozen"
    bn_mode = "running" if frozen else "batch"
    dtype = params.kernels[0].data.dtype
    h = _as_input(x, dtype)
    features = []
    pre = None
    for m in range(depth):
        kern = params.kernels[m].detach() if frozen else params.kernels[m]
        st = params.bn[m]
        gamma = st.gamma.detach() if frozen else st.gamma
        beta = st.beta.detach() if frozen else st.beta
        h = ng.conv1d_dilated(h, kern, 1)
        h = ng.batch_norm(h, st, mode=bn_mode,
                          update_running=update_running and not frozen,
                          gamma=gamma, beta=beta)
        pre = ng.lrelu(h)
        h = ng.decimate2(pre)
        features.append(h)
    return features, pre


def feature_forward(x, params: FeatureNetParams, depth: int | None = None,
                    mode: str = "frozen", update_running: bool = True) -> list[ng.Tensor]:
    """Decimated feature stack; layer m has length ceil(N / 2^m)."""
    depth = params.config.n_layers if depth is None else depth
    features, _ = _stack(x, params, depth, mode, update_running)
    return features


def task_logits(x, params: FeatureNetParams, task: int,
                mode: str = "train", update_running: bool = True) -> ng.Tensor:
    """Head output (1, C_p): time-averaged last pre-decimation activations
    through the task's affine head."""
    if not 0 <= task < len(params.tasks):
        raise KeyError(f"task index {task} out of range")
    _, pre = _stack(x, params, params.config.n_layers, mode, update_running)
    pooled = ng.avg_pool_time(pre)
    w, b = params.heads[task]
    if mode == "frozen":
        w, b = w.detach(), b.detach()
    return ng.linear(pooled, w, b)


def squash(logits: np.ndarray, mode: str) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if mode == "softmax":
        e = np.exp(z - z.max())
        return e / e.sum()
    return 1.0 / (1.0 + np.exp(-z))


def classify(x, params: FeatureNetParams, task: int) -> np.ndarray:
    """Probability vector for one task (frozen statistics); softmax rows sum
    to 1, sigmoid entries are independent probabilities."""
    logits = task_logits(x, params, task, mode="frozen")
    return squash(logits.data, params.tasks[task].mode)


def collect_preactivations(x, params: FeatureNetParams,
                           depth: int | None = None) -> list[np.ndarray]:
    """Normalized activations feeding each LReLU under frozen statistics
    (gradient-verification support)."""
    depth = params.config.n_layers if depth is None else depth
    dtype = params.kernels[0].data.dtype
    h = _as_input(np.asarray(x.data if isinstance(x, ng.Tensor) else x), dtype)
    h = h.detach()
    acts = []
    for m in range(depth):
        h = ng.conv1d_dilated(h, params.kernels[m].detach(), 1)
        h = ng.batch_norm(h, params.bn[m], mode="running", update_running=False,
                          gamma=params.bn[m].gamma.detach(),
                          beta=params.bn[m].beta.detach())
        acts.append(h.data)
        h = ng.decimate2(ng.lrelu(h))
    return acts


# ---------------------------------------------------------------------------
# deep feature loss


@dataclass
class LossWeights:
    """Per-layer weights of the feature loss; all ones until calibrated."""

    lambdas: np.ndarray
    calibrated: bool = False

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if np.any(self.lambdas <= 0):
            raise ValueError("loss weights must be positive")

    @classmethod
    def ones(cls, depth: int) -> "LossWeights":
        return cls(np.ones(depth, dtype=np.float64))

    @property
    def depth(self) -> int:
        return int(self.lambdas.size)


def feature_terms(s, y, params: FeatureNetParams, depth: int) -> list[ng.Tensor]:
    """Per-layer L1 gaps between the frozen feature stacks of ``s`` and ``y``."""
    s_t = s if isinstance(s, ng.Tensor) else ng.as_tensor(
        np.asarray(s, dtype=params.kernels[0].data.dtype))
    y_t = y if isinstance(y, ng.Tensor) else ng.as_tensor(
        np.asarray(y, dtype=params.kernels[0].data.dtype))
    if s_t.data.shape[0] != y_t.data.shape[0]:
        raise ValueError(f"length mismatch: {s_t.data.shape[0]} vs {y_t.data.shape[0]}")
    fs = feature_forward(s_t, params, depth, mode="frozen")
    fy = feature_forward(y_t, params, depth, mode="frozen")
    return [ng.l1_loss(a, b) for a, b in zip(fs, fy)]


def feature_loss(s, y, params: FeatureNetParams, weights: LossWeights) -> ng.Tensor:
    """Weighted sum of per-layer feature gaps; differentiable w.r.t. ``y``
    (and anything upstream of it)."""
    terms = feature_terms(s, y, params, weights.depth)
    return ng.weighted_sum(terms, weights.lambdas)


def calibrate_lambda(term_sums) -> LossWeights:
    """Balance the loss layers: weights inverse to the recorded per-layer
    magnitudes, normalized so equal magnitudes keep weight 1."""
    t = np.asarray(term_sums, dtype=np.float64)
    if t.ndim != 1 or t.size < 1:
        raise ValueError("need a vector of per-layer magnitudes")
    if np.any(t <= 0):
        raise ValueError(f"non-positive loss term in {t!r} (dead layer or empty epoch)")
    return LossWeights(lambdas=t.mean() / t, calibrated=True)
