"""Fully-convolutional context-aggregation denoising network.

The network maps a waveform to a waveform of the same length: a ladder of
3-tap dilated convolutions (dilation doubling per layer, the final ladder
layer undilated) each followed by adaptive normalization and a leaky ReLU,
closed by a per-sample affine output stage.  With the default 14 ladder
layers the receptive field is 2^14 + 1 = 16385 samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture knobs; defaults give the full-size network."""

    width: int = 64
    n_layers: int = 14

    def dilations(self) -> list[int]:
        """Doubling ladder 1, 2, 4, ... with the last layer undilated."""
        if self.n_layers < 1:
            raise ValueError("need at least one layer")
        return [2 ** k for k in range(self.n_layers - 1)] + [1]

    def receptive_field(self) -> int:
        return 2 * sum(self.dilations()) + 1


@dataclass
class DenoiserParams:
    """All learned state: ladder kernels, per-layer blend scalars and
    normalization statistics, and the output affine stage.

    Ladder layers carry no bias (normalization absorbs it); the output stage
    is the only place a bias exists.
    """

    config: DenoiserConfig
    kernels: list[ng.Tensor]        # layer k: (3, C_in, width)
    alphas: list[ng.Tensor]         # scalars, identity blend weight
    betas: list[ng.Tensor]          # scalars, normalization blend weight
    bn: list[ng.BatchNormState]     # no per-channel affine
    out_weight: ng.Tensor           # (width, 1)
    out_bias: ng.Tensor             # (1,)

    def trainable(self) -> list[ng.Tensor]:
        return (self.kernels + self.alphas + self.betas
                + [self.out_weight, self.out_bias])

    def named_parameters(self) -> list[tuple[str, ng.Tensor]]:
        named = []
        for k, t in enumerate(self.kernels):
            named.append((f"layer{k + 1}.kernel", t))
        for k, t in enumerate(self.alphas):
            named.append((f"layer{k + 1}.alpha", t))
        for k, t in enumerate(self.betas):
            named.append((f"layer{k + 1}.beta", t))
        named.append(("out.weight", self.out_weight))
        named.append(("out.bias", self.out_bias))
        return named


def denoiser_init(rng: np.random.Generator,
                  config: DenoiserConfig = DenoiserConfig(),
                  dtype=np.float32) -> DenoiserParams:
    """Xavier kernels, zero output bias, blend weights at identity
    (alpha=1, beta=0), empty normalization statistics."""
    w = config.width
    kernels, alphas, betas, bn = [], [], [], []
    for k in range(config.n_layers):
        c_in = 1 if k == 0 else w
        kernels.append(ng.xavier_init((3, c_in, w), rng, dtype=dtype))
        alphas.append(ng.parameter(np.asarray(1.0, dtype=dtype)))
        betas.append(ng.parameter(np.asarray(0.0, dtype=dtype)))
        bn.append(ng.BatchNormState(w))
    out_weight = ng.xavier_init((w, 1), rng, dtype=dtype)
    out_bias = ng.parameter(np.zeros(1, dtype=dtype))
    return DenoiserParams(config, kernels, alphas, betas, bn,
                          out_weight, out_bias)


def _as_input(x, dtype) -> ng.Tensor:
    t = x if isinstance(x, ng.Tensor) else ng.as_tensor(np.asarray(x, dtype=dtype))
    if t.data.ndim == 1:
        lifted = ng.Tensor(t.data.reshape(-1, 1), requires_grad=t.requires_grad)
        if t.requires_grad:
            lifted._parents = (t,)
            lifted._backward = lambda g: t._accum(g.reshape(t.data.shape))
        t = lifted
    if t.data.ndim != 2 or t.data.shape[1] != 1:
        raise ValueError(f"denoiser input must be (N,) or (N, 1), got {t.data.shape}")
    if t.data.shape[0] < 1:
        raise ValueError("denoiser input is empty")
    return t


def denoiser_forward(x, params: DenoiserParams, mode: str = "train",
                     upto: int | None = None,
                     update_running: bool = True) -> ng.Tensor:
    """Run the network; output has shape (N, 1) for any input length N.

    ``train`` normalizes each layer by the statistics of the current input
    (and updates the running estimates); ``infer`` applies the stored running
    statistics and detaches all parameters, so only the input can carry
    gradients.  ``upto=k`` returns the k-th ladder activation (1-based)
    instead of the output stage, which is how layer-by-layer context growth
    is probed.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    frozen = mode == "infer"
    bn_mode = "running" if frozen else "batch"
    dtype = params.out_weight.data.dtype
    h = _as_input(x, dtype)
    dil = params.config.dilations()
    for k in range(params.config.n_layers):
        kern = params.kernels[k].detach() if frozen else params.kernels[k]
        alpha = params.alphas[k].detach() if frozen else params.alphas[k]
        beta = params.betas[k].detach() if frozen else params.betas[k]
        h = ng.conv1d_dilated(h, kern, dil[k])
        h = ng.adaptive_norm(h, alpha, beta, params.bn[k], mode=bn_mode,
                             update_running=update_running and not frozen)
        h = ng.lrelu(h)
        if upto is not None and upto == k + 1:
            return h
    if upto is not None:
        raise ValueError(f"upto={upto} exceeds {params.config.n_layers} layers")
    w = params.out_weight.detach() if frozen else params.out_weight
    b = params.out_bias.detach() if frozen else params.out_bias
    return ng.linear(h, w, b)


def collect_preactivations(x, params: DenoiserParams,
                           update_running: bool = False) -> list[np.ndarray]:
    """Adaptive-norm outputs feeding each LReLU (train-mode statistics).

    Gradient verification uses this to reject draws that sit on the LReLU
    kink within the finite-difference window.
    """
    dtype = params.out_weight.data.dtype
    h = _as_input(np.asarray(x.data if isinstance(x, ng.Tensor) else x), dtype)
    h = h.detach()
    acts = []
    dil = params.config.dilations()
    for k in range(params.config.n_layers):
        h = ng.conv1d_dilated(h, params.kernels[k].detach(), dil[k])
        h = ng.adaptive_norm(h, params.alphas[k].detach(),
                             params.betas[k].detach(), params.bn[k],
                             mode="batch", update_running=update_running)
        acts.append(h.data)
        h = ng.lrelu(h)
    return acts
