"""Decoder-side building blocks: gated skip connections and feature alignment.

The attention gate produces a single-channel mask from a skip feature ``x``
and a coarser gating feature ``g``:

    a = sigmoid( psi( relu( GN(Wx x) + GN(Wg g' + bg) ) ) + bpsi )

with ``g'`` being ``g`` bilinearly upsampled to the spatial size of ``x``,
and Wx/Wg/psi 1x1 convolutions. The gated output keeps at least half of the
skip signal:

    x_hat = (0.5 + 0.5 * a) * x

so the multiplier lives in [0.5, 1.0] and gradients are never fully blocked.

The alignment block predicts a per-pixel 2-channel offset field from the
concatenated pre/post features of one encoder stage (three 3x3 convolutions
with ReLU in between), then warps the pre feature by sampling it at
``(x + dx, y + dy)``. The final convolution starts at zero, so a freshly
built module is an exact no-op warp.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Parameter, Tensor
from .rng import Rng


def gn_groups(channels: int) -> int:
    """min(8, channels), falling back to a single group when not divisible."""
    g = min(8, channels)
    return g if channels % g == 0 else 1


def _conv_param(rng: Rng, name: str, cout: int, cin: int, k: int, zero: bool = False):
    fan_in = cin * k * k
    data = np.zeros((cout, cin, k, k)) if zero else rng.he_uniform((cout, cin, k, k), fan_in)
    return Parameter(data, name)


class AttentionGate:
    """Learned multiplicative mask on a skip connection, floored at 50%."""

    def __init__(self, skip_channels: int, gate_channels: int, rng: Rng, name: str = "ag"):
        if skip_channels < 1 or gate_channels < 1:
            raise ConfigError("attention gate channel counts must be positive")
        self.skip_channels = skip_channels
        self.gate_channels = gate_channels
        self.inter_channels = max(1, skip_channels // 2)
        f_int = self.inter_channels
        self.w_x = _conv_param(rng, f"{name}.w_x", f_int, skip_channels, 1)
        self.w_g = _conv_param(rng, f"{name}.w_g", f_int, gate_channels, 1)
        self.b_g = Parameter(np.zeros(f_int), f"{name}.b_g")
        self.gn_x_gamma = Parameter(np.ones(f_int), f"{name}.gn_x.gamma")
        self.gn_x_beta = Parameter(np.zeros(f_int), f"{name}.gn_x.beta")
        self.gn_g_gamma = Parameter(np.ones(f_int), f"{name}.gn_g.gamma")
        self.gn_g_beta = Parameter(np.zeros(f_int), f"{name}.gn_g.beta")
        self.psi = _conv_param(rng, f"{name}.psi", 1, f_int, 1)
        self.b_psi = Parameter(np.zeros(1), f"{name}.b_psi")
        self.groups = gn_groups(f_int)

    def parameters(self) -> list[Parameter]:
        return [
            self.w_x, self.w_g, self.b_g,
            self.gn_x_gamma, self.gn_x_beta, self.gn_g_gamma, self.gn_g_beta,
            self.psi, self.b_psi,
        ]

    def __call__(self, x: Tensor, g: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (gated skip feature, attention map in [0, 1])."""
        if x.data.shape[1] != self.skip_channels or g.data.shape[1] != self.gate_channels:
            raise ConfigError(
                f"attention gate built for {self.skip_channels}/{self.gate_channels} channels, "
                f"got {x.data.shape[1]}/{g.data.shape[1]}"
            )
        if g.data.shape[2] > x.data.shape[2] or g.data.shape[3] > x.data.shape[3]:
            raise ad.ContractError("gating feature must not be larger than the skip feature")
        g_up = ad.upsample_bilinear(g, x.data.shape[2], x.data.shape[3])
        branch_x = ad.group_norm(ad.conv2d(x, self.w_x), self.groups, self.gn_x_gamma, self.gn_x_beta)
        branch_g = ad.group_norm(
            ad.conv2d(g_up, self.w_g, self.b_g), self.groups, self.gn_g_gamma, self.gn_g_beta
        )
        alpha = ad.sigmoid(ad.conv2d(ad.relu(branch_x + branch_g), self.psi, self.b_psi))
        gated = (Tensor(0.5) + Tensor(0.5) * alpha) * x
        return gated, alpha


class AlignmentModule:
    """Predicts a flow field from a pre/post feature pair and warps pre."""

    def __init__(self, channels: int, rng: Rng, name: str = "align"):
        if channels < 1:
            raise ConfigError("alignment module needs at least one channel")
        self.channels = channels
        c = channels
        self.conv1_w = _conv_param(rng, f"{name}.conv1.w", c, 2 * c, 3)
        self.conv1_b = Parameter(np.zeros(c), f"{name}.conv1.b")
        self.conv2_w = _conv_param(rng, f"{name}.conv2.w", c, c, 3)
        self.conv2_b = Parameter(np.zeros(c), f"{name}.conv2.b")
        # zero init: a new module predicts zero flow, i.e. an identity warp
        self.conv3_w = _conv_param(rng, f"{name}.conv3.w", 2, c, 3, zero=True)
        self.conv3_b = Parameter(np.zeros(2), f"{name}.conv3.b")

    def parameters(self) -> list[Parameter]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                self.conv3_w, self.conv3_b]

    def predict_flow(self, f_pre: Tensor, f_post: Tensor) -> Tensor:
        """Offset field (B, 2, H, W); channel 0 horizontal, channel 1 vertical."""
        if f_pre.data.shape != f_post.data.shape:
            raise ad.ContractError("pre/post features must have identical shapes")
        if f_pre.data.shape[1] != self.channels:
            raise ad.ContractError(
                f"alignment module built for {self.channels} channels, "
                f"got {f_pre.data.shape[1]}"
            )
        h = ad.relu(ad.conv2d(ad.concat([f_pre, f_post], axis=1), self.conv1_w, self.conv1_b))
        h = ad.relu(ad.conv2d(h, self.conv2_w, self.conv2_b))
        return ad.conv2d(h, self.conv3_w, self.conv3_b)

    def __call__(self, f_pre: Tensor, f_post: Tensor) -> tuple[Tensor, Tensor]:
        flow = self.predict_flow(f_pre, f_post)
        return flow, warp_features(f_pre, flow)


def warp_features(feature: Tensor, flow: Tensor) -> Tensor:
    """Sample ``feature`` at ``(x + dx, y + dy)`` with border clamping.

    A flow of (+1, 0) therefore shifts content one column toward lower x.
    """
    if feature.data.ndim != 4 or flow.data.ndim != 4 or flow.data.shape[1] != 2:
        raise ad.ContractError("warp expects a 4-d feature and a (B, 2, H, W) flow")
    b, _, h, w = feature.data.shape
    if flow.data.shape[0] != b or flow.data.shape[2:] != (h, w):
        raise ad.ContractError("flow spatial shape must match the feature")
    grid_x = Tensor(np.broadcast_to(np.arange(w, dtype=np.float64), (b, h, w)))
    grid_y = Tensor(np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (b, h, w)))
    xs = ad.reshape(ad.slice_channels(flow, 0, 1), (b, h, w)) + grid_x
    ys = ad.reshape(ad.slice_channels(flow, 1, 2), (b, h, w)) + grid_y
    return ad.bilinear_sample(feature, xs, ys)
