"""Channel-level contrastive feature disentanglement.

A learnable 2 x C logit matrix, pushed through a temperature softmax over
its two rows, assigns every shallow-feature channel a soft style/structure
membership. The two masks are complementary (they sum to 1 per channel), so
the masked features satisfy f_sty + f_str = f exactly. A small projector
(conv -> batch norm -> global max pool -> fully connected) maps each masked
block to a 1024-dim vector; contrastive training pulls the structure
projections of an image and its style-augmented counterpart together while
pushing the style projections apart:

    L_str = sum |Proj(f_str_src) - Proj(f_str_aug)|
    L_sty = -sum |Proj(f_sty_src) - Proj(f_sty_aug)|

Both sums run over the 1024 dims and the batch, unnormalized.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .tensor import BatchNormState, Tensor

DEFAULT_TAU = 0.1
PROJECTION_DIM = 1024


def _take_row(m: Tensor, row: int) -> Tensor:
    """Differentiable row selection from a small matrix."""
    data = m.data[row].copy()

    def vjp(g):
        full = np.zeros_like(m.data)
        full[row] = g
        return (full,)

    return tz.from_op(data, (m,), vjp)


def prompt_masks(logits: Tensor, tau: float = DEFAULT_TAU) -> tuple[Tensor, Tensor]:
    """Column-wise softmax of logits / tau; row 0 -> style, row 1 -> structure."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if logits.data.ndim != 2 or logits.data.shape[0] != 2:
        raise ValueError(f"prompt logits must be 2 x C, got shape {logits.shape}")
    sm = tz.softmax_over_axis(tz.scale(logits, 1.0 / tau), axis=0)
    return _take_row(sm, 0), _take_row(sm, 1)


class ChannelPrompt:
    """Learnable channel mask prompt with a fixed softmax temperature.

    ``frozen_structure`` pins the structure mask to exactly 1 (and the style
    mask to 0), which turns disentanglement into the identity and removes
    the prompt from every gradient path; it is how the plain supervised
    baseline and the no-disentanglement variant are expressed.
    """

    def __init__(self, channels: int, tau: float = DEFAULT_TAU, init: str = "random",
                 rng: np.random.Generator | None = None, frozen_structure: bool = False):
        if channels < 1:
            raise ValueError("channel count must be positive")
        if init == "random":
            if rng is None:
                raise ValueError("random prompt init needs an rng")
            data = rng.normal(0.0, 0.01, size=(2, channels))
        elif init == "one_zero":
            # start with every channel assigned to structure
            data = np.vstack([np.zeros(channels), np.ones(channels)])
        else:
            raise ValueError(f"unknown prompt init {init!r}")
        self.logits = Tensor(data, requires_grad=True, name="prompt.logits")
        self.tau = float(tau)
        self.frozen_structure = bool(frozen_structure)

    @property
    def channels(self) -> int:
        return self.logits.data.shape[1]

    def masks(self) -> tuple[Tensor, Tensor]:
        if self.frozen_structure:
            c = self.channels
            return Tensor(np.zeros(c)), Tensor(np.ones(c))
        return prompt_masks(self.logits, self.tau)

    def mask_values(self) -> tuple[np.ndarray, np.ndarray]:
        """Mask rows as plain arrays (no graph)."""
        with tz.no_grad():
            p_sty, p_str = self.masks()
        return p_sty.data, p_str.data


def disentangle(f: Tensor, prompt: ChannelPrompt | tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """Split features channel-wise into style and structure parts.

    Differentiable through both the features and the prompt logits; the parts
    satisfy f_sty + f_str = f because the masks are complementary.
    """
    p_sty, p_str = prompt.masks() if isinstance(prompt, ChannelPrompt) else prompt
    if f.data.ndim != 4:
        raise ValueError(f"disentangle expects NCHW features, got shape {f.shape}")
    if f.data.shape[1] != p_sty.data.shape[0]:
        raise ValueError(
            f"channel mismatch: features have {f.data.shape[1]} channels, "
            f"prompt has {p_sty.data.shape[0]}")
    f_sty = tz.elementwise_mul_channel_broadcast(f, p_sty)
    f_str = tz.elementwise_mul_channel_broadcast(f, p_str)
    return f_sty, f_str


class Projector:
    """conv(3x3, stride 2) -> batch norm -> global max pool -> fc to 1024."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 out_dim: int = PROJECTION_DIM, name_prefix: str = "projector"):
        fan_conv = channels * 9
        self.conv_w = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_conv), (channels, channels, 3, 3)),
                             requires_grad=True, name=f"{name_prefix}.conv.weight")
        self.conv_b = Tensor(np.zeros(channels), requires_grad=True,
                             name=f"{name_prefix}.conv.bias")
        self.bn_gamma = Tensor(np.ones(channels), requires_grad=True,
                               name=f"{name_prefix}.bn.gamma")
        self.bn_beta = Tensor(np.zeros(channels), requires_grad=True,
                              name=f"{name_prefix}.bn.beta")
        self.bn_state = BatchNormState.create(channels)
        self.fc_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / channels), (out_dim, channels)),
                           requires_grad=True, name=f"{name_prefix}.fc.weight")
        self.fc_b = Tensor(np.zeros(out_dim), requires_grad=True,
                           name=f"{name_prefix}.fc.bias")
        self.name_prefix = name_prefix

    def params(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.conv_w, self.conv_b, self.bn_gamma,
                                    self.bn_beta, self.fc_w, self.fc_b)}

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name_prefix}.bn.running_mean": self.bn_state.running_mean,
            f"{self.name_prefix}.bn.running_var": self.bn_state.running_var,
        }

    def __call__(self, f_part: Tensor, training: bool) -> Tensor:
        return project(f_part, self, training)


def project(f_part: Tensor, proj: Projector, training: bool = False) -> Tensor:
    """Reduce an N x C x H x W feature block to N x 1024."""
    if f_part.data.ndim != 4:
        raise ValueError(f"project expects NCHW features, got shape {f_part.shape}")
    if f_part.data.shape[2] < 3 or f_part.data.shape[3] < 3:
        raise ValueError(f"project needs spatial dims >= 3, got {f_part.shape}")
    x = tz.conv2d(f_part, proj.conv_w, proj.conv_b, stride=2, pad=1)
    x = tz.batch_norm2d(x, proj.bn_gamma, proj.bn_beta, proj.bn_state, training)
    x = tz.global_max_pool(x)
    return tz.fully_connected(x, proj.fc_w, proj.fc_b)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Unnormalized sum of absolute differences (over all dims and the batch)."""
    return tz.abs_sum(tz.sub(a, b))


def contrastive_losses(parts_src: tuple[Tensor, Tensor], parts_aug: tuple[Tensor, Tensor],
                       proj: Projector, training: bool = True,
                       style_margin: float | None = None) -> tuple[Tensor, Tensor]:
    """Paired contrastive losses from disentangled source/augmented features.

    ``parts_*`` are (f_sty, f_str) pairs with matching batch sizes. Returns
    (L_str, L_sty): L_str >= 0 attracts the structure projections, L_sty <= 0
    repels the style projections. With ``style_margin`` set, L_sty becomes the
    hinge max(0, margin - distance) instead of the unbounded negated distance.

    The projector is applied to the four blocks in a fixed order (structure
    source, structure augmented, style source, style augmented), which pins
    the batch-norm statistics stream.
    """
    f_sty_s, f_str_s = parts_src
    f_sty_a, f_str_a = parts_aug
    if f_str_s.data.shape[0] != f_str_a.data.shape[0]:
        raise ValueError(
            f"batch mismatch: {f_str_s.data.shape[0]} source vs "
            f"{f_str_a.data.shape[0]} augmented")
    z_str_s = project(f_str_s, proj, training)
    z_str_a = project(f_str_a, proj, training)
    z_sty_s = project(f_sty_s, proj, training)
    z_sty_a = project(f_sty_a, proj, training)
    l_str = l1_distance(z_str_s, z_str_a)
    d_sty = l1_distance(z_sty_s, z_sty_a)
    if style_margin is not None:
        l_sty = tz.relu(tz.elementwise_add(Tensor(np.asarray(float(style_margin))),
                                           tz.scale(d_sty, -1.0)))
    else:
        l_sty = tz.scale(d_sty, -1.0)
    return l_str, l_sty
