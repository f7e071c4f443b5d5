"""Stem convolution, U-shape segmentation backbone, and segmentation losses.

The stem lifts a 3-channel image to C feature channels; only the structure
part of those features (after channel masking) enters the backbone. The
backbone is a plain double-conv U-shape: ``depth`` encoder levels with
widths C, 2C, 4C, ... (the deepest level is the bottom, max-pool between
levels), mirrored decoder levels with skip concatenation, and a 1x1 head
producing two sigmoid probability maps (disc and cup; channel 0 = disc).
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .cfd import ChannelPrompt, Projector, disentangle
from .errors import DataError
from .seeding import TAG_MODEL, derive_rng
from .tensor import BatchNormState, Tensor

OUT_CLASSES = 2  # disc, cup


def _conv_init(rng, cout, cin, k):
    return rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k))


class _ConvBN:
    def __init__(self, cin, cout, rng, prefix):
        self.w = Tensor(_conv_init(rng, cout, cin, 3), requires_grad=True,
                        name=f"{prefix}.weight")
        self.b = Tensor(np.zeros(cout), requires_grad=True, name=f"{prefix}.bias")
        bn_prefix = prefix.replace("conv", "bn")
        self.gamma = Tensor(np.ones(cout), requires_grad=True, name=f"{bn_prefix}.gamma")
        self.beta = Tensor(np.zeros(cout), requires_grad=True, name=f"{bn_prefix}.beta")
        self.state = BatchNormState.create(cout)
        self.bn_prefix = bn_prefix

    def __call__(self, x, training):
        x = tz.conv2d(x, self.w, self.b, stride=1, pad=1)
        x = tz.batch_norm2d(x, self.gamma, self.beta, self.state, training)
        return tz.relu(x)

    def tensors(self):
        return [self.w, self.b, self.gamma, self.beta]

    def buffers(self):
        return {f"{self.bn_prefix}.running_mean": self.state.running_mean,
                f"{self.bn_prefix}.running_var": self.state.running_var}


class _DoubleConv:
    def __init__(self, cin, cout, rng, prefix):
        self.c1 = _ConvBN(cin, cout, rng, f"{prefix}.conv1")
        self.c2 = _ConvBN(cout, cout, rng, f"{prefix}.conv2")

    def __call__(self, x, training):
        return self.c2(self.c1(x, training), training)

    def tensors(self):
        return self.c1.tensors() + self.c2.tensors()

    def buffers(self):
        return {**self.c1.buffers(), **self.c2.buffers()}


class UNet:
    """Double-conv U-shape over C input channels, 2 output probability maps."""

    def __init__(self, channels: int, depth: int, rng: np.random.Generator,
                 name_prefix: str = "backbone"):
        if depth < 2:
            raise ValueError("backbone depth must be at least 2")
        self.depth = depth
        widths = [channels * (1 << d) for d in range(depth)]
        self.enc = [_DoubleConv(channels if d == 0 else widths[d - 1], widths[d],
                                rng, f"{name_prefix}.enc{d + 1}")
                    for d in range(depth)]
        self.dec = [_DoubleConv(widths[d + 1] + widths[d], widths[d],
                                rng, f"{name_prefix}.dec{d + 1}")
                    for d in reversed(range(depth - 1))]
        self.head_w = Tensor(_conv_init(rng, OUT_CLASSES, widths[0], 1),
                             requires_grad=True, name=f"{name_prefix}.head.weight")
        self.head_b = Tensor(np.zeros(OUT_CLASSES), requires_grad=True,
                             name=f"{name_prefix}.head.bias")

    def __call__(self, f: Tensor, training: bool) -> Tensor:
        h, w = f.data.shape[-2:]
        div = 1 << self.depth
        if h % div or w % div:
            raise ValueError(
                f"spatial dims {h}x{w} must be divisible by 2^{self.depth}")
        skips = []
        x = f
        for d, block in enumerate(self.enc):
            x = block(x, training)
            if d < self.depth - 1:
                skips.append(x)
                x = tz.max_pool2d(x)
        for block, skip in zip(self.dec, reversed(skips)):
            x = tz.upsample_nearest(x)
            x = tz.concat_channels(x, skip)
            x = block(x, training)
        logits = tz.conv2d(x, self.head_w, self.head_b, stride=1, pad=0)
        return tz.sigmoid(logits)

    def tensors(self):
        out = []
        for block in self.enc + self.dec:
            out.extend(block.tensors())
        out.extend([self.head_w, self.head_b])
        return out

    def buffers(self):
        out = {}
        for block in self.enc + self.dec:
            out.update(block.buffers())
        return out


def stem(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """First convolution: 3-channel image to C shallow feature channels."""
    if x.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"stem expects N x {w.data.shape[1]} x H x W input, got shape {x.shape}")
    k = w.data.shape[2]
    return tz.conv2d(x, w, b, stride=stride, pad=k // 2)


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy (prediction clamped away from 0/1)."""
    return tz.bce(pred, target)


def seg_loss_total(pred_src: Tensor, pred_aug: Tensor, target: Tensor) -> Tensor:
    """Sum of the source and augmented-branch BCE against the same masks."""
    return tz.elementwise_add(bce_loss(pred_src, target), bce_loss(pred_aug, target))


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (probs >= threshold).astype(np.uint8)


class SegModel:
    """Stem + channel prompt + backbone + projector with parameter registries.

    Parameter groups mirror the two optimization phases: the segmentation
    phase updates {stem, prompt, backbone}; the contrastive phase updates
    {prompt, projector}. A frozen structure mask removes the prompt from
    both groups since it no longer sits on any gradient path.
    """

    def __init__(self, base_channels: int = 64, depth: int = 4, stem_kernel: int = 3,
                 stem_stride: int = 1, prompt_init: str = "random",
                 frozen_structure_mask: bool = False, seed: int = 0):
        if stem_kernel % 2 != 1:
            raise ValueError("stem kernel size must be odd")
        rng = derive_rng(seed, TAG_MODEL)
        self.base_channels = base_channels
        self.depth = depth
        self.stem_kernel = stem_kernel
        self.stem_stride = stem_stride
        self.stem_w = Tensor(_conv_init(rng, base_channels, 3, stem_kernel),
                             requires_grad=True, name="stem.weight")
        self.stem_b = Tensor(np.zeros(base_channels), requires_grad=True, name="stem.bias")
        self.prompt = ChannelPrompt(base_channels, init=prompt_init, rng=rng,
                                    frozen_structure=frozen_structure_mask)
        self.backbone = UNet(base_channels, depth, rng)
        self.projector = Projector(base_channels, rng)

    # -- forward pieces ----------------------------------------------------

    def stem_forward(self, x: Tensor) -> Tensor:
        return stem(x, self.stem_w, self.stem_b, self.stem_stride)

    def segment(self, f_str: Tensor, training: bool) -> Tensor:
        return self.backbone(f_str, training)

    def infer(self, x) -> np.ndarray:
        """Structure-only inference: stem -> channel masks -> backbone (eval).

        ``x`` is a normalized N x 3 x H x W array; returns N x 2 x H x W
        probabilities. Style channels are discarded by construction.
        """
        with tz.no_grad():
            xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
            f = self.stem_forward(xt)
            _, f_str = disentangle(f, self.prompt)
            probs = self.segment(f_str, training=False)
        return probs.data

    # -- parameter registries ------------------------------------------------

    def seg_phase_params(self) -> dict[str, Tensor]:
        out = {self.stem_w.name: self.stem_w, self.stem_b.name: self.stem_b}
        if not self.prompt.frozen_structure:
            out[self.prompt.logits.name] = self.prompt.logits
        for t in self.backbone.tensors():
            out[t.name] = t
        return out

    def con_phase_params(self) -> dict[str, Tensor]:
        out = {}
        if not self.prompt.frozen_structure:
            out[self.prompt.logits.name] = self.prompt.logits
        out.update(self.projector.params())
        return out

    def all_params(self) -> dict[str, Tensor]:
        out = dict(self.seg_phase_params())
        out.update(self.con_phase_params())
        if self.prompt.frozen_structure:
            out[self.prompt.logits.name] = self.prompt.logits
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = self.backbone.buffers()
        out.update(self.projector.buffers())
        return out

    # -- serialization -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.all_params().items()}
        out.update(self.buffers())
        out["meta.stem_stride"] = np.asarray(float(self.stem_stride))
        out["meta.prompt_frozen"] = np.asarray(1.0 if self.prompt.frozen_structure else 0.0)
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "SegModel":
        try:
            stem_w = state["stem.weight"]
        except KeyError as exc:
            raise DataError("checkpoint is missing the stem weights") from exc
        channels, in_ch, k, _ = stem_w.shape
        if in_ch != 3:
            raise DataError(f"stem expects 3 input channels, checkpoint has {in_ch}")
        depth = 0
        while f"backbone.enc{depth + 1}.conv1.weight" in state:
            depth += 1
        if depth < 2:
            raise DataError("checkpoint does not contain a usable backbone")
        stride = int(state.get("meta.stem_stride", np.asarray(1.0)))
        frozen = bool(float(state.get("meta.prompt_frozen", np.asarray(0.0))))
        model = cls(base_channels=channels, depth=depth, stem_kernel=k,
                    stem_stride=stride, prompt_init="one_zero",
                    frozen_structure_mask=frozen, seed=0)
        params = model.all_params()
        buffers = model.buffers()
        for name, t in params.items():
            if name not in state:
                raise DataError(f"checkpoint is missing tensor {name!r}")
            if state[name].shape != t.data.shape:
                raise DataError(
                    f"checkpoint tensor {name!r} has shape {state[name].shape}, "
                    f"expected {t.data.shape}")
            t.data = state[name].astype(np.float64).copy()
        for name, buf in buffers.items():
            if name not in state:
                raise DataError(f"checkpoint is missing buffer {name!r}")
            buf[...] = state[name]
        return model
