"""Channel-level analyses of a trained model.

Drop-a-single-channel: zero one stem-output channel (before or after the
channel masks) and measure the target-domain Dice; most channels barely
matter while a few carry the prediction, and style-sensitive channels can
even help when removed. Add-a-single-channel: re-admit one style channel
into the structure features at inference and measure the effect. Both
produce CSV rows (channel, dice_od, dice_oc) preceded by an unablated
reference row with channel = -1; Dice columns are macro-averages over the
domains evaluated.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .cfd import disentangle
from .dataio import Sample, write_pgm_gray
from .errors import ConfigError
from .segmodel import SegModel, binarize
from .seeding import TAG_CONTRAST, derive_rng
from .styleaug import AugConfig, make_style_batch
from .tensor import Tensor
from .trainer import dice, normalize_image

REFERENCE_CHANNEL = -1


def predict_modified(model: SegModel, images, drop_channel: int | None = None,
                     stage: str = "pre", force_structure_channel: int | None = None,
                     batch_size: int = 8) -> np.ndarray:
    """Inference with an optional channel intervention.

    ``drop_channel`` zeroes one stem-output channel, either before the
    channel masks (stage "pre") or on the structure features after masking
    (stage "post"). ``force_structure_channel`` overrides one channel's
    structure mask to 1 (the add-a-channel analysis).
    """
    if stage not in ("pre", "post"):
        raise ConfigError(f"unknown ablation stage {stage!r}")
    c = model.base_channels
    for ch in (drop_channel, force_structure_channel):
        if ch is not None and not 0 <= ch < c:
            raise ConfigError(f"channel {ch} out of range [0, {c})")
    p_sty, p_str = model.prompt.mask_values()
    if force_structure_channel is not None:
        p_str = p_str.copy()
        p_str[force_structure_channel] = 1.0
    outs = []
    with tz.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = np.stack([normalize_image(im) for im in images[i : i + batch_size]])
            f = model.stem_forward(Tensor(chunk))
            fd = f.data
            if drop_channel is not None and stage == "pre":
                fd = fd.copy()
                fd[:, drop_channel] = 0.0
            f_str = fd * p_str[None, :, None, None]
            if drop_channel is not None and stage == "post":
                f_str[:, drop_channel] = 0.0
            probs = model.segment(Tensor(f_str), training=False)
            outs.append(probs.data)
    return np.concatenate(outs, axis=0)


def _mean_dice(model: SegModel, groups: dict[str, list[Sample]], **kwargs):
    """Macro-averaged (OD, OC) Dice over the given domain groups."""
    per_dom = []
    for dom in sorted(groups):
        samples = groups[dom]
        preds = binarize(predict_modified(model, [s.image for s in samples], **kwargs))
        od = np.mean([dice(p[0], s.mask_od) for p, s in zip(preds, samples)])
        oc = np.mean([dice(p[1], s.mask_oc) for p, s in zip(preds, samples)])
        per_dom.append((od, oc))
    arr = np.asarray(per_dom)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def channel_ablation(model: SegModel, groups: dict[str, list[Sample]],
                     mode: str = "drop", stage: str = "pre") -> list[tuple[int, float, float]]:
    """Per-channel ablation table; first row is the unablated reference.

    ``drop`` zeroes each channel in turn. ``add`` re-admits each style
    channel (structure mask below 0.5) and skips channels already assigned
    to structure, so its table can consist of the reference row alone.
    """
    if mode not in ("drop", "add"):
        raise ConfigError(f"unknown ablation mode {mode!r}")
    rows = [(REFERENCE_CHANNEL, *_mean_dice(model, groups))]
    if mode == "drop":
        channels = range(model.base_channels)
        for ch in channels:
            rows.append((ch, *_mean_dice(model, groups, drop_channel=ch, stage=stage)))
    else:
        _, p_str = model.prompt.mask_values()
        for ch in range(model.base_channels):
            if p_str[ch] >= 0.5:
                continue
            rows.append((ch, *_mean_dice(model, groups, force_structure_channel=ch)))
    return rows


def prompt_table(model: SegModel) -> list[tuple[int, float, float, float, float]]:
    """(channel, logit_sty, logit_str, mask_sty, mask_str) per channel."""
    logits = model.prompt.logits.data
    p_sty, p_str = model.prompt.mask_values()
    return [(i, float(logits[0, i]), float(logits[1, i]), float(p_sty[i]), float(p_str[i]))
            for i in range(model.base_channels)]


def contrast_distances(model: SegModel, samples: list[Sample], seed: int,
                       aug: AugConfig | None = None, batch_size: int = 4,
                       modes=("BA", "SL", "FR")) -> tuple[float, float]:
    """Mean projected style / structure L1 distances on held-out batches.

    For every batch and every augmentation branch, builds the augmented
    counterpart, projects the masked feature blocks with the trained
    projector in eval mode, and averages the per-pair L1 distances. Returns
    (style_distance, structure_distance).
    """
    aug = aug or AugConfig()
    d_sty, d_str, count = 0.0, 0.0, 0
    with tz.no_grad():
        for mi, mode in enumerate(modes):
            for lo in range(0, len(samples) - len(samples) % batch_size, batch_size):
                batch = samples[lo : lo + batch_size]
                images = [s.image for s in batch]
                rngs = [derive_rng(seed, TAG_CONTRAST, mi, lo + k) for k in range(len(batch))]
                aug_images = make_style_batch(images, mode, rngs, aug)
                xs = Tensor(np.stack([normalize_image(im) for im in images]))
                xa = Tensor(np.stack([normalize_image(im) for im in aug_images]))
                fs = model.stem_forward(xs)
                fa = model.stem_forward(xa)
                sty_s, str_s = disentangle(fs, model.prompt)
                sty_a, str_a = disentangle(fa, model.prompt)
                z = {k: model.projector(v, training=False).data
                     for k, v in (("sty_s", sty_s), ("sty_a", sty_a),
                                  ("str_s", str_s), ("str_a", str_a))}
                d_sty += float(np.abs(z["sty_s"] - z["sty_a"]).sum())
                d_str += float(np.abs(z["str_s"] - z["str_a"]).sum())
                count += 1
    if count == 0:
        raise ConfigError("not enough samples for a single batch")
    return d_sty / count, d_str / count


def export_feature_maps(model: SegModel, image: np.ndarray, out_dir,
                        block: str = "stem") -> list[tuple[int, float, float, str]]:
    """Write per-channel feature maps as PGMs normalized to [0, 255].

    Each channel is scaled independently; the returned sidecar rows
    (channel, vmin, vmax, filename) make the scaling reversible.
    """
    from pathlib import Path

    if block not in ("stem", "style", "structure"):
        raise ConfigError(f"unknown feature block {block!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with tz.no_grad():
        f = model.stem_forward(Tensor(normalize_image(image)[None]))
        if block != "stem":
            f_sty, f_str = disentangle(f, model.prompt)
            f = f_sty if block == "style" else f_str
    maps = f.data[0]
    rows = []
    for ch, fmap in enumerate(maps):
        vmin, vmax = float(fmap.min()), float(fmap.max())
        if vmax > vmin:
            scaled = (fmap - vmin) / (vmax - vmin) * 255.0
        else:
            scaled = np.zeros_like(fmap)
        name = f"{block}_ch{ch:03d}.pgm"
        write_pgm_gray(out_dir / name, np.floor(scaled + 0.5).astype(np.uint8))
        rows.append((ch, vmin, vmax, name))
    return rows
