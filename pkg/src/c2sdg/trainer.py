"""Alternating two-phase training, polynomial LR decay, Dice evaluation.

Each step works on one batch and its style-augmented counterpart (the
augmentation branch rotates per step through the configured modes):

  phase 1  forward source + augmented images through stem -> channel masks
           -> backbone, minimize the summed BCE of both branches over
           {stem, prompt, backbone};
  phase 2  recompute the stem features with the just-updated stem (frozen
           for this phase), project the masked blocks, and minimize
           L_str + L_sty over {prompt, projector}.

The two phases own separate momentum states; the prompt appears in both and
therefore carries one buffer per phase. Every epoch the model is evaluated
on the held-out split of every domain and the checkpoint with the best
average target-domain Dice is kept alongside the final one.

Degenerate configurations express the reference variants: no augmentation
modes and a frozen structure mask give plain supervised training ("w/o
SDG"); style modes without the contrastive phase give the augmentation-only
variant ("w/o CFD").
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tz
from .cfd import contrastive_losses, disentangle
from .checkpoint import save_checkpoint
from .dataio import Dataset, Sample, load_dataset
from .errors import ConfigError, DataError, NumericError
from .segmodel import SegModel, binarize
from .seeding import TAG_SHUFFLE, TAG_SPATIAL, TAG_STYLE, derive_rng
from .styleaug import AugConfig, make_style_batch, spatial_augment
from .tensor import SGD, Tensor

METRICS_HEADER = ("epoch", "step", "lr", "l_seg", "l_str", "l_sty",
                  "domain", "dice_od", "dice_oc")


@dataclass
class TrainConfig:
    train_root: str = ""
    test_root: str = ""
    source_domain: str = ""
    out_dir: str = ""
    epochs: int = 30
    batch_size: int = 4
    lr0: float = 0.01
    momentum: float = 0.99
    seed: int = 0
    modes: tuple[str, ...] = ("BA", "SL", "FR")
    enable_cfd: bool = True
    freeze_structure_mask: bool = False
    enable_spatial: bool = True
    base_channels: int = 64
    depth: int = 4
    stem_kernel: int = 3
    stem_stride: int = 1
    prompt_init: str = "random"
    style_margin: float | None = None
    aug: AugConfig = field(default_factory=AugConfig)

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.base_channels < 1 or self.depth < 2:
            raise ConfigError("model dims out of range")
        for m in self.modes:
            if m not in ("BA", "SL", "FR"):
                raise ConfigError(f"unknown augmentation mode {m!r}")
        if self.enable_cfd and not self.modes:
            raise ConfigError("contrastive training needs at least one augmentation mode")
        if self.prompt_init not in ("random", "one_zero"):
            raise ConfigError(f"unknown prompt_init {self.prompt_init!r}")
        self.aug.validate()

    def build_model(self) -> SegModel:
        return SegModel(base_channels=self.base_channels, depth=self.depth,
                        stem_kernel=self.stem_kernel, stem_stride=self.stem_stride,
                        prompt_init=self.prompt_init,
                        frozen_structure_mask=self.freeze_structure_mask,
                        seed=self.seed)


def poly_lr(epoch: int, lr0: float, max_epochs: int) -> float:
    """lr0 * (1 - e/E)^0.9, the polynomial decay schedule."""
    if epoch < 0 or epoch > max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr0 * (1.0 - epoch / max_epochs) ** 0.9


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Dice overlap in percent; two empty masks count as a perfect 100."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"dice shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    for m in (pred_mask, gt_mask):
        if not np.all(np.isin(m, (0, 1))):
            raise ValueError("dice expects binary masks")
    denom = int(pred_mask.sum()) + int(gt_mask.sum())
    if denom == 0:
        return 100.0
    inter = int(np.logical_and(pred_mask, gt_mask).sum())
    return 100.0 * 2.0 * inter / denom


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Per-image channel-wise standardization (zero mean, unit variance)."""
    img = np.asarray(img, dtype=np.float64)
    mean = img.mean(axis=(-2, -1), keepdims=True)
    std = img.std(axis=(-2, -1), keepdims=True)
    return (img - mean) / np.maximum(std, 1e-8)


def _stack_batch(images) -> Tensor:
    return Tensor(np.stack([normalize_image(im) for im in images]))


def _stack_masks(samples) -> Tensor:
    return Tensor(np.stack([np.stack([s.mask_od, s.mask_oc]) for s in samples])
                  .astype(np.float64))


def predict_probs(model: SegModel, images, batch_size: int = 8) -> np.ndarray:
    """Normalized batched inference over a list of (3, H, W) images."""
    outs = []
    for i in range(0, len(images), batch_size):
        chunk = images[i : i + batch_size]
        outs.append(model.infer(np.stack([normalize_image(im) for im in chunk])))
    return np.concatenate(outs, axis=0)


def evaluate(model: SegModel, groups: dict[str, list[Sample]],
             batch_size: int = 8) -> dict[str, tuple[float, float]]:
    """Mean per-domain Dice (OD, OC) at threshold 0.5, side-effect free."""
    out = {}
    for dom in sorted(groups):
        samples = groups[dom]
        if not samples:
            raise DataError(f"evaluation group {dom!r} is empty")
        probs = predict_probs(model, [s.image for s in samples], batch_size)
        preds = binarize(probs)
        od = float(np.mean([dice(p[0], s.mask_od) for p, s in zip(preds, samples)]))
        oc = float(np.mean([dice(p[1], s.mask_oc) for p, s in zip(preds, samples)]))
        out[dom] = (od, oc)
    return out


@dataclass
class StepLosses:
    l_seg: float
    l_str: float | None
    l_sty: float | None
    seg_grad_names: frozenset
    con_grad_names: frozenset


def train_step(model: SegModel, images, samples, mode: str | None, lr: float,
               opt_seg: SGD, opt_con: SGD, cfg: TrainConfig,
               rngs) -> StepLosses:
    """One alternating update on a batch (images already spatially augmented).

    ``mode`` selects the style branch, or None for the plain supervised path
    (no augmented branch, no contrastive phase). Source and augmented images
    go through the backbone as one concatenated batch; the summed two-branch
    BCE equals twice the mean BCE against the duplicated masks.
    """
    y = _stack_masks(samples)
    if mode is None:
        x_cat = _stack_batch(images)
        y_cat = y
    else:
        aug_images = make_style_batch(images, mode, rngs, cfg.aug)
        x_cat = Tensor(np.concatenate([_stack_batch(images).data,
                                       _stack_batch(aug_images).data]))
        y_cat = Tensor(np.concatenate([y.data, y.data]))

    # phase 1: segmentation over {stem, prompt, backbone}
    f = model.stem_forward(x_cat)
    _, f_str = disentangle(f, model.prompt)
    pred = model.segment(f_str, training=True)
    l_seg_t = tz.bce(pred, y_cat)
    if mode is not None:
        l_seg_t = tz.scale(l_seg_t, 2.0)
    l_seg = l_seg_t.item()
    if not math.isfinite(l_seg):
        raise NumericError(f"non-finite segmentation loss {l_seg}")
    grads1 = tz.backward(l_seg_t)
    opt_seg.lr = lr
    opt_seg.step(grads1)
    seg_names = frozenset(t.name for t in grads1)

    l_str = l_sty = None
    con_names = frozenset()
    if cfg.enable_cfd and mode is not None:
        # phase 2: contrastive over {prompt, projector}; stem output is
        # recomputed with the updated weights and detached (frozen here)
        with tz.no_grad():
            f2 = model.stem_forward(x_cat)
        n = len(images)
        f_s = Tensor(f2.data[:n])
        f_a = Tensor(f2.data[n:])
        parts_s = disentangle(f_s, model.prompt)
        parts_a = disentangle(f_a, model.prompt)
        l_str_t, l_sty_t = contrastive_losses(parts_s, parts_a, model.projector,
                                              training=True,
                                              style_margin=cfg.style_margin)
        l_con = tz.elementwise_add(l_str_t, l_sty_t)
        l_str, l_sty = l_str_t.item(), l_sty_t.item()
        if not (math.isfinite(l_str) and math.isfinite(l_sty)):
            raise NumericError(f"non-finite contrastive loss l_str={l_str} l_sty={l_sty}")
        grads2 = tz.backward(l_con)
        opt_con.lr = lr
        opt_con.step(grads2)
        con_names = frozenset(t.name for t in grads2)

    return StepLosses(l_seg, l_str, l_sty, seg_names, con_names)


@dataclass
class TrainResult:
    final_checkpoint: str
    best_checkpoint: str
    metrics_csv: str
    best_epoch: int
    best_target_score: float
    final_eval: dict[str, tuple[float, float]]
    steps: int


def target_mean_dice(scores: dict[str, tuple[float, float]], source_domain: str) -> float:
    """Average of (OD + OC)/2 over every domain except the source."""
    targets = [d for d in scores if d != source_domain] or list(scores)
    return float(np.mean([(scores[d][0] + scores[d][1]) / 2.0 for d in targets]))


def _fmt(v) -> str:
    return "" if v is None else f"{v:.10g}"


def train(cfg: TrainConfig) -> TrainResult:
    """Run the full schedule and write metrics + checkpoints to cfg.out_dir."""
    cfg.validate()
    train_ds = load_dataset(cfg.train_root)
    if cfg.source_domain not in train_ds.groups:
        raise ConfigError(
            f"source domain {cfg.source_domain!r} not in {sorted(train_ds.groups)}")
    train_samples = train_ds.groups[cfg.source_domain]
    eval_groups = load_dataset(cfg.test_root).groups

    model = cfg.build_model()
    opt_seg = SGD(list(model.seg_phase_params().values()), cfg.lr0, cfg.momentum)
    opt_con = SGD(list(model.con_phase_params().values()), cfg.lr0, cfg.momentum)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"

    best_score = -1.0
    best_epoch = -1
    step = 0
    final_eval: dict[str, tuple[float, float]] = {}
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for epoch in range(cfg.epochs):
            lr = poly_lr(epoch, cfg.lr0, cfg.epochs)
            order = derive_rng(cfg.seed, TAG_SHUFFLE, epoch).permutation(len(train_samples))
            for lo in range(0, len(train_samples), cfg.batch_size):
                batch_idx = order[lo : lo + cfg.batch_size]
                batch = [train_samples[i] for i in batch_idx]
                images, samples = [], []
                for i, s in zip(batch_idx, batch):
                    if cfg.enable_spatial:
                        rng_sp = derive_rng(cfg.seed, TAG_SPATIAL, epoch, int(i))
                        img, (od, oc) = spatial_augment(s.image, [s.mask_od, s.mask_oc],
                                                        rng_sp, cfg.aug)
                        samples.append(Sample(img, od, oc, s.domain, s.id))
                        images.append(img)
                    else:
                        samples.append(s)
                        images.append(s.image)
                mode = cfg.modes[step % len(cfg.modes)] if cfg.modes else None
                rngs = [derive_rng(cfg.seed, TAG_STYLE, epoch, int(i)) for i in batch_idx]
                try:
                    losses = train_step(model, images, samples, mode, lr,
                                        opt_seg, opt_con, cfg, rngs)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
                writer.writerow([epoch, step, _fmt(lr), _fmt(losses.l_seg),
                                 _fmt(losses.l_str), _fmt(losses.l_sty), "", "", ""])
                step += 1
            scores = evaluate(model, eval_groups, batch_size=max(cfg.batch_size, 8))
            for dom in sorted(scores):
                od, oc = scores[dom]
                writer.writerow([epoch, "", "", "", "", "", dom, _fmt(od), _fmt(oc)])
            fh.flush()
            score = target_mean_dice(scores, cfg.source_domain)
            if score > best_score:
                best_score = score
                best_epoch = epoch
                save_checkpoint(best_path, model.state_tensors())
            final_eval = scores
    save_checkpoint(final_path, model.state_tensors())
    return TrainResult(str(final_path), str(best_path), str(metrics_path),
                       best_epoch, best_score, final_eval, step)
