"""Deep-supervised training: composite loss, geometric augmentation, and
the Adam loop with loss tracing and checkpointing.

The loss couples the final head with every side head: total = lp +
side_weight * (ls_1 + ... + ls_M), each term a per-pixel-averaged softmax
cross entropy.  The `total` field of a LossBreakdown is always the exact
left-to-right float64 fold of its own `lp`/`ls` fields, so traces can be
re-verified bitwise; `total_tensor` is the differentiable counterpart used
for backpropagation.
"""

import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from acenet.autodiff import AdamState, Tape, Tensor, adam_step, ops
from acenet.data import LabeledSample, reflect_pad_sample, save_checkpoint
from acenet.errors import ConfigError, DataError, TrainingError
from acenet.graph import ForwardOutputs, Network, NetworkConfig
from acenet.resample import resize_hw, rotate_hw


@dataclass
class LossWeights:
    """side_weight multiplies the summed side losses (0 disables their
    influence while keeping gradient bookkeeping intact)."""

    side_weight: float = 1.0

    def problems(self) -> List[str]:
        return [] if self.side_weight >= 0 else [
            f"side_weight must be >= 0, got {self.side_weight}"]


@dataclass
class LossBreakdown:
    lp: float
    ls: List[float]
    total: float
    total_tensor: Optional[Tensor] = None


@dataclass
class AugmentConfig:
    """Random geometric transforms; the same sampled parameters are applied
    to image (bilinear), labels and FOV (nearest-neighbor)."""

    flip_h: bool = True
    flip_v: bool = True
    rotate: str = "right-angles"  # none | right-angles | small-angle
    rotate_max_degrees: float = 15.0  # small-angle mode only
    zoom_range: Tuple[float, float] = (0.8, 1.2)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip_h=False, flip_v=False, rotate="none", zoom_range=(1.0, 1.0))

    def problems(self) -> List[str]:
        out = []
        if self.rotate not in ("none", "right-angles", "small-angle"):
            out.append(f"rotate must be none, right-angles or small-angle, got {self.rotate!r}")
        if self.rotate == "small-angle" and not 0 < self.rotate_max_degrees < 45:
            out.append(f"rotate_max_degrees must lie in (0, 45), got {self.rotate_max_degrees}")
        lo, hi = self.zoom_range
        if not 0 < lo <= hi:
            out.append(f"zoom_range must satisfy 0 < lo <= hi, got {self.zoom_range}")
        return out


@dataclass
class TrainConfig:
    steps: int = 100
    lr: float = 1e-4
    seed: int = 0
    batch_size: int = 1
    checkpoint_every: int = 0  # 0 = only the final checkpoint
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def problems(self) -> List[str]:
        out = []
        if self.steps < 0:
            out.append(f"steps must be >= 0, got {self.steps}")
        if self.lr < 0:
            out.append(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            out.append(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        return out + self.augment.problems()


# ------------------------------------------------------------------ loss

def total_loss(out: ForwardOutputs, labels, weights: LossWeights,
               ignore_mask=None, expected_sides: Optional[int] = None) -> LossBreakdown:
    """Composite deep-supervision loss with a differentiable total.

    `ignore_mask` (True = exclude, e.g. padding) is inverted into the
    cross-entropy include mask.  When `expected_sides` is given, a side
    count mismatch raises TrainingError (wiring bug, not user error).
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if expected_sides is not None and len(out.side_logits) != expected_sides:
        raise TrainingError(
            f"internal consistency: expected {expected_sides} side outputs, "
            f"got {len(out.side_logits)}")
    include = None
    if ignore_mask is not None:
        include = ~np.asarray(ignore_mask, dtype=bool)
        if include.ndim == 2:
            include = include[None]

    lp_t = ops.softmax_cross_entropy(out.final_logits, labels, include)
    ls_t = [ops.softmax_cross_entropy(s, labels, include) for s in out.side_logits]

    lp = float(lp_t.data)
    ls = [float(t.data) for t in ls_t]
    if ls:
        side_sum = ls[0]
        for x in ls[1:]:
            side_sum = side_sum + x
        total = lp + weights.side_weight * side_sum
        acc = ls_t[0]
        for t in ls_t[1:]:
            acc = ops.add(acc, t)
        total_t = ops.add(lp_t, ops.scale(acc, weights.side_weight))
    else:
        total = lp
        total_t = lp_t
    return LossBreakdown(lp=lp, ls=ls, total=total, total_tensor=total_t)


def recompute_total(lp: float, ls: List[float], weights: LossWeights) -> float:
    """The exact fold used by total_loss, for bitwise trace verification."""
    if not ls:
        return lp
    side_sum = ls[0]
    for x in ls[1:]:
        side_sum = side_sum + x
    return lp + weights.side_weight * side_sum


# ------------------------------------------------------------ augmentation

def _fit_axis(arr, axis, target, pad_mode):
    """Center-crop or center-pad one spatial axis to `target`."""
    size = arr.shape[axis]
    if size > target:
        start = (size - target) // 2
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(start, start + target)
        return arr[tuple(sl)]
    if size < target:
        before = (target - size) // 2
        widths = [(0, 0)] * arr.ndim
        widths[axis] = (before, target - size - before)
        mode = pad_mode if size > 1 else "edge"
        return np.pad(arr, widths, mode=mode)
    return arr


def _zoom_2d(arr, scale, order, pad_mode):
    h, w = arr.shape
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    out = resize_hw(arr, nh, nw, order=order)
    out = _fit_axis(out, 0, h, pad_mode)
    out = _fit_axis(out, 1, w, pad_mode)
    return out


def augment_sample(sample: LabeledSample, cfg: AugmentConfig,
                   rng: np.random.Generator) -> LabeledSample:
    """Apply one randomly sampled flip/rotate/zoom to a sample.

    The identical parameters transform image, labels and FOV, preserving
    pixel correspondence; spatial size is unchanged.  With everything
    disabled the sample is returned untouched (bitwise identity).
    """
    img = sample.image.data[0]  # [C,H,W]
    labels = sample.labels
    fov = sample.fov
    changed = False

    if cfg.flip_h and rng.random() < 0.5:
        img = np.flip(img, axis=2)
        labels = np.flip(labels, axis=1)
        fov = np.flip(fov, axis=1) if fov is not None else None
        changed = True
    if cfg.flip_v and rng.random() < 0.5:
        img = np.flip(img, axis=1)
        labels = np.flip(labels, axis=0)
        fov = np.flip(fov, axis=0) if fov is not None else None
        changed = True

    if cfg.rotate == "right-angles":
        # non-square images keep their shape, so only half turns apply
        k = int(rng.integers(0, 4)) if img.shape[1] == img.shape[2] else 2 * int(rng.integers(0, 2))
        if k:
            img = np.rot90(img, k, axes=(1, 2))
            labels = np.rot90(labels, k)
            fov = np.rot90(fov, k) if fov is not None else None
            changed = True
    elif cfg.rotate == "small-angle":
        deg = float(rng.uniform(-cfg.rotate_max_degrees, cfg.rotate_max_degrees))
        img = np.stack([rotate_hw(c, deg, order=1) for c in img])
        labels = rotate_hw(labels, deg, order=0)
        fov = rotate_hw(fov, deg, order=0) if fov is not None else None
        changed = True

    lo, hi = cfg.zoom_range
    if (lo, hi) != (1.0, 1.0):
        scale = float(rng.uniform(lo, hi))
        img = np.stack([_zoom_2d(c, scale, order=1, pad_mode="reflect") for c in img])
        labels = _zoom_2d(labels, scale, order=0, pad_mode="reflect")
        fov = _zoom_2d(fov, scale, order=0, pad_mode="constant") if fov is not None else None
        changed = True

    if not changed:
        return sample
    image = Tensor(np.ascontiguousarray(img, dtype=sample.image.dtype)[None])
    return LabeledSample(image=image,
                         labels=np.ascontiguousarray(labels),
                         fov=np.ascontiguousarray(fov) if fov is not None else None,
                         id=sample.id)


# ------------------------------------------------------------- training

def _backward_pass(net: Network, sample: LabeledSample, weights: LossWeights,
                   ignore_mask, loss_scale: float) -> LossBreakdown:
    """Forward + backward, accumulating `loss_scale`-weighted gradients."""
    expected = 2 * net.cfg.depth if net.cfg.deep_supervision else 0
    with Tape() as tape:
        out = net.forward(sample.image)
        bd = total_loss(out, sample.labels, weights, ignore_mask, expected_sides=expected)
        objective = (bd.total_tensor if loss_scale == 1.0
                     else ops.scale(bd.total_tensor, loss_scale))
    tape.backward(objective)
    return bd


def _zero_grads(net: Network):
    for p in net.parameters.values():
        p.zero_grad()


def train_step(net: Network, sample: LabeledSample, opt: AdamState,
               weights: LossWeights, ignore_mask=None) -> LossBreakdown:
    """One optimization step on an already padded sample."""
    bd = _backward_pass(net, sample, weights, ignore_mask, loss_scale=1.0)
    if not math.isfinite(bd.total):
        _zero_grads(net)
        raise TrainingError(f"non-finite loss (total={bd.total!r}); aborting before the update")
    adam_step(net.parameter_list(), opt)
    _zero_grads(net)
    return bd


def _aggregate(bds: List[LossBreakdown], weights: LossWeights) -> LossBreakdown:
    lp = float(np.mean([b.lp for b in bds]))
    ls = [float(np.mean(col)) for col in zip(*[b.ls for b in bds])]
    return LossBreakdown(lp=lp, ls=ls, total=recompute_total(lp, ls, weights))


def _trace_line(step: int, bd: LossBreakdown) -> str:
    cells = [str(step), repr(bd.lp)] + [repr(x) for x in bd.ls] + [repr(bd.total)]
    return "\t".join(cells)


def train(net: Network, samples: List[LabeledSample], cfg: TrainConfig,
          weights: Optional[LossWeights] = None, out_dir=None) -> List[LossBreakdown]:
    """Run cfg.steps optimization steps over `samples` round-robin.

    With out_dir set, writes `loss_trace.tsv` (one tab-separated line per
    step: step, lp, the side losses in head order, total), periodic
    checkpoints per cfg.checkpoint_every, and a final checkpoint.
    Deterministic for a fixed (net seed, cfg seed, sample list).
    """
    weights = weights or LossWeights()
    problems = cfg.problems() + weights.problems()
    if problems:
        raise ConfigError("invalid training config: " + "; ".join(problems))
    if not samples:
        raise DataError("no training samples")

    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.lr)
    div = 2 ** net.cfg.depth
    history: List[LossBreakdown] = []
    trace_path = None
    trace = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        trace_path = os.path.join(out_dir, "loss_trace.tsv")
        trace = open(trace_path, "w")

    try:
        micro = 0
        for step in range(1, cfg.steps + 1):
            bds = []
            for _ in range(cfg.batch_size):
                raw = samples[micro % len(samples)]
                micro += 1
                aug = augment_sample(raw, cfg.augment, rng)
                padded, ignore = reflect_pad_sample(aug, div)
                bds.append(_backward_pass(net, padded, weights, ignore,
                                          loss_scale=1.0 / cfg.batch_size))
            bd = bds[0] if cfg.batch_size == 1 else _aggregate(bds, weights)
            if not math.isfinite(bd.total):
                tail = "\n".join(_trace_line(i + 1, h) for i, h in
                                 enumerate(history[-5:], start=max(0, len(history) - 5)))
                raise TrainingError(
                    f"non-finite loss at step {step} (total={bd.total!r}); "
                    f"recent trace:\n{tail}")
            adam_step(net.parameter_list(), opt)
            _zero_grads(net)
            history.append(bd)
            if trace is not None:
                trace.write(_trace_line(step, bd) + "\n")
                trace.flush()
            if (out_dir is not None and cfg.checkpoint_every
                    and step % cfg.checkpoint_every == 0):
                save_checkpoint(net, opt, os.path.join(out_dir, f"checkpoint_{step:06d}.ckpt"),
                                step=step)
    finally:
        if trace is not None:
            trace.close()
    if out_dir is not None:
        save_checkpoint(net, opt, os.path.join(out_dir, "checkpoint_final.ckpt"),
                        step=cfg.steps)
    return history


def pixel_accuracy(net: Network, sample: LabeledSample) -> float:
    """Fraction of (unpadded) pixels whose argmax class matches the labels."""
    h, w = sample.spatial_shape()
    padded, _ = reflect_pad_sample(sample, 2 ** net.cfg.depth)
    out = net.forward(padded.image)
    pred = np.argmax(out.final_logits.data, axis=1)[0, :h, :w]
    return float(np.mean(pred == sample.labels[:h, :w]))


def overfit_check(net_cfg: NetworkConfig, sample: LabeledSample, steps: int,
                  lr: float = 1e-4, seed: int = 0) -> float:
    """Train a fresh network on one fixed sample (no augmentation) and
    report final training-pixel accuracy — the desk-scale sanity check that
    the full graph, loss, and optimizer actually fit something."""
    net = Network(net_cfg, seed=seed)
    opt = AdamState(lr=lr)
    weights = LossWeights()
    padded, ignore = reflect_pad_sample(sample, 2 ** net_cfg.depth)
    for _ in range(steps):
        train_step(net, padded, opt, weights, ignore_mask=ignore)
    return pixel_accuracy(net, sample)
