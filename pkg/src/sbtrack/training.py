"""Losses, target assignment, optimizer, and the fine-tuning loop.

Every cell of the output grid whose center falls inside the ground-truth
box is a positive; positives regress normalized left/top/right/bottom
distances.  The total objective is

    12 * BCE(foreground) + 5 * (1 - GIoU) + 7 * L1

with the box terms averaged over positive cells only and all losses
mean-reduced, so the weights stay comparable across grid sizes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from . import model as md
from .boxes import Box, giou, iou
from .engine import Tensor, no_grad
from .tracking import CropMeta, crop_region, predict_box

__all__ = [
    "LossWeights",
    "TrainConfig",
    "TargetMap",
    "assign_targets",
    "cls_loss",
    "giou",
    "reg_loss",
    "reg_loss_terms",
    "total_loss",
    "adamw_step",
    "clip_global_norm",
    "TrainExample",
    "make_training_examples",
    "TrainLog",
    "train",
]

_PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    giou: float = 5.0
    l1: float = 7.0
    cls: float = 12.0

    def __post_init__(self):
        if min(self.giou, self.l1, self.cls) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr_head: float = 1e-3
    lr_backbone: float = 1e-4
    weight_decay: float = 1e-4
    batch: int = 4
    steps: int = 300
    decay_steps: tuple[int, ...] = ()  # lr drops by 10x at each
    seed: int = 0
    clip_norm: float = 10.0
    probe_every: int = 25

    def __post_init__(self):
        if self.lr_backbone > self.lr_head:
            raise ValueError("backbone lr must not exceed head lr")
        if self.batch < 1 or self.steps < 0:
            raise ValueError("batch must be >= 1 and steps >= 0")


# -- target assignment -----------------------------------------------------------


@dataclass
class TargetMap:
    labels: np.ndarray  # [hs, ws] in {0, 1}
    reg: np.ndarray  # [4, hs, ws] normalized l/t/r/b distances
    positives: int

    @property
    def skip(self) -> bool:
        return self.positives == 0


def assign_targets(gt_box: Box, grid: tuple[int, int], crop_size: float) -> TargetMap:
    """Label cells positive when their center lies inside the box (given in
    search-crop pixels); regression targets are the distances from the cell
    center to the four box edges, normalized by half the crop size (so a
    value of 1 reaches a full crop away and typical boxes sit mid-range)."""
    hs, ws = grid
    cx = (np.arange(ws) + 0.5) * (crop_size / ws)
    cy = (np.arange(hs) + 0.5) * (crop_size / hs)
    inside_x = (cx >= gt_box.x1) & (cx <= gt_box.x2)
    inside_y = (cy >= gt_box.y1) & (cy <= gt_box.y2)
    labels = (inside_y[:, None] & inside_x[None, :]).astype(np.float32)
    reg = np.stack([
        np.broadcast_to(cx[None, :], (hs, ws)) - gt_box.x1,
        np.broadcast_to(cy[:, None], (hs, ws)) - gt_box.y1,
        gt_box.x2 - np.broadcast_to(cx[None, :], (hs, ws)),
        gt_box.y2 - np.broadcast_to(cy[:, None], (hs, ws)),
    ]).astype(np.float32) / (crop_size / 2.0)
    return TargetMap(labels=labels, reg=reg, positives=int(labels.sum()))


# -- losses -----------------------------------------------------------------------


def cls_loss(p, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped away from 0 and 1."""
    if not isinstance(p, Tensor):
        p = eg.tensor(p)
    flat = eg.reshape(p, (-1,))
    y = eg.tensor(np.asarray(labels, dtype=flat.dtype).reshape(-1), dtype=flat.dtype)
    pc = eg.clip(flat, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    pos = eg.mul(y, eg.log(pc))
    neg = eg.mul(eg.sub(1.0, y), eg.log(eg.sub(1.0, pc)))
    return eg.mul(eg.mean_(eg.add(pos, neg)), -1.0)


def _decode_edges(reg, grid):
    """Box edges per cell in crop-fraction units; reg channels carry
    distances in half-crop units, hence the 0.5 factor."""
    hs, ws = grid
    cx = np.broadcast_to(((np.arange(ws) + 0.5) / ws)[None, :], (hs, ws)).astype(reg.dtype)
    cy = np.broadcast_to(((np.arange(hs) + 0.5) / hs)[:, None], (hs, ws)).astype(reg.dtype)
    left, top, right, bottom = (eg.mul(reg[i], 0.5) for i in range(4))
    return (eg.sub(eg.tensor(cx, dtype=reg.dtype), left),
            eg.sub(eg.tensor(cy, dtype=reg.dtype), top),
            eg.add(eg.tensor(cx, dtype=reg.dtype), right),
            eg.add(eg.tensor(cy, dtype=reg.dtype), bottom))


def reg_loss_terms(pred: Tensor, target: np.ndarray, mask: np.ndarray,
                   ) -> tuple[Tensor, Tensor]:
    """(1 - GIoU) and L1 terms averaged over positive cells.

    `pred` is the [4, hs, ws] sigmoid output; `target` the matching
    normalized distances; `mask` the positive-cell indicator.  With no
    positives both terms are defined as exact zeros.
    """
    n_pos = float(np.sum(mask))
    if n_pos == 0:
        zero = eg.tensor(np.zeros((), dtype=pred.dtype), dtype=pred.dtype)
        return zero, zero
    grid = mask.shape
    m = eg.tensor(np.asarray(mask, dtype=pred.dtype), dtype=pred.dtype)
    tgt = eg.tensor(np.asarray(target, dtype=pred.dtype), dtype=pred.dtype)

    px1, py1, px2, py2 = _decode_edges(pred, grid)
    tx1, ty1, tx2, ty2 = _decode_edges(tgt, grid)

    iw = eg.relu(eg.sub(eg.minimum(px2, tx2), eg.maximum(px1, tx1)))
    ih = eg.relu(eg.sub(eg.minimum(py2, ty2), eg.maximum(py1, ty1)))
    inter = eg.mul(iw, ih)
    area_p = eg.mul(eg.sub(px2, px1), eg.sub(py2, py1))
    area_t = eg.mul(eg.sub(tx2, tx1), eg.sub(ty2, ty1))
    union = eg.sub(eg.add(area_p, area_t), inter)
    ew = eg.sub(eg.maximum(px2, tx2), eg.minimum(px1, tx1))
    eh = eg.sub(eg.maximum(py2, ty2), eg.minimum(py1, ty1))
    enclose = eg.mul(ew, eh)
    giou_map = eg.sub(eg.div(inter, union), eg.div(eg.sub(enclose, union), enclose))

    giou_term = eg.mul(eg.sum_(eg.mul(eg.sub(1.0, giou_map), m)), 1.0 / n_pos)
    diff = eg.mean_(eg.abs_(eg.sub(pred, tgt)), axis=0)  # mean over l/t/r/b
    l1_term = eg.mul(eg.sum_(eg.mul(diff, m)), 1.0 / n_pos)
    return giou_term, l1_term


def reg_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray,
             weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted box loss: giou_weight * (1 - GIoU) + l1_weight * L1."""
    g, l1 = reg_loss_terms(pred, target, mask)
    return eg.add(eg.mul(g, weights.giou), eg.mul(l1, weights.l1))


def total_loss(cls_term, giou_term, l1_term, weights: LossWeights = LossWeights()):
    """cls_weight * BCE + giou_weight * (1 - GIoU) + l1_weight * L1."""
    if any(isinstance(t, Tensor) for t in (cls_term, giou_term, l1_term)):
        return eg.add(eg.add(eg.mul(cls_term, weights.cls), eg.mul(giou_term, weights.giou)),
                      eg.mul(l1_term, weights.l1))
    return weights.cls * cls_term + weights.giou * giou_term + weights.l1 * l1_term


# -- optimizer ---------------------------------------------------------------------


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: dict, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> list[Tensor]:
    """One decoupled-weight-decay Adam update, in place.

    `state` persists across calls; pass the same dict each step.  A zero
    gradient at t=1 reduces to pure decay: w <- w * (1 - lr * wd).
    """
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    state["t"] += 1
    t = state["t"]
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        g = np.zeros_like(p.data) if g is None else g
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data)
    return params


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- datasets ---------------------------------------------------------------------


@dataclass
class TrainExample:
    template: np.ndarray  # [3, t, t]
    search: np.ndarray  # [3, s, s]
    gt: Box  # in search-crop pixels


def make_training_examples(sequences, count: int, template_size: int, search_size: int,
                           rng, frame_gap: int = 6, center_jitter: float = 0.12,
                           flip_prob: float = 0.5, brightness: float = 0.15,
                           ) -> list[TrainExample]:
    """Sample (template, search, box) triples from sequences.

    Template: factor-2 crop at the ground truth of one frame.  Search:
    factor-4 crop of a nearby frame, centered on a jittered box so the
    target is not always dead center.  Horizontal flip and brightness
    jitter are applied to the pair as a whole.
    """
    examples = []
    for _ in range(count):
        seq = sequences[int(rng.integers(len(sequences)))]
        n = len(seq.frames)
        i = int(rng.integers(n))
        j = int(np.clip(i + rng.integers(-frame_gap, frame_gap + 1), 0, n - 1))
        template, _ = crop_region(seq.frames[i], seq.gt[i], 2.0, template_size)
        ref = seq.gt[j]
        side = 4.0 * float(np.sqrt(ref.w * ref.h))
        dx, dy = rng.uniform(-center_jitter, center_jitter, size=2) * side
        search, meta = crop_region(seq.frames[j], ref.shifted(dx, dy), 4.0, search_size)
        gt = meta.to_crop(seq.gt[j])
        if rng.random() < flip_prob:
            template = template[:, :, ::-1].copy()
            search = search[:, :, ::-1].copy()
            gt = Box(search_size - gt.x2, gt.y1, search_size - gt.x1, gt.y2)
        factor = 1.0 + rng.uniform(-brightness, brightness)
        template = np.clip(template * factor, 0.0, 1.0).astype(np.float32)
        search = np.clip(search * factor, 0.0, 1.0).astype(np.float32)
        examples.append(TrainExample(template=template, search=search, gt=gt))
    return examples


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainLog:
    columns = ("step", "loss_cls", "loss_giou", "loss_l1", "loss_total", "lr", "probe_iou")
    rows: list[tuple] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            writer.writerows(self.rows)

    def column(self, name: str) -> list:
        idx = self.columns.index(name)
        return [r[idx] for r in self.rows]


def _probe_iou(model, probe: list[TrainExample]) -> float:
    meta = CropMeta.identity(model.config.search_size)
    vals = []
    with no_grad():
        for ex in probe:
            cls, reg = md.forward(model, ex.template, ex.search)
            vals.append(iou(predict_box(cls, reg, meta), ex.gt))
    return float(np.mean(vals)) if vals else 0.0


def train(model, dataset: list[TrainExample], tc: TrainConfig,
          probe: list[TrainExample] | None = None, log_path=None,
          weights: LossWeights = LossWeights()) -> TrainLog:
    """Fine-tune on (template, search, box) triples.

    Gradients accumulate over the batch one pair at a time, get clipped at
    a global norm, and feed decoupled-Adam updates with separate learning
    rates for the prediction heads and the backbone.  The learning rate
    drops by 10x at each step listed in `tc.decay_steps`.  Every
    `tc.probe_every` steps the mean IoU of greedy decodes on a held-out
    probe batch is logged (carried forward in between).
    """
    if not dataset:
        raise ValueError("empty training set")
    if probe is None:
        n_probe = max(1, len(dataset) // 10)
        probe = dataset[-n_probe:]
        dataset = dataset[:-n_probe] or probe
    rng = np.random.default_rng(tc.seed)
    named = model.named_parameters()
    head_params = [t for n, t in named.items() if n.startswith(("head.", "classifier."))]
    back_params = [t for n, t in named.items() if not n.startswith(("head.", "classifier."))]
    all_params = head_params + back_params
    head_state: dict = {}
    back_state: dict = {}
    grid = model.config.search_grid()
    targets = [assign_targets(ex.gt, grid, float(model.config.search_size)) for ex in dataset]

    log = TrainLog()
    probe_val = _probe_iou(model, probe)
    decay = 0
    for step in range(tc.steps):
        decay += tc.decay_steps.count(step)
        lr_scale = 0.1**decay
        idx = rng.integers(len(dataset), size=tc.batch)
        eg.zero_grads(all_params)
        acc = np.zeros(4)
        for i in idx:
            ex, tm = dataset[i], targets[i]
            cls, reg = md.forward(model, ex.template, ex.search)
            c_term = cls_loss(cls, tm.labels)
            g_term, l1_term = reg_loss_terms(reg, tm.reg, tm.labels)
            loss = total_loss(c_term, g_term, l1_term, weights)
            eg.mul(loss, 1.0 / tc.batch).backward()
            acc += (c_term.item(), g_term.item(), l1_term.item(), loss.item())
        acc /= tc.batch
        clip_global_norm(all_params, tc.clip_norm)
        adamw_step(head_params, [p.grad for p in head_params], head_state,
                   lr=tc.lr_head * lr_scale, weight_decay=tc.weight_decay)
        adamw_step(back_params, [p.grad for p in back_params], back_state,
                   lr=tc.lr_backbone * lr_scale, weight_decay=tc.weight_decay)
        if (step + 1) % tc.probe_every == 0 or step + 1 == tc.steps:
            probe_val = _probe_iou(model, probe)
        log.rows.append((step, acc[0], acc[1], acc[2], acc[3], tc.lr_head * lr_scale, probe_val))
    if log_path is not None:
        log.to_csv(log_path)
    return log
