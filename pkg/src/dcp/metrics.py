"""IoU metrics, evaluation over episode suites and report output.

Class IoU pools intersections and unions over all episodes of a class
before dividing (``pooled=True``, the default). ``pooled=False`` averages
per-episode IoUs instead.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from dcp.errors import ValidationError
from dcp.kernels import confusion_kernel, inter_union_kernel
from dcp.maskdiv import as_binary_mask


def iou(pred, gt):
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    p = as_binary_mask(pred, "pred")
    g = as_binary_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {g.shape}")
    inter, union = inter_union_kernel(np.ascontiguousarray(p), np.ascontiguousarray(g))
    if union == 0:
        return 1.0
    return inter / union


def _ratio(inter, union):
    return 1.0 if union == 0 else inter / union


@dataclass
class Accumulator:
    """Mergeable counts behind an :class:`EvalReport`."""

    n_labels: int = 0
    class_inter: dict = field(default_factory=dict)
    class_union: dict = field(default_factory=dict)
    class_episode_ious: dict = field(default_factory=dict)
    fg_inter: int = 0
    fg_union: int = 0
    bg_inter: int = 0
    bg_union: int = 0
    n_episodes: int = 0
    confusion: np.ndarray = None

    def __post_init__(self):
        if self.confusion is None:
            self.confusion = np.zeros((self.n_labels, self.n_labels), np.int64)

    def add(self, pred, gt, class_id, label=None):
        p = np.ascontiguousarray(as_binary_mask(pred, "pred"))
        g = np.ascontiguousarray(as_binary_mask(gt, "gt"))
        if p.shape != g.shape:
            raise ValidationError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
        inter, union = inter_union_kernel(p, g)
        self.class_inter[class_id] = self.class_inter.get(class_id, 0) + inter
        self.class_union[class_id] = self.class_union.get(class_id, 0) + union
        self.class_episode_ious.setdefault(class_id, []).append(_ratio(inter, union))
        self.fg_inter += inter
        self.fg_union += union
        bi, bu = inter_union_kernel(1 - p, 1 - g)
        self.bg_inter += bi
        self.bg_union += bu
        self.n_episodes += 1
        if label is not None and self.n_labels:
            lab = np.asarray(label, dtype=np.int64)
            if lab.shape == p.shape and 0 <= class_id < self.n_labels:
                confusion_kernel(self.confusion, np.ascontiguousarray(lab), p, int(class_id))
        return self

    def merge(self, other):
        n = max(self.n_labels, other.n_labels)
        out = Accumulator(n_labels=n)
        for acc in (self, other):
            for c, v in acc.class_inter.items():
                out.class_inter[c] = out.class_inter.get(c, 0) + v
            for c, v in acc.class_union.items():
                out.class_union[c] = out.class_union.get(c, 0) + v
            for c, v in acc.class_episode_ious.items():
                out.class_episode_ious.setdefault(c, []).extend(v)
            out.fg_inter += acc.fg_inter
            out.fg_union += acc.fg_union
            out.bg_inter += acc.bg_inter
            out.bg_union += acc.bg_union
            out.n_episodes += acc.n_episodes
            m = acc.confusion.shape[0]
            out.confusion[:m, :m] += acc.confusion
        return out

    def report(self, run_seed=None, pooled=True):
        if pooled:
            per_class = {c: _ratio(self.class_inter[c], self.class_union[c]) for c in sorted(self.class_inter)}
        else:
            per_class = {c: float(np.mean(v)) for c, v in sorted(self.class_episode_ious.items())}
        miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
        fb = 0.5 * (_ratio(self.fg_inter, self.fg_union) + _ratio(self.bg_inter, self.bg_union))
        return EvalReport(per_class, miou, fb, self.n_episodes, run_seed, self.confusion.copy())


@dataclass
class EvalReport:
    per_class_iou: dict
    miou: float
    fb_iou: float
    n_episodes: int
    run_seed: object
    confusion: np.ndarray = field(repr=False)

    def to_dict(self):
        return {
            "miou": self.miou,
            "fb_iou": self.fb_iou,
            "n_episodes": self.n_episodes,
            "run_seed": self.run_seed,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
        }

    def write(self, directory, stem="report", plot=False):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        write_confusion_csv(directory / f"{stem}_confusion.csv", self.confusion)
        if plot:
            plot_confusion(directory / f"{stem}_confusion.png", self.confusion)
        return directory / f"{stem}.json"


def write_confusion_csv(path, confusion):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gt_class"] + [f"pred_as_{j}" for j in range(confusion.shape[1])])
        for i, row in enumerate(confusion):
            writer.writerow([i] + [int(v) for v in row])


def plot_confusion(path, confusion):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    conf = confusion[1:, 1:].astype(np.float64)
    norm = conf / np.maximum(conf.sum(axis=0, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(norm, cmap="viridis")
    ax.set_xlabel("episode class")
    ax.set_ylabel("ground-truth class of pixels predicted foreground")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------- evaluation


def oracle_predictor(episode):
    return episode.query_mask


def _n_labels(suite):
    top = 0
    for ep in suite:
        top = max(top, ep.class_id)
        if ep.query_label is not None:
            lab = np.asarray(ep.query_label)
            valid = lab[lab != 255]
            if valid.size:
                top = max(top, int(valid.max()))
    return top + 1


def predict_masks(model, episodes, batch_size=16):
    """Binary query masks at each query's own resolution."""
    from dcp.network import episode_tensors

    dtype = next(model.parameters()).dtype
    size = model.config.image_size
    model.eval()
    out = [None] * len(episodes)
    groups = {}
    for i, ep in enumerate(episodes):
        groups.setdefault(ep.k_shot, []).append(i)
    with torch.no_grad():
        for idx in groups.values():
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                res = model(*episode_tensors([episodes[i] for i in chunk], size, dtype))
                for j, i in enumerate(chunk):
                    h, w = np.asarray(episodes[i].query_image).shape[:2]
                    m = res.mask[j]
                    if tuple(m.shape) != (h, w):
                        m = F.interpolate(m[None, None].float(), size=(h, w), mode="nearest")[0, 0].long()
                    out[i] = m.numpy()
    return out


def evaluate(model, suite, run_seed=None, pooled=True, n_labels=None):
    """Score ``model`` on ``suite``.

    ``model`` is a :class:`dcp.network.DCPModel` or any callable mapping an
    episode to a binary query mask.
    """
    suite = list(suite)
    if not suite:
        raise ValidationError("evaluation suite is empty")
    for ep in suite:
        if ep.query_mask is None:
            raise ValidationError("evaluation episodes need query masks")
    if isinstance(model, torch.nn.Module):
        preds = predict_masks(model, suite)
    else:
        preds = [model(ep) for ep in suite]
    acc = Accumulator(n_labels=n_labels if n_labels is not None else _n_labels(suite))
    for ep, pred in zip(suite, preds):
        acc.add(pred, ep.query_mask, ep.class_id, ep.query_label)
    return acc.report(run_seed=run_seed, pooled=pooled)


@dataclass
class MultiRunReport:
    runs: list
    miou: float
    fb_iou: float

    def to_dict(self):
        return {
            "miou": self.miou,
            "fb_iou": self.fb_iou,
            "runs": [{"run_seed": r.run_seed, "miou": r.miou, "fb_iou": r.fb_iou} for r in self.runs],
        }


def evaluate_multi(model, suites, pooled=True):
    """``suites`` maps run seed -> episode list; returns per-run reports and their mean."""
    runs = [evaluate(model, suite, run_seed=seed, pooled=pooled) for seed, suite in suites.items()]
    if not runs:
        raise ValidationError("no evaluation runs given")
    return MultiRunReport(
        runs=runs,
        miou=float(np.mean([r.miou for r in runs])),
        fb_iou=float(np.mean([r.fb_iou for r in runs])),
    )
