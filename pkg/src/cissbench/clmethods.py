"""Losses, prior regularisers and the exemplar replay buffer.

Loss functions index logits by channel and expect labels already expressed
as channel indices (the trainer maps class ids to channels).  Class sets such
as ``current_classes`` are channel indices too.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .segnet import to_tensor

log = logging.getLogger(__name__)


def _support(labels, ignore_id):
    return labels != ignore_id


def _finish(per_pixel, mask, return_support):
    n = int(mask.sum())
    if n == 0:
        # Keep the graph connected so callers can always backward().
        loss = per_pixel.sum() * 0.0
    else:
        loss = per_pixel[mask].mean()
    return (loss, n) if return_support else loss


def cross_entropy(logits, labels, ignore_id=255, return_support=False):
    """Mean pixel cross-entropy over non-ignored pixels.

    With every pixel ignored the loss is 0 and the support count is 0.
    """
    mask = _support(labels, ignore_id)
    safe = torch.where(mask, labels, torch.zeros_like(labels))
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, safe[:, None]).squeeze(1)
    return _finish(nll, mask, return_support)


def restricted_cross_entropy(logits, labels, current_classes, ignore_id=255, background_id=0, return_support=False):
    """Cross-entropy with the softmax taken only over current classes and background.

    Channels outside ``current_classes | {background_id}`` get no gradient.
    """
    keep = sorted(set(int(c) for c in current_classes) | {background_id})
    mask = _support(labels, ignore_id)
    present = torch.unique(labels[mask])
    bad = sorted(set(present.tolist()) - set(keep))
    if bad:
        raise ValueError(f"labels {bad} lie outside the restricted class set {keep}")
    pos = torch.full((max(keep + [logits.shape[1] - 1]) + 1,), -1, dtype=torch.long)
    pos[torch.as_tensor(keep)] = torch.arange(len(keep))
    safe = torch.where(mask, labels, torch.full_like(labels, background_id))
    sub = logits[:, keep]
    logp = F.log_softmax(sub, dim=1)
    nll = -logp.gather(1, pos[safe][:, None]).squeeze(1)
    return _finish(nll, mask, return_support)


def unbiased_cross_entropy(logits, labels, old_classes, ignore_id=255, background_id=0, return_support=False):
    """UNCE: background pixels are scored by the total mass of old classes plus background.

    ``old_classes`` is C_{t-1}; the background is always added to it.  Other
    pixels use the ordinary posterior of their class.
    """
    old = sorted(set(int(c) for c in old_classes) | {background_id})
    mask = _support(labels, ignore_id)
    safe = torch.where(mask, labels, torch.zeros_like(labels))
    lse_all = torch.logsumexp(logits, dim=1)
    logp = logits.gather(1, safe[:, None]).squeeze(1) - lse_all
    log_bg = torch.logsumexp(logits[:, old], dim=1) - lse_all
    logq = torch.where(safe == background_id, log_bg, logp)
    return _finish(-logq, mask, return_support)


def masked_distillation(new_logits, old_logits, labels, temperature=2.0, background_id=0, return_support=False):
    """Distil the old model's posterior on background-labelled pixels only.

    Cross-entropy between the softened teacher posterior over the old
    channels and the softened student posterior restricted to those same
    channels, averaged over background pixels and scaled by ``T**2``.
    """
    n_old = old_logits.shape[1]
    if new_logits.shape[1] < n_old:
        raise ValueError("student has fewer channels than the teacher")
    t = float(temperature)
    teacher = F.softmax(old_logits.detach() / t, dim=1)
    student = F.log_softmax(new_logits[:, :n_old] / t, dim=1)
    per_pixel = -(teacher * student).sum(1) * (t * t)
    mask = labels == background_id
    return _finish(per_pixel, mask, return_support)


# ---------------------------------------------------------------------------
# prior regularisation


@dataclass
class ImportanceEstimate:
    importance: dict
    anchor: dict
    method: str

    def __post_init__(self):
        if set(self.importance) != set(self.anchor):
            raise ValueError("importance and anchor parameter names differ")
        for k, v in self.importance.items():
            if (v < 0).any():
                raise ValueError(f"negative importance for {k}")
        if self.method not in ("ewc", "mas"):
            raise ValueError(f"unknown importance method {self.method!r}")

    def total(self):
        return float(sum(v.sum() for v in self.importance.values()))


def _label_channels(model, labels):
    lut = np.full(256, 255, dtype=np.uint8)
    for k, c in enumerate(model.class_ids):
        lut[c] = k
    return torch.from_numpy(kernels.remap_labels(labels, lut).astype(np.int64))


def estimate_importance(model, dataset, method, num_batches=None, batch_size=1, ignore_id=255):
    """Per-parameter importance with the current parameters as anchor.

    ``ewc``: mean over batches of the squared gradient of the training
    cross-entropy at the given labels (empirical Fisher).
    ``mas``: mean over batches of the absolute gradient of the squared L2
    norm of the logits, summed over channels and averaged over pixels (and
    over the samples of a batch), so the scale does not grow with resolution.

    With the default ``batch_size=1`` every batch is one sample.  The model is
    evaluated in inference mode so normalisation statistics are not touched.
    """
    if method not in ("ewc", "mas"):
        raise ValueError(f"unknown importance method {method!r}; valid: ewc, mas")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot estimate importance on an empty dataset")
    was_training = model.training
    model.eval()
    params = {k: p for k, p in model.named_parameters() if p.requires_grad}
    acc = {k: torch.zeros_like(p) for k, p in params.items()}
    starts = list(range(0, n, batch_size))
    if num_batches is not None:
        starts = starts[:num_batches]
    channel_labels = hasattr(model, "class_ids")
    for s in starts:
        x = to_tensor(dataset.images[s : s + batch_size])
        x = x.to(next(model.parameters()).dtype)
        out = model(x)
        if method == "ewc":
            lab = dataset.labels[s : s + batch_size]
            y = _label_channels(model, lab) if channel_labels else torch.from_numpy(lab.astype(np.int64))
            q = cross_entropy(out, y, ignore_id)
        else:
            q = out.pow(2).sum(1).mean() if out.ndim > 1 else out.pow(2).sum()
        grads = torch.autograd.grad(q, list(params.values()), allow_unused=True)
        for (k, _), g in zip(params.items(), grads):
            if g is None:
                continue
            acc[k] += g.pow(2) if method == "ewc" else g.abs()
    model.train(was_training)
    importance = {k: (v / len(starts)).detach() for k, v in acc.items()}
    anchor = {k: p.detach().clone() for k, p in params.items()}
    return ImportanceEstimate(importance, anchor, method)


def quadratic_penalty(params, estimate, lam):
    """``lam * sum_p importance_p * (theta_p - anchor_p)**2``.

    ``params`` is a name -> tensor mapping (e.g. ``dict(model.named_parameters())``).
    Anchors that cover only part of a grown tensor (the classifier after a
    head extension) are compared on their leading slice.
    """
    missing = sorted(set(estimate.importance) - set(params))
    if missing:
        raise KeyError(f"parameters missing for penalty: {missing}")
    total = None
    for k, omega in estimate.importance.items():
        p = params[k]
        anchor = estimate.anchor[k]
        if p.shape != anchor.shape:
            if p.ndim != anchor.ndim or p.shape[1:] != anchor.shape[1:] or p.shape[0] < anchor.shape[0]:
                raise ValueError(f"parameter {k} has shape {tuple(p.shape)}, anchor {tuple(anchor.shape)}")
            p = p[: anchor.shape[0]]
        term = (omega * (p - anchor).pow(2)).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return lam * total


# ---------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """Per-class exemplar store of ``(image, label)`` pairs.

    Labels are the original full-catalog masks restricted to the classes seen
    when the sample was stored; other classes become ``ignore_id``.
    """

    def __init__(self, capacity_per_class=20, ignore_id=255):
        if capacity_per_class < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity_per_class = capacity_per_class
        self.ignore_id = ignore_id
        self.items = {}
        self.warnings = []

    def __len__(self):
        return sum(len(v) for v in self.items.values())

    def counts(self):
        return {c: len(v) for c, v in sorted(self.items.items())}

    def flat(self):
        return [(c, img, lab) for c in sorted(self.items) for img, lab in self.items[c]]

    def populate(self, dataset, classes, seen_classes, rng):
        """Store up to ``capacity_per_class`` random images per class from ``dataset``.

        Candidates are selected on the unrelabelled masks
        (``dataset.orig_labels``).
        """
        orig = dataset.orig_labels
        counts = kernels.class_pixel_counts(orig)
        lut = np.full(256, self.ignore_id, dtype=np.uint8)
        for c in seen_classes:
            lut[int(c)] = int(c)
        for c in sorted(int(c) for c in classes):
            cand = np.flatnonzero(counts[:, c] > 0)
            if len(cand) == 0:
                msg = f"class {c} absent from dataset; nothing stored"
                log.warning(msg)
                self.warnings.append(msg)
                self.items.setdefault(c, [])
                continue
            if len(cand) < self.capacity_per_class:
                msg = f"class {c}: only {len(cand)} candidates for capacity {self.capacity_per_class}"
                log.warning(msg)
                self.warnings.append(msg)
            k = min(self.capacity_per_class, len(cand))
            pick = np.sort(rng.choice(cand, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
            self.items[c] = [(dataset.images[i].copy(), kernels.remap_labels(orig[i], lut)) for i in pick]
        return self

    def sample(self, k, rng):
        """Draw ``k`` items uniformly (with replacement) over the whole buffer."""
        flat = self.flat()
        if not flat or k <= 0:
            return None
        idx = rng.integers(0, len(flat), size=k)
        images = np.stack([flat[i][1] for i in idx])
        labels = np.stack([flat[i][2] for i in idx])
        return images, labels

    def save(self, path):
        """Persist as dataset-style PNG folders plus ``index.json``."""
        from PIL import Image

        path = Path(path)
        (path / "images").mkdir(parents=True, exist_ok=True)
        (path / "labels").mkdir(parents=True, exist_ok=True)
        index = {"capacity_per_class": self.capacity_per_class, "ignore_id": self.ignore_id, "classes": {}}
        k = 0
        for c in sorted(self.items):
            ids = []
            for img, lab in self.items[c]:
                Image.fromarray(np.round(img * 255).astype(np.uint8), mode="RGB").save(path / "images" / f"{k:06d}.png")
                Image.fromarray(lab, mode="L").save(path / "labels" / f"{k:06d}.png")
                ids.append(k)
                k += 1
            index["classes"][str(c)] = ids
        (path / "index.json").write_text(json.dumps(index, indent=2))
        return path

    @classmethod
    def load(cls, path):
        from PIL import Image

        path = Path(path)
        index = json.loads((path / "index.json").read_text())
        buf = cls(index["capacity_per_class"], index["ignore_id"])
        for c, ids in index["classes"].items():
            buf.items[int(c)] = [
                (
                    np.asarray(Image.open(path / "images" / f"{k:06d}.png").convert("RGB"), dtype=np.float32) / 255.0,
                    np.asarray(Image.open(path / "labels" / f"{k:06d}.png"), dtype=np.uint8),
                )
                for k in ids
            ]
        return buf


def replay_share(batch_size):
    """Number of buffer samples per batch of ``batch_size``: ceil(B / 4)."""
    return int(math.ceil(batch_size / 4))
