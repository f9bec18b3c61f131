"""Forgetting probes: layer stitching, decoder retraining, CKA and classifier bias."""

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .metrics import ConfusionMatrix, MeanIoU, confusion_matrix, miou  # noqa: F401  (re-exported)
from .segnet import StitchIncompatibleError, clone_model, freeze_encoder, to_tensor


def _same_architecture(a, b):
    ka, kb = a.architecture(), b.architecture()
    return {k: v for k, v in ka.items() if k != "init_std"} == {k: v for k, v in kb.items() if k != "init_std"}


def stitched_predict(f1, f0, n, images, batch_size=32):
    """Class-id predictions of the Frankenstein network: f1 blocks ``0..n``, f0 blocks ``n+1..``."""
    if not _same_architecture(f1, f0):
        raise StitchIncompatibleError(f"architectures differ: {f1.architecture()} vs {f0.architecture()}")
    # The head is the last block; cutting there keeps f1's own classifier.
    ids = torch.as_tensor(f1.class_ids if n == f1.num_blocks - 1 else f0.class_ids)
    f0.eval()
    f1.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            x = to_tensor(images[s : s + batch_size])
            a = f1.forward_prefix(x, n)
            logits = a if n == f1.num_blocks - 1 else f0.forward_suffix(a, n)
            out.append(ids[logits.argmax(1)].numpy().astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3], np.uint8)


def _task0_miou(pred, dataset, catalog, classes):
    cm = ConfusionMatrix.from_arrays(dataset.labels, pred, len(catalog), catalog.ignore_id)
    return miou(cm, classes)


def stitch_evaluate(f1, f0, n, task0_test, baseline_miou, catalog, classes=None):
    """Relative task-0 mIoU (percent of ``baseline_miou``) of the network stitched at ``n``.

    ``classes`` defaults to f0's output classes.
    """
    classes = sorted(f0.class_ids) if classes is None else sorted(classes)
    pred = stitched_predict(f1, f0, n, task0_test.images)
    res = _task0_miou(pred, task0_test, catalog, classes)
    if baseline_miou <= 0:
        raise ValueError("baseline mIoU must be positive")
    return 100.0 * res.value / baseline_miou


@dataclass
class StitchReport:
    indices: list
    relative_miou: list
    baseline_miou: float
    cka: list = None
    encoder_range: tuple = None
    decoder_range: tuple = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def encoder_values(self):
        return [v for i, v in zip(self.indices, self.relative_miou) if self.encoder_range[0] <= i < self.encoder_range[1]]

    def decoder_values(self):
        return [v for i, v in zip(self.indices, self.relative_miou) if self.decoder_range[0] <= i < self.decoder_range[1]]


def stitch_profile(f1, f0, task0_test, catalog, classes=None, probe_images=None):
    """Stitch at every block index; the baseline is f0's task-0 mIoU measured now.

    Passing ``probe_images`` also fills the per-layer CKA scores.
    """
    classes = sorted(f0.class_ids) if classes is None else sorted(classes)
    base_pred = stitched_predict(f0, f0, f0.num_blocks - 1, task0_test.images)
    baseline = _task0_miou(base_pred, task0_test, catalog, classes).value
    idx = list(range(f0.num_blocks))
    rel = [stitch_evaluate(f1, f0, n, task0_test, baseline, catalog, classes) for n in idx]
    cka = cka_profile(f0, f1, probe_images) if probe_images is not None else None
    return StitchReport(
        idx,
        rel,
        baseline,
        cka,
        (f0.encoder_range.start, f0.encoder_range.stop),
        (f0.decoder_range.start, f0.decoder_range.stop),
    )


# ---------------------------------------------------------------------------
# decoder retraining


def decoder_retrain_accuracy(f1, joint_data, catalog, config, epochs=None, lr=None):
    """All-class mIoU before and after retraining the decoder on joint data.

    A copy of ``f1`` gets its encoder frozen (no gradients, BN in inference
    mode); decoder blocks and head are trained with SGD and cosine annealing
    starting at ``lr`` (default ``config.lr_first``).  Returns
    ``(miou_initial, miou_retrained, retrained_model)`` in percent.
    """
    from .trainer import train_task

    missing = set(catalog.class_ids) - set(f1.class_ids)
    if missing:
        raise ValueError(f"classifier lacks classes {sorted(missing)}")
    all_classes = list(catalog.class_ids)
    before = miou(confusion_matrix(f1, joint_data.test, catalog), all_classes)
    model = freeze_encoder(clone_model(f1))
    cfg = replace(config.first_task(), seed=config.seed)
    model, _ = train_task(model, joint_data, cfg, task_index=0, lr=lr or config.lr_first,
                          epochs=epochs or config.epochs, schedule="cosine")
    after = miou(confusion_matrix(model, joint_data.test, catalog), all_classes)
    return 100.0 * before.value, 100.0 * after.value, model


# ---------------------------------------------------------------------------
# CKA


def linear_cka(x, y):
    """Linear CKA between (N, D1) and (N, D2) activations; ``None`` if undefined.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`` with column-centred
    inputs.  Zero-variance inputs give ``None``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    xc = x - x.mean(0, keepdims=True)
    yc = y - y.mean(0, keepdims=True)
    nx = np.linalg.norm(xc.T @ xc)
    ny = np.linalg.norm(yc.T @ yc)
    if nx == 0 or ny == 0:
        return None
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (nx * ny))


def layer_activations(model, images, num_positions=512, seed=0, batch_size=32):
    """Per block, a (num_positions, channels) matrix of activations.

    Block outputs are flattened to (images * pixels, channels) rows; a
    fixed-seed subset of rows is kept per block so two models of the same
    architecture are compared at identical positions.
    """
    model.eval()
    outs = None
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            acts = model.block_outputs(to_tensor(images[s : s + batch_size]))
            rows = [a.permute(0, 2, 3, 1).reshape(-1, a.shape[1]).numpy() for a in acts]
            outs = rows if outs is None else [np.concatenate([o, r]) for o, r in zip(outs, rows)]
    picked = []
    for k, rows in enumerate(outs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        m = min(num_positions, len(rows))
        picked.append(rows[np.sort(rng.choice(len(rows), size=m, replace=False))].astype(np.float64))
    return picked


def cka_profile(f0, f1, probe_images, num_positions=512, seed=0):
    """Linear CKA between corresponding block outputs of ``f0`` and ``f1``."""
    if not _same_architecture(f0, f1):
        raise StitchIncompatibleError("CKA profile needs identical architectures")
    a0 = layer_activations(f0, probe_images, num_positions, seed)
    a1 = layer_activations(f1, probe_images, num_positions, seed)
    n = min(len(a0), len(a1))
    return [linear_cka(a0[k], a1[k]) for k in range(n)]


# ---------------------------------------------------------------------------
# classifier bias


@dataclass
class BiasProfile:
    class_ids: list
    bias: list
    groups: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def mean(self, group):
        vals = [b for b, g in zip(self.bias, self.groups) if g == group]
        return float(np.mean(vals)) if vals else None


def classifier_bias_profile(model, tasks, background_id=0):
    """Per-class bias of the final classifier, tagged ``background``/``old``/``new``.

    ``tasks`` is the task list; the last task's new classes are ``new``.
    """
    bias = model.head.bias.detach().cpu().numpy().astype(float).tolist()
    newest = tasks[-1].new_classes if tasks else frozenset()
    groups = []
    for c in model.class_ids:
        if c == background_id:
            groups.append("background")
        elif c in newest:
            groups.append("new")
        else:
            groups.append("old")
    return BiasProfile(list(model.class_ids), bias, groups)
