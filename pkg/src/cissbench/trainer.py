"""Sequential task training, the offline baseline and hyperparameter selection."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import clmethods, kernels
from .metrics import confusion_matrix, group_mious, miou
from .segnet import MiniSeg, clone_model, config_hash, extend_classifier, save_snapshot, to_tensor

log = logging.getLogger(__name__)

METHODS = ("finetune", "ewc", "mas", "lwf", "replay")
LOSS_KINDS = ("ce", "unce")


class TrainingDivergedError(RuntimeError):
    pass


class ContextError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_first: float = 0.07
    lr_later: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 3e-4
    epochs: int = 30
    batch_size: int = 8
    plateau_patience: int = 8
    plateau_factor: float = 0.5
    grad_clip_norm: float = None
    method: str = "finetune"
    loss_kind: str = "ce"
    head_kind: str = "standard"
    lam: float = 0.0
    temperature: float = 2.0
    seed: int = 0
    replay_capacity: int = 20
    width: int = 16
    init_std: float = 0.1
    hflip: bool = True
    importance_batches: int = None

    def __post_init__(self):
        from .segnet import HEAD_KINDS

        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss_kind!r}; valid: {', '.join(LOSS_KINDS)}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head_kind!r}; valid: {', '.join(HEAD_KINDS)}")
        for name in ("lr_first", "lr_later", "epochs", "batch_size", "plateau_patience", "plateau_factor", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.momentum < 0 or self.weight_decay < 0 or self.lam < 0:
            raise ValueError("momentum, weight_decay and lam must be >= 0")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive when set")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self):
        return config_hash(self.to_dict())

    def first_task(self):
        """Config for task 0, where no method term is active yet.

        UNCE with only the background as old class is plain cross-entropy,
        so every method shares the same task-0 training.
        """
        return replace(self, method="finetune", loss_kind="ce", lam=0.0, grad_clip_norm=None)


class PlateauHalver:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer, patience=8, factor=0.5, rel_threshold=1e-4):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.rel_threshold = rel_threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss):
        if loss < self.best * (1 - self.rel_threshold):
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for g in self.optimizer.param_groups:
                g["lr"] *= self.factor
            self.bad_epochs = 0
            return True
        return False


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    config_hash: str = ""
    wall_time: float = 0.0
    task_index: int = 0

    @property
    def train_losses(self):
        return [e["train_loss"] for e in self.epochs]

    @property
    def val_losses(self):
        return [e["val_loss"] for e in self.epochs]

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainContext:
    old_model: object = None
    importance: object = None
    buffer: object = None
    old_classes: tuple = ()


def seed_everything(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _channel_lut(class_ids, ignore_id=255):
    lut = np.full(256, ignore_id, dtype=np.uint8)
    for k, c in enumerate(class_ids):
        lut[c] = k
    return lut


def _check_context(config, context, task_index):
    if task_index == 0:
        return
    m = config.method
    if m == "lwf" and context.old_model is None:
        raise ContextError("lwf needs the previous model in the context")
    if m in ("ewc", "mas"):
        if context.importance is None:
            raise ContextError(f"{m} needs an importance estimate for task {task_index}")
        if context.importance.method != m:
            raise ContextError(f"importance was estimated for {context.importance.method}, not {m}")
    if m == "replay" and context.buffer is None:
        raise ContextError("replay needs a buffer")


def _base_loss(config, logits, y, old_channels):
    if config.loss_kind == "unce" and old_channels:
        return clmethods.unbiased_cross_entropy(logits, y, old_channels)
    return clmethods.cross_entropy(logits, y)


def evaluate_loss(model, dataset, config, old_channels=(), batch_size=32):
    """Pixel-weighted mean of the base loss over ``dataset`` in inference mode."""
    if len(dataset) == 0:
        return None
    lut = _channel_lut(model.class_ids)
    was = model.training
    model.eval()
    tot, n = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(dataset), batch_size):
            x = to_tensor(dataset.images[s : s + batch_size])
            y = torch.from_numpy(kernels.remap_labels(dataset.labels[s : s + batch_size], lut).astype(np.int64))
            if config.loss_kind == "unce" and old_channels:
                loss, k = clmethods.unbiased_cross_entropy(model(x), y, old_channels, return_support=True)
            else:
                loss, k = clmethods.cross_entropy(model(x), y, return_support=True)
            tot += float(loss) * k
            n += k
    model.train(was)
    return tot / n if n else 0.0


def train_task(model, task_data, config, context=None, task_index=0, lr=None, epochs=None, schedule="plateau",
               diag_dir=None, epoch_hook=None):
    """Train ``model`` in place on one task and return ``(model, RunRecord)``.

    The total loss is the base loss (``ce`` or ``unce``) plus the method term:
    a quadratic penalty for ``ewc``/``mas``, ``lam`` times the background-masked
    distillation for ``lwf``; ``replay`` swaps a quarter of every batch for
    buffer samples.  SGD with momentum and weight decay; the learning rate is
    halved on validation plateaus (``schedule="plateau"``) or follows a
    cosine annealing curve (``schedule="cosine"``).

    ``epoch_hook(epoch, val_loss) -> val_loss`` may override the validation
    loss fed to the scheduler (used by schedule tests).
    """
    context = context or TrainContext()
    _check_context(config, context, task_index)
    lr = config.lr_first if lr is None else lr
    epochs = config.epochs if epochs is None else epochs
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, task_index, 11]))
    replay_rng = np.random.default_rng(np.random.SeedSequence([config.seed, task_index, 23]))
    lut = _channel_lut(model.class_ids)
    old_channels = [model.class_ids.index(c) for c in sorted(context.old_classes) if c in model.class_ids]
    bg_channel = model.class_ids.index(0)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)
    if schedule == "plateau":
        sched = PlateauHalver(opt, config.plateau_patience, config.plateau_factor)
    elif schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    else:
        raise ValueError(f"unknown schedule {schedule!r}")

    use_replay = config.method == "replay" and context.buffer is not None and len(context.buffer) > 0
    n_rep = clmethods.replay_share(config.batch_size) if use_replay else 0
    n_cur = config.batch_size - n_rep
    use_penalty = config.method in ("ewc", "mas") and task_index > 0 and context.importance is not None
    use_kd = config.method == "lwf" and task_index > 0 and context.old_model is not None
    if use_kd:
        context.old_model.eval()
    named = dict(model.named_parameters())

    data = task_data.train
    n = len(data)
    if n == 0:
        raise ValueError("empty training split")
    record = RunRecord(config_hash=config.hash(), task_index=task_index)
    t0 = time.time()
    model.train()
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        tot, batches = 0.0, 0
        for s in range(0, n, n_cur):
            idx = perm[s : s + n_cur]
            images = data.images[idx]
            labels = data.labels[idx]
            if n_rep:
                extra = context.buffer.sample(n_rep, replay_rng)
                images = np.concatenate([images, extra[0]])
                labels = np.concatenate([labels, extra[1]])
            if config.hflip:
                flip = rng.random(len(images)) < 0.5
                images = np.where(flip[:, None, None, None], images[:, :, ::-1], images)
                labels = np.where(flip[:, None, None], labels[:, :, ::-1], labels)
            x = to_tensor(images)
            y = torch.from_numpy(kernels.remap_labels(np.ascontiguousarray(labels), lut).astype(np.int64))
            logits = model(x)
            loss = _base_loss(config, logits, y, old_channels)
            if use_penalty:
                loss = loss + clmethods.quadratic_penalty(named, context.importance, config.lam)
            if use_kd:
                with torch.no_grad():
                    old_logits = context.old_model(x)
                loss = loss + config.lam * clmethods.masked_distillation(
                    logits, old_logits, y, config.temperature, bg_channel
                )
            if not torch.isfinite(loss):
                if diag_dir is not None:
                    save_snapshot(model, Path(diag_dir) / f"diverged_t{task_index}_e{epoch}.ckpt",
                                  task_index=task_index, epoch=epoch, reason="non-finite loss")
                raise TrainingDivergedError(f"non-finite loss at task {task_index}, epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
            opt.step()
            tot += float(loss.detach())
            batches += 1
        val_loss = evaluate_loss(model, task_data.val, config, old_channels)
        if epoch_hook is not None:
            val_loss = epoch_hook(epoch, val_loss)
        cur_lr = opt.param_groups[0]["lr"]
        reduced = False
        if schedule == "plateau":
            if val_loss is not None:
                reduced = sched.step(val_loss)
        else:
            sched.step()
        record.epochs.append(
            {"epoch": epoch, "train_loss": tot / batches, "val_loss": val_loss, "lr": cur_lr, "lr_reduced": reduced}
        )
        log.debug("task %d epoch %d loss %.4f val %s", task_index, epoch, tot / batches, val_loss)
    model.eval()
    record.wall_time = time.time() - t0
    return model, record


def build_model(num_classes_or_ids, config, in_size):
    seed_everything(config.seed)
    ids = list(range(num_classes_or_ids)) if isinstance(num_classes_or_ids, int) else list(num_classes_or_ids)
    return MiniSeg(ids, config.width, config.head_kind, config.init_std, in_size)


@dataclass
class SequenceResult:
    models: list
    records: list
    importance: object = None
    buffer: object = None
    config: TrainConfig = None

    @property
    def f0(self):
        return self.models[0]

    @property
    def f1(self):
        return self.models[-1]


def train_first_task(stream, config):
    step = stream[0]
    model = build_model(sorted(step.task.seen_classes), config, step.train.image_size)
    return train_task(model, step, config.first_task(), task_index=0, lr=config.lr_first)


def run_sequence(stream, config, f0=None, diag_dir=None):
    """Train every task of ``stream`` in order.

    ``f0`` may supply an already trained task-0 model (with its record) as a
    ``(model, RunRecord)`` pair; it is cloned, never modified.  Importance
    estimation and buffer population happen on task t's training split
    after task t is trained, before the head is extended.  For longer
    sequences the importance estimate is replaced at every step.
    """
    if len(stream) < 2:
        raise ValueError("a sequence needs at least two tasks")
    if f0 is None:
        model, rec0 = train_first_task(stream, config)
    else:
        model, rec0 = clone_model(f0[0]), f0[1]
        model.eval()
    models = [clone_model(model)]
    records = [rec0]
    importance = None
    buffer = clmethods.ReplayBuffer(config.replay_capacity) if config.method == "replay" else None
    for t in range(1, len(stream)):
        prev = stream[t - 1]
        if config.method in ("ewc", "mas"):
            importance = clmethods.estimate_importance(model, prev.train, config.method, config.importance_batches)
        if buffer is not None:
            buf_rng = np.random.default_rng(np.random.SeedSequence([config.seed, t, 31]))
            buffer.populate(prev.train, sorted(prev.task.new_classes), sorted(prev.task.seen_classes), buf_rng)
        old_model = clone_model(model).eval() if config.method == "lwf" else None
        step = stream[t]
        gen = torch.Generator().manual_seed(config.seed * 1000 + t)
        extend_classifier(model, step.task.new_classes, gen)
        ctx = TrainContext(old_model, importance, buffer, tuple(sorted(step.task.old_classes)))
        model, rec = train_task(model, step, config, ctx, task_index=t, lr=config.lr_later, diag_dir=diag_dir)
        models.append(clone_model(model))
        records.append(rec)
    return SequenceResult(models, records, importance, buffer, config)


def train_offline(joint_data, config, in_size=None):
    """Single-step training on all classes with ``lr_first``."""
    cfg = config.first_task()
    in_size = in_size or joint_data.train.image_size
    model = build_model(sorted(joint_data.task.seen_classes), cfg, in_size)
    return train_task(model, joint_data, cfg, task_index=0, lr=cfg.lr_first)


def sequence_metrics(result, stream):
    """Old/new/all mIoU of every model on its cumulative test set."""
    out = []
    for t, model in enumerate(result.models):
        step = stream[t]
        cm = confusion_matrix(model, step.test, stream.catalog)
        out.append(group_mious(cm, sorted(step.task.old_classes) or [0], sorted(step.task.new_classes)))
    return out


# ---------------------------------------------------------------------------
# continual hyperparameter selection


def select_hyperparameters(method, grid, stream, base_config, f0=None):
    """Two-stage search: learning rate first, then the method strength.

    Stage 1 fine-tunes with every ``grid["lr"]`` value (method term off) and
    keeps the one with the best new-class mIoU on the last task's selection
    split.  Stage 2 fixes that rate and picks ``grid["lam"]`` by all-class
    mIoU.  Axes with one value are taken as given without training.  A
    candidate whose training diverges scores ``None`` and is never chosen.
    Returns ``(config, trace)``.
    """
    lrs = list(grid.get("lr", []))
    lams = list(grid.get("lam", []))
    if not lrs and not lams:
        raise ValueError("empty hyperparameter grid")
    cfg = replace(base_config, method=method)
    trace = {"stage1": {}, "stage2": {}}
    last = stream[len(stream) - 1]
    new = sorted(last.task.new_classes)
    seen = sorted(last.task.seen_classes)
    if len(lrs) > 1 or len(lams) > 1:
        f0 = f0 or train_first_task(stream, cfg)

    def score(c, classes):
        try:
            res = run_sequence(stream, c, f0=f0)
        except TrainingDivergedError as e:
            log.warning("candidate %s diverged: %s", {"lr_later": c.lr_later, "lam": c.lam}, e)
            return None
        cm = confusion_matrix(res.f1, last.select, stream.catalog)
        return miou(cm, classes).value

    def best(values, trace_stage):
        ok = [v for v in values if trace_stage[v] is not None]
        if not ok:
            raise TrainingDivergedError("every candidate diverged")
        return max(ok, key=lambda v: (trace_stage[v], -values.index(v)))

    if len(lrs) == 1:
        cfg = replace(cfg, lr_later=lrs[0])
    elif lrs:
        for lr in lrs:
            trace["stage1"][lr] = score(replace(cfg, method="finetune", lam=0.0, lr_later=lr), new)
        cfg = replace(cfg, lr_later=best(lrs, trace["stage1"]))
    if len(lams) == 1:
        cfg = replace(cfg, lam=lams[0])
    elif lams:
        for lam in lams:
            trace["stage2"][lam] = score(replace(cfg, lam=lam), seen)
        cfg = replace(cfg, lam=best(lams, trace["stage2"]))
    return cfg, trace
