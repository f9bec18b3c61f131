"""Run directories: generation, training, diagnostics, reports and run matrices.

A run lives in ``<root>/runs/<run_id>/``; ``run_id`` embeds the hash of the
run's canonical configuration, so repeating a command with the same
configuration finds the existing artifacts and skips the work.
"""

import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .config import PROBES, ExperimentConfig
from .metrics import confusion_matrix, group_mious
from .report import render_report
from .segnet import config_hash, load_snapshot, save_snapshot
from .taskstream import build_task_stream, generate_synthetic_dataset, load_dataset, make_tasks, save_dataset
from .trainer import RunRecord, run_sequence, train_first_task, train_offline

log = logging.getLogger(__name__)

MIOU_CONVENTION = "percent; classes absent from both truth and prediction are left out of the mean"


def output_root(cfg):
    return Path(os.environ.get("CISSBENCH_OUT") or cfg.output_dir)


def _write_json(path, obj):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, default=str))
    tmp.replace(path)


def _read_json(path):
    return json.loads(Path(path).read_text())


def load_data(cfg):
    """The full-catalog dataset for ``cfg`` (generated in memory or read from disk)."""
    if "path" in cfg.dataset:
        return load_dataset(cfg.dataset["path"])
    return generate_synthetic_dataset(cfg.scene_config())


def build_stream(cfg, dataset=None):
    dataset = dataset or load_data(cfg)
    tasks = make_tasks(cfg.tasks["splits"], cfg.regime)
    return build_task_stream(dataset, tasks, dataset.catalog, seed=cfg.seed)


# ---------------------------------------------------------------------------
# generate


def dataset_dir(cfg):
    ident = cfg.identity()["dataset"]
    return output_root(cfg) / "datasets" / config_hash(ident)


def cmd_generate(cfg, force=False):
    """Write the synthetic dataset to disk.  Returns ``(path, skipped)``."""
    if "path" in cfg.dataset:
        raise ValueError("dataset.path configs have nothing to generate")
    out = dataset_dir(cfg)
    if (out / "manifest.json").exists() and not force:
        log.info("dataset exists at %s; skipping", out)
        return out, True
    save_dataset(generate_synthetic_dataset(cfg.scene_config()), out)
    return out, False


# ---------------------------------------------------------------------------
# train


def _f0_key(cfg):
    ident = cfg.identity()
    first = cfg.train_config().first_task()
    # Everything that shapes task 0; the method is irrelevant there.
    return config_hash({"dataset": ident["dataset"], "tasks": ident["tasks"], "train": first.to_dict(),
                        "version": ident["version"]})


def cached_first_task(cfg, stream, force=False):
    """Task-0 model shared by every method with the same task-0 setup."""
    cache = output_root(cfg) / "cache"
    key = _f0_key(cfg)
    ckpt, rec_path = cache / f"f0-{key}.ckpt", cache / f"f0-{key}.json"
    if ckpt.exists() and rec_path.exists() and not force:
        model, _ = load_snapshot(ckpt)
        return model, RunRecord(**_read_json(rec_path))
    model, rec = train_first_task(stream, cfg.train_config())
    cache.mkdir(parents=True, exist_ok=True)
    save_snapshot(model, ckpt, task_index=0, config_hash=key)
    _write_json(rec_path, rec.to_dict())
    return model, rec


def run_dir(cfg):
    return output_root(cfg) / "runs" / cfg.run_id()


def _config_echo(cfg):
    return {
        "run_id": cfg.run_id(),
        "config_hash": cfg.hash(),
        "experiment": cfg.to_dict(),
        "resolved_train": cfg.train_config().to_dict(),
    }


def cmd_train(cfg, force=False):
    """Train the run described by ``cfg``.  Returns ``(run_dir, skipped)``."""
    out = run_dir(cfg)
    if (out / "metrics.json").exists() and not force:
        log.info("run %s exists; skipping", out.name)
        return out, True
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", _config_echo(cfg))
    tc = cfg.train_config()
    stream = build_stream(cfg)
    last = stream[len(stream) - 1]
    old, new = sorted(last.task.old_classes), sorted(last.task.new_classes)
    t0 = time.time()
    if cfg.method == "offline":
        model, rec = train_offline(stream.joint, tc)
        records, steps = [rec], []
        save_snapshot(model, out / "f1.ckpt", task_index=len(stream) - 1, method="offline", config_hash=cfg.hash())
        f1 = model
    else:
        f0 = cached_first_task(cfg, stream, force=force)
        res = run_sequence(stream, tc, f0=f0, diag_dir=out)
        records = res.records
        for t, m in enumerate(res.models):
            save_snapshot(m, out / f"f{t}.ckpt", task_index=t, method=cfg.method, config_hash=cfg.hash())
        steps = []
        for t, m in enumerate(res.models):
            cm_t = confusion_matrix(m, stream[t].test, stream.catalog)
            steps.append(group_mious(cm_t, sorted(stream[t].task.old_classes) or [0], sorted(stream[t].task.new_classes)))
        f1 = res.f1
    cm = confusion_matrix(f1, last.test, stream.catalog)
    final = group_mious(cm, old, new)
    fg_old = [c for c in old if c != stream.catalog.background_id]
    metrics = {
        "run_id": out.name,
        "config_hash": cfg.hash(),
        "method": cfg.method,
        "loss_kind": tc.loss_kind,
        "head_kind": tc.head_kind,
        "regime": cfg.regime,
        "seed": cfg.seed,
        "old_classes": old,
        "new_classes": new,
        "final": final,
        "miou_convention": MIOU_CONVENTION,
        "steps": steps,
        "background_rate_old": cm.background_rate(fg_old, stream.catalog.background_id),
        "records": [r.to_dict() for r in records],
        "wall_time": time.time() - t0,
        "diagnostics": {},
    }
    (out / "confusion_f1.csv").write_text(cm.to_csv())
    _write_json(out / "metrics.json", metrics)
    return out, False


# ---------------------------------------------------------------------------
# diagnose


def load_run(run_dir_):
    """``(cfg, metrics)`` of an existing run directory."""
    run_dir_ = Path(run_dir_)
    if not (run_dir_ / "config.json").exists():
        raise FileNotFoundError(f"{run_dir_} is not a run directory (config.json missing)")
    echo = _read_json(run_dir_ / "config.json")
    cfg = ExperimentConfig.from_dict(echo["experiment"])
    mp = run_dir_ / "metrics.json"
    if not mp.exists():
        raise FileNotFoundError(f"{run_dir_} has no metrics.json; train it first")
    return cfg, _read_json(mp)


def cmd_diagnose(run_dir_, probes=None, force=False):
    """Run the requested probes on a trained run; returns the written file names.

    Probes already recorded in ``metrics.json`` are skipped unless ``force``.
    Stitching and CKA need f0, so they are skipped for offline runs.
    """
    run_dir_ = Path(run_dir_)
    cfg, metrics = load_run(run_dir_)
    probes = list(probes or cfg.diagnostics.get("probes", PROBES))
    bad = [p for p in probes if p not in PROBES]
    if bad:
        from .config import ConfigError

        raise ConfigError(f"unknown probes {bad}", PROBES)
    dcfg = cfg.diagnostics
    done = set(metrics["diagnostics"].get("done", []))
    todo = [p for p in probes if force or p not in done]
    if not todo:
        log.info("all probes already recorded for %s; skipping", run_dir_.name)
        return []
    stream = build_stream(cfg)
    last = stream[len(stream) - 1]
    cat = stream.catalog
    f1, _ = load_snapshot(run_dir_ / "f1.ckpt")
    has_f0 = (run_dir_ / "f0.ckpt").exists()
    f0 = load_snapshot(run_dir_ / "f0.ckpt")[0] if has_f0 else None
    task0 = stream[0]
    classes0 = sorted(task0.task.seen_classes)
    written, skipped = [], metrics["diagnostics"].setdefault("skipped", {})
    probe_imgs = task0.test.images[:16]

    if "confusion" in todo:
        cm1 = confusion_matrix(f1, last.test, cat)
        (run_dir_ / "confusion_f1.csv").write_text(cm1.to_csv())
        written.append("confusion_f1.csv")
        if f0 is not None:
            cm0 = confusion_matrix(f0, task0.test, cat)
            (run_dir_ / "confusion_f0.csv").write_text(cm0.to_csv())
            written.append("confusion_f0.csv")
    if ("stitch" in todo or "cka" in todo) and f0 is None:
        for p in ("stitch", "cka"):
            if p in todo:
                skipped[p] = "no f0 checkpoint (offline run)"
    elif "stitch" in todo:
        rep = diag.stitch_profile(f1, f0, task0.test, cat, classes0,
                                  probe_images=probe_imgs if "cka" in probes else None)
        _write_json(run_dir_ / "stitch.json", rep.to_dict())
        written.append("stitch.json")
        metrics["diagnostics"]["stitch"] = {
            "encoder_first_quarter_mean": float(np.mean(_first_quarter(rep))),
            "decoder_mean": float(np.mean(rep.decoder_values())),
        }
    if "cka" in todo and f0 is not None:
        cka = diag.cka_profile(f0, f1, probe_imgs, dcfg.get("cka_positions", 512))
        _write_json(run_dir_ / "cka.json", {"indices": list(range(len(cka))), "cka": cka})
        written.append("cka.json")
    if "bias" in todo:
        prof = diag.classifier_bias_profile(f1, stream.tasks, cat.background_id)
        _write_json(run_dir_ / "bias.json", prof.to_dict())
        written.append("bias.json")
        metrics["diagnostics"]["bias"] = {"new_mean": prof.mean("new"), "old_mean": prof.mean("old"),
                                          "background": prof.mean("background")}
    if "retrain" in todo:
        tc = cfg.train_config()
        before, after, _ = diag.decoder_retrain_accuracy(
            f1, stream.joint, cat, tc, epochs=dcfg.get("retrain_epochs"), lr=dcfg.get("retrain_lr"))
        metrics["diagnostics"]["decoder_retrain"] = {"miou_initial": round(before, 6), "miou_retrained": round(after, 6)}
    if "predictions" in todo:
        k = int(dcfg.get("prediction_samples", 4))
        imgs = last.test.images[:k]
        arrays = {"image": imgs, "truth": last.test.labels[:k]}
        from .segnet import predict

        arrays["f1"] = predict(f1, imgs)
        if f0 is not None:
            arrays["f0"] = predict(f0, imgs)
            for n in (f0.decoder_range.start - 1, f0.decoder_range.start):
                arrays[f"stitch_{n:02d}"] = diag.stitched_predict(f1, f0, n, imgs)
        np.savez_compressed(run_dir_ / "predictions.npz", **arrays)
        written.append("predictions.npz")
    if todo:
        metrics["diagnostics"]["done"] = sorted(done | set(todo))
        _write_json(run_dir_ / "metrics.json", metrics)
        written.append("metrics.json")
    return written


def _first_quarter(rep):
    lo, hi = rep.encoder_range
    q = max(1, (hi - lo) // 4)
    return [v for i, v in zip(rep.indices, rep.relative_miou) if lo <= i < lo + q]


# ---------------------------------------------------------------------------
# report and matrix


def cmd_report(run_dirs, out_dir):
    return render_report(run_dirs, out_dir)


def matrix_configs(cfg, methods, regimes, losses, heads=("standard",)):
    """One config per method x regime x loss x head combination."""
    out = []
    for regime in regimes:
        for loss in losses:
            for head in heads:
                for method in methods:
                    raw = cfg.to_dict()
                    raw["tasks"] = dict(raw["tasks"], regime=regime)
                    raw["train"] = dict(raw["train"], method=method, loss_kind=loss, head_kind=head)
                    out.append(ExperimentConfig.from_dict(raw))
    return out


def cmd_matrix(cfg, methods, regimes, losses, heads=("standard",), force=False, probes=None, report_dir=None):
    """Train (and optionally diagnose) a run grid and render one summary.

    Returns ``(run_dirs, report_dir)``.
    """
    dirs = []
    for c in matrix_configs(cfg, methods, regimes, losses, heads):
        d, _ = cmd_train(c, force=force)
        if probes:
            cmd_diagnose(d, probes, force=force)
        dirs.append(d)
    key = config_hash({"runs": sorted(d.name for d in dirs)})
    report_dir = Path(report_dir) if report_dir else output_root(cfg) / "reports" / f"matrix-{key}"
    cmd_report(dirs, report_dir)
    return dirs, report_dir


def with_seed(cfg, seed):
    raw = cfg.to_dict()
    raw["seed"] = seed
    return ExperimentConfig.from_dict(raw)


def with_train(cfg, **overrides):
    raw = cfg.to_dict()
    raw["train"] = dict(raw["train"], **overrides)
    return ExperimentConfig.from_dict(raw)


__all__ = [
    "build_stream",
    "cached_first_task",
    "cmd_diagnose",
    "cmd_generate",
    "cmd_matrix",
    "cmd_report",
    "cmd_train",
    "load_data",
    "load_run",
    "matrix_configs",
    "output_root",
    "run_dir",
    "with_seed",
    "with_train",
]
