"""Plots and summary tables rendered from persisted run artifacts.

Nothing here recomputes a metric: every number is read from ``metrics.json``
or one of the diagnostic files written next to it.
"""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ConfusionMatrix  # noqa: E402

PLOT_FORMATS = ("png", "svg")

# Fixed palette for prediction maps; 255 (ignore) renders white.
_PALETTE = np.array(
    [
        [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
        [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
        [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195], [128, 128, 0],
        [255, 215, 180], [0, 0, 128], [128, 128, 128],
    ],
    dtype=np.uint8,
)


def colorize(labels):
    lut = np.full((256, 3), 255, dtype=np.uint8)
    lut[:255] = _PALETTE[np.arange(255) % len(_PALETTE)]
    return lut[labels]


def _save(fig, out, stem):
    paths = []
    for ext in PLOT_FORMATS:
        p = out / f"{stem}.{ext}"
        fig.savefig(p, dpi=110, bbox_inches="tight")
        paths.append(p)
    plt.close(fig)
    return paths


def plot_confusion(cm, out, stem, title=""):
    counts = cm.counts.astype(float)
    rows = counts.sum(1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(norm, cmap="viridis", vmin=0, vmax=1)
    ax.set_xticks(range(len(cm.class_names)), cm.class_names, rotation=90, fontsize=7)
    ax.set_yticks(range(len(cm.class_names)), cm.class_names, fontsize=7)
    ax.set_xlabel("prediction")
    ax.set_ylabel("ground truth")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, out, stem)


def plot_stitch(stitch_by_run, out, stem):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    enc = None
    for label, rep in stitch_by_run.items():
        ax.plot(rep["indices"], rep["relative_miou"], marker="o", label=f"{label} stitch")
        if rep.get("cka"):
            cka = [np.nan if v is None else 100.0 * v for v in rep["cka"]]
            ax.plot(rep["indices"], cka, linestyle="--", label=f"{label} CKA x100")
        enc = rep.get("encoder_range") or enc
    if enc:
        ax.axvspan(enc[0] - 0.5, enc[1] - 0.5, color="grey", alpha=0.15)
    ax.set_xlabel("cut index n")
    ax.set_ylabel("relative mIoU (%)")
    ax.legend(fontsize=7)
    return _save(fig, out, stem)


def plot_bias(bias_by_run, out, stem):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    n_runs = max(len(bias_by_run), 1)
    width = 0.8 / n_runs
    for k, (label, prof) in enumerate(bias_by_run.items()):
        x = np.arange(len(prof["bias"])) + k * width
        ax.bar(x, prof["bias"], width=width, label=label)
    if bias_by_run:
        first = next(iter(bias_by_run.values()))
        ax.set_xticks(np.arange(len(first["class_ids"])) + 0.4 - width / 2, first["class_ids"])
    ax.set_xlabel("class id")
    ax.set_ylabel("classifier bias")
    ax.legend(fontsize=7)
    return _save(fig, out, stem)


def plot_predictions(preds, out, stem, max_rows=4):
    keys = [k for k in ("image", "truth", "f0", "f1") if k in preds] + sorted(
        k for k in preds if k.startswith("stitch_")
    )
    n = min(max_rows, len(preds["truth"])) if "truth" in preds else 0
    fig, axes = plt.subplots(max(n, 1), len(keys), figsize=(1.6 * len(keys), 1.6 * max(n, 1)), squeeze=False)
    for r in range(n):
        for c, k in enumerate(keys):
            a = preds[k][r]
            axes[r, c].imshow(a if k == "image" else colorize(a))
            axes[r, c].axis("off")
            if r == 0:
                axes[r, c].set_title(k, fontsize=7)
    return _save(fig, out, stem)


def _read_json(p):
    return json.loads(Path(p).read_text())


def summary_rows(metrics_by_run):
    rows = []
    for run_id, m in metrics_by_run.items():
        final = m.get("final", {})
        diag = m.get("diagnostics", {})
        rows.append(
            {
                "run": run_id,
                "method": m.get("method"),
                "loss": m.get("loss_kind"),
                "head": m.get("head_kind"),
                "regime": m.get("regime"),
                "seed": m.get("seed"),
                "old": final.get("old"),
                "new": final.get("new"),
                "all": final.get("all"),
                "miou_I": diag.get("decoder_retrain", {}).get("miou_initial"),
                "miou_R": diag.get("decoder_retrain", {}).get("miou_retrained"),
            }
        )
    return rows


def _fmt(v):
    if v is None:
        return "missing"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_summary(rows, out):
    cols = ["run", "method", "loss", "head", "regime", "seed", "old", "new", "all", "miou_I", "miou_R"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r[c]) for c in cols) + " |")
    path = out / "summary.md"
    path.write_text("\n".join(lines) + "\n")
    (out / "summary.json").write_text(json.dumps(rows, indent=2))
    return path


def table1_layout(rows):
    """Methods as rows; old/new/all per regime as columns (Table-1 shape)."""
    regimes = [g for g in ("overlapped", "disjoint", "full_disjoint") if any(r["regime"] == g for r in rows)]
    methods = []
    for r in rows:
        key = r["method"] if r["loss"] in (None, "ce") else f"{r['method']}+{r['loss']}"
        if r.get("head") == "weight_normalized":
            key += "+wn"
        if key not in methods:
            methods.append(key)
    header = "| method | " + " | ".join(f"{g} old | {g} new | {g} all" for g in regimes) + " |"
    lines = [header, "|" + "---|" * (1 + 3 * len(regimes))]
    for m in methods:
        cells = []
        for g in regimes:
            hit = [
                r for r in rows
                if r["regime"] == g and (r["method"] if r["loss"] in (None, "ce") else f"{r['method']}+{r['loss']}")
                + ("+wn" if r.get("head") == "weight_normalized" else "") == m
            ]
            r = hit[0] if hit else {}
            cells += [_fmt(r.get("old")), _fmt(r.get("new")), _fmt(r.get("all"))]
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_report(run_dirs, out_dir):
    """Write plots and summary tables for ``run_dirs`` into ``out_dir``.

    Missing artifacts are listed in ``missing.txt`` and as placeholders in
    the summary; the report is still produced.  Returns the list of written
    files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    missing, written = [], []
    metrics, stitch, bias = {}, {}, {}
    run_dirs = [Path(d) for d in run_dirs]
    for d in run_dirs:
        rid = d.name
        mp = d / "metrics.json"
        if mp.exists():
            metrics[rid] = _read_json(mp)
        else:
            missing.append(f"{rid}: metrics.json")
        for name, store in (("stitch.json", stitch), ("bias.json", bias)):
            p = d / name
            if p.exists():
                store[rid] = _read_json(p)
            else:
                missing.append(f"{rid}: {name}")
        cp = d / "confusion_f1.csv"
        if cp.exists():
            cm = ConfusionMatrix.from_csv(cp.read_text())
            written += plot_confusion(cm, out, f"confusion_{rid}", rid)
        else:
            missing.append(f"{rid}: confusion_f1.csv")
        pp = d / "predictions.npz"
        if pp.exists():
            with np.load(pp) as z:
                written += plot_predictions({k: z[k] for k in z.files}, out, f"predictions_{rid}")
        else:
            missing.append(f"{rid}: predictions.npz")
    if stitch:
        written += plot_stitch(stitch, out, "stitch_profiles")
    else:
        missing.append("stitch profiles")
    if bias:
        written += plot_bias(bias, out, "bias_values")
    else:
        missing.append("bias profiles")
    rows = summary_rows(metrics)
    written.append(write_summary(rows, out))
    if rows:
        t1 = out / "table1.md"
        t1.write_text(table1_layout(rows))
        written.append(t1)
    if not run_dirs:
        missing.append("no run directories given")
    (out / "missing.txt").write_text("\n".join(missing) + ("\n" if missing else ""))
    if missing:
        with open(out / "summary.md", "a") as fh:
            fh.write("\n## missing\n\n" + "\n".join(f"- {m}" for m in missing) + "\n")
    return written
