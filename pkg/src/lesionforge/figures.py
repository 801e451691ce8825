"""Static figures rendered from a finished run directory.

Everything is read back from disk (manifests, score CSVs, report.csv), so
figures can be re-rendered for any run without retraining.  Missing
artifacts produce a warning and the remaining figures are still written.
"""

from __future__ import annotations

import logging
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from lesionforge.blending import alpha_mask
from lesionforge.dataio import load_image, read_manifest
from lesionforge.errors import DataError
from lesionforge.metrics import roc_points
from lesionforge.patching import read_patch_manifest, resample
from lesionforge.seeding import derive_seed

log = logging.getLogger(__name__)


def _warn(message: str, notes: list[str]) -> None:
    warnings.warn(message, stacklevel=3)
    notes.append(message)


def save_mask_heatmap(path, side: int = 64, n: float = 2.0) -> Path:
    """Write the blending mask as a grayscale image: white is alpha = 1, black is alpha = 0."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, alpha_mask(side, side, n).alpha, cmap="gray", vmin=0.0, vmax=1.0)
    return path


def _triptych(path: Path, original, translated, blended, box, title: str) -> None:
    fig, axes = plt.subplots(2, 3, figsize=(7.5, 6), gridspec_kw={"height_ratios": [2, 1]})
    for ax, img, name in zip(axes[0], (original, translated, blended), ("original", "translated", "blended")):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        ax.set_title(name, fontsize=9)
    y0, y1, x0, x1 = box.y_min, box.y_max, box.x_min, box.x_max
    for ax, img in zip(axes[1], (original, translated, blended)):
        ax.imshow(img[y0:y1, x0:x1], cmap="gray", vmin=0, vmax=1)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    rect = matplotlib.patches.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False, edgecolor="tab:red", lw=1)
    axes[0, 2].add_patch(rect)
    fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_triptychs(run_dir, out_dir, count: int = 8, seed: int = 0, notes: list[str] | None = None) -> list[Path]:
    """Original / translated / blended panels for ``count`` sampled generated images.

    The translated panel shows the source image with the raw translator output
    pasted into the crop rectangle (no blending), so the three panels differ
    only inside the crop.
    """
    notes = notes if notes is not None else []
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    manifests = sorted((run_dir / "manifests").glob("generated_*.jsonl"))
    records = []
    for m in manifests:
        key = m.stem.removeprefix("generated_")
        gen = read_manifest(m).records
        translated_path = run_dir / "manifests" / f"translated_{key}.jsonl"
        translated = {p.patch_id: p for p in read_patch_manifest(translated_path)} if translated_path.exists() else {}
        records.extend((key, r, translated.get(r.extra.get("translated_patch"))) for r in gen)
    if not records:
        _warn("no generated images in run; triptychs skipped", notes)
        return []
    try:
        source = read_manifest(run_dir / "manifests" / "dataset.jsonl").by_id()
    except DataError as exc:
        _warn(f"dataset manifest unavailable ({exc}); triptychs skipped", notes)
        return []

    rng = np.random.default_rng(derive_seed(seed, "figures/triptych"))
    picks = sorted(rng.choice(len(records), size=min(count, len(records)), replace=False))
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k in picks:
        key, rec, patch = records[int(k)]
        src = source.get(rec.extra.get("source_image_id"))
        if src is None or patch is None:
            _warn(f"provenance for {rec.image_id} incomplete; triptych skipped", notes)
            continue
        original = load_image(src.path).pixels
        blended = load_image(rec.path).pixels
        r = patch.crop_rect
        translated = original.copy()
        translated[r.y_min : r.y_max, r.x_min : r.x_max] = np.clip(resample(load_image(patch.path).pixels, r.height, r.width), 0, 1)
        path = out_dir / f"triptych_{key}_{rec.image_id}.png"
        _triptych(path, original, translated, blended, r, f"{rec.image_id} ({key})")
        written.append(path)
    return written


def emit_roc_curves(run_dir, out_path, notes: list[str] | None = None) -> Path | None:
    """ROC curves on the test set for the baseline and every selected augmented row."""
    notes = notes if notes is not None else []
    run_dir = Path(run_dir)
    from lesionforge.pipeline import read_report, read_scores

    scores_dir = run_dir / "scores"
    curves = []
    if (scores_dir / "baseline_test.csv").exists():
        curves.append(("Baseline", scores_dir / "baseline_test.csv"))
    else:
        _warn("baseline test scores missing", notes)
    report = run_dir / "reports" / "report.csv"
    if report.exists():
        tags = {"Augmented": "augmented", "TL_G": "tl_g", "TL_G + TL_PL": "tl_g_pl", "TL_PL": "tl_pl"}
        for row in read_report(report):
            if row["selected"] == "1" and row["type"] in tags:
                path = scores_dir / f"{tags[row['type']]}_t{float(row['t']):.2f}_test.csv"
                if path.exists():
                    curves.append((f"{row['type']} (t={float(row['t']):.2f})", path))
                else:
                    _warn(f"scores for {row['type']} missing: {path.name}", notes)
    if not curves:
        _warn("no score files found; ROC figure skipped", notes)
        return None
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, path in curves:
        s = read_scores(path)
        _, tpr, fpr = roc_points(s.labels, s.scores)
        ax.plot(fpr, tpr, drawstyle="steps-post", label=name)
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def emit_threshold_ablation(run_dir, out_path, notes: list[str] | None = None) -> Path | None:
    """Bar chart of test AUC against the mining threshold t, one group per augmentation type."""
    notes = notes if notes is not None else []
    from lesionforge.pipeline import read_report

    report = Path(run_dir) / "reports" / "report.csv"
    if not report.exists():
        _warn("report.csv missing; threshold ablation skipped", notes)
        return None
    rows = read_report(report)
    candidates = [r for r in rows if r["selected"] == "0" and r["type"] != "Baseline"]
    if not candidates:
        _warn("report has no threshold candidates; ablation chart skipped", notes)
        return None
    types = list(dict.fromkeys(r["type"] for r in candidates))
    ts = sorted({float(r["t"]) for r in candidates})
    width = 0.8 / len(types)
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    x = np.arange(len(ts))
    for k, name in enumerate(types):
        by_t = {float(r["t"]): r for r in candidates if r["type"] == name}
        heights = [float(by_t[t]["auc"]) if t in by_t else np.nan for t in ts]
        bars = ax.bar(x + (k - (len(types) - 1) / 2) * width, heights, width, label=name)
        for bar, t in zip(bars, ts):
            if t in by_t:
                ax.annotate(by_t[t]["augmented_samples"], (bar.get_x() + bar.get_width() / 2, bar.get_height()), ha="center", va="bottom", fontsize=7)
    baseline = [r for r in rows if r["type"] == "Baseline"]
    if baseline:
        ax.axhline(float(baseline[0]["auc"]), color="k", lw=0.8, ls="--", label="Baseline")
    ax.set_xticks(x, [f"{t:.2f}" for t in ts])
    ax.set_xlabel("mining threshold t (bar label: augmented samples)")
    ax.set_ylabel("test AUC")
    lo = min([float(r["auc"]) for r in rows] + [1.0])
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def emit_figures(run_dir, out_dir=None, triptychs: int = 8, blend_n: float = 2.0, seed: int = 0) -> dict:
    """Render every figure the run's artifacts allow; returns ``{"written": [...], "notes": [...]}``."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataError(f"run directory not found: {run_dir}")
    out_dir = Path(out_dir) if out_dir else run_dir / "figures"
    notes: list[str] = []
    written = emit_triptychs(run_dir, out_dir, triptychs, seed, notes)
    written.append(save_mask_heatmap(out_dir / "mask_heatmap.png", n=blend_n))
    for path in (emit_roc_curves(run_dir, out_dir / "roc.png", notes), emit_threshold_ablation(run_dir, out_dir / "t_ablation.png", notes)):
        if path is not None:
            written.append(path)
    for note in notes:
        log.warning(note)
    return {"written": written, "notes": notes}
