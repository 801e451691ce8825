"""Stage functions and the end-to-end experiment runner.

Run directory layout::

    run_dir/
      config.yaml        resolved configuration
      data/images/       synthetic empirical images
      patches/           lesion, non-lesion and source patches at model size
      translated/        translator outputs at model size
      generated/         blended full images (provenance=generated)
      manifests/         every image and patch manifest
      checkpoints/       translator and classifier checkpoints
      scores/            per-model score CSVs (image_id, label, score)
      reports/           report.csv / report.json, mining reports, loss curves
      figures/           rendered figures
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from lesionforge import classifier as clf
from lesionforge.blending import alpha_mask, blend, paste_back
from lesionforge.config import TRANSFER_MODES, ExperimentConfig, dump_config
from lesionforge.dataio import (
    LESION,
    BoundingBox,
    DatasetManifest,
    DatasetRecord,
    generate_synthetic_dataset,
    load_image,
    manifest_summary,
    save_image,
    write_manifest,
)
from lesionforge.errors import DataError
from lesionforge.metrics import ScoredSet, bootstrap_indices, evaluate_model, roc_auc
from lesionforge.patching import (
    PatchConfig,
    PatchRecord,
    crop_lesion_patch,
    crop_matched_patch,
    intensity_filter,
    match_nonlesion_images,
    resample,
    resample_to_model_size,
    write_patch_manifest,
)
from lesionforge.pseudolabel import (
    build_augmented_manifest,
    partition_by_score,
    select_threshold,
    write_mining_report,
)
from lesionforge.seeding import derive_seed
from lesionforge.translation import (
    LESION as T_LESION,
)
from lesionforge.translation import (
    NON_LESION as T_NON_LESION,
)
from lesionforge.translation import (
    SharedLatentTranslator,
    load_translator,
    save_translator,
    train_translator,
    translate,
)

log = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "type",
    "t",
    "augmented_samples",
    "auc",
    "ci_low",
    "ci_high",
    "auc_ci",
    "significant",
    "diff_ci_low",
    "diff_ci_high",
    "sensitivity",
    "specificity",
    "op",
    "val_auc",
    "selected",
    "scorer_id",
    "translator_id",
    "bootstrap_B",
    "config_hash",
    "checkpoint_hash",
    "train_manifest_hash",
    "test_manifest_hash",
]


@dataclass
class RunLayout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def __getattr__(self, name):
        if name in ("data", "patches", "translated", "generated", "manifests", "checkpoints", "scores", "reports", "figures"):
            return self.root / name
        raise AttributeError(name)

    def make(self) -> None:
        for name in ("data", "patches", "translated", "generated", "manifests", "checkpoints", "scores", "reports", "figures"):
            (self.root / name).mkdir(parents=True, exist_ok=True)


@contextmanager
def run_lock(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise DataError(f"run directory {root} is locked by another run (remove {lock} if stale)") from exc
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: ExperimentConfig, layout: RunLayout, family: str | None = None) -> DatasetManifest:
    synth = dataclasses.replace(cfg.synth, seed=derive_seed(cfg.seed, "synth"))
    if family:
        synth.family = family
    manifest = generate_synthetic_dataset(synth, layout.data, layout.manifests / "dataset.jsonl")
    log.info("synthesized %d images: %s", len(manifest), manifest_summary(manifest))
    return manifest


def _save_patch(patch, side: int, path: Path, record_kwargs: dict) -> PatchRecord:
    small = resample_to_model_size(patch, side)
    save_image(small.pixels, path)
    extra = {"box": patch.box.to_list()} if patch.box is not None else {}
    return PatchRecord(
        path=str(path.resolve()),
        domain=patch.domain,
        source_image_id=patch.source_image_id,
        crop_rect=patch.crop_rect,
        scale_factor_used=patch.scale_factor_used,
        clamped=patch.clamped,
        contains_box=patch.contains_box,
        extra=extra,
        **record_kwargs,
    )


def patchify(manifest: DatasetManifest, pcfg: PatchConfig, seed: int, out_dir: Path, side: int | None = None):
    """Cut translator training patches and the source patches to be translated.

    * ``lesion``: ``patches_per_box`` random crops around every box of every
      train lesion image.
    * ``non-lesion``: for each train lesion image, its ``n`` most similar
      train negatives cropped at the lesion's (rescaled) annotation.
    * ``source``: one crop per source-split negative, placed at the
      annotation of its most similar train lesion image.

    Non-lesion and source patches with mean intensity below the threshold are
    dropped.  Returns ``{"lesion": [...], "non-lesion": [...], "source": [...]}``.
    """
    pcfg.validate()
    side = side or pcfg.model_input_side
    out_dir = Path(out_dir)
    lesions = [r for r in manifest.split("train") if r.is_lesion]
    negatives = [r for r in manifest.split("train") if not r.is_lesion]
    sources = [r for r in manifest.split("source") if not r.is_lesion]
    cache: dict[str, object] = {}

    def img(rec):
        if rec.image_id not in cache:
            cache[rec.image_id] = load_image(rec.path)
        return cache[rec.image_id]

    out = {"lesion": [], "non-lesion": [], "source": []}
    dropped = 0
    for rec in lesions:
        for b, box in enumerate(rec.boxes):
            for k in range(pcfg.patches_per_box):
                rng = np.random.default_rng(derive_seed(seed, f"patch/lesion/{rec.image_id}/{b}/{k}"))
                patch = crop_lesion_patch(img(rec), box, pcfg.s, rng, source_id=rec.image_id)
                pid = f"{rec.image_id}-b{b}-p{k}"
                out["lesion"].append(
                    _save_patch(patch, side, out_dir / "lesion" / f"{pid}.png", dict(patch_id=pid, body_part=rec.body_part))
                )
        rng = np.random.default_rng(derive_seed(seed, f"patch/match/{rec.image_id}"))
        for neg in match_nonlesion_images(rec, negatives, pcfg.n, rng):
            patch = crop_matched_patch(img(neg), rec.boxes[0], pcfg.s, rng, (rec.height, rec.width), source_id=neg.image_id)
            if not intensity_filter(patch, pcfg.intensity_threshold):
                dropped += 1
                continue
            pid = f"{neg.image_id}-m-{rec.image_id}"
            out["non-lesion"].append(
                _save_patch(
                    patch,
                    side,
                    out_dir / "nonlesion" / f"{pid}.png",
                    dict(patch_id=pid, body_part=neg.body_part, matched_lesion_id=rec.image_id),
                )
            )
    if lesions:
        for rec in sources:
            rng = np.random.default_rng(derive_seed(seed, f"patch/source/{rec.image_id}"))
            (match,) = match_nonlesion_images(rec, lesions, 1, rng)
            box = match.boxes[int(rng.integers(len(match.boxes)))]
            patch = crop_matched_patch(img(rec), box, pcfg.s, rng, (match.height, match.width), source_id=rec.image_id)
            if not intensity_filter(patch, pcfg.intensity_threshold):
                dropped += 1
                continue
            pid = f"{rec.image_id}-src"
            out["source"].append(
                _save_patch(
                    patch,
                    side,
                    out_dir / "source" / f"{pid}.png",
                    dict(patch_id=pid, body_part=rec.body_part, matched_lesion_id=match.image_id),
                )
            )
    log.info(
        "patches: %d lesion, %d non-lesion, %d source (%d dropped by intensity filter)",
        len(out["lesion"]),
        len(out["non-lesion"]),
        len(out["source"]),
        dropped,
    )
    return out


def write_patch_sets(patch_sets: dict, manifests_dir: Path, seed: int, side: int) -> None:
    names = {"lesion": "patches_lesion.jsonl", "non-lesion": "patches_nonlesion.jsonl", "source": "patches_source.jsonl"}
    for key, name in names.items():
        write_patch_manifest(manifests_dir / name, patch_sets[key], seed=seed, side=side)


def load_patch_pixels(records: list[PatchRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, 1, 1))
    return np.stack([load_image(r.path).pixels for r in records])


def stage_train_translator(
    lesion: list[PatchRecord], nonlesion: list[PatchRecord], cfg: ExperimentConfig, seed: int, ckpt: Path, curves: Path
) -> SharedLatentTranslator:
    arch = dataclasses.replace(cfg.translator.arch, side=cfg.patch.model_input_side)
    tcfg = dataclasses.replace(cfg.translator.train, seed=derive_seed(seed, "translator") % (2**31))
    model, history = train_translator(
        load_patch_pixels(lesion), load_patch_pixels(nonlesion), arch, cfg.translator.loss_weights, tcfg, log=log.debug
    )
    save_translator(ckpt, model, cfg.translator.loss_weights, extra={"s": cfg.patch.s, "body_part": cfg.synth.family})
    history.write_csv(curves)
    return model


def stage_translate(model: SharedLatentTranslator, sources: list[PatchRecord], out_dir: Path) -> list[PatchRecord]:
    """Translate source patches into the lesion domain; returns domain=generated patch records."""
    out = []
    pixels = load_patch_pixels(sources)
    for start in range(0, len(sources), 64):
        batch = translate(model, pixels[start : start + 64], T_NON_LESION, T_LESION)
        for rec, px in zip(sources[start : start + 64], batch):
            pid = rec.patch_id.removesuffix("-src") + "-gen"
            path = Path(out_dir) / f"{pid}.png"
            save_image(np.clip(px, 0.0, 1.0), path)
            out.append(
                dataclasses.replace(
                    rec, patch_id=pid, path=str(path.resolve()), domain="generated", extra={**rec.extra, "source_patch": rec.patch_id}
                )
            )
    return out


def stage_blend(
    manifest: DatasetManifest, translated: list[PatchRecord], n: float, out_dir: Path
) -> list[DatasetRecord]:
    """Blend each translated patch into its source image and write the generated full images."""
    by_id = manifest.by_id()
    out = []
    for rec in translated:
        src = by_id.get(rec.source_image_id)
        if src is None:
            raise DataError(f"translated patch {rec.patch_id} refers to unknown image {rec.source_image_id}")
        full = load_image(src.path)
        r = rec.crop_rect
        original = full.pixels[r.y_min : r.y_max, r.x_min : r.x_max]
        translated_px = np.clip(resample(load_image(rec.path).pixels, r.height, r.width), 0.0, 1.0)
        blended = blend(original, translated_px, alpha_mask(r.height, r.width, n))
        image = paste_back(full, blended, r)
        image_id = f"gen-{src.image_id}"
        path = Path(out_dir) / f"{image_id}.png"
        save_image(image, path)
        box = BoundingBox.from_list(rec.extra["box"]) if "box" in rec.extra else r
        if not box.is_valid_for(image.height, image.width):
            box = r
        out.append(
            DatasetRecord(
                image_id=image_id,
                path=str(path.resolve()),
                label=LESION,
                split="train",
                body_part=src.body_part,
                height=image.height,
                width=image.width,
                boxes=[box],
                provenance="generated",
                extra={"source_image_id": src.image_id, "crop_rect": r.to_list(), "translated_patch": rec.patch_id},
            )
        )
    return out


def write_scores(path, records: list[DatasetRecord], scores: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "label", "score"])
        for rec, s in zip(records, scores):
            w.writerow([rec.image_id, 1 if rec.is_lesion else 0, repr(float(s))])


def read_scores(path, split: str = "test") -> ScoredSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"score file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ScoredSet([r["image_id"] for r in rows], [int(r["label"]) for r in rows], [float(r["score"]) for r in rows], split=split)


def scored_set(records, scores, split) -> ScoredSet:
    return ScoredSet([r.image_id for r in records], [1 if r.is_lesion else 0 for r in records], scores, split=split)


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ModelResult:
    type: str
    t: float
    augmented_samples: int
    val_scores: np.ndarray
    test_scores: np.ndarray
    val_auc: float
    checkpoint_hash: str
    train_manifest_hash: str
    scorer_id: str = ""
    translator_id: str = ""
    selected: bool = False


class Experiment:
    def __init__(self, cfg: ExperimentConfig, run_dir):
        cfg.validate()
        self.cfg = cfg
        self.layout = RunLayout(run_dir)
        self.cache = clf.ImageCache()
        self.results: list[ModelResult] = []

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def classifier_config(self) -> clf.TrainConfig:
        # every classifier in a run shares one initialization seed, so rows differ only by training data
        return dataclasses.replace(self.cfg.classifier, seed=derive_seed(self.seed, "classifier") % (2**31))

    def train_and_score(self, tag: str, train: list[DatasetRecord]) -> tuple[clf.LesionClassifier, ModelResult]:
        ccfg = self.classifier_config()
        model = clf.train_classifier(train, self.val, ccfg, self.cache, log=log.debug)
        ckpt = self.layout.checkpoints / f"classifier_{tag}.pt"
        clf.save_classifier(ckpt, model, ccfg)
        val_scores = clf.score(model, self.val, self.cache)
        test_scores = clf.score(model, self.test, self.cache)
        write_scores(self.layout.scores / f"{tag}_val.csv", self.val, val_scores)
        write_scores(self.layout.scores / f"{tag}_test.csv", self.test, test_scores)
        train_manifest = self.layout.manifests / f"train_{tag}.jsonl"
        write_manifest(train_manifest, DatasetManifest(train, seed=self.seed))
        result = ModelResult(
            type="",
            t=0.0,
            augmented_samples=0,
            val_scores=val_scores,
            test_scores=test_scores,
            val_auc=roc_auc(scored_set(self.val, val_scores, "val")),
            checkpoint_hash=state_hash(model),
            train_manifest_hash=file_hash(train_manifest),
        )
        log.info("classifier %s: val AUC %.4f", tag, result.val_auc)
        return model, result

    def augmentation_rows(self, type_name: str, tag: str, generated: list[DatasetRecord], scorer, scorer_id: str, translator_id: str):
        """Mine ``generated`` with ``scorer`` at every grid threshold, train one classifier per threshold, select t on val."""
        gen_scores = clf.score(scorer, generated, self.cache) if generated else np.zeros(0)
        write_scores(self.layout.scores / f"generated_{tag}.csv", generated, gen_scores)
        rows: dict[float, ModelResult] = {}

        def val_auc_of(t: float) -> float:
            mining = partition_by_score(generated, gen_scores, t, scorer_id)
            write_mining_report(self.layout.reports / f"mining_{tag}_t{t:.2f}.csv", mining)
            augmented = build_augmented_manifest(DatasetManifest(self.train, seed=self.seed), mining.kept)
            _, res = self.train_and_score(f"{tag}_t{t:.2f}", augmented.records)
            res.type, res.t, res.augmented_samples = type_name, t, len(mining.kept)
            res.scorer_id, res.translator_id = scorer_id, translator_id
            rows[t] = res
            return res.val_auc

        t_best, table = select_threshold([float(t) for t in self.cfg.t_grid], val_auc_of)
        with open(self.layout.reports / f"threshold_selection_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "val_auc", "selected"])
            for t, auc in table:
                w.writerow([f"{t:.2f}", repr(auc), int(t == t_best)])
        out = [rows[float(t)] for t in self.cfg.t_grid]
        out.append(dataclasses.replace(rows[t_best], selected=True))
        return out

    # -- pipeline -------------------------------------------------------------

    def run(self) -> list[dict]:
        cfg, layout = self.cfg, self.layout
        layout.make()
        dump_config(cfg, layout.root / "config.yaml")
        family = cfg.transfer.target_body_part if cfg.mode in TRANSFER_MODES else None
        manifest = stage_synth(cfg, layout, family)
        self.manifest = manifest
        self.train = manifest.split("train")
        self.val = manifest.split("val")
        self.test = manifest.split("test")
        self.test_manifest_hash = file_hash(layout.manifests / "dataset.jsonl")

        baseline, res = self.train_and_score("baseline", self.train)
        res.type, res.scorer_id = "Baseline", "baseline"
        self.results.append(res)

        if cfg.mode == "baseline":
            return self.finish()

        source_translator = source_classifier = None
        s = cfg.patch.s
        if cfg.mode in TRANSFER_MODES:
            t = cfg.transfer
            if t.source_translator and cfg.mode != "transfer_pseudolabeller":
                source_translator, blob = load_translator(t.source_translator)
                if not t.target_has_generator:
                    s = int(blob["extra"].get("s", s))
            if t.source_classifier and cfg.mode != "transfer_generator":
                source_classifier = clf.load_classifier(t.source_classifier)

        native_needed = cfg.mode in ("augmented", "transfer_pseudolabeller")
        side = source_translator.arch.side if source_translator is not None else cfg.patch.model_input_side
        pcfg = dataclasses.replace(cfg.patch, s=s, model_input_side=side)
        patch_seed = derive_seed(self.seed, "patch")
        patches = patchify(manifest, pcfg, patch_seed, layout.patches, side)
        write_patch_sets(patches, layout.manifests, patch_seed, side)

        generated_sets = {}
        if native_needed:
            native = stage_train_translator(
                patches["lesion"],
                patches["non-lesion"],
                dataclasses.replace(cfg, patch=pcfg),
                self.seed,
                layout.checkpoints / "translator.pt",
                layout.reports / "translator_losses.csv",
            )
            generated_sets["native"] = (native, "native")
        if source_translator is not None:
            generated_sets["transfer"] = (source_translator, f"transfer:{cfg.transfer.source_body_part}")

        generated = {}
        for key, (model, translator_id) in generated_sets.items():
            translated = stage_translate(model, patches["source"], layout.translated / key)
            write_patch_manifest(layout.manifests / f"translated_{key}.jsonl", translated, seed=patch_seed, side=side)
            recs = stage_blend(manifest, translated, cfg.blend_n, layout.generated / key)
            write_manifest(layout.manifests / f"generated_{key}.jsonl", DatasetManifest(recs, seed=self.seed))
            generated[key] = (recs, translator_id)
            log.info("%s translator produced %d generated images", key, len(recs))

        src_id = f"transfer:{cfg.transfer.source_body_part}"
        plans = {
            "augmented": [("Augmented", "augmented", "native", baseline, "baseline")],
            "transfer_generator": [("TL_G", "tl_g", "transfer", baseline, "baseline")],
            "transfer_generator_plus_pseudolabeller": [
                ("TL_G", "tl_g", "transfer", baseline, "baseline"),
                ("TL_G + TL_PL", "tl_g_pl", "transfer", source_classifier, src_id),
            ],
            "transfer_pseudolabeller": [
                ("Augmented", "augmented", "native", baseline, "baseline"),
                ("TL_PL", "tl_pl", "native", source_classifier, src_id),
            ],
        }[cfg.mode]
        for type_name, tag, gen_key, scorer, scorer_id in plans:
            recs, translator_id = generated[gen_key]
            self.results.extend(self.augmentation_rows(type_name, tag, recs, scorer, scorer_id, translator_id))
        return self.finish()

    def finish(self) -> list[dict]:
        cfg = self.cfg
        val_labels = [1 if r.is_lesion else 0 for r in self.val]
        test_set = lambda scores: scored_set(self.test, scores, "test")
        B = cfg.bootstrap
        boot_seed = derive_seed(self.seed, "bootstrap")
        indices = bootstrap_indices(np.array([1 if r.is_lesion else 0 for r in self.test]), B, boot_seed)
        baseline_test = test_set(self.results[0].test_scores)
        config_hash = cfg.hash()
        rows = []
        for k, res in enumerate(self.results):
            rep = evaluate_model(
                test_set(res.test_scores),
                ScoredSet([r.image_id for r in self.val], val_labels, res.val_scores, split="val"),
                indices,
                boot_seed,
                baseline_test=None if k == 0 else baseline_test,
            )
            star = "*" if rep.significant_vs_baseline else ""
            rows.append(
                {
                    "type": res.type,
                    "t": res.t,
                    "augmented_samples": res.augmented_samples,
                    "auc": rep.auc,
                    "ci_low": rep.ci_low,
                    "ci_high": rep.ci_high,
                    "auc_ci": f"{rep.auc:.3f} ({rep.ci_low:.3f}-{rep.ci_high:.3f}){star}",
                    "significant": rep.significant_vs_baseline,
                    "diff_ci_low": rep.diff_ci[0],
                    "diff_ci_high": rep.diff_ci[1],
                    "sensitivity": rep.sensitivity,
                    "specificity": rep.specificity,
                    "op": rep.op_threshold,
                    "val_auc": res.val_auc,
                    "selected": res.selected,
                    "scorer_id": res.scorer_id,
                    "translator_id": res.translator_id,
                    "bootstrap_B": B,
                    "config_hash": config_hash,
                    "checkpoint_hash": res.checkpoint_hash,
                    "train_manifest_hash": res.train_manifest_hash,
                    "test_manifest_hash": self.test_manifest_hash,
                }
            )
        write_report(self.layout.reports, rows, cfg)
        return rows


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_report(reports_dir: Path, rows: list[dict], cfg: ExperimentConfig) -> None:
    reports_dir.mkdir(parents=True, exist_ok=True)
    with open(reports_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    payload = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "bootstrap": {"B": cfg.bootstrap, "method": "percentile", "level": 0.95},
        "note": "directional comparison on synthetic data; absolute AUCs are not comparable to clinical results",
        "rows": [{c: (round(row[c], 6) if isinstance(row[c], float) else row[c]) for c in REPORT_COLUMNS} for row in rows],
    }
    (reports_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: ExperimentConfig, run_dir) -> list[dict]:
    """Execute ``cfg.mode`` end to end in ``run_dir`` and return the report rows."""
    root = Path(run_dir)
    with run_lock(root):
        torch.use_deterministic_algorithms(True, warn_only=True)
        return Experiment(cfg, root).run()
