"""``lesionforge`` command line.

Every verb works on a run directory with the fixed layout documented in
:mod:`lesionforge.pipeline`; the single-stage verbs read their inputs from the
places earlier verbs wrote them, so ``synth -> patchify -> train-translator ->
translate -> blend -> ...`` reproduces what ``run`` does in one go.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from lesionforge import classifier as clf
from lesionforge import pipeline as pl
from lesionforge.config import (
    MODES,
    ExperimentConfig,
    config_from_dict,
    dump_config,
    load_config,
)
from lesionforge.dataio import (
    DatasetManifest,
    manifest_summary,
    read_manifest,
    write_manifest,
)
from lesionforge.errors import DataError, NumericalError
from lesionforge.metrics import ScoredSet, bootstrap_indices, evaluate_model
from lesionforge.patching import read_patch_manifest, write_patch_manifest
from lesionforge.pseudolabel import (
    build_augmented_manifest,
    partition_by_score,
    write_mining_report,
)
from lesionforge.seeding import derive_seed
from lesionforge.translation import load_translator

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
log = logging.getLogger("lesionforge")


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this tool reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "mode", None):
        cfg = dataclasses.replace(cfg, mode=args.mode)
    cfg.validate()
    return cfg


def _layout(args) -> pl.RunLayout:
    layout = pl.RunLayout(args.run_dir)
    layout.make()
    return layout


def _dataset(layout: pl.RunLayout) -> DatasetManifest:
    return read_manifest(layout.manifests / "dataset.jsonl")


def _print_rows(header: list[str], rows: list[list]) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


# -- verbs -------------------------------------------------------------------


def cmd_synth(args, cfg):
    layout = _layout(args)
    manifest = pl.stage_synth(cfg, layout, args.family)
    summary = manifest_summary(manifest)
    _print_rows(["split", "lesion", "non-lesion"], [[s, c["lesion"], c["non-lesion"]] for s, c in summary.items()])


def _patch_config(cfg: ExperimentConfig, layout: pl.RunLayout):
    pcfg = cfg.patch
    ckpt = cfg.transfer.source_translator
    if cfg.mode in ("transfer_generator", "transfer_generator_plus_pseudolabeller") and ckpt:
        model, blob = load_translator(ckpt)
        s = pcfg.s if cfg.transfer.target_has_generator else int(blob["extra"].get("s", pcfg.s))
        return dataclasses.replace(pcfg, s=s, model_input_side=model.arch.side)
    return pcfg


def cmd_patchify(args, cfg):
    layout = _layout(args)
    pcfg = _patch_config(cfg, layout)
    seed = derive_seed(cfg.seed, "patch")
    sets = pl.patchify(_dataset(layout), pcfg, seed, layout.patches, pcfg.model_input_side)
    pl.write_patch_sets(sets, layout.manifests, seed, pcfg.model_input_side)
    _print_rows(["set", "count"], [[k, len(v)] for k, v in sets.items()])


def cmd_train_translator(args, cfg):
    layout = _layout(args)
    lesion = read_patch_manifest(layout.manifests / "patches_lesion.jsonl")
    nonlesion = read_patch_manifest(layout.manifests / "patches_nonlesion.jsonl")
    ckpt = Path(args.out) if args.out else layout.checkpoints / "translator.pt"
    pl.stage_train_translator(lesion, nonlesion, cfg, cfg.seed, ckpt, layout.reports / "translator_losses.csv")
    print(ckpt)


def cmd_translate(args, cfg):
    layout = _layout(args)
    ckpt = Path(args.translator) if args.translator else layout.checkpoints / "translator.pt"
    if not ckpt.exists():
        raise DataError(f"translator checkpoint not found: {ckpt}")
    model, _ = load_translator(ckpt)
    sources = read_patch_manifest(layout.manifests / "patches_source.jsonl")
    out = pl.stage_translate(model, sources, layout.translated / args.tag)
    write_patch_manifest(layout.manifests / f"translated_{args.tag}.jsonl", out, seed=derive_seed(cfg.seed, "patch"), side=model.arch.side)
    print(f"translated {len(out)} patches")


def cmd_blend(args, cfg):
    from lesionforge.figures import emit_triptychs

    layout = _layout(args)
    translated = read_patch_manifest(layout.manifests / f"translated_{args.tag}.jsonl")
    recs = pl.stage_blend(_dataset(layout), translated, cfg.blend_n, layout.generated / args.tag)
    write_manifest(layout.manifests / f"generated_{args.tag}.jsonl", DatasetManifest(recs, seed=cfg.seed))
    print(f"generated {len(recs)} images")
    if args.triptychs:
        for path in emit_triptychs(layout.root, layout.figures, cfg.triptychs, cfg.seed):
            print(path)


def _train_records(layout, manifest_path):
    if manifest_path:
        return [r for r in read_manifest(manifest_path).records if r.split == "train"]
    return _dataset(layout).split("train")


def cmd_train_classifier(args, cfg):
    layout = _layout(args)
    data = _dataset(layout)
    ccfg = dataclasses.replace(cfg.classifier, seed=derive_seed(cfg.seed, "classifier") % (2**31))
    model = clf.train_classifier(_train_records(layout, args.train_manifest), data.split("val"), ccfg, log=log.debug)
    ckpt = layout.checkpoints / f"classifier_{args.tag}.pt"
    clf.save_classifier(ckpt, model, ccfg)
    best = max((h["val_auc"] for h in model.history), default=float("nan"))
    print(f"{ckpt} best_val_auc={best:.6f}")


def cmd_score(args, cfg):
    layout = _layout(args)
    model = clf.load_classifier(args.classifier or layout.checkpoints / f"classifier_{args.tag}.pt")
    if args.manifest:
        recs = read_manifest(args.manifest).records
        targets = [(recs, Path(args.out) if args.out else layout.scores / f"{args.tag}_scored.csv")]
    else:
        data = _dataset(layout)
        splits = [args.split] if args.split else ["val", "test"]
        targets = [(data.split(s), layout.scores / f"{args.tag}_{s}.csv") for s in splits]
    for recs, out in targets:
        pl.write_scores(out, recs, clf.score(model, recs))
        print(out)


def cmd_pseudolabel(args, cfg):
    layout = _layout(args)
    generated = read_manifest(layout.manifests / f"generated_{args.tag}.jsonl").records
    model = clf.load_classifier(args.scorer or layout.checkpoints / "classifier_baseline.pt")
    scores = clf.score(model, generated)
    pl.write_scores(layout.scores / f"generated_{args.tag}.csv", generated, scores)
    ts = [args.t] if args.t is not None else [float(t) for t in cfg.t_grid]
    rows = []
    for t in ts:
        result = partition_by_score(generated, scores, t, args.scorer_id)
        write_mining_report(layout.reports / f"mining_{args.tag}_t{t:.2f}.csv", result)
        write_manifest(layout.manifests / f"kept_{args.tag}_t{t:.2f}.jsonl", DatasetManifest(result.kept, seed=cfg.seed))
        rows.append([f"{t:.2f}", len(result.kept), len(result.rejected)])
    _print_rows(["t", "kept", "rejected"], rows)


def cmd_augment(args, cfg):
    layout = _layout(args)
    kept = read_manifest(args.kept).records
    base = DatasetManifest(_dataset(layout).split("train"), seed=cfg.seed)
    out = Path(args.out) if args.out else layout.manifests / f"train_{Path(args.kept).stem.removeprefix('kept_')}.jsonl"
    write_manifest(out, build_augmented_manifest(base, kept))
    print(f"{out} ({len(base.records)} base + {len(kept)} generated)")


def cmd_evaluate(args, cfg):
    layout = _layout(args)
    data = _dataset(layout)
    test, val = data.split("test"), data.split("val")
    boot_seed = derive_seed(cfg.seed, "bootstrap")
    indices = bootstrap_indices(np.array([1 if r.is_lesion else 0 for r in test]), cfg.bootstrap, boot_seed)

    def load(tag, split, recs):
        s = pl.read_scores(layout.scores / f"{tag}_{split}.csv", split=split)
        if s.image_ids != [r.image_id for r in recs]:
            raise DataError(f"scores for {tag}/{split} do not match the {split} split of the dataset manifest")
        return s

    baseline = load(args.models[0], "test", test)
    header = ["model", "auc", "ci_low", "ci_high", "significant", "diff_ci_low", "diff_ci_high", "op", "sensitivity", "specificity", "bootstrap_B"]
    rows = []
    for k, tag in enumerate(args.models):
        t_set = load(tag, "test", test)
        v_set = load(tag, "val", val)
        rep = evaluate_model(t_set, ScoredSet(v_set.image_ids, v_set.labels, v_set.scores, "val"), indices, boot_seed, None if k == 0 else baseline)
        rows.append([tag] + [pl._fmt(v) for v in (rep.auc, rep.ci_low, rep.ci_high, rep.significant_vs_baseline, *rep.diff_ci, rep.op_threshold, rep.sensitivity, rep.specificity)] + [cfg.bootstrap])
    with open(layout.reports / "evaluation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    _print_rows(header, rows)


def cmd_run(args, cfg):
    rows = pl.run_experiment(cfg, args.run_dir)
    _print_rows(pl.REPORT_COLUMNS, [[pl._fmt(r[c]) for c in pl.REPORT_COLUMNS] for r in rows])
    if args.figures:
        from lesionforge.figures import emit_figures

        emit_figures(args.run_dir, triptychs=cfg.triptychs, blend_n=cfg.blend_n, seed=cfg.seed)


def cmd_figures(args, cfg):
    from lesionforge.figures import emit_figures

    result = emit_figures(args.run_dir, args.out, triptychs=cfg.triptychs, blend_n=cfg.blend_n, seed=cfg.seed)
    for path in result["written"]:
        print(path)
    for note in result["notes"]:
        print(f"notice: {note}", file=sys.stderr)


def cmd_config(args, cfg):
    dump_config(cfg, args.out)
    print(args.out)


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config value")
    common.add_argument("--run-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="lesionforge", description="Generative augmentation for imbalanced lesion classification")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def verb(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = verb("synth", cmd_synth, "generate the synthetic dataset and its manifest")
    p.add_argument("--family", help="body-part family (humerus, tibia, femur); default from config")
    p = verb("patchify", cmd_patchify, "cut lesion, matched non-lesion and source patches")
    p.add_argument("--mode", choices=MODES, help="override config mode (affects transfer patch size)")
    p = verb("train-translator", cmd_train_translator, "train the shared-latent translator")
    p.add_argument("--out", help="checkpoint path (default: checkpoints/translator.pt)")
    p = verb("translate", cmd_translate, "translate source patches into the lesion domain")
    p.add_argument("--translator", help="translator checkpoint (default: checkpoints/translator.pt)")
    p.add_argument("--tag", default="native", help="name of the generated set (default: native)")
    p = verb("blend", cmd_blend, "alpha-blend translated patches into their source images")
    p.add_argument("--tag", default="native")
    p.add_argument("--triptychs", action="store_true", help="also write original/translated/blended figures")
    p = verb("train-classifier", cmd_train_classifier, "train a lesion classifier")
    p.add_argument("--train-manifest", help="training manifest (default: train split of the dataset)")
    p.add_argument("--tag", default="baseline")
    p = verb("score", cmd_score, "score images with a trained classifier")
    p.add_argument("--tag", default="baseline", help="classifier tag; names the score files")
    p.add_argument("--classifier", help="checkpoint path (default: checkpoints/classifier_<tag>.pt)")
    p.add_argument("--manifest", help="score every record of this manifest instead of the val/test splits")
    p.add_argument("--split", choices=["val", "test"], help="score only this split")
    p.add_argument("--out", help="output CSV when --manifest is given")
    p = verb("pseudolabel", cmd_pseudolabel, "mine hard positives among generated images")
    p.add_argument("--tag", default="native", help="generated set to mine")
    p.add_argument("--scorer", help="classifier checkpoint (default: checkpoints/classifier_baseline.pt)")
    p.add_argument("--scorer-id", default="baseline")
    p.add_argument("--t", type=float, help="single threshold (default: every value of the config t_grid)")
    p = verb("augment", cmd_augment, "merge kept generated images into the training split")
    p.add_argument("--kept", required=True, help="manifest written by pseudolabel")
    p.add_argument("--out", help="output manifest")
    p = verb("evaluate", cmd_evaluate, "AUC, bootstrap CIs, paired tests and operating points from score files")
    p.add_argument("models", nargs="+", help="score tags; the first is the reference for the paired test")
    p = verb("run", cmd_run, "run the configured experiment end to end")
    p.add_argument("--mode", choices=MODES, help="override config mode")
    p.add_argument("--figures", action="store_true", help="render figures after the report")
    p = verb("figures", cmd_figures, "render figures from a finished run")
    p.add_argument("--out", help="figure directory (default: <run-dir>/figures)")
    p = verb("config", cmd_config, "write the resolved configuration as YAML")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except NumericalError as exc:
        print(f"lesionforge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"lesionforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
