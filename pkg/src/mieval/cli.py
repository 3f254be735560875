"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

import mieval
from mieval import clinfeat, dataio, imgclassify, metrics, preproc, segnet, synthetic
from mieval.config import ConfigError, RunConfig, load_config, require_dataset_root
from mieval.volcore import LabelMap

log = logging.getLogger("mieval")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(path: Path, data, outputs: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    path.write_bytes(raw)
    outputs[str(path.name)] = _sha256(raw)


def write_manifest(cfg: RunConfig, command: str, outputs: dict, extra: Optional[dict] = None) -> Path:
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "versions": {
            "mieval": mieval.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "outputs": dict(sorted(outputs.items())),
    }
    if extra:
        doc.update(extra)
    path = cfg.out() / f"manifest_{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _index(cfg: RunConfig) -> dataio.DatasetIndex:
    root = require_dataset_root(cfg)
    return dataio.load_dataset(root, cfg.dataset.layout)


def _split(cfg: RunConfig, idx: dataio.DatasetIndex):
    s = cfg.split
    if s.n_val == 0:
        return idx, idx
    return dataio.split_dataset(idx, s.n_val, s.val_pathological, s.val_normal, cfg.seed)


def _load_case(entry: dataio.CaseEntry, cfg: RunConfig, with_labels: bool = True):
    vol = dataio.load_volume(entry.image, entry.case_id)
    vol_p = preproc.preprocess(vol, cfg.preproc)
    if not with_labels:
        return vol, vol_p, None
    if entry.labels is None:
        raise DataError(f"case {entry.case_id}: no ground-truth label file")
    lm = dataio.load_labels(entry.labels, entry.case_id)
    if lm.shape != vol.shape:
        raise DataError(f"case {entry.case_id}: image {vol.shape} and labels {lm.shape} differ")
    return vol, vol_p, preproc.resize_labels(lm, cfg.preproc)


def _clinical_records(cfg: RunConfig, idx: dataio.DatasetIndex) -> list:
    csv_rows = dataio.read_clinical_csv(cfg.dataset.clinical_csv) if cfg.dataset.clinical_csv else {}
    records = []
    for entry in idx:
        if entry.case_id in csv_rows:
            raw = csv_rows[entry.case_id]
        elif entry.clinical is not None:
            raw = dataio.parse_clinical_file(entry.clinical.read_text(encoding="utf-8"))
        else:
            continue
        label = clinfeat.CLASS_CODES.get(entry.cls) if entry.cls else None
        records.append(clinfeat.encode_record(raw, label=label, case_id=entry.case_id))
    return records


def _labelled_arrays(records):
    labelled = [r for r in records if r.label is not None]
    if not labelled:
        raise DataError("no clinical records with a known class")
    X, y = clinfeat.records_to_arrays(labelled)
    return labelled, X, y


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    ids = synthetic.write_dataset(
        args.root, args.normal, args.pathological, args.seed, args.size, args.slices, args.raw_size
    )
    print(f"wrote {len(ids)} cases to {args.root}")
    return EXIT_OK


def cmd_train_seg(cfg: RunConfig, role: str) -> int:
    idx = _index(cfg)
    train_idx, val_idx = _split(cfg, idx)
    if len(train_idx) == 0:
        raise DataError("training split is empty")
    train_cases = [_load_case(e, cfg)[1:] for e in train_idx]
    val_cases = [_load_case(e, cfg)[1:] for e in val_idx]
    model = segnet.build_unet(cfg.unet_spec(role), cfg.seed, role)
    tc = cfg.train_config()
    log.info("training %s network on %d cases (%d validation)", role, len(train_cases), len(val_cases))
    result = segnet.train(model, train_cases, val_cases, tc)

    outputs: dict = {}
    ckpt = cfg.checkpoint_path(role)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    segnet.save_model(model, ckpt, result.optimizer, {"best_epoch": result.best_epoch})
    outputs[ckpt.name] = _sha256(ckpt.read_bytes())
    _write(cfg.out() / f"{role}_history.csv", result.history_csv(), outputs)
    write_manifest(
        cfg, f"train-seg-{role}", outputs,
        {"train_cases": train_idx.ids(), "val_cases": val_idx.ids(), "best_epoch": result.best_epoch,
         "stopped_early": result.stopped_early},
    )
    print(f"{role}: {len(result.history)} epochs, best epoch {result.best_epoch}, "
          f"val loss {result.best_val_loss:.6f} -> {ckpt}")
    return EXIT_OK


def _load_seg(cfg: RunConfig, role: str) -> segnet.SegModel:
    path = cfg.checkpoint_path(role)
    if not path.is_file():
        raise DataError(f"missing {role} checkpoint {path}")
    model, _, _ = segnet.load_model(path)
    if model.spec.input_size != cfg.preproc.target_h:
        raise ConfigError("preproc", f"checkpoint expects {model.spec.input_size}px input")
    return model


def predict_volume(anat: segnet.SegModel, path: segnet.SegModel, vol, vol_p, cfg: RunConfig) -> LabelMap:
    a = segnet.predict_case(anat, vol_p, cfg.train_config().batch_size)
    p = segnet.predict_case(path, vol_p, cfg.train_config().batch_size)
    merged = segnet.refine_and_merge(a, p)
    return preproc.resize_labels_to(merged, vol.shape[1:], vol.spacing)


def cmd_predict(cfg: RunConfig, case_ids: Optional[Sequence[str]] = None) -> int:
    idx = _index(cfg)
    if case_ids:
        unknown = sorted(set(case_ids) - set(idx.ids()))
        if unknown:
            raise DataError(f"unknown case ids: {', '.join(unknown)}")
        idx = idx.subset(case_ids)
    anat = _load_seg(cfg, segnet.ANATOMICAL)
    path = _load_seg(cfg, segnet.PATHOLOGICAL)
    outputs: dict = {}
    for entry in idx:
        vol, vol_p, _ = _load_case(entry, cfg, with_labels=False)
        final = predict_volume(anat, path, vol, vol_p, cfg)
        _write(cfg.out() / "predictions" / f"{entry.case_id}.nii.gz", dataio.write_nifti(final, compress=True), outputs)
    write_manifest(cfg, "predict", outputs, {"cases": idx.ids()})
    print(f"wrote {len(idx)} predictions to {cfg.out() / 'predictions'}")
    return EXIT_OK


def _fit_split(cfg: RunConfig, idx: dataio.DatasetIndex) -> dataio.DatasetIndex:
    # clinical fitting uses the training split so validation stays held out
    return _split(cfg, idx)[0]


def cmd_fit_clinical(cfg: RunConfig) -> int:
    idx = _index(cfg)
    records = _clinical_records(cfg, _fit_split(cfg, idx))
    labelled, X, y = _labelled_arrays(records)
    pipe = clinfeat.fit_pipeline(X, y, cfg.svm_params())
    outputs: dict = {}
    dest = cfg.checkpoint_path("clinical")
    _write(dest, pipe.to_json(), outputs)
    write_manifest(
        cfg, "fit-clinical", outputs,
        {"cases": [r.case_id for r in labelled],
         "selected_features": [clinfeat.FEATURE_NAMES[i] for i in pipe.selected]},
    )
    print(f"fitted on {len(labelled)} records; selected: {', '.join(clinfeat.FEATURE_NAMES[i] for i in pipe.selected)}")
    return EXIT_OK


def _prediction_path(cfg: RunConfig, case_id: str, pred_dir: Optional[Path] = None) -> Path:
    return (pred_dir or cfg.out() / "predictions") / f"{case_id}.nii.gz"


def cmd_classify(cfg: RunConfig, mode: str, pred_dir: Optional[Path] = None) -> int:
    idx = _index(cfg)
    rows = {e.case_id: {"case_id": e.case_id, "true_class": e.cls or ""} for e in idx}

    if mode in ("clinical", "both"):
        pfile = cfg.checkpoint_path("clinical")
        if not pfile.is_file():
            raise DataError(f"missing fitted clinical pipeline {pfile} (run fit-clinical)")
        pipe = clinfeat.ClinicalPipeline.from_json(pfile.read_text(encoding="utf-8"))
        records = {r.case_id: r for r in _clinical_records(cfg, idx)}
        missing = sorted(set(rows) - set(records))
        if missing:
            raise DataError(f"no clinical record for: {', '.join(missing)}")
        for cid, rec in records.items():
            label, value = clinfeat.predict_clinical(pipe, rec)
            rows[cid]["clinical_prediction"] = label
            rows[cid]["clinical_decision"] = repr(value)

    if mode in ("image", "both"):
        missing = [cid for cid in rows if not _prediction_path(cfg, cid, pred_dir).is_file()]
        if missing:
            raise DataError(f"no predicted label map for: {', '.join(missing)}")
        for cid in rows:
            lm = dataio.load_labels(_prediction_path(cfg, cid, pred_dir), cid)
            label, slices = imgclassify.classify_from_segmentation(lm, cfg.slice_rule)
            rows[cid]["image_prediction"] = label
            rows[cid]["image_slices"] = ";".join(map(str, slices))

    modes = ["clinical", "image"] if mode == "both" else [mode]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if mode == "both":
        w.writerow(["case_id", "clinical_prediction", "clinical_decision", "image_prediction", "image_slices", "true_class"])
        for r in rows.values():
            w.writerow([r["case_id"], r["clinical_prediction"], r["clinical_decision"], r["image_prediction"],
                        r["image_slices"], r["true_class"]])
    else:
        w.writerow(["case_id", "mode", "prediction", "decision_value", "true_class"])
        for r in rows.values():
            extra = r.get("clinical_decision", "") if mode == "clinical" else r.get("image_slices", "")
            w.writerow([r["case_id"], mode, r[f"{mode}_prediction"], extra, r["true_class"]])

    summary = {"mode": mode, "n_cases": len(rows)}
    for m in modes:
        known = [r for r in rows.values() if r["true_class"]]
        if known:
            summary[f"{m}_accuracy"] = metrics.accuracy([r[f"{m}_prediction"] for r in known], [r["true_class"] for r in known])
    if mode == "both":
        summary["agreement"] = float(np.mean([r["clinical_prediction"] == r["image_prediction"] for r in rows.values()]))

    outputs: dict = {}
    _write(cfg.out() / f"classify_{mode}.csv", buf.getvalue(), outputs)
    _write(cfg.out() / f"classify_{mode}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", outputs)
    write_manifest(cfg, f"classify-{mode}", outputs)
    for k, v in summary.items():
        if k.endswith("accuracy") or k == "agreement":
            print(f"{k}: {v:.4f}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, pred_dir: Optional[Path] = None, gt_dir: Optional[Path] = None) -> int:
    pred_dir = pred_dir or cfg.out() / "predictions"
    if not pred_dir.is_dir():
        raise DataError(f"predictions directory {pred_dir} not found")
    pred_ids = sorted(p.name[: -len(".nii.gz")] for p in pred_dir.glob("*.nii.gz"))
    if gt_dir is not None:
        gt_files = {p.name[: -len(".nii.gz")]: p for p in Path(gt_dir).glob("*.nii.gz")}
        classes = {cid: cfg.dataset.layout.class_of(cid) for cid in gt_files}
    else:
        idx = _index(cfg)
        gt_files = {e.case_id: e.labels for e in idx if e.labels is not None}
        classes = {e.case_id: e.cls for e in idx}
    unmatched = sorted(set(pred_ids) ^ set(gt_files))
    if unmatched:
        raise DataError(f"unmatched case ids between predictions and ground truth: {', '.join(unmatched)}")
    if not pred_ids:
        raise DataError("no predictions to evaluate")

    reports = []
    for cid in pred_ids:
        pred = dataio.load_labels(pred_dir / f"{cid}.nii.gz", cid)
        gt = dataio.load_labels(gt_files[cid], cid)
        rep = metrics.evaluate_case(pred, gt, cid)
        rep.predicted_class = imgclassify.classify_from_segmentation(pred, cfg.slice_rule)[0]
        rep.true_class = classes.get(cid) or imgclassify.classify_from_segmentation(gt, cfg.slice_rule)[0]
        reports.append(rep)
    summary = metrics.summarize(reports)

    outputs: dict = {}
    _write(cfg.out() / "evaluate_cases.csv", metrics.reports_to_csv(reports), outputs)
    _write(cfg.out() / "evaluate_summary.json", summary.to_json(), outputs)
    write_manifest(cfg, "evaluate", outputs, {"cases": pred_ids})
    print(metrics.format_table(summary))
    return EXIT_OK


def cmd_crossval(cfg: RunConfig) -> int:
    idx = _index(cfg)
    labelled, X, y = _labelled_arrays(_clinical_records(cfg, idx))
    res = clinfeat.crossval_5fold(X, y, cfg.svm_params(), cfg.seed, cfg.folds)
    outputs: dict = {}
    _write(cfg.out() / "crossval.csv", res.to_csv(), outputs)
    summary = {
        "n_records": len(labelled),
        "folds": cfg.folds,
        "seed": cfg.seed,
        "fold_accuracies": res.fold_accuracies,
        "mean_accuracy": res.mean_accuracy,
        "selected_features": [[clinfeat.FEATURE_NAMES[i] for i in s] for s in res.selected_features],
    }
    _write(cfg.out() / "crossval.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", outputs)
    write_manifest(cfg, "crossval", outputs)
    print(f"{cfg.folds}-fold accuracies: {', '.join(f'{a:.3f}' for a in res.fold_accuracies)}")
    print(f"mean accuracy: {res.mean_accuracy:.4f}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mieval", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-seg", parents=[common], help="train the anatomical or pathological network")
    t.add_argument("--role", choices=[segnet.ANATOMICAL, segnet.PATHOLOGICAL], required=True)

    pr = sub.add_parser("predict", parents=[common], help="segment cases and merge both networks")
    pr.add_argument("--cases", nargs="*", help="case ids (default: all)")

    c = sub.add_parser("classify", parents=[common], help="normal/pathological per case")
    c.add_argument("--mode", choices=["clinical", "image", "both"], required=True)
    c.add_argument("--predictions", type=Path, help="predicted label maps (default: OUT/predictions)")

    e = sub.add_parser("evaluate", parents=[common], help="Dice / Hausdorff / RVD against ground truth")
    e.add_argument("--predictions", type=Path, help="predicted label maps (default: OUT/predictions)")
    e.add_argument("--ground-truth", type=Path, help="directory of <case>.nii.gz ground truth (default: dataset)")

    sub.add_parser("crossval", parents=[common], help="stratified k-fold CV of the clinical cascade")
    sub.add_parser("fit-clinical", parents=[common], help="fit the clinical SVM cascade")

    s = sub.add_parser("synth", help="write a small synthetic dataset")
    s.add_argument("--root", type=Path, required=True)
    s.add_argument("--normal", type=int, default=2)
    s.add_argument("--pathological", type=int, default=2)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--raw-size", type=int, default=None)
    s.add_argument("--slices", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    return p


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = str(args.out)
    return cfg


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "synth":
        return cmd_synth(args)
    cfg = _resolve_config(args)
    if args.command == "train-seg":
        return cmd_train_seg(cfg, args.role)
    if args.command == "predict":
        return cmd_predict(cfg, args.cases)
    if args.command == "classify":
        return cmd_classify(cfg, args.mode, args.predictions)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.predictions, args.ground_truth)
    if args.command == "crossval":
        return cmd_crossval(cfg)
    if args.command == "fit-clinical":
        return cmd_fit_clinical(cfg)
    raise AssertionError(args.command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return run(argv)
    except (ConfigError, segnet.SpecError, segnet.TrainConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, dataio.NiftiError, dataio.DatasetError, dataio.ClinicalParseError,
            clinfeat.ClinicalEncodeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, clinfeat.SvmTrainingError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
