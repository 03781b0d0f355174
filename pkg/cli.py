"""
Sleep Fusion command line.

Runs the whole pipeline as batch commands: synthetic cohorts, subject splits,
preprocessing, encoder and fusion training, evaluation, window sweeps,
cross-dataset fine-tuning and comparison reports. Every artifact-producing
command writes run_manifest.json next to its outputs; `rerun` replays one.

Usage:
  python cli.py synth --out data/raw --config run.json
  python cli.py split --data data/raw --out data/splits.json
  python cli.py preprocess --modality sceeg --in data/raw --out data/pre
  python cli.py train-encoder --modality ppg --window 3min --data data/pre --split data/splits.json --out runs/ppg.sfus
  python cli.py train-fusion --strategy score --sceeg runs/sceeg.sfus --ppg runs/ppg.sfus --data data/pre --split data/splits.json --out runs/score
  python cli.py evaluate --model runs/xattn.sfus --sceeg runs/sceeg.sfus --ppg runs/ppg.sfus --data data/pre --split data/splits.json --report runs/xattn_test.json
  python cli.py report --compare runs/*_test.json --out runs/report

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 model.
"""

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import config_hash, from_dict, load_json_config, pin_threads, setup_logging

pin_threads()

import numpy as np  # noqa: E402

from checkpoint import file_sha256  # noqa: E402
from errors import ConfigError, DataError, ModelError, SleepFusionError  # noqa: E402
from fusion import MambaFusion, build_fusion_head, fusion_config, grid_search_alpha, score_fusion  # noqa: E402
from pipeline import (ENCODER_KINDS, build_model, encode_dataset, evaluation_report, load_model,  # noqa: E402
                      paired_datasets, preprocess_directory, save_model, window_datasets)
from preprocess import VALID_WINDOWS, WINDOW_LABELS, PreprocessConfig, parse_window  # noqa: E402
from recording_io import MODALITIES, SplitManifest, list_subjects, split_subjects  # noqa: E402
from reports import compare_reports, format_table, sweep_table, write_json  # noqa: E402
from synth import SynthConfig, synth_generate, write_cohort  # noqa: E402
from training import (FINE_TUNE_DEFAULTS, TrainConfig, direct_transfer, evaluate_model, fine_tune,  # noqa: E402
                      inference_ms, predict_proba, train, window_sweep)

logger = logging.getLogger(__name__)


# ============================================
# RUN MANIFEST
# ============================================

@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Optional[str]
    config_hash: str
    seed: int
    inputs: Dict[str, Any] = field(default_factory=dict)
    outputs: Dict[str, Any] = field(default_factory=dict)
    git: str = "unknown"
    started: str = ""
    finished: str = ""

    def write(self, directory) -> Path:
        path = Path(directory) / "run_manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"Run manifest not found: {path}")
        try:
            return cls(**json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, TypeError) as e:
            raise DataError(f"Run manifest {path} is malformed: {e}")


def git_describe() -> str:
    try:
        result = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                                cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() or "unknown"


def banner(title: str):
    print("=" * 60)
    print(title)
    print(f"Started: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("=" * 60)


def summary(title: str, lines: Dict[str, Any]):
    print(f"\n{'=' * 60}")
    print(title)
    print(f"{'=' * 60}")
    for key, value in lines.items():
        print(f"  {key + ':':22s} {value}")


# ============================================
# HELPERS
# ============================================

def _train_config(run_cfg: Dict[str, Any], section: str, seed: int, defaults: Optional[Dict[str, Any]] = None) -> TrainConfig:
    data = {**(defaults or {}), **(run_cfg.get(section) or {})}
    data.setdefault("seed", seed)
    return from_dict(TrainConfig, data, section)


def _load_encoders(sceeg_path, ppg_path):
    sceeg, sceeg_meta = load_model(sceeg_path)
    ppg, ppg_meta = load_model(ppg_path)
    if sceeg_meta["kind"] != "sceeg" or ppg_meta["kind"] != "ppg":
        raise ModelError("--sceeg and --ppg must point at scEEG and PPG encoder checkpoints")
    if sceeg_meta["window"] != ppg_meta["window"]:
        raise ModelError(f"Encoders were trained on different windows ({sceeg_meta['window']} vs {ppg_meta['window']})")
    if sceeg.cfg.d != ppg.cfg.d:
        raise ModelError(f"Encoder feature widths differ ({sceeg.cfg.d} vs {ppg.cfg.d})")
    return sceeg, ppg, sceeg_meta["window"]


def _feature_sets(args):
    sceeg, ppg, window = _load_encoders(args.sceeg, args.ppg)
    manifest = SplitManifest.load(args.split)
    paired = paired_datasets(args.data, manifest, window)
    return {part: encode_dataset(sceeg, ppg, ds) for part, ds in paired.items()}


def _score_probs(features, alpha: float) -> np.ndarray:
    shape = features.p_sceeg.shape
    return score_fusion(features.p_ppg.reshape(-1, 4), features.p_sceeg.reshape(-1, 4), alpha).reshape(shape)


def _require(datasets: Dict[str, Any], *parts: str):
    missing = [p for p in parts if p not in datasets]
    if missing:
        raise DataError(f"Split manifest has no subjects in: {', '.join(missing)}")


def _report_for(model, data) -> Dict[str, Any]:
    report = evaluation_report(predict_proba(model, data), data.labels, data.subject_ids, data.starts)
    report["parameters"] = model.num_parameters()
    return report


# ============================================
# COMMANDS
# ============================================

def cmd_synth(args, run_cfg, seed) -> Dict[str, Any]:
    section = {"seed": seed, **(run_cfg.get("synth") or {})}
    cfg = from_dict(SynthConfig, section, "synth")
    subjects = synth_generate(cfg)
    written = write_cohort(args.out, subjects)
    summary("SYNTHETIC COHORT", {"Subjects": len(written), "Epochs/subject": cfg.epochs_per_subject,
                                 "Output": args.out})
    return {"cohort": args.out, "subjects": len(written), "synth_config_hash": config_hash(cfg)}


def cmd_split(args, run_cfg, seed) -> Dict[str, Any]:
    manifest = split_subjects(list_subjects(args.data), tuple(args.fractions), seed)
    manifest.save(args.out)
    summary("SUBJECT SPLIT", {"Train": len(manifest.train), "Val": len(manifest.val),
                              "Test": len(manifest.test), "Output": args.out})
    return {"split": args.out}


def cmd_preprocess(args, run_cfg, seed) -> Dict[str, Any]:
    cfg = from_dict(PreprocessConfig, run_cfg.get("preprocess"), "preprocess")
    done = preprocess_directory(args.input, args.out, args.modality, cfg)
    summary("PREPROCESSING", {"Modality": args.modality, "Subjects": len(done),
                              "Config hash": config_hash(cfg), "Output": args.out})
    return {"cohort": args.out, "subjects": len(done), "preprocess_config_hash": config_hash(cfg)}


def cmd_train_encoder(args, run_cfg, seed) -> Dict[str, Any]:
    window = parse_window(args.window)
    datasets = window_datasets(args.data, args.modality, SplitManifest.load(args.split), window)
    _require(datasets, "train", "val")
    cfg = _train_config(run_cfg, "train", seed)
    model = build_model(args.modality, run_cfg, window, seed)
    out = Path(args.out)
    print(f"\n[TRAIN] {args.modality} encoder, window {WINDOW_LABELS[window]}, {model.num_parameters():,} parameters")
    _, log = train(model, datasets["train"], datasets["val"], cfg, log_path=out.with_suffix(".log.jsonl"),
                   desc=args.modality)
    sha = save_model(out, model, window, extra={"seed": seed, "best_epoch": log.best_epoch})
    outputs = {"checkpoint": str(out), "sha256": sha, "train_log": str(out.with_suffix(".log.jsonl"))}
    lines = {"Best epoch": log.best_epoch, "Best val κ": f"{log.best_kappa:.4f}", "Checkpoint": out}
    if "test" in datasets:
        report = _report_for(model, datasets["test"])
        report_path = args.report or str(out.with_suffix(".eval.json"))
        write_json(report_path, report)
        outputs["report"] = report_path
        lines["Test κ"] = f"{report['kappa']:.4f}"
    summary("ENCODER TRAINING", lines)
    return outputs


def cmd_train_fusion(args, run_cfg, seed) -> Dict[str, Any]:
    encoder_hashes = {"sceeg": file_sha256(args.sceeg), "ppg": file_sha256(args.ppg)}
    features = _feature_sets(args)
    _require(features, "train", "val")
    out = Path(args.out)

    if args.strategy == "score":
        val = features["val"]
        alpha, curve = grid_search_alpha(val.p_ppg.reshape(-1, 4), val.p_sceeg.reshape(-1, 4), val.labels)
        result = {"strategy": "score", "alpha": alpha, "alpha_curve": curve, "val_kappa": dict(curve)[alpha]}
        if "test" in features:
            test = features["test"]
            result.update(evaluation_report(_score_probs(test, alpha), test.labels, test.subject_ids, test.starts))
        report_path = out if out.suffix == ".json" else out.with_suffix(".json")
        write_json(report_path, result)
        summary("SCORE FUSION", {"α*": alpha, "Grid points": len(curve), "Report": report_path})
        return {"report": str(report_path), "alpha": alpha}

    head = build_fusion_head(args.strategy, fusion_config(run_cfg.get("fusion")), seed)
    if args.init_from:
        if not isinstance(head, MambaFusion):
            raise ConfigError("--init-from only applies to the mamba strategy")
        cross, meta = load_model(args.init_from, {"sceeg": args.sceeg, "ppg": args.ppg})
        if meta["kind"] != "xattn":
            raise ModelError("--init-from must point at a cross-attention fusion checkpoint")
        head.init_from_cross(cross.state_dict())
    cfg = _train_config(run_cfg, "fusion_train", seed)
    print(f"\n[FUSION] {args.strategy} head: {head.num_parameters(trainable_only=True):,} trainable parameters")
    _, log = train(head, features["train"], features["val"], cfg, log_path=out.with_suffix(".log.jsonl"),
                   desc=args.strategy)
    if {"sceeg": file_sha256(args.sceeg), "ppg": file_sha256(args.ppg)} != encoder_hashes:
        raise ModelError("Encoder checkpoints changed during fusion training")
    sha = save_model(out, head, extra={"seed": seed, "strategy": args.strategy, "best_epoch": log.best_epoch},
                     encoder_paths={"sceeg": args.sceeg, "ppg": args.ppg})
    outputs = {"checkpoint": str(out), "sha256": sha, "train_log": str(out.with_suffix(".log.jsonl"))}
    lines = {"Trainable params": f"{head.num_parameters(trainable_only=True):,}",
             "Best val κ": f"{log.best_kappa:.4f}", "Checkpoint": out}
    if "test" in features:
        report = _report_for(head, features["test"])
        report["strategy"] = args.strategy
        report_path = str(out.with_suffix(".eval.json"))
        write_json(report_path, report)
        outputs["report"] = report_path
        lines["Test κ"] = f"{report['kappa']:.4f}"
    summary("FUSION TRAINING", lines)
    return outputs


def cmd_evaluate(args, run_cfg, seed) -> Dict[str, Any]:
    manifest = SplitManifest.load(args.split)
    if args.alpha is not None:
        if not (args.sceeg and args.ppg):
            raise ConfigError("Score fusion evaluation needs --sceeg and --ppg")
        data = _feature_sets(args)
        _require(data, args.partition)
        ds = data[args.partition]
        report = evaluation_report(_score_probs(ds, args.alpha), ds.labels, ds.subject_ids, ds.starts)
        report.update({"strategy": "score", "alpha": args.alpha})
    else:
        if not args.model:
            raise ConfigError("evaluate needs --model (or --alpha with --sceeg/--ppg for score fusion)")
        encoders = {"sceeg": args.sceeg, "ppg": args.ppg} if args.sceeg and args.ppg else None
        model, meta = load_model(args.model, encoders)
        if meta["kind"] in ENCODER_KINDS:
            data = window_datasets(args.data, meta["kind"], manifest, meta["window"])
        elif encoders:
            data = _feature_sets(args)
        else:
            raise ConfigError("Fusion head evaluation needs --sceeg and --ppg")
        _require(data, args.partition)
        report = _report_for(model, data[args.partition])
        report["kind"] = meta["kind"]
        if args.timing:
            sample = data[args.partition]
            report["infer_ms"] = (inference_ms(model, sample.inputs[0]) if meta["kind"] in ENCODER_KINDS
                                  else inference_ms(model, sample.f_sceeg[0], sample.f_ppg[0]))
    report["partition"] = args.partition
    write_json(args.report, report)
    summary("EVALUATION", {"κ": f"{report['kappa']:.4f}", "Accuracy": f"{report['accuracy']:.4f}",
                           "Light recall": f"{report['light_recall']:.4f}", "Report": args.report})
    return {"report": args.report}


def cmd_sweep_window(args, run_cfg, seed) -> Dict[str, Any]:
    manifest = SplitManifest.load(args.split)
    windows = [parse_window(w) for w in args.windows] if args.windows else list(VALID_WINDOWS)
    cfg = _train_config(run_cfg, "train", seed)

    def build_data(window):
        datasets = window_datasets(args.data, args.modality, manifest, window)
        _require(datasets, *("train", "val", "test"))
        return datasets["train"], datasets["val"], datasets["test"]

    table = window_sweep(args.modality, build_data, lambda w: build_model(args.modality, run_cfg, w, seed), cfg,
                         windows, WINDOW_LABELS, timing_repeats=args.timing_repeats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = format_table(sweep_table(table))
    out.write_text(text + "\n", encoding="utf-8")
    write_json(out.with_suffix(".json"), {"modality": args.modality, "rows": table.to_dict(orient="records")})
    print("\n" + text)
    return {"table": str(out), "json": str(out.with_suffix(".json"))}


def cmd_fine_tune(args, run_cfg, seed) -> Dict[str, Any]:
    """Cross-dataset protocol: direct transfer of the source model next to fine-tuning on the target cohort."""
    encoders = {"sceeg": args.sceeg, "ppg": args.ppg} if args.sceeg and args.ppg else None
    model, meta = load_model(args.model, encoders)
    manifest = SplitManifest.load(args.split)
    if meta["kind"] in ENCODER_KINDS:
        data = window_datasets(args.data, meta["kind"], manifest, meta["window"])
    elif encoders:
        data = _feature_sets(args)
    else:
        raise ConfigError("Fine-tuning a fusion head needs --sceeg and --ppg")
    _require(data, "train", "val", "test")
    transfer = direct_transfer(model, data["test"])
    cfg = _train_config(run_cfg, "fine_tune", seed, FINE_TUNE_DEFAULTS)
    out = Path(args.out)
    _, log = fine_tune(model, model.state_dict(), data["train"], data["val"], cfg, out.with_suffix(".log.jsonl"))
    sha = save_model(out, model, meta.get("window", 1), encoder_paths=encoders,
                     extra={"seed": seed, "source": str(args.model), "best_epoch": log.best_epoch})
    tuned = evaluate_model(model, data["test"])
    report = {"direct_transfer": transfer, "fine_tuned": tuned, "kind": meta["kind"],
              "learning_rate": cfg.learning_rate}
    report_path = str(out.with_suffix(".eval.json"))
    write_json(report_path, report)
    summary("CROSS-DATASET", {"Direct transfer κ": f"{transfer['kappa']:.4f}",
                              "Fine-tuned κ": f"{tuned['kappa']:.4f}", "Checkpoint": out})
    return {"checkpoint": str(out), "sha256": sha, "report": report_path}


def cmd_report(args, run_cfg, seed) -> Dict[str, Any]:
    written = compare_reports(args.compare, args.out)
    print("\n" + Path(written["table"]).read_text(encoding="utf-8"))
    return written


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "preprocess": cmd_preprocess,
    "train-encoder": cmd_train_encoder,
    "train-fusion": cmd_train_fusion,
    "evaluate": cmd_evaluate,
    "sweep-window": cmd_sweep_window,
    "fine-tune": cmd_fine_tune,
    "report": cmd_report,
}


def _output_dir(args) -> Path:
    for name in ("out", "report"):
        value = getattr(args, name, None)
        if value:
            path = Path(value)
            return path if not path.suffix else path.parent
    return Path(".")


# ============================================
# MAIN
# ============================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sleepfusion", description="scEEG + PPG sleep staging pipeline")
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int, help="Overrides the config's seed")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING (default from SFUS_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic cohort")
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="Write a subject-level train/val/test split")
    p.add_argument("--data", required=True, help="Cohort directory")
    p.add_argument("--out", required=True, help="Split manifest JSON")
    p.add_argument("--fractions", type=float, nargs=3, default=[0.6, 0.2, 0.2])

    p = sub.add_parser("preprocess", help="Filter, resample and epoch one modality of a cohort")
    p.add_argument("--modality", choices=MODALITIES, required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-encoder", help="Train a unimodal encoder")
    p.add_argument("--modality", choices=MODALITIES, required=True)
    p.add_argument("--window", default="30s", help=f"One of {', '.join(WINDOW_LABELS.values())}")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="Checkpoint path (.sfus)")
    p.add_argument("--report", help="Test-set report JSON")

    p = sub.add_parser("train-fusion", help="Fit a fusion strategy on frozen encoders")
    p.add_argument("--strategy", choices=["score", "xattn", "mamba"], required=True)
    p.add_argument("--sceeg", required=True)
    p.add_argument("--ppg", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", help="Cross-attention checkpoint to start the mamba head from")

    p = sub.add_parser("evaluate", help="Evaluate a checkpoint (or score fusion) on one split partition")
    p.add_argument("--model")
    p.add_argument("--sceeg")
    p.add_argument("--ppg")
    p.add_argument("--alpha", type=float, help="Score fusion weight (no --model)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--partition", choices=["train", "val", "test"], default="test")
    p.add_argument("--report", required=True)
    p.add_argument("--timing", action="store_true", help="Add median single-window inference ms")

    p = sub.add_parser("sweep-window", help="Train and evaluate one encoder per window length")
    p.add_argument("--modality", choices=MODALITIES, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="Text table path")
    p.add_argument("--windows", nargs="+", help="Subset of window labels (default: all six)")
    p.add_argument("--timing-repeats", type=int, default=100)

    p = sub.add_parser("fine-tune", help="Direct transfer and fine-tuning on a target cohort")
    p.add_argument("--model", required=True)
    p.add_argument("--sceeg")
    p.add_argument("--ppg")
    p.add_argument("--data", required=True, help="Preprocessed target cohort")
    p.add_argument("--split", required=True, help="Target split manifest")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="Compare evaluation reports (table + SVG figures)")
    p.add_argument("--compare", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="Replay a command from its run manifest")
    p.add_argument("--manifest", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        if args.command == "rerun":
            manifest = RunManifest.load(args.manifest)
            if manifest.command == "rerun":
                raise DataError("A rerun manifest cannot replay another rerun")
            print(f"Replaying: {' '.join(manifest.argv)}")
            return main(manifest.argv)

        run_cfg = load_json_config(args.config)
        seed = args.seed if args.seed is not None else int(run_cfg.get("seed", 0))
        started = datetime.now().isoformat(timespec="seconds")
        banner(f"SLEEP FUSION: {args.command.upper()}")
        outputs = COMMANDS[args.command](args, run_cfg, seed)

        manifest = RunManifest(
            command=args.command,
            argv=argv,
            config=args.config,
            config_hash=config_hash(run_cfg),
            seed=seed,
            inputs={k: v for k, v in vars(args).items() if k not in ("command", "config", "seed") and v is not None},
            outputs=outputs,
            git=git_describe(),
            started=started,
            finished=datetime.now().isoformat(timespec="seconds"),
        )
        path = manifest.write(_output_dir(args))
        print(f"\n✓ Run manifest: {path}")
        print(f"Finished: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        return 0
    except SleepFusionError as e:
        print(f"\nERROR: {e.detail}")
        logger.debug("command failed", exc_info=True)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
