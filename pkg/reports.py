"""
Report writers: JSON results, aligned comparison tables and SVG figures.

Numeric reports are written with sorted keys so identical runs produce
byte-identical files; SVGs are rendered with a fixed hash salt and no date.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from errors import DataError  # noqa: E402
from metrics import MEASURE_KEYS  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "sleepfusion"

MEASURE_LABELS = {
    "tst_min": "TST (min)",
    "se_pct": "SE (%)",
    "fr_light_pct": "FR Light (%)",
    "fr_deep_pct": "FR Deep (%)",
    "fr_rem_pct": "FR REM (%)",
}


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path, payload: Dict[str, Any]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Report not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"Report {path} is not valid JSON: {e}")


# ============================================
# TABLES
# ============================================

def format_table(df: pd.DataFrame, float_format: str = "{:.4f}") -> str:
    return df.to_string(index=False, float_format=lambda v: float_format.format(v))


def comparison_table(reports: Sequence[Tuple[str, Dict[str, Any]]]) -> pd.DataFrame:
    """One row per method: kappa, accuracy, model size and inference time where recorded."""
    rows = []
    for name, report in reports:
        if "kappa" not in report or "accuracy" not in report:
            raise DataError(f"Report '{name}' has no kappa/accuracy")
        params = report.get("parameters")
        rows.append({
            "Method": name,
            "κ": report["kappa"],
            "Acc": report["accuracy"],
            "Light recall": report.get("light_recall", float("nan")),
            "Model Size": f"{params / 1e6:.2f}M" if params else "-",
            "Infer. ms": report.get("infer_ms", float("nan")),
        })
    return pd.DataFrame(rows)


def sweep_table(df: pd.DataFrame) -> pd.DataFrame:
    table = df.rename(columns={"window": "Window", "kappa": "κ", "accuracy": "Acc",
                               "params": "Params", "infer_ms": "Infer. ms", "depth": "Depth"})
    return table.drop(columns=["epochs"], errors="ignore")


# ============================================
# FIGURES
# ============================================

def _save_svg(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(path, format="svg", metadata={"Date": None})
    plt.close()


def plot_alpha_curve(curve: Sequence[Sequence[float]], path, best_alpha: float = None):
    """Validation kappa against the score-fusion weight alpha."""
    alphas = [float(a) for a, _ in curve]
    kappas = [float(k) for _, k in curve]
    plt.figure(figsize=(6, 4))
    plt.plot(alphas, kappas, marker="o", color=(0, 0, 0.9, 0.8))
    if best_alpha is not None:
        plt.axvline(best_alpha, linestyle="dashdot", color=(0.9, 0, 0, 0.7), label=f"α* = {best_alpha:.1f}")
        plt.legend()
    plt.grid()
    plt.xlabel("α (PPG weight)")
    plt.ylabel("Validation κ")
    plt.title("Score-level fusion: κ vs. α")
    _save_svg(path)


def plot_measure_mae(reports: Sequence[Tuple[str, Dict[str, Any]]], path):
    """Grouped bars of sleep-measure MAE per method."""
    usable = [(name, r["sleep_measures_mae"]) for name, r in reports if "sleep_measures_mae" in r]
    if not usable:
        raise DataError("None of the reports carries sleep-measure MAE")
    x = np.arange(len(MEASURE_KEYS))
    width = 0.8 / len(usable)
    plt.figure(figsize=(8, 4.5))
    for i, (name, mae) in enumerate(usable):
        plt.bar(x + i * width, [mae[k] for k in MEASURE_KEYS], width, label=name)
    plt.xticks(x + width * (len(usable) - 1) / 2, [MEASURE_LABELS[k] for k in MEASURE_KEYS])
    plt.grid(axis="y")
    plt.ylabel("Mean absolute error")
    plt.legend()
    plt.title("Sleep measure MAE")
    _save_svg(path)


def compare_reports(paths: Sequence[str], out_dir) -> Dict[str, str]:
    """Comparison table (text + JSON) and figures for a set of evaluation reports."""
    out_dir = Path(out_dir)
    reports: List[Tuple[str, Dict[str, Any]]] = [(Path(p).stem, read_json(p)) for p in paths]
    table = comparison_table(reports)
    written = {"table": str(out_dir / "comparison.txt"), "json": str(out_dir / "comparison.json")}
    out_dir.mkdir(parents=True, exist_ok=True)
    Path(written["table"]).write_text(format_table(table) + "\n", encoding="utf-8")
    write_json(written["json"], {"rows": table.to_dict(orient="records")})
    if any("sleep_measures_mae" in r for _, r in reports):
        written["mae_svg"] = str(out_dir / "measure_mae.svg")
        plot_measure_mae(reports, written["mae_svg"])
    for name, report in reports:
        if "alpha_curve" in report:
            written[f"alpha_svg_{name}"] = str(out_dir / f"{name}_alpha.svg")
            plot_alpha_curve(report["alpha_curve"], written[f"alpha_svg_{name}"], report.get("alpha"))
    logger.info(f"[REPORT] compared {len(reports)} reports -> {out_dir}")
    return written
