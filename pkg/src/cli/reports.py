"""Report files: canonical JSON and a CSV mirror with one row per latency cell."""
import csv
import json
from pathlib import Path
from typing import Any, Literal, Union

from src.domain.metrics import EvalReport, LatencyReport
from src.utils import canonicalize_params

Report = Union[EvalReport, LatencyReport]

LATENCY_COLUMNS = ["resolution", "mode", "median", "p90", "pairs", "tokens", "status"]


def _summary_columns(report: Report) -> dict[str, Any]:
    if not isinstance(report, EvalReport):
        return {f"exponent_{mode}": value for mode, value in sorted(report.exponents.items())}
    summary = {"psnr_db": report.psnr_db, "ssim": report.ssim, "latent_std": report.latent_std}
    summary.update({f"frechet_{name}": value for name, value in sorted(report.frechet.items())})
    return summary


def write_report(report: Report, path: Union[str, Path], fmt: Literal["json", "csv"] = "json") -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            canonical_json, _ = canonicalize_params(report.model_dump(mode="json"))
            path.write_text(canonical_json + "\n", encoding="utf-8")
        elif fmt == "csv":
            summary = _summary_columns(report)
            fields = LATENCY_COLUMNS + list(summary) + ["config_hash"]
            with path.open("w", encoding="utf-8", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
                writer.writeheader()
                # without latency cells the summary still gets one row
                for row in report.latency_ms or [None]:
                    cells = row.model_dump(mode="json") if row is not None else {}
                    writer.writerow({**cells, **summary, "config_hash": report.config_hash})
        else:
            raise ValueError(f"unknown report format '{fmt}'")
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e
    return path


def read_report(path: Union[str, Path]) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_table(rows: list[dict[str, Any]], path: Union[str, Path]) -> Path:
    """Flat CSV of ablation rows; nested dicts become '<key>_<subkey>' columns."""
    flat = []
    for row in rows:
        out = {}
        for key, value in row.items():
            if isinstance(value, dict):
                out.update({f"{key}_{k}": v for k, v in sorted(value.items())})
            else:
                out[key] = value
        flat.append(out)
    fields = list(dict.fromkeys(k for row in flat for k in row))
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(flat)
    return path
