"""Versioned CSV writers for ledgers, retrieval reports and ablation sweeps."""
from __future__ import annotations

import csv
import io
from pathlib import Path

from .protocols import PUBLISHED_TOTAL, REFERENCE_PERCENT, ParameterLedger
from .retrieval import MEDIAN_RULE, TIE_RULE

LEDGER_SCHEMA = "voplab-ledger/1"
REPORT_SCHEMA = "voplab-report/1"
ABLATION_SCHEMA = "voplab-ablation/1"
BANNER = "toy-scale, not comparable in magnitude"

METRIC_COLUMNS = [f"{d}_{m}" for d in ("t2v", "v2t")
                  for m in ("R@1", "R@5", "R@10", "MnR", "MdR")]

LEDGER_NOTES = {
    "full": "reconstructed backbone exceeds the 119.8M reference total; both percentages shown",
    "bias": "counts LayerNorm shifts as biases",
    "partial": "last vision block plus both projections",
    "vop_c": "BiLSTM with two bias vectors per direction",
    "vop_f": "includes the frame positional embedding",
    "vop_fp": "includes the frame positional embedding",
    "vop_fc": "includes the frame positional embedding; CMM and FC at full width",
}

_PCT = f"percent_vs_{PUBLISHED_TOTAL / 1e6:.1f}M"


def _fmt(v) -> str:
    if isinstance(v, float):
        text = f"{v:.3f}"
        return "0.000" if text == "-0.000" else text
    return str(v)


def render(schema: str, header: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(h, "")) for h in header])
    return buf.getvalue()


def write_csv(path, schema: str, header: list[str], rows: list[dict]) -> str:
    text = render(schema, header, rows)
    Path(path).write_text(text, encoding="utf-8")
    return text


def read_csv(path) -> tuple[str, list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise ValueError(f"{path}: missing schema header")
    schema = lines[0][len("# schema: "):]
    return schema, list(csv.DictReader(lines[1:]))


LEDGER_HEADER = ["method", "trainable", "total", _PCT, "percent_vs_reconstructed",
                 "reference_percent", "residual_points", "note"]


def ledger_row(kind: str, ledger: ParameterLedger) -> dict:
    ref = REFERENCE_PERCENT.get(kind)
    return {
        "method": kind,
        "trainable": ledger.trainable_total,
        "total": ledger.backbone_total,
        _PCT: ledger.percent,
        "percent_vs_reconstructed": ledger.percent_vs_reconstructed,
        "reference_percent": "" if ref is None else ref,
        "residual_points": "" if ref is None else ledger.percent - ref,
        "note": LEDGER_NOTES.get(kind, ""),
    }


REPORT_HEADER = ["method", "split", "params", "percent_vs_reconstructed"] + METRIC_COLUMNS + [
    "tie_rule", "median_rule", "scale"]


def report_row(method: str, split: str, ledger: ParameterLedger, metrics: dict) -> dict:
    row = {"method": method, "split": split, "params": ledger.trainable_total,
           "percent_vs_reconstructed": ledger.percent_vs_reconstructed,
           "tie_rule": TIE_RULE, "median_rule": MEDIAN_RULE, "scale": BANNER}
    row.update(metrics)
    return row


ABLATION_HEADER = ["axis", "value", "layers", "params", "lr"] + METRIC_COLUMNS + ["scale"]
