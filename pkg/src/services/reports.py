#!/usr/bin/env python3
"""
Report documents.

An EvalReport is written as an INI document (the same text format as dataset
manifests) or as a single-row CSV with a fixed column set. The confusion
matrix can additionally be exported as its own CSV.
"""
import csv
import io
import logging
from pathlib import Path

import numpy as np

from .base import format_list, new_config, parse_id_list, read_ini, write_ini
from .exceptions import ValidationError
from .metrics import EvalReport

logger = logging.getLogger('lse')

CSV_FIELDS = ("scenario", "per_class_accuracy", "per_image_accuracy", "top1", "top5", "map",
              "test_instances", "candidates", "lambda", "latent_dim", "fast", "warnings")
SUMMARY_COLUMNS = ("U-U", "S-S", "U-T", "S-T")


def _number(value):
    return "" if value is None else repr(float(value))


def report_to_config(report, include_timings=False):
    config = new_config()
    config["report"] = {"scenario": report.scenario, "test_instances": str(report.test_instances)}
    if report.per_class_accuracy is not None:
        config["report"]["per_class_accuracy"] = _number(report.per_class_accuracy)
        config["report"]["per_image_accuracy"] = _number(report.per_image_accuracy)
    if report.map_score is not None:
        config["report"]["map"] = _number(report.map_score)
    if report.topk:
        config["topk"] = {str(k): _number(v) for k, v in sorted(report.topk.items())}
    if report.hyper:
        config["hyper"] = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in report.hyper.items()}
    config["candidates"] = {"class_ids": format_list(report.class_ids)}
    if report.class_id_map:
        config["class_names"] = {str(k): v for k, v in sorted(report.class_id_map.items())}
    if report.per_class:
        config["per_class"] = {str(k): _number(v) for k, v in sorted(report.per_class.items())}
    if report.confusion is not None:
        config["confusion"] = {str(c): format_list(int(v) for v in row)
                               for c, row in zip(report.class_ids, report.confusion)}
    if report.extras:
        config["extras"] = {k: str(v) for k, v in sorted(report.extras.items())}
    if report.warnings:
        config["warnings"] = {f"w{i}": w for i, w in enumerate(report.warnings)}
    if include_timings and report.timings:
        config["timings"] = {k: _number(v) for k, v in sorted(report.timings.items())}
    return config


def report_to_text(report, include_timings=False):
    out = io.StringIO()
    report_to_config(report, include_timings).write(out)
    return out.getvalue()


def write_report(report, path, include_timings=False):
    write_ini(report_to_config(report, include_timings), path)
    logger.info(f"Wrote {report.scenario} report to {path}")


def read_report(path):
    """Load a report document written by write_report"""
    config = read_ini(path)
    if not config.has_section("report"):
        raise ValidationError(f"{path} is not a report document", contract="report-format")
    section = config["report"]

    def optional(key):
        return float(section[key]) if key in section else None

    class_ids = tuple(parse_id_list(config.get("candidates", "class_ids", fallback=""), "candidates.class_ids"))
    confusion = None
    if config.has_section("confusion"):
        confusion = np.array([parse_id_list(config.get("confusion", str(c)), "confusion") for c in class_ids],
                             dtype=np.int64).reshape(len(class_ids), len(class_ids))
    extras = dict(config["extras"]) if config.has_section("extras") else {}
    if confusion is None:
        extras["test_instances"] = int(section.get("test_instances", "0"))

    def section_dict(name, cast):
        return {cast(k): v for k, v in config[name].items()} if config.has_section(name) else {}

    return EvalReport(
        scenario=section["scenario"],
        per_class_accuracy=optional("per_class_accuracy"),
        per_image_accuracy=optional("per_image_accuracy"),
        topk={int(k): float(v) for k, v in section_dict("topk", int).items()},
        map_score=optional("map"),
        confusion=confusion,
        class_ids=class_ids,
        class_id_map=section_dict("class_names", int),
        per_class={k: float(v) for k, v in section_dict("per_class", int).items()},
        hyper=section_dict("hyper", str),
        warnings=tuple(config["warnings"].values()) if config.has_section("warnings") else (),
        timings={k: float(v) for k, v in section_dict("timings", str).items()},
        extras=extras,
    )


def report_row(report):
    return {
        "scenario": report.scenario,
        "per_class_accuracy": _number(report.per_class_accuracy),
        "per_image_accuracy": _number(report.per_image_accuracy),
        "top1": _number(report.topk.get(1)),
        "top5": _number(report.topk.get(5)),
        "map": _number(report.map_score),
        "test_instances": str(report.test_instances),
        "candidates": " ".join(str(c) for c in report.class_ids),
        "lambda": str(report.hyper.get("lambda", "")),
        "latent_dim": str(report.hyper.get("latent_dim", "")),
        "fast": str(report.hyper.get("fast", "")).lower(),
        "warnings": str(len(report.warnings)),
    }


def reports_to_csv(reports):
    """Stable-schema CSV, one row per report"""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CSV_FIELDS, lineterminator='\n')
    writer.writeheader()
    for report in reports:
        writer.writerow(report_row(report))
    return out.getvalue()


def confusion_to_csv(report):
    if report.confusion is None:
        raise ValidationError(f"{report.scenario} report has no confusion matrix", contract="confusion")
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(["truth\\predicted"] + [str(c) for c in report.class_ids])
    for c, row in zip(report.class_ids, report.confusion):
        writer.writerow([str(c)] + [str(int(v)) for v in row])
    return out.getvalue()


def write_confusion_csv(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(confusion_to_csv(report), encoding='utf-8')


def headline(report):
    """The score a summary table shows for a report"""
    if report.scenario == "ZSR":
        return report.map_score
    return report.per_class_accuracy


def summary_rows(results):
    """
    Rows of the method x scenario table

    Args:
        results (dict): method name -> {scenario: EvalReport}
    """
    columns = list(SUMMARY_COLUMNS)
    extra = sorted({s for reports in results.values() for s in reports} - set(columns))
    columns += extra
    rows = []
    for method, reports in results.items():
        rows.append([method] + [headline(reports[s]) if s in reports else None for s in columns])
    return ["method"] + columns, rows


def summary_csv(results):
    header, rows = summary_rows(results)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([row[0]] + [_number(v) for v in row[1:]])
    return out.getvalue()


def summary_text(results):
    """Fixed-width table with scores in percent"""
    header, rows = summary_rows(results)
    cells = [header] + [[row[0]] + ["-" if v is None else f"{100.0 * v:.1f}" for v in row[1:]] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in cells]
    return "\n".join(lines) + "\n"


def table_to_csv(rows, fields):
    """CSV of a list of dicts (grid search or sweep tables)"""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(fields), lineterminator='\n', extrasaction='ignore')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row.get(k) is None else row.get(k) for k in fields})
    return out.getvalue()


def table_to_text(rows, fields):
    cells = [list(fields)] + [["-" if row.get(k) is None else str(row.get(k)) for k in fields] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(fields))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"

