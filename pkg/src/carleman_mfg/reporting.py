"""Bit-stable CSV/JSON emission for all run kinds.

Every output file starts with a header carrying the schema version, the seed,
and the config hash: CSV and text files as a leading `#` line, JSON as the
first key of the document.  Numbers are written in fixed-precision scientific
notation so diffs are stable across platforms; re-running the same config and
seed reproduces every byte.
"""

from __future__ import annotations

import json
import math
import os

from .config import SCHEMA_VERSION


def _fmt(value, precision=12):
    if value is None:
        return "nan"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float) and (math.isnan(value) or math.isinf(value)):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, float):
        return f"{value:.{precision}e}"
    return str(value)


def header_line(meta):
    return (
        f"# carleman-mfg schema={meta['schema']} seed={meta['seed']} "
        f"config={meta['config']}"
    )


def make_meta(seed, cfg_hash, subcommand):
    return {
        "schema": SCHEMA_VERSION,
        "seed": int(seed),
        "config": cfg_hash,
        "subcommand": subcommand,
    }


def write_csv(path, meta, columns, rows, precision=12):
    lines = [header_line(meta), ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v, precision) for v in row))
    _write_text(path, "\n".join(lines) + "\n")


def write_json(path, meta, payload):
    doc = {"header": meta}
    doc.update(payload)
    _write_text(path, json.dumps(_jsonable(doc), indent=2) + "\n")


def write_resolved_config(path, meta, text):
    _write_text(path, header_line(meta) + "\n" + text)


def _write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return None
        return obj
    if hasattr(obj, "item") and callable(obj.item):  # numpy scalars
        return _jsonable(obj.item())
    return obj


# -- payload builders ---------------------------------------------------------


def estimate_rows(reports):
    """CSV rows (estimate_id, lambda, s, side, term, value) for reports."""
    rows = []
    for rep in reports:
        for term in sorted(rep.lhs_terms):
            rows.append([rep.estimate_id, rep.lam, rep.s, "lhs", term,
                         rep.lhs_terms[term]])
        for term in sorted(rep.rhs_terms):
            rows.append([rep.estimate_id, rep.lam, rep.s, "rhs", term,
                         rep.rhs_terms[term]])
        rows.append([rep.estimate_id, rep.lam, rep.s, "summary", "lhs_total",
                     rep.lhs_total])
        rows.append([rep.estimate_id, rep.lam, rep.s, "summary", "rhs_total",
                     rep.rhs_total])
        rows.append([rep.estimate_id, rep.lam, rep.s, "summary", "ratio",
                     rep.ratio])
    return rows


def report_payload(rep):
    return {
        "estimate_id": rep.estimate_id,
        "s": rep.s,
        "lam": rep.lam,
        "lhs_terms": {k: rep.lhs_terms[k] for k in sorted(rep.lhs_terms)},
        "rhs_terms": {k: rep.rhs_terms[k] for k in sorted(rep.rhs_terms)},
        "lhs_total": rep.lhs_total,
        "rhs_total": rep.rhs_total,
        "ratio": rep.ratio,
        "violation_candidate": rep.violation_candidate,
        "extras": {k: rep.extras[k] for k in sorted(rep.extras)},
    }


def sweep_payload(sween):
    return {
        "estimate_id": sween.estimate_id,
        "s_values": list(sween.s_values),
        "lam_values": list(sween.lam_values),
        "max_ratio": sween.max_ratio,
        "c1_fit": sween.c1_fit,
        "s0_by_lam": {str(k): v for k, v in sorted(sween.s0_by_lam.items())},
        "points": [report_payload(p) for p in sween.points],
    }


def stability_rows(run):
    rows = []
    for d, e in run.points:
        rows.append([d, e, math.log10(d), math.log10(e) if e > 0 else float("nan")])
    return rows


def write_fields_csv(path, meta, grid, named_fields, precision=12):
    """Dense field export: one row per node, coordinates then field columns."""
    names = list(named_fields)
    axes = grid.space_axes()
    times = grid.times()
    columns = [f"x{i}" for i in range(grid.dim)] + ["t"] + names
    rows = []
    if grid.dim == 1:
        for i, x in enumerate(axes[0]):
            for k, t in enumerate(times):
                rows.append([x, t] + [named_fields[n].values[i, k] for n in names])
    else:
        for i, x in enumerate(axes[0]):
            for j, y in enumerate(axes[1]):
                for k, t in enumerate(times):
                    rows.append([x, y, t]
                                + [named_fields[n].values[i, j, k] for n in names])
    write_csv(path, meta, columns, rows, precision)
