"""Parsers for the harness's output files.

Each reader validates the columns it needs and raises PlotSchemaError
naming the first missing column, so a mismatched file fails loudly.
"""

from __future__ import annotations

import csv
import re


class PlotSchemaError(ValueError):
    """An input file does not match the expected schema."""


def _read_csv(path: str, required: list[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise PlotSchemaError(f"{path}: missing required column {col!r}")
        return list(reader)


def _maybe_float(s: str) -> float:
    if s is None or s == "":
        return float("nan")
    return float(s)


def read_theory_csv(path: str) -> list[dict]:
    rows = _read_csv(path, ["setting", "student", "B_star", "k", "p", "M",
                            "sigma_obs", "sigma_ext", "theory", "mc_mean", "mc_sem"])
    out = []
    for r in rows:
        out.append({
            "setting": r["setting"],
            "student": r["student"],
            "B_star": _maybe_float(r["B_star"]),
            "k": _maybe_float(r["k"]),
            "M": _maybe_float(r["M"]),
            "sigma_ext": _maybe_float(r["sigma_ext"]),
            "theory": _maybe_float(r["theory"]),
            "mc_mean": _maybe_float(r["mc_mean"]),
            "mc_sem": _maybe_float(r["mc_sem"]),
        })
    return out


def read_metrics_csv(path: str) -> dict[str, dict[str, float]]:
    """Flat (model_id, metric, value) rows -> {model_id: {metric: value}}."""
    rows = _read_csv(path, ["model_id", "metric", "value"])
    table: dict[str, dict[str, float]] = {}
    for r in rows:
        table.setdefault(r["model_id"], {})[r["metric"]] = _maybe_float(r["value"])
    return table


def read_crossdecode_csv(path: str):
    """(source, target, D) rows -> (model_ids, D matrix as nested lists)."""
    rows = _read_csv(path, ["source_id", "target_id", "method", "D"])
    ids: list[str] = []
    for r in rows:
        if r["source_id"] not in ids:
            ids.append(r["source_id"])
    lookup = {(r["source_id"], r["target_id"]): _maybe_float(r["D"]) for r in rows}
    matrix = [[lookup.get((u, v), float("nan")) for v in ids] for u in ids]
    return ids, matrix


_NODE_RE = re.compile(r'^\s*(\d+)\s*\[label="(\d+)",\s*weight=([0-9.eE+-]+)\];')
_EDGE_RE = re.compile(r"^\s*(\d+)\s*->\s*(\d+)\s*\[weight=([0-9.eE+-]+)(,\s*style=invis)?\];")


def read_dot(path: str):
    """Parse the harness's state-graph DOT output.

    Returns (node_weights {id: w}, edges [(src, dst, w, pruned)]).
    """
    nodes: dict[int, float] = {}
    edges: list[tuple[int, int, float, bool]] = []
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if "digraph" not in text:
        raise PlotSchemaError(f"{path}: not a digraph DOT file")
    for line in text.splitlines():
        m = _NODE_RE.match(line)
        if m:
            nodes[int(m.group(1))] = float(m.group(3))
            continue
        m = _EDGE_RE.match(line)
        if m:
            edges.append((int(m.group(1)), int(m.group(2)), float(m.group(3)),
                          m.group(4) is not None))
    if not nodes:
        raise PlotSchemaError(f"{path}: no nodes with weight attributes found")
    return nodes, edges
