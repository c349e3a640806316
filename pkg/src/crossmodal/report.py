"""Plain-text tables in the layout of the cross-modal, layer and within-modal comparisons."""
from __future__ import annotations

from typing import Mapping, Sequence

from .curriculum import MethodId


def method_label(method: str) -> str:
    try:
        return MethodId(method).label
    except ValueError:
        return method


def _fmt(v: float) -> str:
    return f"{v:.1f}"


def _grid(header: list[list[str]], rows: list[list[str]]) -> str:
    table = header + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    lines = []
    for j, r in enumerate(table):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if j == len(header) - 1:
            lines.append("-" * len(lines[-1]))
    return "\n".join(lines)


def cross_modal_table(reports: Mapping[str, dict], layer: str) -> str:
    """Rows = methods; column groups = query modality; columns = target modality; then Mean mAP."""
    if not reports:
        return ""
    mods = next(iter(reports.values()))["modalities"]
    pairs = [(q, t) for q in mods for t in mods if q != t]
    query_row = ["Query"] + [q.upper() if t == next(x for x in mods if x != q) else "" for q, t in pairs] + [""]
    target_row = ["Target"] + [t.upper() for _, t in pairs] + ["Mean mAP"]
    rows = []
    for method, rep in reports.items():
        rows.append([method_label(method)] + [_fmt(rep["map"][q][t]) for q, t in pairs] + [_fmt(rep["mean"])])
    title = f"Cross-modal retrieval mAP ({layer} features)"
    return title + "\n" + _grid([query_row, target_row], rows)


def layer_table(means: Mapping[str, Mapping[str, float]], layers: Sequence[str]) -> str:
    header = [["Method"] + list(layers)]
    rows = [[method_label(m)] + [_fmt(v[l]) if l in v else "-" for l in layers] for m, v in means.items()]
    return "Mean cross-modal retrieval mAP across layers\n" + _grid(header, rows)


def within_table(reports: Mapping[str, dict], layer: str) -> str:
    if not reports:
        return ""
    mods = next(iter(reports.values()))["modalities"]
    header = [["Method"] + [m.upper() for m in mods] + ["Mean"]]
    rows = []
    for method, rep in reports.items():
        vals = [rep["within"][m] for m in mods]
        rows.append([method_label(method)] + [_fmt(v) for v in vals] + [_fmt(sum(vals) / len(vals))])
    return f"Within-modal retrieval mAP ({layer} features)\n" + _grid(header, rows)


def consistency_table(summaries: Mapping[str, dict], layer: str) -> str:
    header = [["Method", "units", "mean", "median"]]
    rows = [[method_label(m), str(s["units"]), f"{s['mean']:.3f}", f"{s['median']:.3f}"] for m, s in summaries.items()]
    return f"Unit consistency ({layer})\n" + _grid(header, rows)
