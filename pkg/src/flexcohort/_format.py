"""Uniform CSV / aligned-text rendering for every report the package writes."""

from __future__ import annotations

import math
from typing import Sequence


def fmt_num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool,)):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return "%.6g" % x


def _cell(x) -> str:
    return x if isinstance(x, str) else fmt_num(x)


def render(columns: Sequence[str], rows: Sequence[Sequence], fmt: str = "csv") -> str:
    cells = [[_cell(v) for v in row] for row in rows]
    if fmt == "csv":
        return "\n".join([",".join(columns)] + [",".join(r) for r in cells]) + "\n"
    if fmt == "text":
        widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
        line = lambda r: "  ".join(v.rjust(w) for v, w in zip(r, widths)).rstrip()
        return "\n".join([line(columns), line(["-" * w for w in widths])] + [line(r) for r in cells]) + "\n"
    raise ValueError(f"unknown format {fmt!r}")
