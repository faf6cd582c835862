"""Text tables, relative effects and reproducible output files."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .effects import EffectTable, contrasts, p_value, stars
from .errors import UsageError
from .heterogeneity import WaldResult
from .sample import ARM_NAMES, N_ARMS

CONFIG_PREFIX = "config: "
ARM_LABELS = tuple(a.capitalize() for a in ARM_NAMES)


def relative_effect(effect_pp: float, baseline_po: float) -> float:
    """Effect as a percentage of the baseline potential outcome (same units)."""
    if not baseline_po > 0:
        raise UsageError("baseline potential outcome must be positive")
    return 100.0 * effect_pp / baseline_po


# --------------------------------------------------------------------------
# Cells and tables


def format_cell(effect: float, se: float | None = None, p: float | None = None,
                scale: float = 100.0, digits: int = 2) -> str:
    """``"0.18 (0.15)"`` style cell; stars follow the estimate when ``p`` is given."""
    text = f"{scale * effect:.{digits}f}"
    if p is not None:
        text += stars(p)
    if se is not None:
        text += f" ({scale * se:.{digits}f})"
    return text


def render_effect_matrix(po, po_se, effect, se, p=None, title: str = "", scale: float = 100.0,
                         digits: int = 2, width: int = 10) -> str:
    """Potential outcomes on the diagonal, row-minus-column effects below it.

    Standard errors go in parentheses on the line under each row.  Values are
    multiplied by ``scale`` (percentage points by default); stars mark the
    effects' p-values.
    """
    po = np.asarray(po, dtype=float)
    po_se = np.asarray(po_se, dtype=float)
    effect = np.asarray(effect, dtype=float)
    se = np.asarray(se, dtype=float)
    p = p_value(effect, se) if p is None else np.asarray(p, dtype=float)
    k = len(po)
    lab = max(len(x) for x in ARM_LABELS[:k]) + 2
    lines = [title] if title else []
    lines.append(" " * lab + "".join(f"{a:>{width}}" for a in ARM_LABELS[:k]))
    for m in range(k):
        cells = [f"{scale * effect[m, l]:.{digits}f}{stars(p[m, l]):<3}" for l in range(m)]
        cells.append(f"{scale * po[m]:.{digits}f}   ")
        lines.append(f"{ARM_LABELS[m]:<{lab}}" + "".join(f"{c:>{width}}" for c in cells).rstrip())
        ses = [f"({scale * se[m, l]:.{digits}f})   " for l in range(m)]
        ses.append(f"({scale * po_se[m]:.{digits}f})   ")
        lines.append(" " * lab + "".join(f"{c:>{width}}" for c in ses).rstrip())
    return "\n".join(lines) + "\n"


def render_effect_table(table: EffectTable, title: str = "", scale: float = 100.0) -> str:
    text = render_effect_matrix(table.po, table.po_se, table.effect, table.se, table.p,
                                title or table.label, scale)
    flagged = [f"{ARM_NAMES[m]}-{ARM_NAMES[l]}" for m, l in contrasts(N_ARMS) if table.unreliable(m, l)]
    text += f"n used {table.n_used}, unsupported {table.n_unsupported}\n"
    if flagged:
        text += f"low effective sample size: {', '.join(flagged)}\n"
    return text


def render_side_by_side(left: str, right: str, gap: int = 4) -> str:
    a, b = left.rstrip("\n").split("\n"), right.rstrip("\n").split("\n")
    w = max(len(x) for x in a) + gap
    n = max(len(a), len(b))
    a += [""] * (n - len(a))
    b += [""] * (n - len(b))
    return "\n".join((x.ljust(w) + y).rstrip() for x, y in zip(a, b)) + "\n"


def render_wald(results: dict[str, WaldResult]) -> str:
    """Statistic and p-value in percent per heterogeneity variable."""
    name_w = max([len(k) for k in results] + [8]) + 2
    lines = [f"{'Variable':<{name_w}}{'chi2':>10}{'df':>5}{'p (%)':>10}"]
    for name, r in results.items():
        lines.append(f"{name:<{name_w}}{r.statistic:>10.2f}{r.df:>5d}{100 * r.p:>10.2f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Config embedding


def config_line(config: dict) -> str:
    return CONFIG_PREFIX + json.dumps(config, sort_keys=True, separators=(",", ":"))


def header_lines(command: str, config: dict) -> list[str]:
    return [f"honestforest {command}", config_line(config)]


def with_header(text: str, command: str, config: dict) -> str:
    return "".join(f"# {h}\n" for h in header_lines(command, config)) + text


def json_document(command: str, config: dict, payload: dict) -> str:
    doc = {"command": command, "config": config, **payload}
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=True) + "\n"


def read_embedded_config(path) -> dict:
    """Config from a JSON file: a bare config, or any output carrying a "config"
    key, or a text/CSV output with an embedded ``# config:`` line."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(stripped)
        return data["config"] if isinstance(data.get("config"), dict) else data
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        body = line[1:].strip()
        if body.startswith(CONFIG_PREFIX):
            return json.loads(body[len(CONFIG_PREFIX):])
    raise UsageError(f"{path}: no embedded configuration found")


def write_text(path, text: str):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc
