"""
D.I.S.C.O. Artifact Export
JSON reports, CSV tables, meta.json and SVG quick-look plots.

Every writer is deterministic: no timestamps, fixed float formatting, fixed
SVG element ids.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
from pydantic import BaseModel

from core.schemas import RunConfig, ScanTable
from utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

FLOAT_FORMAT = "%.17g"
PACKAGE = "disco"
VERSION = "1.0.0"

matplotlib.rcParams["svg.hashsalt"] = PACKAGE
matplotlib.rcParams["svg.fonttype"] = "none"


def ensure_dir(path: PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: PathLike, document: Union[BaseModel, Dict[str, Any], list]) -> Path:
    """Write a pydantic model (or plain JSON data) with stable indentation."""
    path = Path(path)
    if isinstance(document, BaseModel):
        text = document.model_dump_json(indent=2)
    else:
        text = json.dumps(document, indent=2, sort_keys=False)
    path.write_text(text + "\n", encoding="utf-8")
    logger.debug(f"wrote {path}")
    return path


def write_meta(out_dir: PathLike, command: str, config: RunConfig,
               extra: Optional[Dict[str, Any]] = None) -> Path:
    """meta.json: command, resolved configuration and tool version."""
    meta = {
        "tool": PACKAGE,
        "version": VERSION,
        "command": command,
        "config": config.model_dump(mode="json"),
    }
    if extra:
        meta.update(extra)
    return write_json(Path(out_dir) / "meta.json", meta)


def write_frame(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug(f"wrote {path} ({len(frame)} rows)")
    return path


def _coords(values: Sequence[float]) -> Union[float, str]:
    if len(values) == 1:
        return float(values[0])
    return ";".join(repr(float(v)) for v in values)


def scan_frame(table: ScanTable) -> pd.DataFrame:
    """beta, x0, class, terminal_x matrix of a scan (multi-dimensional states joined by ';')."""
    rows = [
        {
            "beta": cell.beta,
            "x0": _coords(cell.x0),
            "class": cell.label.value,
            "terminal_x": _coords(cell.terminal_x),
            "steps_to_target": cell.steps_to_target,
            "max_excursion": cell.max_excursion,
        }
        for cell in table.cells
    ]
    return pd.DataFrame(rows, columns=["beta", "x0", "class", "terminal_x", "steps_to_target", "max_excursion"])


def plot_trajectories_svg(path: PathLike, series: Iterable[Tuple[str, np.ndarray]],
                          title: str = "", ylabel: str = "x(k)",
                          hlines: Optional[Sequence[Tuple[str, float]]] = None) -> Path:
    """One polyline per labelled state sequence (first state coordinate against k)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, states in series:
        states = np.asarray(states, dtype=float).reshape(len(states), -1)
        ax.plot(np.arange(states.shape[0]), states[:, 0], marker=".", linewidth=1.2, label=label)
    for label, level in hlines or []:
        ax.axhline(level, color="grey", linestyle="--", linewidth=0.8, label=label)
    ax.set_xlabel("k")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.debug(f"wrote {path}")
    return path


def plot_value_function_svg(path: PathLike, nodes: np.ndarray, values: np.ndarray,
                            title: str = "", ylabel: str = "V(x)") -> Path:
    """Value function against the first state coordinate (1-D grids)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.asarray(nodes)[:, 0], values, linewidth=1.2)
    ax.set_xlabel("x")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
