# backend/services/reporting.py
"""
Tables and figures built from the results store.

Everything here is a pure function of the record frame: the same records give
the same tables and the same figure data.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from constants import (
    REFERENCE_PARTS_F1_CUB, REFERENCE_PARTS_ZSL_PEARSON, REFERENCE_TRE_RATIO_CUB, REFERENCE_ZSL_CUB, RESULTS_COLUMNS,
)
from models.enums import LocalLoss, ReportTable
from utils.errors import DegenerateSeriesError
from utils.statistics import correlation

logger = logging.getLogger(__name__)

# metric names written by the controllers
METRIC_ZSL = "zsl_top1"
METRIC_PARTS_F1 = "parts_f1"
METRIC_TRE_RATIO = "tre_ratio"
LOCAL_METRIC_PREFIX = "local_top1:"
POOL_METRIC_PREFIX = "pool_top1:"

CELL_KEYS = ["dataset", "objective", "encoder", "local_loss"]


def _frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    return pd.DataFrame([r.model_dump() for r in records], columns=RESULTS_COLUMNS)


def _metric(frame: pd.DataFrame, metric: str) -> pd.DataFrame:
    return frame[frame["metric"] == metric]


def _cell_means(frame: pd.DataFrame, metric: str) -> pd.Series:
    """Seed-averaged value per (dataset, objective, encoder, local_loss)."""
    return _metric(frame, metric).groupby(CELL_KEYS)["value"].mean()


def _flatten(pivot: pd.DataFrame) -> pd.DataFrame:
    pivot.columns = ["/".join(str(p) for p in col) if isinstance(col, tuple) else str(col)
                     for col in pivot.columns]
    return pivot


# ==========================================
# TABLES
# ==========================================

def _zsl_table(frame: pd.DataFrame) -> pd.DataFrame:
    values = _metric(frame, METRIC_ZSL)
    if values.empty:
        return pd.DataFrame()
    table = _flatten(values.pivot_table(index=["objective", "dataset"], columns=["encoder", "local_loss"],
                                        values="value", aggfunc="mean"))
    for column in list(table.columns):
        encoder, local_loss = column.split("/")
        table[f"{column} (ref)"] = [
            REFERENCE_ZSL_CUB.get((objective, encoder, local_loss), np.nan) if dataset.upper() == "CUB" else np.nan
            for objective, dataset in table.index
        ]
    return table.sort_index(axis=0).sort_index(axis=1)


def _parts_table(frame: pd.DataFrame) -> pd.DataFrame:
    values = _metric(frame, METRIC_PARTS_F1)
    if values.empty:
        return pd.DataFrame()
    table = _flatten(values.pivot_table(index=["objective", "dataset", "encoder"], columns=["local_loss"],
                                        values="value", aggfunc="mean"))
    for column in list(table.columns):
        table[f"{column} (ref)"] = [
            REFERENCE_PARTS_F1_CUB.get((objective, column), np.nan)
            if dataset.upper() == "CUB" and encoder == "basic" else np.nan
            for objective, dataset, encoder in table.index
        ]
    return table.sort_index(axis=0).sort_index(axis=1)


def _tre_table(frame: pd.DataFrame) -> pd.DataFrame:
    values = _metric(frame, METRIC_TRE_RATIO)
    if values.empty:
        return pd.DataFrame()
    table = _flatten(values.pivot_table(index=["objective", "dataset"], columns=["encoder", "local_loss"],
                                        values="value", aggfunc="mean"))
    table["reference"] = [
        REFERENCE_TRE_RATIO_CUB.get(objective, np.nan) if dataset.upper() == "CUB" else np.nan
        for objective, dataset in table.index
    ]
    return table.sort_index(axis=0).sort_index(axis=1)


def _local_table(frame: pd.DataFrame) -> pd.DataFrame:
    mask = frame["metric"].str.startswith(LOCAL_METRIC_PREFIX) | frame["metric"].str.startswith(POOL_METRIC_PREFIX)
    values = frame[mask]
    if values.empty:
        return pd.DataFrame()
    table = values.pivot_table(index=["objective", "dataset", "encoder", "local_loss"], columns="metric",
                               values="value", aggfunc="mean")
    table.columns = [str(c) for c in table.columns]
    return table.sort_index(axis=0).sort_index(axis=1)


TABLE_BUILDERS = {
    ReportTable.ZSL: _zsl_table,
    ReportTable.PARTS: _parts_table,
    ReportTable.TRE: _tre_table,
    ReportTable.LOCAL: _local_table,
}


def report_table(records, table: Union[str, ReportTable]) -> pd.DataFrame:
    """Seed-averaged table of one metric family; CUB rows carry reference columns."""
    return TABLE_BUILDERS[ReportTable(table)](_frame(records))


def format_table(table: pd.DataFrame) -> str:
    if table.empty:
        return "(no records)"
    return table.to_string(float_format=lambda v: f"{v:.3f}", na_rep="-")


def relative_improvement(records) -> pd.DataFrame:
    """(acc_local - acc_none) / acc_none per (dataset, objective, encoder) and local loss."""
    means = _cell_means(_frame(records), METRIC_ZSL)
    rows = []
    for (dataset, objective, encoder, local_loss), value in means.items():
        if local_loss == LocalLoss.NONE.value:
            continue
        base = means.get((dataset, objective, encoder, LocalLoss.NONE.value))
        if base is None or base == 0:
            continue
        rows.append({"dataset": dataset, "objective": objective, "encoder": encoder,
                     "local_loss": local_loss, "improvement": (value - base) / base})
    return pd.DataFrame(rows, columns=["dataset", "objective", "encoder", "local_loss", "improvement"])


# ==========================================
# FIGURES
# ==========================================

@dataclass
class FigureSet:
    paths: Dict[str, Path] = field(default_factory=dict)
    missing: Dict[str, List[str]] = field(default_factory=dict)
    correlation_r: float = float("nan")
    reference_r: float = REFERENCE_PARTS_ZSL_PEARSON


def _save(fig, data: pd.DataFrame, out_dir: Path, name: str, figures: FigureSet) -> None:
    png, csv = out_dir / f"{name}.png", out_dir / f"{name}.csv"
    fig.savefig(png, bbox_inches="tight")
    plt.close(fig)
    data.to_csv(csv, index=False)
    figures.paths[name] = png
    figures.paths[f"{name}_data"] = csv


def _label(keys: Tuple) -> str:
    return "/".join(str(k) for k in keys)


def _scatter(frame: pd.DataFrame, out_dir: Path, figures: FigureSet) -> None:
    f1 = _cell_means(frame, METRIC_PARTS_F1)
    zsl = _cell_means(frame, METRIC_ZSL)
    paired = pd.concat([f1.rename("parts_f1"), zsl.rename("zsl_top1")], axis=1)
    figures.missing["parts_vs_zsl"] = [_label(k) for k, row in paired.iterrows() if row.isna().any()]
    paired = paired.dropna().reset_index()

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(paired["parts_f1"], paired["zsl_top1"])
    for _, row in paired.iterrows():
        ax.annotate(f"{row['objective']}/{row['local_loss']}", (row["parts_f1"], row["zsl_top1"]), fontsize=6)
    try:
        result = correlation(paired["parts_f1"], paired["zsl_top1"])
        figures.correlation_r = result.r
        ax.set_title(f"Pearson r = {result.r:.2f} (reference {figures.reference_r:.2f})")
    except DegenerateSeriesError:
        ax.set_title("too few points for a correlation")
    ax.set_xlabel("parts F1")
    ax.set_ylabel("ZSL top-1")
    _save(fig, paired, out_dir, "parts_vs_zsl", figures)


def _improvement_bars(frame: pd.DataFrame, out_dir: Path, figures: FigureSet) -> None:
    zsl = _cell_means(frame, METRIC_ZSL)
    figures.missing["relative_improvement"] = [
        _label(k) for k in zsl.index
        if k[3] != LocalLoss.NONE.value and (k[0], k[1], k[2], LocalLoss.NONE.value) not in zsl.index
    ]
    data = relative_improvement(frame)

    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{r.dataset}/{r.objective}/{r.encoder}/{r.local_loss}" for r in data.itertuples()]
    ax.bar(range(len(data)), data["improvement"].to_numpy())
    ax.set_xticks(range(len(data)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=6)
    ax.axhline(0.0, color="black", linewidth=0.5)
    ax.set_ylabel("relative ZSL improvement")
    _save(fig, data, out_dir, "relative_improvement", figures)


def _metric_bars(frame: pd.DataFrame, prefix: str, name: str, out_dir: Path, figures: FigureSet) -> None:
    values = frame[frame["metric"].str.startswith(prefix)]
    data = values.groupby(CELL_KEYS + ["metric"])["value"].mean().reset_index()
    data["variant"] = data["metric"].astype(str).str[len(prefix):]
    lookup = {(tuple(row[k] for k in CELL_KEYS), row["variant"]): row["value"] for _, row in data.iterrows()}
    variants = sorted(data["variant"].unique())
    cells = sorted({cell for cell, _ in lookup})
    figures.missing[name] = [f"{_label(cell)}:{v}" for cell in cells for v in variants if (cell, v) not in lookup]

    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(variants), 1)
    for j, variant in enumerate(variants):
        heights = [lookup.get((cell, variant), np.nan) for cell in cells]
        ax.bar(np.arange(len(cells)) + j * width, heights, width=width, label=variant)
    ax.set_xticks(np.arange(len(cells)))
    ax.set_xticklabels([_label(c) for c in cells], rotation=60, ha="right", fontsize=6)
    ax.set_ylabel("ZSL top-1")
    if variants:
        ax.legend(fontsize=6)
    _save(fig, data.drop(columns=["variant"]), out_dir, name, figures)


def emit_figures(records, out_dir: Union[str, Path]) -> FigureSet:
    """Scatter, relative-improvement bars, aggregation and pool comparisons, each with a CSV sidecar."""
    frame = _frame(records)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    figures = FigureSet()
    _scatter(frame, out_dir, figures)
    _improvement_bars(frame, out_dir, figures)
    _metric_bars(frame, LOCAL_METRIC_PREFIX, "aggregation", out_dir, figures)
    _metric_bars(frame, POOL_METRIC_PREFIX, "pool", out_dir, figures)
    for name, cells in figures.missing.items():
        if cells:
            logger.warning(f"[Report] {name}: {len(cells)} missing cells: {cells[:10]}")
    return figures
