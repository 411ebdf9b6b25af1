# backend/controllers/report_controller.py
"""Controller for report: tables from the results store, optional figures."""
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from core.container import ServiceContainer
from services.reporting import emit_figures, format_table, report_table

logger = logging.getLogger(__name__)


def report_command(container: ServiceContainer, table: str = "zsl",
                   figures_dir: Optional[str] = None) -> Dict[str, Any]:
    store = container.get_results_store()
    store.compact()
    records = store.read()
    text = format_table(report_table(records, table))
    summary: Dict[str, Any] = {"table": table, "records": len(records), "text": text}
    if figures_dir:
        figures = emit_figures(records, Path(figures_dir))
        summary["figures"] = {k: str(v) for k, v in figures.paths.items()}
        summary["missing"] = figures.missing
    return summary
