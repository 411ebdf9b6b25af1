# backend/controllers/grid_controller.py
"""Controller for grid."""
import asyncio
import logging
import shlex
from typing import Any, Dict, Optional, Sequence

from config.run_config import load_grid
from jobs.grid_runner import DEFAULT_STEPS, GridRunner

logger = logging.getLogger(__name__)


def grid_command(spec_path: str, base_config: Optional[str] = None, out_dir: Optional[str] = None,
                 dry_run: bool = False, steps: Sequence[str] = DEFAULT_STEPS,
                 concurrency: Optional[int] = None,
                 extra_args: Sequence[str] = ()) -> Dict[str, Any]:
    grid = load_grid(spec_path)
    runner = GridRunner(grid, base_config, out_dir, steps, concurrency, extra_args=extra_args)
    if dry_run:
        commands = [" ".join(shlex.quote(part) for part in cmd) for cell in runner.plan() for cmd in cell]
        return {"cells": grid.size, "commands": commands}

    results = asyncio.run(runner.run())
    failed = [r.cell for r in results if not r.ok]
    return {"cells": grid.size, "succeeded": grid.size - len(failed), "failed": failed}
