# backend/jobs/grid_runner.py
"""
Grid runner: every ExperimentGrid cell runs as its own sequence of run.py
processes, with a bounded number of cells in flight.
"""
import asyncio
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from config.settings import settings
from models.models import ExperimentGrid

logger = logging.getLogger(__name__)

RUN_SCRIPT = Path(__file__).resolve().parent.parent / "run.py"
DEFAULT_STEPS = ("train", "eval-zsl")


@dataclass
class CellResult:
    cell: Dict[str, object]
    returncodes: List[int] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return bool(self.returncodes) and all(code == 0 for code in self.returncodes)


class GridRunner:
    """Expand a grid into CLI invocations and run them as subprocesses."""

    def __init__(self, grid: ExperimentGrid, base_config: Optional[str] = None, out_dir: Optional[str] = None,
                 steps: Sequence[str] = DEFAULT_STEPS, concurrency: Optional[int] = None,
                 python: str = sys.executable, run_script: Path = RUN_SCRIPT, extra_args: Sequence[str] = ()):
        self.grid = grid
        self.base_config = base_config
        self.out_dir = out_dir
        self.steps = list(steps)
        self.concurrency = max(1, settings.grid_concurrency if concurrency is None else concurrency)
        self.python = python
        self.run_script = run_script
        self.extra_args = list(extra_args)
        self.running = False

    def cell_args(self, cell: Dict[str, object]) -> List[str]:
        args = []
        if self.base_config:
            args += ["--config", self.base_config]
        args += [
            "--dataset", str(cell["dataset"]), "--objective", str(cell["objective"]),
            "--local-loss", str(cell["local_loss"]), "--encoder", str(cell["encoder"]),
            "--seed", str(cell["seed"]),
        ]
        if self.out_dir:
            args += ["--out", self.out_dir]
        return args + self.extra_args

    def commands(self, cell: Dict[str, object]) -> List[List[str]]:
        return [[self.python, str(self.run_script), step, *self.cell_args(cell)] for step in self.steps]

    def plan(self) -> List[List[List[str]]]:
        return [self.commands(cell) for cell in self.grid.cells()]

    async def _run_cell(self, cell: Dict[str, object], semaphore: asyncio.Semaphore) -> CellResult:
        result = CellResult(cell=cell)
        async with semaphore:
            started = time.time()
            for command in self.commands(cell):
                if not self.running:
                    break
                process = await asyncio.create_subprocess_exec(*command)
                code = await process.wait()
                result.returncodes.append(code)
                if code != 0:
                    logger.error(f"[Grid] {command[2]} failed ({code}) for {cell}")
                    break
            result.wall_time = time.time() - started
        logger.info(f"[Grid] cell {cell} finished: {'ok' if result.ok else 'failed'} in {result.wall_time:.1f}s")
        return result

    async def run(self) -> List[CellResult]:
        """Run every cell; a failing cell does not stop the others."""
        self.running = True
        semaphore = asyncio.Semaphore(self.concurrency)
        logger.info(f"[Grid] running {self.grid.size} cells, {self.concurrency} at a time")
        try:
            return list(await asyncio.gather(*(self._run_cell(c, semaphore) for c in self.grid.cells())))
        finally:
            self.running = False

    def stop(self) -> None:
        self.running = False
