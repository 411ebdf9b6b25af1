# backend/services/results_store.py
"""
Append-only results store.

Records live in one tab-separated file. Writers never touch it directly: each
append drops a shard into pending/ with an atomic rename, and compact() moves
shards onto the end of the main file. Existing lines are never rewritten.
"""
import csv
import logging
import os
import uuid
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from constants import RESULTS_COLUMNS, VERSION
from models.models import RunConfig, RunRecord
from utils.helpers import fingerprint, generate_run_id

logger = logging.getLogger(__name__)

PENDING_DIR = "pending"
SHARD_SUFFIX = ".tsv"
CLAIMED_SUFFIX = ".merging"


def config_fingerprint(config: RunConfig) -> str:
    return fingerprint(config.model_dump(mode="json"))


def build_records(config: RunConfig, metrics: Dict[str, float], wall_time: float,
                  run_id: Optional[str] = None) -> List[RunRecord]:
    """One record per metric for a single run of `config`."""
    run_id = run_id or generate_run_id()
    fp = config_fingerprint(config)
    return [
        RunRecord(
            run_id=run_id, fingerprint=fp, dataset=config.dataset, objective=config.objective.label,
            encoder=config.encoder.value, local_loss=config.objective.local_loss.value, seed=config.seed,
            metric=metric, value=float(value), wall_time=float(wall_time), code_version=VERSION,
        )
        for metric, value in metrics.items()
    ]


class ResultsStore:
    """Append-only TSV of RunRecords with shard-based concurrent appends."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.pending = self.path.parent / PENDING_DIR

    def append(self, records: Sequence[RunRecord], compact: bool = True) -> Optional[Path]:
        """Write `records` as one shard; merge immediately unless compact is False."""
        if not records:
            return None
        self.pending.mkdir(parents=True, exist_ok=True)
        name = f"{records[0].run_id}-{uuid.uuid4().hex[:8]}"
        tmp = self.pending / f".{name}.tmp"
        with open(tmp, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            for record in records:
                row = record.model_dump()
                writer.writerow([row[c] for c in RESULTS_COLUMNS])
        shard = self.pending / f"{name}{SHARD_SUFFIX}"
        os.replace(tmp, shard)
        logger.debug(f"Wrote {len(records)} records to shard {shard.name}")
        if compact:
            self.compact()
        return shard

    def compact(self) -> int:
        """Move every pending shard onto the end of the main file; returns the number merged."""
        if not self.pending.exists():
            return 0
        merged = 0
        for shard in sorted(self.pending.glob(f"*{SHARD_SUFFIX}")):
            claimed = shard.with_suffix(CLAIMED_SUFFIX)
            try:
                os.replace(shard, claimed)
            except FileNotFoundError:
                continue  # claimed by another process
            self._append_lines(claimed.read_text(encoding="utf-8"))
            claimed.unlink()
            merged += 1
        return merged

    def _create_with_header(self) -> bool:
        """Publish the main file with its header in one step; False if it already exists.

        The header goes into a private temp file that is hard-linked into place, so
        concurrent writers never see the main file without its header.
        """
        if self.path.exists():
            return False
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.parent / f".{self.path.name}.{uuid.uuid4().hex[:8]}.header"
        tmp.write_text("\t".join(RESULTS_COLUMNS) + "\n", encoding="utf-8")
        try:
            os.link(tmp, self.path)
            logger.info(f"[Results] created {self.path}")
            return True
        except FileExistsError:
            return False
        finally:
            tmp.unlink()

    def _append_lines(self, text: str) -> None:
        self._create_with_header()
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(text)

    def read(self) -> pd.DataFrame:
        """All merged records as a DataFrame with RESULTS_COLUMNS."""
        if not self.path.exists():
            return pd.DataFrame(columns=RESULTS_COLUMNS)
        frame = pd.read_csv(self.path, sep="\t", dtype=str, keep_default_na=False)
        frame["seed"] = frame["seed"].astype(int)
        frame["value"] = pd.to_numeric(frame["value"], errors="coerce")
        frame["wall_time"] = pd.to_numeric(frame["wall_time"], errors="coerce")
        return frame[RESULTS_COLUMNS]

    def records(self) -> List[RunRecord]:
        return [RunRecord(**row) for row in self.read().to_dict(orient="records")]

    def __len__(self) -> int:
        return len(self.read())
