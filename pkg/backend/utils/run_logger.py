# backend/utils/run_logger.py - Run Logging Utility
"""
Run logging utility for loss curves and run metadata
Artifacts are organized as <results_dir>/<run_name>/{loss_curve.tsv, run_metadata.json}
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from constants import (
    VERSION, RESIZE_SIDE, CROP_SIDE, PIXEL_MEAN, PIXEL_STD, PIXEL_RANGE,
    PROBE_THRESHOLD, SSIM_WINDOW, SSIM_SIGMA, SSIM_K1, SSIM_K2, SSIM_DATA_RANGE,
    PART_SQUARE_SIDE,
)
from utils.helpers import get_utc_now

logger = logging.getLogger(__name__)

LOSS_CURVE_FILE = "loss_curve.tsv"
METADATA_FILE = "run_metadata.json"


def pixel_encoding() -> Dict[str, Any]:
    return {
        "resize": RESIZE_SIDE,
        "crop": CROP_SIDE,
        "mean": PIXEL_MEAN,
        "std": PIXEL_STD,
        "range": list(PIXEL_RANGE),
    }


def ssim_constants() -> Dict[str, Any]:
    return {
        "window": SSIM_WINDOW,
        "sigma": SSIM_SIGMA,
        "k1": SSIM_K1,
        "k2": SSIM_K2,
        "data_range": SSIM_DATA_RANGE,
        "grayscale": "0.299R + 0.587G + 0.114B",
    }


class RunLogger:
    """Append-only loss curve plus a JSON metadata file for one run."""

    def __init__(self, run_dir: Optional[Union[str, Path]], enabled: bool = True):
        self.enabled = enabled and run_dir is not None
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.curve: List[Tuple[int, str, float]] = []

        if self.enabled:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            logger.info(f"Run logging enabled. Run directory: {self.run_dir}")

    @property
    def curve_path(self) -> Path:
        return self.run_dir / LOSS_CURVE_FILE

    @property
    def metadata_path(self) -> Path:
        return self.run_dir / METADATA_FILE

    def log_losses(self, step: int, losses: Dict[str, float]) -> None:
        """Append `step<TAB>loss_name<TAB>value` lines."""
        rows = [(step, name, float(value)) for name, value in losses.items()]
        self.curve.extend(rows)
        if not self.enabled:
            return
        try:
            with open(self.curve_path, "a", encoding="utf-8") as f:
                for s, name, value in rows:
                    f.write(f"{s}\t{name}\t{value:.8g}\n")
        except OSError as e:
            logger.error(f"Failed to write loss curve: {e}")

    def write_metadata(self, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        metadata = {
            "code_version": VERSION,
            "written_at": get_utc_now().isoformat(),
            "pixel_encoding": pixel_encoding(),
            "part_square_side": PART_SQUARE_SIDE,
            "probe_threshold": PROBE_THRESHOLD,
            "ssim": ssim_constants(),
        }
        metadata.update(extra or {})
        if self.enabled:
            existing = {}
            if self.metadata_path.exists():
                try:
                    existing = json.loads(self.metadata_path.read_text(encoding="utf-8"))
                except json.JSONDecodeError:
                    logger.warning(f"Corrupted metadata at {self.metadata_path}, rewriting")
            existing.update(metadata)
            metadata = existing
            self.metadata_path.write_text(json.dumps(metadata, indent=2, default=str), encoding="utf-8")
        return metadata


def read_loss_curve(path: Union[str, Path]) -> List[Tuple[int, str, float]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            step, name, value = line.rstrip("\n").split("\t")
            rows.append((int(step), name, float(value)))
    return rows
