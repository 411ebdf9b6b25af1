# backend/utils/helpers.py
"""Simple helper functions"""
import hashlib
import json
import logging
import math
import random
import uuid
from datetime import datetime, timezone
from typing import Any

import numpy as np
import torch

logger = logging.getLogger(__name__)

def seed_everything(seed: int, num_threads: int = 1, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; pin thread count for reproducible kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if num_threads > 0:
        torch.set_num_threads(num_threads)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)

def canonical_json(obj: Any) -> str:
    """Sorted-key, whitespace-free JSON used for fingerprints."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)

def fingerprint(obj: Any) -> str:
    """sha256 of the canonical JSON text of a config."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()

def generate_run_id() -> str:
    return f"{datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%S')}-{uuid.uuid4().hex[:8]}"

def get_utc_now() -> datetime:
    return datetime.now(timezone.utc)

def log_mean_exp(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """log(mean(exp(x))) along dim, computed through logsumexp."""
    return torch.logsumexp(x, dim=dim) - math.log(x.shape[dim])

def masked_log_mean_exp(x: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """log-mean-exp over entries where mask is true; rows without entries give -inf."""
    filled = x.masked_fill(~mask, float("-inf"))
    counts = mask.sum(dim=dim).clamp_min(1).to(x.dtype)
    return torch.logsumexp(filled, dim=dim) - torch.log(counts)

def to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)
