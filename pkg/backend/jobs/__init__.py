# jobs/__init__.py
"""
Export jobs
"""
from .grid_runner import GridRunner, CellResult

__all__ = [
    "GridRunner",
    "CellResult",
]
