# backend/__init__.py
"""
Zero-shot-from-scratch toolkit backend
"""
__version__ = "1.0.0"
