# backend/controllers/__init__.py
"""
One controller per CLI command group
"""
