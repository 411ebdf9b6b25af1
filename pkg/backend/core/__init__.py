from .container import container

__all__ = ["container"]
