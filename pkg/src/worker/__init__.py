from .main import execute_run

__all__ = ["execute_run"]
