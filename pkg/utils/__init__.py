"""
D.I.S.C.O. Utils Package
Logging, finite differences and artifact export.
"""

from utils.logger import get_logger, setup_logging, file_log
from utils.numerics import central_gradient, central_jacobian, fd_steps, split_pair

__all__ = [
    "get_logger",
    "setup_logging",
    "file_log",
    "central_gradient",
    "central_jacobian",
    "fd_steps",
    "split_pair",
]
