"""Dense f64 tensor kernel with a reverse-mode gradient tape."""

from .kernels import get_num_threads, set_num_threads
from .ops import *  # noqa: F401,F403
from .ops import __all__ as _ops_all
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    Workspace,
    backward,
    current_tape,
    no_grad,
    track_workspace,
)

__all__ = [
    *_ops_all,
    "ShapeError", "Tape", "TapeError", "Tensor", "Workspace", "backward", "current_tape",
    "get_num_threads", "no_grad", "set_num_threads", "track_workspace",
]
