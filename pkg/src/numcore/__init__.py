from .gradcheck import finite_diff_grad, relative_error
from .ops import bilinear_resize, l2_normalize, softmax
from .rng import RngStream, restore_stream
from .tape import Tape, Var, value_of

__all__ = [
    'RngStream',
    'Tape',
    'Var',
    'bilinear_resize',
    'finite_diff_grad',
    'l2_normalize',
    'relative_error',
    'restore_stream',
    'softmax',
    'value_of',
]
