"""
pwl module, for piecewise linear approximations of time in system curves.
"""
__all__ = ['Curve', 'available_curves', 'get_curve', 'BasepointSet', 'eval_pwl', 'max_error', 'segment_errors',
           'imamoto_extended', 'uniform_basepoints', 'rescale', 'get_preset', 'linearize_preset', 'linearize',
           'write_basepoints', 'read_basepoints']
from .curves import Curve, available_curves, get_curve
from .linearize import (BasepointSet, eval_pwl, max_error, segment_errors, imamoto_extended, uniform_basepoints,
                        rescale, get_preset, linearize_preset, linearize, write_basepoints, read_basepoints)
