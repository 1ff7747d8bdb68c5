from .core import Tape, Tensor, apply, as_tensor, backward, count_macs, current_tape, report_macs
from .gradcheck import GradCheckReport, grad_check
from . import ops

__all__ = [
    "Tape", "Tensor", "apply", "as_tensor", "backward", "count_macs", "current_tape",
    "report_macs", "GradCheckReport", "grad_check", "ops",
]
