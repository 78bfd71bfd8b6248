"""Mix-shift regional token mixing and the MS-MLP backbone family on numpy."""

from .tensor import GradTape, Tensor, backward, finite_diff_grad
from .mixshift import (
    MixShiftParams,
    MixShiftSpec,
    mix_shift_branch,
    mix_shift_forward,
    mix_shift_reference,
)
from .model import ModelSpec, build_model, model_forward, preset, PRESET_NAMES
from .flops import complexity_formula, count_flops, count_params

__version__ = "0.1.0"
