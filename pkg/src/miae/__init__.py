"""Masked invariant autoencoders for protein backbone structures."""

__version__ = "0.1.0"

from miae.errors import (
    ConfigError,
    DegenerateFrameError,
    DomainError,
    InvalidMaskError,
    InvalidTransformError,
    LabelError,
    LengthError,
    MiAEError,
    ParseError,
    ProbeError,
    ShapeError,
    SplitError,
    StepError,
)
from miae.structure_io import ProteinBackbone, parse_backbone, passes_plddt_filter
from miae.geometry import Frame, FrameSet, build_frames, kabsch_rmsd
from miae.masking import MaskPlan, sample_mask
