"""Predictor-corrector samplers for CSM and CTM plus the U-Net pass."""

from .samplers import (
    GaussianScore,
    SampleResult,
    SampleTrace,
    SamplerConfig,
    SamplerMisuseError,
    corrector_step,
    csm_initial_state,
    predictor_step,
    sample,
    sample_csm,
    sample_ctm,
    sample_unconditional,
    sample_unet,
    time_grid,
)

__all__ = [
    "GaussianScore",
    "SampleResult",
    "SampleTrace",
    "SamplerConfig",
    "SamplerMisuseError",
    "corrector_step",
    "csm_initial_state",
    "predictor_step",
    "sample",
    "sample_csm",
    "sample_ctm",
    "sample_unconditional",
    "sample_unet",
    "time_grid",
]
