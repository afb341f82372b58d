"""Function-level ransomware detection from instruction traces."""

from .config import PipelineConfig
from .pipeline import Pipeline, StageError, run_pipeline
from .synth import SyntheticSpec, generate_synthetic_corpus

__all__ = ["Pipeline", "PipelineConfig", "StageError", "SyntheticSpec", "generate_synthetic_corpus", "run_pipeline"]
__version__ = "0.1.0"
