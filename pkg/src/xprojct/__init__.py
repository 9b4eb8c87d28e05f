"""Body-region classification of CT volumes through coronal projections."""
from .errors import XprojError
from .labels import DEFAULT_VOCABULARY, LabelFile, LabelVocabulary, SeriesPrediction
from .nifti_io import read_nifti, write_nifti
from .pipeline import PreprocessConfig, preprocess_volume
from .volume import CtVolume

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_VOCABULARY",
    "CtVolume",
    "LabelFile",
    "LabelVocabulary",
    "PreprocessConfig",
    "SeriesPrediction",
    "XprojError",
    "preprocess_volume",
    "read_nifti",
    "write_nifti",
]
