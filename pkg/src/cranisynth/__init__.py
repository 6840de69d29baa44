"""Pediatric MRI-to-CT synthesis and atlas-guided cranial segmentation on phantom data."""

from .volume import LabelMap, Modality, SubjectRecord, Volume, load_volume, resample, save_volume

__version__ = "0.1.0"

__all__ = ["LabelMap", "Modality", "SubjectRecord", "Volume", "load_volume", "resample", "save_volume"]
