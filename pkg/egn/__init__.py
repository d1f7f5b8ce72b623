"""
Exemplar guided prediction of per-window gene expression from tissue images.
"""
from .config import RunConfig
from .data import DatasetBundle
from .extractor import ExtractorModel
from .index import ExemplarIndex
from .model import EgnModel

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "DatasetBundle",
    "ExtractorModel",
    "ExemplarIndex",
    "EgnModel",
]
