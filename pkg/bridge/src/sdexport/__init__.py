"""Exporter producing recorded runs for the mask-refinement engine."""

from .adapters import MockAdapter, ModelLoadError, StableDiffusionAdapter
from .export import export_batch, export_sample, slugify
from .manifest import validate_run_manifest, validate_sample_manifest
from .tensorfile import TensorFileError, load_tensor, read_tensor, save_tensor, \
    write_tensor

__version__ = "0.1.0"
