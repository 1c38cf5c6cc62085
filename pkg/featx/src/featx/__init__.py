"""featx: dense-feature exporter for pretrained vision backbones.

Writes DFA1 feature archives, PGM label grids, PPM source crops, and a
JSON manifest consumable by the corrdistill trainer and diagnostics.
"""

from .export import ExportReport, ExportSpec, export_features
from .models import MODEL_NAMES, load_backbone

__version__ = "0.1.0"
