"""Feature-bundle exporter for the winseg engine."""

from .export import ClassSpec, ExportConfig, export
from .settings import SETTINGS, Setting

__version__ = "0.1.0"
