from .adapters import ADAPTERS, Adapter
from .convert import ConversionResult, UnsupportedLayerError, convert, module_to_network
from .export import PARITY_TOLERANCE, checkpoint_id, export_fixture
from .residual import Residual

__all__ = [
    "ADAPTERS", "Adapter", "ConversionResult", "PARITY_TOLERANCE", "Residual",
    "UnsupportedLayerError", "checkpoint_id", "convert", "export_fixture",
    "module_to_network",
]
