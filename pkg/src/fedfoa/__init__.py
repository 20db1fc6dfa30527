"""Federated self-supervised learning by exchanging QR feature-correlation matrices."""

from .config import RunConfig
from .correlation import CorrelationRecord, extract_correlation
from .federation import MemoryBank, run_training
from .linalg import procrustes_align, qr_decompose, thin_svd

__all__ = [
    "CorrelationRecord",
    "MemoryBank",
    "RunConfig",
    "extract_correlation",
    "procrustes_align",
    "qr_decompose",
    "run_training",
    "thin_svd",
]
__version__ = "0.1.0"
