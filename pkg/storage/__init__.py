"""
Sparse storage accounting: CSR encoders and table-style storage reports.
"""

from .csr import SparseEncoding, decode, encode_csr_absolute, encode_csr_relative
from .report import StorageReport, format_bytes, optimize_index_bits, storage_report

__all__ = [
    'SparseEncoding', 'StorageReport', 'decode', 'encode_csr_absolute', 'encode_csr_relative',
    'format_bytes', 'optimize_index_bits', 'storage_report',
]
