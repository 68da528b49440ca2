"""
Structured vs non-structured comparison: PPR verdicts, the matched-accuracy
pipeline and the published-table recomputation.
"""

from .comparator import ComparisonReport, ComparisonSettings, run_comparison
from .ppr import PprModel, decide_compute, decide_storage, effective_speedup
from .tables import check_tables, load_tables, rate_pairs

__all__ = [
    'ComparisonReport', 'ComparisonSettings', 'PprModel', 'check_tables', 'decide_compute',
    'decide_storage', 'effective_speedup', 'load_tables', 'rate_pairs', 'run_comparison',
]
