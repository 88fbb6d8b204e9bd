"""Robust watermarking of sequential discrete-state data shared with multiple recipients."""

from .allocation import (AllocationSolution, allocation_chain, brute_force_allocation, histogram_chain, iterate_allocation,
                         next_counts, objective_log10, solve_allocation, solve_allocation_weighted)
from .core import (CountHistogram, LedgerError, Sequence, SharingLedger, WatermarkPattern, counts,
                   record_sharing, utility)
from .embedder import (CorrelationModel, InsufficientWatermarkablePoints, default_target, embed_correlated,
                       embed_uncorrelated, estimate_correlations, presence_probability)
from .detector import (DetectionReport, LeakPattern, detect_combination, detect_single, extract_leak_pattern,
                       partial_leak_candidates, precision_recall)
from .harness import ExperimentConfig, ResultTable, emit_results, generate_synthetic, load_matrix, run_experiment

__version__ = "0.1.0"
