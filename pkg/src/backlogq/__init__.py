"""Queue-based estimation of staffing and service capacity from event logs.

From open/resolve timestamps alone, the pipeline reconstructs the backlog
trajectory, fits a Gaussian mixture to its queue-length distribution,
partitions the horizon into quasi-stationary windows, and searches a
multi-server capacity-constrained queue model per window until the simulated
queue-length distribution matches the empirical one under KL divergence.
"""

from .eventlog import (
    CleansePolicy,
    CleanseReport,
    EventLog,
    EventRecord,
    ParseResult,
    cleanse,
    parse_events,
)
from .fitdist import DistFit, fit_family, fit_mixture2, sample, select_best
from .mixtures import GmmModel, OrderSelection, discretize, fit_gmm, kl_divergence, select_order
from .segment import CoarseGrid, Segment, Segmentation, best_partition, score_window
from .simulate import QueueParams, SampleSource, SimConfig, bootstrap_qld, estimate_qld, simulate_once
from .trajectory import (
    BacklogTrajectory,
    Pmf,
    SampleSet,
    build_trajectory,
    empirical_qld,
    interarrival_samples,
    service_samples,
)
from .estimate import (
    SegmentEstimate,
    ValidationReport,
    aggregate_qld,
    build_report,
    normalize_capacity,
    refine_params,
)
from .seeds import derive_seed

__version__ = "0.1.0"

__all__ = [
    "BacklogTrajectory",
    "CleansePolicy",
    "CleanseReport",
    "CoarseGrid",
    "DistFit",
    "EventLog",
    "EventRecord",
    "GmmModel",
    "OrderSelection",
    "ParseResult",
    "Pmf",
    "QueueParams",
    "SampleSet",
    "SampleSource",
    "Segment",
    "Segmentation",
    "SegmentEstimate",
    "SimConfig",
    "ValidationReport",
    "aggregate_qld",
    "best_partition",
    "bootstrap_qld",
    "build_report",
    "build_trajectory",
    "cleanse",
    "derive_seed",
    "discretize",
    "empirical_qld",
    "estimate_qld",
    "fit_family",
    "fit_gmm",
    "fit_mixture2",
    "interarrival_samples",
    "kl_divergence",
    "normalize_capacity",
    "parse_events",
    "refine_params",
    "sample",
    "score_window",
    "select_best",
    "select_order",
    "service_samples",
    "simulate_once",
]
