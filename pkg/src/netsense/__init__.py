"""netsense: hypersparse traffic-matrix network sensing pipeline."""

from .matrix import (
    CountOverflowError,
    IpPair,
    TrafficMatrix,
    format_ipv4,
    parse_ipv4,
    sum_tree,
)
from .dbtm import deserialize, load_matrix, save_matrix, serialize
from .analytics import (
    NetworkQuantities,
    compute_quantities,
    parse_record,
    quantities_to_record,
)
from .config import ConfigError, PipelineConfig, TrafficSourceConfig
from .coordinator import estimate_max_workers

__version__ = "0.1.0"

__all__ = [
    "CountOverflowError",
    "ConfigError",
    "IpPair",
    "NetworkQuantities",
    "PipelineConfig",
    "TrafficMatrix",
    "TrafficSourceConfig",
    "compute_quantities",
    "deserialize",
    "estimate_max_workers",
    "format_ipv4",
    "load_matrix",
    "parse_ipv4",
    "parse_record",
    "quantities_to_record",
    "save_matrix",
    "serialize",
    "sum_tree",
    "__version__",
]
