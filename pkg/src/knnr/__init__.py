"""K-nearest-neighbor resampling for off-policy evaluation."""
from .core import (
    BehaviorSpec,
    Dataset,
    Episode,
    FlatRef,
    Metric,
    PolicySpec,
    RngStream,
    TerminalRule,
    TransitionReward,
    distance,
    flatten,
    load_dataset,
    save_dataset,
)
from .knn_index import NeighborIndex, build_index, query_knn
from .resamplers import KnnrConfig, ValueEstimate, default_rates, knnr_estimate, mfmc_estimate, mnn_oracle

__version__ = "0.1.0"
