"""Size recommendation from purchase and return histories.

Two models over the joint distribution of (purchased size, return outcome):
an independence baseline (per-customer KDE x per-article smoothed return
counts) and a hierarchical Bayesian model fit by coordinate-ascent
variational inference. Plus: grid discretization with a recommend/abstain
rule, a temporal cross-validation harness, and a synthetic-data generator
with known ground truth.
"""

from .baseline import (
    BaselineModel,
    fit_baseline,
    kde_bandwidth,
    kde_density,
    return_probs,
)
from .domain import (
    ArticleMeta,
    Catalog,
    Order,
    OrdersDataset,
    ReturnStatus,
    SizeGrid,
    SizeSystemConfig,
    parse_catalog,
    parse_orders,
    parse_size_config,
    size_grid,
)
from .errors import (
    CatalogError,
    ConfigError,
    DegenerateSupportError,
    EvalError,
    IngestError,
    ModelError,
    SizecastError,
)
from .evaluation import (
    EvalReport,
    TemporalFold,
    avg_log_joint,
    coverage_accuracy_curve,
    emit_report,
    run_evaluation,
    temporal_splits,
)
from .hbayes import (
    HBayesState,
    Hyperparams,
    cavi_sweep,
    dirichlet_concentration,
    elbo,
    fit_hbayes,
    init_state,
    param_confidence,
    posterior_return_probs,
    predictive_size_density,
    stick_breaking_weights,
    update_weights,
)
from .mixtures import GaussianMixture
from .predict import (
    JointTable,
    Recommendation,
    discretize,
    joint_log_prob,
    joint_table,
    recommend,
)
from .synthgen import (
    GroundTruth,
    RecoveryScore,
    SynthConfig,
    recovery_score,
    sample_dataset,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
