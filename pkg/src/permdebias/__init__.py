"""Measure and remove option-order sensitivity in multiple-choice predictions."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    Distribution,
    ExampleRecords,
    Permutation,
    PredictionRecord,
    RawLabelMass,
    RecordSet,
    decide,
    enumerate_permutations,
    normalize_labels,
    to_answer_space,
)
from .debias import (  # noqa: E402
    PriorWeights,
    apply_debias_policy,
    cyclic_debias,
    fit_prior_matching,
    permutation_debias,
    reweight,
)
from .errors import PermDebiasError  # noqa: E402
from .metrics import (  # noqa: E402
    bias_report,
    kl_divergence,
    permutation_sensitivity,
    positional_bias,
    positional_distribution,
    total_variation,
)
