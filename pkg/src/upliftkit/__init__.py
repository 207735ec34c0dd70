"""upliftkit: personalized treatment policies from randomized experiments.

Fit outcome and pairwise treatment-effect models on experiment data, turn
them into assignment policies, and evaluate any policy offline with
inverse-propensity-score estimators, the policy-improvement decomposition,
and paired bootstrap comparisons.
"""

__version__ = "0.1.0"

from .dataset import (
    CsvSchema,
    EncodedMatrix,
    Encoder,
    ExperimentDataset,
    SplitPair,
    TreatmentArm,
    empirical_propensities,
    encode,
    load_csv,
    split,
    write_csv,
)
from .synth import (
    OracleAnswers,
    SyntheticDGP,
    draw,
    enumerate_optimal,
    random_bernoulli_dgp,
    true_policy_value,
)
from .outcome_models import (
    CvReport,
    fit_boosted,
    fit_cart,
    fit_lasso,
    fit_ols,
    fit_random_forest,
    lasso_lambda_max,
    mse,
    predict,
    tune_lasso,
)
from .cate_models import (
    CausalForestModel,
    CausalTreeModel,
    cate_cdf_export,
    cates_from_outcome,
    estimate,
    fit_all_pairs,
    fit_causal_forest,
    fit_causal_tree,
)
from .policy import (
    AllocationSummary,
    CatePolicy,
    OutcomePolicy,
    Policy,
    TablePolicy,
    UniformPolicy,
    allocation,
    policy_from_cates,
    policy_from_outcome,
    uniform_policy,
)
from .evaluation import (
    BootstrapComparison,
    CongruencyTable,
    IpsEstimate,
    UpsilonResult,
    ate_table,
    bootstrap_compare,
    congruency,
    ips,
    ips_empirical,
    outcome_decomposition,
    segment_profile,
    upsilon,
    upsilon_from_components,
)
from .tuning import SearchResult, SearchSpec, cross_validate, search
from .persistence import load_model, load_policy, save_model, save_policy
