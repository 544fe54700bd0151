"""Leave-out inference for linear IV with many, possibly weak, instruments.

Point estimation (jive / ujive / sive weighting, TSLS), an LM test whose
variance is estimated by unbiased leave-three-out algebra, closed-form
confidence-set inversion, rival variance estimators for comparison, and a
deterministic Monte Carlo harness for the structural designs.
"""

from .design import Dataset, WeightScheme, build_weights, leave_out_predictor, offdiag_bilinear
from .errors import (
    DegenerateFirstStage,
    GridTooCoarse,
    InvalidDesign,
    LoivError,
    NearSingularTriple,
    RankDeficient,
    SchemaError,
    SiveDiagonalUnsolvable,
    TripleSingular,
)
from .inference import (
    first_stage_diagnostics,
    invert_grid_cs,
    invert_lm_cs,
    invert_quadratic,
    lm_test,
    run_test,
)
from .l3o_variance import l3o_feasible, l3o_quadratic, l3o_variance, l3o_variance_naive
from .results import (
    ConfidenceSet,
    Estimate,
    FeasibilityReport,
    KStatistics,
    McCell,
    McResult,
    OracleMoments,
    QuadraticVariance,
    TestReport,
)
from .simulate import (
    SimDesign,
    analytic_oracle,
    design_moments,
    design_weights,
    draw,
    draw_batch,
    draw_dataset,
    make_design,
    normalize_procedures,
    piecewise_effect,
    run_monte_carlo,
    table1_designs,
)
from .statistics import jive_estimate, k_statistics, raw_moments, tsls_estimate
from .alt_variance import (
    cms_plugin_variance,
    constructed_ar_test,
    constructed_t_test,
    ek_plugin_test,
    ek_plugin_variance,
    mo_quadratic,
    ms_crossfit_variance,
    oracle_variances,
    population_ar_variance,
    population_lm_variance,
)

__version__ = "0.1.0"
