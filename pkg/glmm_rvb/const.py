"""Constants for glmm_rvb."""

from logging import getLogger

LOGGER = getLogger(__package__)

# Priors
DEFAULT_SIGMA_BETA2 = 100.0  # variance of the N(0, σβ² I) prior on β
DEFAULT_NORMAL_PRIOR_SD = 10.0  # sd of the normal prior on each ω coordinate

# Pooled-GLM IRLS used by the default conjugate prior
IRLS_MAX_ITER = 25
IRLS_TOL = 1e-8  # relative deviance change
IRLS_MAX_HALVINGS = 20

# Family guards
POISSON_ETA_MAX = 500.0  # exp(500) is still finite in double precision

# Conditional-mode search
NEWTON_MAX_ITER = 100
NEWTON_MAX_HALVINGS = 20
NEWTON_MIN_INCREASE = 1e-4  # absolute objective increase treated as stagnation
NEWTON_GRAD_TOL = 1e-8  # relative to 1 + ‖Ωb‖∞
NR_RIDGE = 1e-8
NR_SINGULAR_COND = 1e12

# Optimizer
DEFAULT_MAX_ITER = 200_000
DEFAULT_WINDOW = 1000  # iterations averaged into one ELBO trace point
DEFAULT_TAU = 5  # window means used by the stopping regression
DEFAULT_ADAM_ALPHA = 0.001
DEFAULT_ADAM_BETA1 = 0.9
DEFAULT_ADAM_BETA2 = 0.999
DEFAULT_ADAM_EPS = 1e-8
DEFAULT_SAMPLES = 1  # Monte Carlo draws per iteration
DEFAULT_ELBO_DRAWS = 1000  # draws for the final lower-bound estimate
DEFAULT_GLOBAL_INIT_SCALE = 0.1  # initial C diagonal for the global block
DEFAULT_MAX_RETRIES = 1  # fresh draws after a retryable numerical failure
DEFAULT_FAILURE_THRESHOLD = 3  # escalate repeated failures from warning to error

# Posterior simulation
DEFAULT_POSTERIOR_DRAWS = 50_000
DEFAULT_POSTERIOR_CHUNK = 1000
REJECTION_WARN_FRACTION = 0.01

# RNG stream tags, combined with the seed and a counter
STREAM_STEP = 1
STREAM_ELBO = 2
STREAM_POSTERIOR = 3
STREAM_PARTITION = 4
STREAM_SHARD = 5
STREAM_SIMULATE = 6

# Result files
SUMMARY_FILE = "summary.txt"
TRACE_FILE = "trace.csv"
STATE_FILE = "state.txt"
SUBJECTS_FILE = "subjects.csv"
DIAGNOSTICS_FILE = "diagnostics.json"
TIMING_FILE = "timing.txt"
SUMMARY_DIGITS = 9
FORMAT_VERSION = 1

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

# Run configuration keys
CONF_DATA = "data"
CONF_PRESET = "preset"
CONF_FAMILY = "family"
CONF_RESPONSE = "response"
CONF_TRIALS_COL = "trials_col"
CONF_GROUP_COL = "group_col"
CONF_FIXED = "fixed"
CONF_RANDOM = "random"
CONF_INTERCEPT = "intercept"
CONF_METHOD = "method"
CONF_PRIOR = "prior"
CONF_PRIOR_FILE = "prior_file"
CONF_SEED = "seed"
CONF_SHARDS = "shards"
CONF_MAX_ITER = "max_iter"
CONF_OUT = "out"
CONF_DRAWS = "draws"
CONF_ESTIMATOR = "estimator"
CONF_SAMPLES = "samples"
CONF_ALLOW_INTERNAL = "allow_internal"
