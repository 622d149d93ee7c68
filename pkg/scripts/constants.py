DEFAULT_SEED = 20240601
MIN_DIMENSION = 3

# Geometry tolerances.
TRACE_TOL = 1e-12
TINY_DENSITY = 1e-300
WAVE_CONE_TOL = 1e-10
RECONSTRUCTION_TOL = 1e-9
WEIGHT_SUM_TOL = 1e-12

# Exact distance oracle.
DISTANCE_STARTS = 32
DISTANCE_TOL = 1e-10
DISTANCE_MAX_ITER = 10000

# Caratheodory sampling.
LP_ROUNDS = 6

# Localized waves.
SMOOTHSTEP_ORDER = 10
CUTOFF_THETA = 2.0 ** -10
LAMBDA_HAT_START = 8.0
LAMBDA_HAT_CAP = 2.0 ** 200
PROFILE_DELTA_FRACTION = 2.0 ** -30

# Iteration.
WEIGHT_PRUNE = 1e-13
MAX_LAMINATE_LEVELS = 40
COVER_MAX_DEPTH = 48
WAVE_AUDIT_CAP = 24
WAVE_VALUE_TOL = 1e-8
DELTA_HALVINGS = 60
DEFAULT_MAX_STAGES = 6
DEFAULT_STOP_DEFECT = 1e-6
DEFAULT_CELL_CAP = 2 ** 22

# Factories.
CHI_DOUBLINGS = 60
Q_RESCALE_CAP = 1e6
DEFAULT_MARGIN_FLOOR = 1e-8

# Binary field format.
FIELD_MAGIC = b"WILDFLOWFIELD\0\0\0"
FIELD_VERSION = 1
MIN_RESOLUTION = 16
MAX_RESOLUTION = 256
