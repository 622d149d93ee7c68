"""
Local run configuration template.

Copy this file to config.py to override the defaults used by run_pipeline.py.
Do not commit config.py to version control.
"""

# Scenario defaults used when a scenario document leaves a field out.
RUN_CONFIG = {
    'case': 'torus',
    'dimension': 3,
    'resolution': 32,
    'seed': 20240601,
    'record_wall_time': False,
}

# Iteration schedule.
ITERATION_CONFIG = {
    'eps0': 1.0,
    'lambda_growth': 2.0,
    'stop_defect_tol': 1e-6,
    'max_stages': 6,
    'cell_cap': 4194304,  # samples refined per stage
}

# Output paths.
OUTPUT_PATHS = {
    'runs': 'data/runs/',
    'plots': 'data/plots/'
}
