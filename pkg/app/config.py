import math
import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = Path(__file__).resolve().parent / "data"

RUNS_DIR = Path(os.getenv("THB_RUNS_DIR", str(BASE_DIR / "runs")))
THREADS = max(1, int(os.getenv("THB_THREADS", "1")))
LOG_LEVEL = os.getenv("THB_LOG_LEVEL", "INFO").upper()
REFERENCE_LEVELS = int(os.getenv("THB_REFERENCE_LEVELS", "3"))
FIELD_RESOLUTION = int(os.getenv("THB_FIELD_RESOLUTION", "9"))

HORSESHOE_GEOMETRY = DATA_DIR / "horseshoe.geo"

# Physical constants and numerical tolerances
MU_0 = 4e-7 * math.pi
MAX_DEGREE = 8
MAX_GAUSS_POINTS = 16
COINCIDENCE_TOLERANCE = 1e-12
INTERFACE_TOLERANCE = 1e-10
DIRICHLET_CONFLICT_TOLERANCE = 1e-10
CONVERGED_ESTIMATOR = 1e-14
SOLVER_TOLERANCE = 1e-12
REFINEMENT_STEPS = 2
