import os
from dotenv import load_dotenv

# Load env variables
load_dotenv('.env.local')
load_dotenv()

TOOL_VERSION = "2.1.0"

# Profile container
PROFILE_MAGIC = b"SCFDPRF\x00"
PROFILE_FORMAT_VERSION = 2

# Training Configuration (global k-means stop rule and regularization)
MAX_K = int(os.getenv("SCFD_MAX_K", "10"))
BOUND_TD = float(os.getenv("SCFD_BOUND_TD", "1000"))
RIDGE = float(os.getenv("SCFD_RIDGE", "1e-6"))
MAX_ITERS = int(os.getenv("SCFD_MAX_ITERS", "100"))
CANDIDATE_STRIDE = int(os.getenv("SCFD_CANDIDATE_STRIDE", "1"))
APP_ID = os.getenv("SCFD_APP_ID", "camera-uplink")

# Detection Configuration
P0 = float(os.getenv("SCFD_P0", "0.05"))
DEFAULT_P0_LIST = [0.05, 0.01]
# erf(MAHALANOBIS_SCALE * theta) = 1 - p0
MAHALANOBIS_SCALE = 0.707107

# Sequence baseline
PST_DEPTHS = [int(d) for d in os.getenv("SCFD_PST_DEPTHS", "3,5").split(',') if d.strip()]
PST_THRESHOLD = float(os.getenv("SCFD_PST_THRESHOLD", "0.01"))
PST_MIN_COUNT = 1

# Runtime
THREADS = max(1, int(os.getenv("SCFD_THREADS", "1")))
SEED = int(os.getenv("SCFD_SEED", "7"))
LOG_LEVEL = os.getenv("SCFD_LOG_LEVEL", "INFO")

# Evaluation corpora sizes (normal training run, attack trials)
TRAIN_TRACES = 2000
ATTACK_TRIALS = 300

# Trace formats
JSONL_KIND_CALL = "call"
JSONL_KIND_BEGIN = "begin"
JSONL_KIND_END = "end"
STRACE_REGION_BEGIN = "#REGION BEGIN"
STRACE_REGION_END = "#REGION END"
