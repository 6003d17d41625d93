from decouple import config

# Application Configuration
ENVIRONMENT = config("GEOWALK_ENVIRONMENT", default="development")
DEBUG = config("GEOWALK_DEBUG", default=True if ENVIRONMENT == "development" else False, cast=bool)
LOG_LEVEL = config("GEOWALK_LOG_LEVEL", default="DEBUG" if DEBUG else "INFO")
NUM_THREADS = config("GEOWALK_NUM_THREADS", default=1, cast=int)

# Output root for relative --out paths
OUTPUT_ROOT = config("GEOWALK_OUTPUT_ROOT", default=".")

# Graph construction (k from the Stage I recipe)
DEFAULT_K = 10
DEFAULT_HYPERBOLIC_CURVATURE = -1.0
DEFAULT_SPHERICAL_CURVATURE = 1.0
BRUTE_FORCE_LIMIT = 20_000

# Geometry prompt encoder dims and Stage I optimizer
FEATURE_DIM = 1024
PROMPT_HIDDEN_DIM = 512
PROMPT_OUT_DIM = 256
STAGE1_LR = 1e-3
STAGE1_WEIGHT_DECAY = 1e-5
STAGE1_STEP_SIZE = 100
STAGE1_GAMMA = 0.5
STAGE1_EPOCHS = 100

# Geometry adapter
GATE_TEMPERATURE = 0.1
INACTIVE_GATE_THRESHOLD = 0.05

# Desk backbone and Stage II optimizer
BACKBONE_LAYERS = 8
BACKBONE_DIM = 128
BACKBONE_HEADS = 4
ADAPTER_PERIOD = 4
STAGE2_LR = 2e-5
# default Stage II rate at desk scale
DESK_STAGE2_LR = 1e-3
STAGE2_WEIGHT_DECAY = 0.01
STAGE2_WARMUP_STEPS = 500

# Artifact names
CATALOG_FILE = "catalog.csv"
TARGETS_FILE = "targets.csv"
GRAPH_FILE_TEMPLATE = "graph_{kind}.txt"
PROMPT_FILE_TEMPLATE = "prompts_{kind}.csv"
ENCODER_CHECKPOINT_FILE = "prompt_encoder.json"
HOST_CHECKPOINT_FILE = "host_model.json"
PREDICTIONS_FILE = "predictions.csv"
GATE_TRACE_FILE = "gate_trace.csv"
LOSS_TRACE_TEMPLATE = "loss_trace_{kind}.csv"
METRIC_TRACE_FILE = "metric_trace.csv"
SPLIT_FILE = "split.csv"
SUMMARY_FILE = "summary.json"
RESOLVED_CONFIG_FILE = "resolved_config.json"
