"""Constants and default values for normlab."""

import math

# Normalization defaults
DEFAULT_EPSILON = 1e-5
DEFAULT_MOMENTUM = 0.9
DEFAULT_TOPK = 10
# Accepted range of C_Linf(n) * E[max|z|]; the stated and evaluated lower bounds disagree
LINF_CORRIDOR = (0.74, 1.56)

# Training recipe
DEFAULT_WEIGHT_DECAY = 0.0005
LR_DECAY_FACTOR = 0.1
NORM_SCHEDULE_FACTOR = math.sqrt(10.0)
DESK_DECAY_EVERY_EPOCHS = 10

# Reproducibility
DEFAULT_SEED = 20180213
MC_DEFAULT_TRIALS = 1_000_000
MC_MIN_TRIALS = 1000
MC_CHUNK = 8192

# Norm growth probe
GROWTH_FRACTION = 0.9
BOUNDED_RATIO = 2.0
TRAILING_WINDOW = 50

# File formats
TENSOR_MAGIC = b"NLT1"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAJECTORY_HEADER = ("step", "layer", "channel", "norm")
RUN_CSV_HEADER = ("epoch", "train_loss", "val_acc", "mean_norm", "max_norm", "diverged")
CONSTANTS_CSV_HEADER = ("scheme", "n", "k", "closed_form", "mc_value", "mc_stderr")
CSV_DECIMALS = 6

# Validation limits
MAX_ARM_NAME_LENGTH = 64


__all__ = [
    "DEFAULT_EPSILON",
    "DEFAULT_MOMENTUM",
    "DEFAULT_TOPK",
    "DEFAULT_WEIGHT_DECAY",
    "LR_DECAY_FACTOR",
    "NORM_SCHEDULE_FACTOR",
    "DESK_DECAY_EVERY_EPOCHS",
    "DEFAULT_SEED",
    "MC_DEFAULT_TRIALS",
    "MC_MIN_TRIALS",
    "MC_CHUNK",
    "GROWTH_FRACTION",
    "BOUNDED_RATIO",
    "TRAILING_WINDOW",
    "TENSOR_MAGIC",
    "IDX_IMAGES_MAGIC",
    "IDX_LABELS_MAGIC",
    "TRAJECTORY_HEADER",
    "RUN_CSV_HEADER",
    "CONSTANTS_CSV_HEADER",
    "CSV_DECIMALS",
    "LINF_CORRIDOR",
    "MAX_ARM_NAME_LENGTH",
]
