# Persistence and reporting helpers for iGraph runs
from .checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from .run_log import EpochLogWriter, read_epoch_log, write_training_curve
