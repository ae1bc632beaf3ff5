"""Config-driven experiment runner: single runs, seed sweeps and reward studies."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .io import ppm_bytes, read_ppm, write_ppm
from .studies import (StudyResult, aggregate, run_leave_one_out, run_reward_ablation, run_sweep,
                      singleton_and_full_masks)
