"""Reward-based optimization of the initial noise of one-step generators."""

from .autodiff import Tape, Tensor, backward, finite_diff_check
from .criteria import (CriterionSpec, RewardTerm, chi_norm_logpdf, color_criterion, color_term,
                       combined_reward, default_criterion, effective_weight, full_objective,
                       make_toy_reward)
from .generators import (GeneratorSpec, NoiseVector, PromptEmbedding, embed_prompt, generate,
                         load_generator, make_generator, save_generator)
from .optimizer import (NumericAbort, OptimizerConfig, RunRecord, grad_norm_clip, reno_run,
                        reno_step, sample_standard_normal)

__version__ = "0.1.0"
