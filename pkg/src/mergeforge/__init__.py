"""
Divergence-guided merging of fine-tuned toy language models.
"""

__version__ = "0.1.0"

from .errors import (ContractViolation, ConvergenceError, DegenerateTaskError, ManifestMismatch, MergeForgeError,
                     NumericError, UnknownRuleError)
from .model import (ModelConfig, ParameterSet, TokenDistribution, forward_logprobs, greedy_generate, init_model,
                    next_token_distribution)
from .checkpoint import load_checkpoint, save_checkpoint
from .tasks import (TaskDataset, TaskSpec, make_classification_task, make_disjoint_suite, make_generation_task,
                    read_tasks, write_tasks)
from .trainer import TaskVector, TrainConfig, finetune, reconstruct, task_vector
from .divergence import DivergenceKind, js, kl, sequence_divergence
from .merging import (MergeCoefficients, MergeLevel, MergeMethod, MergeSpec, OptimizerConfig,
                      apply_task_arithmetic, entropy_min_coeffs, kracher_mean, merge, model_average,
                      multi_slerp_merge, optimize_divergence_coeffs, slerp_merge, ties_merge)
from .evaluation import anp, cosine_similarity_matrix, merge_sweep, perf, spearman
