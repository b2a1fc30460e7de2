"""Expert attribution, pruning, and re-alignment attacks on a toy Mixture-of-Experts model."""

from .attribution import AttributionReport, RoutingTrace, attribute, attribution_hard, attribution_soft, collect_trace, log_trace, rank_experts, read_trace
from .bench import EvalMetrics, PrunabilityCurve, attack_pipeline, defense_pipeline, evaluate, prunability_curve, resistance_score, retention
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import Dataset, DatasetSpec, gen_dataset
from .moe import ModelConfig, MoeModel, build_model, forward, loss_and_grads, route, train
from .numcore import DimensionError, NumericError, OptimState, Rng, StateError, adam_step, finite_diff_check, softmax
from .pruning import PlanError, PruningPlan, apply_plan, compression_stats, make_plan, random_plan
from .realign import ALState, FinetuneScope, al_loop, fine_tune, select_batch, uncertainty

__version__ = "0.1.0"
