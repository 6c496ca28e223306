"""Hierarchically supervised semantic IDs for generative recommendation."""

from .data import Item, InteractionLog, SplitLog, TagHierarchy, five_core_filter, leave_one_out_split
from .evaluation import MetricReport, collision_rate, ndcg_at_k, recall_at_k
from .pipeline import PipelineConfig, PipelineError, run_pipeline, run_sweep
from .recommender import PrefixTrie, RecConfig, SemanticIDRecommender, generate, train_stage2
from .synth import SynthConfig
from .tokenizer import HiDVAE, SemanticID, TokenizerConfig, assign_ids, train_stage1

__version__ = "0.1.0"

__all__ = [
    "Item", "InteractionLog", "SplitLog", "TagHierarchy", "five_core_filter", "leave_one_out_split",
    "MetricReport", "collision_rate", "ndcg_at_k", "recall_at_k",
    "PipelineConfig", "PipelineError", "run_pipeline", "run_sweep",
    "PrefixTrie", "RecConfig", "SemanticIDRecommender", "generate", "train_stage2",
    "SynthConfig",
    "HiDVAE", "SemanticID", "TokenizerConfig", "assign_ids", "train_stage1",
]
