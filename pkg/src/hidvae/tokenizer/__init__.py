from .config import TokenizerConfig
from .ids import SemanticID, assign_ids, read_ids_tsv, write_ids_tsv
from .losses import (
    commitment_loss,
    recon_loss,
    tag_alignment_loss,
    tag_prediction_loss,
    uniqueness_loss,
)
from .model import HiDVAE, QuantizationTrace, quantize, quantize_residual_chain, total_loss
from .train import TokenizerState, init_codebooks_kmeans, load_tokenizer, save_tokenizer, train_stage1

__all__ = [
    "TokenizerConfig", "SemanticID", "assign_ids", "read_ids_tsv", "write_ids_tsv",
    "commitment_loss", "recon_loss", "tag_alignment_loss", "tag_prediction_loss", "uniqueness_loss",
    "HiDVAE", "QuantizationTrace", "quantize", "quantize_residual_chain", "total_loss",
    "TokenizerState", "init_codebooks_kmeans", "load_tokenizer", "save_tokenizer", "train_stage1",
]
