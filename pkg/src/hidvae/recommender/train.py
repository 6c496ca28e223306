from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from ..data import SplitLog
from ..tokenizer.ids import SemanticID
from .model import RecConfig, SemanticIDRecommender, history_tokens, pad_batch, per_level_ce, target_tokens
from .vocab import TokenVocab

log = logging.getLogger(__name__)


class Stage2Aborted(RuntimeError):
    def __init__(self, msg: str, checkpoint: Path | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class RecState:
    model: SemanticIDRecommender
    config: RecConfig
    vocab: TokenVocab
    history: list[dict] = field(default_factory=list)


def training_examples(split: SplitLog, id_map: Mapping[str, SemanticID]) -> list[tuple[list[SemanticID], SemanticID]]:
    """Every (prefix, next item) pair inside each training sequence."""
    out = []
    for user in split.users:
        seq = [id_map[i] for i in split.train[user]]
        for t in range(1, len(seq)):
            out.append((seq[:t], seq[t]))
    return out


def make_batch(examples, vocab: TokenVocab, max_history: int):
    enc = pad_batch([history_tokens(h, vocab, max_history) for h, _ in examples])
    dec = torch.as_tensor([target_tokens(t, vocab)[:-1] for _, t in examples], dtype=torch.long)
    tgt = torch.as_tensor([list(t.tokens) for _, t in examples], dtype=torch.long)
    return enc, dec, tgt


def batch_loss(model: SemanticIDRecommender, enc, dec, tgt):
    """Mean over ID positions of the per-position CE; also returns the per-level terms."""
    logits = model(enc, dec)
    terms = per_level_ce(model, logits, tgt)
    return torch.stack(terms).mean(), [t.item() for t in terms]


def warmup_factor(step: int, warmup: int) -> float:
    return min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0


def train_stage2(split: SplitLog, id_map: Mapping[str, SemanticID], vocab: TokenVocab, tag_vecs: np.ndarray,
                 config: RecConfig, out_dir=None, epoch_callback=None) -> RecState:
    """Teacher-forced next-ID training with linear warmup then a constant rate.

    A non-finite loss restores the last completed epoch and raises
    :class:`Stage2Aborted` naming the checkpoint.
    """
    c = config
    examples = training_examples(split, id_map)
    if not examples:
        raise ValueError("no training examples: every training sequence has length < 2")
    torch.manual_seed(c.seed)
    gen = torch.Generator().manual_seed(c.seed)
    model = SemanticIDRecommender(c, vocab, tag_vecs)
    opt = torch.optim.AdamW(model.parameters(), lr=c.lr, weight_decay=c.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: warmup_factor(s, c.warmup_steps))
    state = RecState(model, c, vocab)

    out = Path(out_dir) if out_dir is not None else None
    ckpt = log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "rec_checkpoint.pt"
        log_path = out / "rec_training_log.jsonl"
        log_path.write_text("")

    good = {k: v.clone() for k, v in model.state_dict().items()}
    for epoch in range(c.epochs):
        model.train()
        perm = torch.randperm(len(examples), generator=gen).tolist()
        total, n_batches = 0.0, 0
        level_sums = np.zeros(vocab.depth)
        for start in range(0, len(perm), c.batch):
            batch = [examples[i] for i in perm[start:start + c.batch]]
            enc, dec, tgt = make_batch(batch, vocab, c.max_history)
            loss, terms = batch_loss(model, enc, dec, tgt)
            if not math.isfinite(loss.item()):
                model.load_state_dict(good)
                raise Stage2Aborted(f"non-finite loss at epoch {epoch + 1}", ckpt)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
            level_sums += terms
            n_batches += 1
        entry = {"epoch": epoch + 1, "loss": total / n_batches,
                 "level_ce": (level_sums / n_batches).tolist(), "lr": sched.get_last_lr()[0]}
        state.history.append(entry)
        good = {k: v.clone() for k, v in model.state_dict().items()}
        if out is not None:
            tmp = ckpt.with_suffix(".tmp")
            torch.save({"model": model.state_dict(), "optimizer": opt.state_dict(), "epoch": epoch + 1}, tmp)
            os.replace(tmp, ckpt)
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        if epoch_callback is not None:
            epoch_callback(state)
        log.debug("stage 2 epoch %d: %s", epoch + 1, entry)
    model.eval()
    return state


def save_recommender(state: RecState, tag_vecs: np.ndarray, out_dir, code_tag_names: list[dict] | None = None
                     ) -> None:
    """Config, vocab sizes, frozen tag vectors and weights.

    ``code_tag_names`` (per level, code -> tag string) is stored for rendering
    tag paths at generation time.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if code_tag_names is not None:
        with open(out / "code_tags.json", "w") as fh:
            json.dump([{str(k): v for k, v in sorted(m.items())} for m in code_tag_names], fh, indent=1)
    state.config.save(out / "rec_config.json")
    with open(out / "vocab.json", "w") as fh:
        json.dump({"sizes": list(state.vocab.sizes)}, fh)
    np.save(out / "tag_vectors.npy", tag_vecs)
    torch.save(state.model.state_dict(), out / "rec_weights.pt")


def load_recommender(out_dir) -> RecState:
    out = Path(out_dir)
    config = RecConfig.load(out / "rec_config.json")
    with open(out / "vocab.json") as fh:
        vocab = TokenVocab(tuple(json.load(fh)["sizes"]))
    tag_vecs = np.load(out / "tag_vectors.npy")
    model = SemanticIDRecommender(config, vocab, tag_vecs)
    model.load_state_dict(torch.load(out / "rec_weights.pt", weights_only=True))
    model.eval()
    return RecState(model, config, vocab)


def load_code_tag_names(out_dir) -> list[dict[int, str]]:
    path = Path(out_dir) / "code_tags.json"
    if not path.exists():
        return []
    with open(path) as fh:
        return [{int(k): v for k, v in m.items()} for m in json.load(fh)]
