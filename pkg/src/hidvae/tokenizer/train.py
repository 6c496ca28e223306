"""Stage-1 training: fit the tokenizer on item features and tag paths."""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.cluster import KMeans

from ..data import TagHierarchy, feature_matrix, tag_matrix
from .config import TokenizerConfig
from .model import HiDVAE, quantize, total_loss

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, checkpoint: Path | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TokenizerState:
    model: HiDVAE
    config: TokenizerConfig
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    kmeans_padded: bool = False

    @torch.no_grad()
    def encode(self, features: np.ndarray) -> np.ndarray:
        self.model.eval()
        return self.model.encode(torch.as_tensor(features, dtype=torch.float32)).numpy()

    @torch.no_grad()
    def codes(self, features: np.ndarray) -> np.ndarray:
        self.model.eval()
        return self.model.codes(torch.as_tensor(features, dtype=torch.float32)).numpy()

    @torch.no_grad()
    def predict_tags(self, features: np.ndarray) -> np.ndarray:
        self.model.eval()
        return self.model.predict_tags(torch.as_tensor(features, dtype=torch.float32)).numpy()


def init_codebooks_kmeans(latents: np.ndarray, K: list[int], seed: int = 0):
    """K-Means codebooks on a batch of latents, level by level on the residuals.

    Returns ``(codebooks, padded)``. If the batch has fewer rows than a
    codebook needs, rows are resampled with small jitter and ``padded`` is True.
    """
    z = np.asarray(latents, dtype=np.float64)
    rng = np.random.default_rng(seed)
    books = []
    padded = False
    residual = z
    for level, k in enumerate(K):
        data = residual
        if data.shape[0] < k:
            padded = True
            extra = data[rng.integers(0, data.shape[0], size=k - data.shape[0])]
            scale = 1e-3 * (data.std() + 1e-6)
            data = np.concatenate([data, extra + rng.normal(0.0, scale, size=extra.shape)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # duplicate points trigger ConvergenceWarning
            km = KMeans(n_clusters=k, n_init=1, random_state=seed + level).fit(data)
        book = km.cluster_centers_
        books.append(book.astype(np.float32))
        idx, code = quantize(torch.as_tensor(residual), torch.as_tensor(book))
        residual = residual - code.numpy()
    return books, padded


def collision_rate_of(codes: np.ndarray) -> float:
    if len(codes) == 0:
        return 0.0
    _, inverse, counts = np.unique(codes, axis=0, return_inverse=True, return_counts=True)
    return float((counts[inverse.reshape(-1)] > 1).mean())


def codebook_usage(codes: np.ndarray, K: list[int]) -> list[float]:
    return [len(np.unique(codes[:, l])) / K[l] for l in range(codes.shape[1])]


def _save_checkpoint(path: Path, model, opt, epoch: int) -> None:
    tmp = path.with_suffix(".tmp")
    torch.save({"model": model.state_dict(), "optimizer": opt.state_dict(), "epoch": epoch}, tmp)
    os.replace(tmp, path)


def train_stage1(catalog, hierarchy: TagHierarchy, config: TokenizerConfig, out_dir=None,
                 epoch_callback=None) -> TokenizerState:
    """Minibatch AdamW on the composite loss.

    Writes ``checkpoint.pt`` and appends to ``training_log.jsonl`` every epoch
    when ``out_dir`` is given. A non-finite loss restores the last completed
    epoch and raises :class:`TrainingAborted`.
    """
    c = config
    X = torch.as_tensor(feature_matrix(catalog, c.d_in))
    n_levels = hierarchy.levels
    T = torch.as_tensor(tag_matrix(catalog, n_levels)) if c.beta_sup > 0 else None
    tag_embed = [torch.as_tensor(e, dtype=torch.float32) for e in hierarchy.tag_embed]
    item_ids = list(catalog)
    n = X.shape[0]

    torch.manual_seed(c.seed)
    gen = torch.Generator().manual_seed(c.seed)
    model = HiDVAE(c, hierarchy.sizes, hierarchy.d_tag)
    opt = torch.optim.AdamW(model.parameters(), lr=c.lr, weight_decay=c.weight_decay)
    state = TokenizerState(model, c)

    out = Path(out_dir) if out_dir is not None else None
    ckpt = log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint.pt"
        log_path = out / "training_log.jsonl"
        log_path.write_text("")

    for epoch in range(c.epochs):
        perm = torch.randperm(n, generator=gen)
        if epoch == 0:
            with torch.no_grad():
                first = perm[: c.batch]
                model.calibrate_encoder(X[first])
                books, padded = init_codebooks_kmeans(model.encode(X[first]).numpy(), c.K, c.seed)
            model.set_codebooks(books)
            state.kmeans_padded = padded
            if padded:
                log.warning("first batch smaller than a codebook; k-means init used jittered resampling")
            good = {k: v.clone() for k, v in model.state_dict().items()}
        model.train()
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, n, c.batch):
            idx = perm[start:start + c.batch]
            tags = T[idx] if T is not None else None
            loss, parts, _ = total_loss(model, X[idx], tags, tag_embed, c, [item_ids[i] for i in idx])
            if not math.isfinite(parts["loss"]):
                model.load_state_dict(good)
                raise TrainingAborted(f"non-finite loss at epoch {epoch + 1}", ckpt)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        state.epoch = epoch + 1
        codes = state.codes(X.numpy())
        entry = {k: v / n_batches for k, v in sums.items()}
        entry.update(
            epoch=epoch + 1,
            collision_rate=collision_rate_of(codes),
            codebook_usage=codebook_usage(codes, c.K),
        )
        state.history.append(entry)
        good = {k: v.clone() for k, v in model.state_dict().items()}
        if out is not None:
            _save_checkpoint(ckpt, model, opt, epoch + 1)
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        if epoch_callback is not None:
            epoch_callback(state)
        log.debug("epoch %d: %s", epoch + 1, entry)
    model.eval()
    return state


def save_tokenizer(state: TokenizerState, out_dir) -> None:
    """Persist config, weights, a flat float32 codebook blob with its shape manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state.config.save(out / "config.json")
    torch.save(state.model.state_dict(), out / "weights.pt")
    books = [cb.detach().cpu().numpy().astype("<f4") for cb in state.model.codebooks]
    with open(out / "codebooks.bin", "wb") as fh:
        for b in books:
            fh.write(b.tobytes())
    meta = {
        "dtype": "float32-le",
        "shapes": [list(b.shape) for b in books],
        "n_classes": state.model.n_classes,
        "d_tag": state.model.d_tag,
        "epoch": state.epoch,
        "kmeans_padded": state.kmeans_padded,
    }
    with open(out / "codebooks.json", "w") as fh:
        json.dump(meta, fh, indent=1)
    if not (out / "training_log.jsonl").exists():
        with open(out / "training_log.jsonl", "w") as fh:
            for entry in state.history:
                fh.write(json.dumps(entry) + "\n")


def load_tokenizer(out_dir) -> TokenizerState:
    out = Path(out_dir)
    config = TokenizerConfig.load(out / "config.json")
    with open(out / "codebooks.json") as fh:
        meta = json.load(fh)
    model = HiDVAE(config, meta["n_classes"], meta["d_tag"])
    model.load_state_dict(torch.load(out / "weights.pt", weights_only=True))
    raw = np.fromfile(out / "codebooks.bin", dtype="<f4")
    books, offset = [], 0
    for shape in meta["shapes"]:
        size = int(np.prod(shape))
        books.append(raw[offset:offset + size].reshape(shape))
        offset += size
    model.set_codebooks(books)
    model.eval()
    history = []
    log_file = out / "training_log.jsonl"
    if log_file.exists():
        history = [json.loads(line) for line in log_file.read_text().splitlines() if line]
    return TokenizerState(model, config, meta.get("epoch", 0), history, meta.get("kmeans_padded", False))
