"""End-to-end orchestration: data, tags, tokenizer, IDs, recommender, evaluation."""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from .data import (
    InteractionLog,
    TagHierarchy,
    five_core_filter,
    leave_one_out_split,
    load_hierarchy,
    load_interactions,
    load_items,
    save_hierarchy,
    save_interactions,
    save_items,
)
from .evaluation import (
    MetricReport,
    collision_rate,
    evaluate_popularity,
    evaluate_recommender,
    per_layer_tag_accuracy,
)
from .recommender import (
    PrefixTrie,
    RecConfig,
    TokenVocab,
    code_tag_map,
    code_tag_names,
    load_recommender,
    save_recommender,
    tag_vectors,
    train_stage2,
)
from .synth import SynthConfig, generate
from .tag_gen import DEFAULT_K_RETRIEVE, HashingEmbedder, mock_setup, tag_catalog
from .tokenizer import TokenizerConfig, assign_ids, load_tokenizer, read_ids_tsv, save_tokenizer, train_stage1
from .tokenizer.ids import write_ids_tsv

log = logging.getLogger(__name__)

# per-stage offsets from the root seed
SEED_OFFSETS = {"synth": 0, "tag_gen": 1, "tokenizer": 2, "recommender": 3}

# desk-scale defaults for the synthetic pipeline
SYNTH_TOKENIZER = {"d": 32, "K": [64, 64, 64], "hidden": [64, 64], "lr": 1e-3, "epochs": 100}
SYNTH_RECOMMENDER = {"layers": 2, "heads": 4, "hidden": 64, "ff": 128, "lr": 1e-3, "batch": 256,
                     "warmup_steps": 100, "epochs": 20, "max_history": 20}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    run_dir: str = "runs/default"
    seed: int = 0
    synth: dict | None = None
    items: str | None = None
    interactions: str | None = None
    hierarchy: str | None = None
    core_threshold: int = 5
    tokenizer: dict = field(default_factory=dict)
    recommender: dict = field(default_factory=dict)
    tag_gen: dict = field(default_factory=lambda: {"k": DEFAULT_K_RETRIEVE, "embed_dim": 256})
    collision_mode: str = "report"
    ks: list[int] = field(default_factory=lambda: [5, 10])
    min_class_count: int = 30

    def validate(self, check_paths: bool = True) -> None:
        if self.synth is None:
            missing = [n for n in ("items", "interactions", "hierarchy") if getattr(self, n) is None]
            if missing:
                raise ValueError(f"config needs 'synth' or dataset paths; missing {missing}")
            if check_paths:
                for n in ("items", "interactions", "hierarchy"):
                    if not Path(getattr(self, n)).exists():
                        raise FileNotFoundError(f"{n} path {getattr(self, n)!r} does not exist")
        if self.collision_mode not in ("report", "tiger-append"):
            raise ValueError(f"unknown collision_mode {self.collision_mode!r}")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ValueError("ks must be a nonempty list of positive integers")
        # fail early on bad stage sub-configs
        self.tokenizer_config(d_in=self.tokenizer.get("d_in", 1))
        self.rec_config()

    def to_dict(self) -> dict:
        return {
            "run_dir": self.run_dir, "seed": self.seed, "synth": self.synth, "items": self.items,
            "interactions": self.interactions, "hierarchy": self.hierarchy,
            "core_threshold": self.core_threshold, "tokenizer": self.tokenizer, "recommender": self.recommender,
            "tag_gen": self.tag_gen, "collision_mode": self.collision_mode, "ks": list(self.ks),
            "min_class_count": self.min_class_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        """Content digest of everything except the output location."""
        d = self.to_dict()
        d.pop("run_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def tokenizer_config(self, d_in: int) -> TokenizerConfig:
        base = dict(SYNTH_TOKENIZER) if self.synth is not None else {}
        base.update(self.tokenizer)
        base["d_in"] = d_in
        base["seed"] = self.seed + SEED_OFFSETS["tokenizer"]
        return TokenizerConfig.from_dict(base)

    def rec_config(self) -> RecConfig:
        base = dict(SYNTH_RECOMMENDER) if self.synth is not None else {}
        base.update(self.recommender)
        base["seed"] = self.seed + SEED_OFFSETS["recommender"]
        return RecConfig.from_dict(base)


@dataclass
class Dataset:
    catalog: dict
    hierarchy: TagHierarchy
    log: InteractionLog


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_dataset(cfg: PipelineConfig) -> Dataset:
    """Synthesize or read the raw data, then apply k-core filtering."""
    if cfg.synth is not None:
        sc = SynthConfig.from_dict({**cfg.synth, "seed": cfg.seed + SEED_OFFSETS["synth"]})
        catalog, hierarchy, ilog = generate(sc)
    else:
        embedder = HashingEmbedder(cfg.tag_gen.get("embed_dim", 256))
        catalog = load_items(cfg.items, embedder=embedder.embed)
        hierarchy = load_hierarchy(cfg.hierarchy, embedder=embedder.embed)
        ilog = load_interactions(cfg.interactions)
    ilog.check_catalog(catalog)
    ilog, catalog = five_core_filter(ilog, catalog, cfg.core_threshold)
    return Dataset(catalog, hierarchy, ilog)


def ensure_tags(data: Dataset, cfg: PipelineConfig):
    """Tag items lacking a hierarchy with the retrieval-then-classify mock."""
    if all(it.tags is not None for it in data.catalog.values()):
        return data, None
    embedder = HashingEmbedder(cfg.tag_gen.get("embed_dim", 256))
    clf, item_vec = mock_setup(data.catalog, data.hierarchy, embedder)
    catalog, fallback = tag_catalog(data.catalog, data.hierarchy, clf, k=cfg.tag_gen.get("k", DEFAULT_K_RETRIEVE),
                                    item_vec=item_vec)
    return Dataset(catalog, data.hierarchy, data.log), fallback


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def run_pipeline(cfg: PipelineConfig, data: Dataset | None = None) -> Path:
    """Run every stage into ``cfg.run_dir`` and return it.

    The run directory holds the filtered dataset, both model checkpoints,
    ids.tsv, report.json, baseline_report.json and manifest.json. A failing
    stage leaves earlier artifacts in place and raises :class:`PipelineError`.
    """
    with _Stage("config"):
        cfg.validate(check_paths=data is None)
    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    _write_json(run / "pipeline.json", cfg.to_dict())

    with _Stage("data"):
        if data is None:
            data = load_dataset(cfg)
    with _Stage("tag_gen"):
        data, fallback = ensure_tags(data, cfg)
        if fallback is not None:
            _write_json(run / "tag_fallbacks.json", fallback.to_json())
        data_dir = run / "data"
        data_dir.mkdir(exist_ok=True)
        save_items(data.catalog, data_dir / "items.jsonl")
        save_interactions(data.log, data_dir / "interactions.jsonl")
        save_hierarchy(data.hierarchy, data_dir / "tags.json")
        split = leave_one_out_split(data.log)

    with _Stage("tokenizer"):
        d_in = next(iter(data.catalog.values())).feature.shape[0]
        tcfg = cfg.tokenizer_config(d_in)
        tok = train_stage1(data.catalog, data.hierarchy, tcfg, out_dir=run / "tokenizer")
        save_tokenizer(tok, run / "tokenizer")

    with _Stage("assign_ids"):
        id_map, report = assign_ids(data.catalog, tok, cfg.collision_mode)
        write_ids_tsv(id_map, run / "ids.tsv")
        _write_json(run / "collisions.json", report)

    with _Stage("recommender"):
        vocab = TokenVocab.from_id_map(id_map, tcfg.K)
        n_levels = min(tcfg.L, data.hierarchy.levels)
        code_tags = code_tag_map(id_map, data.catalog, n_levels)
        vecs = tag_vectors(vocab, code_tags, data.hierarchy.tag_embed)
        rec = train_stage2(split, id_map, vocab, vecs, cfg.rec_config(), out_dir=run / "recommender")
        save_recommender(rec, vecs, run / "recommender", code_tag_names(code_tags, data.hierarchy))

    with _Stage("eval"):
        evaluate_run(run, cfg, data=data, tok=tok, id_map=id_map, rec=rec)

    artifacts = sorted(p for p in run.rglob("*") if p.is_file() and p.name != "manifest.json")
    _write_json(run / "manifest.json", {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "seed_offsets": SEED_OFFSETS,
        "artifacts": {str(p.relative_to(run)): _sha256(p) for p in artifacts},
    })
    return run


def evaluate_run(run, cfg: PipelineConfig | None = None, data: Dataset | None = None, tok=None, id_map=None,
                 rec=None) -> MetricReport:
    """Write report.json and baseline_report.json from a run directory.

    Anything not passed in is reloaded from the run's own artifacts, so
    re-evaluating a finished run reproduces its report.
    """
    run = Path(run)
    if cfg is None:
        cfg = PipelineConfig.load(run / "pipeline.json")
    if data is None:
        dd = run / "data"
        data = Dataset(load_items(dd / "items.jsonl"), load_hierarchy(dd / "tags.json"),
                       load_interactions(dd / "interactions.jsonl"))
    tok = tok or load_tokenizer(run / "tokenizer")
    id_map = id_map or read_ids_tsv(run / "ids.tsv")
    rec = rec or load_recommender(run / "recommender")
    split = leave_one_out_split(data.log)
    trie = PrefixTrie.build(id_map)
    recall, ndcg, _ = evaluate_recommender(rec, split, id_map, trie, cfg.ks)
    report = MetricReport(recall, ndcg, len(split.users), collision_rate(id_map),
                          per_layer_tag_accuracy(tok, data.catalog, cfg.min_class_count))
    report.save(run / "report.json")
    b_recall, b_ndcg = evaluate_popularity(split, cfg.ks)
    MetricReport(b_recall, b_ndcg, len(split.users)).save(run / "baseline_report.json")
    return report


def grid_points(grid: dict) -> list[dict]:
    if not grid or any(not v for v in grid.values()):
        raise ValueError("sweep grid must be nonempty")
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _point_config(cfg: PipelineConfig, point: dict, run_dir: Path) -> PipelineConfig:
    pc = copy.deepcopy(cfg)
    pc.run_dir = str(run_dir)
    tok = dict(pc.tokenizer)
    tok.update(point)
    if "L" in point:
        K = tok.get("K", (SYNTH_TOKENIZER if cfg.synth is not None else {}).get("K", [256]))
        K = [K] if isinstance(K, int) else list(K)
        if len(K) != point["L"]:
            tok["K"] = [K[0]] * point["L"]
    pc.tokenizer = tok
    return pc


SWEEP_FIELDS = ["point", "params", "recall@10", "ndcg@10", "collision_rate", "status", "error"]


def run_sweep(cfg: PipelineConfig, grid: dict) -> Path:
    """One pipeline run per grid point over shared data; rows go to sweep.csv.

    Grid keys are tokenizer fields (e.g. ``L``, ``beta_unique``, ``m``). A
    failing point is recorded and the sweep moves on.
    """
    points = grid_points(grid)
    root = Path(cfg.run_dir)
    root.mkdir(parents=True, exist_ok=True)
    cfg.validate()
    data = load_dataset(cfg)
    rows = []
    for i, point in enumerate(points):
        pdir = root / f"point_{i:03d}"
        row = {"point": i, "params": json.dumps(point, sort_keys=True)}
        try:
            pc = _point_config(cfg, point, pdir)
            run_pipeline(pc, data=data)
            rep = json.loads((pdir / "report.json").read_text())
            row.update({"recall@10": rep["recall"].get("10"), "ndcg@10": rep["ndcg"].get("10"),
                        "collision_rate": rep["collision_rate"], "status": "ok", "error": ""})
        except Exception as exc:  # one bad point must not stop the sweep
            log.error("sweep point %d %s failed: %s", i, point, exc)
            row.update({"recall@10": "", "ndcg@10": "", "collision_rate": "", "status": "failed",
                        "error": str(exc)})
        rows.append(row)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return root / "sweep.csv"


def clean_run_dir(path) -> None:
    p = Path(path)
    if p.exists():
        shutil.rmtree(p)
