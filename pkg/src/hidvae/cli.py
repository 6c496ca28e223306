"""Command-line entry points.

``hidvae`` runs the whole pipeline or a sweep; ``synth``, ``tagg``, ``rec``
and ``hidvae-eval`` expose single stages. Logs go to stderr, results to files
or stdout as JSON.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise click.BadParameter("k values must be positive")
    return ks


# ---------------------------------------------------------------- hidvae


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    """Hierarchical semantic-ID tokenizer and generative recommender."""
    _setup_logging(verbose)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--run-dir", default=None, help="Override the run directory from the config.")
def run(config_path, run_dir):
    """Run every stage; artifacts land in the run directory."""
    from .pipeline import PipelineConfig, PipelineError, run_pipeline

    cfg = PipelineConfig.load(config_path)
    if run_dir:
        cfg.run_dir = run_dir
    try:
        out = run_pipeline(cfg)
    except PipelineError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(str(out / "report.json"))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--run-dir", default=None)
def sweep(config_path, grid_path, run_dir):
    """One pipeline run per grid point; writes sweep.csv."""
    from .pipeline import PipelineConfig, run_sweep

    cfg = PipelineConfig.load(config_path)
    if run_dir:
        cfg.run_dir = run_dir
    grid = json.loads(Path(grid_path).read_text())
    try:
        out = run_sweep(cfg, grid)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(str(out))


# ---------------------------------------------------------------- synth


@click.group()
def synth():
    """Synthetic datasets with a known category tree."""
    _setup_logging(False)


@synth.command("gen")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def synth_gen(config_path, out_dir, seed):
    """Write items.jsonl, interactions.jsonl and tags.json."""
    from .synth import SynthConfig, generate

    d = json.loads(Path(config_path).read_text()) if config_path else {}
    if seed is not None:
        d["seed"] = seed
    cfg = SynthConfig.from_dict(d)
    catalog, _, log = generate(cfg, out_dir)
    click.echo(json.dumps({"out": out_dir, "items": len(catalog), "users": len(log.users)}))


# ---------------------------------------------------------------- tagg


@click.group()
def tagg():
    """Hierarchical tag generation (retrieve candidates, then classify)."""
    _setup_logging(False)


@tagg.command("gen")
@click.option("--items", "items_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--hierarchy", "hier_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--classifier", type=click.Choice(["mock", "chat"]), default="mock", show_default=True)
@click.option("--url", default=None, help="Chat-completions endpoint for --classifier chat.")
@click.option("--model", "model_name", default=None)
@click.option("--api-key", envvar="HIDVAE_API_KEY", default=None)
@click.option("--embedder", type=click.Choice(["hashing", "sentence-transformers"]), default="hashing",
              show_default=True)
@click.option("--embed-dim", type=int, default=256, show_default=True)
@click.option("--out", "out_path", default="items_tagged.jsonl", show_default=True)
@click.option("--fallback-report", default="tag_fallbacks.json", show_default=True)
def tagg_gen(items_path, hier_path, k, classifier, url, model_name, api_key, embedder, embed_dim, out_path,
             fallback_report):
    """Fill in tags for items that have none."""
    from .data import load_hierarchy, load_items, save_items
    from .tag_gen import ChatCompletionClassifier, HashingEmbedder, SentenceTransformerEmbedder, mock_setup, tag_catalog

    emb = HashingEmbedder(embed_dim) if embedder == "hashing" else SentenceTransformerEmbedder()
    hierarchy = load_hierarchy(hier_path, embedder=emb.embed)
    catalog = load_items(items_path)
    mock, item_vec = mock_setup(catalog, hierarchy, emb)
    if classifier == "mock":
        clf = mock
    else:
        if not url or not model_name:
            raise click.UsageError("--classifier chat needs --url and --model")
        clf = ChatCompletionClassifier(url, model_name, api_key)
    tagged, fallback = tag_catalog(catalog, hierarchy, clf, k=k, item_vec=item_vec)
    save_items(tagged, out_path)
    Path(fallback_report).write_text(json.dumps(fallback.to_json(), indent=1) + "\n")
    click.echo(json.dumps({"items": len(tagged), "fallbacks": len(fallback.to_json().get("events", []))}))


# ---------------------------------------------------------------- rec


@click.group()
def rec():
    """Generative recommender over semantic IDs."""
    _setup_logging(False)


@rec.command("train")
@click.option("--ids", "ids_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--log", "log_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--items", "items_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Tagged items; with --hierarchy enables tag-text embeddings.")
@click.option("--hierarchy", "hier_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--embed-dim", type=int, default=256, show_default=True,
              help="Hashing-embedder width when tags.json has no embeddings_path.")
@click.option("--out", "out_dir", default="recommender", show_default=True)
def rec_train(ids_path, log_path, config_path, items_path, hier_path, embed_dim, out_dir):
    """Train on the leave-one-out training split."""
    import numpy as np

    from .data import leave_one_out_split, load_hierarchy, load_interactions, load_items
    from .recommender import RecConfig, TokenVocab, code_tag_map, code_tag_names, save_recommender, tag_vectors, train_stage2
    from .tag_gen import HashingEmbedder
    from .tokenizer import read_ids_tsv

    id_map = read_ids_tsv(ids_path)
    split = leave_one_out_split(load_interactions(log_path))
    cfg = RecConfig.load(config_path) if config_path else RecConfig()
    vocab = TokenVocab.from_id_map(id_map)
    names = None
    if items_path and hier_path:
        emb = HashingEmbedder(embed_dim)
        catalog = load_items(items_path)
        hierarchy = load_hierarchy(hier_path, embedder=emb.embed)
        n_levels = min(len(next(iter(id_map.values())).codes), hierarchy.levels)
        code_tags = code_tag_map(id_map, catalog, n_levels)
        vecs = tag_vectors(vocab, code_tags, hierarchy.tag_embed)
        names = code_tag_names(code_tags, hierarchy)
    else:
        vecs = np.zeros((vocab.n_tokens, 1), dtype=np.float32)
    state = train_stage2(split, id_map, vocab, vecs, cfg, out_dir=out_dir)
    save_recommender(state, vecs, out_dir, names)
    click.echo(json.dumps({"out": out_dir, "final_loss": state.history[-1]["loss"] if state.history else None}))


@rec.command("generate")
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--ids", "ids_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--history", required=True, help="A user_id (needs --log) or a comma-separated item list.")
@click.option("--log", "log_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--beam", type=int, default=None)
def rec_generate(model_dir, ids_path, history, log_path, k, beam):
    """Print the top-k items as JSON: item_id, logprob, tag_path."""
    from .data import load_interactions
    from .recommender import PrefixTrie, generate, load_code_tag_names, load_recommender, tag_path
    from .tokenizer import read_ids_tsv

    id_map = read_ids_tsv(ids_path)
    items = None
    if log_path is not None:
        seqs = load_interactions(log_path).sequences
        if history in seqs:
            items = seqs[history]
    if items is None:
        items = [i.strip() for i in history.split(",") if i.strip()]
    unknown = [i for i in items if i not in id_map]
    if unknown:
        raise click.BadParameter(f"unknown items or user: {unknown[:5]}", param_hint="--history")
    state = load_recommender(model_dir)
    names = load_code_tag_names(model_dir)
    recs = generate(state.model, [[id_map[i] for i in items]], PrefixTrie.build(id_map), k, beam=beam)[0]
    out = [{"item_id": r.item_id, "logprob": r.logprob, "tag_path": tag_path(id_map[r.item_id], names)} for r in recs]
    click.echo(json.dumps(out, indent=1))


# ---------------------------------------------------------------- eval


@click.group()
def eval_group():
    """Metrics over a trained run."""
    _setup_logging(False)


@eval_group.command("run")
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Recommender directory, or a pipeline run directory.")
@click.option("--ids", "ids_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--log", "log_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", "ks", default="5,10", show_default=True)
@click.option("--tokenizer", "tok_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="With --items, adds per-level tag accuracy.")
@click.option("--items", "items_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--min-class-count", type=int, default=30, show_default=True)
@click.option("--out", "out_path", default="report.json", show_default=True)
def eval_run(model_dir, ids_path, log_path, ks, tok_dir, items_path, min_class_count, out_path):
    """Leave-one-out Recall@K / NDCG@K on the test items; writes report.json."""
    from .data import leave_one_out_split, load_interactions, load_items
    from .evaluation import MetricReport, collision_rate, evaluate_recommender, per_layer_tag_accuracy
    from .recommender import PrefixTrie, load_recommender
    from .tokenizer import load_tokenizer, read_ids_tsv

    ks = _parse_ks(ks)
    model_dir = Path(model_dir)
    if (model_dir / "recommender").is_dir():
        tok_dir = tok_dir or (model_dir / "tokenizer")
        model_dir = model_dir / "recommender"
    id_map = read_ids_tsv(ids_path)
    split = leave_one_out_split(load_interactions(log_path))
    state = load_recommender(model_dir)
    recall, ndcg, _ = evaluate_recommender(state, split, id_map, PrefixTrie.build(id_map), ks)
    acc = []
    if tok_dir and items_path:
        tok = load_tokenizer(tok_dir)
        catalog = {k: v for k, v in load_items(items_path).items() if k in id_map}
        acc = per_layer_tag_accuracy(tok, catalog, min_class_count)
    report = MetricReport(recall, ndcg, len(split.users), collision_rate(id_map), acc)
    report.save(out_path)
    click.echo(json.dumps(report.to_dict(), sort_keys=True))


@eval_group.command("latents")
@click.option("--tokenizer", "tok_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--items", "items_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default="latents.tsv", show_default=True)
def eval_latents(tok_dir, items_path, out_path):
    """Export z0 and code tuples per item as TSV."""
    from .data import load_items
    from .evaluation import export_latents
    from .tokenizer import load_tokenizer

    export_latents(load_tokenizer(tok_dir), load_items(items_path), out_path)
    click.echo(out_path)


main.add_command(synth)
main.add_command(tagg)
main.add_command(rec)
main.add_command(eval_group, name="eval")

if __name__ == "__main__":
    main()
