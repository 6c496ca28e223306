import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hidvae.data import Item, TagHierarchy, feature_matrix
from hidvae.synth import SynthConfig, gen_catalog
from hidvae.tokenizer import (
    HiDVAE,
    SemanticID,
    TokenizerConfig,
    assign_ids,
    commitment_loss,
    init_codebooks_kmeans,
    load_tokenizer,
    quantize,
    quantize_residual_chain,
    read_ids_tsv,
    recon_loss,
    save_tokenizer,
    tag_alignment_loss,
    tag_prediction_loss,
    total_loss,
    train_stage1,
    uniqueness_loss,
    write_ids_tsv,
)
from hidvae.tokenizer.ids import ids_from_codes
from hidvae.tokenizer.losses import codebook_loss, focal_cross_entropy

T = torch.tensor


# ---------------------------------------------------------------- config


def test_config_defaults():
    c = TokenizerConfig()
    assert (c.beta_commit, c.beta_sup, c.beta_unique) == (0.25, 1.0, 2.0)
    assert (c.tau, c.m, c.gamma_focal, c.lr, c.batch) == (0.07, 0.9, 2.0, 3e-4, 128)


@pytest.mark.parametrize("bad", [{"tau": 0.0}, {"m": 1.5}, {"beta_unique": -1.0}, {"K": [4, 4]}])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        TokenizerConfig(**bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TokenizerConfig.from_dict({"beta": 1})


# ---------------------------------------------------------------- quantization


def test_quantize_nearest():
    cb = T([[0.0, 0.0], [2.0, 2.0]])
    assert int(quantize(T([0.4, 0.4]), cb)[0]) == 0


def test_quantize_tie_lowest_index():
    cb = T([[0.0, 0.0], [2.0, 2.0]])
    assert int(quantize(T([1.0, 1.0]), cb)[0]) == 0


def test_quantize_exact_hit_gives_zero_residual():
    cb = torch.randn(8, 3)
    idx, code = quantize(cb[5].clone(), cb)
    assert int(idx) == 5 and torch.equal(cb[5] - code, torch.zeros(3))


def test_quantize_empty_codebook():
    with pytest.raises(ValueError):
        quantize(torch.zeros(2), torch.zeros(0, 2))


def test_chain_first_residual():
    books = [T([[2.0, 0.0], [10.0, 10.0]]), T([[1.0, 1.0], [0.0, 0.0]])]
    tr = quantize_residual_chain(T([[3.0, 1.0]]), books)
    assert tr.r[1].tolist() == [[1.0, 1.0]]
    assert tr.r[2].tolist() == [[0.0, 0.0]]


def test_chain_perfect_decomposition():
    parts = [T([4.0, -1.0, 0.5]), T([0.25, 0.5, 0.0]), T([0.0, 0.125, -0.0625])]
    books = [torch.stack([p, p + 100.0]) for p in parts]
    z0 = sum(parts)[None]
    tr = quantize_residual_chain(z0, books)
    assert torch.equal(tr.r[-1], torch.zeros(1, 3))
    assert tr.codes.tolist() == [[0, 0, 0]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_chain_identities(seed):
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn(5, 4, generator=g, dtype=torch.float64)
    books = [torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(3)]
    tr = quantize_residual_chain(z0, books)
    for l in range(3):
        assert torch.allclose(tr.r[l + 1], tr.r[l] - tr.e[l])
        assert torch.allclose(tr.zq_sum[l], sum(tr.e[: l + 1]))
        assert torch.equal(tr.zq_cat[l], torch.cat(tr.e[: l + 1], dim=-1))
        dist = ((tr.r[l][:, None] - books[l][None]) ** 2).sum(-1)
        assert torch.equal(tr.codes[:, l], dist.argmin(1))
    assert torch.allclose(z0, tr.zq_sum[-1] + tr.r[-1])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(-50, 50)))
def test_argmin_translation_invariant(r, shift):
    cb = torch.as_tensor(np.random.default_rng(0).normal(size=(6, 3)))
    a = quantize(torch.as_tensor(r), cb)[0]
    b = quantize(torch.as_tensor(r + shift), cb + torch.as_tensor(shift))[0]
    d = ((torch.as_tensor(r) - cb) ** 2).sum(-1)
    # the shifted problem may only disagree on numerically tied distances
    assert int(a) == int(b) or abs(float(d[a] - d[b])) < 1e-9


# ---------------------------------------------------------------- losses


def test_recon_examples():
    assert recon_loss(T([[1.0, 0.0]]), T([[1.0, 0.0]])).item() == 0.0
    assert recon_loss(T([[1.0, 0.0]]), T([[0.0, 0.0]])).item() == 1.0
    x = T([[1.0, 0.0], [1.0, 1.0]])
    xh = T([[0.0, 0.0], [1.0, 1.0 + math.sqrt(3.0)]])
    assert recon_loss(x, xh).item() == pytest.approx(2.0)


def test_commitment_examples():
    assert commitment_loss([T([[1.0, 1.0]])], [T([[1.0, 1.0]])]).item() == 0.0
    assert commitment_loss([T([[1.0, 1.0]])], [T([[0.0, 0.0]])]).item() == 2.0


def test_commitment_gives_codebooks_no_gradient():
    cb = torch.randn(4, 3, requires_grad=True)
    z0 = torch.randn(5, 3, requires_grad=True)
    tr = quantize_residual_chain(z0, [cb, cb])
    commitment_loss(tr.r[:-1], tr.e).backward()
    assert cb.grad is None or torch.count_nonzero(cb.grad) == 0
    assert z0.grad is not None and torch.count_nonzero(z0.grad) > 0


def test_codebook_term_gives_encoder_no_gradient():
    cb = torch.randn(4, 3, requires_grad=True)
    z0 = torch.randn(5, 3, requires_grad=True)
    tr = quantize_residual_chain(z0, [cb])
    codebook_loss(tr.r[:-1], tr.e).backward()
    assert z0.grad is None or torch.count_nonzero(z0.grad) == 0
    assert torch.count_nonzero(cb.grad) > 0


def test_alignment_single_item_is_zero():
    assert tag_alignment_loss(torch.randn(1, 4), torch.randn(1, 4), None, 0.07).item() == pytest.approx(0.0, abs=1e-7)


def test_alignment_two_items_closed_form():
    zq = T([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    tags = zq.clone()  # own sim 1, other sim 0
    got = tag_alignment_loss(zq, tags, None, 1.0).item()
    assert got == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert got == pytest.approx(0.3133, abs=5e-5)


def test_alignment_identical_tags_is_log_b():
    tags = torch.ones(6, 4, dtype=torch.float64)
    # all sims to a row are equal, so the softmax is uniform
    zq = torch.ones(6, 4, dtype=torch.float64) * torch.arange(1, 7, dtype=torch.float64)[:, None]
    assert tag_alignment_loss(zq, tags, None, 0.07).item() == pytest.approx(math.log(6), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.floats(0.05, 5.0), st.integers(0, 1000))
def test_alignment_nonnegative(b, tau, seed):
    g = torch.Generator().manual_seed(seed)
    loss = tag_alignment_loss(torch.randn(b, 3, generator=g), torch.randn(b, 3, generator=g), None, tau)
    assert loss.item() >= -1e-6


def test_prediction_uniform_four_classes():
    logits = torch.zeros(3, 4, dtype=torch.float64)
    labels = torch.tensor([0, 2, 3])
    assert tag_prediction_loss(logits, labels, lambda z: z).item() == pytest.approx(math.log(4), abs=1e-12)


def test_prediction_focal_two_classes():
    logits = torch.zeros(2, 2, dtype=torch.float64)
    got = tag_prediction_loss(logits, torch.tensor([0, 1]), lambda z: z, gamma=2.0).item()
    assert got == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert got == pytest.approx(0.1733, abs=5e-5)


def test_prediction_confident_correct_is_zero():
    logits = torch.tensor([[50.0, -50.0, -50.0]])
    assert tag_prediction_loss(logits, torch.tensor([0]), lambda z: z).item() < 1e-12


def test_prediction_label_out_of_range():
    with pytest.raises(ValueError):
        focal_cross_entropy(torch.zeros(1, 3), torch.tensor([3]))


def test_uniqueness_examples():
    z = T([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    assert uniqueness_loss(z, T([[0, 1], [0, 2], [1, 0]]), 0.9).item() == 0.0  # no collisions
    assert uniqueness_loss(z[:2], T([[0, 1], [0, 1]]), 0.9).item() == pytest.approx(0.1)
    half = T([[1.0, 0.0], [0.5, math.sqrt(3) / 2]])  # cos = 0.5
    assert uniqueness_loss(half, T([[3, 3], [3, 3]]), 0.9).item() == 0.0


def test_uniqueness_mean_over_colliding_pairs():
    z = T([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    codes = T([[0], [0], [0], [1]])
    # three colliding pairs, all with cos 1
    assert uniqueness_loss(z, codes, 0.5).item() == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), arrays(np.float64, 6, elements=st.floats(0.01, 100)))
def test_uniqueness_scale_invariant(seed, scales):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(6, 3, generator=g, dtype=torch.float64)
    codes = torch.randint(0, 2, (6, 2), generator=g)
    a = uniqueness_loss(z, codes, 0.3).item()
    b = uniqueness_loss(z * torch.as_tensor(scales)[:, None], codes, 0.3).item()
    assert a == pytest.approx(b, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10))
def test_uniqueness_zero_when_distinct(n):
    codes = torch.arange(n)[:, None].repeat(1, 2)
    assert uniqueness_loss(torch.ones(n, 3), codes, 0.0).item() == 0.0


# ---------------------------------------------------------------- model


def tiny_model(d_in=6, d=4, K=(3, 3), n_classes=(2, 3), d_tag=5, **kw):
    c = TokenizerConfig(d_in=d_in, d=d, L=len(K), K=list(K), hidden=[8, 8], **kw)
    torch.manual_seed(0)
    return HiDVAE(c, list(n_classes), d_tag)


def test_encode_zero_last_layer_gives_bias():
    m = tiny_model()
    last = m.encoder[-1]
    torch.nn.init.zeros_(last.weight)
    with torch.no_grad():
        last.bias.copy_(torch.arange(4.0))
    out = m.encode(torch.randn(3, 6))
    assert torch.equal(out, torch.arange(4.0).expand(3, 4))


def test_encode_batch_consistent_and_checked():
    m = tiny_model()
    x = torch.randn(5, 6)
    batch = m.encode(x)
    for i in range(5):
        assert torch.allclose(batch[i], m.encode(x[i:i + 1])[0], atol=1e-6)
    with pytest.raises(ValueError):
        m.encode(torch.randn(2, 7))


def test_classifier_widths():
    m = tiny_model(n_classes=(2, 5))
    assert [p.head[-1].out_features for p in m.predictors] == [2, 5]
    assert [p.feature[0].in_features for p in m.predictors] == [4, 8]
    assert [p.feature[0].out_features for p in m.predictors] == [2 * 4 * 2, 2 * 4 * 3]


def test_total_loss_zero_betas_is_recon():
    m = tiny_model(beta_commit=0, beta_codebook=0, beta_sup=0, beta_unique=0)
    x = torch.randn(4, 6)
    loss, parts, _ = total_loss(m, x, None, [])
    assert loss.item() == pytest.approx(parts["recon"])


def test_total_loss_term_by_term():
    m = tiny_model(d_in=5, d=4, K=(3, 3), n_classes=(2, 3), d_tag=3)
    m.eval()  # dropout off so the independent recomputation matches
    x = torch.randn(4, 5)
    tags = torch.tensor([[0, 1], [1, 2], [0, 0], [1, 1]])
    emb = [torch.randn(2, 3), torch.randn(3, 3)]
    loss, parts, tr = total_loss(m, x, tags, emb)
    c = m.config
    x_hat = m.decode(tr.zq_sum[-1])
    rec = ((x - x_hat) ** 2).sum(-1).mean()
    commit = sum(((tr.r[l] - tr.e[l]) ** 2).sum(-1).mean() for l in range(2))
    align = pred = 0.0
    for l in range(2):
        p = m.projectors[l](emb[l][tags[:, l]])
        cos = torch.nn.functional.cosine_similarity(tr.zq_sum[l][:, None], p[None], dim=-1) / c.tau
        align += torch.nn.functional.cross_entropy(cos, torch.arange(4))
        logp = torch.log_softmax(m.predictors[l](tr.zq_cat[l]), -1)[torch.arange(4), tags[:, l]]
        pred += (-(1 - logp.exp()) ** 2 * logp).mean()
    same = (tr.codes[:, None] == tr.codes[None]).all(-1).triu(1).nonzero()
    if len(same):
        cos = torch.nn.functional.cosine_similarity(tr.z0[same[:, 0]], tr.z0[same[:, 1]], dim=-1)
        uniq = torch.relu(cos - c.m).mean()
    else:
        uniq = 0.0
    expect = rec + c.beta_commit * commit + c.beta_codebook * commit + c.beta_sup * (align + pred) + c.beta_unique * uniq
    assert loss.item() == pytest.approx(expect.detach().item(), rel=1e-5)


def test_total_loss_perfect_state_is_zero():
    # identity-like autoencoder whose latents sit exactly on distinct codewords
    c = TokenizerConfig(d_in=2, d=2, L=1, K=[3], hidden=[], beta_sup=0.0)
    m = HiDVAE(c, [], 4)
    with torch.no_grad():
        for lin in (m.encoder[0], m.decoder[0]):
            lin.weight.copy_(torch.eye(2))
            lin.bias.zero_()
        m.codebooks[0].copy_(T([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    loss, parts, _ = total_loss(m, T([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), None, [])
    assert loss.item() == 0.0 and parts["n_colliding_pairs"] == 0


def test_total_loss_missing_tags_names_item():
    m = tiny_model()
    with pytest.raises(ValueError, match="'b'"):
        total_loss(m, torch.randn(2, 6), torch.tensor([[0, 1], [-1, 0]]), [torch.randn(2, 5), torch.randn(3, 5)],
                   item_ids=["a", "b"])


# ---------------------------------------------------------------- k-means init


def test_kmeans_recovers_separable_points():
    pts = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    lat = np.repeat(pts, 5, axis=0)
    books, padded = init_codebooks_kmeans(lat, [3])
    assert not padded
    assert sorted(map(tuple, books[0].round(5))) == sorted(map(tuple, pts))


def test_kmeans_single_centroid_is_mean():
    lat = np.random.default_rng(0).normal(size=(20, 3))
    books, _ = init_codebooks_kmeans(lat, [1, 1])
    assert np.allclose(books[0][0], lat.mean(0), atol=1e-5)
    assert np.allclose(books[1][0], 0.0, atol=1e-5)  # residual mean after removing the mean


def test_kmeans_deterministic_and_pads():
    lat = np.random.default_rng(1).normal(size=(6, 3))
    a, pa = init_codebooks_kmeans(lat, [8, 4], seed=3)
    b, _ = init_codebooks_kmeans(lat, [8, 4], seed=3)
    assert pa and all(np.array_equal(x, y) for x, y in zip(a, b))
    assert [x.shape for x in a] == [(8, 3), (4, 3)]


# ---------------------------------------------------------------- training and ids


def four_item_dataset():
    rng = np.random.default_rng(0)
    vocab = [["a", "b"], ["c", "d"]]
    h = TagHierarchy(vocab, [rng.normal(size=(2, 4)).astype(np.float32) for _ in vocab])
    cat = {f"i{k}": Item(f"i{k}", "t", rng.normal(size=6).astype(np.float32), (k % 2, k // 2)) for k in range(4)}
    return cat, h


def test_train_one_epoch_smoke(tmp_path):
    cat, h = four_item_dataset()
    c = TokenizerConfig(d_in=6, d=4, L=2, K=[2, 2], hidden=[8], epochs=1, batch=4)
    st_ = train_stage1(cat, h, c, out_dir=tmp_path)
    assert len(st_.history) == 1
    assert (tmp_path / "checkpoint.pt").exists() or any(tmp_path.glob("*.pt"))
    lines = (tmp_path / "training_log.jsonl").read_text().splitlines()
    assert len(lines) == 1
    for key in ("recon", "commit", "align", "pred", "unique", "collision_rate", "codebook_usage"):
        assert key in lines[0]


def test_training_deterministic_and_reloadable(tmp_path):
    cat, h = gen_catalog(SynthConfig(branching=[2, 2], items_per_leaf=6, level_scales=[1.0, 0.5], d_in=8))
    c = TokenizerConfig(d_in=8, d=4, L=2, K=[4, 4], hidden=[16], epochs=3, batch=8)
    a = train_stage1(cat, h, c)
    b = train_stage1(cat, h, c)
    X = feature_matrix(cat)
    assert np.array_equal(a.codes(X), b.codes(X))
    save_tokenizer(a, tmp_path)
    back = load_tokenizer(tmp_path)
    assert np.array_equal(back.codes(X), a.codes(X))
    assert back.config == a.config


def test_assign_ids_report_and_tiger():
    raw = {"d": (1, 1), "a": (0, 0), "c": (0, 0), "b": (2, 0)}
    id_map, rep = ids_from_codes(raw, "report")
    assert rep["collision_rate"] == 0.5
    assert rep["groups"] == [{"codes": [0, 0], "items": ["a", "c"]}]
    assert all(s.suffix is None for s in id_map.values())
    tig, _ = ids_from_codes(raw, "tiger-append")
    assert tig["a"].suffix == 0 and tig["c"].suffix == 1 and tig["b"].suffix == 0


def test_assign_ids_no_collisions():
    id_map, rep = ids_from_codes({"a": (0,), "b": (1,)}, "tiger-append")
    assert rep["groups"] == [] and rep["collision_rate"] == 0.0
    assert [s.suffix for s in id_map.values()] == [0, 0]


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text("abcdef", min_size=1, max_size=4), st.tuples(st.integers(0, 2), st.integers(0, 2)),
                       min_size=1))
def test_tiger_append_is_injective(raw):
    id_map, _ = ids_from_codes(raw, "tiger-append")
    assert len(set(id_map.values())) == len(id_map)


def test_assign_ids_bad_mode():
    with pytest.raises(ValueError):
        assign_ids({}, None, "bogus")


def test_ids_tsv_round_trip(tmp_path):
    m = {"x": SemanticID((1, 2, 3)), "y": SemanticID((1, 2, 3))}
    write_ids_tsv(m, tmp_path / "a.tsv")
    assert read_ids_tsv(tmp_path / "a.tsv") == m
    m2 = {"x": SemanticID((1, 2), 0), "y": SemanticID((1, 2), 1)}
    write_ids_tsv(m2, tmp_path / "b.tsv")
    assert read_ids_tsv(tmp_path / "b.tsv") == m2
    assert (tmp_path / "b.tsv").read_text().splitlines()[0].split("\t") == ["item_id", "code_1", "code_2", "suffix"]
