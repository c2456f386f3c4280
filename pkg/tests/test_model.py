import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracle
from protoedit.model import (
    CONCEPT,
    PROTOTYPE,
    ModelConfig,
    ProtoEditModel,
    build_model,
    cross_attention_score,
    distance_annotate,
    encode_input,
)
from protoedit.text import BOS, build_vocab


def small_config(**kw):
    base = dict(vocab_size=20, d_model=8, n_heads=2, d_scale=4, n_enc_layers=2, n_dec_layers=2,
                d_ff=16, max_len=16, max_distance=5, dropout=0.0, init_std=0.3, init_std_new=0.3)
    base.update(kw)
    return ModelConfig(**base)


def random_input(rng, cfg, n=None, m=None):
    n = n or int(rng.integers(2, cfg.max_len))
    m = m or int(rng.integers(1, cfg.max_len))
    n_c = int(rng.integers(1, n + 1))
    ids = rng.integers(4, cfg.vocab_size, n).tolist()
    groups = [CONCEPT] * n_c + [PROTOTYPE] * (n - n_c)
    dist = [0] * n_c + rng.integers(1, cfg.max_distance + 1, n - n_c).tolist()
    prefix = [BOS] + rng.integers(2, cfg.vocab_size, m - 1).tolist()
    return ids, groups, dist, prefix


def model_logits(model, ids, groups, dist, prefix):
    t = lambda x: torch.tensor([x])
    with torch.no_grad():
        logits, _ = model(t(ids), t(groups), t(dist), None, t(prefix))
    return logits[0].double().numpy()


# -- distance annotation ------------------------------------------------------


def test_distance_annotate_paper_example():
    C = ["guitar", "sit"]
    O = ["a", "man", "sits", "with", "a", "guitar"]
    assert distance_annotate(C + O, 2, C, 16) == [0, 0, 3, 2, 1, 2, 2, 1]


def test_distance_annotate_no_match_and_single():
    C = ["zebra"]
    assert distance_annotate(C + ["a", "dog"], 1, C, 16) == [0, 16, 16]
    assert distance_annotate(["sit", "sit"], 1, ["sit"], 16) == [0, 1]


def test_distance_annotate_clamps():
    C = ["x"]
    O = ["x"] + ["y"] * 10
    assert distance_annotate(C + O, 1, C, 4) == [0, 1, 2, 3] + [4] * 8


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.sampled_from(["dog", "cat", "runs", "run", "the", "sits", "a"]), min_size=1, max_size=3, unique=True),
    st.lists(st.sampled_from(["dog", "dogs", "cat", "runs", "the", "a", "sitting", "sits", "tree"]), max_size=20),
    st.integers(2, 12),
)
def test_distance_annotate_matches_brute_force(C, O, dmax):
    S = C + O
    got = distance_annotate(S, len(C), C, dmax)
    assert got == oracle.brute_force_distances(S, len(C), C, dmax)
    assert all((d == 0) == (i < len(C)) for i, d in enumerate(got))


def test_encode_input_layout_and_truncation():
    vocab = build_vocab([["dog", "run", "a", "dogs", "runs", "fast"]])
    cfg = small_config(vocab_size=len(vocab), max_len=5)
    enc = encode_input(["dog", "run"], ["a", "dogs", "runs", "fast"], vocab, cfg)
    assert enc.tokens == ["dog", "run", "a", "dogs", "runs"]
    assert enc.groups == [0, 0, 1, 1, 1]
    assert enc.distances == [0, 0, 2, 1, 1]
    assert enc.n_concepts == 2


# -- embeddings ---------------------------------------------------------------


def hand_model(d=2, heads=1, **kw):
    cfg = small_config(d_model=d, n_heads=heads, d_scale=1 if d == 1 else 2, **kw)
    return build_model(cfg, 0).double()


def test_embed_input_hand_example():
    model = hand_model(n_enc_layers=1, n_dec_layers=1)
    with torch.no_grad():
        model.tok_emb.weight[5] = torch.tensor([1.0, 0.0])
        model.enc_pos.weight[0] = torch.tensor([0.0, 1.0])
        model.group_concept.copy_(torch.tensor([0.5, 0.5]))
        out = model.embed_input(torch.tensor([[5]]), torch.tensor([[CONCEPT]]))
    assert out[0, 0].tolist() == [1.5, 1.5]


def test_embed_input_group_difference_and_zero_groups():
    model = build_model(small_config(), 1).double()
    ids = torch.tensor([[7]])
    with torch.no_grad():
        a = model.embed_input(ids, torch.tensor([[CONCEPT]]))
        b = model.embed_input(ids, torch.tensor([[PROTOTYPE]]))
        gap = model.group_concept - model.group_prototype
        np.testing.assert_allclose((a - b)[0, 0].numpy(), gap.numpy(), rtol=0, atol=1e-15)

        model.group_concept.zero_()
        model.group_prototype.zero_()
        ids2, groups = torch.tensor([[7, 7]]), torch.tensor([[CONCEPT, PROTOTYPE]])
        plain = model.tok_emb(ids2) + model.enc_pos(torch.arange(2))
        assert torch.equal(model.embed_input(ids2, groups), plain)


def test_embed_input_errors():
    model = build_model(small_config(), 0)
    with pytest.raises(ValueError):
        model.embed_input(torch.tensor([[25]]), torch.tensor([[0]]))
    with pytest.raises(ValueError):
        model.embed_input(torch.full((1, 17), 4), torch.zeros((1, 17), dtype=torch.long))


# -- encoder ------------------------------------------------------------------


def test_encoder_forward_matches_oracle_hand_weights():
    model = hand_model(n_enc_layers=1, n_dec_layers=1)
    cfg = model.config
    g = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.7)
    ids, groups = [4, 9], [CONCEPT, PROTOTYPE]
    with torch.no_grad():
        got = model.encoder_forward(model.embed_input(torch.tensor([ids]), torch.tensor([groups])))[0].numpy()
    want = oracle.encode(oracle.params_of(model), cfg, ids, groups)
    np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)


def test_encoder_shape_and_attention_rows():
    model = build_model(small_config(), 2).double()
    x = torch.randn(1, 7, 8, dtype=torch.float64)
    with torch.no_grad():
        out = model.encoder_forward(x)
        h = model.encoder_layers[0].norm1(x)
        _, w = model.encoder_layers[0].attn(h, h, return_weights=True)
    assert out.shape == x.shape
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-6)


def test_encoder_rejects_non_finite():
    model = build_model(small_config(), 0)
    x = torch.zeros(1, 3, 8)
    x[0, 1, 2] = float("nan")
    with pytest.raises(ValueError):
        model.encoder_forward(x)


# -- scaling module -----------------------------------------------------------


def test_scaling_zero_params_is_identity():
    model = build_model(small_config(init_std_new=0.0), 0)
    h = torch.randn(1, 5, 8)
    with torch.no_grad():
        out, gates = model.scaling_forward(h)
    assert torch.all(gates == 0.5)
    assert torch.equal(out, h)


def test_scaling_hand_example():
    cfg = small_config(d_model=1, n_heads=1, d_scale=1)
    model = ProtoEditModel(cfg).double()
    with torch.no_grad():
        model.scaler.w1.weight.fill_(1.0)
        model.scaler.w1.bias.zero_()
        model.scaler.w2.weight.fill_(1.0)
        model.scaler.w2.bias.zero_()
        out, gate = model.scaling_forward(torch.ones(1, 1, 1, dtype=torch.float64))
    assert gate.item() == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-5)
    assert gate.item() == pytest.approx(0.73106, abs=1e-5)
    assert out.item() == pytest.approx(1.46212, abs=1e-5)


# inputs are post-LayerNorm in the model, so moderate magnitudes cover the real range;
# far larger ones saturate the sigmoid to exactly 0 or 1 in floating point.
@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 3.0))
def test_scaling_gate_bounds(seed, scale):
    model = build_model(small_config(init_std_new=0.5), seed % 1000).double()
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(1, 6, 8, generator=g, dtype=torch.float64) * scale
    with torch.no_grad():
        out, gates = model.scaling_forward(h)
    assert torch.all((gates > 0) & (gates < 1))
    nz = h != 0
    assert torch.all(out.abs()[nz] < 2 * h.abs()[nz])


# -- cross-attention score ----------------------------------------------------


def test_cross_attention_score_hand_example():
    eye = torch.eye(2, dtype=torch.float64)
    table = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    s = cross_attention_score(torch.tensor([1.0, 0.0], dtype=torch.float64),
                              torch.tensor([3.0, 4.0], dtype=torch.float64), eye, eye, 0, 2, table, 1)
    assert s.item() == pytest.approx(4 / math.sqrt(2), abs=1e-4)
    assert s.item() == pytest.approx(2.8284, abs=1e-4)


def test_cross_attention_score_zero_table_is_baseline():
    model = build_model(small_config(init_std_new=0.0), 3).double()
    hd, he = torch.randn(8, dtype=torch.float64), torch.randn(8, dtype=torch.float64)
    attn = model.decoder_layers[0].cross_attn
    base = (attn.q.weight[:4] @ hd) @ (attn.k.weight[:4] @ he) / 2.0
    for dist in range(model.config.max_distance + 1):
        assert model.cross_attention_score(hd, he, dist, head=0).item() == pytest.approx(base.item(), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 2.0, 0.1, 3.7]))
def test_score_linear_in_encoder_scale(seed, lam):
    g = torch.Generator().manual_seed(seed)
    model = build_model(small_config(init_std_new=0.0), seed).double()
    hd = torch.randn(8, generator=g, dtype=torch.float64)
    he = torch.randn(8, generator=g, dtype=torch.float64)
    for head in range(2):
        a = model.cross_attention_score(hd, lam * he, 0, head).item()
        b = lam * model.cross_attention_score(hd, he, 0, head).item()
        assert abs(a - b) <= 1e-6


def test_cross_attention_score_rejects_bad_distance():
    model = build_model(small_config(), 0)
    with pytest.raises(ValueError):
        model.cross_attention_score(torch.zeros(8), torch.zeros(8), 99, 0)


# -- decoder / full model -----------------------------------------------------


def test_full_forward_matches_oracle():
    rng = np.random.default_rng(0)
    model = build_model(small_config(), 5).double()
    P = oracle.params_of(model)
    for _ in range(5):
        ids, groups, dist, prefix = random_input(rng, model.config)
        got = model_logits(model, ids, groups, dist, prefix)
        want = oracle.forward(P, model.config, ids, groups, dist, prefix)
        np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)


def test_decoder_hand_single_layer_two_token_prefix():
    model = hand_model(n_enc_layers=1, n_dec_layers=1)
    g = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.5)
    ids, groups, dist, prefix = [6, 7, 8], [0, 1, 1], [0, 1, 2], [BOS, 9]
    got = model_logits(model, ids, groups, dist, prefix)
    want = oracle.forward(oracle.params_of(model), model.config, ids, groups, dist, prefix)
    np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)


def test_mechanisms_off_equals_plain_transformer():
    rng = np.random.default_rng(1)
    model = build_model(small_config(init_std_new=0.0), 4).double()
    P = oracle.params_of(model)
    for _ in range(5):
        ids, groups, dist, prefix = random_input(rng, model.config)
        got = model_logits(model, ids, groups, dist, prefix)
        want = oracle.forward(P, model.config, ids, groups, dist, prefix, ge=False, sm=False, ppi=False)
        np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)


def test_causality_bit_identical():
    rng = np.random.default_rng(2)
    model = build_model(small_config(), 6)
    ids, groups, dist, prefix = random_input(rng, model.config, n=6, m=8)
    base = model_logits(model, ids, groups, dist, prefix)
    for k in range(1, 8):
        changed = prefix[:k] + rng.integers(2, 20, 8 - k).tolist()
        other = model_logits(model, ids, groups, dist, changed)
        assert np.array_equal(other[:k], base[:k])


def test_decoder_requires_bos():
    model = build_model(small_config(), 0)
    enc = model.encode(torch.tensor([[4, 5]]), torch.tensor([[0, 1]]), torch.tensor([[0, 1]]))
    with pytest.raises(ValueError, match="BOS"):
        model.decoder_forward(torch.tensor([[5, 6]]), enc)


def test_forward_deterministic_in_eval():
    rng = np.random.default_rng(3)
    model = build_model(small_config(dropout=0.3), 0).eval()
    args = random_input(rng, model.config)
    assert np.array_equal(model_logits(model, *args), model_logits(model, *args))


# -- initialisation -----------------------------------------------------------


def test_init_deterministic():
    a = build_model(small_config(), 123)
    b = build_model(small_config(), 123)
    c = build_model(small_config(), 124)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    assert not torch.equal(a.tok_emb.weight, c.tok_emb.weight)


def test_init_accepts_64_bit_seed():
    build_model(small_config(), 2**64 - 1)


def test_init_distance_table_std():
    cfg = small_config(d_model=256, n_heads=4, max_distance=16, init_std_new=5e-3, init_std=0.02)
    model = build_model(cfg, 9)
    table = model.distance_emb.weight.detach().numpy()
    assert table.size >= 1000
    assert 3e-3 <= table.std(ddof=1) <= 7e-3
    assert model.scaler.w1.bias.abs().sum() == 0 and model.out_proj.bias.abs().sum() == 0
    assert torch.all(model.enc_norm.weight == 1)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, max_distance=1)
    assert ModelConfig(vocab_size=20).d_head == 16
