from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from crft import tasks
from crft.info_flow import (
    CrftConfig,
    DegenerateGridError,
    attention_gradients,
    attention_grid,
    chain_inherit,
    identify,
    identify_batch,
    multi_referential_filter,
    perturbation_oracle,
    saliency_grid,
    select_positions,
    self_referential_filter,
    union_filter,
)
from crft.model import ForwardTrace, MicroTransformer, greedy_decode

from conftest import bump_attention, tiny_config


def random_causal_grid(rng: np.random.Generator, n: int) -> np.ndarray:
    raw = np.tril(rng.random((n, n)) ** rng.uniform(0.5, 4))
    raw[np.arange(n), np.arange(n)] += 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


def brute_self(grid: np.ndarray, alpha: float) -> dict[int, float]:
    out = {}
    for i in range(len(grid)):
        if grid[i][i] >= alpha:
            out[i] = float(grid[i][i])
    return out


def brute_multi(grid: np.ndarray, beta: float) -> dict[int, float]:
    n = len(grid)
    out = {}
    for j in range(n):
        total = 0.0
        for i in range(n):
            total += float(grid[i][j]) if i >= j else 0.0
        score = total / (n - j)
        if score >= beta:
            out[j] = score
    return out


def fake_trace(attn: np.ndarray) -> ForwardTrace:
    a = torch.tensor(attn, dtype=torch.float64)[None, None]
    n = a.shape[-1]
    return ForwardTrace(hidden=[], attention=[a], logits=torch.zeros(1, n, 2, dtype=torch.float64))


# --- grids ------------------------------------------------------------------------

def test_attention_grid_is_head_mean():
    heads = torch.tensor([[[1.0, 0.0], [0.2, 0.8]], [[1.0, 0.0], [0.4, 0.6]]], dtype=torch.float64)
    trace = ForwardTrace(hidden=[], attention=[heads[None]], logits=torch.zeros(1, 2, 2))
    g = attention_grid(trace, 0)
    assert g.kind == "attention"
    assert g.values[1, 0] == pytest.approx(0.3, abs=1e-15)
    assert np.array_equal(attention_grid(trace, 0, head=1).values, heads[1].numpy())
    with pytest.raises(IndexError):
        attention_grid(trace, 1)


def test_attention_grid_rows_sum_to_one(tiny_model):
    trace = tiny_model.run(torch.tensor([[1, 5, 9, 2, 7, 3]]))
    for layer in range(2):
        g = attention_grid(trace, layer)
        assert np.all(np.abs(g.values.sum(1) - 1) <= 1e-12)


def test_saliency_arithmetic_example():
    trace = fake_trace(np.array([[1.0, 0.0], [0.5, 0.5]]))
    grad = torch.tensor([[[[0.0, 0.0], [-0.2, 0.2]]]], dtype=torch.float64)
    g = saliency_grid(trace, 0, [grad])
    assert g.kind == "saliency"
    assert np.allclose(g.values[1], [0.5, 0.5], atol=1e-15)
    assert np.array_equal(g.values[0], [0.0, 0.0])


def test_saliency_degenerate_and_missing():
    trace = fake_trace(np.array([[1.0, 0.0], [0.5, 0.5]]))
    with pytest.raises(DegenerateGridError):
        saliency_grid(trace, 0, [torch.zeros(1, 1, 2, 2, dtype=torch.float64)])
    with pytest.raises(ValueError):
        saliency_grid(trace, 0, None)
    with pytest.raises(ValueError):
        saliency_grid(trace, 0, {})


def test_saliency_matches_finite_difference_recomputation():
    model = MicroTransformer(tiny_config(n_heads=2, d_model=8), seed=5)
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(8.0)
    toks = torch.tensor([[31, 3, 15, 22, 17, 30]])
    n = toks.shape[1]
    with torch.enable_grad():
        trace = model.run(toks)
        grads = attention_gradients(trace)
    labels = trace.logits.detach().argmax(-1)[0]

    def loss() -> float:
        with torch.no_grad():
            logits = model.run(toks).logits[0]
        return float(-torch.log_softmax(logits, -1).gather(-1, labels[:, None]).mean())

    h = 1e-6
    for layer in range(2):
        numeric = torch.zeros(1, 2, n, n, dtype=torch.float64)
        for idx in np.ndindex(1, 2, n, n):
            with bump_attention(layer, idx, h):
                up = loss()
            with bump_attention(layer, idx, -h):
                down = loss()
            numeric[idx] = (up - down) / (2 * h)
        attn = trace.attention[layer][0].detach().numpy()
        raw = np.abs(attn * numeric[0].numpy()).mean(0)
        expected = raw / raw.sum(1, keepdims=True)
        got = saliency_grid(trace, layer, grads).values
        assert np.linalg.norm(got - expected) <= 1e-2 * np.linalg.norm(expected)


# --- filters ----------------------------------------------------------------------

def test_self_referential_examples():
    grid = np.diag([1.0, 0.01, 0.5])
    assert set(self_referential_filter(grid, 0.05)) == {0, 2}
    assert self_referential_filter(grid, 0.5) == {0: 1.0, 2: 0.5}


def test_multi_referential_examples():
    grid = np.array([[1, 0, 0], [0.5, 0.5, 0], [0.2, 0.3, 0.5]])
    out = multi_referential_filter(grid, 0.45)
    assert set(out) == {0, 2}
    assert out[0] == pytest.approx(1.7 / 3, abs=1e-15)
    assert out[2] == pytest.approx(0.5, abs=1e-15)
    assert set(multi_referential_filter(grid, 0.0)) == {0, 1, 2}


def test_filters_match_brute_force_on_1000_grids():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 24))
        grid = random_causal_grid(rng, n)
        alpha, beta = float(rng.uniform(0, 0.6)), float(rng.uniform(0, 0.6))
        assert self_referential_filter(grid, alpha) == brute_self(grid, alpha)
        assert multi_referential_filter(grid, beta) == brute_multi(grid, beta)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_filters_are_monotone_in_threshold(seed, a, b):
    rng = np.random.default_rng(seed)
    grid = random_causal_grid(rng, int(rng.integers(1, 16)))
    lo, hi = min(a, b), max(a, b)
    assert set(self_referential_filter(grid, hi)) <= set(self_referential_filter(grid, lo))
    assert set(multi_referential_filter(grid, hi)) <= set(multi_referential_filter(grid, lo))
    for pos in self_referential_filter(grid, lo):
        assert 0 <= pos < len(grid)


def test_filter_limit_restricts_to_prompt():
    grid = np.eye(5)
    assert set(self_referential_filter(grid, 0.5, limit=3)) == {0, 1, 2}
    assert set(multi_referential_filter(grid, 0.0, limit=2)) == {0, 1}


def test_union_and_chain():
    assert set(union_filter({1: 0.1, 3: 0.2}, {3: 0.5, 5: 0.3})) == {1, 3, 5}
    assert union_filter({1: 0.1, 3: 0.2}, {3: 0.5, 5: 0.3})[3] == 0.5
    s = {2: 0.4, 4: 0.1}
    assert union_filter({}, s) == s
    assert union_filter(s, s) == s
    assert set(chain_inherit([1, 2, 5], {2: 0.1, 5: 0.2, 9: 0.3})) == {2, 5}
    assert chain_inherit(None, s) == s
    assert chain_inherit([2, 4, -1], s) == s


def test_select_positions_examples():
    assert select_positions({7: 0.0, 2: 0.0, 9: 0.0}, 2, "order") == [2, 7]
    assert select_positions({2: 0.9, 7: 0.1, 9: 0.5}, 2, "score") == [2, 9]
    assert select_positions({4: 0.0}, 3) == [4, -1, -1]
    assert select_positions({1: 0.5, 3: 0.5, 2: 0.1}, 2, "score") == [1, 3]
    with pytest.raises(ValueError):
        select_positions({1: 0.0}, 0)
    with pytest.raises(ValueError):
        select_positions({1: 0.0}, 1, "best")


@given(st.sets(st.integers(0, 40), max_size=30), st.integers(1, 20), st.integers(0, 1000))
def test_random_selection_is_seeded_subset(cands, k, seed):
    a = select_positions(sorted(cands), k, "random", seed)
    assert a == select_positions(sorted(cands), k, "random", seed)
    chosen = [p for p in a if p != -1]
    assert len(a) == k
    assert len(chosen) == min(k, len(cands)) == len(set(chosen))
    assert set(chosen) <= cands


# --- identification ---------------------------------------------------------------

PROMPT = [tasks.BOS, 3, tasks.PLUS0 + 5, tasks.MINUS0 + 2, tasks.PLUS0 + 7,
          tasks.FILLER0, tasks.FILLER0 + 3, tasks.FILLER0 + 1, tasks.FILLER0 + 2, tasks.EQ]


@pytest.fixture
def fixture_model() -> MicroTransformer:
    model = MicroTransformer(tiny_config(), seed=21)
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(20.0)
    return model


def test_fixed_strategy_prefix_suffix(fixture_model):
    cfg = CrftConfig(strategy="FIXED", prefix=2, suffix=2, k_int=4)
    cs = identify(fixture_model, PROMPT, cfg=cfg)
    assert cs.at(0) == cs.at(1) == [0, 1, 8, 9]
    with pytest.raises(ValueError):
        identify(fixture_model, PROMPT, cfg=CrftConfig(strategy="FIXED", prefix=3, suffix=3, k_int=4))


def test_random_strategy_depends_on_seed(fixture_model):
    a = identify(fixture_model, PROMPT, cfg=CrftConfig(strategy="RANDOM", seed=37, k_int=5))
    b = identify(fixture_model, PROMPT, cfg=CrftConfig(strategy="RANDOM", seed=38, k_int=5))
    assert a.width == b.width == 5
    assert a.positions.tolist() != b.positions.tolist()


def test_saf_equals_manual_composition(fixture_model):
    cfg = CrftConfig(strategy="SAF", alpha=0.05, k_int=6)
    cs = identify(fixture_model, PROMPT, cfg=cfg)
    with torch.no_grad():
        trace = fixture_model.run(torch.tensor([PROMPT]))
    for layer in (0, 1):
        manual = select_positions(self_referential_filter(attention_grid(trace, layer), 0.05), 6, "order")
        assert cs.at(layer) == manual


def test_union_equals_independent_recomputation(fixture_model):
    cfg = CrftConfig(strategy="UNION_ATTN", alpha=0.2, beta=0.15, k_int=len(PROMPT))
    cs = identify(fixture_model, PROMPT, cfg=cfg)
    with torch.no_grad():
        attn = [a[0].mean(0).numpy() for a in fixture_model.run(torch.tensor([PROMPT])).attention]
    for layer, consumer in ((0, 1), (1, 1)):
        expected = set(brute_self(attn[layer], 0.2)) | set(brute_multi(attn[consumer], 0.15))
        assert set(cs.selected(layer)) == expected


def test_align_grids_uses_own_layer_for_multi_referential(fixture_model):
    cfg = CrftConfig(strategy="MAF", beta=0.15, k_int=len(PROMPT), align_grids=True)
    cs = identify(fixture_model, PROMPT, cfg=cfg)
    with torch.no_grad():
        attn0 = fixture_model.run(torch.tensor([PROMPT])).attention[0][0].mean(0).numpy()
    assert set(cs.selected(0)) == set(brute_multi(attn0, 0.15))


def test_inherit_chain_restricts_to_previous_layer(fixture_model):
    fresh = identify(fixture_model, PROMPT, cfg=CrftConfig(alpha=0.05, k_int=3, chain_mode="fresh"))
    inherit = identify(fixture_model, PROMPT, cfg=CrftConfig(alpha=0.05, k_int=3, chain_mode="inherit"))
    assert inherit.at(0) == fresh.at(0)
    assert set(inherit.selected(1)) <= set(inherit.selected(0))


@given(st.lists(st.integers(0, tasks.VOCAB_SIZE - 1), min_size=1, max_size=20))
def test_alpha_one_selects_only_position_zero(toks):
    model = MicroTransformer(tiny_config(), seed=4)
    cs = identify(model, toks, cfg=CrftConfig(alpha=1.0, k_int=3))
    assert cs.at(0) == cs.at(1) == [0, -1, -1]


@given(st.lists(st.integers(0, tasks.VOCAB_SIZE - 1), min_size=2, max_size=20),
       st.sampled_from(["SAF", "SSF", "MAF", "MSF", "UNION_ATTN", "UNION_SAL", "RANDOM"]),
       st.sampled_from(["order", "score", "random"]), st.integers(1, 8))
def test_critical_set_invariants_and_determinism(toks, strategy, criteria, k):
    model = MicroTransformer(tiny_config(), seed=6)
    cfg = CrftConfig(strategy=strategy, criteria=criteria, k_int=k, alpha=0.1, beta=0.1)
    n_prompt = max(1, len(toks) - 1)
    cs = identify(model, toks, cfg=cfg, prompt_len=n_prompt)
    again = identify(model, toks, cfg=cfg, prompt_len=n_prompt)
    assert np.array_equal(cs.positions, again.positions)
    assert cs.width == k
    for layer in cs.layers:
        chosen = cs.selected(layer)
        assert len(chosen) == len(set(chosen))
        assert all(0 <= p < n_prompt for p in chosen)


def test_teacher_forced_labels_drive_saliency(fixture_model):
    toks = PROMPT + [tasks.PLAIN, 3, 8]
    labels = toks[1:] + [tasks.EOS]
    cfg = CrftConfig(strategy="SSF", alpha=0.0, k_int=len(toks))
    a = identify_batch(fixture_model, [toks], [len(PROMPT)], cfg, labels=[labels])[0]
    b = identify_batch(fixture_model, [toks], [len(PROMPT)], cfg)[0]
    assert a.scores[0] != b.scores[0]


def test_batch_identification_matches_single(fixture_model):
    other = [tasks.BOS, 8, tasks.MINUS0 + 1, tasks.PLUS0 + 4, tasks.MINUS0 + 9,
             tasks.FILLER0 + 5, tasks.FILLER0 + 5, tasks.FILLER0 + 7, tasks.FILLER0, tasks.EQ]
    for strategy in ("SAF", "MSF"):
        cfg = CrftConfig(strategy=strategy, alpha=0.05, beta=0.05, k_int=5)
        batch = identify_batch(fixture_model, [PROMPT, other], [10, 10], cfg)
        for seq, cs in zip((PROMPT, other), batch):
            assert np.array_equal(cs.positions, identify(fixture_model, seq, cfg=cfg).positions)


def test_segment_grouping_assigns_group_ids(fixture_model):
    sample = tasks.gen_chain_arith(1, seed=0, shots=1, n_filler=2)[0]
    cfg = CrftConfig(strategy="FIXED", prefix=3, suffix=3, k_int=6, segment_grouping=True)
    cs = identify(fixture_model, sample.prompt, segment_map=sample.segments, cfg=cfg)
    assert cs.groups[0].tolist() == [0, 0, 0, 1, 1, 1]
    flat = identify(fixture_model, sample.prompt, segment_map=sample.segments,
                    cfg=CrftConfig(strategy="FIXED", prefix=3, suffix=3, k_int=6))
    assert flat.groups.max() == 0


def test_zero_k_int_gives_empty_sets(fixture_model):
    cs = identify(fixture_model, PROMPT, cfg=CrftConfig(k_int=0))
    assert cs.width == 0


# --- perturbation oracle ----------------------------------------------------------

def test_zero_epsilon_never_flips(fixture_model):
    out = greedy_decode(fixture_model, PROMPT, 3)
    rates = perturbation_oracle(fixture_model, PROMPT, out[-1], 0.0, trials=3, max_new=3)
    assert rates.shape == (2, len(PROMPT))
    assert not rates.any()
    with pytest.raises(ValueError):
        perturbation_oracle(fixture_model, PROMPT, out[-1], 0.1, trials=0)


def test_flip_rates_match_exhaustive_enumeration():
    model = MicroTransformer(tiny_config(n_layers=1), seed=8)
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(30.0)
    prompt = [tasks.BOS, 4, tasks.PLUS0 + 2, tasks.EQ]
    answer = greedy_decode(model, prompt, 2)[-1]
    eps, trials, d = 30.0, 6, model.cfg.d_model
    rates = perturbation_oracle(model, prompt, answer, eps, trials, seed=13, max_new=2)

    gen = torch.Generator().manual_seed(13)
    expected = np.zeros((1, 4))
    for p in range(4):
        noise = torch.randn(trials, 1, d, generator=gen, dtype=torch.float64) * eps
        flips = 0
        for t in range(trials):
            def hook(h, train=False, t=t, p=p):
                h = h.clone()
                h[0, p] += noise[t, 0]
                return h
            flips += greedy_decode(model, prompt, 2, {0: hook})[-1] != answer
        expected[0, p] = flips / trials
    assert np.array_equal(rates, expected)
    assert rates.any()
