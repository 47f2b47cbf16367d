import math

import numpy as np
import pytest

from blockspec import (
    ConfigError,
    ModelConfig,
    RangeError,
    ScriptedModel,
    ScriptedSchedule,
    ShapeError,
    count_params,
    init_toy_model,
    logits_to_prediction,
    scripted_forward,
)
from blockspec.layout import full_sequence_layout
from blockspec.model import softmax

from conftest import TOY, random_state, rel_err


# --- config -----------------------------------------------------------------

def test_config_rejects_bad_head_split():
    with pytest.raises(ConfigError):
        ModelConfig(**{**TOY, "n_heads": 3})


def test_config_rejects_clashing_special_tokens():
    with pytest.raises(ConfigError):
        ModelConfig(**{**TOY, "eos_token_id": TOY["mask_token_id"]})
    with pytest.raises(ConfigError):
        ModelConfig(**{**TOY, "eos_token_id": 128})


def test_config_round_trips_through_dict(toy_config):
    assert ModelConfig.from_dict(toy_config.to_dict()) == toy_config
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**toy_config.to_dict(), "bogus": 1})


# --- parameter count ---------------------------------------------------------

def test_param_count_matches_hand_computation(toy_config, toy_model):
    # embedding 128*64, per layer 4*(64*64) attention + 64*256 + 256*64 MLP,
    # output projection 64*128; four layers.
    embedding = 128 * 64
    attention = 4 * 64 * 64
    mlp = 64 * 256 + 256 * 64
    out_proj = 64 * 128
    expected = embedding + 4 * (attention + mlp) + out_proj
    assert expected == 212992
    assert count_params(toy_config) == expected
    total = toy_model.emb.size + toy_model.wout.size
    for layer in toy_model.layers:
        total += sum(w.size for w in layer.values())
    assert total == expected


def test_init_is_deterministic(toy_config):
    a = init_toy_model(toy_config)
    b = init_toy_model(toy_config)
    assert a.weight_checksum() == b.weight_checksum()
    other = init_toy_model(ModelConfig(**{**TOY, "seed": 8}))
    assert a.weight_checksum() != other.weight_checksum()


# --- logits_to_prediction -----------------------------------------------------

def test_prediction_uniform_scores_tie_to_token_zero():
    token, conf = logits_to_prediction(np.zeros(128, dtype=np.float32))
    assert token == 0
    assert conf == pytest.approx(1.0 / 128, abs=1e-7)


def test_prediction_one_hot_saturates():
    scores = np.zeros(128, dtype=np.float32)
    scores[5] = 20.0
    token, conf = logits_to_prediction(scores)
    assert token == 5
    assert conf > 0.999


def test_prediction_two_logit_softmax():
    token, conf = logits_to_prediction(np.array([2.0, 1.0], dtype=np.float32))
    expected = math.exp(2.0) / (math.exp(2.0) + math.exp(1.0))
    assert token == 0
    assert conf == pytest.approx(expected, abs=1e-6)
    assert conf == pytest.approx(0.7311, abs=1e-4)


def test_prediction_rejects_empty_and_nonfinite():
    with pytest.raises(ShapeError):
        logits_to_prediction(np.array([], dtype=np.float32))
    with pytest.raises(ShapeError):
        logits_to_prediction(np.array([1.0, np.nan], dtype=np.float32))


def test_softmax_normalizes():
    rng = np.random.default_rng(0)
    for _ in range(50):
        vec = rng.normal(size=128).astype(np.float32) * rng.uniform(0.1, 10)
        probs = softmax(vec)
        assert abs(float(probs.sum()) - 1.0) < 1e-6
        token, conf = logits_to_prediction(vec)
        assert 0.0 < conf <= 1.0


# --- toy forward ---------------------------------------------------------------

def test_forward_single_token_shape(toy_model):
    view, kv = toy_model.forward([3], full_sequence_layout(1))
    assert view.logits.shape == (1, 128)
    assert len(kv) == 4 and kv[0][0].shape == (1, 4, 16)


def test_forward_is_pure(toy_model):
    layout = full_sequence_layout(9)
    toks = np.arange(9)
    a, _ = toy_model.forward(toks, layout)
    b, _ = toy_model.forward(toks, layout)
    assert np.array_equal(a.logits, b.logits)


def test_forward_rejects_bad_tokens(toy_model):
    with pytest.raises(ShapeError):
        toy_model.forward([999], full_sequence_layout(1))
    with pytest.raises(ShapeError):
        toy_model.forward([1, 2], full_sequence_layout(1))


def test_mask_soundness_invisible_keys_never_matter(toy_model, toy_config):
    """Changing tokens at positions a query cannot see leaves its logits
    unchanged (perturbation over a two-block mutually-invisible layout)."""
    from blockspec.layout import AttentionLayout

    n = 6
    layout = AttentionLayout(
        query_positions=tuple(range(n)) * 2,
        query_tags=(0,) * n + (1,) * n,
        query_shared=(False,) * (2 * n),
    )
    rng = np.random.default_rng(5)
    toks = rng.integers(0, 100, size=2 * n)
    base, _ = toy_model.forward(toks, layout)
    perturbed = toks.copy()
    perturbed[n:] = rng.integers(0, 100, size=n)
    new, _ = toy_model.forward(perturbed, layout)
    assert np.array_equal(base.logits[:n], new.logits[:n])
    assert not np.array_equal(base.logits[n:], new.logits[n:])


def test_cache_equivalence_dense_vs_cached(toy_model, toy_config):
    """Full forward == cached-prefix + query-suffix forward within 1e-5."""
    from blockspec.cache import cache_view, refresh_dual_cache
    from blockspec.layout import build_block_layout

    rng = np.random.default_rng(17)
    for _ in range(5):
        state = random_state(rng, toy_config, gen_length=64, block_size=32,
                             n_decoded=int(rng.integers(0, 8)))
        block = state.block_range()
        cache, _ = refresh_dual_cache(toy_model, state, block, epoch=1)
        view = cache_view(cache, epoch=1)
        layout = build_block_layout(block, view.positions)
        cached, _ = toy_model.forward(state.tokens[block[0]:block[1]], layout, view)

        dense, _ = toy_model.forward(state.tokens, full_sequence_layout(state.seq_len))
        rows = [dense.row(p) for p in range(block[0], block[1])]
        assert rel_err(cached.logits, dense.logits[rows]) <= 1e-5


# --- scripted model -------------------------------------------------------------

def _schedule(entries, vocab=128, mask_id=126):
    return ScriptedSchedule(steps=entries, vocab_size=vocab, mask_token_id=mask_id)


def test_scripted_round_trip():
    sched = _schedule([{3: (17, 0.95)}])
    view = scripted_forward(sched, 0, [3])
    token, conf = logits_to_prediction(view.logits[0])
    assert token == 17
    assert conf == pytest.approx(0.95, abs=1e-6)


def test_scripted_unlisted_position_defaults_to_never_accept():
    sched = _schedule([{3: (17, 0.95)}])
    view = scripted_forward(sched, 0, [9])
    token, conf = logits_to_prediction(view.logits[0])
    assert token == 126
    assert conf < 0.05


def test_scripted_is_deterministic_and_bounded():
    sched = _schedule([{3: (17, 0.95)}, {3: (17, 0.99)}])
    a = scripted_forward(sched, 1, [3])
    b = scripted_forward(sched, 1, [3])
    assert np.array_equal(a.logits, b.logits)
    with pytest.raises(RangeError):
        scripted_forward(sched, 2, [3])


def test_scripted_confidence_survives_mask_suppression(toy_config):
    """The decode path drops the mask token before decisions; scripted rows
    are built so that does not move their confidence."""
    from blockspec.decoder import masked_greedy

    sched = _schedule([{3: (17, 0.95), 4: (2, 0.30)}])
    view = scripted_forward(sched, 0, [3, 4])
    toks, confs = masked_greedy(view, toy_config.mask_token_id)
    assert toks.tolist() == [17, 2]
    assert confs[0] == pytest.approx(0.95, abs=1e-6)
    assert confs[1] == pytest.approx(0.30, abs=1e-6)


def test_scripted_model_repeats_last_entry(toy_config):
    sched = _schedule([{3: (17, 0.95)}])
    model = ScriptedModel(toy_config, sched)
    layout = full_sequence_layout(5)
    view, _ = model.forward([0, 1, 2, 3, 4], layout, step=40)
    assert view.prediction_at(3)[0] == 17


def test_scripted_schedule_validates_confidence():
    with pytest.raises(ConfigError):
        _schedule([{3: (17, 1.5)}])
