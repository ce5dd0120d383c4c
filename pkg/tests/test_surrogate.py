from __future__ import annotations

import numpy as np
import pytest
from scipy.special import log_softmax

from vlamia.core import PROMPT_FIXED, substream
from vlamia.surrogate import (PARAM_NAMES, ActionTokenizer, DecodeConfig, TransitionArrays,
                              decode, forward_logits, init_params, load_checkpoint,
                              loss_and_grad, observation_stats, run_inference, save_checkpoint,
                              teacher_forced_logprobs, train)

SYM = ((-1.0, 1.0),)


# tokenizer ------------------------------------------------------------------

@pytest.mark.parametrize("B, a, token", [(2, -0.3, 0), (2, 1.0, 1), (256, -1.0, 0),
                                         (2, 0.0, 1), (4, 5.0, 3), (4, -7.0, 0)])
def test_tokenize_examples(B, a, token):
    assert ActionTokenizer(B, SYM).tokenize([a])[0] == token


@pytest.mark.parametrize("token, value", [(0, -0.5), (1, 0.5)])
def test_detokenize_examples(token, value):
    assert ActionTokenizer(2, SYM).detokenize([token])[0] == value


@pytest.mark.parametrize("B", [64, 256, 512])
def test_tokenizer_round_trip_bound(B):
    tok = ActionTokenizer(B, ((-1.0, 1.0), (-2.0, 0.5), (0.0, 3.0)))
    a = substream(0, "test/tok", B).uniform(-4, 4, size=(100_000, 3))
    err = np.abs(tok.detokenize(tok.tokenize(a)) - np.clip(a, tok.lo, tok.hi))
    assert np.all(err <= tok.width / 2 + 1e-12)


# forward pass ---------------------------------------------------------------

def _params(zero=False, seed=0, d=4, B=8, obs_dim=5, n_tasks=3, hidden=16):
    return init_params(obs_dim, n_tasks, d, B, hidden=hidden, seed=seed, zero=zero)


def test_zero_params_give_uniform_rows():
    p = _params(zero=True)
    logits = forward_logits(p, np.ones(5), 1, [3, 2])
    assert np.all(logits == 0.0)
    assert np.allclose(np.exp(log_softmax(logits)), 1 / 8)


def test_forward_deterministic_and_normalised():
    p = _params(seed=4)
    rng = np.random.default_rng(1)
    for _ in range(20):
        obs = rng.standard_normal(5)
        prev = list(rng.integers(0, 8, size=rng.integers(0, 4)))
        mask = (rng.random(16) > 0.3) / 0.7
        a = forward_logits(p, obs, 2, prev, mask)
        assert np.array_equal(a, forward_logits(p, obs, 2, prev, mask))
        assert abs(np.exp(log_softmax(a)).sum() - 1.0) <= 1e-9


def test_forward_shape_errors():
    p = _params()
    with pytest.raises(ValueError):
        forward_logits(p, np.ones(4), 0, [])
    with pytest.raises(ValueError):
        forward_logits(p, np.ones(5), 0, [0, 0, 0, 0])
    with pytest.raises(ValueError):
        forward_logits(p, np.ones(5), 9, [])


def test_forward_matches_teacher_forcing():
    p = _params(seed=2)
    p.P[:] = substream(2, "test/P").standard_normal(p.P.shape)
    rng = np.random.default_rng(3)
    obs, instr = rng.standard_normal((6, 5)), rng.integers(0, 4, 6)
    tokens = rng.integers(0, 8, (6, 4))
    tf = teacher_forced_logprobs(p, obs, instr, tokens)
    for i in range(6):
        for j in range(4):
            row = log_softmax(forward_logits(p, obs[i], int(instr[i]), tokens[i, :j]))
            assert abs(row[tokens[i, j]] - tf[i, j]) < 1e-12
    assert np.all(tf <= 0)


def test_greedy_decode_is_autoregressive_argmax():
    p = _params(seed=5)
    p.P[:] = substream(5, "test/P").standard_normal(p.P.shape)
    obs = np.random.default_rng(0).standard_normal((3, 5))
    tokens, rows = decode(p, obs, np.array([0, 1, 2]))
    for i in range(3):
        for j in range(4):
            row = log_softmax(forward_logits(p, obs[i], i, tokens[i, :j]))
            assert np.allclose(row, rows[i, j], atol=1e-12)
            assert tokens[i, j] == np.argmax(row)


# gradient check ---------------------------------------------------------------

def _batch(seed, n=12, d=4, B=8, obs_dim=5, n_tasks=3):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, obs_dim)), rng.integers(0, n_tasks + 1, n),
            rng.integers(0, B, (n, d)))


def _training_state(k: int):
    """Three parameter states: fresh, lightly trained, heavily perturbed."""
    p = _params(seed=10 + k)
    rng = np.random.default_rng(100 + k)
    obs, instr, tokens = _batch(k)
    if k >= 1:
        for _ in range(25 * k):
            _, g = loss_and_grad(p, obs, instr, tokens)
            for name in PARAM_NAMES:
                getattr(p, name)[...] -= 0.5 * g[name]
    if k == 2:
        for name in PARAM_NAMES:
            arr = getattr(p, name)
            arr += 0.05 * rng.standard_normal(arr.shape)
    return p, (obs, instr, tokens)


@pytest.mark.parametrize("state", [0, 1, 2])
@pytest.mark.parametrize("use_mask", [False, True])
def test_gradient_matches_central_differences(state, use_mask):
    p, (obs, instr, tokens) = _training_state(state)
    mask = None
    if use_mask:
        mask = (np.random.default_rng(state).random((obs.shape[0], p.hidden)) > 0.25) / 0.75
    _, grads = loss_and_grad(p, obs, instr, tokens, mask)
    rng = np.random.default_rng(1000 + state)
    h = 1e-5
    checked = 0
    worst = 0.0
    for name in PARAM_NAMES:
        arr = getattr(p, name)
        g = grads[name]
        if name == "P":
            # Draw P entries from rows the batch actually reaches, plus untouched ones.
            live = np.argwhere(g != 0)
            picks = [tuple(live[i]) for i in rng.choice(len(live), 30, replace=False)]
            picks += [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(5)]
        else:
            picks = [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(25)]
        for idx in picks:
            orig = arr[idx]
            arr[idx] = orig + h
            up, _ = loss_and_grad(p, obs, instr, tokens, mask)
            arr[idx] = orig - h
            down, _ = loss_and_grad(p, obs, instr, tokens, mask)
            arr[idx] = orig
            fd = (up - down) / (2 * h)
            an = g[idx]
            denom = max(abs(fd), abs(an))
            rel = 0.0 if denom == 0 else abs(fd - an) / denom
            worst = max(worst, rel)
            checked += 1
    assert checked >= 100
    assert worst < 1e-4, worst


# training -------------------------------------------------------------------

def test_train_zero_steps_returns_init(small_corpus):
    meta, trajs = small_corpus
    mean, scale = observation_stats([t for t in trajs if t.member])
    p = init_params(mean.size, 2, 3, 16, hidden=8, seed=1, obs_mean=mean, obs_scale=scale)
    ckpts = train(p, trajs, steps=0, seed=1)
    assert len(ckpts) == 1 and ckpts[0].step == 0
    assert ckpts[0].params == p


def test_train_deterministic_and_decreasing(small_corpus):
    meta, trajs = small_corpus
    mean, scale = observation_stats([t for t in trajs if t.member])
    p = init_params(mean.size, 2, 3, 16, hidden=8, seed=1, obs_mean=mean, obs_scale=scale)
    a = train(p, trajs, steps=60, batch_size=16, seed=1, checkpoint_every=20)
    b = train(p, trajs, steps=60, batch_size=16, seed=1, checkpoint_every=20)
    assert [c.step for c in a] == [0, 20, 40, 60]
    assert all(x.params == y.params and x.train_loss == y.train_loss for x, y in zip(a, b))
    assert a[-1].train_loss <= a[0].train_loss


def test_train_rejects_unlabelled(small_corpus):
    import dataclasses
    _, trajs = small_corpus
    p = init_params(5, 2, 3, 16, hidden=8)
    with pytest.raises(ValueError):
        train(p, [dataclasses.replace(t, member=False) for t in trajs], steps=1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_loss_aborts(small_corpus):
    from vlamia.core import NumericFailure
    _, trajs = small_corpus
    mean, scale = observation_stats([t for t in trajs if t.member])
    p = init_params(mean.size, 2, 3, 16, hidden=8, seed=1, obs_mean=mean, obs_scale=scale)
    with pytest.raises(NumericFailure, match="lr"):
        train(p, trajs, steps=50, lr=float("inf"), batch_size=8, seed=1)


# inference ------------------------------------------------------------------

def test_zero_params_inference_is_uniform(small_corpus, small_manifest):
    meta, trajs = small_corpus
    p = init_params(5, 2, 3, 16, zero=True)
    recs = run_inference(p, trajs, small_manifest.sample_units, tokenizer=ActionTokenizer(16, SYM * 3))
    for r in recs:
        assert np.allclose(r.gt_token_logprobs, np.log(1 / 16), atol=1e-12)
        r.check_normalized(1e-9)


def test_inference_deterministic_and_worker_invariant(small_corpus, small_manifest):
    _, trajs = small_corpus
    p = init_params(5, 2, 3, 16, hidden=8, seed=3)
    keys = small_manifest.query_keys(trajs)
    a = run_inference(p, trajs, keys)
    assert a == run_inference(p, trajs, keys)
    assert a == run_inference(p, trajs, list(reversed(keys)), workers=4)
    assert [r.key for r in a] == sorted(keys)


def test_fixed_prompt_uses_reserved_instruction(small_corpus):
    _, trajs = small_corpus
    p = init_params(5, 2, 3, 16, hidden=8, seed=3)
    keys = [(trajs[0].trajectory_id, 0)]
    fixed = run_inference(p, trajs, keys, PROMPT_FIXED)[0]
    data = TransitionArrays.from_trajectories(trajs, keys)
    _, rows = decode(p, data.obs, np.array([p.generic_instruction]))
    assert fixed.prompt_mode == PROMPT_FIXED
    assert np.array_equal(fixed.token_logprob_rows, rows[0])


def test_inference_unknown_trajectory(small_corpus):
    _, trajs = small_corpus
    p = init_params(5, 2, 3, 16, hidden=8)
    with pytest.raises(KeyError):
        run_inference(p, trajs, [("nope", 0)])


def test_stochastic_inference_is_seeded(small_corpus, small_manifest):
    from vlamia.mitigations import nucleus_sample
    _, trajs = small_corpus
    p = init_params(5, 2, 3, 16, hidden=8, seed=3)
    cfg = DecodeConfig(temperature=2.0, top_p=0.9, token_sampler=nucleus_sample, seed=5,
                       tag="t")
    keys = small_manifest.sample_units
    a = run_inference(p, trajs, keys, config=cfg)
    assert a == run_inference(p, trajs, keys, config=cfg, workers=3)


def test_checkpoint_round_trip(tmp_path):
    from vlamia.surrogate import Checkpoint
    p = _params(seed=8)
    p.P[:] = substream(8, "test/P").standard_normal(p.P.shape)
    ck = Checkpoint(p, 12, 0.5, 0.25)
    save_checkpoint(ck, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.params == p and back.step == 12
    assert back.train_loss == 0.5 and back.heldout_error == 0.25
