import math

import numpy as np
import pytest
from hypothesis import example, given, strategies as st

from treecredit.policy import (
    BUCKET_EDGES,
    LOOKUP,
    WINDOW,
    Checkpoint,
    Context,
    FeatureSpec,
    PolicyDivergence,
    PolicyParams,
    Role,
    checkpoint_bytes,
    checkpoint_from_bytes,
    features,
    grad_logprob,
    load_checkpoint,
    logprob,
    prior_params,
    role_specs,
    sample,
    save_checkpoint,
    weighted_score,
    zero_params,
)

from conftest import random_policies

SPECS = role_specs(3, 3)


def reference_features(spec, ctx, prefix):
    """Straight re-derivation of the documented feature map."""
    ctx = list(ctx)
    pad = spec.n_in
    phi = [1.0]
    phi += [ctx.count(x) / len(ctx) if ctx else 0.0 for x in range(spec.n_in)]
    last = [0.0] * (spec.n_out + 1)
    last[prefix[-1] if prefix else spec.n_out] = 1.0
    phi += last
    bucket = [0.0] * (len(BUCKET_EDGES) + 1)
    bucket[sum(len(prefix) >= e for e in BUCKET_EDGES)] = 1.0
    phi += bucket
    cursor = 0
    for y in prefix:
        x = None if y == spec.eos else y + spec.out_offset
        if x is not None and x < spec.n_in:
            for p in range(cursor, min(cursor + WINDOW, len(ctx))):
                if ctx[p] == x:
                    cursor = p + 1
                    break
    for d in range(WINDOW):
        onehot = [0.0] * (pad + 1)
        onehot[ctx[cursor + d] if cursor + d < len(ctx) else pad] = 1.0
        phi += onehot
    after = [pad] * LOOKUP
    reoccur = [p for p in range(1, len(ctx)) if ctx[p] == ctx[0]]
    if reoccur:
        p = reoccur[-1]
        after = [ctx[p + d] if p + d < len(ctx) else pad for d in range(1, LOOKUP + 1)]
    for tok in after:
        onehot = [0.0] * (pad + 1)
        onehot[tok] = 1.0
        phi += onehot
    return np.array(phi)


def reference_logprobs(params, ctx, tokens):
    out = []
    for t, y in enumerate(tokens):
        z = reference_features(params.spec, ctx.tokens, tokens[:t]) @ params.weights
        z = z - z.max()
        out.append(z[y] - math.log(np.exp(z).sum()))
    return np.array(out)


contexts = st.lists(st.integers(0, SPECS[Role.BUILDER].n_in - 1), min_size=1, max_size=15)
roles = st.sampled_from(list(Role))


def test_zero_weights_uniform():
    spec = role_specs(2, 4)[Role.RESPONDER]
    assert spec.n_out == 4
    params = zero_params(Role.RESPONDER, spec)
    s = sample(params, Context(Role.RESPONDER, (0, 2, 3)), np.random.default_rng(0), 1)
    assert s.logprobs_old[0] == pytest.approx(-math.log(4), abs=1e-12)


def test_zero_weights_three_tokens():
    spec = FeatureSpec(n_in=5, n_out=4, eos=3)
    params = zero_params(Role.BUILDER, spec)
    lp = logprob(params, Context(Role.BUILDER, (0, 1, 2)), (0, 1, 2))
    np.testing.assert_allclose(lp, [-math.log(4)] * 3, atol=1e-12)


def test_saturated_column():
    spec = SPECS[Role.BUILDER]
    w = np.zeros((spec.feature_dim, spec.n_out))
    w[:, 2] = 1000.0
    s = sample(PolicyParams(Role.BUILDER, w, spec), Context(Role.BUILDER, (0, 1, 2)), np.random.default_rng(0), 6)
    assert s.tokens == (2,) * 6
    assert all(abs(lp) < 1e-12 for lp in s.logprobs_old)


def test_first_token_frequencies_match_softmax():
    rng = np.random.default_rng(3)
    spec = SPECS[Role.BUILDER]
    params = random_policies(rng, {Role.BUILDER: spec}, 0.5)[Role.BUILDER]
    ctx = Context(Role.BUILDER, (0, 3, 6, 1, 4, 7))
    probs = np.exp([logprob(params, ctx, (y,))[0] for y in range(spec.n_out)])
    n = 100_000
    counts = np.zeros(spec.n_out)
    gen = np.random.default_rng(4)
    for _ in range(n):
        counts[sample(params, ctx, gen, 1).tokens[0]] += 1
    se = np.sqrt(probs * (1 - probs) / n)
    assert np.all(np.abs(counts / n - probs) <= 3 * se + 1e-12)


@given(roles, contexts, st.integers(0, 2**31))
@example(Role.BUILDER, [0, 0, 0, 1, 1], 0)  # frequency 2/5 must be correctly rounded
def test_features_match_reference(role, ctx, seed):
    spec = SPECS[role]
    params = random_policies(np.random.default_rng(seed), {role: spec})[role]
    s = sample(params, Context(role, tuple(ctx)), np.random.default_rng(seed), 6)
    for t in range(len(s.tokens)):
        np.testing.assert_array_equal(features(params, Context(role, tuple(ctx)), s.tokens[:t]), reference_features(spec, ctx, s.tokens[:t]))


@given(roles, contexts, st.integers(0, 2**31))
def test_logprob_matches_dense_reference(role, ctx, seed):
    spec = SPECS[role]
    params = random_policies(np.random.default_rng(seed), {role: spec}, 2.0)[role]
    c = Context(role, tuple(ctx))
    s = sample(params, c, np.random.default_rng(seed + 1), 5)
    np.testing.assert_allclose(logprob(params, c, s.tokens), reference_logprobs(params, c, s.tokens), atol=1e-10)


@given(roles, contexts, st.integers(0, 2**31), st.integers(1, 8))
def test_sample_logprob_agree(role, ctx, seed, max_len):
    spec = SPECS[role]
    params = random_policies(np.random.default_rng(seed), {role: spec})[role]
    c = Context(role, tuple(ctx))
    s = sample(params, c, np.random.default_rng(seed), max_len)
    assert len(s.tokens) == len(s.logprobs_old) and all(lp <= 0 for lp in s.logprobs_old)
    assert s.tokens[-1] == spec.eos or len(s.tokens) == max_len
    assert np.array_equal(logprob(params, c, s.tokens), np.array(s.logprobs_old))


@given(roles, contexts, st.integers(0, 2**31), st.lists(st.integers(0, 8), max_size=4))
def test_normalization(role, ctx, seed, prefix):
    spec = SPECS[role]
    prefix = tuple(y % (spec.eos if spec.eos is not None else spec.n_out) for y in prefix)
    params = random_policies(np.random.default_rng(seed), {role: spec}, 3.0)[role]
    c = Context(role, tuple(ctx))
    total = sum(math.exp(logprob(params, c, prefix + (y,))[-1]) for y in range(spec.n_out))
    assert abs(total - 1.0) <= 1e-10


def test_uniform_gradient_closed_form():
    spec = role_specs(2, 4)[Role.RESPONDER]
    params = zero_params(Role.RESPONDER, spec)
    ctx = Context(Role.RESPONDER, (1, 0, 3))
    phi = features(params, ctx, ())
    g = grad_logprob(params, ctx, (2,))[0]
    for y in range(4):
        np.testing.assert_allclose(g[:, y], phi * (0.75 if y == 2 else -0.25), atol=1e-15)


@pytest.mark.parametrize("role", list(Role))
def test_gradient_central_differences(role):
    rng = np.random.default_rng(int(role))
    spec = SPECS[role]
    params = random_policies(rng, {role: spec})[role]
    ctx = Context(role, (0, 4, 6, 2, 5, 7, 0, 3))
    s = sample(params, ctx, rng, 3)
    grads = grad_logprob(params, ctx, s.tokens)
    h = 1e-5
    for t in range(len(s.tokens)):
        for r in np.flatnonzero(features(params, ctx, s.tokens[:t])):
            for c in range(spec.n_out):
                w = params.weights.copy()
                w[r, c] += h
                up = logprob(params.with_weights(w), ctx, s.tokens)[t]
                w[r, c] -= 2 * h
                down = logprob(params.with_weights(w), ctx, s.tokens)[t]
                fd = (up - down) / (2 * h)
                assert abs(grads[t][r, c] - fd) <= 1e-6 * max(abs(fd), abs(grads[t][r, c]), 1e-3)


@given(roles, contexts, st.integers(0, 2**31))
def test_expected_score_is_zero(role, ctx, seed):
    spec = SPECS[role]
    params = random_policies(np.random.default_rng(seed), {role: spec}, 2.0)[role]
    c = Context(role, tuple(ctx))
    total = sum(math.exp(logprob(params, c, (y,))[0]) * grad_logprob(params, c, (y,))[0] for y in range(spec.n_out))
    assert np.abs(total).max() <= 1e-10


def test_weighted_score_equals_weighted_sum_of_gradients():
    rng = np.random.default_rng(9)
    spec = SPECS[Role.SUMMARIZER]
    params = random_policies(rng, {Role.SUMMARIZER: spec})[Role.SUMMARIZER]
    ctx = Context(Role.SUMMARIZER, (0, 3, 1, 4))
    s = sample(params, ctx, rng, 5)
    coeffs = rng.normal(size=len(s.tokens))
    lps, g = weighted_score(params, ctx, s.tokens, lambda lp: coeffs)
    expected = sum(c * gt for c, gt in zip(coeffs, grad_logprob(params, ctx, s.tokens)))
    np.testing.assert_allclose(g, expected, atol=1e-12)
    np.testing.assert_array_equal(lps, logprob(params, ctx, s.tokens))


def test_params_are_immutable_and_checked():
    spec = SPECS[Role.BUILDER]
    p = zero_params(Role.BUILDER, spec)
    with pytest.raises(ValueError):
        p.weights[0, 0] = 1.0
    with pytest.raises(ValueError):
        PolicyParams(Role.BUILDER, np.zeros((2, 2)), spec)
    bad = np.zeros((spec.feature_dim, spec.n_out))
    bad[0, 0] = np.nan
    with pytest.raises(PolicyDivergence):
        PolicyParams(Role.BUILDER, bad, spec)


@pytest.mark.filterwarnings("ignore:overflow")
def test_overflowing_logits_abort():
    spec = SPECS[Role.RESPONDER]
    w = np.zeros((spec.feature_dim, spec.n_out))
    w[:, 0] = 1e308
    with pytest.raises(PolicyDivergence):
        sample(PolicyParams(Role.RESPONDER, w, spec), Context(Role.RESPONDER, (0, 1)), np.random.default_rng(0), 1)


def test_role_mismatch_rejected():
    p = zero_params(Role.BUILDER, SPECS[Role.BUILDER])
    with pytest.raises(ValueError):
        sample(p, Context(Role.SUMMARIZER, (0,)), np.random.default_rng(0), 1)


def test_cursor_stays_inside_window():
    spec = SPECS[Role.BUILDER]
    ctx = Context(Role.BUILDER, (0, 3, 6, 1, 4, 6, 2, 5, 6))
    # token 2 first appears at position 6, outside the window at cursor 0
    far = features(spec, ctx, (2,))
    assert far[spec.o_window + ctx.tokens[0]] == 1.0
    near = features(spec, ctx, (0, 3))
    assert near[spec.o_window + ctx.tokens[2]] == 1.0


def test_prior_writer_copies_and_stops():
    spec = SPECS[Role.BUILDER]
    params = prior_params(Role.BUILDER, spec, 12.0)
    history = (0, 3, 6, 1, 4, 6)  # two fact records
    s = sample(params, Context(Role.BUILDER, history), np.random.default_rng(0), len(history), greedy=True)
    assert s.tokens == (0, 3, 1, 4, spec.eos)


def test_prior_responder_reads_value_after_query():
    spec = SPECS[Role.RESPONDER]
    params = prior_params(Role.RESPONDER, spec, 12.0)
    s = sample(params, Context(Role.RESPONDER, (1, 0, 3, 1, 5)), np.random.default_rng(0), 1, greedy=True)
    assert s.tokens == (5 - 3,)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = random_policies(rng, SPECS)
    velocity = {Role.BUILDER: rng.normal(size=params[Role.BUILDER].weights.shape)}
    ckpt = Checkpoint(500, "abc123", params, velocity)
    path = tmp_path / "c.tckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path, SPECS)
    assert back.step == 500 and back.config_hash == "abc123"
    for r in Role:
        assert back.params[r].weights.tobytes() == params[r].weights.tobytes()
    np.testing.assert_array_equal(back.velocity[Role.BUILDER], velocity[Role.BUILDER])
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_byte_layout():
    import struct

    spec = SPECS[Role.RESPONDER]
    w = np.arange(spec.feature_dim * spec.n_out, dtype=float).reshape(spec.feature_dim, spec.n_out)
    data = checkpoint_bytes(Checkpoint(7, "h", {Role.RESPONDER: PolicyParams(Role.RESPONDER, w, spec)}))
    assert data[:8] == b"TCKPT001"
    n, step = struct.unpack_from("<IQ", data, 8)
    assert (n, step) == (1, 7)
    off = 20
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4 + hlen
    (nlen,) = struct.unpack_from("<I", data, off)
    assert data[off + 4 : off + 4 + nlen] == b"RESPONDER"
    off += 4 + nlen
    assert struct.unpack_from("<IIQ", data, off) == (spec.feature_dim, spec.n_out, 7)
    off += 16
    np.testing.assert_array_equal(np.frombuffer(data[off:], dtype="<f8"), w.ravel())


def test_checkpoint_bad_magic():
    with pytest.raises(ValueError):
        checkpoint_from_bytes(b"NOTACKPT" + b"\0" * 20, SPECS)
