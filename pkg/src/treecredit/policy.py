"""Linear-softmax autoregressive sequence policies.

Every agent (builder, summarizer, responder) is the same model class::

    pi(y | ctx, prefix) = softmax(phi(ctx, prefix) @ W)[y]

with ``W`` of shape ``(feature_dim, vocab_size)``.  The feature vector ``phi``
is a concatenation of non-negative blocks:

    bias       1                          constant 1
    bag        n_in                       token frequencies of the context
    last       n_out + 1                  one-hot of the last emitted token (or BOS)
    position   N_BUCKETS                  one-hot of the output position bucket
    window     WINDOW * (n_in + 1)        one-hot of the context tokens under the cursor
    lookup     LOOKUP * (n_in + 1)        one-hot of the tokens after the last re-occurrence
                                          of the first context token

The cursor starts at context position 0.  Emitting a token with a context
counterpart ``x`` moves the cursor to one past the first occurrence of ``x``
inside the window ``[cursor, cursor + WINDOW)``; if ``x`` is not visible the
cursor stays.  Positions beyond the context read as PAD (index ``n_in`` inside
each one-hot).
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

WINDOW = 4
LOOKUP = 2
BUCKET_EDGES = (1, 2, 3, 5, 9, 17, 33)
N_BUCKETS = len(BUCKET_EDGES) + 1


class PolicyDivergence(RuntimeError):
    """Non-finite logits or parameters; the run cannot continue."""


class Role(enum.IntEnum):
    BUILDER = 1
    SUMMARIZER = 2
    RESPONDER = 3


@dataclass(frozen=True)
class FeatureSpec:
    """Vocabulary layout for one role.

    ``n_in`` is the context vocabulary, ``n_out`` the output vocabulary
    (including EOS when ``eos`` is set).  Output token ``y != eos`` corresponds
    to context token ``y + out_offset``.
    """

    n_in: int
    n_out: int
    eos: int | None
    out_offset: int = 0
    n_slots: int = 0

    @property
    def feature_dim(self) -> int:
        return 1 + self.n_in + (self.n_out + 1) + N_BUCKETS + (WINDOW + LOOKUP) * (self.n_in + 1)

    # block offsets
    @property
    def o_bag(self) -> int:
        return 1

    @property
    def o_last(self) -> int:
        return 1 + self.n_in

    @property
    def o_pos(self) -> int:
        return self.o_last + self.n_out + 1

    @property
    def o_window(self) -> int:
        return self.o_pos + N_BUCKETS

    @property
    def o_lookup(self) -> int:
        return self.o_window + WINDOW * (self.n_in + 1)

    def to_context(self, y: int) -> int | None:
        if y == self.eos:
            return None
        x = y + self.out_offset
        return x if 0 <= x < self.n_in else None


def role_specs(n_slots: int, n_values: int) -> dict[Role, FeatureSpec]:
    """Builder and summarizer write over the shared vocabulary plus EOS; the
    responder emits one answer id in ``[0, n_values)``."""
    n_in = n_slots + n_values + 2
    writer = FeatureSpec(n_in=n_in, n_out=n_in + 1, eos=n_in, out_offset=0, n_slots=n_slots)
    responder = FeatureSpec(n_in=n_in, n_out=n_values, eos=None, out_offset=n_slots, n_slots=n_slots)
    return {Role.BUILDER: writer, Role.SUMMARIZER: writer, Role.RESPONDER: responder}


@dataclass(frozen=True)
class Context:
    role: Role
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class SampledSequence:
    tokens: tuple[int, ...]
    logprobs_old: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class PolicyParams:
    role: Role
    weights: np.ndarray
    spec: FeatureSpec

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.spec.feature_dim, self.spec.n_out):
            raise ValueError(f"weights shape {w.shape} != {(self.spec.feature_dim, self.spec.n_out)}")
        if not np.all(np.isfinite(w)):
            raise PolicyDivergence(f"non-finite weights for {self.role.name}")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def with_weights(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.role, weights, self.spec)


def zero_params(role: Role, spec: FeatureSpec) -> PolicyParams:
    return PolicyParams(role, np.zeros((spec.feature_dim, spec.n_out)), spec)


def prior_params(role: Role, spec: FeatureSpec, strength: float, skip_margin: float = 1.0) -> PolicyParams:
    """Zero weights plus a copy prior of ``strength`` logits.

    Writers (roles with EOS) copy slot and value tokens under the cursor, step
    over a flag by copying the slot behind it, and stop at the end of the
    context, so they rewrite a history as ``slot value slot value ...``.  At
    each record boundary a NOISE skip marker sits ``skip_margin`` logits below
    keeping the next record; the marker moves the cursor past a record without
    copying it, so learning only has to tip that margin per record.  EOS wins
    once the window runs past the end of the context and nowhere else.  The
    responder copies the token that follows the last mention of the query.
    Stands in for a pretrained base model.
    """
    w = np.zeros((spec.feature_dim, spec.n_out))
    width = spec.n_in + 1
    if spec.eos is None:
        for y in range(spec.n_out):
            x = spec.to_context(y)
            if x is not None:
                w[spec.o_lookup + x, y] = strength
        return PolicyParams(role, w, spec)
    for x in range(spec.n_in - 2):
        w[spec.o_window + x, x] = strength
    # half strength so a value under the cursor still beats the next slot
    for s in range(spec.n_slots):
        w[spec.o_window + width + s, s] = strength / 2
    # stop only at the end of the context
    w[0, spec.eos] = -strength
    w[spec.o_window + spec.n_in, spec.eos] = 2 * strength
    w[spec.o_window + width + spec.n_in, spec.eos] = 1.5 * strength
    # record boundaries: a skip marker one logit below keeping the record
    fact_flag, noise_flag = spec.n_in - 2, spec.n_in - 1
    w[spec.o_window + fact_flag, noise_flag] = strength / 2 - skip_margin
    w[spec.o_window + noise_flag, noise_flag] = strength / 2 - skip_margin
    w[spec.o_window + 2 * width + fact_flag, noise_flag] = strength - skip_margin
    w[spec.o_window + 2 * width + noise_flag, noise_flag] = strength - skip_margin
    return PolicyParams(role, w, spec)


def position_bucket(t: int) -> int:
    for b, edge in enumerate(BUCKET_EDGES):
        if t < edge:
            return b
    return len(BUCKET_EDGES)


class _ContextCache:
    """Per-context precomputation shared by sampling, scoring and gradients."""

    def __init__(self, spec: FeatureSpec, tokens: Sequence[int]):
        self.spec = spec
        ctx = np.asarray(tokens, dtype=np.int64)
        if ctx.size and (ctx.min() < 0 or ctx.max() >= spec.n_in):
            raise ValueError("context token outside the input vocabulary")
        self.ctx = ctx
        L = len(ctx)
        self.L = L
        bag = np.zeros(spec.n_in)
        if L:
            np.add.at(bag, ctx, 1.0)
            bag /= L
        self.bag = bag
        # next_occ[c, x]: first p >= c with ctx[p] == x, else L
        nxt = np.full((L + 1, spec.n_in), L, dtype=np.int64)
        for p in range(L - 1, -1, -1):
            nxt[p] = nxt[p + 1]
            nxt[p, ctx[p]] = p
        self.next_occ = nxt
        pad = spec.n_in
        lookup = [pad] * LOOKUP
        if L:
            hits = np.nonzero(ctx[1:] == ctx[0])[0]
            if hits.size:
                p = int(hits[-1]) + 1
                lookup = [int(ctx[p + d]) if p + d < L else pad for d in range(1, LOOKUP + 1)]
        self.lookup_rows = [spec.o_lookup + d * (pad + 1) + tok for d, tok in enumerate(lookup)]

    def advance(self, cursor: int, y: int) -> int:
        x = self.spec.to_context(y)
        if x is None or cursor >= self.L:
            return cursor
        p = int(self.next_occ[cursor, x])
        return p + 1 if p < cursor + WINDOW and p < self.L else cursor

    def active_rows(self, cursor: int, last: int | None, t: int) -> list[int]:
        spec = self.spec
        pad = spec.n_in
        rows = [0, spec.o_last + (spec.n_out if last is None else last), spec.o_pos + position_bucket(t)]
        for d in range(WINDOW):
            p = cursor + d
            tok = int(self.ctx[p]) if p < self.L else pad
            rows.append(spec.o_window + d * (pad + 1) + tok)
        rows.extend(self.lookup_rows)
        return rows

    def dense(self, rows: list[int]) -> np.ndarray:
        phi = np.zeros(self.spec.feature_dim)
        phi[self.spec.o_bag : self.spec.o_bag + self.spec.n_in] = self.bag
        np.add.at(phi, rows, 1.0)
        return phi


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise PolicyDivergence(f"non-finite logits {logits}")
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def _step_logprobs(weights: np.ndarray, cache: _ContextCache, bag_logits: np.ndarray, rows: list[int]) -> np.ndarray:
    return _log_softmax(bag_logits + weights[rows].sum(axis=0))


def _bag_logits(weights: np.ndarray, cache: _ContextCache) -> np.ndarray:
    spec = cache.spec
    return cache.bag @ weights[spec.o_bag : spec.o_bag + spec.n_in]


def _check_role(params: PolicyParams, ctx: Context) -> None:
    if params.role != ctx.role:
        raise ValueError(f"context role {ctx.role.name} does not match params role {params.role.name}")


def features(params_or_spec, ctx: Context, prefix: Sequence[int]) -> np.ndarray:
    """Dense feature vector for the next token after ``prefix``."""
    spec = params_or_spec.spec if isinstance(params_or_spec, PolicyParams) else params_or_spec
    cache = _ContextCache(spec, ctx.tokens)
    cursor, last = 0, None
    for y in prefix:
        cursor = cache.advance(cursor, y)
        last = y
    return cache.dense(cache.active_rows(cursor, last, len(prefix)))


def sample(
    params: PolicyParams,
    ctx: Context,
    rng: np.random.Generator,
    max_len: int,
    greedy: bool = False,
) -> SampledSequence:
    """Draw tokens until EOS or ``max_len``; ``greedy`` takes the argmax instead."""
    _check_role(params, ctx)
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    spec = params.spec
    cache = _ContextCache(spec, ctx.tokens)
    bag_logits = _bag_logits(params.weights, cache)
    tokens: list[int] = []
    logps: list[float] = []
    cursor, last = 0, None
    for t in range(max_len):
        lp = _step_logprobs(params.weights, cache, bag_logits, cache.active_rows(cursor, last, t))
        if greedy:
            y = int(np.argmax(lp))
        else:
            cdf = np.cumsum(np.exp(lp))
            y = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            y = min(y, spec.n_out - 1)
        tokens.append(y)
        logps.append(float(lp[y]))
        if y == spec.eos:
            break
        cursor = cache.advance(cursor, y)
        last = y
    return SampledSequence(tuple(tokens), tuple(logps))


def _walk(params: PolicyParams, ctx: Context, tokens: Sequence[int]):
    """Yield ``(rows, logprob vector)`` for each position of ``tokens``."""
    spec = params.spec
    cache = _ContextCache(spec, ctx.tokens)
    bag_logits = _bag_logits(params.weights, cache)
    cursor, last = 0, None
    for t, y in enumerate(tokens):
        if not 0 <= y < spec.n_out:
            raise ValueError(f"token {y} outside the output vocabulary of size {spec.n_out}")
        rows = cache.active_rows(cursor, last, t)
        yield cache, rows, _step_logprobs(params.weights, cache, bag_logits, rows)
        cursor = cache.advance(cursor, y)
        last = y


def logprob(params: PolicyParams, ctx: Context, tokens: Sequence[int]) -> np.ndarray:
    _check_role(params, ctx)
    return np.array([lp[y] for (_, _, lp), y in zip(_walk(params, ctx, tokens), tokens)])


def grad_logprob(params: PolicyParams, ctx: Context, tokens: Sequence[int]) -> list[np.ndarray]:
    """Per-token gradients ``phi_t (onehot(y_t) - p_t)^T`` of shape ``(feature_dim, vocab)``."""
    _check_role(params, ctx)
    grads = []
    for (cache, rows, lp), y in zip(_walk(params, ctx, tokens), tokens):
        delta = -np.exp(lp)
        delta[y] += 1.0
        grads.append(np.outer(cache.dense(rows), delta))
    return grads


def weighted_score(params: PolicyParams, ctx: Context, tokens: Sequence[int], coeffs_fn):
    """Return ``(logprobs, sum_t c_t * grad log pi(y_t))``.

    ``coeffs_fn(logprobs) -> c`` sees all per-token log-probabilities before the
    gradient is accumulated, so ratio-dependent weights can be applied in one
    pass without materialising per-token gradient matrices.
    """
    _check_role(params, ctx)
    steps = list(_walk(params, ctx, tokens))
    lps = np.array([lp[y] for (_, _, lp), y in zip(steps, tokens)])
    coeffs = np.asarray(coeffs_fn(lps), dtype=np.float64)
    spec = params.spec
    grad = np.zeros((spec.feature_dim, spec.n_out))
    bag_delta = np.zeros(spec.n_out)
    for (cache, rows, lp), y, c in zip(steps, tokens, coeffs):
        if c == 0.0:
            continue
        delta = -np.exp(lp)
        delta[y] += 1.0
        delta *= c
        np.add.at(grad, rows, delta)
        bag_delta += delta
    if steps:
        cache = steps[0][0]
        grad[spec.o_bag : spec.o_bag + spec.n_in] += np.outer(cache.bag, bag_delta)
    return lps, grad


# --- checkpoints -----------------------------------------------------------
#
# Layout (all integers unsigned little-endian):
#   8 bytes   magic b"TCKPT001"
#   u32       number of entries
#   u64       step
#   u32 + N   config hash (utf-8)
#   per entry:
#     u32 + N   entry name (utf-8): role name, or "velocity:<ROLE>"
#     u32       feature_dim
#     u32       vocab_size
#     u64       step
#     feature_dim * vocab_size float64 little-endian, row-major

MAGIC = b"TCKPT001"


@dataclass
class Checkpoint:
    step: int
    config_hash: str
    params: dict[Role, PolicyParams]
    velocity: dict[Role, np.ndarray] = field(default_factory=dict)


def _put_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _get_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n).decode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries = [(role.name, p.weights) for role, p in sorted(ckpt.params.items())]
    entries += [(f"velocity:{role.name}", v) for role, v in sorted(ckpt.velocity.items())]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", len(entries), ckpt.step))
    _put_str(buf, ckpt.config_hash)
    for name, arr in entries:
        _put_str(buf, name)
        rows, cols = arr.shape
        buf.write(struct.pack("<IIQ", rows, cols, ckpt.step))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes, specs: dict[Role, FeatureSpec]) -> Checkpoint:
    buf = io.BytesIO(data)
    if buf.read(8) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    n, step = struct.unpack("<IQ", buf.read(12))
    config_hash = _get_str(buf)
    params: dict[Role, PolicyParams] = {}
    velocity: dict[Role, np.ndarray] = {}
    for _ in range(n):
        name = _get_str(buf)
        rows, cols, _step = struct.unpack("<IIQ", buf.read(16))
        raw = buf.read(8 * rows * cols)
        if len(raw) != 8 * rows * cols:
            raise ValueError(f"truncated checkpoint entry {name}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
        if name.startswith("velocity:"):
            velocity[Role[name.split(":", 1)[1]]] = arr
        else:
            role = Role[name]
            params[role] = PolicyParams(role, arr, specs[role])
    return Checkpoint(step, config_hash, params, velocity)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path, specs: dict[Role, FeatureSpec]) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), specs)


def describe_spec(spec: FeatureSpec) -> str:
    return json.dumps({"n_in": spec.n_in, "n_out": spec.n_out, "eos": spec.eos, "out_offset": spec.out_offset})
