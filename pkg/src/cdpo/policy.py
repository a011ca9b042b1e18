"""Tiny autoregressive answer policy with exact, hand-derived gradients.

The policy emits token sequences of the form

    <think>* <answer> LETTER (, LETTER)* </answer> <eos>

over a fixed 10-token vocabulary. Conditioning is a fixed-width [0, 1]
feature vector describing the question (removed-object attributes or a
no-removal slot, negation flag, per-option participant attributes, option
count mask). The network is deliberately small and flat so that gradients
stay hand-derivable:

    c      = tanh(W_enc q + b_enc)            # question context, width H
    s_t    = mean of token embeddings of the emitted prefix (0 if empty)
    logits = U_ctx c + U_prefix s_t + b_out
    p_t    = softmax(logits)

All parameters live in one flat float64 array; `grad_logprob` implements
reverse accumulation through this graph and is checked against central
finite differences in the tests.
"""

from __future__ import annotations

import functools
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import EncodingError, NumericError
from .microworld import COLORS, MATERIALS, SHAPES, World
from .qgen import LETTERS, MAX_OPTIONS, Question

SCHEMA_VERSION = 1
VOCAB_VERSION = 1

VOCAB = ("<think>", "<answer>", "A", "B", "C", "D", "E", ",", "</answer>", "<eos>")
VOCAB_SIZE = len(VOCAB)

TOK_THINK = 0
TOK_ANS_OPEN = 1
TOK_LETTER_A = 2
TOK_COMMA = 7
TOK_ANS_CLOSE = 8
TOK_EOS = 9

LETTER_TOKENS = tuple(range(TOK_LETTER_A, TOK_LETTER_A + len(LETTERS)))
TOKEN_TO_LETTER = {TOK_LETTER_A + i: LETTERS[i] for i in range(len(LETTERS))}

#: attribute one-hot width per object: color + shape + material
ATTR_DIM = len(COLORS) + len(SHAPES) + len(MATERIALS)
#: removed-object block (attributes or a dedicated no-removal slot)
_REMOVED_DIM = ATTR_DIM + 1
#: full encoding: removed block, negation flag, per-slot participant
#: attributes, option-count mask
ENC_DIM = _REMOVED_DIM + 1 + MAX_OPTIONS * (2 * ATTR_DIM) + MAX_OPTIONS

PARAM_BUDGET = 5000

#: marginal token distribution giving an untrained policy a little grammar
#: competence, mirroring a base model that can already format an answer
_FORMAT_PRIOR = (0.02, 0.28, 0.06, 0.06, 0.06, 0.06, 0.06, 0.04, 0.20, 0.16)

_COLOR_INDEX = {c: i for i, c in enumerate(COLORS)}
_SHAPE_INDEX = {s: i for i, s in enumerate(SHAPES)}
_MATERIAL_INDEX = {m: i for i, m in enumerate(MATERIALS)}


@dataclass(frozen=True)
class PolicyArch:
    hidden: int = 24
    embed: int = 16
    max_tokens: int = 12
    enc_dim: int = ENC_DIM
    vocab: int = VOCAB_SIZE

    def __post_init__(self) -> None:
        if min(self.hidden, self.embed, self.max_tokens) < 1:
            raise ValueError("architecture widths must be positive")
        if self.vocab != VOCAB_SIZE:
            raise ValueError("the vocabulary is fixed")
        if self.param_count() > PARAM_BUDGET:
            raise ValueError(
                f"{self.param_count()} parameters exceed the budget of {PARAM_BUDGET}"
            )

    def param_count(self) -> int:
        h, e, d, v = self.hidden, self.embed, self.enc_dim, self.vocab
        return h * d + h + v * e + v * h + v * e + v

    def slices(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        return _arch_layout(self.hidden, self.embed, self.enc_dim, self.vocab)


@functools.lru_cache(maxsize=None)
def _arch_layout(h: int, e: int, d: int, v: int) -> dict[str, tuple[int, tuple[int, ...]]]:
    layout = [
        ("w_enc", (h, d)),
        ("b_enc", (h,)),
        ("embed", (v, e)),
        ("u_ctx", (v, h)),
        ("u_prefix", (v, e)),
        ("b_out", (v,)),
    ]
    out = {}
    offset = 0
    for name, shape in layout:
        size = 1
        for dim in shape:
            size *= dim
        out[name] = (offset, shape)
        offset += size
    return out


@dataclass
class PolicyParams:
    """All weights as one flat float64 vector plus reshaped views."""

    arch: PolicyArch
    flat: np.ndarray

    def __post_init__(self) -> None:
        expected = self.arch.param_count()
        if self.flat.shape != (expected,):
            raise ValueError(f"expected flat shape ({expected},), got {self.flat.shape}")
        if self.flat.dtype != np.float64:
            raise ValueError("parameters must be float64")
        # reshaped windows into the flat buffer; in-place updates to `flat`
        # stay visible through them
        views = {}
        for name, (offset, shape) in self.arch.slices().items():
            size = 1
            for dim in shape:
                size *= dim
            views[name] = self.flat[offset : offset + size].reshape(shape)
        self._views = views

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    @property
    def w_enc(self) -> np.ndarray:
        return self.view("w_enc")

    @property
    def b_enc(self) -> np.ndarray:
        return self.view("b_enc")

    @property
    def embed(self) -> np.ndarray:
        return self.view("embed")

    @property
    def u_ctx(self) -> np.ndarray:
        return self.view("u_ctx")

    @property
    def u_prefix(self) -> np.ndarray:
        return self.view("u_prefix")

    @property
    def b_out(self) -> np.ndarray:
        return self.view("b_out")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, self.flat.copy())


def zero_params(arch: PolicyArch) -> PolicyParams:
    return PolicyParams(arch, np.zeros(arch.param_count()))


def init_policy(
    arch: PolicyArch,
    rng: np.random.Generator,
    noise_scale: float = 0.01,
    format_prior: bool = True,
    detector_gain: float = 8.0,
    detector_bias: float = 1.0,
) -> PolicyParams:
    """Perception-equipped, readout-poor start.

    The encoder is initialized as a bank of match detectors — the stand-in
    for a pretrained backbone, so the starting policy can already tell
    which option slots involve the object the question conditions on.
    Four units watch each option slot s: for each participant side it draws
    a random attribute projection r and builds a unit pair with weights
    +gain*r on the removed-object block, -gain*r on that participant block,
    and biases +beta / -beta.  When the participant IS the removed object
    the projections cancel exactly, pinning the pair at (tanh(beta),
    tanh(-beta)), so the within-pair difference is ~2*tanh(beta); otherwise
    the residual projection noise saturates both units to the same sign and
    the difference is ~0.  A negation weight of -2*beta (sign tied to the
    unit's bias) reflects the pair on negated questions, flipping the
    difference's sign — so the pair is linear evidence for "slot s names
    the removed object", signed by negation, which is exactly the
    inclusion evidence a correct answer needs.  Two further units expose
    the negation flag and the option count as clean scalars; remaining
    units get moderate random weights.

    The readout weights stay tiny so initial token distributions follow the
    marginal format prior on the output bias, letting untrained rollouts
    occasionally parse; training only has to grow first-order readout
    weights on features that already exist.
    """
    params = PolicyParams(arch, rng.normal(0.0, noise_scale, arch.param_count()))
    w = params.w_enc
    b = params.b_enc
    w[:] = rng.normal(0.0, 0.25, w.shape)
    b[:] = rng.normal(0.0, 0.25, b.shape)
    n_detect = 4 * MAX_OPTIONS
    if arch.hidden >= n_detect:
        slot_base = _REMOVED_DIM + 1
        for slot in range(MAX_OPTIONS):
            for side in range(2):  # participant a / participant b
                r = rng.normal(0.0, 1.0, ATTR_DIM)
                r /= np.linalg.norm(r)
                for k, sign in enumerate((1.0, -1.0)):  # the +beta/-beta pair
                    h = 4 * slot + 2 * side + k
                    w[h, :] = rng.normal(0.0, noise_scale, ENC_DIM)
                    w[h, :ATTR_DIM] = detector_gain * r
                    lo = slot_base + slot * 2 * ATTR_DIM + side * ATTR_DIM
                    w[h, lo : lo + ATTR_DIM] = -detector_gain * r
                    w[h, _REMOVED_DIM] = -2.0 * sign * detector_bias
                    # with no removal clause there is nothing to match, so the
                    # detector idles hard-off instead of free-running on the
                    # participant attributes (saturation keeps it there)
                    w[h, ATTR_DIM] = -4.0 * detector_gain
                    b[h] = sign * detector_bias
    if arch.hidden >= n_detect + 2:
        # clean scalar features the readout can linearly compose with the
        # detectors: negation flag, option count
        neg_unit = n_detect
        w[neg_unit, :] = rng.normal(0.0, noise_scale, ENC_DIM)
        w[neg_unit, _REMOVED_DIM] = 2.0
        b[neg_unit] = -1.0
        count_unit = n_detect + 1
        w[count_unit, :] = rng.normal(0.0, noise_scale, ENC_DIM)
        w[count_unit, ENC_DIM - MAX_OPTIONS :] = 1.0
        b[count_unit] = -3.0
    if format_prior:
        params.b_out[:] += np.log(np.array(_FORMAT_PRIOR))
    return params


# ---------------------------------------------------------------------------
# question encoding


def _attr_onehot(world: World, object_id: int) -> np.ndarray:
    obj = world.object_by_id(object_id)
    vec = np.zeros(ATTR_DIM)
    vec[_COLOR_INDEX[obj.color]] = 1.0
    vec[len(COLORS) + _SHAPE_INDEX[obj.shape]] = 1.0
    vec[len(COLORS) + len(SHAPES) + _MATERIAL_INDEX[obj.material]] = 1.0
    return vec


def encode_question(question: Question, world: World) -> np.ndarray:
    """Fixed-width feature vector in [0, 1]; see module docstring."""
    if len(question.options) > MAX_OPTIONS:
        raise EncodingError(
            f"{len(question.options)} options exceed the {MAX_OPTIONS} encoder slots"
        )
    vec = np.zeros(ENC_DIM)
    if question.removed is None:
        vec[ATTR_DIM] = 1.0  # no-removal slot (bias-form questions)
    else:
        vec[:ATTR_DIM] = _attr_onehot(world, question.removed)
    vec[_REMOVED_DIM] = 1.0 if question.negated else 0.0
    base = _REMOVED_DIM + 1
    for i, opt in enumerate(question.options):
        lo = base + i * 2 * ATTR_DIM
        vec[lo : lo + ATTR_DIM] = _attr_onehot(world, opt.event.a)
        vec[lo + ATTR_DIM : lo + 2 * ATTR_DIM] = _attr_onehot(world, opt.event.b)
    mask = base + MAX_OPTIONS * 2 * ATTR_DIM
    vec[mask : mask + len(question.options)] = 1.0
    return vec


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class QuestionContext:
    """Per-question tensors that do not depend on the emitted prefix."""

    context: np.ndarray  # tanh hidden state, (H,)
    base_logits: np.ndarray  # u_ctx @ context + b_out, (V,)


def question_context(params: PolicyParams, enc: np.ndarray) -> QuestionContext:
    c = np.tanh(params.w_enc @ enc + params.b_enc)
    base = params.u_ctx @ c + params.b_out
    return QuestionContext(context=c, base_logits=base)


def _softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def _step_distribution(
    params: PolicyParams, ctx: QuestionContext, embed_sum: np.ndarray, length: int
) -> np.ndarray:
    if length:
        logits = ctx.base_logits + params.u_prefix @ (embed_sum / length)
    else:
        logits = ctx.base_logits
    return _softmax(logits)


def forward(params: PolicyParams, enc: np.ndarray, prefix: tuple[int, ...]) -> np.ndarray:
    """Next-token distribution after the given emitted prefix."""
    ctx = question_context(params, enc)
    embed_sum = np.zeros(params.arch.embed)
    for tok in prefix:
        embed_sum = embed_sum + params.embed[tok]
    return _step_distribution(params, ctx, embed_sum, len(prefix))


@dataclass(eq=False)
class Response:
    tokens: tuple[int, ...]
    logprobs: np.ndarray  # recorded at sampling time, one per token

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.logprobs):
            raise ValueError("one log-probability per token")

    def __len__(self) -> int:
        return len(self.tokens)


def sample_response(
    params: PolicyParams,
    enc: np.ndarray,
    rng: np.random.Generator,
    max_tokens: int | None = None,
    ctx: QuestionContext | None = None,
) -> Response:
    """Ancestral sampling until <eos> or the length cap.

    The recorded per-token log-probabilities use the same arithmetic as
    `logprob`, so re-scoring a sampled response reproduces them exactly.
    A precomputed `ctx` (from the same params and encoding) may be passed
    to avoid recomputing the question context per response.
    """
    limit = max_tokens if max_tokens is not None else params.arch.max_tokens
    if ctx is None:
        ctx = question_context(params, enc)
    embed_sum = np.zeros(params.arch.embed)
    tokens: list[int] = []
    lps: list[float] = []
    for t in range(limit):
        p = _step_distribution(params, ctx, embed_sum, t)
        u = rng.random()
        tok = int(np.searchsorted(np.cumsum(p), u, side="right"))
        tok = min(tok, VOCAB_SIZE - 1)
        tokens.append(tok)
        lps.append(math.log(p[tok]))
        if tok == TOK_EOS:
            break
        embed_sum = embed_sum + params.embed[tok]
    return Response(tokens=tuple(tokens), logprobs=np.array(lps))


def greedy_response(
    params: PolicyParams, enc: np.ndarray, max_tokens: int | None = None
) -> Response:
    """Temperature-0 decoding: deterministic argmax at every step."""
    limit = max_tokens if max_tokens is not None else params.arch.max_tokens
    ctx = question_context(params, enc)
    embed_sum = np.zeros(params.arch.embed)
    tokens: list[int] = []
    lps: list[float] = []
    for t in range(limit):
        p = _step_distribution(params, ctx, embed_sum, t)
        tok = int(np.argmax(p))
        tokens.append(tok)
        lps.append(math.log(p[tok]))
        if tok == TOK_EOS:
            break
        embed_sum = embed_sum + params.embed[tok]
    return Response(tokens=tuple(tokens), logprobs=np.array(lps))


def logprob(
    params: PolicyParams,
    enc: np.ndarray,
    tokens: tuple[int, ...],
    ctx: QuestionContext | None = None,
) -> np.ndarray:
    """Per-token log-probabilities of an existing token sequence."""
    if ctx is None:
        ctx = question_context(params, enc)
    embed_sum = np.zeros(params.arch.embed)
    out = np.empty(len(tokens))
    for t, tok in enumerate(tokens):
        p = _step_distribution(params, ctx, embed_sum, t)
        if p[tok] <= 0.0:
            raise NumericError(f"token {tok} has zero probability at position {t}")
        out[t] = math.log(p[tok])
        embed_sum = embed_sum + params.embed[tok]
    return out


# ---------------------------------------------------------------------------
# backward pass


def prefix_mean_matrix(tokens: tuple[int, ...], vocab: int) -> np.ndarray:
    """Row t holds the token-frequency vector of tokens[:t] divided by t
    (all zeros for t = 0); prefix means are then `matrix @ embed`."""
    n = len(tokens)
    counts = np.zeros((n, vocab))
    if n > 1:
        onehots = np.eye(vocab)[list(tokens[:-1])]
        counts[1:] = np.cumsum(onehots, axis=0) / np.arange(1, n)[:, None]
    return counts


def token_distributions(
    params: PolicyParams,
    enc: np.ndarray,
    tokens: tuple[int, ...],
    ctx: QuestionContext | None = None,
) -> np.ndarray:
    """All next-token distributions along a response, stacked (T, V).

    Vectorized counterpart of repeated `forward` calls (equal to them up to
    floating-point associativity).
    """
    if ctx is None:
        ctx = question_context(params, enc)
    counts = prefix_mean_matrix(tokens, params.arch.vocab)
    logits = ctx.base_logits + (counts @ params.embed) @ params.u_prefix.T
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def backprop_token_grads(
    params: PolicyParams,
    enc: np.ndarray,
    tokens: tuple[int, ...],
    dlogits: np.ndarray,
    ctx: QuestionContext | None = None,
) -> np.ndarray:
    """Reverse accumulation: map per-step logit gradients to a flat
    parameter gradient. `dlogits` has shape (T, V)."""
    arch = params.arch
    grad = zero_params(arch)
    c = ctx.context if ctx is not None else np.tanh(params.w_enc @ enc + params.b_enc)
    counts = prefix_mean_matrix(tokens, arch.vocab)
    prefix_means = counts @ params.embed  # (T, He)

    dz_sum = dlogits.sum(axis=0)  # (V,)
    grad.view("b_out")[:] = dz_sum
    grad.view("u_ctx")[:] = np.outer(dz_sum, c)
    grad.view("u_prefix")[:] = dlogits.T @ prefix_means
    g_s = dlogits @ params.u_prefix  # (T, He)
    grad.view("embed")[:] = counts.T @ g_s
    g_c = params.u_ctx.T @ dz_sum
    g_pre = g_c * (1.0 - c * c)
    grad.view("w_enc")[:] = np.outer(g_pre, enc)
    grad.view("b_enc")[:] = g_pre
    return grad.flat


def grad_logprob(params: PolicyParams, enc: np.ndarray, tokens: tuple[int, ...]) -> np.ndarray:
    """Gradient of the summed response log-probability, flat layout."""
    probs = token_distributions(params, enc, tokens)
    dlogits = -probs
    dlogits[np.arange(len(tokens)), list(tokens)] += 1.0
    return backprop_token_grads(params, enc, tokens, dlogits)


# ---------------------------------------------------------------------------
# answer grammar


def parse_answer(tokens: tuple[int, ...]) -> frozenset[str] | None:
    """Letters inside a single well-formed answer block, or None.

    Accepts exactly: zero or more <think>, <answer>, a comma-separated list
    of distinct letters, </answer>, <eos>, end of sequence.
    """
    i = 0
    n = len(tokens)
    while i < n and tokens[i] == TOK_THINK:
        i += 1
    if i >= n or tokens[i] != TOK_ANS_OPEN:
        return None
    i += 1
    letters: list[int] = []
    while True:
        if i >= n or tokens[i] not in LETTER_TOKENS:
            return None
        letters.append(tokens[i])
        i += 1
        if i >= n:
            return None
        if tokens[i] == TOK_COMMA:
            i += 1
            continue
        if tokens[i] == TOK_ANS_CLOSE:
            i += 1
            break
        return None
    if i >= n or tokens[i] != TOK_EOS or i != n - 1:
        return None
    if len(set(letters)) != len(letters):
        return None
    return frozenset(TOKEN_TO_LETTER[t] for t in letters)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, params: PolicyParams, metadata: dict | None = None) -> None:
    record = {
        "schema_version": SCHEMA_VERSION,
        "kind": "checkpoint",
        "vocab_version": VOCAB_VERSION,
        "arch": {
            "hidden": params.arch.hidden,
            "embed": params.arch.embed,
            "max_tokens": params.arch.max_tokens,
            "enc_dim": params.arch.enc_dim,
            "vocab": params.arch.vocab,
        },
        "metadata": metadata or {},
        "params": params.flat.tolist(),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh)
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[PolicyParams, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a checkpoint file")
    if record["vocab_version"] != VOCAB_VERSION:
        raise ValueError("checkpoint was written with an incompatible vocabulary")
    arch = PolicyArch(**record["arch"])
    params = PolicyParams(arch, np.array(record["params"], dtype=np.float64))
    return params, record["metadata"]
