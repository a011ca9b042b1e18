"""End-to-end experiment orchestration.

Builds seeded datasets (a biased training mixture, a balanced eval split,
and the condition-stripped bias split), runs the capability-conflict
diagnostic and the two-phase debiasing pipeline over a list of seeds, and
aggregates everything into csv/json reports.

Determinism contract: every random draw is keyed on (data_seed or run
seed, a fixed stream tag, indices), artifacts contain no timestamps or
absolute paths, and all json is written with sorted keys — identical
(config, seed) reproduce every artifact byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import ConfigurationError, DatasetError, NumericError
from .microworld import EventLog, World, WorldConfig, generate_world, simulate, world_from_record, world_to_record
from .optim import TrainerConfig, TrainState, train_step
from .policy import (
    LETTER_TOKENS,
    TOK_ANS_CLOSE,
    TOK_ANS_OPEN,
    TOK_COMMA,
    TOK_EOS,
    PolicyArch,
    PolicyParams,
    backprop_token_grads,
    encode_question,
    greedy_response,
    init_policy,
    load_checkpoint,
    parse_answer,
    question_context,
    save_checkpoint,
    token_distributions,
)
from .qgen import (
    Question,
    QuestionType,
    build_bias_dataset,
    generate_question_of_type,
    question_from_record,
    question_to_record,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

#: heavily imbalanced observational:inferential option-count ratio used for
#: the skewed evaluation view (the balanced view weighs both types equally)
SKEW_OPTION_COUNTS = (11524, 1224)

# fixed stream tags so every rng derivation is content-addressed
_TAG_TRAIN, _TAG_EVAL, _TAG_PRETRAIN = 0, 1, 2
_TAG_INIT, _TAG_ROLLOUT = 101, 202
_TAG_ORDER_BIAS, _TAG_ORDER_MAIN, _TAG_ORDER_BASE = 301, 302, 303

ARMS = ("init", "bias", "cdpo", "grpo")


@dataclass(frozen=True)
class ExperimentConfig:
    # world generation
    num_objects: int = 6
    horizon: int = 20
    arena_length: float = 60.0
    # datasets
    n_train: int = 1000
    n_eval: int = 300
    train_obs_share: float = 0.74
    eval_obs_share: float = 0.5
    data_seed: int = 0
    # training (shared across phases; beta differs per mode)
    seeds: tuple[int, ...] = tuple(range(12))
    steps: int = 500
    # supervised pretraining of the shared init (the pretrained-model
    # stand-in): cross-entropy on canonical gold answer strings over an
    # ephemeral, type-balanced corpus disjoint from the train/eval splits,
    # with the perception backbone frozen
    pretrain_steps: int = 1200
    pretrain_lr: float = 0.02
    pretrain_batch: int = 32
    pretrain_n: int = 4000
    pretrain_obs_share: float = 0.0
    batch_size: int = 8
    group_size: int = 8
    learning_rate: float = 0.05
    #: phase-1 step size; the bias model is a separately trained artifact,
    #: so its optimizer setting is not tied to the main arms (None = shared)
    bias_learning_rate: float | None = None
    optimizer: str = "adam"
    clip_eps: float = 0.2
    kl_estimator: str = "exact"
    grpo_beta: float = 0.05
    cdpo_beta: float = 0.01
    kl_cap: float | None = None
    max_tokens: int = 12
    init_noise: float = 0.01
    # artifacts (excluded from the config hash)
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigurationError("dataset sizes must be positive")
        for name, share in (("train", self.train_obs_share), ("eval", self.eval_obs_share),
                            ("pretrain", self.pretrain_obs_share)):
            if not 0.0 <= share <= 1.0:
                raise ConfigurationError(f"{name} observational share must lie in [0, 1]")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be distinct")
        if self.pretrain_steps < 0:
            raise ConfigurationError("pretrain_steps must be non-negative")
        if self.pretrain_lr <= 0 or self.pretrain_batch < 1 or self.pretrain_n < 1:
            raise ConfigurationError("pretraining needs a positive lr, batch and corpus size")
        if self.bias_learning_rate is not None and self.bias_learning_rate <= 0:
            raise ConfigurationError("bias_learning_rate must be positive when set")
        # delegate the rest to the component configs
        self.world_config(0)
        self.trainer_for("grpo")
        self.trainer_for("bias")

    def world_config(self, seed: int) -> WorldConfig:
        return WorldConfig(
            num_objects=self.num_objects,
            horizon=self.horizon,
            arena_length=self.arena_length,
            seed=seed,
        )

    def trainer_for(self, mode: str) -> TrainerConfig:
        beta = {"grpo": self.grpo_beta, "bias": None, "cdpo": self.cdpo_beta}[mode]
        lr = self.learning_rate
        if mode == "bias" and self.bias_learning_rate is not None:
            lr = self.bias_learning_rate
        return TrainerConfig(
            mode=mode,
            group_size=self.group_size,
            clip_eps=self.clip_eps,
            beta=beta,
            kl_estimator=self.kl_estimator,
            learning_rate=lr,
            steps=self.steps,
            optimizer=self.optimizer,
            kl_cap=self.kl_cap if mode == "cdpo" else None,
            max_tokens=self.max_tokens,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        return out

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "seeds" in data:
            data["seeds"] = tuple(data["seeds"])
        return ExperimentConfig(**data)


_DATA_FIELDS = (
    "num_objects", "horizon", "arena_length", "n_train", "n_eval",
    "train_obs_share", "eval_obs_share", "data_seed",
)

#: bumped whenever question-generation semantics change, so stale on-disk
#: datasets are rejected even when the config fields alone would match
_GENERATOR_VERSION = 4


def _hash_payload(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def config_hash(cfg: ExperimentConfig) -> str:
    payload = cfg.to_dict()
    payload.pop("output_dir")  # artifact location must not change identity
    return _hash_payload(payload)


def data_hash(cfg: ExperimentConfig) -> str:
    """Hash over only the fields that determine dataset content, so the
    same dataset can serve runs that differ in training settings."""
    payload = cfg.to_dict()
    fields = {k: payload[k] for k in _DATA_FIELDS}
    fields["generator_version"] = _GENERATOR_VERSION
    return _hash_payload(fields)


def data_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.output_dir, "data")


def seed_dir(cfg: ExperimentConfig, seed: int, diagnostic: bool = False) -> str:
    prefix = "diag_seed" if diagnostic else "seed"
    return os.path.join(cfg.output_dir, f"{prefix}_{seed:03d}")


# ---------------------------------------------------------------------------
# jsonl plumbing


def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str, kind: str, cfg_hash: str, records: list[dict], extra: dict | None = None) -> None:
    header = {"schema_version": SCHEMA_VERSION, "kind": kind, "config_hash": cfg_hash,
              "count": len(records)}
    header.update(extra or {})
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump(header) + "\n")
        for rec in records:
            fh.write(_dump(rec) + "\n")


def read_jsonl(path: str, kind: str) -> tuple[dict, list[dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("kind") != kind:
        raise DatasetError(f"{path} is not a {kind} file")
    return lines[0], lines[1:]


# ---------------------------------------------------------------------------
# dataset generation


def _generate_slot(
    cfg: ExperimentConfig,
    tag: int,
    index: int,
    world_id: int,
    target: QuestionType,
    world_attempts: int = 60,
) -> tuple[World, EventLog, Question]:
    """One (world, factual log, question) of the requested type, retrying
    with fresh worlds until the rejection sampler succeeds."""
    for attempt in range(world_attempts):
        rng = np.random.default_rng([cfg.data_seed, tag, index, attempt])
        world = generate_world(cfg.world_config(seed=0), rng=rng)
        world = replace(world, world_id=world_id)
        log = simulate(world)
        question = generate_question_of_type(world, log, target, rng)
        if question is not None:
            return world, log, question
    raise DatasetError(
        f"exhausted {world_attempts} worlds without a {target.value} question for slot {index}"
    )


def _type_targets(n: int, obs_share: float, rng: np.random.Generator) -> list[QuestionType]:
    n_obs = int(round(n * obs_share))
    targets = [QuestionType.OBSERVATIONAL] * n_obs + [QuestionType.INFERENTIAL] * (n - n_obs)
    perm = rng.permutation(n)
    return [targets[i] for i in perm]


def gen_data(cfg: ExperimentConfig) -> dict[str, str]:
    """Write worlds/train/eval/bias files; returns the path mapping."""
    out = data_dir(cfg)
    h = data_hash(cfg)
    worlds: list[tuple[World, EventLog]] = []
    splits: dict[str, list[Question]] = {"train": [], "eval": []}

    for split, tag, n, share, id_base in (
        ("train", _TAG_TRAIN, cfg.n_train, cfg.train_obs_share, 0),
        ("eval", _TAG_EVAL, cfg.n_eval, cfg.eval_obs_share, cfg.n_train),
    ):
        targets = _type_targets(n, share, np.random.default_rng([cfg.data_seed, tag, 7]))
        for i in range(n):
            world, log, question = _generate_slot(cfg, tag, i, id_base + i, targets[i])
            worlds.append((world, log))
            splits[split].append(question)

    bias_questions = build_bias_dataset(splits["train"])

    paths = {
        "worlds": os.path.join(out, "worlds.jsonl"),
        "train": os.path.join(out, "train.jsonl"),
        "eval": os.path.join(out, "eval.jsonl"),
        "bias": os.path.join(out, "bias.jsonl"),
    }
    write_jsonl(paths["worlds"], "worlds", h, [world_to_record(w, log) for w, log in worlds])
    write_jsonl(paths["train"], "questions", h,
                [question_to_record(q) for q in splits["train"]], {"split": "train"})
    write_jsonl(paths["eval"], "questions", h,
                [question_to_record(q) for q in splits["eval"]], {"split": "eval"})
    write_jsonl(paths["bias"], "questions", h,
                [question_to_record(q) for q in bias_questions], {"split": "bias"})
    logger.info("wrote %d train / %d eval / %d bias questions under %s",
                cfg.n_train, cfg.n_eval, len(bias_questions), out)
    return paths


@dataclass
class Dataset:
    worlds: dict[int, tuple[World, EventLog]]
    train: list[Question]
    eval: list[Question]
    bias: list[Question]
    config_hash: str


def load_dataset(directory: str) -> Dataset:
    header, world_records = read_jsonl(os.path.join(directory, "worlds.jsonl"), "worlds")
    worlds = {}
    for rec in world_records:
        world, log = world_from_record(rec)
        worlds[world.world_id] = (world, log)

    def load_split(name: str) -> list[Question]:
        _, records = read_jsonl(os.path.join(directory, f"{name}.jsonl"), "questions")
        out = []
        for rec in records:
            log = worlds[rec["world_id"]][1]
            out.append(question_from_record(rec, factual_log=log))
        return out

    return Dataset(
        worlds=worlds,
        train=load_split("train"),
        eval=load_split("eval"),
        bias=load_split("bias"),
        config_hash=header["config_hash"],
    )


def prepare_examples(questions: list[Question], worlds: dict[int, tuple[World, EventLog]]) -> list[tuple[np.ndarray, Question]]:
    return [(encode_question(q, worlds[q.world_id][0]), q) for q in questions]


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    n_questions: int
    n_options: int
    n_observational_options: int
    n_inferential_options: int
    option_accuracy: float
    observational_accuracy: float
    inferential_accuracy: float
    skewed_option_accuracy: float
    question_exact_match: float
    format_rate: float
    mean_answer_len: float

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(params: PolicyParams, prepared: list[tuple[np.ndarray, Question]], decode=None) -> EvalReport:
    """Greedy decoding; a format failure predicts the empty set, and each
    option is judged by membership agreement with the answer set."""
    decode = decode or (lambda p, enc: greedy_response(p, enc).tokens)
    hits = {QuestionType.OBSERVATIONAL: 0, QuestionType.INFERENTIAL: 0}
    counts = {QuestionType.OBSERVATIONAL: 0, QuestionType.INFERENTIAL: 0}
    exact = 0
    formatted = 0
    answer_len = 0
    for enc, question in prepared:
        parsed = parse_answer(decode(params, enc))
        predicted = parsed if parsed is not None else frozenset()
        if parsed is not None:
            formatted += 1
            answer_len += len(parsed)
        exact += predicted == question.answer_set
        for letter, opt_type in question.option_types:
            counts[opt_type] += 1
            agree = (letter in predicted) == (letter in question.answer_set)
            hits[opt_type] += agree

    n_q = len(prepared)
    n_obs = counts[QuestionType.OBSERVATIONAL]
    n_inf = counts[QuestionType.INFERENTIAL]
    obs_acc = hits[QuestionType.OBSERVATIONAL] / n_obs if n_obs else 0.0
    inf_acc = hits[QuestionType.INFERENTIAL] / n_inf if n_inf else 0.0
    w_obs, w_inf = SKEW_OPTION_COUNTS
    return EvalReport(
        n_questions=n_q,
        n_options=n_obs + n_inf,
        n_observational_options=n_obs,
        n_inferential_options=n_inf,
        option_accuracy=(hits[QuestionType.OBSERVATIONAL] + hits[QuestionType.INFERENTIAL]) / (n_obs + n_inf) if n_obs + n_inf else 0.0,
        observational_accuracy=obs_acc,
        inferential_accuracy=inf_acc,
        skewed_option_accuracy=(w_obs * obs_acc + w_inf * inf_acc) / (w_obs + w_inf),
        question_exact_match=exact / n_q if n_q else 0.0,
        format_rate=formatted / n_q if n_q else 0.0,
        mean_answer_len=answer_len / formatted if formatted else 0.0,
    )


# ---------------------------------------------------------------------------
# training phases


def make_batches(n_items: int, batch_size: int, steps: int, rng: np.random.Generator) -> list[list[int]]:
    """Fixed batch schedule: epoch-wise permutations chunked to batch_size,
    repeated until `steps` batches exist."""
    if n_items < 1:
        raise DatasetError("cannot schedule batches over an empty split")
    batches: list[list[int]] = []
    while len(batches) < steps:
        order = rng.permutation(n_items)
        for lo in range(0, n_items, batch_size):
            chunk = order[lo : lo + batch_size]
            if len(chunk) == batch_size or n_items < batch_size:
                batches.append([int(i) for i in chunk])
            if len(batches) == steps:
                break
    return batches


def train_phase(
    params: PolicyParams,
    trainer: TrainerConfig,
    prepared: list[tuple[np.ndarray, Question]],
    other: PolicyParams | None,
    rollout_rng: np.random.Generator,
    batches: list[list[int]],
    metrics_path: str | None = None,
    header_extra: dict | None = None,
    cfg_hash: str = "",
) -> PolicyParams:
    """Run `trainer.steps` updates in place on a copy of `params`; stream
    per-step metrics to jsonl when a path is given."""
    state = TrainState(params=params.copy(), config=trainer)
    lines = []
    for step_batch in batches[: trainer.steps]:
        batch = [prepared[i] for i in step_batch]
        metrics = train_step(state, batch, other, rollout_rng)
        lines.append(metrics)
    if metrics_path is not None:
        write_jsonl(metrics_path, "metrics", cfg_hash, lines, header_extra)
    return state.params


def _init_params(cfg: ExperimentConfig, seed: int) -> PolicyParams:
    rng = np.random.default_rng([seed, _TAG_INIT])
    return init_policy(PolicyArch(max_tokens=cfg.max_tokens), rng, noise_scale=cfg.init_noise)


def gold_tokens(question: Question, rng: np.random.Generator | None = None) -> np.ndarray:
    """Canonical answer string for supervised pretraining:
    ANS_OPEN letters (comma-separated) ANS_CLOSE EOS.  Letters come sorted
    unless an rng is given, which shuffles them — answers are sets, and a
    fixed order would teach the policy an order artifact."""
    letters = sorted(question.answer_set)
    if rng is not None:
        letters = [letters[i] for i in rng.permutation(len(letters))]
    toks = [TOK_ANS_OPEN]
    for i, letter in enumerate(letters):
        if i:
            toks.append(TOK_COMMA)
        toks.append(LETTER_TOKENS[ord(letter) - ord("A")])
    toks.extend([TOK_ANS_CLOSE, TOK_EOS])
    return np.array(toks, dtype=np.int64)


_PRETRAIN_CORPUS_CACHE: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}


def pretrain_corpus(cfg: ExperimentConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """(encoding, gold token string) pairs for supervised pretraining:
    an ephemeral corpus drawn from its own generator stream, world-disjoint
    from the persisted train/eval/bias splits.

    The corpus teaches the two skills a capable starting model brings to
    the table.  Counterfactual slots keep only focused questions —
    several candidate options, at most two of them correct — so the fit
    that minimizes cross-entropy is precise, condition-driven answering:
    name the options the stated removal singles out, leave the rest
    alone.  Perception slots (`pretrain_obs_share` of the corpus) are
    watch-and-report questions with no removal clause, labeled by factual
    lookup exactly like the shortcut split, so the policy can already
    transcribe what it saw.  Which of the two habits later reward phases
    amplify is the capability conflict under study."""
    key = f"{data_hash(cfg)}:{cfg.pretrain_n}:{cfg.pretrain_obs_share}"
    if key not in _PRETRAIN_CORPUS_CACHE:
        targets = _type_targets(cfg.pretrain_n, cfg.pretrain_obs_share,
                                np.random.default_rng([cfg.data_seed, _TAG_PRETRAIN, 7]))
        corpus = []
        order_rng = np.random.default_rng([cfg.data_seed, _TAG_PRETRAIN, 11])
        slot = 0
        for target in targets:
            while True:
                world, _, question = _generate_slot(cfg, _TAG_PRETRAIN, slot, -1 - slot, target)
                slot += 1
                if target is QuestionType.OBSERVATIONAL:
                    stripped = build_bias_dataset([question])
                    if stripped:
                        question = stripped[0]
                        break
                elif len(question.options) >= 4 and len(question.answer_set) <= 2:
                    break
            corpus.append((encode_question(question, world), gold_tokens(question, order_rng)))
        _PRETRAIN_CORPUS_CACHE[key] = corpus
    return _PRETRAIN_CORPUS_CACHE[key]


def pretrain_params(
    cfg: ExperimentConfig,
    seed: int,
    metrics_path: str | None = None,
    cfg_hash: str = "",
) -> PolicyParams:
    """The shared starting point of all arms: the pretrained-model stand-in.

    Starts from the perception-equipped noise init and fits the readout by
    cross-entropy on canonical gold answer strings with plain Adam, so the
    policy entering any objective phase already formats answers and
    conditions them on the question — mirroring a pretrained model that is
    subsequently fine-tuned with policy gradients.  The perception units
    (encoder weights) stay frozen, as does the backbone of a probed
    pretrained model; only embeddings and the output projections move."""
    params = _init_params(cfg, seed)
    if cfg.pretrain_steps == 0:
        return params
    corpus = pretrain_corpus(cfg)
    batches = make_batches(len(corpus), cfg.pretrain_batch, cfg.pretrain_steps,
                           np.random.default_rng([seed, _TAG_ORDER_BASE]))
    layout = params.arch.slices()
    frozen = np.zeros_like(params.flat, dtype=bool)
    for name in ("w_enc", "b_enc"):
        off, shape = layout[name]
        frozen[off : off + int(np.prod(shape))] = True
    m = np.zeros_like(params.flat)
    v = np.zeros_like(params.flat)
    lines = []
    for k, batch in enumerate(batches, start=1):
        grad = np.zeros_like(params.flat)
        loss = 0.0
        n_tok = 0
        for idx in batch:
            enc, toks = corpus[idx]
            ctx = question_context(params, enc)
            dists = token_distributions(params, enc, toks, ctx=ctx)
            dlogits = dists.copy()
            dlogits[np.arange(len(toks)), toks] -= 1.0
            dlogits /= len(batch)
            grad += backprop_token_grads(params, enc, toks, dlogits, ctx=ctx)
            loss -= float(np.sum(np.log(dists[np.arange(len(toks)), toks])))
            n_tok += len(toks)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite pretraining gradient at step {k}")
        grad[frozen] = 0.0
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad * grad
        m_hat = m / (1.0 - 0.9**k)
        v_hat = v / (1.0 - 0.999**k)
        params.flat -= cfg.pretrain_lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        lines.append({"step": k, "ce_loss": loss / n_tok})
    if metrics_path is not None:
        write_jsonl(metrics_path, "metrics", cfg_hash,
                    lines, {"seed": seed, "phase": "pretrain"})
    return params


def _write_evals(path: str, cfg_hash: str, seed: int, reports: dict[str, EvalReport]) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "evals",
        "config_hash": cfg_hash,
        "seed": seed,
        "reports": {arm: rep.as_dict() for arm, rep in reports.items()},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump(payload) + "\n")


def load_evals(path: str) -> tuple[int, dict[str, EvalReport]]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.loads(fh.read())
    if payload.get("kind") != "evals":
        raise DatasetError(f"{path} is not an evals file")
    reports = {arm: EvalReport(**rep) for arm, rep in payload["reports"].items()}
    return payload["seed"], reports


# ---------------------------------------------------------------------------
# top-level runs


def ensure_data(cfg: ExperimentConfig) -> Dataset:
    directory = data_dir(cfg)
    if not os.path.exists(os.path.join(directory, "worlds.jsonl")):
        gen_data(cfg)
    ds = load_dataset(directory)
    if ds.config_hash != data_hash(cfg):
        raise DatasetError(
            f"dataset under {directory} was generated from data settings {ds.config_hash}, "
            f"current settings hash to {data_hash(cfg)}; regenerate or point elsewhere"
        )
    return ds


def run_seed(cfg: ExperimentConfig, dataset: Dataset, seed: int) -> dict[str, EvalReport]:
    """One full pipeline seed: shared pretrained init -> bias phase, then
    the cdpo arm and its grpo control from the same init, shared data order
    and rollout seeds; returns the four eval reports."""
    h = config_hash(cfg)
    out = seed_dir(cfg, seed)
    os.makedirs(out, exist_ok=True)

    prepared_train = prepare_examples(dataset.train, dataset.worlds)
    prepared_eval = prepare_examples(dataset.eval, dataset.worlds)
    prepared_bias = prepare_examples(dataset.bias, dataset.worlds)

    theta0 = pretrain_params(cfg, seed,
                             os.path.join(out, "metrics_pretrain.jsonl"), h)
    save_checkpoint(os.path.join(out, "init.ckpt.json"), theta0,
                    {"config_hash": h, "seed": seed, "phase": "init",
                     "pretrain_steps": cfg.pretrain_steps})
    reports: dict[str, EvalReport] = {"init": evaluate(theta0, prepared_eval)}

    # phase 1: KL-free shortcut training on the condition-stripped split
    bias_batches = make_batches(len(prepared_bias), cfg.batch_size, cfg.steps,
                                np.random.default_rng([seed, _TAG_ORDER_BIAS]))
    pi_bias = train_phase(
        theta0, cfg.trainer_for("bias"), prepared_bias, None,
        np.random.default_rng([seed, _TAG_ROLLOUT, 0]), bias_batches,
        os.path.join(out, "metrics_bias.jsonl"), {"seed": seed, "phase": "bias"}, h,
    )
    save_checkpoint(os.path.join(out, "bias.ckpt.json"), pi_bias,
                    {"config_hash": h, "seed": seed, "phase": "bias"})
    reports["bias"] = evaluate(pi_bias, prepared_eval)

    # phase 2: the debiased arm and its control share everything except the
    # objective mode and the frozen comparison model
    main_batches = make_batches(len(prepared_train), cfg.batch_size, cfg.steps,
                                np.random.default_rng([seed, _TAG_ORDER_MAIN]))
    for arm, other in (("cdpo", pi_bias), ("grpo", theta0)):
        trained = train_phase(
            theta0, cfg.trainer_for(arm), prepared_train, other,
            np.random.default_rng([seed, _TAG_ROLLOUT, 1]), main_batches,
            os.path.join(out, f"metrics_{arm}.jsonl"), {"seed": seed, "phase": arm}, h,
        )
        save_checkpoint(os.path.join(out, f"{arm}.ckpt.json"), trained,
                        {"config_hash": h, "seed": seed, "phase": arm})
        reports[arm] = evaluate(trained, prepared_eval)

    _write_evals(os.path.join(out, "evals.json"), h, seed, reports)
    return reports


def train_single(cfg: ExperimentConfig, seed: int, mode: str) -> str:
    """One phase for one seed, producing the same artifact bytes as the
    corresponding slice of `run_seed`; returns the checkpoint path. The
    cdpo arm needs the seed's bias checkpoint to exist already."""
    dataset = ensure_data(cfg)
    h = config_hash(cfg)
    out = seed_dir(cfg, seed)
    os.makedirs(out, exist_ok=True)
    init_path = os.path.join(out, "init.ckpt.json")
    if os.path.exists(init_path):
        theta0, _ = load_checkpoint(init_path)
    else:
        theta0 = pretrain_params(cfg, seed,
                                 os.path.join(out, "metrics_pretrain.jsonl"), h)
        save_checkpoint(init_path, theta0, {"config_hash": h, "seed": seed, "phase": "init",
                                            "pretrain_steps": cfg.pretrain_steps})

    if mode == "bias":
        prepared = prepare_examples(dataset.bias, dataset.worlds)
        other = None
        batches = make_batches(len(prepared), cfg.batch_size, cfg.steps,
                               np.random.default_rng([seed, _TAG_ORDER_BIAS]))
        rollout_rng = np.random.default_rng([seed, _TAG_ROLLOUT, 0])
    else:
        prepared = prepare_examples(dataset.train, dataset.worlds)
        if mode == "cdpo":
            bias_path = os.path.join(out, "bias.ckpt.json")
            if not os.path.exists(bias_path):
                raise ConfigurationError(
                    f"cdpo needs the bias checkpoint at {bias_path}; run train-bias first"
                )
            other, _ = load_checkpoint(bias_path)
        else:
            other = theta0
        batches = make_batches(len(prepared), cfg.batch_size, cfg.steps,
                               np.random.default_rng([seed, _TAG_ORDER_MAIN]))
        rollout_rng = np.random.default_rng([seed, _TAG_ROLLOUT, 1])

    trained = train_phase(
        theta0, cfg.trainer_for(mode), prepared, other, rollout_rng, batches,
        os.path.join(out, f"metrics_{mode}.jsonl"), {"seed": seed, "phase": mode}, h,
    )
    ckpt = os.path.join(out, f"{mode}.ckpt.json")
    save_checkpoint(ckpt, trained, {"config_hash": h, "seed": seed, "phase": mode})
    return ckpt


def run_pipeline(cfg: ExperimentConfig) -> dict:
    dataset = ensure_data(cfg)
    for seed in cfg.seeds:
        logger.info("pipeline seed %d", seed)
        run_seed(cfg, dataset, seed)
    return report(cfg)


def run_diagnostic(cfg: ExperimentConfig) -> dict:
    """Before/after evaluation around plain reward-chasing training on the
    biased mixture — the capability-conflict probe."""
    dataset = ensure_data(cfg)
    h = config_hash(cfg)
    prepared_train = prepare_examples(dataset.train, dataset.worlds)
    prepared_eval = prepare_examples(dataset.eval, dataset.worlds)

    rows = []
    for seed in cfg.seeds:
        out = seed_dir(cfg, seed, diagnostic=True)
        os.makedirs(out, exist_ok=True)
        theta0 = pretrain_params(cfg, seed,
                                 os.path.join(out, "metrics_pretrain.jsonl"), h)
        before = evaluate(theta0, prepared_eval)
        batches = make_batches(len(prepared_train), cfg.batch_size, cfg.steps,
                               np.random.default_rng([seed, _TAG_ORDER_MAIN]))
        trained = train_phase(
            theta0, cfg.trainer_for("grpo"), prepared_train, theta0,
            np.random.default_rng([seed, _TAG_ROLLOUT, 1]), batches,
            os.path.join(out, "metrics_grpo.jsonl"), {"seed": seed, "phase": "grpo"}, h,
        )
        after = evaluate(trained, prepared_eval)
        _write_evals(os.path.join(out, "evals.json"), h, seed, {"init": before, "grpo": after})
        rows.append({
            "seed": seed,
            "before": before.as_dict(),
            "after": after.as_dict(),
            "inferential_delta": after.inferential_accuracy - before.inferential_accuracy,
            "observational_delta": after.observational_accuracy - before.observational_accuracy,
        })

    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": "diagnostic",
        "config_hash": h,
        "seeds": list(cfg.seeds),
        "rows": rows,
        "mean_inferential_delta": float(np.mean([r["inferential_delta"] for r in rows])),
        "mean_observational_delta": float(np.mean([r["observational_delta"] for r in rows])),
    }
    path = os.path.join(cfg.output_dir, "diagnostic.json")
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump(summary) + "\n")
    return summary


# ---------------------------------------------------------------------------
# reporting

PER_SEED_COLUMNS = (
    "seed", "arm", "option_accuracy", "observational_accuracy",
    "inferential_accuracy", "skewed_option_accuracy", "question_exact_match",
    "format_rate", "mean_answer_len",
)


def report(cfg: ExperimentConfig) -> dict:
    """Aggregate per-seed eval reports into per_seed.csv, long.csv and
    summary.json; missing artifacts are listed as warnings, not errors."""
    h = config_hash(cfg)
    warnings: list[str] = []
    per_seed: dict[int, dict[str, EvalReport]] = {}
    for seed in cfg.seeds:
        path = os.path.join(seed_dir(cfg, seed), "evals.json")
        if not os.path.exists(path):
            warnings.append(f"missing evals for seed {seed}")
            continue
        stored_seed, reports = load_evals(path)
        if stored_seed != seed:
            warnings.append(f"evals at {path} carry seed {stored_seed}")
            continue
        per_seed[seed] = reports

    os.makedirs(cfg.output_dir, exist_ok=True)
    per_seed_path = os.path.join(cfg.output_dir, "per_seed.csv")
    with open(per_seed_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PER_SEED_COLUMNS)
        for seed in sorted(per_seed):
            for arm in ARMS:
                if arm not in per_seed[seed]:
                    warnings.append(f"seed {seed} lacks arm {arm}")
                    continue
                rep = per_seed[seed][arm]
                writer.writerow([
                    seed, arm, rep.option_accuracy, rep.observational_accuracy,
                    rep.inferential_accuracy, rep.skewed_option_accuracy,
                    rep.question_exact_match, rep.format_rate, rep.mean_answer_len,
                ])

    long_path = os.path.join(cfg.output_dir, "long.csv")
    with open(long_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "arm", "metric", "value"])
        for seed in sorted(per_seed):
            for arm in ARMS:
                if arm not in per_seed[seed]:
                    continue
                for key, value in per_seed[seed][arm].as_dict().items():
                    writer.writerow([seed, arm, key, value])

    def arm_series(arm: str, metric: str) -> list[float]:
        return [getattr(per_seed[s][arm], metric) for s in sorted(per_seed) if arm in per_seed[s]]

    summary: dict = {
        "schema_version": SCHEMA_VERSION,
        "kind": "summary",
        "config_hash": h,
        "group_size": cfg.group_size,
        "clip_eps": cfg.clip_eps,
        "grpo_beta": cfg.grpo_beta,
        "cdpo_beta": cfg.cdpo_beta,
        "seeds": list(cfg.seeds),
        "seeds_reported": sorted(per_seed),
        "warnings": warnings,
        "means": {},
    }
    for arm in ARMS:
        series = {m: arm_series(arm, m) for m in (
            "option_accuracy", "observational_accuracy", "inferential_accuracy",
            "skewed_option_accuracy", "question_exact_match", "format_rate",
        )}
        if series["option_accuracy"]:
            summary["means"][arm] = {m: float(np.mean(v)) for m, v in series.items()}

    cdpo_inf = arm_series("cdpo", "inferential_accuracy")
    grpo_inf = arm_series("grpo", "inferential_accuracy")
    if len(cdpo_inf) >= 2 and len(cdpo_inf) == len(grpo_inf):
        delta = np.array(cdpo_inf) - np.array(grpo_inf)
        if np.all(delta == delta[0]):
            # ttest_rel is undefined at zero variance; report the sign only
            pvalue = 0.0 if delta[0] > 0 else 1.0
        else:
            pvalue = float(stats.ttest_rel(cdpo_inf, grpo_inf, alternative="greater").pvalue)
        summary["paired_inferential"] = {
            "mean_cdpo": float(np.mean(cdpo_inf)),
            "mean_grpo": float(np.mean(grpo_inf)),
            "mean_delta": float(np.mean(delta)),
            "one_sided_pvalue": pvalue,
            "n_pairs": len(cdpo_inf),
        }

    summary_path = os.path.join(cfg.output_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return summary


def load_arm_checkpoint(cfg: ExperimentConfig, seed: int, arm: str) -> PolicyParams:
    path = os.path.join(seed_dir(cfg, seed), f"{arm}.ckpt.json")
    params, _ = load_checkpoint(path)
    return params
