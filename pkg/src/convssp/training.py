"""Post-training and fine-tuning loops, Adam optimization, reproducibility.

One logical writer mutates parameters.  All randomness (shuffles, dropout,
contrastive batching) is derived from counter-keyed generators, so a run is
fully determined by (seed, config, data) and can resume mid-epoch exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Conversation, ModelInput, Vocabulary, build_model_input
from .encoder import (
    EncoderConfig,
    encode,
    predict_coref,
    predict_topic,
    reconstruct_words,
    teacher_vector,
)
from .objectives import LossReport, LossWeights, loss_ci, loss_final, loss_kd, loss_ts, loss_wr
from .tasks import TrainingInstance


class NonFiniteLossError(RuntimeError):
    """Training aborted because a loss term became non-finite."""

    def __init__(self, term: str, step: int, conv_id: str):
        self.term = term
        super().__init__(
            f"non-finite value in loss term {term!r} at step {step} "
            f"(instance {conv_id!r})"
        )


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 64
    post_train_epochs: int = 2
    fine_tune_epochs: int = 2
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.post_train_epochs < 0 or self.fine_tune_epochs < 0:
            raise ValueError("batch_size must be >= 1 and epoch counts >= 0")


@dataclass
class AdamState:
    """First/second moment estimates, keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            t=0,
        )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    grad_clip: float | None = None,
) -> None:
    """One Adam update in place; parameters without gradients keep g = 0."""
    grads = {
        k: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }
    if grad_clip is not None and grad_clip > 0:
        total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        if total > grad_clip:
            scale = grad_clip / total
            grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = ADAM_BETA1 * state.m[k] + (1 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1 - ADAM_BETA2) * g**2
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _instance_rng(seed: int, epoch: int, step: int, position: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, epoch, step, position])


def instance_loss(
    instance: TrainingInstance,
    student: dict[str, Tensor],
    teacher: dict[str, Tensor] | None,
    config: EncoderConfig,
    weights: LossWeights,
    squared_norms: bool = False,
    wr_source: str = "cls",
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LossReport]:
    """Forward one instance and combine its active loss terms.

    The coreference loss reads the separator states of the raw context
    utterances only (rows ``raw_offset .. raw_offset + n_raw - 2``), so the
    label stays in the raw conversation's frame while the input may carry a
    noise graft in front.
    """
    out = encode(instance.model_input, student, config, train=train, rng=rng)
    masks = instance.loss_mask.as_dict()

    ts_value = None
    if masks["topic"] and instance.topic_labels is not None:
        probs = predict_topic(out.sep_vectors, student)
        ts_value = loss_ts(probs, instance.topic_labels)

    ci_value = None
    if masks["coref"] and instance.coref_label is not None:
        lo = instance.raw_offset
        idx = np.arange(lo, lo + instance.n_raw - 1)
        context = ad.take_rows(out.sep_vectors, idx)
        ci_value = loss_ci(predict_coref(context, student), instance.coref_label.label)

    wr_value = None
    if masks["wr"]:
        if wr_source == "cls":
            source = out.cls_vector
        elif wr_source == "sep":
            source = ad.take_rows(
                out.sep_vectors, np.array([out.sep_vectors.data.shape[0] - 1])
            ).reshape(config.hidden_size)
        else:
            raise ValueError(f"wr_source must be 'cls' or 'sep', got {wr_source!r}")
        recon = reconstruct_words(source, student)
        wr_value = loss_wr(recon, instance.bow_target.vector, squared=squared_norms)

    kd_value = None
    if masks["kd"] and instance.teacher_input is not None:
        if teacher is None:
            raise ValueError("instance requires distillation but no teacher given")
        target = teacher_vector(instance.teacher_input, teacher, config)
        kd_value = loss_kd(out.cls_vector, target, squared=squared_norms)

    return loss_final(ts_value, ci_value, wr_value, kd_value, weights, masks)


def _check_finite(report: LossReport, step: int, conv_id: str) -> None:
    for term in ("l_ts", "l_ci", "l_wr", "l_kd", "l_final"):
        if not np.isfinite(getattr(report, term)):
            raise NonFiniteLossError(term, step, conv_id)


def _mean_report(reports: list[LossReport]) -> LossReport:
    n = len(reports)
    return LossReport(
        l_ts=sum(r.l_ts for r in reports) / n,
        l_ci=sum(r.l_ci for r in reports) / n,
        l_wr=sum(r.l_wr for r in reports) / n,
        l_kd=sum(r.l_kd for r in reports) / n,
        l_final=sum(r.l_final for r in reports) / n,
        masks={
            "topic": any(r.masks.get("topic") for r in reports),
            "coref": any(r.masks.get("coref") for r in reports),
            "wr": any(r.masks.get("wr") for r in reports),
            "kd": any(r.masks.get("kd") for r in reports),
        },
    )


@dataclass
class TrainState:
    """Mutable loop position; everything needed to resume a run exactly."""

    optimizer: AdamState
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0

    def rng_state(self, seed: int, phase: str) -> dict:
        return {
            "seed": seed,
            "phase": phase,
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "global_step": self.global_step,
        }


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    state: TrainState
    reports: list[LossReport]


def _batched_run(
    items: Sequence,
    loss_of: Callable[[int, object, np.random.Generator], tuple[Tensor, LossReport]],
    params: dict[str, Tensor],
    config: TrainConfig,
    epochs: int,
    state: TrainState | None,
    max_steps: int | None,
    on_step: Callable[[int, LossReport], None] | None,
) -> TrainResult:
    if not items:
        raise ValueError("training dataset is empty")
    state = state or TrainState(optimizer=AdamState.for_params(params))
    reports: list[LossReport] = []
    n = len(items)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    for epoch in range(state.epoch, epochs):
        perm = np.random.default_rng([config.seed, 104729, epoch]).permutation(n)
        start_batch = state.step_in_epoch if epoch == state.epoch else 0
        for b in range(start_batch, batches_per_epoch):
            batch_idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            zero_grads(params)
            totals: list[Tensor] = []
            batch_reports: list[LossReport] = []
            for j, idx in enumerate(batch_idx):
                rng = _instance_rng(config.seed, epoch, b, j)
                total, report = loss_of(int(idx), items[int(idx)], rng)
                _check_finite(report, state.global_step, getattr(items[int(idx)], "conv_id", str(idx)))
                totals.append(total)
                batch_reports.append(report)
            batch_total = totals[0]
            for t in totals[1:]:
                batch_total = batch_total + t
            batch_total = batch_total / len(totals)
            batch_total.backward()
            adam_step(params, state.optimizer, config.learning_rate, config.grad_clip)
            step_report = _mean_report(batch_reports)
            reports.append(step_report)
            state.global_step += 1
            state.step_in_epoch = b + 1
            if on_step is not None:
                on_step(state.global_step, step_report)
            if max_steps is not None and state.global_step >= max_steps:
                state.epoch = epoch if state.step_in_epoch < batches_per_epoch else epoch + 1
                if state.step_in_epoch >= batches_per_epoch:
                    state.step_in_epoch = 0
                return TrainResult(params=params, state=state, reports=reports)
        state.epoch = epoch + 1
        state.step_in_epoch = 0
    return TrainResult(params=params, state=state, reports=reports)


def post_train(
    instances: Sequence[TrainingInstance],
    student: dict[str, Tensor],
    teacher: dict[str, Tensor] | None,
    enc_config: EncoderConfig,
    config: TrainConfig,
    squared_norms: bool = False,
    wr_source: str = "cls",
    state: TrainState | None = None,
    max_steps: int | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Optimize the combined objective over shuffled mini-batches.

    Deterministic given (seed, config, data); aborts with the offending term
    named if any loss goes non-finite.
    """

    def loss_of(position, instance, rng):
        return instance_loss(
            instance,
            student,
            teacher,
            enc_config,
            config.weights,
            squared_norms=squared_norms,
            wr_source=wr_source,
            train=enc_config.dropout > 0,
            rng=rng,
        )

    return _batched_run(
        list(instances), loss_of, student, config,
        config.post_train_epochs, state, max_steps, on_step,
    )


def conversation_kd_pair(
    conversation: Conversation, vocab: Vocabulary, max_len: int
) -> tuple[ModelInput, ModelInput]:
    """(conversation input, rewritten-query input) for distillation."""
    if conversation.reformulated_last is None:
        raise ValueError(
            f"conversation {conversation.conv_id!r} has no reformulated last query"
        )
    model_input = build_model_input(conversation, vocab, max_len)
    teacher_input = build_model_input(
        Conversation(conversation.conv_id, (conversation.reformulated_last,)),
        vocab,
        max_len,
    )
    return model_input, teacher_input


def fine_tune(
    conversations: Sequence[Conversation],
    student: dict[str, Tensor],
    teacher: dict[str, Tensor],
    enc_config: EncoderConfig,
    config: TrainConfig,
    vocab: Vocabulary,
    max_len: int = 256,
    squared_norms: bool = False,
    state: TrainState | None = None,
    max_steps: int | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Distillation-only fine-tuning on conversational search pairs."""
    pairs = [conversation_kd_pair(c, vocab, max_len) for c in conversations]
    masks = {"topic": False, "coref": False, "wr": False, "kd": True}

    def loss_of(position, pair, rng):
        model_input, teacher_input = pair
        out = encode(
            model_input, student, enc_config,
            train=enc_config.dropout > 0, rng=rng,
        )
        target = teacher_vector(teacher_input, teacher, enc_config)
        kd = loss_kd(out.cls_vector, target, squared=squared_norms)
        return loss_final(None, None, None, kd, config.weights, masks)

    return _batched_run(
        pairs, loss_of, student, config,
        config.fine_tune_epochs, state, max_steps, on_step,
    )


def pretrain_teacher(
    pairs: Sequence[tuple[ModelInput, ModelInput]],
    params: dict[str, Tensor],
    enc_config: EncoderConfig,
    config: TrainConfig,
    epochs: int,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Contrastive pre-training of the ad-hoc teacher encoder.

    Each pair is (query input, positive document input); every other
    document in the batch acts as a negative via softmax cross-entropy over
    scaled inner products.
    """
    scale = 1.0 / np.sqrt(enc_config.hidden_size)

    if not pairs:
        raise ValueError("teacher pre-training needs at least one pair")
    state = TrainState(optimizer=AdamState.for_params(params))
    reports: list[LossReport] = []
    n = len(pairs)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    for epoch in range(epochs):
        perm = np.random.default_rng([config.seed, 31337, epoch]).permutation(n)
        for b in range(batches_per_epoch):
            batch_idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            if len(batch_idx) < 2:
                continue  # a single pair has no in-batch negatives
            zero_grads(params)
            q_vecs, d_vecs = [], []
            for j, idx in enumerate(batch_idx):
                rng = _instance_rng(config.seed, epoch, b, j)
                q_in, d_in = pairs[int(idx)]
                train = enc_config.dropout > 0
                q_vecs.append(encode(q_in, params, enc_config, train=train, rng=rng).cls_vector)
                d_vecs.append(encode(d_in, params, enc_config, train=train, rng=rng).cls_vector)
            q_mat = ad.concat_rows(q_vecs)
            d_mat = ad.concat_rows(d_vecs)
            logits = (q_mat @ ad.transpose(d_mat, (1, 0))) * scale
            loss = ad.cross_entropy_with_logits(logits, np.arange(len(q_vecs)))
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError("contrastive", state.global_step, "teacher")
            loss.backward()
            adam_step(params, state.optimizer, config.learning_rate, config.grad_clip)
            report = LossReport(0.0, 0.0, 0.0, value, value, {"kd": True})
            reports.append(report)
            state.global_step += 1
            if on_step is not None:
                on_step(state.global_step, report)
        state.epoch = epoch + 1
    return TrainResult(params=params, state=state, reports=reports)


def kfold_split(
    items: Sequence,
    k: int,
    key: Callable[[object], str] | None = None,
) -> list[tuple[list, list]]:
    """Deterministic K-fold split grouped by conversation id.

    Items sharing a key (by default the dialogue part of ``conv_id``, so all
    prefixes of one dialogue travel together) always land in the same fold.
    Returns ``k`` (train, held_out) pairs whose held-out sets partition the
    items.
    """
    from .tasks import _base_conversation_id

    if k < 2:
        raise ValueError("k must be >= 2")
    if key is None:
        key = lambda item: _base_conversation_id(getattr(item, "conv_id"))
    groups: dict[str, list] = {}
    for item in items:
        groups.setdefault(key(item), []).append(item)
    names = sorted(groups)
    if len(names) < k:
        raise ValueError(f"cannot make {k} folds out of {len(names)} groups")
    folds: list[list] = [[] for _ in range(k)]
    for i, name in enumerate(names):
        folds[i % k].extend(groups[name])
    out = []
    for i in range(k):
        held = folds[i]
        train = [item for j in range(k) if j != i for item in folds[j]]
        out.append((train, held))
    return out


def checkpoint_from_state(
    student: dict[str, Tensor],
    teacher: dict[str, Tensor],
    enc_config: EncoderConfig,
    vocab_sha256: str,
    seed: int,
    phase: str,
    state: TrainState,
    metric_snapshot: dict | None = None,
    config_hash: str = "",
) -> "Checkpoint":
    """Package the live training state into a checkpoint object."""
    from .checkpoint import Checkpoint

    return Checkpoint(
        student=student,
        teacher=teacher,
        encoder_config=enc_config,
        vocab_sha256=vocab_sha256,
        rng_state=state.rng_state(seed, phase),
        meta={
            "phase": phase,
            "epoch": state.epoch,
            "step": state.global_step,
            "adam_t": state.optimizer.t,
            "config_hash": config_hash,
            "metrics": metric_snapshot or {},
        },
        optim_m=state.optimizer.m,
        optim_v=state.optimizer.v,
    )


def state_from_checkpoint(ckpt) -> TrainState:
    """Rebuild the exact loop position recorded in a checkpoint."""
    optimizer = AdamState(
        m={k: v.copy() for k, v in ckpt.optim_m.items()},
        v={k: v.copy() for k, v in ckpt.optim_v.items()},
        t=int(ckpt.meta.get("adam_t", 0)),
    )
    rng = ckpt.rng_state
    return TrainState(
        optimizer=optimizer,
        epoch=int(rng.get("epoch", 0)),
        step_in_epoch=int(rng.get("step_in_epoch", 0)),
        global_step=int(rng.get("global_step", 0)),
    )


def write_metrics_csv(reports: Sequence[LossReport], path) -> None:
    """Metrics log: one CSV row per optimization step."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LossReport.CSV_HEADER + "\n")
        for step, report in enumerate(reports, start=1):
            fh.write(report.csv_row(step) + "\n")


def task_metrics(
    instances: Sequence[TrainingInstance],
    student: dict[str, Tensor],
    enc_config: EncoderConfig,
    wr_source: str = "cls",
) -> dict:
    """Held-out diagnostics for the three self-supervised heads.

    Topic accuracy thresholds the topic head at 0.5 against the graft
    labels; coreference accuracy takes the argmax over the raw context
    utterances; the word-reconstruction value is the mean Euclidean loss.
    """
    topic_hits = topic_total = 0
    coref_hits = coref_total = 0
    wr_values = []
    for inst in instances:
        out = encode(inst.model_input, student, enc_config, train=False)
        if inst.topic_labels is not None:
            probs = predict_topic(out.sep_vectors, student).data
            topic_hits += int(((probs > 0.5).astype(int) == inst.topic_labels).sum())
            topic_total += len(inst.topic_labels)
        if inst.loss_mask.coref and inst.coref_label is not None:
            lo = inst.raw_offset
            idx = np.arange(lo, lo + inst.n_raw - 1)
            probs = predict_coref(ad.take_rows(out.sep_vectors, idx), student).data
            coref_hits += int(np.argmax(probs) == inst.coref_label.referent_index)
            coref_total += 1
        if wr_source == "cls":
            source = out.cls_vector
        else:
            source = ad.take_rows(
                out.sep_vectors, np.array([out.sep_vectors.data.shape[0] - 1])
            ).reshape(enc_config.hidden_size)
        recon = reconstruct_words(source, student)
        wr_values.append(loss_wr(recon, inst.bow_target.vector).item())
    return {
        "topic_accuracy": topic_hits / topic_total if topic_total else float("nan"),
        "coref_top1": coref_hits / coref_total if coref_total else float("nan"),
        "l_wr_mean": float(np.mean(wr_values)),
        "topic_utterances": topic_total,
        "coref_instances": coref_total,
    }
