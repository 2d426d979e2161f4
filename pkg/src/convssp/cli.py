"""Command-line entry point orchestrating the full workflow.

Pipeline, end to end::

    ssp generate        --out data/                    # synthetic corpus
    ssp build-data      --conversations ... --noise-pool ... --vocab ... --out tasks/
    ssp prepare-teacher --conversations ... --corpus ... --qrels ... --vocab ... --out teacher/
    ssp post-train      --data tasks/instances.jsonl --checkpoint teacher/model.ckpt --out post/
    ssp fine-tune       --data ft.jsonl --checkpoint post/model.ckpt --out tuned/
    ssp index           --corpus ... --checkpoint tuned/model.ckpt --out index/
    ssp eval            --conversations ... --index ... --checkpoint ... --qrels ... --out eval/
    ssp robustness      --conversations ... --noise-pool ... ... --max-added 6 --out robust/
    ssp plot            --metrics post/metrics.csv --out plots/

Every command accepts ``--config`` (flat key = value file) and ``--seed``;
flags win over file values, and the SSP_SEED environment variable is the
seed fallback.  Each output directory receives a ``manifest.json`` written
atomically at the end of the run.  Outputs are byte-identical across reruns
with the same inputs and seed (manifest timestamp aside).
"""

from __future__ import annotations

import argparse
import gzip
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, Settings, load_settings
from .data import (
    DataError,
    load_vocabulary,
    read_conversations,
    read_corpus,
    save_vocabulary,
    write_conversations,
    write_corpus,
)
from .encoder import clone_params, freeze, init_head_params, init_student_params, params_checksum
from .retrieval import (
    EvalError,
    index_corpus,
    load_index,
    mrr,
    ndcg_at_3,
    read_qrels,
    robustness_eval,
    run_retrieval,
    save_index,
    write_curve_csv,
    write_qrels,
    write_run,
)
from .synthetic import generate
from .tasks import build_instances, instance_statistics, read_instances, write_instances
from .training import (
    NonFiniteLossError,
    checkpoint_from_state,
    conversation_kd_pair,
    fine_tune,
    post_train,
    pretrain_teacher,
    state_from_checkpoint,
    write_metrics_csv,
)


class CommandError(Exception):
    """User-facing failure; maps to exit code 2."""


def _write_manifest(out_dir: Path, command: str, args, seed: int, started: float,
                    inputs: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": getattr(args, "config", None),
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out_dir / "manifest.json")


def _settings(args) -> Settings:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_settings(getattr(args, "config", None), overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: str, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{kind} file not found: {path}")
    return p


def _open_maybe_gz(path, mode="rt"):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode, encoding="utf-8" if "t" in mode else None)
    return open(path, mode, encoding="utf-8" if "t" in mode else None)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    started = time.time()
    settings = _settings(args)
    out = _out_dir(args)
    data = generate(settings.synthetic_spec())
    write_conversations(data.conversations, out / "conversations.jsonl")
    write_corpus(data.documents, out / "corpus.jsonl")
    write_qrels(data.qrels, out / "qrels.txt")
    save_vocabulary(data.vocab, out / "vocab.txt")
    with open(out / "truth.jsonl", "w", encoding="utf-8") as fh:
        for row in data.truth:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(
        f"generated {len(data.conversations)} conversation records, "
        f"{len(data.documents)} documents, |V|={len(data.vocab)}"
    )
    _write_manifest(
        out, "generate", args, settings.seed, started, {},
        ["conversations.jsonl", "corpus.jsonl", "qrels.txt", "vocab.txt", "truth.jsonl"],
    )
    return 0


def cmd_build_data(args) -> int:
    started = time.time()
    settings = _settings(args)
    out = _out_dir(args)
    conversations = read_conversations(_require(args.conversations, "conversations"))
    if not conversations:
        raise CommandError("no conversations")
    noise_pool = read_conversations(_require(args.noise_pool, "noise pool"))
    if len(noise_pool) < settings.min_noise_pool:
        raise CommandError(
            f"noise pool has {len(noise_pool)} conversations; "
            f"min_noise_pool is {settings.min_noise_pool}"
        )
    vocab = load_vocabulary(_require(args.vocab, "vocabulary"))
    instances = build_instances(
        conversations, noise_pool, vocab,
        max_len=settings.max_len, seed=settings.seed,
        perturb_prob=settings.perturb_prob,
        variants=settings.instance_variants,
    )
    write_instances(instances, out / "instances.jsonl")
    # compact cache: gzip of the interchange form, with deterministic bytes
    with open(out / "instances.jsonl", "rb") as src:
        payload = src.read()
    with open(out / "instances.jsonl.gz", "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
            gz.write(payload)
    stats = instance_statistics(instances)
    from .tasks import reciprocal_probabilities

    lengths = sorted({len(c) for c in noise_pool})
    stats["p_k_reference"] = {
        str(m): [float(p) for p in reciprocal_probabilities(m)] for m in lengths
    }
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"built {stats['instances']} instances "
        f"({stats['perturbed']} perturbed, coref found on "
        f"{stats['coref_found_fraction']:.1%})"
    )
    _write_manifest(
        out, "build-data", args, settings.seed, started,
        {"conversations": args.conversations, "noise_pool": args.noise_pool, "vocab": args.vocab},
        ["instances.jsonl", "instances.jsonl.gz", "stats.json"],
    )
    return 0


def cmd_prepare_teacher(args) -> int:
    started = time.time()
    settings = _settings(args)
    out = _out_dir(args)
    conversations = read_conversations(_require(args.conversations, "conversations"))
    documents = read_corpus(_require(args.corpus, "corpus"))
    qrels = read_qrels(_require(args.qrels, "qrels"))
    vocab = load_vocabulary(_require(args.vocab, "vocabulary"))
    enc_config = settings.encoder_config(len(vocab))

    docs_by_id = {d.doc_id: d for d in documents}
    pairs = []
    from .data import Conversation, build_model_input

    for conv in conversations:
        if conv.reformulated_last is None:
            continue
        positives = [
            doc_id
            for (qid, doc_id), grade in qrels.items()
            if qid == conv.conv_id and grade >= settings.positive_threshold
        ]
        if not positives:
            continue
        doc = docs_by_id.get(sorted(positives)[0])
        if doc is None:
            continue
        q_in = build_model_input(
            Conversation(conv.conv_id, (conv.reformulated_last,)), vocab, settings.max_len
        )
        d_in = build_model_input(
            Conversation(doc.doc_id, (doc.text,)), vocab, settings.max_len
        )
        pairs.append((q_in, d_in))
    if not pairs:
        raise CommandError("no (rewritten query, positive document) pairs found")

    rng = np.random.default_rng([settings.seed, 1009])
    teacher = init_student_params(enc_config, rng)
    result = pretrain_teacher(
        pairs, teacher, enc_config, settings.teacher_train_config(),
        epochs=settings.teacher_epochs,
    )
    write_metrics_csv(result.reports, out / "metrics.csv")

    if settings.student_init == "teacher":
        student = clone_params(teacher, trainable=True)
        heads = init_head_params(enc_config, np.random.default_rng([settings.seed, 2003]))
        student.update(heads)
    elif settings.student_init == "random":
        student = init_student_params(enc_config, np.random.default_rng([settings.seed, 2003]))
    else:
        raise CommandError(f"student_init must be teacher|random, got {settings.student_init!r}")

    ckpt = Checkpoint(
        student=student,
        teacher=freeze(clone_params(teacher, trainable=False)),
        encoder_config=enc_config,
        vocab_sha256=vocab.content_hash(),
        rng_state={"seed": settings.seed, "phase": "teacher"},
        meta={
            "phase": "teacher",
            "step": result.state.global_step,
            "epoch": result.state.epoch,
            "adam_t": 0,
            "config_hash": settings.content_hash(),
            "metrics": {"contrastive_loss": result.reports[-1].l_final if result.reports else None},
        },
    )
    save_checkpoint(out / "model.ckpt", ckpt)
    print(
        f"teacher pre-trained on {len(pairs)} pairs for {settings.teacher_epochs} epochs; "
        f"final contrastive loss {result.reports[-1].l_final:.4f}"
    )
    _write_manifest(
        out, "prepare-teacher", args, settings.seed, started,
        {"conversations": args.conversations, "corpus": args.corpus,
         "qrels": args.qrels, "vocab": args.vocab},
        ["model.ckpt", "metrics.csv"],
    )
    return 0


def cmd_post_train(args) -> int:
    started = time.time()
    settings = _settings(args)
    if args.epochs is not None:
        settings.post_train_epochs = args.epochs
    out = _out_dir(args)
    instances = read_instances(_require(args.data, "instance data"))
    if not instances:
        raise CommandError("no training instances")
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    enc_config = ckpt.encoder_config
    student, teacher = ckpt.student, freeze(ckpt.teacher)
    state = None
    if ckpt.meta.get("phase") == "post-train":
        state = state_from_checkpoint(ckpt)
        print(f"resuming post-training at epoch {state.epoch}, step {state.step_in_epoch}")
    result = post_train(
        instances, student, teacher, enc_config, settings.train_config(),
        squared_norms=settings.squared_norms, wr_source=settings.wr_source,
        state=state,
    )
    write_metrics_csv(result.reports, out / "metrics.csv")
    final = result.reports[-1].l_final if result.reports else None
    new_ckpt = checkpoint_from_state(
        student, teacher, enc_config, ckpt.vocab_sha256, settings.seed,
        "post-train", result.state,
        {"l_final": final}, settings.content_hash(),
    )
    save_checkpoint(out / "model.ckpt", new_ckpt)
    if final is not None:
        print(f"post-training done: {result.state.global_step} steps, l_final {final:.4f}")
    else:
        print("post-training done: no steps taken (0 epochs)")
    _write_manifest(
        out, "post-train", args, settings.seed, started,
        {"data": args.data, "checkpoint": args.checkpoint},
        ["model.ckpt", "metrics.csv"],
    )
    return 0


def cmd_fine_tune(args) -> int:
    started = time.time()
    settings = _settings(args)
    if args.epochs is not None:
        settings.fine_tune_epochs = args.epochs
    out = _out_dir(args)
    conversations = read_conversations(_require(args.data, "conversations"))
    if not conversations:
        raise CommandError("no conversations")
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    student, teacher = ckpt.student, freeze(ckpt.teacher)
    state = None
    if ckpt.meta.get("phase") == "fine-tune":
        state = state_from_checkpoint(ckpt)
        print(f"resuming fine-tuning at epoch {state.epoch}, step {state.step_in_epoch}")
    result = fine_tune(
        conversations, student, teacher, ckpt.encoder_config,
        settings.train_config(), _vocab_for_checkpoint(args, ckpt),
        max_len=settings.max_len, squared_norms=settings.squared_norms,
        state=state,
    )
    write_metrics_csv(result.reports, out / "metrics.csv")
    final = result.reports[-1].l_kd if result.reports else None
    new_ckpt = checkpoint_from_state(
        student, teacher, ckpt.encoder_config, ckpt.vocab_sha256, settings.seed,
        "fine-tune", result.state, {"l_kd": final}, settings.content_hash(),
    )
    save_checkpoint(out / "model.ckpt", new_ckpt)
    print(f"fine-tuning done: {result.state.global_step} steps")
    _write_manifest(
        out, "fine-tune", args, settings.seed, started,
        {"data": args.data, "checkpoint": args.checkpoint},
        ["model.ckpt", "metrics.csv"],
    )
    return 0


def _vocab_for_checkpoint(args, ckpt):
    vocab = load_vocabulary(_require(args.vocab, "vocabulary"))
    if vocab.content_hash() != ckpt.vocab_sha256:
        raise CommandError(
            "vocabulary file does not match the checkpoint's vocabulary hash"
        )
    return vocab


def cmd_index(args) -> int:
    started = time.time()
    settings = _settings(args)
    out = _out_dir(args)
    documents = read_corpus(_require(args.corpus, "corpus"))
    if not documents:
        raise CommandError("no documents")
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    vocab = _vocab_for_checkpoint(args, ckpt)
    index = index_corpus(
        documents, freeze(ckpt.teacher), ckpt.encoder_config, vocab, settings.max_len
    )
    save_index(index, out / "index.bin", vocab_sha256=ckpt.vocab_sha256)
    print(f"indexed {len(documents)} documents at width {index.vectors.shape[1]}")
    _write_manifest(
        out, "index", args, settings.seed, started,
        {"corpus": args.corpus, "checkpoint": args.checkpoint, "vocab": args.vocab},
        ["index.bin"],
    )
    return 0


def _index_for_eval(args, settings, ckpt, vocab):
    if args.index:
        return load_index(_require(args.index, "index"), ckpt.vocab_sha256)
    if not args.corpus:
        raise CommandError("need --index or --corpus")
    documents = read_corpus(_require(args.corpus, "corpus"))
    return index_corpus(documents, freeze(ckpt.teacher), ckpt.encoder_config, vocab, settings.max_len)


def cmd_eval(args) -> int:
    started = time.time()
    settings = _settings(args)
    out = _out_dir(args)
    conversations = read_conversations(_require(args.conversations, "conversations"))
    if not conversations:
        raise CommandError("no conversations")
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    vocab = _vocab_for_checkpoint(args, ckpt)
    qrels = read_qrels(_require(args.qrels, "qrels"))
    index = _index_for_eval(args, settings, ckpt, vocab)
    run = run_retrieval(
        conversations, ckpt.student, index, ckpt.encoder_config, vocab,
        settings.max_len, settings.top_k,
    )
    write_run(run, out / "run.trec", tag=args.tag)
    metrics = {
        "mrr": mrr(run, qrels, settings.positive_threshold, settings.skip_unjudged),
        "ndcg3": ndcg_at_3(run, qrels, settings.ndcg_gain == "exp", settings.skip_unjudged),
        "queries": len(run),
    }
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"MRR {metrics['mrr']:.4f}  NDCG@3 {metrics['ndcg3']:.4f}  ({len(run)} queries)")
    _write_manifest(
        out, "eval", args, settings.seed, started,
        {"conversations": args.conversations, "checkpoint": args.checkpoint,
         "qrels": args.qrels, "index": args.index or args.corpus},
        ["run.trec", "metrics.json"],
    )
    return 0


def cmd_robustness(args) -> int:
    started = time.time()
    settings = _settings(args)
    out = _out_dir(args)
    conversations = read_conversations(_require(args.conversations, "conversations"))
    noise_pool = read_conversations(_require(args.noise_pool, "noise pool"))
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    vocab = _vocab_for_checkpoint(args, ckpt)
    qrels = read_qrels(_require(args.qrels, "qrels"))
    index = _index_for_eval(args, settings, ckpt, vocab)
    try:
        curve = robustness_eval(
            ckpt.student, conversations, noise_pool, args.max_added, index, qrels,
            ckpt.encoder_config, vocab, seed=settings.seed, max_len=settings.max_len,
            top_k=settings.top_k, positive_threshold=settings.positive_threshold,
            exponential_gain=settings.ndcg_gain == "exp",
        )
    except EvalError as exc:
        raise CommandError(str(exc)) from exc
    write_curve_csv(curve, out / "curve.csv")
    _plot_curve(curve, out / "curve.png")
    for point in curve:
        print(f"j={point.added}  MRR {point.mrr:.4f}  NDCG@3 {point.ndcg3:.4f}")
    _write_manifest(
        out, "robustness", args, settings.seed, started,
        {"conversations": args.conversations, "noise_pool": args.noise_pool,
         "checkpoint": args.checkpoint, "qrels": args.qrels},
        ["curve.csv", "curve.png"],
    )
    return 0


def _plot_curve(curve, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    js = [p.added for p in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(js, [p.mrr for p in curve], marker="o", label="MRR")
    ax.plot(js, [p.ndcg3 for p in curve], marker="s", label="NDCG@3")
    ax.set_xlabel("prepended off-topic utterances")
    ax.set_ylabel("metric")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_plot(args) -> int:
    started = time.time()
    settings = _settings(args)
    out = _out_dir(args)
    path = _require(args.metrics, "metrics CSV")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            rows.append([float(x) for x in line.strip().split(",")])
    if not rows:
        raise CommandError("metrics CSV has no rows")
    data = np.asarray(rows)
    fig, ax = plt.subplots(figsize=(7, 4))
    for col, name in enumerate(header[1:], start=1):
        ax.plot(data[:, 0], data[:, col], label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "losses.png", dpi=120)
    plt.close(fig)
    print(f"plotted {len(rows)} steps -> {out / 'losses.png'}")
    _write_manifest(out, "plot", args, settings.seed, started,
                    {"metrics": args.metrics}, ["losses.png"])
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssp",
        description="Self-supervised post-training workflow for a toy conversational retriever.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="run seed (overrides config and SSP_SEED)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="emit a synthetic conversational-search corpus")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-data", help="construct self-supervised training instances")
    common(p)
    p.add_argument("--conversations", required=True)
    p.add_argument("--noise-pool", required=True)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("prepare-teacher", help="contrastively pre-train the frozen teacher")
    common(p)
    p.add_argument("--conversations", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_prepare_teacher)

    p = sub.add_parser("post-train", help="run the combined-objective post-training stage")
    common(p)
    p.add_argument("--data", required=True, help="instances.jsonl (or .gz cache)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, help="override post_train_epochs")
    p.set_defaults(func=cmd_post_train)

    p = sub.add_parser("fine-tune", help="distillation-only fine-tuning")
    common(p)
    p.add_argument("--data", required=True, help="conversations JSONL with rewrites")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--epochs", type=int, help="override fine_tune_epochs")
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("index", help="embed a corpus with the frozen teacher")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("eval", help="retrieve and score MRR / NDCG@3")
    common(p)
    p.add_argument("--conversations", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", help="prebuilt index.bin")
    p.add_argument("--corpus", help="corpus to index on the fly")
    p.add_argument("--tag", default="convssp")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="off-topic prefix degradation curve")
    common(p)
    p.add_argument("--conversations", required=True)
    p.add_argument("--noise-pool", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", help="prebuilt index.bin")
    p.add_argument("--corpus", help="corpus to index on the fly")
    p.add_argument("--max-added", type=int, default=6)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("plot", help="plot a training metrics CSV")
    common(p)
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ConfigError, DataError, EvalError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())

if __name__ == "__main__":
    entrypoint()
