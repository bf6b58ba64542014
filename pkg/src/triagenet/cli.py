"""Command-line pipeline: generate, pretrain, train, evaluate, explain.

Every subcommand resolves its settings from built-in defaults, then an
optional JSON config file, then flags, in that order. The resolved
settings, the root seed, and sha256 hashes of every input and output
file land in a manifest JSON next to the artifacts, so a run can be
reproduced (and verified byte for byte) from its manifest alone.

All randomness flows from the single root seed, split into per-purpose
streams (corpus data, parameter init, embedding pretraining, batch
shuffling, dropout, drop experiments), so changing one stage's seed
label never perturbs another stage.
"""

from __future__ import annotations

import argparse
import dataclasses
import html
import json
import os
import sys
from pathlib import Path

from . import __version__
from .autodiff import NoTapeError, ShapeError
from .corpus import (
    LABELS,
    Corpus,
    GeneratorSpec,
    SpecValidationError,
    Vocabulary,
    build_vocab,
    encode,
    file_sha256,
    generate_corpus,
    load_corpus,
    save_corpus,
    split,
)
from .embedding import ChecksumError, ConfigError, load_table, save_table, train_skipgram
from .explain import (
    drop_experiment,
    pair_synergy,
    render_heatmap,
    render_pair_table,
    render_score_table,
    score_features,
)
from .model import ModelConfig, init_params, load_model, predict, save_model
from .training import (
    EmptyRetainedError,
    HyperParams,
    TrainingDivergedError,
    derive_seed,
    evaluate,
    grid_search,
    render_metrics_table,
    train,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "cases": 1000,
    "split": [0.9, 0.05, 0.05],
    "min_count": 1,
    "generator": {},
    "model": {
        "max_len": 16,
        "embedding_dim": 32,
        "widths": [1, 2, 3],
        "filters": 32,
        "attention_size": 24,
        "mlp_layers": [48],
        "dropout": 0.2,
        "arch": "acnn",
    },
    "training": {
        "lr": 0.002,
        "epochs": 5,
        "batch_size": 64,
    },
    "embedding": {
        "iters": 3,
        "window": 5,
        "negatives": 5,
        "lr": 0.025,
    },
}

_EMBEDDING_KNOBS = ("iters", "window", "negatives", "lr")

_USER_ERRORS = (
    ConfigError,
    SpecValidationError,
    ChecksumError,
    ShapeError,
    NoTapeError,
    EmptyRetainedError,
    TrainingDivergedError,
)


# -- configuration ------------------------------------------------------------


def _deep_copy(obj):
    return json.loads(json.dumps(obj))


def resolve_config(args) -> dict:
    """Defaults, then config file, then flags; rejects unknown keys."""
    config = _deep_copy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(user) - set(config)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for key, value in user.items():
            if isinstance(config[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                config[key].update(value)
            else:
                config[key] = value
    for flag, path in (
        ("seed", ("seed",)),
        ("cases", ("cases",)),
        ("mode", ("generator", "mode")),
        ("arch", ("model", "arch")),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            target = config
            for key in path[:-1]:
                target = target[key]
            target[path[-1]] = value
    _validate_sections(config)
    return config


def _validate_sections(config) -> None:
    for section, cls in (("model", ModelConfig), ("training", HyperParams)):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(config[section]) - known
        if unknown:
            raise ConfigError(f"unknown {section} settings: {sorted(unknown)}")
    unknown = set(config["embedding"]) - set(_EMBEDDING_KNOBS)
    if unknown:
        raise ConfigError(f"unknown embedding settings: {sorted(unknown)}")
    ratios = config["split"]
    if not (isinstance(ratios, list) and len(ratios) == 3):
        raise ConfigError("split must be a list of three ratios")
    # the generator section is validated by GeneratorSpec.from_dict


def generator_spec(config) -> GeneratorSpec:
    spec = GeneratorSpec.from_dict(config["generator"])
    spec.validate()
    return spec


def model_config(config, vocab_size: int) -> ModelConfig:
    section = dict(config["model"])
    section["widths"] = tuple(section["widths"])
    section["mlp_layers"] = tuple(section["mlp_layers"])
    return ModelConfig(vocab_size=vocab_size, **section)


def hyper_params(config) -> HyperParams:
    return HyperParams.from_dict(config["training"])


# -- artifact plumbing --------------------------------------------------------


def _out_dir(args) -> Path:
    base = args.out_dir or os.environ.get("TRIAGENET_OUT_DIR") or "."
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _artifact(args, flag: str, default_name: str) -> Path:
    given = getattr(args, flag, None)
    return Path(given) if given else _out_dir(args) / default_name


def write_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(args, command: str, config, inputs: dict, outputs: dict, extra=None) -> Path:
    manifest = {
        "tool": "triagenet",
        "version": __version__,
        "command": command,
        "config": config,
        "root_seed": config["seed"],
        "arguments": extra or {},
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in inputs.items()},
        "outputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in outputs.items()},
    }
    path = _out_dir(args) / f"manifest_{command.replace('-', '_')}.json"
    write_json(manifest, path)
    return path


def _config_inputs(args) -> dict:
    return {"config": Path(args.config)} if getattr(args, "config", None) else {}


# -- shared pipeline steps ----------------------------------------------------


def _load_world(args, config):
    """Corpus, its stratified index split, and the train-split vocabulary."""
    corpus_path = _artifact(args, "corpus", "corpus.jsonl")
    corpus = load_corpus(corpus_path)
    tr, va, te = split(
        corpus.records, tuple(config["split"]), seed=derive_seed(config["seed"], "split")
    )
    vocab = build_vocab((corpus.records[i] for i in tr), min_count=config["min_count"])
    return corpus_path, corpus, (tr, va, te), vocab


def _load_trained(args, config):
    """Everything evaluate/score/drop/explain need: model plus data world."""
    corpus_path, corpus, indices, vocab = _load_world(args, config)
    model_path = _artifact(args, "model", "model.bin")
    params = load_model(model_path)
    if params.config.vocab_size != len(vocab):
        raise ConfigError(
            f"model expects a vocabulary of {params.config.vocab_size} entries, "
            f"this corpus and config yield {len(vocab)}"
        )
    if params.corpus_hash and params.corpus_hash != file_sha256(corpus_path):
        print("note: model was trained on a different corpus file", file=sys.stderr)
    return corpus_path, corpus, indices, vocab, model_path, params


def _encode_split(corpus, indices, vocab, max_len):
    return [encode(corpus.records[i], vocab, max_len) for i in indices]


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    spec = generator_spec(config)
    corpus = generate_corpus(spec, config["cases"], seed=derive_seed(config["seed"], "data"))
    out = _artifact(args, "out", "corpus.jsonl")
    save_corpus(corpus, out)
    write_manifest(args, "gen-data", config, _config_inputs(args), {"corpus": out})
    print(f"wrote {len(corpus.records)} cases to {out}")
    return 0


def cmd_pretrain(args) -> int:
    config = resolve_config(args)
    corpus_path, corpus, (tr, _, _), vocab = _load_world(args, config)
    knobs = config["embedding"]
    table = train_skipgram(
        Corpus(records=[corpus.records[i] for i in tr]),
        vocab,
        dim=config["model"]["embedding_dim"],
        seed=derive_seed(config["seed"], "embedding"),
        **{k: knobs[k] for k in _EMBEDDING_KNOBS if k in knobs},
    )
    table = dataclasses.replace(table, corpus_hash=file_sha256(corpus_path))
    out = _artifact(args, "out", "embeddings.bin")
    save_table(table, out)
    write_manifest(
        args,
        "pretrain-embeddings",
        config,
        {"corpus": corpus_path, **_config_inputs(args)},
        {"embeddings": out},
    )
    print(f"wrote {table.vectors.shape[0]}x{table.dim} embeddings to {out}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    corpus_path, corpus, (tr, va, _), vocab = _load_world(args, config)
    cfg = model_config(config, vocab_size=len(vocab))

    pretrained = None
    inputs = {"corpus": corpus_path, **_config_inputs(args)}
    if args.embeddings:
        pretrained = load_table(args.embeddings)
        if pretrained.corpus_hash and pretrained.corpus_hash != file_sha256(corpus_path):
            raise ConfigError("embeddings were pretrained on a different corpus file")
        inputs["embeddings"] = Path(args.embeddings)

    params = init_params(cfg, seed=derive_seed(config["seed"], "init"), pretrained=pretrained)
    params.corpus_hash = file_sha256(corpus_path)
    train_set = _encode_split(corpus, tr, vocab, cfg.max_len)
    val_set = _encode_split(corpus, va, vocab, cfg.max_len)
    history = train(
        params, train_set, val_set, hyper_params(config), seed=derive_seed(config["seed"], "train")
    )

    model_path = _artifact(args, "model", "model.bin")
    vocab_path = _artifact(args, "vocab", "vocab.json")
    save_model(params, model_path)
    vocab.save(vocab_path)
    last = history.epochs[-1]
    write_manifest(
        args,
        "train",
        config,
        inputs,
        {"model": model_path, "vocab": vocab_path},
        extra={"epochs": [dataclasses.asdict(e) for e in history.epochs]},
    )
    print(
        f"trained {cfg.arch} for {len(history.epochs)} epochs: "
        f"train loss {last.train_loss:.4f}, val macro F1 {last.val_macro_f1:.4f}"
    )
    print(f"wrote model to {model_path}")
    return 0


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    corpus_path, corpus, indices, vocab, model_path, params = _load_trained(args, config)
    by_name = dict(zip(("train", "val", "test"), indices))
    cases = _encode_split(corpus, by_name[args.split], vocab, params.config.max_len)
    metrics = evaluate(params, cases, threshold=args.confidence_threshold)

    out = _artifact(args, "out", "metrics.json")
    write_json(metrics.to_dict(), out)
    write_manifest(
        args,
        "evaluate",
        config,
        {"corpus": corpus_path, "model": model_path, **_config_inputs(args)},
        {"metrics": out},
        extra={"split": args.split, "confidence_threshold": args.confidence_threshold},
    )
    print(render_metrics_table([(args.split, metrics)]))
    if args.confidence_threshold is not None:
        print(f"discarded {1.0 - metrics.retained_fraction:.1%} of cases below the threshold")
    return 0


def cmd_grid_search(args) -> int:
    config = resolve_config(args)
    corpus_path, corpus, (tr, va, _), vocab = _load_world(args, config)
    with open(args.grid, encoding="utf-8") as fh:
        grid = json.load(fh)
    if not isinstance(grid, dict):
        raise ConfigError("grid file must hold an object of lists")
    cfg = model_config(config, vocab_size=len(vocab))
    rows = grid_search(
        cfg,
        _encode_split(corpus, tr, vocab, cfg.max_len),
        _encode_split(corpus, va, vocab, cfg.max_len),
        hyper_params(config),
        grid,
        seed=derive_seed(config["seed"], "grid"),
    )
    out = _artifact(args, "out", "grid_search.json")
    write_json(rows, out)
    write_manifest(
        args,
        "grid-search",
        config,
        {"corpus": corpus_path, "grid": Path(args.grid), **_config_inputs(args)},
        {"results": out},
    )
    best = rows[0]
    print(f"{len(rows)} combinations; best val macro F1 {best['val_macro_f1']:.4f}: {best['combo']}")
    return 0


def cmd_score_symptoms(args) -> int:
    config = resolve_config(args)
    corpus_path, corpus, indices, vocab, model_path, params = _load_trained(args, config)
    by_name = dict(zip(("train", "val", "test"), indices))
    records = [corpus.records[i] for i in by_name[args.split]]
    scores = score_features(params, records, vocab, args.class_name, gram_size=args.gram)

    out = _artifact(args, "out", f"scores_{args.class_name}_{args.gram}gram.json")
    write_json([s.to_dict() for s in scores], out)
    write_manifest(
        args,
        "score-symptoms",
        config,
        {"corpus": corpus_path, "model": model_path, **_config_inputs(args)},
        {"scores": out},
        extra={"class": args.class_name, "gram": args.gram, "split": args.split},
    )
    print(render_score_table(scores, top=args.top))
    return 0


def cmd_pairs(args) -> int:
    config = resolve_config(args)
    corpus_path, corpus, indices, vocab, model_path, params = _load_trained(args, config)
    by_name = dict(zip(("train", "val", "test"), indices))
    records = [corpus.records[i] for i in by_name[args.split]]
    unigrams = score_features(params, records, vocab, args.class_name, gram_size=1)
    bigrams = score_features(params, records, vocab, args.class_name, gram_size=2)
    pairs = pair_synergy(unigrams, bigrams)

    out = _artifact(args, "out", f"pairs_{args.class_name}.json")
    write_json([p.to_dict() for p in pairs], out)
    write_manifest(
        args,
        "pairs",
        config,
        {"corpus": corpus_path, "model": model_path, **_config_inputs(args)},
        {"pairs": out},
        extra={"class": args.class_name, "split": args.split},
    )
    print(render_pair_table(pairs, top=args.top))
    return 0


def cmd_drop_experiment(args) -> int:
    config = resolve_config(args)
    corpus_path, corpus, (tr, _, te), vocab, model_path, params = _load_trained(args, config)
    rows = drop_experiment(
        params,
        [corpus.records[i] for i in tr],
        [corpus.records[i] for i in te],
        vocab,
        max_drops=args.drops,
        class_name=args.class_name,
        seed=derive_seed(config["seed"], "drop"),
    )
    out = _artifact(args, "out", "drop_experiment.json")
    write_json([r.to_dict() for r in rows], out)
    write_manifest(
        args,
        "drop-experiment",
        config,
        {"corpus": corpus_path, "model": model_path, **_config_inputs(args)},
        {"results": out},
        extra={"drops": args.drops, "class": args.class_name},
    )
    print(render_metrics_table([(r.label, r.metrics) for r in rows]))
    return 0


def cmd_explain(args) -> int:
    config = resolve_config(args)
    corpus_path, corpus, _, vocab, model_path, params = _load_trained(args, config)
    if params.config.arch != "acnn":
        raise ConfigError("explain needs a model with attention pooling")
    try:
        ids = [int(c) for c in args.case_ids.split(",") if c.strip() != ""]
    except ValueError:
        raise ConfigError(f"case ids must be integers, got {args.case_ids!r}")
    if not ids:
        raise ConfigError("no case ids given")
    bad = [i for i in ids if not 0 <= i < len(corpus.records)]
    if bad:
        raise ConfigError(f"case ids out of range for {len(corpus.records)} records: {bad}")

    sections = []
    for i in ids:
        rec = corpus.records[i]
        pred = predict(params, encode(rec, vocab, params.config.max_len))
        shown = rec.tokens[: pred.attention.n_tokens]
        caption = (
            f"case {i}: true={rec.label} predicted={LABELS[pred.predicted]}"
            f" p={pred.probs[pred.predicted]:.2f}"
        )
        if args.format == "ansi":
            sections.append(caption + "\n" + render_heatmap(shown, pred.attention, fmt="ansi"))
        else:
            sections.append(
                f"<h3>{html.escape(caption)}</h3>\n"
                + render_heatmap(shown, pred.attention, fmt="html")
            )

    if args.format == "ansi":
        print("\n\n".join(sections))
        write_manifest(
            args,
            "explain",
            config,
            {"corpus": corpus_path, "model": model_path, **_config_inputs(args)},
            {},
            extra={"cases": ids, "format": args.format},
        )
        return 0

    out = _artifact(args, "out", "heatmaps.html")
    document = (
        "<!doctype html>\n"
        '<html><head><meta charset="utf-8"><title>attention heatmaps</title></head>\n'
        "<body>\n" + "\n".join(sections) + "\n</body></html>\n"
    )
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(document)
    write_manifest(
        args,
        "explain",
        config,
        {"corpus": corpus_path, "model": model_path, **_config_inputs(args)},
        {"heatmaps": out},
        extra={"cases": ids, "format": args.format},
    )
    print(f"wrote {len(ids)} heatmaps to {out}")
    return 0


# -- parser -------------------------------------------------------------------


def _add_common(sub) -> None:
    sub.add_argument("--config", help="JSON config file; flags override its values")
    sub.add_argument("--out-dir", help="directory for artifacts and manifests (default: . "
                                       "or $TRIAGENET_OUT_DIR)")
    sub.add_argument("--seed", type=int, help="root seed, split per subsystem")


def _add_model_inputs(sub) -> None:
    sub.add_argument("--corpus", help="corpus JSONL path (default: <out-dir>/corpus.jsonl)")
    sub.add_argument("--model", help="model file path (default: <out-dir>/model.bin)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triagenet",
        description="Explainable neural triage: synthetic data, training, "
        "attention-based warning-symptom detection.",
    )
    parser.add_argument("--version", action="version", version=f"triagenet {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("gen-data", help="generate a synthetic triage corpus")
    _add_common(sub)
    sub.add_argument("--cases", type=int, help="number of case records")
    sub.add_argument("--mode", choices=("symptoms", "fulltext"), help="token stream style")
    sub.add_argument("--out", help="corpus output path")
    sub.set_defaults(func=cmd_gen_data)

    sub = commands.add_parser("pretrain-embeddings", help="train skip-gram vectors on the train split")
    _add_common(sub)
    sub.add_argument("--corpus", help="corpus JSONL path")
    sub.add_argument("--out", help="embeddings output path")
    sub.set_defaults(func=cmd_pretrain)

    sub = commands.add_parser("train", help="train a classifier")
    _add_common(sub)
    sub.add_argument("--corpus", help="corpus JSONL path")
    sub.add_argument("--arch", choices=("acnn", "kimcnn"), help="attention or max pooling")
    sub.add_argument("--embeddings", help="pretrained embeddings file")
    sub.add_argument("--model", help="model output path")
    sub.add_argument("--vocab", help="vocabulary output path")
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser("evaluate", help="metrics on a held-out split")
    _add_common(sub)
    _add_model_inputs(sub)
    sub.add_argument("--split", choices=("train", "val", "test"), default="test")
    sub.add_argument(
        "--confidence-threshold",
        type=float,
        help="discard predictions whose top probability is below this",
    )
    sub.add_argument("--out", help="metrics JSON output path")
    sub.set_defaults(func=cmd_evaluate)

    sub = commands.add_parser("grid-search", help="sweep hyperparameter combinations")
    _add_common(sub)
    sub.add_argument("--corpus", help="corpus JSONL path")
    sub.add_argument("--grid", required=True, help="JSON file mapping knob name to value list")
    sub.add_argument("--out", help="results JSON output path")
    sub.set_defaults(func=cmd_grid_search)

    sub = commands.add_parser("score-symptoms", help="rank n-gram features by attention")
    _add_common(sub)
    _add_model_inputs(sub)
    sub.add_argument("--class", dest="class_name", choices=LABELS, default="urgent_care")
    sub.add_argument("--gram", type=int, choices=(1, 2), default=1)
    sub.add_argument("--split", choices=("train", "val", "test"), default="train")
    sub.add_argument("--top", type=int, default=20, help="rows to print (file holds all)")
    sub.add_argument("--out", help="score table JSON output path")
    sub.set_defaults(func=cmd_score_symptoms)

    sub = commands.add_parser("pairs", help="bigrams scoring above both member tokens")
    _add_common(sub)
    _add_model_inputs(sub)
    sub.add_argument("--class", dest="class_name", choices=LABELS, default="urgent_care")
    sub.add_argument("--split", choices=("train", "val", "test"), default="train")
    sub.add_argument("--top", type=int, default=20)
    sub.add_argument("--out", help="pair table JSON output path")
    sub.set_defaults(func=cmd_pairs)

    sub = commands.add_parser("drop-experiment", help="re-evaluate after deleting ranked tokens")
    _add_common(sub)
    _add_model_inputs(sub)
    sub.add_argument("--drops", type=int, choices=(1, 2), default=1)
    sub.add_argument("--class", dest="class_name", choices=LABELS, default="urgent_care")
    sub.add_argument("--out", help="results JSON output path")
    sub.set_defaults(func=cmd_drop_experiment)

    sub = commands.add_parser("explain", help="attention heatmaps for chosen cases")
    _add_common(sub)
    _add_model_inputs(sub)
    sub.add_argument("--cases", dest="case_ids", required=True,
                     help="comma-separated record indices")
    sub.add_argument("--format", choices=("html", "ansi"), default="html")
    sub.add_argument("--out", help="HTML output path (html format only)")
    sub.set_defaults(func=cmd_explain)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: no such file: {e.filename}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as e:
        print(f"error: malformed JSON: {e}", file=sys.stderr)
        return 1
    except _USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
