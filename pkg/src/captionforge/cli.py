"""Command-line entry point.

One declarative option table drives both argparse and the JSON config
file, so flags and config keys stay one-to-one. Precedence: built-in
defaults, then the config file (``--config`` or $CAPTIONFORGE_CONFIG),
then explicit flags. Exit codes: 0 success, 1 usage, 2 data/format,
3 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, DivergenceError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3
CONFIG_ENV = "CAPTIONFORGE_CONFIG"
CONFIG_VERSION = 1


class Opt:
    def __init__(self, flag, section, type_, default, help_, required=False):
        self.flag = flag  # e.g. "batch-size"
        self.section = section
        self.key = flag.replace("-", "_")
        self.type = type_
        self.default = default
        self.help = help_
        self.required = required


_GLOBAL = [
    Opt("seed", "run", int, None, "global rng seed (mandatory for synth/train)"),
    Opt("threads", "run", int, 1, "BLAS/OpenMP thread cap"),
    Opt("out", "run", str, None, "output file or directory"),
]

_MODEL = [
    Opt("preset", "model", str, None, "architecture preset: msvd_vanilla, msvd_universal, activitynet_universal"),
    Opt("variant", "model", str, "vanilla", "vanilla or universal"),
    Opt("layers", "model", int, 2, "encoder/decoder layers (vanilla) or shared-layer steps (universal)"),
    Opt("d-model", "model", int, 32, "model width"),
    Opt("heads", "model", int, 2, "attention heads"),
    Opt("d-ff", "model", int, 128, "feedforward width"),
    Opt("dropout", "model", float, 0.0, "training dropout rate"),
    Opt("max-decode-len", "model", int, 20, "generation length cap"),
    Opt("encoder-positions", "model", bool, True, "add sinusoidal positions to encoder inputs"),
    Opt("act", "model", bool, False, "enable adaptive halting (universal only)"),
    Opt("act-epsilon", "model", float, 0.01, "halting slack"),
    Opt("act-max-steps", "model", int, 8, "halting step cap"),
    Opt("act-ponder-weight", "model", float, 0.01, "ponder penalty coefficient"),
]

_OPTS = {
    "synth": _GLOBAL
    + [
        Opt("classes", "synth", int, 8, "video classes"),
        Opt("videos-per-class", "synth", int, 10, "videos per class"),
        Opt("templates", "synth", int, 3, "caption templates per class"),
        Opt("captions-per-video", "synth", int, 1, "caption paraphrases per video"),
        Opt("dense", "synth", bool, False, "emit 3-4 sentence paragraphs"),
        Opt("dim", "synth", int, 32, "feature dimension"),
        Opt("rows-min", "synth", int, 4, "minimum feature rows per video"),
        Opt("rows-max", "synth", int, 8, "maximum feature rows per video"),
        Opt("signal", "synth", float, 0.9, "class-signal strength in [0,1]"),
    ],
    "pca-fit": _GLOBAL
    + [
        Opt("manifest", "pca_fit", str, None, "dataset manifest", required=True),
        Opt("k", "pca_fit", int, 512, "components to keep"),
        Opt("split", "pca_fit", str, "train", "split whose rows are pooled"),
    ],
    "pca-apply": _GLOBAL
    + [
        Opt("pca-model", "pca_apply", str, None, "fitted .vpc file", required=True),
        Opt("manifest", "pca_apply", str, None, "dataset manifest", required=True),
    ],
    "train": _GLOBAL
    + _MODEL
    + [
        Opt("manifest", "train", str, None, "dataset manifest", required=True),
        Opt("batch-size", "train", int, 64, "examples per optimizer step"),
        Opt("lr0", "train", float, 1e-4, "initial learning rate"),
        Opt("schedule", "train", str, "decay_0.98", "decay_0.98 or cosine_restarts"),
        Opt("warmup-steps", "train", int, 400, "cosine warmup steps"),
        Opt("restart-period", "train", int, 1000, "cosine restart period"),
        Opt("epochs", "train", int, 10, "training epochs"),
        Opt("grad-clip-norm", "train", float, 1.0, "global gradient-norm cap"),
        Opt("divergence-threshold", "train", float, 20.0, "abort when loss exceeds this"),
        Opt("max-len", "train", int, 20, "decoder sequence cap incl. <eos>"),
        Opt("min-count", "train", int, 1, "vocabulary frequency floor"),
    ],
    "decode": _GLOBAL
    + [
        Opt("checkpoint", "decode", str, None, "trained model checkpoint", required=True),
        Opt("manifest", "decode", str, None, "dataset manifest", required=True),
        Opt("split", "decode", str, "train", "split to decode"),
        Opt("beam", "decode", int, 1, "beam width; 1 is greedy"),
        Opt("alpha", "decode", float, 0.7, "beam length-normalization exponent"),
        Opt("min-count", "decode", int, 1, "vocabulary frequency floor (must match training)"),
    ],
    "eval": _GLOBAL
    + [
        Opt("decodes", "eval", str, None, "decode output file", required=True),
        Opt("manifest", "eval", str, None, "dataset manifest with references", required=True),
        Opt("split", "eval", str, "train", "split to score"),
        Opt("smooth", "eval", bool, False, "epsilon-smooth zero precisions"),
    ],
    "attrs-train": _GLOBAL
    + [
        Opt("manifest", "attrs", str, None, "dataset manifest", required=True),
        Opt("k", "attrs", int, 10, "number of attribute labels"),
        Opt("mode", "attrs", str, "elementwise", "pooling: elementwise or scored"),
        Opt("epochs", "attrs", int, 60, "training epochs"),
        Opt("lr", "attrs", float, 1e-2, "learning rate"),
        Opt("no-stoplist", "attrs", bool, False, "keep function words as labels"),
    ],
    "gradcheck": _GLOBAL,
    "inspect": _GLOBAL + [Opt("path", "inspect", str, None, "file to inspect", required=True)],
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; the contract here is 1
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="captionforge", description=__doc__)
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in _OPTS.items():
        sub = subs.add_parser(name, help=f"{name} workflow")
        sub.add_argument("--config", default=None, help=f"JSON config file (${CONFIG_ENV} as fallback)")
        for o in opts:
            if o.type is bool:
                sub.add_argument(f"--{o.flag}", default=None, action=argparse.BooleanOptionalAction, help=o.help)
            else:
                sub.add_argument(f"--{o.flag}", default=None, type=o.type, help=o.help)
    return parser


def _load_config_file(path):
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    if doc.get("version") != CONFIG_VERSION:
        raise UsageError(f"{path}: config version {doc.get('version')!r}, expected {CONFIG_VERSION}")
    _reject_unknown_keys(doc, path)
    return doc


def _reject_unknown_keys(doc, path):
    known_sections = {"version", "run"}
    known = {}
    for opts in _OPTS.values():
        for o in opts:
            known_sections.add(o.section)
            known.setdefault(o.section, set()).add(o.key)
    for section, body in doc.items():
        if section not in known_sections:
            raise UsageError(f"{path}: unknown config section {section!r}")
        if section == "version":
            continue
        for key in body:
            if key not in known.get(section, set()):
                raise UsageError(f"{path}: unknown key {section}.{key!r}")


class RunConfig:
    """Fully resolved option view for one invocation."""

    def __init__(self, command, args, file_cfg):
        self.command = command
        self._values = {}
        for o in _OPTS[command]:
            value = getattr(args, o.key, None)
            if value is None:
                value = file_cfg.get(o.section, {}).get(o.key, o.default)
            self._values[(o.section, o.key)] = value
            if o.required and value is None:
                raise UsageError(f"--{o.flag} is required for {command!r}")

    def __getitem__(self, section_key):
        return self._values[section_key]

    def get(self, section, key):
        return self._values[(section, key)]


def run(argv) -> int:
    """Dispatch one command; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        cfg = RunConfig(args.command, args, _load_config_file(getattr(args, "config", None)))
        _set_threads(cfg.get("run", "threads"))
        handler = _HANDLERS[args.command]
        return handler(cfg)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run(sys.argv[1:]))


def _set_threads(n):
    # must happen before numpy loads its BLAS; handlers import lazily
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n or 1)


def _require_seed(cfg) -> int:
    seed = cfg.get("run", "seed")
    if seed is None:
        raise UsageError(f"--seed is required for {cfg.command!r}")
    return int(seed)


def _require_out(cfg) -> Path:
    out = cfg.get("run", "out")
    if out is None:
        raise UsageError(f"--out is required for {cfg.command!r}")
    return Path(out)


# ---------------------------------------------------------------------------
# command handlers (heavy imports stay inside so --threads applies first)
# ---------------------------------------------------------------------------


def _cmd_synth(cfg) -> int:
    from .corpus import SynthSpec, synth_corpus

    seed = _require_seed(cfg)
    out = _require_out(cfg)
    spec = SynthSpec(
        n_classes=cfg.get("synth", "classes"),
        videos_per_class=cfg.get("synth", "videos_per_class"),
        templates_per_class=cfg.get("synth", "templates"),
        captions_per_video=cfg.get("synth", "captions_per_video"),
        dense=cfg.get("synth", "dense"),
        feature_dim=cfg.get("synth", "dim"),
        rows_range=(cfg.get("synth", "rows_min"), cfg.get("synth", "rows_max")),
        signal_strength=cfg.get("synth", "signal"),
    )
    records, manifest = synth_corpus(spec, seed, out)
    print(f"wrote {len(records)} videos to {manifest}")
    return EXIT_OK


def _cmd_pca_fit(cfg) -> int:
    from .corpus import load_manifest
    from .features import pca_fit, read_feature_file, write_pca_file

    out = _require_out(cfg)
    records = load_manifest(cfg.get("pca_fit", "manifest"))
    split = cfg.get("pca_fit", "split")
    matrices = [read_feature_file(r.feature_path) for r in records if r.split == split]
    if not matrices:
        raise DataError(f"no records in split {split!r}")
    model = pca_fit(matrices, cfg.get("pca_fit", "k"))
    write_pca_file(out, model)
    print(f"fit pca {model.input_dim}->{model.output_dim} on {sum(m.rows for m in matrices)} rows; wrote {out}")
    return EXIT_OK


def _cmd_pca_apply(cfg) -> int:
    from .corpus import load_manifest, save_manifest
    from .features import pca_apply, read_feature_file, read_pca_file, write_feature_file

    out = _require_out(cfg)
    model = read_pca_file(cfg.get("pca_apply", "pca_model"))
    manifest_path = Path(cfg.get("pca_apply", "manifest"))
    records = load_manifest(manifest_path)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    texts = {row["video_id"]: row["captions"] for row in raw["records"]}
    new_records = []
    for r in records:
        reduced = pca_apply(model, read_feature_file(r.feature_path))
        path = feat_dir / f"{r.video_id}.vfm"
        write_feature_file(path, reduced)
        r.feature_path = str(path)
        new_records.append(r)
    save_manifest(out / "manifest.json", new_records, texts)
    print(f"reduced {len(new_records)} videos to dim {model.output_dim}; wrote {out / 'manifest.json'}")
    return EXIT_OK


def _resolve_model_config(cfg, vocab_size: int, feature_dim: int):
    from .model import ActConfig, ModelConfig, preset

    name = cfg.get("model", "preset")
    if name:
        return preset(name, vocab_size)
    act = None
    if cfg.get("model", "act"):
        act = ActConfig(
            epsilon=cfg.get("model", "act_epsilon"),
            max_steps=cfg.get("model", "act_max_steps"),
            ponder_weight=cfg.get("model", "act_ponder_weight"),
        )
    return ModelConfig(
        variant=cfg.get("model", "variant"),
        n_layers_or_steps=cfg.get("model", "layers"),
        d_model=cfg.get("model", "d_model"),
        n_heads=cfg.get("model", "heads"),
        d_ff=cfg.get("model", "d_ff"),
        dropout=cfg.get("model", "dropout"),
        vocab_size=vocab_size,
        max_decode_len=cfg.get("model", "max_decode_len"),
        feature_dim=feature_dim,
        act=act,
        encoder_positions=cfg.get("model", "encoder_positions"),
    )


def _cmd_train(cfg) -> int:
    from .corpus import build_vocab, load_manifest
    from .features import read_feature_file
    from .training import TrainConfig, train

    seed = _require_seed(cfg)
    out = _require_out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    records = load_manifest(cfg.get("train", "manifest"))
    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        raise DataError("no records in the train split")
    vocab = build_vocab(train_records, min_count=cfg.get("train", "min_count"))
    feature_dim = read_feature_file(train_records[0].feature_path).dim
    model_config = _resolve_model_config(cfg, len(vocab), feature_dim)
    tc = TrainConfig(
        batch_size=cfg.get("train", "batch_size"),
        lr0=cfg.get("train", "lr0"),
        schedule=cfg.get("train", "schedule"),
        warmup_steps=cfg.get("train", "warmup_steps"),
        restart_period=cfg.get("train", "restart_period"),
        epochs=cfg.get("train", "epochs"),
        seed=seed,
        grad_clip_norm=cfg.get("train", "grad_clip_norm"),
        divergence_threshold=cfg.get("train", "divergence_threshold"),
        max_len=cfg.get("train", "max_len"),
        metrics_path=str(out / "metrics.csv"),
        checkpoint_path=str(out / "checkpoint.vck"),
    )
    _, metrics = train(records, vocab, model_config, tc)
    last = metrics[-1]
    print(f"trained {tc.epochs} epochs; final loss {last.loss:.4f}, token acc {last.token_acc:.4f}")
    print(f"checkpoint: {tc.checkpoint_path}")
    return EXIT_OK


def _cmd_decode(cfg) -> int:
    from .corpus import build_vocab, load_manifest
    from .decoding import beam_decode, greedy_decode, write_decodes
    from .features import read_feature_file
    from .model import load_checkpoint

    out = _require_out(cfg)
    params = load_checkpoint(cfg.get("decode", "checkpoint"))
    records = load_manifest(cfg.get("decode", "manifest"))
    vocab = build_vocab([r for r in records if r.split == "train"], min_count=cfg.get("decode", "min_count"))
    split = cfg.get("decode", "split")
    width = cfg.get("decode", "beam")
    alpha = cfg.get("decode", "alpha")
    decoded = {}
    for r in records:
        if r.split != split:
            continue
        feats = read_feature_file(r.feature_path).values
        ids = greedy_decode(params, feats) if width == 1 else beam_decode(params, feats, width, alpha)
        decoded[r.video_id] = vocab.decode(ids)
    if not decoded:
        raise DataError(f"no records in split {split!r}")
    write_decodes(out, decoded)
    print(f"decoded {len(decoded)} videos to {out}")
    return EXIT_OK


def _cmd_eval(cfg) -> int:
    from .corpus import SEP_TOKEN, load_manifest
    from .decoding import read_decodes
    from .evaluation import EvalPair, corpus_bleu, format_table, paragraph_bleu, write_report

    records = load_manifest(cfg.get("eval", "manifest"), check_features=False)
    split = cfg.get("eval", "split")
    refs = {r.video_id: r.captions for r in records if r.split == split}
    if not refs:
        raise DataError(f"no records in split {split!r}")
    decoded = read_decodes(cfg.get("eval", "decodes"))
    smooth = cfg.get("eval", "smooth")
    paragraph = any(SEP_TOKEN in cap for caps in refs.values() for cap in caps)
    if paragraph:
        ref_paragraphs = {vid: _split_sentences(caps[0]) for vid, caps in refs.items()}
        report = paragraph_bleu(decoded, ref_paragraphs, smooth=smooth)
    else:
        missing = sorted(set(refs) - set(decoded))
        if missing:
            raise DataError(f"decodes missing video ids: {missing}")
        pairs = [
            EvalPair(candidate=[t for s in decoded[vid] for t in s], references=refs[vid]) for vid in sorted(refs)
        ]
        report = corpus_bleu(pairs, smooth=smooth)
    print(format_table(report))
    out = cfg.get("run", "out")
    if out:
        write_report(out, report)
        print(f"report: {out}")
    return EXIT_OK


def _split_sentences(caption_tokens):
    from .corpus import SEP_TOKEN

    sentences = [[]]
    for tok in caption_tokens:
        if tok == SEP_TOKEN:
            sentences.append([])
        else:
            sentences[-1].append(tok)
    return [s for s in sentences if s]


def _cmd_attrs_train(cfg) -> int:
    from .attributes import (
        DEFAULT_STOPLIST,
        attribute_forward,
        build_head,
        frame_attention_pool,
        select_frequent_words,
        train_attributes,
        video_labels,
        write_attributes,
    )
    from .corpus import load_manifest
    from .features import read_feature_file

    seed = _require_seed(cfg)
    out = _require_out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    records = load_manifest(cfg.get("attrs", "manifest"))
    train_records = [r for r in records if r.split == "train"]
    stoplist = () if cfg.get("attrs", "no_stoplist") else DEFAULT_STOPLIST
    labels = select_frequent_words(train_records, k=cfg.get("attrs", "k"), stoplist=stoplist)
    feats = {r.video_id: read_feature_file(r.feature_path).values for r in train_records}
    examples = [(feats[r.video_id], video_labels(r, labels)) for r in train_records]
    head = build_head(labels, examples[0][0].shape[1], mode=cfg.get("attrs", "mode"), seed=seed)
    head, metrics = train_attributes(examples, head, epochs=cfg.get("attrs", "epochs"), lr=cfg.get("attrs", "lr"))
    rows = []
    for r in train_records:
        probs = attribute_forward(frame_attention_pool(feats[r.video_id], head.mode, head.score_w), head)
        rows.append((r.video_id, list(zip(labels, probs))))
    write_attributes(out / "attributes.jsonl", rows)
    last = metrics[-1]
    print(f"labels: {labels}")
    print(f"subset accuracy {last.subset_accuracy:.3f} after {len(metrics)} epochs; wrote {out / 'attributes.jsonl'}")
    return EXIT_OK


def _cmd_gradcheck(cfg) -> int:
    from .diagnostics import run_suite

    seed = cfg.get("run", "seed")
    results = run_suite(seed if seed is not None else 0)
    worst = max(err for _, err in results)
    for name, err in results:
        print(f"{name:24s} max rel err {err:.3e}")
    print(f"worst: {worst:.3e} (threshold 1e-05)")
    if worst > 1e-5:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _cmd_inspect(cfg) -> int:
    from .features import FEATURE_MAGIC, PCA_MAGIC, read_feature_file, read_pca_file
    from .model import CHECKPOINT_MAGIC, load_checkpoint, param_count

    path = Path(cfg.get("inspect", "path"))
    if not path.exists():
        raise DataError(f"no such file: {path}")
    magic = path.read_bytes()[:4]
    if magic == FEATURE_MAGIC:
        m = read_feature_file(path)
        print(f"feature file: {m.rows} x {m.dim}, dtype f32le, checksum ok")
    elif magic == PCA_MAGIC:
        p = read_pca_file(path)
        print(f"pca model: {p.input_dim} -> {p.output_dim}, eigenvalue range [{p.eigenvalues.min():.4g}, {p.eigenvalues.max():.4g}]")
    elif magic == CHECKPOINT_MAGIC:
        params = load_checkpoint(path)
        cd = params.config.to_dict()
        print(f"checkpoint: {json.dumps(cd, sort_keys=True)}")
        print(f"tensors: {len(params.tensors)}, scalars: {param_count(params.config)}")
    else:
        raise DataError(f"{path}: unrecognized magic {magic!r}")
    return EXIT_OK


_HANDLERS = {
    "synth": _cmd_synth,
    "pca-fit": _cmd_pca_fit,
    "pca-apply": _cmd_pca_apply,
    "train": _cmd_train,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "attrs-train": _cmd_attrs_train,
    "gradcheck": _cmd_gradcheck,
    "inspect": _cmd_inspect,
}


if __name__ == "__main__":
    main()
