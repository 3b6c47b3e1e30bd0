"""Command-line entry point tying corpus, retrieval, training and evaluation
into reproducible experiments.

Subcommands: synth, index, retrieve, train, generate, evaluate, sweep-k,
inspect-latent. Configuration comes from a plain key=value file (default path
via $MIXWAE_CONFIG) with flag overrides; the fully resolved configuration is
validated before any compute and its hash is echoed into every artifact.

Exit codes: 0 success, 2 usage error, 3 missing file, 4 config validation
failure, 1 any other runtime failure.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import torch

from . import corpus as corpus_mod
from .corpus import (SyntheticTaskSpec, generate_synthetic, load_jsonl,
                     save_jsonl, save_manifest, build_vocabulary,
                     attach_vocabulary, Vocabulary, tokenize)
from .retrieval import build_index, retrieve, save_index, load_index
from .seq_model import ModelConfig
from .model import ExemplarWae
from .curriculum import (CurriculumSchedule, Trainer, prepare_exemplars,
                         save_checkpoint, load_checkpoint, config_hash,
                         TrainState)
from .metrics import (SampleSet, evaluate_sample_sets, load_glove,
                      random_embeddings, MetricReport)

ENV_CONFIG = "MIXWAE_CONFIG"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4


class ConfigError(ValueError):
    """Invalid configuration (bad key, bad value, failed validation)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_EXTRA_DEFAULTS = {
    "bm25_k1": 1.2,
    "bm25_b": 0.75,
    "n_samples": 10,
    "min_count": 1,
    "max_vocab": 20000,
    "embedding_seed": 0,
    "metric_embedding_dim": 50,
}


def _default_config():
    conf = {}
    for f in dataclass_fields(ModelConfig):
        conf[f.name] = getattr(ModelConfig(), f.name)
    for f in dataclass_fields(CurriculumSchedule):
        conf[f.name] = getattr(CurriculumSchedule(), f.name)
    conf["n_prior_components"] = 0   # 0 -> derive k_exemplars + 1
    conf.update(_EXTRA_DEFAULTS)
    return conf


def _coerce(key, raw, like):
    try:
        if isinstance(like, bool):
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key {key}: cannot parse {raw!r}") from e


def read_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = raw
    return values


class RunConfig:
    """Resolved key-value configuration: defaults <- file <- flag overrides."""

    def __init__(self, config_path=None, overrides=None):
        conf = _default_config()
        path = config_path or os.environ.get(ENV_CONFIG)
        if path:
            file_values = read_config_file(path)
            for key, raw in file_values.items():
                if key not in conf:
                    raise ConfigError(f"unknown config key {key!r} in {path}")
                conf[key] = _coerce(key, raw, conf[key])
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in conf:
                raise ConfigError(f"unknown config key {key!r}")
            conf[key] = _coerce(key, value, conf[key])
        self.values = conf
        self.validate()

    def validate(self):
        c = self.values
        positive = ("hidden_size", "latent_dim", "embedding_dim", "ffn_hidden",
                    "batch_size", "max_decode_len", "max_utterance_len",
                    "max_context_turns", "n_samples")
        for key in positive:
            if c[key] <= 0:
                raise ConfigError(f"{key} must be positive (got {c[key]})")
        if c["k_exemplars"] < 0:
            raise ConfigError("k_exemplars must be >= 0")
        if not 0.0 <= c["bm25_b"] <= 1.0:
            raise ConfigError("bm25_b must lie in [0, 1]")
        if c["bm25_k1"] <= 0:
            raise ConfigError("bm25_k1 must be > 0")
        try:
            self.schedule()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def model_config(self, vocab_size):
        keys = {f.name for f in dataclass_fields(ModelConfig)}
        kwargs = {k: v for k, v in self.values.items() if k in keys}
        kwargs["vocab_size"] = vocab_size
        return ModelConfig(**kwargs)

    def schedule(self):
        keys = {f.name for f in dataclass_fields(CurriculumSchedule)}
        return CurriculumSchedule(
            **{k: v for k, v in self.values.items() if k in keys}).validate()

    def hash(self):
        return config_hash(self.values)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _require(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _overrides_from(args, keys):
    return {k: getattr(args, k, None) for k in keys}

_CONFIG_KEYS = tuple(_default_config())


def _add_config_flags(p):
    p.add_argument("--config", default=None,
                   help=f"key=value config file (default ${ENV_CONFIG})")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hidden-size", dest="hidden_size", type=int, default=None)
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int, default=None)
    p.add_argument("--ffn-hidden", dest="ffn_hidden", type=int, default=None)
    p.add_argument("--k", dest="k_exemplars", type=int, default=None)
    p.add_argument("--n-prior-components", dest="n_prior_components",
                   type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--critic-lr", dest="critic_lr", type=float, default=None)
    p.add_argument("--clip", dest="clip", type=float, default=None)
    p.add_argument("--critic-steps", dest="critic_steps", type=int, default=None)
    p.add_argument("--max-decode-len", dest="max_decode_len", type=int, default=None)
    p.add_argument("--posterior-sampling", dest="posterior_sampling",
                   choices=["weighted_sum", "categorical"], default=None)
    p.add_argument("--phase1-epochs", dest="phase1_epochs", type=int, default=None)
    p.add_argument("--phase2-epochs", dest="phase2_epochs", type=int, default=None)
    p.add_argument("--phase3-epochs", dest="phase3_epochs", type=int, default=None)
    p.add_argument("--patience", dest="patience", type=int, default=None)
    p.add_argument("--min-count", dest="min_count", type=int, default=None)
    p.add_argument("--max-vocab", dest="max_vocab", type=int, default=None)
    p.add_argument("--bm25-k1", dest="bm25_k1", type=float, default=None)
    p.add_argument("--bm25-b", dest="bm25_b", type=float, default=None)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    p.add_argument("--embedding-seed", dest="embedding_seed", type=int, default=None)
    p.add_argument("--metric-embedding-dim", dest="metric_embedding_dim",
                   type=int, default=None)


def _run_config(args):
    overrides = _overrides_from(args, _CONFIG_KEYS)
    if getattr(args, "learning_rate", None) is not None:
        lr = args.learning_rate
        for key in ("lr_phase1", "lr_phase2", "lr_phase3"):
            overrides[key] = lr
    if getattr(args, "skip_phase1", False):
        overrides["skip_phase1"] = True
    if getattr(args, "skip_phase2", False):
        overrides["skip_phase2"] = True
    if getattr(args, "no_curriculum", False):
        overrides["skip_all_curriculum"] = True
    if getattr(args, "no_exemplar", False):
        overrides["k_exemplars"] = 0
    return RunConfig(config_path=args.config, overrides=overrides)


def _ablation_tag(args):
    if getattr(args, "no_exemplar", False):
        return "w/o examplar"
    if getattr(args, "no_curriculum", False):
        return "w/o Curriculum"
    if getattr(args, "skip_phase1", False) and getattr(args, "skip_phase2", False):
        return "w/o I+II"
    if getattr(args, "skip_phase1", False):
        return "w/o I"
    if getattr(args, "skip_phase2", False):
        return "w/o II"
    return None


def train_run(run_conf, train_pairs, valid_pairs, out_dir, index=None,
              ablation_tag=None):
    """Shared train pipeline: vocab, exemplars, trainer. Returns the trainer."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary(train_pairs, min_count=run_conf.values["min_count"],
                             max_size=run_conf.values["max_vocab"],
                             embedding_dim=run_conf.values["embedding_dim"])
    attach_vocabulary(valid_pairs, vocab)
    vocab.save(out_dir / "vocab.txt")
    k = run_conf.values["k_exemplars"]
    exemplars = {}
    if k > 0:
        if index is None:
            index = build_index(train_pairs, k1=run_conf.values["bm25_k1"],
                                b=run_conf.values["bm25_b"])
        exemplars = prepare_exemplars(train_pairs, index, k, exclude_self=True)
        exemplars.update(prepare_exemplars(valid_pairs, index, k,
                                           exclude_self=True))
    model = ExemplarWae(run_conf.model_config(len(vocab)))
    trainer = Trainer(model, run_conf.schedule(), train_pairs, valid_pairs,
                      exemplars=exemplars, out_dir=out_dir,
                      ablation_tag=ablation_tag,
                      extra_echo={"run_config": run_conf.values,
                                  "config_hash": run_conf.hash(),
                                  "vocab": [vocab.id2token[i]
                                            for i in range(len(vocab))]})
    trainer.run_curriculum()
    return trainer


def _vocab_from_checkpoint(payload, vocab_path=None):
    echo = payload.get("run_config") or {}
    tokens = echo.get("vocab")
    if tokens:
        return Vocabulary(tokens[4:],
                          embedding_dim=payload["config"]["embedding_dim"])
    if vocab_path:
        return Vocabulary.load(_require(vocab_path))
    raise FileNotFoundError(
        "checkpoint carries no vocabulary; pass --vocab explicitly")


def generate_samples(model, vocab, pairs, n_samples, seed, mode="greedy"):
    """SampleSets for each pair via the prior path, fresh noise per sample."""
    rng = torch.Generator().manual_seed(seed)
    sets = []
    for pair in pairs:
        seqs = model.sample_responses(pair, n_samples, rng, mode=mode)
        samples = [vocab.decode(s) or ["<unk>"] for s in seqs]
        sets.append(SampleSet(context_id=pair.pair_id, samples=samples,
                              reference=pair.response.surface_tokens()))
    return sets


def _metric_embeddings(args, sample_sets):
    if getattr(args, "embeddings", None):
        return load_glove(_require(args.embeddings))
    tokens = set()
    for ss in sample_sets:
        tokens.update(ss.reference)
        for s in ss.samples:
            tokens.update(s)
    seed = getattr(args, "embedding_seed", None) or 0
    dim = getattr(args, "metric_embedding_dim", None) or 50
    return random_embeddings(tokens, dim=dim, seed=seed)


def _write_report(report, conf_hash, json_path=None, csv_path=None):
    payload = {"config_hash": conf_hash, **report.to_dict()}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if json_path:
        Path(json_path).write_text(text + "\n")
    print(text)
    if csv_path:
        new = not Path(csv_path).exists()
        with open(csv_path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["config_hash", *MetricReport.FIELDS, "n_contexts"])
            w.writerow([conf_hash] +
                       [f"{getattr(report, n):.6f}" for n in MetricReport.FIELDS] +
                       [report.n_contexts])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    spec = SyntheticTaskSpec(n_contexts=args.n_contexts,
                             modes_per_context=args.modes,
                             noise_rate=args.noise, seed=args.seed,
                             pairs_per_context=args.pairs_per_context)
    train, valid, test, manifest = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(train, out / "train.jsonl")
    save_jsonl(valid, out / "valid.jsonl")
    save_jsonl(test, out / "test.jsonl")
    save_manifest(manifest, out / "manifest.json")
    print(f"wrote {len(train)}/{len(valid)}/{len(test)} train/valid/test pairs to {out}")
    return EXIT_OK


def cmd_index(args):
    pairs = load_jsonl(_require(args.train))
    index = build_index(pairs, k1=args.bm25_k1 or 1.2, b=args.bm25_b
                        if args.bm25_b is not None else 0.75)
    save_index(index, args.out)
    print(f"indexed {index.size} contexts -> {args.out}")
    return EXIT_OK


def cmd_retrieve(args):
    index = load_index(_require(args.index))
    queries = load_jsonl(_require(args.input))
    w = csv.writer(sys.stdout, delimiter="\t")
    w.writerow(["query_pair_id", "rank", "pair_id", "score"])
    for q in queries:
        result = retrieve(index, q, args.k, exclude_self=not args.include_self)
        for rank, (pair, score) in enumerate(result.exemplars, 1):
            w.writerow([q.pair_id, rank, pair.pair_id, f"{score:.6f}"])
    return EXIT_OK


def cmd_train(args):
    run_conf = _run_config(args)
    train_pairs = load_jsonl(_require(args.train))
    valid_pairs = load_jsonl(_require(args.valid)) if args.valid else []
    index = load_index(_require(args.index)) if args.index else None
    trainer = train_run(run_conf, train_pairs, valid_pairs, args.out,
                        index=index, ablation_tag=_ablation_tag(args))
    print(f"training done: phase={trainer.state.phase} "
          f"steps={trainer.state.global_step} "
          f"valid_nll={trainer.state.final_valid_nll:.4f}")
    return EXIT_OK


def cmd_generate(args):
    model, payload = load_checkpoint(_require(args.checkpoint))
    vocab = _vocab_from_checkpoint(payload, args.vocab)
    pairs = load_jsonl(_require(args.input))
    attach_vocabulary(pairs, vocab)
    n = args.n_samples or 10
    sets = generate_samples(model, vocab, pairs, n, seed=args.seed or 0,
                            mode=args.mode)
    with open(args.out, "w", encoding="utf-8") as f:
        meta = {"meta": {"config_hash": payload["config_hash"],
                         "n_samples": n, "mode": args.mode}}
        f.write(json.dumps(meta, sort_keys=True) + "\n")
        for pair, ss in zip(pairs, sets):
            f.write(json.dumps({
                "pair_id": pair.pair_id,
                "context": [u.raw_text for u in pair.context],
                "reference": pair.response.raw_text,
                "samples": [" ".join(s) for s in ss.samples],
            }, ensure_ascii=False, sort_keys=True) + "\n")
    print(f"wrote samples for {len(sets)} contexts to {args.out}")
    return EXIT_OK


def _sample_sets_from_file(path):
    sets, conf_hash = [], "unknown"
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "meta" in obj:
                conf_hash = obj["meta"].get("config_hash", conf_hash)
                continue
            sets.append(SampleSet(
                context_id=obj["pair_id"],
                samples=[tokenize(s) or ["<unk>"] for s in obj["samples"]],
                reference=tokenize(obj["reference"])))
    return sets, conf_hash


def cmd_evaluate(args):
    if args.samples:
        sets, conf_hash = _sample_sets_from_file(_require(args.samples))
    elif args.checkpoint:
        if not args.input:
            raise ConfigError("evaluate --checkpoint also needs --input")
        model, payload = load_checkpoint(_require(args.checkpoint))
        vocab = _vocab_from_checkpoint(payload, args.vocab)
        pairs = load_jsonl(_require(args.input))
        attach_vocabulary(pairs, vocab)
        sets = generate_samples(model, vocab, pairs, args.n_samples or 10,
                                seed=args.seed or 0, mode=args.mode)
        conf_hash = payload["config_hash"]
    else:
        raise ConfigError("evaluate needs --samples or --checkpoint")
    embeddings = _metric_embeddings(args, sets)
    report = evaluate_sample_sets(sets, embeddings,
                                  pooled_inter=args.pooled_inter)
    _write_report(report, conf_hash, json_path=args.out, csv_path=args.csv)
    return EXIT_OK


def cmd_sweep_k(args):
    run_conf = _run_config(args)
    train_pairs = load_jsonl(_require(args.train))
    valid_pairs = load_jsonl(_require(args.valid)) if args.valid else []
    test_pairs = load_jsonl(_require(args.test))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = args.k_min, args.k_max
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad k range [{lo}, {hi}]")
    csv_path = out / "sweep_k.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", *MetricReport.FIELDS, "n_contexts"])
        for k in range(lo, hi + 1):
            conf = RunConfig(config_path=args.config,
                             overrides={**run_conf.values, "k_exemplars": k,
                                        "n_prior_components": 0})
            trainer = train_run(conf, [p for p in train_pairs],
                                [p for p in valid_pairs], out / f"k{k}")
            vocab_tokens = trainer.extra_echo["vocab"]
            vocab = Vocabulary(vocab_tokens[4:],
                               embedding_dim=conf.values["embedding_dim"])
            eval_pairs = [p for p in test_pairs]
            attach_vocabulary(eval_pairs, vocab)
            sets = generate_samples(trainer.model, vocab, eval_pairs,
                                    conf.values["n_samples"],
                                    seed=conf.values["seed"])
            embeddings = _metric_embeddings(args, sets)
            report = evaluate_sample_sets(sets, embeddings)
            w.writerow([k] +
                       [f"{getattr(report, n):.6f}" for n in MetricReport.FIELDS] +
                       [report.n_contexts])
            f.flush()
            print(f"k={k} done")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_inspect_latent(args):
    model, payload = load_checkpoint(_require(args.checkpoint))
    vocab = _vocab_from_checkpoint(payload, args.vocab)
    pairs = load_jsonl(_require(args.input))
    attach_vocabulary(pairs, vocab)
    idx = args.pair_index
    if not (0 <= idx < len(pairs)):
        raise ConfigError(f"pair index {idx} out of range")
    pair = pairs[idx]
    model.eval()
    with torch.no_grad():
        h_c = model.encode_context_batch([[u.tokens for u in pair.context]])
        spec = model.prior(h_c)
    out = {"pair_id": pair.pair_id, "config_hash": payload["config_hash"],
           "prior": spec.summary()}
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mixwae",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic multimodal corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-contexts", type=int, default=100)
    s.add_argument("--modes", type=int, default=3)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pairs-per-context", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("index", help="build and persist a BM25 index")
    s.add_argument("--train", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bm25-k1", dest="bm25_k1", type=float, default=None)
    s.add_argument("--bm25-b", dest="bm25_b", type=float, default=None)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("retrieve", help="print top-k exemplars as TSV")
    s.add_argument("--index", required=True)
    s.add_argument("--input", required=True, help="query pairs (JSONL)")
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--include-self", action="store_true")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("train", help="run the three-phase curriculum")
    s.add_argument("--train", required=True)
    s.add_argument("--valid", default=None)
    s.add_argument("--index", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--skip-phase1", action="store_true")
    s.add_argument("--skip-phase2", action="store_true")
    s.add_argument("--no-curriculum", action="store_true")
    s.add_argument("--no-exemplar", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample responses via the prior path")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--vocab", default=None)
    s.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    s.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="score samples with the metric suite")
    s.add_argument("--samples", default=None)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--input", default=None)
    s.add_argument("--vocab", default=None)
    s.add_argument("--out", default=None, help="report JSON path")
    s.add_argument("--csv", default=None, help="append a CSV row here")
    s.add_argument("--embeddings", default=None, help="GloVe-format text file")
    s.add_argument("--embedding-seed", dest="embedding_seed", type=int, default=None)
    s.add_argument("--metric-embedding-dim", dest="metric_embedding_dim",
                   type=int, default=None)
    s.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    s.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--pooled-inter", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep-k", help="train/evaluate across a range of k")
    s.add_argument("--train", required=True)
    s.add_argument("--valid", default=None)
    s.add_argument("--test", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k-min", type=int, default=1)
    s.add_argument("--k-max", type=int, default=5)
    s.add_argument("--embeddings", default=None)
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep_k)

    s = sub.add_parser("inspect-latent", help="dump a prior mixture summary")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--vocab", default=None)
    s.add_argument("--pair-index", type=int, default=0)
    s.set_defaults(func=cmd_inspect_latent)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except Exception as e:  # single-line diagnostic, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
