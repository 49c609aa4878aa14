"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (bench_preprocessing, expressiveness_demo, export_attention, model_grad_check,
                       write_bench_csv)
from .chem import parse_smiles
from .data import Standardizer, load_csv, random_split, scaffold_split
from .errors import (CheckpointError, ConfigError, EmptyDatasetError, HeaderError, NonFiniteError,
                     SacaError, SingleClassError, SmilesError, VocabSyntaxError)
from .model import SacaConfig, SacaModel
from .substructure import default_vocabulary, detect_keys, load_vocabulary
from .tensor import load_tensors
from .train import HyperParams, evaluate, pretrain_descriptors, random_search, train

GRADCHECK_TOL = 1e-5
# keys accepted by --config files and --set, beyond the model and optimizer fields
RUN_KEYS = {"split": "scaffold", "frac_train": 0.8, "frac_val": 0.1, "frac_test": 0.1, "budget": 10}
HP_KEYS = ("lr", "weight_decay", "batch_size", "epochs", "eps")
DATA_ERRORS = (SmilesError, HeaderError, EmptyDatasetError, CheckpointError, SingleClassError,
               VocabSyntaxError, OSError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=100, max_help_position=32)


# ----------------------------------------------------------------------------
# Configuration


def _coerce(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_pairs(lines, source):
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(value)
    return out


def resolve_config(args):
    """Built-in defaults < config file < --set overrides; unknown keys rejected."""
    settings = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        settings.update(parse_pairs(path.read_text().splitlines(), str(path)))
    settings.update(parse_pairs(args.set or [], "--set"))
    model_keys = {f.name for f in fields(SacaConfig)}
    known = model_keys | set(HP_KEYS) | set(RUN_KEYS)
    unknown = set(settings) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = {k: v for k, v in settings.items() if k in model_keys}
    hp = {k: v for k, v in settings.items() if k in HP_KEYS}
    run = {**RUN_KEYS, **{k: v for k, v in settings.items() if k in RUN_KEYS}}
    return model, hp, run


def _dtype(args):
    return np.float32 if args.precision == "f32" else np.float64


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SACA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"SACA_THREADS must be an integer, got {env!r}") from None
    return 1


def _vocab(spec):
    if spec in (None, "default"):
        return default_vocabulary()
    return load_vocabulary(spec)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(entry):
    val = entry["val_metric"]
    print(f"epoch {entry['epoch']:4d}  train_loss {entry['train_loss']:.6f}  "
          f"val {'n/a' if val is None else format(val, '.6f')}", file=sys.stderr)


def _split(ds, run, seed):
    fracs = (run["frac_train"], run["frac_val"], run["frac_test"])
    if run["split"] == "scaffold":
        return scaffold_split(ds, fracs, seed)
    if run["split"] == "random":
        return random_split(len(ds), fracs, seed)
    raise ConfigError(f"split must be 'scaffold' or 'random', got {run['split']!r}")


# ----------------------------------------------------------------------------
# Subcommands


def cmd_parse(args):
    for smi in args.smiles:
        g = parse_smiles(smi, keep_largest=args.keep_largest)
        doc = {"smiles": smi, "num_atoms": g.num_atoms, "num_bonds": g.num_bonds, **g.to_dict()}
        print(json.dumps(doc))
    return 0


def cmd_keys(args):
    vocab = _vocab(args.vocab)
    for smi in args.smiles:
        kv = detect_keys(vocab, parse_smiles(smi))
        if args.json:
            print(json.dumps({"smiles": smi, "bits": kv.to_csv_row().replace(",", ""),
                              "keys": [vocab.names[i] for i in kv.present_indices]}))
            continue
        print(smi)
        print("bits " + kv.to_csv_row().replace(",", ""))
        for i in kv.present_indices:
            print(f"{vocab.names[i]}=1")
    return 0


def cmd_featurize(args):
    vocab = _vocab(args.vocab)
    ds = load_csv(args.csv, vocab)
    out = _out_dir(args)
    with open(out / "keys.csv", "w") as fh:
        fh.write("smiles," + ",".join(vocab.names) + "\n")
        for r in ds.records:
            fh.write(f"{r.smiles},{r.keys.to_csv_row()}\n")
    with open(out / "graphs.jsonl", "w") as fh:
        for r in ds.records:
            fh.write(json.dumps({"smiles": r.smiles, **r.graph.to_dict()}) + "\n")
    print(f"featurized {len(ds)} molecules, skipped {ds.skipped}", file=sys.stderr)
    return 0


def _build_model(args, model_cfg, vocab, ds):
    cfg = {"vocab_size": len(vocab.patterns), "task_dim": ds.task_dim, **model_cfg}
    if args.init:
        model = SacaModel.load(args.init)
        if model.config.vocab_size != len(vocab.patterns):
            raise ConfigError("checkpoint vocabulary size does not match --vocab")
        model.replace_head(ds.task_dim, cfg.get("head_layers"), seed=args.seed)
        if _dtype(args) != model.dtype:
            model.astype(_dtype(args))
        return model
    return SacaModel(SacaConfig.from_dict(cfg), seed=args.seed, dtype=_dtype(args))


def _hyper(args, hp_cfg, out, log_default):
    return HyperParams(seed=args.seed, threads=_threads(args),
                       log_path=args.log or str(out / log_default),
                       checkpoint_path=str(out / "checkpoint"), **hp_cfg)


def cmd_train(args):
    model_cfg, hp_cfg, run_cfg = resolve_config(args)
    vocab = _vocab(args.vocab)
    ds = load_csv(args.csv, vocab)
    out = _out_dir(args)
    split = _split(ds, run_cfg, args.seed)
    model = _build_model(args, model_cfg, vocab, ds)
    hp = _hyper(args, hp_cfg, out, "run.jsonl")
    run = train(model, ds, split, hp, progress=None if args.quiet else _progress)
    summary = {**run.summary(), "n_train": len(split.train), "n_val": len(split.val),
               "n_test": len(split.test), "skipped": ds.skipped}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    (out / "split.json").write_text(json.dumps(split.to_dict()))
    print(json.dumps(summary))
    return 0


def cmd_pretrain(args):
    model_cfg, hp_cfg, _ = resolve_config(args)
    vocab = _vocab(args.vocab)
    lines = Path(args.smiles_file).read_text().splitlines()
    if lines and lines[0].strip().lower().startswith("smiles"):
        lines = lines[1:]
    smiles = [ln.split(",")[0].strip() for ln in lines if ln.strip()]
    out = _out_dir(args)
    cfg = {"vocab_size": len(vocab.patterns), **model_cfg, "task_dim": 16}
    model = SacaModel(SacaConfig.from_dict(cfg), seed=args.seed, dtype=_dtype(args))
    hp = _hyper(args, hp_cfg, out, "pretrain.jsonl")
    run = pretrain_descriptors(model, smiles, vocab, hp)
    print(json.dumps(run.summary()))
    return 0


def cmd_eval(args):
    vocab = _vocab(args.vocab)
    ds = load_csv(args.csv, vocab)
    model = SacaModel.load(args.checkpoint)
    if model.config.task_dim != ds.task_dim:
        raise ConfigError("checkpoint head does not match the dataset's task count")
    _, meta = load_tensors(args.checkpoint)
    std = None
    if "standardizer" in meta and ds.task_kind != "binary":
        std = Standardizer(np.array(meta["standardizer"]["mean"]), np.array(meta["standardizer"]["std"]))
    metric = evaluate(model, ds, list(range(len(ds))), std)
    name = "roc_auc" if ds.task_kind == "binary" else "rmse"
    print(json.dumps({"metric": name, "value": None if np.isnan(metric) else metric, "n": len(ds)}))
    return 0


def cmd_search(args):
    model_cfg, hp_cfg, run_cfg = resolve_config(args)
    vocab = _vocab(args.vocab)
    ds = load_csv(args.csv, vocab)
    out = _out_dir(args)
    split = _split(ds, run_cfg, args.seed)
    budget = args.budget if args.budget is not None else run_cfg["budget"]

    def objective(point):
        cfg = {"vocab_size": len(vocab.patterns), "task_dim": ds.task_dim, **model_cfg,
               "dropout": point["dropout"], "head_layers": point["head_layers"]}
        model = SacaModel(SacaConfig.from_dict(cfg), seed=args.seed, dtype=_dtype(args))
        hp = HyperParams(**{**hp_cfg, "lr": point["lr"], "weight_decay": point["weight_decay"]},
                         seed=args.seed, threads=_threads(args))
        return train(model, ds, split, hp).best_val

    result = random_search(budget=budget, seed=args.seed, objective=objective,
                           maximize=ds.task_kind == "binary")
    (out / "search.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True))
    score = None if np.isnan(result.best_score) else result.best_score
    print(json.dumps({"best": result.best, "best_score": score}))
    return 0


def cmd_gradcheck(args):
    if args.precision != "f64":
        raise UsageError("gradcheck needs --precision f64")
    err, per_param = model_grad_check(seed=args.seed, smiles=args.smiles, eps=args.eps)
    print(f"max relative error {err:.3e} over {len(per_param)} parameter tensors")
    if err <= GRADCHECK_TOL:
        return 0
    print(f"gradient check failed: {err:.3e} > {GRADCHECK_TOL:g}", file=sys.stderr)
    return 3


def cmd_bench(args):
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if sizes != sorted(sizes) or min(sizes) < 1:
        raise UsageError("--sizes must be positive and ascending")
    records = bench_preprocessing(sizes, trials=args.trials)
    path = _out_dir(args) / "bench.csv"
    write_bench_csv(records, path)
    print(path)
    return 0


def cmd_wl_demo(args):
    print(json.dumps(expressiveness_demo(seed=args.seed), indent=1))
    return 0


def cmd_attn_dump(args):
    vocab = _vocab(args.vocab)
    g = parse_smiles(args.smiles)
    if args.checkpoint:
        model = SacaModel.load(args.checkpoint)
    else:
        model_cfg, _, _ = resolve_config(args)
        cfg = {"vocab_size": len(vocab.patterns), **model_cfg}
        model = SacaModel(SacaConfig.from_dict(cfg), seed=args.seed, dtype=_dtype(args))
    doc = export_attention(model, g, vocab, smiles=args.smiles)
    path = _out_dir(args) / "attention.json"
    path.write_text(json.dumps(doc))
    print(path)
    return 0


# ----------------------------------------------------------------------------
# Parser


def build_parser():
    common = Parser(add_help=False, formatter_class=_formatter)
    g = common.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", help="key=value file of model and training settings")
    g.add_argument("--set", metavar="KEY=VALUE", action="append",
                   help="override one setting (repeatable; wins over --config)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--threads", type=int, default=None,
                   help="data-parallel gradient workers (default $SACA_THREADS or 1)")
    g.add_argument("--precision", choices=("f32", "f64"), default="f64", help="float precision (default f64)")
    g.add_argument("--out", metavar="DIR", default="saca_out", help="output directory (default saca_out)")
    g.add_argument("--log", metavar="PATH", help="JSON-lines run log (default inside --out)")
    g.add_argument("--quiet", action="store_true", help="no progress lines on stderr")

    parser = Parser(prog="saca", description="Substructure-atom cross-attention molecular models.",
                    formatter_class=_formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           formatter_class=_formatter)
        p.set_defaults(func=fn)
        return p

    def vocab_arg(p):
        p.add_argument("--vocab", default="default", help="'default' or a vocabulary file")

    p = add("parse", cmd_parse, "print molecular graphs as JSON")
    p.add_argument("smiles", nargs="+")
    p.add_argument("--keep-largest", action="store_true", help="keep the largest fragment of dotted input")

    p = add("keys", cmd_keys, "print substructure key bits and present key names")
    p.add_argument("smiles", nargs="+")
    vocab_arg(p)
    p.add_argument("--json", action="store_true", help="one JSON object per molecule")

    p = add("featurize", cmd_featurize, "write key CSV and graph JSON-lines for a dataset")
    p.add_argument("csv")
    vocab_arg(p)

    p = add("train", cmd_train, "train on a smiles,<tasks...> CSV")
    p.add_argument("csv")
    vocab_arg(p)
    p.add_argument("--init", metavar="CKPT", help="start from a (pretrained) checkpoint, fresh head")

    p = add("pretrain", cmd_pretrain, "pretrain on graph descriptors of a SMILES list")
    p.add_argument("smiles_file")
    vocab_arg(p)

    p = add("eval", cmd_eval, "evaluate a checkpoint on a CSV")
    p.add_argument("csv")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    vocab_arg(p)

    p = add("search", cmd_search, "random hyperparameter search")
    p.add_argument("csv")
    p.add_argument("--budget", type=int, help="number of sampled configurations")
    vocab_arg(p)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of full-model gradients")
    p.add_argument("--smiles", default="CC(=O)NCO", help="test molecule (default CC(=O)NCO)")
    p.add_argument("--eps", type=float, default=1e-6, help="central-difference step (default 1e-6)")

    p = add("bench", cmd_bench, "time key detection and all-pairs shortest paths")
    p.add_argument("--sizes", default="32,64,128,256,512,1024", help="ascending atom counts")
    p.add_argument("--trials", type=int, default=3, help="timing repeats per size (median kept)")

    add("wl-demo", cmd_wl_demo, "WL-equivalence and key-collision expressiveness report")

    p = add("attn-dump", cmd_attn_dump, "write attention maps of one molecule as JSON")
    p.add_argument("smiles")
    p.add_argument("--checkpoint", metavar="CKPT", help="model checkpoint (default: fresh model)")
    vocab_arg(p)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"saca: error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteError as exc:
        print(f"saca: numeric failure: {exc}", file=sys.stderr)
        return 3
    except DATA_ERRORS as exc:
        print(f"saca: data error: {exc}", file=sys.stderr)
        return 2
    except SacaError as exc:
        print(f"saca: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
