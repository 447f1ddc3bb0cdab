"""Command-line entry point: ``embedkit <subcommand> [--config FILE] [flags]``.

Each subcommand has a nested JSON configuration with defaults; every leaf
key is also a flag (``learning_rate`` -> ``--learning-rate``). Values are
resolved as defaults < ``--config`` file < flags, and the merged result is
written to ``manifest.json`` in the output directory before any work starts.
A manifest can be passed back as ``--config`` to replay a run.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import datetime as _dt
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from . import bench as bn
from . import checkpoints as ck
from . import encoder as enc
from . import gradcheck
from . import retrieval as rv
from . import trainer as tr
from . import vocab as vc
from .losses import ContrastiveParams, KDParams, MRLParams

ENV_OUT = "EMBEDKIT_OUT"
DEFAULT_OUT = "embedkit-out"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _train_section(stage: str) -> dict:
    d = dataclasses.asdict(tr.PRESETS[stage])
    d["betas"] = list(d["betas"])
    return d


ENCODER_DEFAULTS = enc.EncoderConfig().to_dict()

SCHEMAS: dict[str, dict] = {
    "train": {
        "data": "", "tokenizer": "", "init": "", "init_seed": 0,
        "encoder": ENCODER_DEFAULTS,
        "train": _train_section("contrastive_ft"),
        "loss": {"tau": 0.02, "alpha": 1.0, "beta": 1.0, "gamma": 1.0, "mrl_dims": [], "mrl_weights": []},
        "extension": {"extended_theta": tr.EXTENDED_ROPE_THETA, "extended_max_len": 256},
    },
    "distill": {
        "data": "", "tokenizer": "", "init": "", "init_seed": 0,
        "teachers": {}, "default_teacher": "",
        "encoder": ENCODER_DEFAULTS,
        "train": _train_section("contrastive_kd"),
        "kd": {"tau_kd": 1.0, "reduction": "sum", "student_tau": 0.02},
    },
    "merge": {"method": "linear", "inputs": [], "weights": [], "t": 0.5},
    "prune-vocab": {"tokenizer": "", "corpus": "", "target_size": 0, "segmenter": "whitespace"},
    "fertility": {"tokenizer": "", "corpus": "", "segmenter": "whitespace", "name": "tokenizer"},
    "eval": {"checkpoint": "", "eval_set": "", "run": "", "qrels": "", "metric": "ndcg", "k": 10},
    "sweep": {"checkpoint": "", "eval_set": "", "axis": "dimension", "values": [], "metric": "ndcg", "k": 10},
    "bench": {
        "checkpoint": "", "corpus": "", "batch_size": 32, "msl": 64, "strategy": "both", "seed": 0,
        "warmup_batches": 3, "measured_batches": 1, "init_seed": 0, "encoder": ENCODER_DEFAULTS,
    },
    "grad-check": {"losses": "all", "seed": 0, "instances": 20, "epsilon": 1e-5},
}

# element types of list-valued leaves
LIST_TYPES = {"mrl_dims": int, "mrl_weights": float, "betas": float, "inputs": str, "weights": float, "values": int}
PATH_KEYS = {"data", "tokenizer", "init", "default_teacher", "inputs", "corpus", "checkpoint", "eval_set", "run", "qrels"}
HELP = {
    "train": "contrastive fine-tuning or context extension",
    "distill": "knowledge distillation with per-language teachers",
    "merge": "linear or spherical checkpoint merging",
    "prune-vocab": "frequency-based vocabulary pruning",
    "fertility": "tokens-per-word report",
    "eval": "retrieval evaluation of a model or a run file",
    "sweep": "metric vs embedding dimension or max sequence length",
    "bench": "encoding throughput, padded vs sorted batching",
    "grad-check": "finite-difference gradient verification",
}
OUTPUTS = {
    "train": ["model.ckpt", "trace.csv"],
    "distill": ["model.ckpt", "trace.csv"],
    "merge": ["merged.ckpt"],
    "prune-vocab": ["tokenizer.json", "id_map.json", "fertility.csv"],
    "fertility": ["fertility.csv"],
    "eval": ["metrics.json", "run.txt"],
    "sweep": ["sweep.csv"],
    "bench": ["bench.csv"],
    "grad-check": ["gradcheck.json"],
}


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: list[str]
    outputs: list[str]
    seed: int | None
    version: str = __version__
    started: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# configuration


def _leaves(tree: dict, prefix=()):
    for k, v in tree.items():
        if isinstance(v, dict) and v and k != "teachers":
            yield from _leaves(v, prefix + (k,))
        else:
            yield prefix + (k,), v


def _coerce(path, value, default):
    name = ".".join(path)
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
        if isinstance(default, list):
            kind = LIST_TYPES.get(path[-1], str)
            return [kind(x) for x in value]
        if isinstance(default, dict):
            return {str(k): str(v) for k, v in dict(value).items()}
    except (TypeError, ValueError):
        raise DataError(f"config field {name!r}: cannot use {value!r} here") from None
    return value


def _merge(defaults: dict, doc: dict, prefix=()) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in doc.items():
        path = prefix + (k,)
        if k not in defaults:
            raise DataError(f"unknown config field {'.'.join(path)!r}")
        d = defaults[k]
        if isinstance(d, dict) and d and k != "teachers":
            if not isinstance(v, dict):
                raise DataError(f"config field {'.'.join(path)!r} must be an object")
            out[k] = _merge(d, v, path)
        else:
            out[k] = _coerce(path, v, d)
    return out


def load_config_file(path, subcommand: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"config {path} must hold a JSON object")
    if "subcommand" in doc and "config" in doc:  # a run manifest
        if doc["subcommand"] != subcommand:
            raise DataError(f"manifest {path} is for {doc['subcommand']!r}, not {subcommand!r}")
        doc = doc["config"]
    return doc


def resolve_config(subcommand: str, config_path: str | None, flags: dict) -> dict:
    cfg = copy.deepcopy(SCHEMAS[subcommand])
    if config_path:
        cfg = _merge(cfg, load_config_file(config_path, subcommand))
    for path, default in _leaves(SCHEMAS[subcommand]):
        key = path[-1]
        if key in flags:
            node = cfg
            for p in path[:-1]:
                node = node[p]
            node[key] = _coerce(path, flags[key], default)
    return cfg


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _pair(text: str):
    lang, sep, path = text.partition("=")
    if not sep or not lang or not path:
        raise argparse.ArgumentTypeError(f"expected LANG=PATH, got {text!r}")
    return lang, path


def _add_leaf_flags(sp: argparse.ArgumentParser, schema: dict, positional_inputs: bool):
    seen = set()
    for path, default in _leaves(schema):
        key = path[-1]
        if key in seen:
            raise AssertionError(f"duplicate leaf key {key}")
        seen.add(key)
        flag = "--" + key.replace("_", "-")
        if key == "teachers":
            sp.add_argument("--teacher", dest="teachers", action="append", type=_pair, metavar="LANG=PATH",
                            help="file-backed teacher scores for one language (repeatable)")
        elif key == "inputs" and positional_inputs:
            sp.add_argument("inputs", nargs="*", help="input checkpoints")
        elif isinstance(default, list):
            sp.add_argument(flag, dest=key, nargs="+", type=LIST_TYPES.get(key, str), metavar=key.upper())
        elif isinstance(default, bool):
            sp.add_argument(flag, dest=key, type=lambda s: s.lower() in ("1", "true", "yes"))
        else:
            sp.add_argument(flag, dest=key, type=type(default), metavar=key.upper(),
                            help=f"default {default!r}" if default != "" else None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embedkit", description="Desk-scale embedding model toolkit.",
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"embedkit {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name], argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON config file or a previous run manifest")
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./{DEFAULT_OUT})")
        _add_leaf_flags(sp, schema, positional_inputs=(name == "merge"))
    return parser


# --------------------------------------------------------------------------
# helpers


def _require(cfg: dict, key: str):
    if not cfg.get(key):
        raise DataError(f"missing required field {key!r}")
    return cfg[key]


def _load_model(path):
    weights, meta = ck.load_with_metadata(path)
    if "encoder" not in meta:
        raise DataError(f"{path}: checkpoint metadata has no 'encoder' config")
    config = enc.EncoderConfig(**meta["encoder"])
    enc.check_weights(weights, config)
    return weights, config


def _model_meta(config: enc.EncoderConfig, **extra) -> dict:
    return {"encoder": config.to_dict(), "toolkit_version": __version__, **extra}


def _initial_model(cfg: dict):
    if cfg.get("init"):
        return _load_model(cfg["init"])
    config = enc.EncoderConfig(**cfg["encoder"])
    return enc.init_weights(config, cfg["init_seed"]), config


def _train_config(section: dict) -> tr.TrainConfig:
    d = dict(section)
    d["betas"] = tuple(d["betas"])
    return tr.TrainConfig(**d)


def _read_data(cfg: dict):
    tok = vc.load_tokenizer(cfg["tokenizer"]) if cfg.get("tokenizer") else None
    data = tr.read_examples(_require(cfg, "data"), tok)
    if not data:
        raise DataError(f"{cfg['data']}: no training records")
    return data


def _read_corpus(path) -> dict[str, list[str]]:
    """JSON ``{language: [texts]}`` or a plain text file (one text per line)."""
    p = Path(path)
    if p.suffix == ".json":
        doc = json.loads(p.read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise DataError(f"{path}: corpus JSON must map language -> list of texts")
        return {str(k): [str(t) for t in v] for k, v in doc.items()}
    return {"default": [ln for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]}


# --------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: dict, out: Path) -> None:
    data = _read_data(cfg)
    weights, config = _initial_model(cfg)
    tconfig = _train_config(cfg["train"])
    loss = cfg["loss"]
    cparams = ContrastiveParams(loss["tau"], loss["alpha"], loss["beta"], loss["gamma"])
    mrl = MRLParams(tuple(loss["mrl_dims"]), tuple(loss["mrl_weights"])) if loss["mrl_dims"] else None
    if tconfig.stage == "context_extension":
        ext = cfg["extension"]
        config = enc.rope_rescale(config, ext["extended_theta"], ext["extended_max_len"])
        weights, trace = tr.train_context_extension(weights, config, data, tconfig, cparams, mrl)
    else:
        weights, trace = tr.train_contrastive(weights, config, data, tconfig, cparams, mrl)
    ck.save(weights, out / "model.ckpt", _model_meta(config, stage=tconfig.stage))
    trace.write_csv(out / "trace.csv")


def cmd_distill(cfg: dict, out: Path) -> None:
    data = _read_data(cfg)
    weights, config = _initial_model(cfg)
    teachers = {lang: tr.FileTeacher(path, name=f"{lang}:{Path(path).name}") for lang, path in cfg["teachers"].items()}
    default = tr.FileTeacher(cfg["default_teacher"]) if cfg.get("default_teacher") else None
    if not teachers and default is None:
        raise DataError("missing required field 'teachers' (or 'default_teacher')")
    kd = cfg["kd"]
    weights, trace = tr.train_distill(weights, config, teachers, data, _train_config(cfg["train"]),
                                      KDParams(kd["tau_kd"], kd["reduction"]), tau=kd["student_tau"],
                                      default_teacher=default)
    ck.save(weights, out / "model.ckpt", _model_meta(config, stage="contrastive_kd"))
    trace.write_csv(out / "trace.csv")


def cmd_merge(cfg: dict, out: Path) -> None:
    spec = ck.MergeSpec(cfg["method"], list(cfg["inputs"]), list(cfg["weights"]) or None,
                        cfg["t"] if cfg["method"] == "slerp" else None)
    merged, meta = ck.run_merge(spec)
    meta = dict(meta)
    meta["merge"] = {"method": spec.method, "inputs": [Path(p).name for p in spec.inputs],
                     "weights": spec.weights, "t": spec.t}
    ck.save(merged, out / "merged.ckpt", meta)


def cmd_prune_vocab(cfg: dict, out: Path) -> None:
    spec = vc.load_tokenizer(_require(cfg, "tokenizer"))
    corpus = _read_corpus(_require(cfg, "corpus"))
    target = cfg["target_size"]
    if target <= 0:
        raise DataError("missing required field 'target_size'")
    freq = vc.count_frequencies(spec, [t for texts in corpus.values() for t in texts])
    pruned, old_to_new = vc.prune_vocab(spec, freq, target)
    vc.save_tokenizer(pruned, out / "tokenizer.json")
    (out / "id_map.json").write_text(json.dumps({str(k): v for k, v in old_to_new.items()}))
    before = vc.fertility(spec, corpus, cfg["segmenter"])
    after = vc.fertility(pruned, corpus, cfg["segmenter"])
    rows = [("original", before), ("pruned", after)]
    _write_fertility_rows(rows, out / "fertility.csv")


def _write_fertility_rows(rows, path) -> None:
    langs = [r.language for r in rows[0][1].rows]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Tokenizer", *langs, "Avg."])
        for name, rep in rows:
            w.writerow([name, *(f"{r.fertility:.2f}" for r in rep.rows), f"{rep.average:.2f}"])


def cmd_fertility(cfg: dict, out: Path) -> None:
    spec = vc.load_tokenizer(_require(cfg, "tokenizer"))
    report = vc.fertility(spec, _read_corpus(_require(cfg, "corpus")), cfg["segmenter"])
    report.write_csv(out / "fertility.csv", cfg["name"])


def cmd_eval(cfg: dict, out: Path) -> None:
    k, metric = cfg["k"], cfg["metric"]
    if cfg.get("run"):
        run, qrels = rv.read_run(cfg["run"]), rv.read_qrels(_require(cfg, "qrels"))
    else:
        weights, config = _load_model(_require(cfg, "checkpoint"))
        es = rv.load_eval_set(_require(cfg, "eval_set"))
        if cfg.get("qrels"):
            es = rv.EvalSet(es.queries, es.docs, rv.read_qrels(cfg["qrels"]))
        qids = sorted(es.queries)
        dids = sorted(es.docs)
        Qe = enc.encode(weights, config, [es.queries[q] for q in qids], batch_size=64)
        De = enc.encode(weights, config, [es.docs[d] for d in dids], batch_size=64)
        run = rv.search(rv.IndexedCorpus(dids, De), Qe, k, qids)
        qrels = es.qrels
    rv.write_run(run, out / "run.txt")
    per_query, ndcg = rv.ndcg_at_k(run, qrels, k)
    metrics = {"metric": metric, "k": k, "score": rv.score_run(run, qrels, metric, k),
               f"ndcg@{k}": ndcg, "accuracy@1": rv.accuracy_at_1(run, qrels),
               f"recall@{k}": rv.recall_at_k(run, qrels, k), "queries": len(per_query)}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")


def cmd_sweep(cfg: dict, out: Path) -> None:
    weights, config = _load_model(_require(cfg, "checkpoint"))
    es = rv.load_eval_set(_require(cfg, "eval_set"))
    values = _require(cfg, "values")
    if cfg["axis"] == "dimension":
        report = rv.mrl_sweep(weights, config, es, values, cfg["k"], cfg["metric"])
    elif cfg["axis"] == "max_seq_len":
        report = rv.context_sweep(weights, config, es, values, cfg["k"], cfg["metric"])
    else:
        raise DataError(f"config field 'axis' must be 'dimension' or 'max_seq_len', got {cfg['axis']!r}")
    rv.write_sweep_csv(report, out / "sweep.csv")


def cmd_bench(cfg: dict, out: Path) -> None:
    from .fixtures import gen_length_skewed_corpus

    if cfg.get("checkpoint"):
        weights, config = _load_model(cfg["checkpoint"])
    else:
        config = enc.EncoderConfig(**cfg["encoder"])
        weights = enc.init_weights(config, cfg["init_seed"])
    if cfg.get("corpus"):
        corpus = json.loads(Path(cfg["corpus"]).read_text())
        if not isinstance(corpus, list):
            raise DataError(f"{cfg['corpus']}: bench corpus must be a JSON list of token-id lists")
    else:
        corpus = gen_length_skewed_corpus(vocab_size=config.vocab_size, seed=cfg["seed"],
                                          long=(max(2, config.max_len // 2), config.max_len))
    strategies = bn.STRATEGIES if cfg["strategy"] == "both" else (cfg["strategy"],)
    rows = []
    for s in strategies:
        bconf = bn.BenchConfig(cfg["batch_size"], cfg["msl"], s, cfg["warmup_batches"],
                               cfg["measured_batches"], cfg["seed"])
        rows.append((s, weights, config, bn.run_throughput(weights, config, corpus, bconf)))
    bn.write_report_csv(rows, out / "bench.csv", reference=strategies[0])
    for label, _, _, rep in rows:
        print(f"{label}: {rep.docs_per_second:.1f} docs/s, padding tokens {rep.padding_tokens}")


def cmd_grad_check(cfg: dict, out: Path) -> int:
    kinds = gradcheck.LOSS_KINDS if cfg["losses"] == "all" else tuple(s.strip() for s in cfg["losses"].split(","))
    report = gradcheck.run_suite(kinds, cfg["seed"], cfg["instances"], cfg["epsilon"])
    (out / "gradcheck.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    for kind, r in report.items():
        print(f"{kind}: max rel. error {r['max_rel_error']:.3e} (tol {r['tolerance']:g}) "
              f"{'ok' if r['passed'] else 'FAIL'}")
    return EXIT_OK if all(r["passed"] for r in report.values()) else EXIT_DATA


COMMANDS = {
    "train": cmd_train, "distill": cmd_distill, "merge": cmd_merge, "prune-vocab": cmd_prune_vocab,
    "fertility": cmd_fertility, "eval": cmd_eval, "sweep": cmd_sweep, "bench": cmd_bench,
    "grad-check": cmd_grad_check,
}


def _inputs(cfg: dict) -> list[str]:
    found = []
    for path, value in _leaves(cfg):
        if path[-1] in PATH_KEYS and value:
            found.extend(value if isinstance(value, list) else [value])
    if cfg.get("teachers"):
        found.extend(cfg["teachers"].values())
    return [str(v) for v in found]


def _seed(cfg: dict):
    for path, value in _leaves(cfg):
        if path[-1] == "seed":
            return value
    return None


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_help())
        ns = vars(parser.parse_args(argv))
        name = ns.pop("subcommand", None)
        if name is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    config_path = ns.pop("config", None)
    out = Path(ns.pop("out", None) or os.environ.get(ENV_OUT) or DEFAULT_OUT)
    if "teachers" in ns:
        ns["teachers"] = dict(ns["teachers"])
    try:
        cfg = resolve_config(name, config_path, ns)
        out.mkdir(parents=True, exist_ok=True)
        RunManifest(name, cfg, _inputs(cfg), [str(out / f) for f in OUTPUTS[name]], _seed(cfg)).write(out / "manifest.json")
        code = COMMANDS[name](cfg, out)
    except (DataError, ValueError, KeyError, OSError, json.JSONDecodeError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"embedkit {name}: error: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


def main(argv=None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
