"""``dppselect`` command line.

Every command merges its settings as flags > ``--config`` JSON > defaults,
and writes a run manifest with the effective config, seed and input digests.
Exit codes: 0 ok, 2 usage or input error, 3 numerical failure, 4 oracle failure.
"""

import argparse
import importlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, _backend
from . import io as dio
from .adapter import init_params, load_params, save_params
from .errors import InputError, InvalidConfig, MissingParams, NumericalFailure
from .kernel import logdet_submatrix
from .objective import LOSS_KINDS, LossConfig, train
from .oracles import run_checks
from .pipeline import (
    PipelineConfig,
    evaluate,
    margin_analysis,
    pool_kernel,
    select_context,
    stratified_split,
    synth_dataset,
    topk_context,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_ORACLE = 0, 2, 3, 4
MODES = ("topk", "dpp-base", "dpp-adapter")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "k_list": [10, 4],
    "pool_size": 20,
    "epsilon": 1e-10,
    "gamma": 1.0,
    "loss": "dml",
    "epochs": 20,
    "batch": 8,
    "lr": 1e-4,
    "max_neg_subsets": 5000,
    "trials": 100,
    "n_queries": 200,
    "d": 32,
    "k_pos": [2, 3, 4],
    "redundancy": 0.95,
    "noise": 0.04,
    "ratios": [5, 1, 4],
    "format": "table",
}
COMMAND_DEFAULTS = {"select": {"k": 10}}


def _int_list(text):
    try:
        return [int(x) for x in str(text).replace(":", ",").split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings; flags take precedence")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (file or directory, per command)")
    common.add_argument("--manifest", help="run manifest path (default derived from --out)")

    sel = argparse.ArgumentParser(add_help=False)
    sel.add_argument("--pools", help="pool JSONL")
    sel.add_argument("--params", help="adapter parameter JSON")
    sel.add_argument("--scores", help="score JSONL overriding candidate scores by id")
    sel.add_argument("--pool-size", type=int)
    sel.add_argument("--epsilon", type=float)
    sel.add_argument("--mode", choices=MODES)
    sel.add_argument("--quality", choices=("on", "off"))
    sel.add_argument("--threads", type=int)

    loss = argparse.ArgumentParser(add_help=False)
    loss.add_argument("--tuples", help="training tuple JSONL")
    loss.add_argument("--embeddings", help="embedding JSONL")
    loss.add_argument("--max-neg-subsets", type=int)
    loss.add_argument("--gamma", type=float)

    parser = argparse.ArgumentParser(prog="dppselect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({_backend.NAME})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", parents=[common, sel], help="select a context subset per pool")
    p.add_argument("--k", type=int)

    p = sub.add_parser("train", parents=[common, loss], help="train the adapter")
    p.add_argument("--loss", choices=LOSS_KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--history", help="loss history CSV (default: <out>.history.csv)")

    p = sub.add_parser("eval", parents=[common, sel], help="retrieval metrics per mode")
    p.add_argument("--k", type=int, help="single cutoff; overrides --k-list")
    p.add_argument("--k-list", type=_int_list)
    p.add_argument("--format", choices=("table", "json"), help="stdout format when --out is absent")

    p = sub.add_parser("margins", parents=[common, loss], help="determinant margins by hop count")
    p.add_argument("--params", help="adapter parameter JSON")

    p = sub.add_parser("check", parents=[common], help="run the oracle suite")
    p.add_argument("--trials", type=int)
    p.add_argument("--greedy-impl", help=argparse.SUPPRESS)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic benchmark")
    p.add_argument("--n-queries", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--k-pos", type=_int_list)
    p.add_argument("--redundancy", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--pool-size", type=int)

    p = sub.add_parser("split", parents=[common], help="stratified train/val/test split")
    p.add_argument("--input", help="pool or tuple JSONL")
    p.add_argument("--ratios", type=_int_list)
    return parser


def _known_keys(parser):
    keys = set()
    for action in parser._subparsers._group_actions[0].choices.values():
        keys.update(a.dest for a in action._actions if a.dest not in ("help", "config", "manifest"))
    return keys


def _command_actions(parser, command):
    subparser = parser._subparsers._group_actions[0].choices[command]
    return {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}


def resolve_config(parser, args):
    """Effective settings: flags, then the config file, then defaults."""
    file_cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{args.config}: invalid JSON ({exc.msg})") from exc
        if not isinstance(file_cfg, dict):
            raise InputError(f"{args.config}: config must be a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = sorted(set(file_cfg) - _known_keys(parser))
        if unknown:
            raise InvalidConfig(f"{args.config}: unknown config keys {unknown}")
    cfg = {}
    for dest, action in _command_actions(parser, args.command).items():
        value = getattr(args, dest, None)
        if value is None and dest in file_cfg:
            value = _coerce(action, file_cfg[dest])
        if value is None:
            value = COMMAND_DEFAULTS.get(args.command, {}).get(dest, DEFAULTS.get(dest))
        cfg[dest] = value
    return cfg


def _coerce(action, value):
    """Config-file value through the flag's own type and choices."""
    where = f"config key {action.dest!r}"
    if isinstance(value, (bool, dict)) or (isinstance(value, list) and action.type is not _int_list):
        raise InvalidConfig(f"{where}: unsupported value {value!r}")
    try:
        if action.type is _int_list:
            value = [int(v) for v in value] if isinstance(value, list) else _int_list(str(value))
        elif action.type is not None:
            value = action.type(value)
    except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
        raise InvalidConfig(f"{where}: {exc}") from exc
    if action.choices is not None and value not in action.choices:
        raise InvalidConfig(f"{where}: {value!r} not in {list(action.choices)}")
    return value


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) is None:
            raise InputError(f"--{key.replace('_', '-')} is required")


class Run:
    """Output routing plus the manifest for one command."""

    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.inputs = {}
        self.outputs = []
        self.extra = {}

    def input(self, name, path):
        if path is not None:
            self.inputs[name] = {"path": str(path), "sha256": dio.sha256_file(path)}
        return path

    def output(self, path):
        self.outputs.append(str(path))
        return path

    def manifest(self):
        doc = {
            "command": self.command,
            "version": __version__,
            "backend": _backend.NAME,
            "seed": self.cfg.get("seed"),
            "config": {k: v for k, v in sorted(self.cfg.items()) if k not in ("command", "greedy_impl")},
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        doc.update(self.extra)
        return doc

    def write_manifest(self):
        target = self.cfg.get("manifest")
        out = self.cfg.get("out")
        if target is None and out is not None:
            target = Path(out) / "manifest.json" if Path(out).is_dir() else f"{out}.manifest.json"
        if target is None:
            sys.stderr.write("manifest " + dio.dumps(self.manifest()) + "\n")
        else:
            Path(target).write_text(json.dumps(self.manifest(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _emit_lines(lines, out):
    if out is None:
        for line in lines:
            sys.stdout.write(line + "\n")
    else:
        with open(out, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")


def format_table(headers, rows):
    cells = [[str(h) for h in headers]] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# --------------------------------------------------------------------------
# shared loading


def _load_pools(run, cfg):
    _require(cfg, "pools")
    pools = dio.load_pools(run.input("pools", cfg["pools"]))
    if cfg.get("scores"):
        table = dio.load_scores(run.input("scores", cfg["scores"]))
        for pool in pools:
            missing = [i for i in pool.ids if i not in table]
            if missing:
                raise InputError(f"{pool.query_id}: no score for ids {missing[:5]}")
            pool.scores = np.array([table[i] for i in pool.ids])
    return pools


def _load_params(run, cfg, d):
    if not cfg.get("params"):
        return None
    return load_params(run.input("params", cfg["params"]), expected_d=d)


def _load_examples(run, cfg):
    _require(cfg, "tuples", "embeddings")
    table = dio.load_embeddings(run.input("embeddings", cfg["embeddings"]))
    return dio.load_examples(run.input("tuples", cfg["tuples"]), table), table


def _mode_config(mode, quality, k, cfg):
    return PipelineConfig(
        pool_size=cfg["pool_size"],
        select_k=k,
        use_adapter=mode == "dpp-adapter",
        use_quality=quality == "on",
        epsilon=cfg["epsilon"],
    )


# --------------------------------------------------------------------------
# commands


def cmd_select(cfg, run):
    pools = _load_pools(run, cfg)
    params = _load_params(run, cfg, pools[0].embeddings.shape[1])
    mode = cfg["mode"] or ("dpp-adapter" if params is not None else "dpp-base")
    if mode == "dpp-adapter" and params is None:
        raise MissingParams("--mode dpp-adapter needs --params")
    cfg["mode"], cfg["quality"] = mode, cfg["quality"] or "off"
    pcfg = _mode_config(mode, cfg["quality"], cfg["k"], cfg)
    lines = []
    for pool in pools:
        if mode == "topk":
            order = topk_context(pool, pcfg)
            sub = pool.truncated(pcfg.pool_size)
            logdet = logdet_submatrix(pool_kernel(sub, params, pcfg), order)
            row = {"query_id": pool.query_id, "selected_ids": [sub.ids[i] for i in order], "logdet": logdet,
                   "kernel_ms": 0.0, "select_ms": 0.0}
        else:
            res = select_context(pool, params, pcfg)
            row = {"query_id": pool.query_id, "selected_ids": [pool.ids[i] for i in res.order],
                   "logdet": res.logdet_final, "kernel_ms": round(res.kernel_ms, 4), "select_ms": round(res.select_ms, 4)}
        if not math.isfinite(row["logdet"]):
            row["logdet"] = None
        lines.append(dio.dumps(row))
    if cfg["out"]:
        run.output(cfg["out"])
    _emit_lines(lines, cfg["out"])
    return EXIT_OK


def cmd_train(cfg, run):
    _require(cfg, "out")
    examples, table = _load_examples(run, cfg)
    d = next(iter(table.values())).size
    loss_cfg = LossConfig(gamma=cfg["gamma"], max_neg_subsets=cfg["max_neg_subsets"], seed=cfg["seed"],
                          loss_kind=cfg["loss"])
    p0 = init_params(d, cfg["seed"])
    params, history = train(examples, p0, loss_cfg, epochs=cfg["epochs"], batch=cfg["batch"], lr=cfg["lr"],
                            seed=cfg["seed"])
    history_path = cfg["history"] or f"{cfg['out']}.history.csv"
    save_params(params, run.output(cfg["out"]))
    dio.write_history(run.output(history_path), history)
    run.extra["n_examples"] = len(examples)
    run.extra["d"] = int(d)
    for st in history:
        print(f"epoch {st.epoch:3d}  loss {st.mean_loss:.6f}  skipped {st.skipped_examples}")
    return EXIT_OK


def eval_rows(pools, params, cfg, k_list, modes, qualities):
    rows = []
    for k in k_list:
        for mode in modes:
            for quality in qualities:
                pcfg = _mode_config(mode, quality, k, cfg)
                method = "topk" if mode == "topk" else "dpp"
                report = evaluate(pools, params if mode == "dpp-adapter" else None, pcfg, method, cfg["threads"])
                rows.append({"k": k, "mode": mode, "quality": quality, **report.to_dict()})
    return rows


def cmd_eval(cfg, run):
    pools = _load_pools(run, cfg)
    params = _load_params(run, cfg, pools[0].embeddings.shape[1])
    k_list = [cfg["k"]] if cfg.get("k") is not None else list(cfg["k_list"])
    if cfg["mode"] is not None:
        modes = [cfg["mode"]]
    else:
        modes = [m for m in MODES if m != "dpp-adapter" or params is not None]
    if "dpp-adapter" in modes and params is None:
        raise MissingParams("--mode dpp-adapter needs --params")
    qualities = [cfg["quality"]] if cfg["quality"] is not None else ["off", "on"]
    rows = eval_rows(pools, params, cfg, k_list, modes, qualities)
    report = {"n_pools": len(pools), "rows": rows}
    if params is None and cfg["mode"] is None:
        report["skipped_modes"] = ["dpp-adapter"]

    table_rows = []
    for r in rows:
        for group, m in r["groups"].items():
            k = r["k"]
            table_rows.append([k, r["mode"], r["quality"], group, m["count"], m[f"ndcg@{k}"], m[f"recall@{k}"],
                               m[f"hits@{k}"], r["failed"]])
    table = format_table(["k", "mode", "quality", "group", "count", "ndcg", "recall", "hits", "failed"], table_rows)
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if cfg["out"]:
        Path(run.output(cfg["out"])).write_text(text, encoding="utf-8")
        sys.stdout.write(table)
    else:
        sys.stdout.write(text if cfg["format"] == "json" else table)
    return EXIT_OK


def _margin_summary(reports):
    margins = np.array([r.margin for r in reports])
    return {
        "count": len(reports),
        "det_pos": float(np.mean([r.det_pos for r in reports])),
        "det_neg_max": float(np.mean([r.det_neg_max for r in reports])),
        "margin": float(np.mean(margins)),
        "frac_positive": float(np.mean(margins > 0)),
    }


def cmd_margins(cfg, run):
    examples, table = _load_examples(run, cfg)
    params = _load_params(run, cfg, next(iter(table.values())).size)
    spaces = {"raw": None} if params is None else {"raw": None, "adapter": params}
    per_query, grouped = [], {name: {} for name in spaces}
    for ex in examples:
        row = {"query_id": ex.query_id, "hop_count": ex.hop_count}
        for name, p in spaces.items():
            rep = margin_analysis(ex.pool, ex.positives, ex.negatives, params=p, cap=cfg["max_neg_subsets"],
                                  seed=cfg["seed"])
            row[name] = rep.to_dict()
            for key in ("overall", str(ex.hop_count)):
                grouped[name].setdefault(key, []).append(rep)
        per_query.append(row)
    summary = {
        name: {key: _margin_summary(reps) for key, reps in sorted(groups.items(), key=lambda kv: (kv[0] != "overall", kv[0]))}
        for name, groups in grouped.items()
    }
    report = {"summary": summary, "queries": per_query}
    rows = [[name, key, s["count"], s["det_pos"], s["det_neg_max"], s["margin"], s["frac_positive"]]
            for name, groups in summary.items() for key, s in groups.items()]
    table = format_table(["space", "group", "count", "det_pos", "det_neg_max", "margin", "frac_pos"], rows)
    if cfg["out"]:
        Path(run.output(cfg["out"])).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def _import_attr(spec):
    module, _, attr = spec.partition(":")
    obj = importlib.import_module(module)
    return getattr(obj, attr) if attr else obj


def cmd_check(cfg, run):
    impl = None
    if cfg.get("greedy_impl"):
        try:
            impl = _import_attr(cfg["greedy_impl"])
        except (ImportError, AttributeError) as exc:
            raise InputError(f"cannot load greedy implementation {cfg['greedy_impl']!r}: {exc}") from exc
    results = run_checks(trials=cfg["trials"], seed=cfg["seed"], greedy_impl=impl)
    passed = all(r.passed for r in results)
    report = {"passed": passed, "backend": _backend.NAME, "results": [r.to_dict() for r in results]}
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if cfg["out"]:
        Path(run.output(cfg["out"])).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for r in results:
        sys.stderr.write(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} worst={r.worst:.3e}  tol={r.tolerance:.0e}\n")
    return EXIT_OK if passed else EXIT_ORACLE


def cmd_synth(cfg, run):
    _require(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    pools, _ = synth_dataset(cfg["n_queries"], cfg["d"], cfg["k_pos"], None, cfg["redundancy"], cfg["seed"],
                             pool_size=cfg["pool_size"], noise=cfg["noise"])
    dio.write_pools(run.output(out / "pools.jsonl"), pools)
    dio.write_jsonl(run.output(out / "tuples.jsonl"), (dio.tuple_from_pool(p) for p in pools))
    table = {cid: pool.embeddings[i] for pool in pools for i, cid in enumerate(pool.ids)}
    dio.write_embeddings(run.output(out / "embeddings.jsonl"), table)
    return EXIT_OK


def _strat_key(row):
    if row.get("hop_count") is not None:
        return row["hop_count"]
    for key in ("gold_ids", "positive_ids"):
        if key in row:
            return len(row[key])
    return None


def cmd_split(cfg, run):
    _require(cfg, "input", "out")
    ratios = tuple(cfg["ratios"])
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) == 0:
        raise InvalidConfig(f"--ratios needs three non-negative integers, got {list(ratios)}")
    rows = dio.read_jsonl(run.input("input", cfg["input"]))
    if not rows:
        raise InputError(f"{cfg['input']}: nothing to split")
    parts = stratified_split(rows, ratios, key=_strat_key, seed=cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        dio.write_jsonl(run.output(out / f"{name}.jsonl"), part)
    run.extra["sizes"] = {name: len(part) for name, part in zip(("train", "val", "test"), parts)}
    run.extra["ratios"] = list(ratios)
    return EXIT_OK


COMMANDS = {
    "select": cmd_select,
    "train": cmd_train,
    "eval": cmd_eval,
    "margins": cmd_margins,
    "check": cmd_check,
    "synth": cmd_synth,
    "split": cmd_split,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(parser, args)
        if cfg.get("threads") is not None and cfg["threads"] < 1:
            raise InvalidConfig("--threads must be >= 1")
        run = Run(args.command, cfg)
        code = COMMANDS[args.command](cfg, run)
        run.write_manifest()
        return code
    except (InputError, OSError) as exc:
        print(f"dppselect: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalFailure as exc:
        print(f"dppselect: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
