"""Command-line entry point: ``mtlsplit <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analyzer, transport
from .errors import (
    ConfigError,
    FormatError,
    MtlSplitError,
    RemoteError,
    TransportError,
    UnsupportedFactorError,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .rng import Rng
from .synth import Dataset, FactorSpec, generate, load_dataset, save_dataset, split_train_test
from .trainer import (
    FinetuneConfig,
    OptimizerState,
    Timer,
    evaluate,
    finetune,
    metrics_document,
    render_delta_table,
    train_mtl,
    train_stl,
)

log = logging.getLogger("mtlsplit")

DEFAULT_CONFIG: dict = {
    "seed": 42,
    "dataset": FactorSpec().to_dict(),
    "model": {"backbone_widths": [128], "feature_len": 64, "head_hidden_width": 32},
    "optimizer": {"kind": "adamw", "learning_rate": 3e-3, "weight_decay": 0.01},
    "epochs": 40,
    "batch_size": 64,
    "split_ratio": 0.8,
    "finetune": {"alpha": 0.05, "eta": 0.0, "epochs": 10, "kind": "sgd"},
    "channel": {"bandwidth_bps": 1e9, "propagation_delay_ms": 0.0, "per_message_overhead_ms": 0.0,
                "jitter_ms": 0.0},
    "paradigm": "SC",
    "listen": "127.0.0.1:7070",
    "connect": "127.0.0.1:7070",
    "timeout_s": transport.DEFAULT_TIMEOUT,
    "workload": {"n_inputs": 100, "input_shape": [2835, 3543, 3], "n_tasks": 3},
}

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_run_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        try:
            user = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    for flag in ("listen", "connect", "paradigm"):
        if getattr(args, flag, None):
            cfg[flag] = getattr(args, flag)
    if getattr(args, "epochs", None) is not None:
        cfg["epochs"] = args.epochs
    return cfg


def _address(s: str) -> tuple[str, int]:
    host, sep, port = s.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address must look like HOST:PORT, got {s!r}")
    return host or "127.0.0.1", int(port)


def model_config_for(cfg: dict, data: Dataset) -> ModelConfig:
    m = cfg["model"]
    names = m.get("tasks")
    counts = dict(data.spec.factors)
    if names is None:
        tasks = list(data.spec.factors)
    else:
        missing = [n for n in names if n not in counts]
        if missing:
            raise ConfigError(f"tasks {missing} are not factors of the dataset")
        tasks = [(n, counts[n]) for n in names]
    w, h = data.spec.image_size
    return ModelConfig(input_shape=(w, h, 3), backbone_widths=tuple(m["backbone_widths"]),
                       feature_len=int(m["feature_len"]), head_hidden_width=int(m["head_hidden_width"]),
                       tasks=tuple(tasks))


def select_tasks(data: Dataset, names: Sequence[str]) -> Dataset:
    """Label columns reordered to match ``names``."""
    idx = []
    for n in names:
        if n not in data.task_names:
            raise ConfigError(f"task {n!r} has no labels in the dataset")
        idx.append(data.task_names.index(n))
    return Dataset(data.spec, data.images, data.labels[:, idx], tuple(names))


def _optimizer(cfg: dict) -> OptimizerState:
    o = cfg["optimizer"]
    return OptimizerState(o.get("kind", "adamw"), float(o["learning_rate"]), float(o.get("weight_decay", 0.01)))


def _dataset(args, cfg) -> Dataset:
    path = args.dataset or cfg.get("dataset_path")
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        return load_dataset(path)
    return generate(FactorSpec.from_dict(cfg["dataset"]), cfg["seed"])


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args)
    spec = FactorSpec.from_dict(cfg["dataset"])
    spec.validate()
    ds = generate(spec, cfg["seed"])
    out = Path(args.out or cfg.get("dataset_path") or "dataset.mtld")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {out}: K={len(ds)}")
    for (name, _), counts in zip(spec.factors, ds.class_counts()):
        print(f"  {name}: {counts}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    data = _dataset(args, cfg)
    seed = cfg["seed"]
    train, test = split_train_test(data, float(cfg["split_ratio"]), seed)
    mcfg = model_config_for(cfg, data)
    train, test = select_tasks(train, [n for n, _ in mcfg.tasks]), select_tasks(test, [n for n, _ in mcfg.tasks])
    opt = _optimizer(cfg)
    epochs, bs = int(cfg["epochs"]), int(cfg["batch_size"])
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    names = [n for n, _ in mcfg.tasks]
    with Timer() as timer:
        if args.mode == "mtl":
            model, history = train_mtl(mcfg, train, epochs, opt, seed=seed, batch_size=bs)
            save_checkpoint(model, out / "mtl.ckpt")
            acc = evaluate(model, test)
        else:
            history, acc = None, []
            per_task_hist = []
            for j, name in enumerate(names):
                model, hist = train_stl(mcfg, j, train, epochs, opt, seed=seed, batch_size=bs)
                save_checkpoint(model, out / f"stl-{j}-{name}.ckpt")
                acc.append(evaluate(model, select_tasks(test, [name]))[0])
                per_task_hist.append([row[0] for row in hist])
            history = [list(r) for r in zip(*per_task_hist)] if epochs else []
    doc = metrics_document(seed=seed, run_config=cfg, mode=args.mode, task_names=names, history=history,
                           accuracies=acc, wall_clock_seconds=timer.seconds)
    _write_json(out / f"{args.mode}.metrics.json", doc)
    for name, a in zip(names, doc["accuracies"]):
        print(f"{args.mode} {name}: {a:.2f}%")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = load_run_config(args)
    ft = cfg["finetune"]
    alpha = float(args.alpha if args.alpha is not None else ft["alpha"])
    eta = float(args.eta if args.eta is not None else ft["eta"])
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    model = load_checkpoint(args.checkpoint)
    data = _dataset(args, cfg)
    seed = cfg["seed"]
    if args.add_task:
        counts = dict(data.spec.factors)
        if args.add_task not in counts:
            raise ConfigError(f"new task {args.add_task!r} is not a factor of the dataset")
        model = model.add_task(args.add_task, counts[args.add_task], seed)
    names = [n for n, _ in model.config.tasks]
    train, test = split_train_test(data, float(cfg["split_ratio"]), seed)
    train, test = select_tasks(train, names), select_tasks(test, names)
    before = evaluate(model, test)
    fcfg = FinetuneConfig(alpha=alpha, eta=eta, kind=ft.get("kind", "sgd"))
    epochs = int(args.epochs if args.epochs is not None else ft["epochs"])
    finetune(model, train, epochs, fcfg, batch_size=int(cfg["batch_size"]), seed=seed)
    after = evaluate(model, test)
    out = Path(args.out or "finetuned.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    for name, a, b in zip(names, before, after):
        print(f"{name}: {a:.2f}% -> {b:.2f}%")
    print(f"wrote {out} with {model.n_tasks} heads")
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = load_run_config(args)
    host, port = _address(cfg["listen"])
    model = load_checkpoint(args.checkpoint)
    endpoint = transport.ServerEndpoint(model, cfg["paradigm"])
    stop = threading.Event()

    def _stop(signum, frame):
        log.info("signal %d received, shutting down", signum)
        stop.set()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    srv = transport.start_server(endpoint, host, port)
    print(f"listening on {host}:{srv.port} ({endpoint.mode})", flush=True)
    try:
        while not stop.wait(0.2):
            pass
    finally:
        srv.stop()
    return EXIT_OK


def cmd_edge(args) -> int:
    cfg = load_run_config(args)
    host, port = _address(cfg["connect"])
    mode = cfg["paradigm"]
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    endpoint = transport.EdgeEndpoint(model, mode)
    data = _dataset(args, cfg)
    n = len(data) if args.limit is None else min(args.limit, len(data))
    preds, timings = [], []
    with transport.SocketTransport(host, port, float(cfg["timeout_s"])) as tr:
        for i in range(n):
            t0 = time.perf_counter()
            logits = transport.edge_infer(endpoint, data.images[i], tr)
            timings.append(time.perf_counter() - t0)
            preds.append([int(np.argmax(l)) for l in logits])
    doc = {"n": n, "mode": mode, "predictions": preds, "request_seconds": [round(t, 6) for t in timings]}
    out = Path(args.out or "edge_predictions.json")
    _write_json(out, doc)
    print(f"{n} requests served, mean {1e3 * (sum(timings) / max(n, 1)):.3f} ms; wrote {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_run_config(args)
    ch = transport.ChannelModel.from_config(cfg["channel"])
    spec = FactorSpec.from_dict(cfg["dataset"])
    w, h = spec.image_size
    input_shape = (w, h, 3)
    n_classes = [n for _, n in spec.factors]
    n_inputs = args.n_inputs if args.n_inputs is not None else spec.size
    rng = Rng.for_purpose(cfg["seed"], "jitter")
    rows = []
    for p in (transport.LOC, transport.ROC, transport.SC):
        rep = transport.transfer_time_report(p, n_inputs, input_shape, int(cfg["model"]["feature_len"]), ch,
                                             n_classes, rng)
        rows.append(rep.to_dict())
    doc = {"channel": ch.to_config(), "input_shape": list(input_shape), "reports": rows}
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        data = _dataset(args, cfg)
        m = min(n_inputs, len(data))
        for mode in (transport.SC, transport.ROC):
            server = transport.ServerEndpoint(model, mode)
            edge = transport.EdgeEndpoint(model if mode == transport.SC else None, mode)
            lt = transport.LoopbackTransport(server, ch, Rng.for_purpose(cfg["seed"], f"jitter:{mode}"))
            for i in range(m):
                transport.edge_infer(edge, data.images[i], lt)
            doc[f"measured_{mode}"] = {"n": m, "simulated_seconds": lt.elapsed,
                                       "bytes": sum(r.request_bytes + r.response_bytes for r in lt.records)}
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for r in rows:
            print(f"{r['paradigm']:>3}: payload {r['request_seconds']:.6f} s  framing {r['framing_seconds']:.6f} s"
                  f"  responses {r['response_seconds']:.6f} s  total {r['total_seconds']:.6f} s")
        for mode in (transport.SC, transport.ROC):
            if f"measured_{mode}" in doc:
                meas = doc[f"measured_{mode}"]
                print(f"measured {mode} over loopback: {meas['n']} inputs, {meas['bytes']} bytes, "
                      f"{meas['simulated_seconds']:.6f} s")
    if args.out:
        _write_json(Path(args.out), doc)
    return EXIT_OK


def analysis_document(descriptors, unit: str, workload: dict, ch: transport.ChannelModel) -> dict:
    n_inputs = int(workload["n_inputs"])
    shape = tuple(int(v) for v in workload["input_shape"])
    n_tasks = int(workload["n_tasks"])
    reports = []
    for d in descriptors:
        reports += [r.row() for r in analyzer.paradigm_reports(d, n_tasks, shape, n_inputs, ch, unit)]
    notes = []
    for d in descriptors:
        if n_tasks >= 2:
            s = analyzer.sc_memory_saving(d, n_tasks)
            notes.append(f"{d.name}: SC edge memory saving from backbone sharing alone = {100 * s.fraction:.1f}% "
                         f"for N={n_tasks} (heads excluded)")
        sc = transport.transfer_time_report(transport.SC, n_inputs, shape, d.feature_len, ch)
        if n_inputs and ch.per_message_overhead == 0:
            notes.append(f"{d.name}: SC payload time {sc.request_seconds:.2f} s; a per-message overhead of "
                         f"{analyzer.overhead_to_reach(12.0, sc.request_seconds, n_inputs):.4f} s would be "
                         f"needed to reach 12 s")
    notes.append("Z_b element counts read the published '#params (M)' column as thousands")
    return {
        "unit": unit,
        "table4": analyzer.render_table4(descriptors, unit),
        "paradigms": reports,
        "workload": {"n_inputs": n_inputs, "input_shape": list(shape), "n_tasks": n_tasks},
        "channel": ch.to_config(),
        "notes": notes,
    }


def cmd_analyze(args) -> int:
    cfg = load_run_config(args)
    descs = [analyzer.load_descriptor(p) for p in args.descriptors] if args.descriptors else analyzer.reference_descriptors()
    if args.checkpoint:
        descs.append(analyzer.describe_model(load_checkpoint(args.checkpoint), Path(args.checkpoint).stem))
    workload = dict(cfg["workload"])
    if args.n_inputs is not None:
        workload["n_inputs"] = args.n_inputs
    if args.n_tasks is not None:
        workload["n_tasks"] = args.n_tasks
    if args.input_shape:
        workload["input_shape"] = [int(v) for v in args.input_shape.split("x")]
    ch = transport.ChannelModel.from_config(cfg["channel"])
    doc = analysis_document(descs, args.unit, workload, ch)
    if args.json:
        text = json.dumps(doc, indent=2, sort_keys=True)
    else:
        unit = analyzer.UNITS[args.unit][1]
        text = "\n".join([
            f"Backbone sizes (unit: {unit})",
            analyzer.format_rows(doc["table4"], analyzer.TABLE4_COLUMNS),
            "",
            f"Paradigms for {workload['n_inputs']} inputs of {'x'.join(map(str, workload['input_shape']))}, "
            f"N={workload['n_tasks']}, bandwidth {ch.bandwidth * 8 / 1e9:g} Gbit/s",
            analyzer.format_rows(doc["paradigms"], analyzer.PARADIGM_COLUMNS),
            "",
            *(f"note: {n}" for n in doc["notes"]),
        ])
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_report_delta(args) -> int:
    try:
        stl = json.loads(Path(args.stl).read_text(encoding="utf-8"))
        mtl = json.loads(Path(args.mtl).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"metrics file is not valid JSON: {exc}") from exc
    for doc, name in ((stl, args.stl), (mtl, args.mtl)):
        if not {"tasks", "accuracies"} <= set(doc):
            raise FormatError(f"{name}: not a metrics document")
    print(render_delta_table(stl, mtl))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtlsplit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", metavar="PATH", help="run config JSON; flags override it")
        if seed:
            sp.add_argument("--seed", type=int, metavar="U64")
        sp.add_argument("--out", metavar="PATH")
        return sp

    sp = common(sub.add_parser("gen-data", help="render the synthetic dataset"))
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train STL baselines or the MTL model"))
    sp.add_argument("--mode", choices=["stl", "mtl"], default="mtl")
    sp.add_argument("--dataset", metavar="PATH")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("finetune", help="two-rate fine-tuning, optionally adding a task"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", metavar="PATH")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--add-task", metavar="FACTOR")
    sp.set_defaults(func=cmd_finetune)

    sp = common(sub.add_parser("serve", help="run the head server"), seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--listen", metavar="ADDR:PORT")
    sp.add_argument("--mode", dest="paradigm", choices=["SC", "RoC"])
    sp.set_defaults(func=cmd_serve)

    sp = common(sub.add_parser("edge", help="stream a dataset through the edge client"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--connect", metavar="ADDR:PORT")
    sp.add_argument("--mode", dest="paradigm", choices=["SC", "RoC"])
    sp.add_argument("--dataset", metavar="PATH")
    sp.add_argument("--limit", type=int)
    sp.set_defaults(func=cmd_edge)

    sp = common(sub.add_parser("simulate", help="LoC/RoC/SC transfer times over the simulated channel"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset", metavar="PATH")
    sp.add_argument("--n-inputs", type=int)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("analyze", help="backbone size table and paradigm comparison"), seed=False)
    sp.add_argument("--descriptors", nargs="*", metavar="JSON")
    sp.add_argument("--checkpoint", help="add a desk-scale descriptor computed from this model")
    sp.add_argument("--unit", choices=sorted(analyzer.UNITS), default="si")
    sp.add_argument("--n-inputs", type=int)
    sp.add_argument("--n-tasks", type=int)
    sp.add_argument("--input-shape", metavar="WxHxC")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("report-delta", help="STL-vs-MTL accuracy table from two metrics files")
    sp.add_argument("stl")
    sp.add_argument("mtl")
    sp.set_defaults(func=cmd_report_delta)
    return p


def _setup_logging() -> None:
    level = os.environ.get("MTLSPLIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnsupportedFactorError, UsageError) as exc:
        print(f"mtlsplit: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, RemoteError, FormatError, FileNotFoundError, MtlSplitError, OSError) as exc:
        print(f"mtlsplit: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
