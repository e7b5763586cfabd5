#!/usr/bin/env python3
"""
fedfraud Main Entry Point
Preprocess the fraud table, run federated training in-process or over HTTP,
explain predictions and report results.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

# Add current directory to path
sys.path.append(str(Path(__file__).parent))

from config import AgentConfig, PortManager, RunConfig
from fedfraud.errors import ConfigError, FedFraudError

# Fixed artifact names under --out
SYNTHETIC_CSV = "synthetic.csv"
SYNTHETIC_SCHEMA = "synthetic_schema.json"
PROCESSED_FILE = "processed.json"
CORRELATION_FILE = "correlation.csv"
TEST_FILE = "test.json"
SIMULATION_FILE = "simulation.json"
METRICS_FILE = "metrics.csv"
PARAMS_FILE = "final_params.json"
EXPLANATIONS_JSON = "explanations.json"
EXPLANATIONS_TXT = "explanations.txt"
CONFIG_ECHO = "run_config.json"


def shard_file(index: int) -> str:
    return f"shard_{index}.json"


def banner(title: str):
    print("=" * 60)
    print(title)
    print("=" * 60)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON run configuration file")
    common.add_argument("--seed", type=int, default=None, help="Global seed (overrides config and FEDFRAUD_SEED)")
    common.add_argument("--out", default=None, help="Artifact directory (default: config out_dir)")
    common.add_argument("--log-level", default=None, help="Logging level (default: FEDFRAUD_LOG_LEVEL or info)")

    parser = argparse.ArgumentParser(prog="fedfraud", description="fedfraud - Federated fraud detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="Write a synthetic raw CSV and its schema")
    p.add_argument("--n", type=int, default=2000, help="Row count")
    p.add_argument("--d", type=int, default=8, help="Numeric feature columns")
    p.add_argument("--fraud-rate", type=float, default=0.1, help="Probability of the fraud label")
    p.add_argument("--categorical", type=int, default=2, help="Categorical columns")
    p.add_argument("--missing-rate", type=float, default=0.02, help="Fraction of blank cells")

    p = sub.add_parser("preprocess", parents=[common], help="Preprocess, split, shard and rebalance a raw CSV")
    p.add_argument("csv", help="Raw CSV file")
    p.add_argument("--schema", default=None, help="Schema JSON (default: config schema_path or inferred)")
    p.add_argument("--clients", type=int, default=None, help="Number of client shards")

    p = sub.add_parser("simulate", parents=[common], help="Run federated training in-process")
    p.add_argument("--clients", type=int, default=None, help="Number of clients")
    p.add_argument("--rounds", type=int, default=None, help="Maximum rounds")

    p = sub.add_parser("serve", parents=[common], help="Run the coordinator")
    p.add_argument("--port", type=int, default=None, help="Port to run on (default: 5000)")
    p.add_argument("--clients", type=int, default=None, help="Number of clients")
    p.add_argument("--rounds", type=int, default=None, help="Maximum rounds")

    p = sub.add_parser("agent", parents=[common], help="Run one client agent")
    p.add_argument("--client-id", required=True, help="Client identifier, e.g. client-1")
    p.add_argument("--shard", default=None, help="Shard file (default: <out>/shard_<n>.json from the id)")
    p.add_argument("--server", default=None, help="Coordinator URL (default: http://<host>:<port>)")
    p.add_argument("--port", type=int, default=None, help="Coordinator port when --server is not given")
    p.add_argument("--rounds", type=int, default=None, help="Stop after this many submitted rounds")

    p = sub.add_parser("explain", parents=[common], help="Shapley explanations per client shard")
    p.add_argument("--params", default=None, help="Params file (default: <out>/final_params.json)")
    p.add_argument("--dataset", default=None, help="Dataset with the rows to explain (default: <out>/test.json)")
    p.add_argument("--rows", default=None, help="Comma-separated row indices (default: config)")
    p.add_argument("--clients", type=int, default=None, help="Number of client shards")
    p.add_argument("--sampled", action="store_true", help="Use permutation sampling")
    p.add_argument("--permutations", type=int, default=None, help="Permutations for the sampled method")

    p = sub.add_parser("report", parents=[common], help="Print the per-round metrics and summary")

    p = sub.add_parser("predict", parents=[common], help="Fraud probabilities from a params file")
    p.add_argument("--params", default=None, help="Params file (default: <out>/final_params.json)")
    p.add_argument("--dataset", default=None, help="Processed dataset (default: <out>/test.json)")
    p.add_argument("--rows", default=None, help="Comma-separated row indices (default: all)")

    return parser


def parse_rows(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--rows must be comma-separated integers: {e}") from e


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Priority: CLI flag > FEDFRAUD_* env var > config file > defaults."""
    config = RunConfig.load(args.config).with_env()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    clients = getattr(args, "clients", None)
    if clients is not None:
        config = replace(config, federation=replace(config.federation, client_count=clients),
                         split=replace(config.split, shard_count=clients))
    rounds = getattr(args, "rounds", None)
    if rounds is not None and args.command != "agent":
        config = replace(config, federation=replace(config.federation, max_rounds=rounds))
    port = getattr(args, "port", None)
    if port is not None:
        config = replace(config, server=replace(config.server, port=port))
    if getattr(args, "sampled", False):
        config = replace(config, explain=replace(config.explain, sampled=True))
    permutations = getattr(args, "permutations", None)
    if permutations is not None:
        config = replace(config, explain=replace(config.explain, n_permutations=permutations))
    return config.resolved()


def load_shards(out: Path, count: int):
    from fedfraud.data_pipeline import ProcessedDataset

    return [ProcessedDataset.load(out / shard_file(i + 1)) for i in range(count)]


def cmd_gen_synthetic(args, config: RunConfig, out: Path) -> int:
    from fedfraud.seeding import derive_seed
    from fedfraud.synthetic import generate_synthetic, write_synthetic

    frame, schema = generate_synthetic(args.n, args.d, args.fraud_rate, derive_seed(config.seed, "synthetic"),
                                       n_categorical=args.categorical, missing_rate=args.missing_rate)
    csv_path = write_synthetic(frame, schema, out / SYNTHETIC_CSV, out / SYNTHETIC_SCHEMA)
    print(f"Wrote {len(frame)} rows ({int(frame['fraud_bool'].sum())} fraud) to {csv_path}")
    return 0


def cmd_preprocess(args, config: RunConfig, out: Path) -> int:
    from fedfraud.data_pipeline import DatasetSchema, load_csv, prepare_federated_data

    csv_path = Path(args.csv)
    if not csv_path.exists():
        raise FileNotFoundError(f"Input CSV not found: {csv_path}")
    schema_path = args.schema or config.schema_path
    if schema_path:
        schema = DatasetSchema.load(schema_path)
    else:
        schema = DatasetSchema.from_header(list(pd.read_csv(csv_path, nrows=0).columns))
    raw = load_csv(csv_path, schema, config.pipeline.missing_tokens)
    data = prepare_federated_data(raw, config.pipeline, config.split)

    data.processed.save(out / PROCESSED_FILE)
    data.correlation.to_csv(out / CORRELATION_FILE)
    data.test.save(out / TEST_FILE)
    for i, shard_data in enumerate(data.shards):
        shard_data.save(out / shard_file(i + 1))
    config.save(out / CONFIG_ECHO)

    print(f"Processed {data.processed.n_samples} rows into {data.processed.n_features} features")
    print(f"Train {data.train.n_samples} rows, test {data.test.n_samples} rows")
    for i, shard_data in enumerate(data.shards):
        counts = shard_data.class_counts()
        print(f"  {shard_file(i + 1)}: {shard_data.n_samples} rows (legit {counts[0]}, fraud {counts[1]})")
    return 0


def cmd_simulate(args, config: RunConfig, out: Path) -> int:
    from fedfraud.data_pipeline import ProcessedDataset
    from fedfraud.federation import simulate
    from fedfraud.metrics import write_history_csv
    from fedfraud.nn_core import save_params

    shards = load_shards(out, config.federation.client_count)
    validation = ProcessedDataset.load(out / TEST_FILE)

    def progress(state):
        record = state.history[-1]
        print(f"  round {record.round:3d}  accuracy {record.accuracy:.4f}  f1 {record.f1:.4f}  loss {record.loss:.4f}")

    report = simulate(config.federation, shards, validation, on_round=progress)
    save_params(out / PARAMS_FILE, report.final_params, report.model_config)
    write_history_csv(out / METRICS_FILE, report.history)
    report.save(out / SIMULATION_FILE, PARAMS_FILE)
    print(f"Finished after {report.rounds_completed} rounds ({report.stop_reason})")
    return 0


def cmd_serve(args, config: RunConfig, out: Path) -> int:
    from fedfraud.app import CoordinatorApp
    from fedfraud.data_pipeline import ProcessedDataset
    from fedfraud.metrics import write_history_csv
    from fedfraud.nn_core import save_params

    server = config.server
    if not PortManager().is_port_free(server.port, server.host):
        raise ConfigError(f"port {server.port} on {server.host} is already in use")
    validation = ProcessedDataset.load(out / TEST_FILE)
    app = CoordinatorApp(server, validation)

    print(f"\nCoordinator running on: http://{server.host}:{server.port}")
    print(f"API Documentation: http://{server.host}:{server.port}/api/docs")
    print("\nPress Ctrl+C to stop...")
    try:
        app.run()
    finally:
        coordinator = app.coordinator
        if coordinator.state.history:
            save_params(out / PARAMS_FILE, coordinator.global_params(), coordinator.model_config)
            write_history_csv(out / METRICS_FILE, list(coordinator.state.history))
            print(f"Saved round {coordinator.state.round} model to {out / PARAMS_FILE}")
    return 0


def cmd_agent(args, config: RunConfig, out: Path) -> int:
    from fedfraud.agent import run_agent

    shard_path = args.shard
    if shard_path is None:
        suffix = args.client_id.rsplit("-", 1)[-1]
        if not suffix.isdigit():
            raise ConfigError("--shard is required when the client id does not end in a number")
        shard_path = str(out / shard_file(int(suffix)))
    server_url = args.server or f"http://{config.server.host}:{config.server.port}"
    agent_config = AgentConfig(
        client_id=args.client_id,
        shard_path=shard_path,
        server_url=server_url,
        poll_interval=config.server.poll_interval,
        max_rounds=args.rounds,
    )
    report = run_agent(agent_config)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_explain(args, config: RunConfig, out: Path) -> int:
    from fedfraud.data_pipeline import ProcessedDataset
    from fedfraud.explain import explain_clients, explanation_report, global_importance
    from fedfraud.nn_core import load_params
    from fedfraud.reports import render

    params = load_params(args.params or out / PARAMS_FILE)
    dataset = ProcessedDataset.load(args.dataset or out / TEST_FILE)
    rows = parse_rows(args.rows) or list(config.explain.rows)
    shards = load_shards(out, config.split.shard_count)

    explanations = explain_clients(params, dataset, rows, shards, config.explain)
    reports = [explanation_report(e) for e in explanations]
    ranking = global_importance(explanations)
    importance_text = render("importance.txt.j2", ranking=ranking, count=len(explanations))
    text = "\n".join(r.text for r in reports) + "\n" + importance_text

    with open(out / EXPLANATIONS_JSON, "w", encoding="utf-8") as f:
        json.dump({
            "explanations": [r.document for r in reports],
            "global_importance": [{"feature": name, "mean_abs_phi": value} for name, value in ranking],
        }, f, indent=2)
    with open(out / EXPLANATIONS_TXT, "w", encoding="utf-8") as f:
        f.write(text)
    print(text)
    return 0


def cmd_report(args, config: RunConfig, out: Path) -> int:
    from fedfraud.metrics import read_history_csv
    from fedfraud.reports import render

    summary_path = out / SIMULATION_FILE
    if not summary_path.exists():
        raise FileNotFoundError(f"Simulation summary not found: {summary_path}")
    with open(summary_path, "r", encoding="utf-8") as f:
        summary = json.load(f)
    history = read_history_csv(out / METRICS_FILE)
    best = max(history, key=lambda r: r.accuracy) if history else None
    print(render("simulation_report.txt.j2", summary=summary, history=history, best=best), end="")
    return 0


def cmd_predict(args, config: RunConfig, out: Path) -> int:
    from fedfraud.agent import predict
    from fedfraud.data_pipeline import ProcessedDataset

    dataset = ProcessedDataset.load(args.dataset or out / TEST_FILE)
    rows = parse_rows(args.rows)
    features = dataset.features if rows is None else dataset.features[np.asarray(rows, dtype=np.int64)]
    probabilities = predict(args.params or out / PARAMS_FILE, features)
    print(json.dumps({"rows": rows if rows is not None else list(range(dataset.n_samples)),
                      "probabilities": probabilities.tolist()}))
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "preprocess": cmd_preprocess,
    "simulate": cmd_simulate,
    "serve": cmd_serve,
    "agent": cmd_agent,
    "explain": cmd_explain,
    "report": cmd_report,
    "predict": cmd_predict,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for fedfraud."""
    load_dotenv()
    args = build_parser().parse_args(argv)

    level = (args.log_level or os.environ.get("FEDFRAUD_LOG_LEVEL") or "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = load_run_config(args)
        if config.server.log_level != level.lower():
            config = replace(config, server=replace(config.server, log_level=level.lower()))
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command in ("simulate", "serve"):
            banner(f"FEDFRAUD - {args.command.upper()}")
        return COMMANDS[args.command](args, config, out)

    except KeyboardInterrupt:
        print("\nfedfraud shutting down...")
        return 0
    except FedFraudError as e:
        print(f"error: {e.error_class}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: path_error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
