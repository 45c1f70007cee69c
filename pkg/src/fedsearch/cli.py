"""Command-line entry points.

One binary with subcommands covering the whole pipeline: synthetic data
generation, local and federated training (simulated or networked),
index building, querying, evaluation, and the query service.

Every run writes a reproducibility record (``<output>.run.json`` with
the full flag set and library versions) beside its primary output.
Exit codes: 0 success, 2 configuration error, 3 protocol/round error,
4 data error.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import autoencoder as ae
from . import datasets as ds
from . import evaluation as ev
from . import federation as fed
from . import modelio
from . import retrieval as rt
from . import service as svc
from . import transport as tp
from .errors import ConfigError, DataError, DecodeError, EvaluationError, FeatureIndexError, ProtocolError, TrainingError
from .version import __version__


def _parse_filters(text: str) -> tuple[int, ...]:
    try:
        filters = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"bad filter list {text!r}; expected comma-separated integers") from None
    if not filters:
        raise ConfigError("filter list must not be empty")
    return filters


def _parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"bad endpoint {text!r}; expected host:port")
    return host, int(port)


def model_config_from_args(args) -> ae.AutoencoderConfig:
    filters = _parse_filters(args.filters)
    if args.residual:
        residual = _parse_filters(args.residual)
    else:
        last = filters[-1]
        residual = (max(last // 4, 1), max(last // 8, 1), last)
    decoder = tuple(reversed(filters[:-1])) + (3,)
    return ae.AutoencoderConfig(
        image_size=(3, args.image_size, args.image_size),
        encoder_filters=filters,
        residual_filters=residual,
        bottleneck_dim=args.bottleneck,
        decoder_filters=decoder,
        seed=args.seed,
    )


def round_config_from_args(args, roster) -> fed.RoundConfig:
    return fed.RoundConfig(
        model=model_config_from_args(args),
        roster=tuple(roster),
        rounds=args.rounds,
        local_epochs=args.local_epochs,
        batch_size=args.batch,
        optimizer=args.optimizer,
        lr=args.lr,
        strategy=args.strategy,
        seed=args.seed,
    )


def write_run_record(args, output_path) -> None:
    record = {
        "command": args.command,
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "versions": {
            "fedsearch": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    with open(str(output_path) + ".run.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_client(manifest_path) -> tuple[str, np.ndarray, int]:
    manifest = ds.load_manifest(manifest_path)
    images, records = ds.load_split_arrays(manifest, "train")
    client_id = records[0].center or Path(manifest_path).parent.name
    return client_id, images, len(records)


def cmd_synth(args) -> int:
    config = ds.SynthConfig(
        clients=args.clients,
        train_per_client=args.train,
        val_per_client=args.val,
        test_per_client=args.test,
        image_size=args.image_size,
        seed=args.seed,
    )
    manifests = ds.synth_generate(config, args.out)
    write_run_record(args, Path(args.out) / "synth")
    for k, manifest in enumerate(manifests):
        print(f"client-{k}: {manifest.count()} images -> {Path(args.out) / f'client-{k}'}")
    return 0


def cmd_train_local(args) -> int:
    manifest = ds.load_manifest(args.manifest)
    images, _ = ds.load_split_arrays(manifest, "train")
    model = ae.build_model(model_config_from_args(args))
    optimizer = ad.adam(args.lr) if args.optimizer == "adam" else ad.sgd(args.lr)
    trained, trace = ae.train(model, images, epochs=args.epochs, optimizer=optimizer,
                              batch_size=args.batch)
    modelio.save_model(trained, args.out)
    with open(str(args.out) + ".losses.txt", "w") as fh:
        for epoch, loss in enumerate(trace):
            fh.write(f"{epoch} {loss:.8f}\n")
    write_run_record(args, args.out)
    if trace:
        print(f"trained {args.epochs} epochs: loss {trace[0]:.6f} -> {trace[-1]:.6f}")
    else:
        print("trained 0 epochs: model equals initialization")
    print(f"model written to {args.out}")
    return 0


def _finish_federation(args, config, final_weights, records) -> int:
    model = ae.with_weights(ae.build_model(config.model), final_weights.values)
    modelio.save_model(model, args.out)
    fed.write_round_log(records, str(args.out) + ".rounds.jsonl")
    write_run_record(args, args.out)
    last = records[-1].mean_client_loss if records else None
    print(f"{config.rounds} rounds complete; final mean client loss: "
          f"{last if last is not None else 'n/a'}")
    print(f"global model written to {args.out}")
    return 0


def cmd_fed_sim(args) -> int:
    clients = [_load_client(path) for path in args.manifest]
    roster = [fed.ClientSpec(cid, n) for cid, _, n in clients]
    config = round_config_from_args(args, roster)
    datasets = {cid: images for cid, images, _ in clients}
    result = tp.simulate_network(config, datasets)
    if result.aborted:
        raise fed.RoundAbortError(f"simulation aborted at round {result.aborted_round}")
    return _finish_federation(args, config, result.final_weights, result.records)


def cmd_fed_server(args) -> int:
    roster = []
    for part in args.roster.split(","):
        client_id, _, count = part.partition(":")
        if not client_id or not count.isdigit():
            raise ConfigError(f"bad roster entry {part!r}; expected id:count")
        roster.append(fed.ClientSpec(client_id, int(count)))
    config = round_config_from_args(args, roster)
    host, port = _parse_endpoint(args.listen)
    server = tp.WireServer(config, host=host, port=port, timeout=args.timeout)
    print(f"listening on {server.host}:{server.port}; waiting for {len(roster)} clients")
    result = server.run()
    if result.aborted:
        raise fed.RoundAbortError(f"federation aborted at round {result.aborted_round}")
    return _finish_federation(args, config, result.final_weights, result.records)


def cmd_fed_client(args) -> int:
    manifest = ds.load_manifest(args.manifest)
    images, records = ds.load_split_arrays(manifest, "train")
    roster = [fed.ClientSpec(args.client_id, len(records))]
    config = round_config_from_args(args, roster)
    host, port = _parse_endpoint(args.server)
    tp.run_wire_client(host, port, args.client_id, images, config, timeout=args.timeout)
    print(f"client {args.client_id}: federation complete")
    return 0


def cmd_index(args) -> int:
    model = modelio.load_model(args.model)
    manifest = ds.load_manifest(args.manifest)
    index = rt.build_index(model, manifest)
    rt.save_index(index, args.out)
    write_run_record(args, args.out)
    print(f"indexed {len(index)} images -> {args.out}")
    return 0


def cmd_query(args) -> int:
    model = modelio.load_model(args.model)
    index = rt.load_index(args.index)
    image = ds.load_image(args.image)
    result = rt.search(index, model, image, args.k, args.scenario,
                       query_magnification=args.magnification or None)

    def print_hits(hits, start=1):
        for rank, hit in enumerate(hits, start=start):
            marker = ""
            if args.true_label:
                marker = "  [match]" if hit.label == args.true_label else "  [miss]"
            print(f"{rank:3d}. {hit.entry_id}  d={hit.distance:.6f}  {hit.label:9s} {hit.magnification}{marker}")

    if result.groups is not None:
        for magnification, hits in result.groups:
            print(f"-- {magnification} --")
            print_hits(hits)
    else:
        print_hits(result.hits)
    print(f"elapsed {result.elapsed_seconds:.4f}s over {len(index)} entries")
    return 0


def cmd_eval(args) -> int:
    model = modelio.load_model(args.model)
    index = rt.load_index(args.index)
    manifest = ds.load_manifest(args.manifest)
    report = ev.evaluate(index, model, manifest, k=args.k, scenario=args.scenario)
    ev.write_report(report, args.out)
    write_run_record(args, args.out)
    cm = report.confusion
    print(f"queries={cm.total} tp={cm.tp} fp={cm.fp} fn={cm.fn} tn={cm.tn}")
    print(f"accuracy={report.accuracy:.4f} precision={report.precision:.4f} f1={report.f1:.4f}")
    mean_s, p95_s = ev.timing_summary([r.seconds for r in report.per_query])
    print(f"search seconds: mean={mean_s:.4f} p95={p95_s:.4f}")
    print(f"report written to {args.out}")
    return 0


def cmd_serve(args) -> int:
    host, port = _parse_endpoint(args.listen)
    print(f"serving on http://{host}:{port} (ctrl-c to stop)")
    svc.serve(args.model, args.index, host=host, port=port,
              data_root=args.data_root, ui_root=args.ui_root)
    return 0


def _add_model_flags(parser):
    parser.add_argument("--image-size", type=int, default=64, help="square input size (default 64)")
    parser.add_argument("--filters", default="32,64,128,256", help="encoder filter counts")
    parser.add_argument("--residual", default="", help="residual filter counts (default derived)")
    parser.add_argument("--bottleneck", type=int, default=200, help="feature vector length")
    parser.add_argument("--seed", type=int, default=0)


def _add_train_flags(parser):
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")


def _add_round_flags(parser):
    parser.add_argument("--rounds", type=int, default=10)
    parser.add_argument("--local-epochs", type=int, default=1)
    parser.add_argument("--strategy", choices=["fedavg", "fedadagrad"], default="fedavg")
    parser.add_argument("--timeout", type=float, default=60.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsearch", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic multi-client dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--train", type=int, default=80)
    p.add_argument("--val", type=int, default=20)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-local", help="train one client's model on its own manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=int, default=30)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_local)

    p = sub.add_parser("fed-sim", help="federated training over the in-process transport")
    p.add_argument("--manifest", action="append", required=True, type=Path,
                   help="one per client; repeat the flag")
    p.add_argument("--out", required=True, type=Path)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_round_flags(p)
    p.set_defaults(func=cmd_fed_sim)

    p = sub.add_parser("fed-server", help="federation server over TCP")
    p.add_argument("--listen", required=True, help="host:port")
    p.add_argument("--roster", required=True, help="comma-separated id:samplecount pairs")
    p.add_argument("--out", required=True, type=Path)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_round_flags(p)
    p.set_defaults(func=cmd_fed_server)

    p = sub.add_parser("fed-client", help="federation client over TCP")
    p.add_argument("--server", required=True, help="host:port")
    p.add_argument("--client-id", required=True)
    p.add_argument("--manifest", required=True, type=Path)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_round_flags(p)
    p.set_defaults(func=cmd_fed_client)

    p = sub.add_parser("index", help="encode train+validation images into a feature index")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank the index against one query image")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--index", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--scenario", choices=["sen1", "sen2"], default="sen1")
    p.add_argument("--magnification", default="")
    p.add_argument("--true-label", default="")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="retrieval-as-classification over a test manifest")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--index", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--scenario", choices=["sen1", "sen2"], default="sen1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="HTTP query service over a model + index")
    p.add_argument("--listen", default="127.0.0.1:8080")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--index", required=True, type=Path)
    p.add_argument("--data-root", type=Path, default=None)
    p.add_argument("--ui-root", type=Path, default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, DecodeError, FeatureIndexError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
