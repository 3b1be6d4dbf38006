"""Command-line operator surface.

Subcommands: pretrain, serve, retrain, infer, attack-invert, attack-shadow,
budget, keygen, reduce, verify-dp. Results land at the declared output paths
via atomic replace; a machine-readable key=value summary goes to stdout.
Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.

An optional --config file holds flat key=value defaults; explicit flags win.
ROULETTE_LOG in {error, info, debug} controls log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import tempfile

import numpy as np

from . import attacks, data, dp, keygen, reduction, training, wire
from .device import DeviceSession, infer_roundtrip
from .edge import EdgeServer, serve_tcp, spawn_loopback
from .errors import RouletteError
from .model import SplitModel, load_model, save_model, split_from_flags
from .tensor import forward
from .wire import FrameStream

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        raise UsageError(message)


def _atomic_write(path: str, payload: bytes | str) -> None:
    mode = "wb" if isinstance(payload, bytes) else "w"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".roulette-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(**pairs) -> None:
    for key, value in pairs.items():
        if isinstance(value, float):
            print(f"{key}={value:.6g}")
        else:
            print(f"{key}={value}")


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    return path


def _load_dataset(spec: str) -> data.LabeledSet:
    """Either an RLTD path or an inline generator such as
    blobs:classes=3,per_class=200,dim=8,spread=0.08,seed=1."""
    if spec.startswith("blobs:"):
        params = {"classes": 3, "per_class": 200, "dim": 8, "spread": 0.08, "seed": 1}
        body = spec[len("blobs:"):]
        if body:
            for item in body.split(","):
                key, _, value = item.partition("=")
                if key not in params:
                    raise UsageError(f"unknown blobs parameter {key!r}")
                params[key] = float(value) if key == "spread" else int(value)
        return data.gen_blobs(int(params["classes"]), int(params["per_class"]),
                              int(params["dim"]), params["spread"], int(params["seed"]))
    _require_file(spec, "data")
    return data.load_rltd(spec)


def _dp_config(args) -> dp.DpConfig:
    epsilon = args.epsilon if args.epsilon is not None else math.inf
    return dp.DpConfig(
        bound=args.bound,
        epsilon=epsilon,
        eta=args.eta,
        noise_layer_index=args.noise_layer,
    )


def _split_model(args) -> SplitModel:
    layers = load_model(_require_file(args.model, "model"))
    if args.split_index is not None:
        return SplitModel.partition(layers, args.split_index)
    return split_from_flags(layers)


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"address must be host:port, got {text!r}")
    return host, int(port)


def _open_session(args, model: SplitModel):
    """Connect to --addr, or spin an in-process edge; either way the split
    wire protocol is the only channel."""
    import socket

    if args.addr:
        host, port = _parse_addr(args.addr)
        stream = FrameStream(socket.create_connection((host, port)))
        worker = None
    else:
        stream, worker = spawn_loopback(model.back)
    session = DeviceSession(stream, model.front, model.n_classes,
                            batch_max=max(args.batch, 256))
    session.hello()
    return session, worker


# ---------------------------------------------------------------------------
# Command handlers


def _cmd_keygen(args) -> int:
    rng = np.random.default_rng(args.seed)
    key = keygen.key_gen(args.classes, rng)
    lines = f"N={key.n_classes}\nkey=" + ",".join(str(v) for v in key.forward) + "\n"
    _atomic_write(args.out, lines)
    _emit(classes=args.classes, out=args.out,
          key=",".join(str(v) for v in key.forward))
    return EXIT_OK


def _cmd_budget(args) -> int:
    total = dp.budget(args.epsilon, args.eta, args.xi)
    _emit(epsilon=args.epsilon, eta=args.eta, xi=args.xi, epsilon_total=total)
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    dataset = _load_dataset(args.data)
    hidden = [int(h) for h in args.hidden.split(",") if h]
    cfg = training.PretrainConfig(epochs=args.epochs, batch_size=args.batch,
                                  lr=args.lr, seed=args.seed)
    model = training.pretrain_backbone(dataset, hidden, args.split_index, cfg)
    from .model import dump_layers

    _atomic_write(args.out, dump_layers(model.layers))
    acc = training.accuracy(model.layers, dataset)
    _emit(out=args.out, accuracy=acc, split_index=args.split_index,
          ir_width=model.ir_width, classes=model.n_classes)
    return EXIT_OK


def _cmd_serve(args) -> int:
    model = _split_model(args)
    host, port = _parse_addr(args.addr)
    server = EdgeServer(model.back)
    listener, thread = serve_tcp(server, host, port)
    bound = listener.getsockname()
    _emit(addr=f"{bound[0]}:{bound[1]}", ir_width=model.ir_width,
          classes=model.n_classes)
    sys.stdout.flush()
    try:
        thread.join()
    except KeyboardInterrupt:
        server.shutdown()
        listener.close()
    return EXIT_OK


def _cmd_retrain(args) -> int:
    model = _split_model(args)
    key = keygen.load_key(_require_file(args.key, "key"))
    dataset = _load_dataset(args.data)
    dp_cfg = _dp_config(args)
    cfg = training.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr_front=args.lr,
        lr_disc=args.lr, dist_weight=args.dist_weight, dp=dp_cfg, seed=args.seed)
    session, worker = _open_session(args, model)
    try:
        result = training.hybrid_train(session, dataset, key, cfg,
                                       model.frozen_original_front)
    finally:
        session.close()
        if worker is not None:
            worker.join(timeout=5.0)
    from .model import dump_layers

    _atomic_write(args.out, dump_layers(model.layers))
    if args.log:
        _atomic_write(args.log, "".join(e.line() + "\n" for e in result.log))
    receipt = session.last_receipt
    if args.receipt and receipt is not None:
        _atomic_write(args.receipt, receipt.to_text())
    last = result.log[-1] if result.log else None
    _emit(out=args.out,
          final_loss_class=last.loss_class if last else float("nan"),
          final_dist_value=last.dist_value if last else float("nan"),
          epsilon_total=receipt.epsilon_total if receipt else float("nan"))
    return EXIT_OK


def _cmd_infer(args) -> int:
    model = _split_model(args)
    key = keygen.load_key(_require_file(args.key, "key"))
    dataset = _load_dataset(args.data)
    dp_cfg = _dp_config(args)
    rng = np.random.default_rng(args.seed)
    session, worker = _open_session(args, model)
    decrypted = []
    raw = []
    try:
        for start in range(0, len(dataset), args.batch):
            x = dataset.inputs[start:start + args.batch]
            classes = session.infer(x, dp_cfg, rng)
            raw.append(classes)
            decrypted.append(key.decrypt_labels(classes))
    finally:
        session.close()
        if worker is not None:
            worker.join(timeout=5.0)
    decrypted = np.concatenate(decrypted)
    raw = np.concatenate(raw)
    if args.out:
        body = "".join(f"{i}\t{d}\n" for i, d in enumerate(decrypted))
        _atomic_write(args.out, body)
    summary = {"samples": len(decrypted)}
    if len(dataset.labels):
        summary["decrypted_accuracy"] = float((decrypted == dataset.labels).mean())
        summary["raw_accuracy"] = float((raw == dataset.labels).mean())
    _emit(**summary)
    return EXIT_OK


def _cmd_attack_invert(args) -> int:
    model = _split_model(args)
    dataset = _load_dataset(args.data)
    dp_cfg = _dp_config(args)
    rng = np.random.default_rng(args.seed)
    count = min(args.samples, len(dataset))
    inputs = dataset.inputs[:count]
    if args.clean:
        targets, _ = forward(model.front, inputs)
    else:
        targets = dp.dp_forward(model.front, inputs, dp_cfg, rng).output
    cfg = attacks.InversionConfig(steps=args.steps, step_size=args.step_size)
    recovered = attacks.invert(model.front, targets, cfg)
    sample_mse = [attacks.mse(recovered[i], inputs[i]) for i in range(count)]
    if args.out:
        import io

        buf = io.StringIO()
        buf.write("sample_id\tmse\n")
        for i, value in enumerate(sample_mse):
            buf.write(f"{i}\t{value:.6f}\n")
        buf.write(f"mean_mse={np.mean(sample_mse):.6f}\n")
        _atomic_write(args.out, buf.getvalue())
    _emit(samples=count, mean_mse=float(np.mean(sample_mse)))
    return EXIT_OK


def _cmd_attack_shadow(args) -> int:
    model = _split_model(args)
    true_key = keygen.load_key(_require_file(args.key, "key"))
    public = _load_dataset(args.data)
    victim = _load_dataset(args.victim_data)
    dp_cfg = _dp_config(args)
    rng = np.random.default_rng(args.seed)
    cfg = attacks.ShadowAttackConfig(epochs=args.epochs, batch_size=args.batch,
                                     lr=args.lr, dp=dp_cfg, seed=args.seed)
    traffic = dp.dp_forward(model.front, victim.inputs, dp_cfg, rng).output
    result = attacks.shadow_attack(public, model, traffic, true_key, cfg)
    _emit(attack_accuracy=result.attack_accuracy,
          candidates=result.n_candidates, true_index=result.true_index)
    return EXIT_OK


def _cmd_reduce(args) -> int:
    with open(_require_file(args.cnf, "cnf"), "r", encoding="ascii") as fh:
        instance = reduction.parse_dimacs(fh.read())
    net = reduction.build_reduction(instance)
    n, m1, o = net.dims
    summary = {"n": instance.n_vars, "m": instance.n_clauses,
               "Q": instance.occurrence_bound, "dims": f"{n}x{m1}x{o}"}
    if args.check:
        comp = reduction.check_completeness(net, instance)
        sound = reduction.check_soundness(net, instance)
        summary["satisfying_assignments"] = comp.n_satisfying
        summary["completeness_violations"] = len(comp.violations)
        summary["counting_violations"] = sound.counting_violations
        summary["max_unsat_over_bound"] = sound.max_unsat_over_bound
        if args.out:
            name = os.path.basename(args.cnf)
            _atomic_write(args.out, reduction.report_text(
                name, instance, net, comp, sound))
    _emit(**summary)
    return EXIT_OK


def _cmd_verify_dp(args) -> int:
    rng = np.random.default_rng(args.seed)
    bound = args.bound

    def f(x):
        return float(np.clip(np.atleast_1d(x).sum(), -bound, bound))

    eps_hat = dp.verify_dp_scalar(f, bound, -bound, bound, a=1.0,
                                  sigma=args.epsilon, n_samples=args.samples,
                                  rng=rng)
    summary = {"epsilon": args.epsilon, "epsilon_hat_scalar": eps_hat,
               "scalar_bound": args.epsilon}
    if args.eta > 0:
        mech = dp.clipped_laplace_mechanism(
            lambda xs: np.clip(xs.sum(axis=1), -bound, bound), bound, 1.0,
            args.epsilon)
        eps_hat_null = dp.verify_dp_nullified(mech, bound, -bound, args.eta,
                                              args.samples, rng)
        summary["epsilon_hat_nullified"] = eps_hat_null
        summary["nullified_bound"] = math.log(
            (1 - args.eta) * math.exp(args.epsilon) + args.eta)
    _emit(**summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly


def _add_dp_flags(sub) -> None:
    sub.add_argument("--epsilon", type=float, default=None,
                     help="Laplace budget parameter; omit to disable noise")
    sub.add_argument("--eta", type=float, default=0.0, help="nullification rate")
    sub.add_argument("--bound", type=float, default=1.0, help="clipping threshold")
    sub.add_argument("--noise-layer", type=int, default=0, dest="noise_layer",
                     help="front layers executed before the noise injection")


def build_parser() -> tuple[_Parser, dict]:
    parser = _Parser(prog="roulette", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=None,
                        help="flat key=value defaults file; flags win")
    subs = parser.add_subparsers(dest="command", metavar="command")
    registry: dict[str, argparse.ArgumentParser] = {}

    def sub(name, func, **kwargs):
        p = subs.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        registry[name] = p
        return p

    p = sub("keygen", _cmd_keygen, help="generate a derangement key file")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub("budget", _cmd_budget, help="composed privacy budget")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--xi", type=float, default=1.0)

    p = sub("pretrain", _cmd_pretrain, help="train the full backbone, then partition")
    p.add_argument("--data", required=True, help="RLTD path or blobs:... spec")
    p.add_argument("--hidden", default="16,16", help="comma-separated hidden widths")
    p.add_argument("--split-index", type=int, required=True, dest="split_index")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub("serve", _cmd_serve, help="run the edge server")
    p.add_argument("--model", required=True)
    p.add_argument("--split-index", type=int, default=None, dest="split_index")
    p.add_argument("--addr", default="127.0.0.1:7433")

    p = sub("retrain", _cmd_retrain, help="retrain the front-end over the protocol")
    p.add_argument("--model", required=True)
    p.add_argument("--split-index", type=int, default=None, dest="split_index")
    p.add_argument("--key", required=True)
    p.add_argument("--data", required=True)
    _add_dp_flags(p)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--lambda", type=float, default=1.0, dest="dist_weight",
                   help="weight of the indistinguishability term")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--addr", default=None, help="edge address; loopback if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="per-batch training log path")
    p.add_argument("--receipt", default=None, help="privacy receipt path")

    p = sub("infer", _cmd_infer, help="co-inference with decryption")
    p.add_argument("--model", required=True)
    p.add_argument("--split-index", type=int, default=None, dest="split_index")
    p.add_argument("--key", required=True)
    p.add_argument("--data", required=True)
    _add_dp_flags(p)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--addr", default=None)
    p.add_argument("--out", default=None, help="predictions output path")

    p = sub("attack-invert", _cmd_attack_invert, help="model inversion attack")
    p.add_argument("--model", required=True)
    p.add_argument("--split-index", type=int, default=None, dest="split_index")
    p.add_argument("--data", required=True)
    _add_dp_flags(p)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--step-size", type=float, default=0.5, dest="step_size")
    p.add_argument("--clean", action="store_true",
                   help="attack the clean representation instead of the noisy one")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub("attack-shadow", _cmd_attack_shadow, help="shadow-model key attack")
    p.add_argument("--model", required=True)
    p.add_argument("--split-index", type=int, default=None, dest="split_index")
    p.add_argument("--key", required=True, help="victim's key (for scoring)")
    p.add_argument("--data", required=True, help="attacker-side dataset")
    p.add_argument("--victim-data", required=True, dest="victim_data")
    _add_dp_flags(p)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)

    p = sub("reduce", _cmd_reduce, help="build the 3SAT reduction network")
    p.add_argument("--cnf", required=True)
    p.add_argument("--check", action="store_true",
                   help="run the exhaustive completeness/soundness checks")
    p.add_argument("--out", default=None)

    p = sub("verify-dp", _cmd_verify_dp, help="empirical budget verification")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--bound", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)

    return parser, registry


def _apply_config(namespace, sub_parser, path: str, argv: list[str]) -> None:
    """Fill fields from a flat key=value file; explicitly passed flags win."""
    _require_file(path, "config")
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"config line without '=': {line!r}")
            values[key.strip().replace("-", "_")] = value.strip()
    for action in sub_parser._actions:
        if action.dest not in values:
            continue
        explicit = any(tok == opt or tok.startswith(opt + "=")
                       for opt in action.option_strings for tok in argv)
        if explicit:
            continue
        raw = values[action.dest]
        if action.type is not None:
            raw = action.type(raw)
        elif action.const is True:  # store_true flags
            raw = raw.lower() in ("1", "true", "yes")
        setattr(namespace, action.dest, raw)


def _setup_logging() -> None:
    level_name = os.environ.get("ROULETTE_LOG", "error").lower()
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(level_name, logging.ERROR)
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser, registry = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.config:
            _apply_config(args, registry[args.command], args.config, list(argv))
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RouletteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
