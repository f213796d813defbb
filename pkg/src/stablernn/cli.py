"""Command-line front end: generate, train, certify, verify, compare, probe.

Exit status:
  0  success
  1  verification verdict unsafe / empirical probe failed
  2  input/output error
  3  certificate does not hold
  4  unknown architecture tag or corrupt model file
  5  verification refused: model uncertified and --advisory not given
  6  dimension mismatch between models and data
  7  training finished without reaching the requested certificate
  8  plant simulation failure during data generation
"""
import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__, certificates, plant, verification
from ._utils import sha256_file
from .data import read_dataset, write_dataset
from .exceptions import ModelFileError, PlantEventError, ShapeError, UnknownArchitectureError
from .models import init_model
from .models.base import Dims
from .models.io import load_model, save_model

EXIT_OK, EXIT_UNSAFE, EXIT_IO, EXIT_CERT, EXIT_MODEL_FILE = 0, 1, 2, 3, 4
EXIT_REFUSED, EXIT_DIMS, EXIT_UNCERTIFIED, EXIT_PLANT = 5, 6, 7, 8

DEFAULT_OUT_ENV = "STABLERNN_OUT"
DESK_EPOCHS, FULL_EPOCHS = 200, 1000


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _out_dir(args):
    path = args.out or os.environ.get(DEFAULT_OUT_ENV) or "."
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CommandError(EXIT_IO, f"output directory {path} is not writable")
    return path


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CommandError(EXIT_IO, f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def _write(path, text):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {path}: {exc}") from exc
    return path


def _load_model(path):
    try:
        return load_model(path)
    except UnknownArchitectureError as exc:
        raise CommandError(EXIT_MODEL_FILE, f"{path}: {exc}") from exc
    except ModelFileError as exc:
        where = f":{exc.location}" if getattr(exc, "location", None) else ""
        raise CommandError(EXIT_MODEL_FILE, f"{path}{where}: {exc}") from exc
    except (ShapeError, ValueError) as exc:
        raise CommandError(EXIT_MODEL_FILE, f"{path}: {exc}") from exc
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read {path}: {exc}") from exc


def _load_dataset(path):
    try:
        return read_dataset(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CommandError(EXIT_IO, f"cannot read dataset {path}: {exc}") from exc


def _manifest(out, command, args, artifacts, seeds):
    files = sorted(set(artifacts))
    body = {
        "command": command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seeds": seeds,
        "tool_version": __version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "artifacts": {os.path.relpath(p, out): sha256_file(p) for p in files},
    }
    path = os.path.join(out, f"manifest_{command}.json")
    _write(path, json.dumps(body, indent=1, sort_keys=True) + "\n")
    return path


# -- generate --------------------------------------------------------------------------


def cmd_generate(args):
    out = _out_dir(args)
    cfg = plant.PlantConfig.from_dict(_read_json(args.plant_config)) if args.plant_config else plant.PlantConfig()
    try:
        ds = plant.benchmark_dataset(args.n_train, args.n_val, args.n_test, args.T_s, args.T_w, seed=args.seed, cfg=cfg)
    except (PlantEventError, RuntimeError) as exc:
        raise CommandError(EXIT_PLANT, f"plant simulation failed: {exc}") from exc
    except ValueError as exc:
        raise CommandError(EXIT_IO, f"invalid generation settings: {exc}") from exc
    try:
        files = write_dataset(ds, out)
    except OSError as exc:
        raise CommandError(EXIT_IO, str(exc)) from exc
    files.append(_write(os.path.join(out, "plant_config.json"), json.dumps(cfg.to_dict(), indent=1) + "\n"))
    _manifest(out, "generate", args, files, {"seed": args.seed})
    print(f"wrote {len(ds.sequences)} sequences to {out}")
    return EXIT_OK


# -- train -----------------------------------------------------------------------------


def _train_config(args, seed):
    from .training import TrainConfig

    overrides = _read_json(args.train_config) if args.train_config else {}
    epochs = FULL_EPOCHS if args.paper_scale else DESK_EPOCHS
    if args.epochs is not None:
        epochs = args.epochs
    base = {"epochs": epochs, "seed": seed}
    for name in ("lr", "batch_size", "clip_norm", "optimizer"):
        if getattr(args, name) is not None:
            base[name] = getattr(args, name)
    try:
        return TrainConfig(**{**base, **overrides})
    except (TypeError, ValueError) as exc:
        raise CommandError(EXIT_IO, f"invalid training configuration: {exc}") from exc


def cmd_train(args):
    from . import physics
    from .training import train

    out = _out_dir(args)
    ds = _load_dataset(args.data)
    if ds.split is None:
        raise CommandError(EXIT_IO, f"dataset {args.data} has no split file")
    if args.n_train is not None:
        ds.split.train = ds.split.train[: args.n_train]
    cfg = _train_config(args, args.seed)
    target = "dISS" if args.delta_iss else ("ISS" if args.iss else None)
    n_u, n_y = ds.sequences[0].u.shape[1], ds.sequences[0].y.shape[1]
    arch = args.architecture
    if arch == "composite":
        if target:
            raise CommandError(EXIT_CERT, "no weight certificate is available for the composite model")
        model0 = physics.build_composite(ds, seed=args.seed, n_x=args.n_x)
        penalty = physics.consistency_penalty(model0, args.consistency_weight)
        result = train(model0, ds, cfg, output_penalty=penalty)
    elif arch == "blackbox":
        if target:
            raise CommandError(EXIT_CERT, "no weight certificate is available for the black-box stack")
        result = train(physics.build_blackbox(ds, seed=args.seed, n_x=args.n_x), ds, cfg)
    else:
        dims = Dims(n_u, n_y, args.n_x, args.N if arch == "nnarx" else None)
        result = train(init_model(arch, dims, seed=args.seed), ds, cfg, target_property=target)

    name = "model.json" if result.ok else "model.uncertified.json"
    files = [os.path.join(out, name), _write(os.path.join(out, "trace.csv"), result.trace.to_csv())]
    save_model(result.model, files[0])
    if arch in certificates.PROPERTY_MARGINS:
        files.append(_write(os.path.join(out, "certificate.json"), certificates.certify(result.model).dumps()))
    _manifest(out, "train", args, files, {"seed": args.seed})
    print(f"best epoch {result.best_epoch}; validation MSE "
          f"{result.trace.val_mse[result.best_epoch] if result.trace.val_mse else float('nan'):.6g}")
    if not result.ok:
        print(f"training did not reach the {target} certificate; kept {name}", file=sys.stderr)
        return EXIT_UNCERTIFIED
    return EXIT_OK


# -- certify / probe -------------------------------------------------------------------


def cmd_certify(args):
    model = _load_model(args.model)
    try:
        report = certificates.certify(model)
    except ValueError as exc:
        raise CommandError(EXIT_CERT, str(exc)) from exc
    text = report.dumps()
    if args.out:
        out = _out_dir(args)
        path = _write(os.path.join(out, "certificate.json"), text)
        _manifest(out, "certify", args, [path], {})
    sys.stdout.write(text)
    return EXIT_OK if report.passed else EXIT_CERT


def cmd_probe(args):
    model = _load_model(args.model)
    probe = certificates.probe_delta_iss(model, trials=args.trials, horizon=args.horizon,
                                         input_class=args.input_class, seed=args.seed, tolerance=args.tolerance)
    body = {"trials": probe.trials, "horizon": probe.horizon, "input_class": probe.input_class,
            "max_distance": probe.max_distance, "tolerance": probe.tolerance, "converged": bool(probe.verdict),
            "seed": args.seed}
    text = json.dumps(body, indent=1, sort_keys=True) + "\n"
    if args.out:
        out = _out_dir(args)
        _manifest(out, "probe", args, [_write(os.path.join(out, "probe.json"), text)], {"seed": args.seed})
    sys.stdout.write(text)
    return EXIT_OK if probe.verdict else EXIT_UNSAFE


# -- verify ----------------------------------------------------------------------------


def cmd_verify(args):
    model = _load_model(args.model)
    conf = _read_json(args.scenario) if args.scenario else {}
    status = verification.certificate_status(model)
    if status == "none" and not args.advisory:
        print("model carries no ISS certificate; rerun with --advisory to verify anyway", file=sys.stderr)
        return EXIT_REFUSED
    try:
        cfg = verification.ScenarioConfig.from_dict(conf)
    except (TypeError, ValueError, KeyError) as exc:
        raise CommandError(EXIT_IO, f"invalid scenario configuration: {exc}") from exc
    template = cfg.template
    if template is None:
        if not args.data:
            raise CommandError(EXIT_IO, "scenario config has no template; pass --data to derive one")
        ds = _load_dataset(args.data)
        template = verification.default_template(ds.train if ds.split else ds.sequences)
    if template.center.shape[0] != model.dims.n_y:
        raise CommandError(EXIT_DIMS, f"template has {template.center.shape[0]} outputs, model has {model.dims.n_y}")
    result = verification.scenario_reachable(model, cfg, seed=args.seed, template=template)
    text = result.dumps()
    if args.out:
        out = _out_dir(args)
        _manifest(out, "verify", args, [_write(os.path.join(out, "verification.json"), text)], {"seed": args.seed})
    sys.stdout.write(text)
    return EXIT_UNSAFE if result.safe is False else EXIT_OK


# -- compare ---------------------------------------------------------------------------


def cmd_compare(args):
    from .physics import compare

    ds = _load_dataset(args.data)
    models = {}
    for path in args.models:
        # parent directory plus file stem: stable across output roots
        parent, name = os.path.split(os.path.abspath(path))
        label = f"{os.path.basename(parent)}/{os.path.splitext(name)[0]}"
        while label in models:
            label += "'"
        models[label] = _load_model(path)
    test = ds.test if ds.split else ds.sequences
    n_u, n_y = test[0].u.shape[1], test[0].y.shape[1]
    for label, m in models.items():
        if (m.dims.n_u, m.dims.n_y) != (n_u, n_y):
            raise CommandError(EXIT_DIMS, f"{label}: model is {m.dims.n_u}->{m.dims.n_y}, data is {n_u}->{n_y}")
    T_w = ds.split.T_w if ds.split else 0
    table = compare(models, test, T_w, mode=args.mode)
    text = table.to_csv()
    if args.out:
        out = _out_dir(args)
        _manifest(out, "compare", args, [_write(os.path.join(out, "fit.csv"), text)], {})
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="stablernn", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="\n".join(__doc__.split("\n")[2:]))
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=0, help="root seed for every random substream")
        if out:
            sp.add_argument("--out", help=f"output directory (default ${DEFAULT_OUT_ENV} or .)")

    g = sub.add_parser("generate", help="simulate the plant and write a dataset")
    common(g)
    g.add_argument("--plant-config", help="JSON file overriding plant parameters")
    g.add_argument("--n-train", type=int, default=100)
    g.add_argument("--n-val", type=int, default=36)
    g.add_argument("--n-test", type=int, default=1)
    g.add_argument("--T-s", dest="T_s", type=int, default=1000, help="steps per sequence")
    g.add_argument("--T-w", dest="T_w", type=int, default=100, help="washout steps")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("architecture", choices=["nnarx", "esn", "lstm", "gru", "composite", "blackbox"])
    t.add_argument("--data", required=True, help="dataset directory")
    prop = t.add_mutually_exclusive_group()
    prop.add_argument("--iss", action="store_true", help="train under the ISS certificate")
    prop.add_argument("--delta-iss", action="store_true", help="train under the incremental ISS certificate")
    t.add_argument("--n-x", dest="n_x", type=int, default=10, help="units per layer or block")
    t.add_argument("--N", type=int, default=5, help="NNARX regression horizon")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=["rmsprop", "adam"])
    t.add_argument("--batch-size", dest="batch_size", type=int, help="sequences per minibatch")
    t.add_argument("--clip-norm", dest="clip_norm", type=float, help="global gradient-norm cap")
    t.add_argument("--paper-scale", action="store_true", help=f"{FULL_EPOCHS} epochs instead of {DESK_EPOCHS}")
    t.add_argument("--n-train", type=int, help="use only the first N training sequences")
    t.add_argument("--train-config", help="JSON file with training options")
    t.add_argument("--consistency-weight", type=float, default=0.05)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="evaluate the weight certificate of a model file")
    c.add_argument("model")
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    v = sub.add_parser("verify", help="scenario bound on the output reachable set")
    common(v)
    v.add_argument("model")
    v.add_argument("--scenario", help="JSON scenario configuration")
    v.add_argument("--data", help="dataset used to derive the default template")
    v.add_argument("--advisory", action="store_true", help="verify even without a certificate")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("compare", help="FIT table of models on the test set")
    m.add_argument("models", nargs="+")
    m.add_argument("--data", required=True)
    m.add_argument("--mode", choices=["pointwise", "trajectory"], default="pointwise")
    m.add_argument("--out")
    m.set_defaults(func=cmd_compare)

    r = sub.add_parser("probe", help="empirical incremental-stability probe")
    common(r)
    r.add_argument("model")
    r.add_argument("--trials", type=int, default=100)
    r.add_argument("--horizon", type=int, default=200)
    r.add_argument("--input-class", choices=["uniform", "multilevel"], default="uniform")
    r.add_argument("--tolerance", type=float, default=1e-3)
    r.set_defaults(func=cmd_probe)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    np.seterr(over="ignore")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
