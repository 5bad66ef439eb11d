"""Command-line pipeline: generate datasets, fit models, score rollouts.

Three subcommands share one flat key = value config schema; any key can
be set in a config file and overridden by a flag of the same name, so a
single shipped config can drive generate, train, and eval for one
experiment.  Relative paths resolve under $NNSYSID_OUTDIR when it is set.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from nnsysid.benchmark_rlc import Dataset, GenConfig, gen_dataset, measure_snr
from nnsysid.metrics import evaluate, initial_state_for
from nnsysid.model_structures import (
    IOStructure,
    LinearApprox,
    Scaler,
    StateSpaceStructure,
    build_io,
    build_state_space,
)
from nnsysid.nnet import MLPSpec, mlp_init
from nnsysid.simulation import SimulationDiverged, simulate_open_loop
from nnsysid.training import (
    TrainConfig,
    TrainingDiverged,
    train_full_sim,
    train_multistep,
    train_one_step,
    write_loss_log,
)

MODEL_FORMAT_VERSION = 1
OUTDIR_ENV = "NNSYSID_OUTDIR"


class ConfigError(ValueError):
    """Bad config file, bad key, or bad value; maps to exit code 1."""


# key -> (type, default, help); "path" behaves as str but resolves
# under $NNSYSID_OUTDIR
SCHEMA = {
    # generation
    "seed": ("int", 0, "identification-set generation seed"),
    "ts": ("float", 0.5e-6, "sample time in seconds"),
    "n": ("int", 4000, "samples per generated dataset"),
    "bandwidth": ("float", 150e3, "input lowpass cutoff in Hz"),
    "input_std": ("float", 80.0, "input standard deviation"),
    "noise_std_vc": ("float", 0.0, "voltage measurement noise std"),
    "noise_std_il": ("float", 0.0, "current measurement noise std"),
    "outputs": ("str", "vc_il", "measured channels: vc_il or vc"),
    "id_out": ("path", "id.csv", "identification dataset output path"),
    "val_out": ("path", "", "validation dataset output path (empty: skip)"),
    "val_seed": ("int", 1, "validation-set generation seed"),
    "val_bandwidth": ("float", 0.0, "validation input cutoff (0: same)"),
    "val_input_std": ("float", 0.0, "validation input std (0: same)"),
    "val_n": ("int", 0, "validation samples (0: same)"),
    # training
    "train_dataset": ("path", "id.csv", "identification dataset to fit"),
    "method": ("str", "multistep", "one-step, multistep, or full-sim"),
    "structure": ("str", "fully-observed", "model structure variant"),
    "n_x": ("int", 0, "state dimension (0: infer from structure)"),
    "hidden_width": ("int", 64, "hidden units per network layer"),
    "activation": ("str", "relu", "network activation: relu or tanh"),
    "n_a": ("int", 2, "output lags for the io structure"),
    "n_b": ("int", 2, "input lags for the io structure"),
    "train_n": ("int", 10000, "training iterations"),
    "lr": ("float", 1e-3, "learning rate"),
    "q": ("int", 64, "subsequences per batch"),
    "m": ("int", 64, "subsequence length"),
    "alpha": ("float", 0.5, "fit weight in (0, 1]"),
    "optimizer": ("str", "adam", "adam or gradient-descent"),
    "train_seed": ("int", 0, "weight init and batch sampling seed"),
    "start_selection": ("str", "random", "random or sequential-cycling"),
    "model_out": ("path", "model.json", "fitted model output path"),
    "loss_log_out": ("path", "loss_log.csv", "per-iteration loss CSV"),
    # evaluation
    "eval_dataset": ("path", "val.csv", "dataset to score against"),
    "model": ("path", "model.json", "model file to evaluate"),
    "report_out": ("path", "report.txt", "fit report output path"),
    "sim_out": ("path", "sim.csv", "simulated trajectory CSV"),
}

# channel names <-> compact CSV column suffixes
def _short(name):
    return name.replace("_", "")


LONG_NAMES = {"vc": "v_c", "il": "i_l", "vin": "v_in"}


def _convert(key, text, where):
    kind = SCHEMA[key][0]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: key {key!r} expects {kind}, got {text!r}")


def parse_config_file(path):
    """Read a flat key = value file; errors carry path and line number."""
    entries = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        entries[key] = _convert(key, value, where)
    return entries


def effective_config(args):
    """Defaults, then config file entries, then explicit flags."""
    cfg = {key: spec[1] for key, spec in SCHEMA.items()}
    if args.config is not None:
        cfg.update(parse_config_file(args.config))
    for key in SCHEMA:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = _convert(key, flag, where=f"flag --{key}")
    outdir = os.environ.get(OUTDIR_ENV)
    if outdir:
        for key, spec in SCHEMA.items():
            value = cfg[key]
            if spec[0] == "path" and value and not os.path.isabs(value):
                cfg[key] = os.path.join(outdir, value)
    return cfg


def config_hash(cfg):
    text = "\n".join(f"{k}={cfg[k]}" for k in sorted(SCHEMA))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- datasets

def save_dataset(path, ds):
    """CSV with header time,u_*,y_*[,yo_*]; floats survive a round trip."""
    n = ds.n
    cols = [np.arange(n) * ds.ts]
    names = ["time"]
    for i, name in enumerate(ds.input_names):
        cols.append(ds.u[:, i])
        names.append(f"u_{_short(name)}")
    for i, name in enumerate(ds.output_names):
        cols.append(ds.y[:, i])
        names.append(f"y_{_short(name)}")
    if ds.y_clean is not None:
        for i, name in enumerate(ds.output_names):
            cols.append(ds.y_clean[:, i])
            names.append(f"yo_{_short(name)}")
    np.savetxt(path, np.column_stack(cols), fmt="%.17g",
               delimiter=",", header=",".join(names), comments="")


def load_dataset(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] < 2 or data.shape[1] != len(header):
        raise ConfigError(f"{path}: malformed dataset CSV")
    groups = {"u": ([], []), "y": ([], []), "yo": ([], [])}
    if header[0] != "time":
        raise ConfigError(f"{path}: first column must be time, got {header[0]!r}")
    for i, name in enumerate(header[1:], start=1):
        prefix, _, channel = name.partition("_")
        if prefix not in groups:
            raise ConfigError(f"{path}: unknown column {name!r}")
        groups[prefix][0].append(data[:, i])
        groups[prefix][1].append(LONG_NAMES.get(channel, channel))
    if not groups["u"][0] or not groups["y"][0]:
        raise ConfigError(f"{path}: needs at least one u_ and one y_ column")
    y_clean = np.column_stack(groups["yo"][0]) if groups["yo"][0] else None
    return Dataset(
        u=np.column_stack(groups["u"][0]),
        y=np.column_stack(groups["y"][0]),
        ts=float(data[1, 0] - data[0, 0]),
        y_clean=y_clean,
        input_names=tuple(groups["u"][1]),
        output_names=tuple(groups["y"][1]),
    )


# ------------------------------------------------------------ model files

def _net_to_json(net):
    return {
        "widths": list(net.spec.widths),
        "activation": net.spec.activation,
        "layers": [
            {"w": w.value.tolist(), "b": b.value.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def _net_from_json(obj):
    net = mlp_init(MLPSpec(tuple(obj["widths"]), obj["activation"]), seed=0)
    for w, b, layer in zip(net.weights, net.biases, obj["layers"]):
        w.value[...] = np.asarray(layer["w"], dtype=np.float64)
        b.value[...] = np.asarray(layer["b"], dtype=np.float64)
    return net


def _scaler_to_json(scaler):
    return {"mean": scaler.mean.tolist(), "std": scaler.std.tolist()}


def _scaler_from_json(obj):
    return Scaler(obj["mean"], obj["std"])


def save_model(path, model, provenance=None):
    """Self-describing JSON; load_model(save_model(m)) is bit-exact."""
    doc = {"format_version": MODEL_FORMAT_VERSION}
    if isinstance(model, IOStructure):
        doc.update(
            kind="io", n_y=model.n_y, n_u=model.n_u,
            n_a=model.n_a, n_b=model.n_b,
            network=_net_to_json(model.nn),
            scalers={"u": _scaler_to_json(model.scaler_u),
                     "y": _scaler_to_json(model.scaler_y)},
        )
    else:
        if model.variant == "mechanical":
            nn_x = [_net_to_json(net) for net in model.nn_x]
        else:
            nn_x = _net_to_json(model.nn_x)
        doc.update(
            kind="state-space", variant=model.variant,
            n_x=model.n_x, n_u=model.n_u, n_y=model.n_y, ts=model.ts,
            linear=None if model.linear is None else {
                "a": model.linear.a.tolist(),
                "b": model.linear.b.tolist(),
                "c": model.linear.c.tolist(),
            },
            networks={
                "nn_x": nn_x,
                "nn_y": None if model.nn_y is None else _net_to_json(model.nn_y),
            },
            scalers={"x": _scaler_to_json(model.scaler_x),
                     "u": _scaler_to_json(model.scaler_u),
                     "y": _scaler_to_json(model.scaler_y)},
        )
    doc["provenance"] = provenance or {}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ConfigError(
            f"{path}: model format version {version!r} is not supported "
            f"(expected {MODEL_FORMAT_VERSION})"
        )
    if doc["kind"] == "io":
        return IOStructure(
            doc["n_y"], doc["n_u"], doc["n_a"], doc["n_b"],
            _net_from_json(doc["network"]),
            scaler_u=_scaler_from_json(doc["scalers"]["u"]),
            scaler_y=_scaler_from_json(doc["scalers"]["y"]),
        )
    nets = doc["networks"]
    if doc["variant"] == "mechanical":
        nn_x = tuple(_net_from_json(obj) for obj in nets["nn_x"])
    else:
        nn_x = _net_from_json(nets["nn_x"])
    linear = doc["linear"]
    return StateSpaceStructure(
        doc["variant"], doc["n_x"], doc["n_u"], doc["n_y"], nn_x,
        nn_y=None if nets["nn_y"] is None else _net_from_json(nets["nn_y"]),
        linear=None if linear is None else LinearApprox(
            linear["a"], linear["b"], linear["c"]
        ),
        ts=doc["ts"],
        scaler_x=_scaler_from_json(doc["scalers"]["x"]),
        scaler_u=_scaler_from_json(doc["scalers"]["u"]),
        scaler_y=_scaler_from_json(doc["scalers"]["y"]),
    )


# -------------------------------------------------------------- commands

def _gen_summary(path, ds, noise_std):
    with np.errstate(divide="ignore"):
        snr = measure_snr(ds) if ds.y_clean is not None else None
    parts = [f"wrote {path}: N={ds.n}, Ts={ds.ts:g} s"]
    if snr is not None and any(s > 0 for s in noise_std):
        for name, value in zip(ds.output_names, snr):
            parts.append(f"SNR({name})={value:.1f} dB")
    return ", ".join(parts)


def cmd_generate(cfg):
    noise = (cfg["noise_std_vc"],)
    if cfg["outputs"] == "vc_il":
        noise = (cfg["noise_std_vc"], cfg["noise_std_il"])
    id_cfg = GenConfig(
        ts=cfg["ts"], n=cfg["n"], bandwidth=cfg["bandwidth"],
        input_std=cfg["input_std"], noise_std=noise,
        outputs=cfg["outputs"], seed=cfg["seed"],
    )
    ds = gen_dataset(id_cfg)
    save_dataset(cfg["id_out"], ds)
    print(_gen_summary(cfg["id_out"], ds, noise))
    if cfg["val_out"]:
        val_cfg = GenConfig(
            ts=cfg["ts"],
            n=cfg["val_n"] or cfg["n"],
            bandwidth=cfg["val_bandwidth"] or cfg["bandwidth"],
            input_std=cfg["val_input_std"] or cfg["input_std"],
            noise_std=noise, outputs=cfg["outputs"], seed=cfg["val_seed"],
        )
        val = gen_dataset(val_cfg)
        save_dataset(cfg["val_out"], val)
        print(_gen_summary(cfg["val_out"], val, noise))
    return 0


def build_structure(cfg, ds):
    kind = cfg["structure"]
    common = dict(hidden=cfg["hidden_width"], activation=cfg["activation"],
                  seed=cfg["train_seed"])
    if kind == "io":
        return build_io(ds.n_y, ds.n_u, cfg["n_a"], cfg["n_b"], **common)
    if kind == "fully-observed":
        return build_state_space(kind, n_x=ds.n_y, n_u=ds.n_u, **common)
    if kind == "mechanical":
        return build_state_space(kind, n_x=cfg["n_x"] or 2 * ds.n_y,
                                 n_u=ds.n_u, ts=ds.ts, **common)
    if kind in ("general", "integral"):
        if cfg["n_x"] < 1:
            raise ConfigError(f"structure {kind!r} needs an explicit n_x >= 1")
        return build_state_space(kind, n_x=cfg["n_x"], n_u=ds.n_u,
                                 n_y=ds.n_y, **common)
    if kind == "residual":
        raise ConfigError(
            "residual needs linear system matrices, which a flat config "
            "cannot express; build it through the library API"
        )
    raise ConfigError(f"unknown structure {kind!r}")


def cmd_train(cfg):
    ds = load_dataset(cfg["train_dataset"])
    model = build_structure(cfg, ds)
    train_cfg = TrainConfig(
        n=cfg["train_n"], lr=cfg["lr"], q=cfg["q"], m=cfg["m"],
        alpha=cfg["alpha"], optimizer=cfg["optimizer"],
        seed=cfg["train_seed"], start_selection=cfg["start_selection"],
    )
    t0 = time.perf_counter()
    if cfg["method"] == "one-step":
        model, log = train_one_step(model, ds, train_cfg)
    elif cfg["method"] == "multistep":
        model, _, log = train_multistep(model, ds, train_cfg)
    elif cfg["method"] == "full-sim":
        model, log = train_full_sim(model, ds, train_cfg)
    else:
        raise ConfigError(
            f"unknown method {cfg['method']!r}; "
            f"choose one-step, multistep, or full-sim"
        )
    wall = time.perf_counter() - t0
    final = log[-1] if log else None
    provenance = {
        "config_hash": config_hash(cfg),
        "method": cfg["method"],
        "seed": cfg["train_seed"],
        "iterations": cfg["train_n"],
        "train_dataset": cfg["train_dataset"],
        "wall_seconds": round(wall, 3),
        "final_total": None if final is None else final.total,
        "final_fit": None if final is None else final.fit,
        "final_consistency": None if final is None else final.consistency,
    }
    save_model(cfg["model_out"], model, provenance)
    write_loss_log(cfg["loss_log_out"], log)
    print(f"wrote {cfg['model_out']} and {cfg['loss_log_out']}")
    final_text = "n/a" if final is None else f"{final.total:.6g}"
    print(f"wall time {wall:.1f} s, final loss {final_text}")
    for key in sorted(SCHEMA):
        print(f"  {key} = {cfg[key]}")
    return 0


def cmd_eval(cfg):
    model = load_model(cfg["model"])
    ds = load_dataset(cfg["eval_dataset"])
    report = evaluate(model, ds, model_id=cfg["model"],
                      dataset_id=cfg["eval_dataset"])
    with open(cfg["report_out"], "w") as fh:
        fh.write(report.as_text())
    y_sim = simulate_open_loop(model, initial_state_for(model, ds), ds.u)
    offset = report.offset
    ref = ds.reference[offset:]
    names = report.channels
    cols = [(np.arange(ds.n) * ds.ts)[offset:]]
    header = ["time"]
    for i, name in enumerate(names):
        cols.append(ref[:, i])
        header.append(f"ref_{_short(name)}")
    for i, name in enumerate(names):
        cols.append(y_sim[:, i])
        header.append(f"sim_{_short(name)}")
    np.savetxt(cfg["sim_out"], np.column_stack(cols), fmt="%.17g",
               delimiter=",", header=",".join(header), comments="")
    print(report)
    print(f"wrote {cfg['report_out']} and {cfg['sim_out']}")
    return 0


# ------------------------------------------------------------------ main

COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser():
    parser = _Parser(
        prog="nnsysid",
        description="Fit neural dynamical models to measured sequences.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True,
                                       parser_class=_Parser)
    summaries = {
        "generate": "synthesize benchmark circuit datasets",
        "train": "fit a model structure to a dataset",
        "eval": "score a saved model by open-loop simulation",
    }
    for command, summary in summaries.items():
        sub = subparsers.add_parser(command, help=summary)
        sub.add_argument("config", nargs="?", default=None,
                         help="flat key = value config file")
        for key, (kind, default, help_text) in SCHEMA.items():
            names = ["--" + key.replace("_", "-")]
            if names[0] != "--" + key:
                names.append("--" + key)
            sub.add_argument(*names, dest=key, default=None,
                             metavar=kind.upper(),
                             help=f"{help_text} (default: {default})")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, SimulationDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
