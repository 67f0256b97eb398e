"""Command-line entry point and experiment orchestration.

Subcommands: `recsys {train,eval,transfer}`, `flocking
{generate,train,evaluate,sweep}`, `analyze
{response,lipschitz,distance,stability,equivariance}`. Values come from an
optional YAML config file (nested: global keys plus one section per command
group) overridden by flags; unknown keys are rejected by full path. Every
run writes a manifest (resolved config, input hashes, produced files) into
its output directory; nothing is written anywhere else.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import (
    DilationPerturbation,
    integral_lipschitz,
    relative_distance,
    sample_lipschitz_gcnn,
    stability_experiment,
    write_stability_csv,
)
from .filters import ArmaParams, FirTaps
from .graphs import (
    GraphSignal,
    ShiftKind,
    build_shift,
    eigendecompose,
    load_graph,
    random_graph,
)
from .neural import equivariant_forward_check, init_state, load_checkpoint
from .optim import write_loss_log
from . import flocking as fl
from . import recsys as rs


class ConfigError(ValueError):
    pass


DATA_DIR_ENV = "GSPNN_DATA_DIR"

# schema: group -> leaf -> {key: (type, default)}; None default means
# required. Global keys apply to every command.
GLOBAL_KEYS = {"seed": (int, 0), "out": (str, "gspnn_out"),
               "config": (str, ""), "threads": (int, 1)}

SCHEMA = {
    "recsys": {
        "train": {"data": (str, ""), "target": (int, None),
                  "model": (str, "gcnn"), "epochs": (int, rs.N_EPOCHS),
                  "top_items": (int, rs.TOP_ITEMS), "split": (float, 0.9)},
        "eval": {"data": (str, ""), "checkpoint": (str, None),
                 "top_items": (int, rs.TOP_ITEMS), "split": (float, 0.9)},
        "transfer": {"data": (str, ""), "checkpoint": (str, None),
                     "target": (int, None),
                     "top_items": (int, rs.TOP_ITEMS), "split": (float, 0.9)},
    },
    "flocking": {
        "generate": {"n_traj": (int, 100), "agents": (int, 25),
                     "duration": (float, 2.0), "dt": (float, 0.01)},
        "train": {"dataset": (str, None), "model": (str, "gcnn"),
                  "epochs": (int, fl.POLICY_EPOCHS)},
        "evaluate": {"checkpoint": (str, None), "agents": (int, 0),
                     "trials": (int, 20)},
        "sweep": {"checkpoint": (str, None), "sizes": (str, "25,31,37,44,50"),
                  "trials": (int, 20)},
    },
    "analyze": {
        "response": {"taps": (str, ""), "arma_poles": (str, ""),
                     "arma_residues": (str, ""), "arma_direct": (str, ""),
                     "lambda_range": (str, "-1,1"), "points": (int, 512)},
        "lipschitz": {"taps": (str, ""), "arma_poles": (str, ""),
                      "arma_residues": (str, ""), "arma_direct": (str, ""),
                      "lambda_range": (str, "-1,1"), "points": (int, 512)},
        "distance": {"graph": (str, None), "graph_hat": (str, None),
                     "method": (str, "identity_permutation"),
                     "shift_kind": (str, "adjacency")},
        "stability": {"epsilons": (str, "0.01,0.02,0.05,0.1"),
                      "nodes": (int, 16), "depth": (int, 2),
                      "order": (int, 3), "n_inputs": (int, 20)},
        "equivariance": {"nodes": (int, 16), "trials": (int, 20),
                         "order": (int, 3)},
    },
}


def _parse_floats(text: str) -> np.ndarray:
    if not text:
        return np.array([])
    return np.array([float(tok) for tok in text.split(",") if tok.strip()])


def _parse_ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def parse_config(group: str, leaf: str, flag_values: dict) -> dict:
    """Resolve the effective config: defaults < config file < flags."""
    schema = dict(SCHEMA[group][leaf])
    schema.update(GLOBAL_KEYS)
    resolved = {key: default for key, (_, default) in schema.items()}

    config_path = flag_values.get("config") or ""
    if config_path:
        with open(config_path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        for key, value in doc.items():
            if key in GLOBAL_KEYS:
                resolved[key] = _coerce(key, value, GLOBAL_KEYS[key][0])
            elif key == group:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key}: must be a mapping")
                for sub, subval in value.items():
                    if sub not in SCHEMA[group][leaf]:
                        raise ConfigError(f"unknown config key {group}.{sub}")
                    resolved[sub] = _coerce(f"{group}.{sub}", subval,
                                            SCHEMA[group][leaf][sub][0])
            elif key in SCHEMA:
                continue  # section for another command group
            else:
                raise ConfigError(f"unknown config key {key}")
    for key, value in flag_values.items():
        if value is not None and key in schema:
            resolved[key] = _coerce(key, value, schema[key][0])
    missing = [key for key, (_, default) in schema.items()
               if default is None and resolved[key] is None]
    if missing:
        raise ConfigError(f"missing required config: {', '.join(missing)}")
    return resolved


def _coerce(path: str, value, typ):
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: expected {typ.__name__}, got {value!r}") \
            from exc


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

def _git_blob_sha1(path: Path) -> str:
    data = path.read_bytes()
    header = f"blob {len(data)}\0".encode()
    return hashlib.sha1(header + data).hexdigest()


class RunContext:
    def __init__(self, command: str, config: dict):
        self.command = command
        self.config = {k: v for k, v in config.items() if k != "config"}
        self.config_path = config.get("config") or ""
        self.out_dir = Path(config["out"])
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.started = time.time()

    def note_input(self, path) -> Path:
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = _git_blob_sha1(path)
        return path

    def out_path(self, name: str) -> Path:
        path = self.out_dir / name
        self.outputs.append(name)
        return path

    def write_manifest(self) -> None:
        doc = {
            "command": self.command,
            "config": self.config,
            "config_file": self.config_path,
            "toolkit_version": __version__,
            "wall_clock_seconds": time.time() - self.started,
            "input_hashes": self.inputs,
            "produced_files": sorted(set(self.outputs)),
        }
        tmp = self.out_dir / ".manifest.tmp"
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.out_dir / "manifest.json")


def _resolve_data_path(configured: str) -> Path:
    if configured:
        return Path(configured)
    root = os.environ.get(DATA_DIR_ENV, "")
    if root:
        candidate = Path(root) / "u.data"
        if candidate.is_file():
            return candidate
        return Path(root)
    raise ConfigError(f"no data path given and {DATA_DIR_ENV} is not set")


# ---------------------------------------------------------------------------
# recsys commands
# ---------------------------------------------------------------------------

def _load_table(ctx: RunContext, cfg: dict) -> tuple:
    path = ctx.note_input(_resolve_data_path(cfg["data"]))
    table = rs.ingest_movielens(path)
    if cfg["top_items"] < table.n_items:
        table = rs.select_top_items(table, cfg["top_items"])
    sim = rs.build_similarity(table)
    return table, sim


def cmd_recsys_train(cfg: dict) -> int:
    ctx = RunContext("recsys train", cfg)
    table, sim = _load_table(ctx, cfg)
    target = cfg["target"]
    model = rs.train_rating_model(table, sim, cfg["model"], target,
                                  seed=cfg["seed"], epochs=cfg["epochs"],
                                  split=cfg["split"])
    rs.save_rating_checkpoint(ctx.out_path("checkpoint.json"), model)
    write_loss_log(ctx.out_path("loss_log.csv"), model.history,
                   {"train_rmse": model.train_rmse,
                    "test_rmse": model.test_rmse})
    rs.save_metrics_csv(ctx.out_path("metrics.csv"),
                        [{"model": cfg["model"], "seed": cfg["seed"],
                          "target": target, "rmse": model.test_rmse}])
    ctx.write_manifest()
    print(f"test rmse {model.test_rmse:.4f} (train {model.train_rmse:.4f})")
    return 0


def _restore_rating_model(ctx: RunContext, cfg: dict):
    table, sim = _load_table(ctx, cfg)
    ckpt = ctx.note_input(Path(cfg["checkpoint"]))
    spec, state, meta = load_checkpoint(ckpt)
    shift = rs.build_item_shift(sim)
    model = rs.TrainedRating(
        spec, state, shift, meta["target_item"], meta["target_node"],
        meta.get("family", "gcnn"), meta.get("seed", cfg["seed"]), [],
        meta.get("train_rmse", float("nan")),
        meta.get("test_rmse", float("nan")))
    return table, sim, model


def cmd_recsys_eval(cfg: dict) -> int:
    ctx = RunContext("recsys eval", cfg)
    table, sim, model = _restore_rating_model(ctx, cfg)
    _, test_set = rs.make_samples(table, sim, model.target_item,
                                  split=cfg["split"], seed=model.seed)
    rmse = rs.evaluate_rmse(model.spec, model.state, model.shift, test_set,
                            model.target_node)
    rs.save_metrics_csv(ctx.out_path("metrics.csv"),
                        [{"model": model.family, "seed": model.seed,
                          "target": model.target_item, "rmse": rmse}])
    ctx.write_manifest()
    print(f"rmse {rmse:.4f} on item {model.target_item}")
    return 0


def cmd_recsys_transfer(cfg: dict) -> int:
    ctx = RunContext("recsys transfer", cfg)
    table, sim, model = _restore_rating_model(ctx, cfg)
    rmse = rs.transfer_rmse(model, table, sim, cfg["target"],
                            split=cfg["split"])
    rs.save_metrics_csv(ctx.out_path("metrics.csv"),
                        [{"model": model.family, "seed": model.seed,
                          "target": cfg["target"], "rmse": rmse}])
    ctx.write_manifest()
    print(f"transfer rmse {rmse:.4f} on item {cfg['target']} "
          f"(trained for {model.target_item})")
    return 0


# ---------------------------------------------------------------------------
# flocking commands
# ---------------------------------------------------------------------------

def cmd_flocking_generate(cfg: dict) -> int:
    ctx = RunContext("flocking generate", cfg)
    config = fl.FlockConfig(n_agents=cfg["agents"], duration=cfg["duration"],
                            dt=cfg["dt"])
    samples, n_resampled = fl.generate_dataset(cfg["n_traj"], config,
                                               seed=cfg["seed"])
    dataset_dir = ctx.out_dir / "dataset"
    fl.save_dataset(dataset_dir, samples, n_resampled)
    for f in sorted(p.name for p in dataset_dir.iterdir()):
        ctx.outputs.append(f"dataset/{f}")
    ctx.write_manifest()
    print(f"wrote {len(samples)} trajectories ({n_resampled} resampled)")
    return 0


def cmd_flocking_train(cfg: dict) -> int:
    ctx = RunContext("flocking train", cfg)
    dataset_dir = Path(cfg["dataset"])
    ctx.note_input(dataset_dir / "manifest.json")
    samples = fl.load_dataset(dataset_dir)
    if cfg["model"] not in ("gcnn", "fir"):
        raise ConfigError("flocking model must be gcnn or fir")
    nonlinearity = "tanh" if cfg["model"] == "gcnn" else "identity"
    bundle, history = fl.train_policy(samples, seed=cfg["seed"],
                                      nonlinearity=nonlinearity,
                                      epochs=cfg["epochs"])
    fl.save_policy(ctx.out_path("policy.json"), bundle,
                   extra={"model": cfg["model"], "seed": cfg["seed"]})
    write_loss_log(ctx.out_path("loss_log.csv"), history,
                   {"final_loss": history[-1][2] if history else float("nan")})
    ctx.write_manifest()
    print(f"trained {cfg['model']} policy; final loss "
          f"{history[-1][2]:.5f}" if history else "no steps run")
    return 0


def _sweep_csv(path, rows: list[dict], model: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_agents", "mean_cost", "std_cost", "model"])
        for row in rows:
            writer.writerow([row["n_agents"], repr(row["mean_cost"]),
                             repr(row["std_cost"]), model])


def cmd_flocking_evaluate(cfg: dict) -> int:
    ctx = RunContext("flocking evaluate", cfg)
    bundle = fl.load_policy(ctx.note_input(Path(cfg["checkpoint"])))
    spec_ck, _, meta = load_checkpoint(Path(cfg["checkpoint"]))
    agents = cfg["agents"] or bundle.config.n_agents
    rows = fl.scalability_sweep(bundle, [agents], cfg["trials"],
                                base_seed=10_000 + cfg["seed"])
    _sweep_csv(ctx.out_path("costs.csv"), rows, meta.get("model", "gcnn"))
    expert = np.mean([fl.expert_rollout_cost(
        fl.FlockConfig(**{**bundle.config.__dict__, "n_agents": agents}),
        10_000 + cfg["seed"] + t) for t in range(cfg["trials"])])
    ctx.write_manifest()
    print(f"policy cost {rows[0]['mean_cost']:.1f} "
          f"(+-{rows[0]['std_cost']:.1f}); expert {expert:.1f}")
    return 0


def cmd_flocking_sweep(cfg: dict) -> int:
    ctx = RunContext("flocking sweep", cfg)
    bundle = fl.load_policy(ctx.note_input(Path(cfg["checkpoint"])))
    _, _, meta = load_checkpoint(Path(cfg["checkpoint"]))
    sizes = _parse_ints(cfg["sizes"])
    rows = fl.scalability_sweep(bundle, sizes, cfg["trials"],
                                base_seed=10_000 + cfg["seed"])
    _sweep_csv(ctx.out_path("sweep.csv"), rows, meta.get("model", "gcnn"))
    ctx.write_manifest()
    for row in rows:
        print(f"N={row['n_agents']}: {row['mean_cost']:.1f} "
              f"(+-{row['std_cost']:.1f})")
    return 0


# ---------------------------------------------------------------------------
# analyze commands
# ---------------------------------------------------------------------------

def _filter_from_config(cfg: dict):
    taps = _parse_floats(cfg["taps"])
    poles = _parse_floats(cfg["arma_poles"])
    if taps.size and poles.size:
        raise ConfigError("give either taps or arma parameters, not both")
    if taps.size:
        return FirTaps(taps)
    if poles.size:
        residues = _parse_floats(cfg["arma_residues"])
        direct = _parse_floats(cfg["arma_direct"])
        return ArmaParams(poles=poles, residues=residues,
                          direct_taps=direct if direct.size else [0.0])
    raise ConfigError("need --taps or --arma-poles/--arma-residues")


def _lambda_range(cfg: dict):
    lo, hi = _parse_floats(cfg["lambda_range"])
    if not lo < hi:
        raise ConfigError("lambda_range must be lo,hi with lo < hi")
    return float(lo), float(hi)


def cmd_analyze_response(cfg: dict) -> int:
    ctx = RunContext("analyze response", cfg)
    filt = _filter_from_config(cfg)
    lo, hi = _lambda_range(cfg)
    grid = np.linspace(lo, hi, cfg["points"])
    from .filters import arma_response, fir_response
    samples = fir_response(filt, grid) if isinstance(filt, FirTaps) \
        else arma_response(filt, grid)
    with open(ctx.out_path("response.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "response"])
        for fs in samples:
            writer.writerow([repr(fs.lam), repr(fs.response)])
    ctx.write_manifest()
    print(f"wrote {len(samples)} response samples")
    return 0


def cmd_analyze_lipschitz(cfg: dict) -> int:
    ctx = RunContext("analyze lipschitz", cfg)
    filt = _filter_from_config(cfg)
    rep = integral_lipschitz(filt, _lambda_range(cfg), cfg["points"])
    with open(ctx.out_path("lipschitz.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["C", "max_abs_response"])
        writer.writerow([repr(rep.constant), repr(rep.max_abs_response)])
    ctx.write_manifest()
    print(f"C = {rep.constant:.6g}, max |h| = {rep.max_abs_response:.6g}")
    return 0


def cmd_analyze_distance(cfg: dict) -> int:
    ctx = RunContext("analyze distance", cfg)
    kind = ShiftKind(cfg["shift_kind"])
    s = build_shift(load_graph(ctx.note_input(Path(cfg["graph"]))), kind)
    s_hat = build_shift(load_graph(ctx.note_input(Path(cfg["graph_hat"]))),
                        kind)
    res = relative_distance(s, s_hat, method=cfg["method"])
    doc = {"distance": res.distance, "method": res.method,
           "permutation": res.permutation.tolist(),
           "singular_flag": res.singular_flag}
    with open(ctx.out_path("distance.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    ctx.write_manifest()
    print(f"relative distance {res.distance:.6g} ({res.method})")
    return 0


def cmd_analyze_stability(cfg: dict) -> int:
    ctx = RunContext("analyze stability", cfg)
    rng = np.random.default_rng(cfg["seed"])
    g = random_graph(cfg["nodes"], 0.35, rng, weighted=True)
    s = eigendecompose(build_shift(g, ShiftKind.ADJACENCY))
    spec, state = sample_lipschitz_gcnn(s, cfg["depth"], cfg["order"], rng)
    inputs = [x / np.linalg.norm(x) for x in
              (rng.normal(size=cfg["nodes"]) for _ in range(cfg["n_inputs"]))]
    reports = [stability_experiment(spec, state, s, DilationPerturbation(eps),
                                    inputs)
               for eps in _parse_floats(cfg["epsilons"])]
    write_stability_csv(ctx.out_path("stability.csv"), reports)
    ctx.write_manifest()
    for rep in reports:
        print(f"eps={rep.epsilon:g}: measured {rep.measured:.3e} "
              f"<= bound {rep.bound:.3e} (violations {rep.n_violations})")
    return 0


def cmd_analyze_equivariance(cfg: dict) -> int:
    ctx = RunContext("analyze equivariance", cfg)
    rng = np.random.default_rng(cfg["seed"])
    worst = 0.0
    rows = []
    for trial in range(cfg["trials"]):
        g = random_graph(cfg["nodes"], 0.35, rng, weighted=True)
        s = build_shift(g, ShiftKind.ADJACENCY)
        from .neural import LayerSpec, ModelSpec, ReadoutSpec
        spec = ModelSpec((
            LayerSpec("fir", 1, 4, cfg["order"], nonlinearity="relu"),
            LayerSpec("fir", 4, 2, cfg["order"], nonlinearity="relu"),
        ), ReadoutSpec("per_node_linear", 1))
        state = init_state(spec, rng, shift=s)
        x = GraphSignal(rng.normal(size=cfg["nodes"]))
        perm = rng.permutation(cfg["nodes"])
        rep = equivariant_forward_check(spec, state, s, x, perm)
        rows.append((trial, rep["relative_error"]))
        worst = max(worst, rep["relative_error"])
    with open(ctx.out_path("equivariance.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "relative_error"])
        for trial, err in rows:
            writer.writerow([trial, repr(err)])
    ctx.write_manifest()
    print(f"max relative equivariance error over {cfg['trials']} trials: "
          f"{worst:.3e}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

HANDLERS = {
    ("recsys", "train"): cmd_recsys_train,
    ("recsys", "eval"): cmd_recsys_eval,
    ("recsys", "transfer"): cmd_recsys_transfer,
    ("flocking", "generate"): cmd_flocking_generate,
    ("flocking", "train"): cmd_flocking_train,
    ("flocking", "evaluate"): cmd_flocking_evaluate,
    ("flocking", "sweep"): cmd_flocking_sweep,
    ("analyze", "response"): cmd_analyze_response,
    ("analyze", "lipschitz"): cmd_analyze_lipschitz,
    ("analyze", "distance"): cmd_analyze_distance,
    ("analyze", "stability"): cmd_analyze_stability,
    ("analyze", "equivariance"): cmd_analyze_equivariance,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gspnn",
        description="Graph filter and graph neural network toolkit")
    groups = parser.add_subparsers(dest="group", required=True)
    for group, leaves in SCHEMA.items():
        gparser = groups.add_parser(group)
        subs = gparser.add_subparsers(dest="leaf", required=True)
        for leaf, keys in leaves.items():
            lparser = subs.add_parser(leaf)
            for key in GLOBAL_KEYS:
                lparser.add_argument(f"--{key.replace('_', '-')}",
                                     default=None)
            for key in keys:
                lparser.add_argument(f"--{key.replace('_', '-')}",
                                     default=None)
    return parser


def dispatch(group: str, leaf: str, flag_values: dict) -> int:
    config = parse_config(group, leaf, flag_values)
    handler = HANDLERS[(group, leaf)]
    return handler(config)


def _merge_dashed_values(argv: list[str]) -> list[str]:
    """Join `--flag -1,1` into `--flag=-1,1` so dash-leading numeric values
    survive argparse."""
    merged = []
    skip = False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        nxt = argv[i + 1] if i + 1 < len(argv) else None
        if tok.startswith("--") and "=" not in tok and nxt is not None \
                and len(nxt) > 1 and nxt[0] == "-" and (nxt[1].isdigit()
                                                        or nxt[1] == "."):
            merged.append(f"{tok}={nxt}")
            skip = True
        else:
            merged.append(tok)
    return merged


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    args = parser.parse_args(_merge_dashed_values(list(argv)))
    flag_values = {key: value for key, value in vars(args).items()
                   if key not in ("group", "leaf")}
    try:
        return dispatch(args.group, args.leaf, flag_values)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # subsystem failures surface with context
        print(f"error in {args.group} {args.leaf}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
