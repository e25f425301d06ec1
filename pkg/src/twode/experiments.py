"""Experiment specs, INI config parsing, recipes, CSV I/O and run manifests."""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .ablate import VariantKind, data_seed, fit_and_estimate, ope_seed, train_seed, truth_seed
from .env import (ACTION_COMPONENTS, DEFAULT_HORIZON, OBS_DIM, Dataset, EnvConfig, EnvKind, LatentTable,
                  PolicySpec, TumorParams, generate, named_target, true_policy_value)
from .linfe import linear_replication
from .ope import OpeConfig, metrics
from .train import HyperParams, TrainingDiverged, expand_grid

RECIPES = ("linear-props", "dp-sweep", "tumor-sweep", "sensitivity", "ablation")

RECIPE_ENVS = {
    "linear-props": (EnvKind.LINEAR,),
    "dp-sweep": (EnvKind.DYNAMIC_PROCESS,),
    "tumor-sweep": (EnvKind.TUMOR,),
    "sensitivity": (EnvKind.DYNAMIC_PROCESS, EnvKind.TUMOR),
    "ablation": (EnvKind.DYNAMIC_PROCESS, EnvKind.TUMOR),
}

DEFAULT_N = {
    "linear-props": (200, 300, 400, 500, 600, 700, 800),
    "dp-sweep": (250, 500, 1000, 1500, 2000),
    "tumor-sweep": (250, 500, 1000, 1500, 2000),
    "sensitivity": (1000,),
    "ablation": (1000,),
}

DEFAULT_METHODS = {
    "linear-props": ("UUC", "OWUC", "TWUC"),
    "dp-sweep": ("TWD",),
    "tumor-sweep": ("TWD",),
    "sensitivity": ("TWD", "OWD_NI", "OWD_NT"),
    "ablation": tuple(v.value for v in VariantKind),
}

DEFAULT_GAMMAS = {"sensitivity": (0.0, 0.3, 0.7, 1.0)}

# --fast shrink factors
FAST_N_DIVISOR = 5
FAST_MIN_N = 20
FAST_MAX_T = 20
FAST_MAX_EPOCHS = 30
FAST_M = 20
FAST_TRUTH_ROLLOUTS = 1000
FAST_MAX_REPS = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainGrid:
    lr: tuple = (0.005,)
    batch_size: tuple = (256,)
    weight_decay: tuple = (1e-4,)
    embed_dim: tuple = (4,)
    loss_alpha: tuple = (0.3,)
    max_epochs: int = 500
    patience: int = 20
    ntn_slices: int = 8
    hidden_dim: int = 16
    mlp_width: int = 64
    mlp_depth: int = 2
    ema_decay: float = HyperParams.ema_decay

    def cells(self) -> list:
        base = HyperParams(max_epochs=self.max_epochs, patience=self.patience, ntn_slices=self.ntn_slices,
                           hidden_dim=self.hidden_dim, mlp_width=self.mlp_width, mlp_depth=self.mlp_depth,
                           ema_decay=self.ema_decay)
        return expand_grid(base, lr=self.lr, batch_size=self.batch_size, weight_decay=self.weight_decay,
                           embed_dim=self.embed_dim, loss_alpha=self.loss_alpha)


@dataclass(frozen=True)
class ExperimentSpec:
    recipe: str
    env: EnvKind
    n_list: tuple
    gammas: tuple = (1.0,)
    methods: tuple = ("TWD",)
    targets: tuple = ("A",)
    repetitions: int = 20
    horizon: int = 50
    rollouts: int = 100
    truth_rollouts: int = 10_000
    crossfit: bool = False
    seed: int = 0
    out: str = "results"
    train: TrainGrid = field(default_factory=TrainGrid)
    linear_reward_var: float = 2.0
    tumor: TumorParams = field(default_factory=TumorParams)

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ConfigError(f"recipe: unknown recipe {self.recipe!r}; choose from {', '.join(RECIPES)}")
        if self.env not in RECIPE_ENVS[self.recipe]:
            raise ConfigError(f"env: recipe {self.recipe} does not run on env {self.env.value}")
        for name in ("n_list", "gammas", "methods", "targets"):
            if not getattr(self, name):
                raise ConfigError(f"{name}: list must be non-empty")
        if any(n < 2 for n in self.n_list):
            raise ConfigError("n_list: every N must be >= 2")
        for g in self.gammas:
            if not 0.0 <= g <= 1.0:
                raise ConfigError(f"gamma: {g} is outside the range [0, 1]")
        allowed = DEFAULT_METHODS["linear-props"] if self.recipe == "linear-props" else \
            tuple(v.value for v in VariantKind)
        for m in self.methods:
            if m not in allowed:
                raise ConfigError(f"methods: {m!r} is not valid for {self.recipe}; choose from {', '.join(allowed)}")
        for t in self.targets:
            try:
                named_target(self.env, t)
            except ValueError as exc:
                raise ConfigError(f"targets: {exc}") from None
        for name in ("repetitions", "horizon", "rollouts", "truth_rollouts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        if not self.linear_reward_var >= 0:
            raise ConfigError("env.linear_reward_var: must be >= 0")
        try:
            self.train.cells()
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def env_config(self, n: int, gamma: float, seed: int = 0) -> EnvConfig:
        return EnvConfig(self.env, n, self.horizon, gamma=gamma, seed=seed,
                         linear_reward_var=self.linear_reward_var, tumor=self.tumor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env"] = self.env.value
        d.pop("out")
        return d

    def spec_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def fast(self) -> "ExperimentSpec":
        """Desk-scale copy: smaller N, T, epochs, rollouts, ground truth and repetitions."""
        n_list = tuple(sorted({max(FAST_MIN_N, n // FAST_N_DIVISOR) for n in self.n_list}))
        train = replace(self.train, max_epochs=min(self.train.max_epochs, FAST_MAX_EPOCHS))
        return replace(self, n_list=n_list, horizon=min(self.horizon, FAST_MAX_T), train=train,
                       rollouts=min(self.rollouts, FAST_M), truth_rollouts=min(self.truth_rollouts, FAST_TRUTH_ROLLOUTS),
                       repetitions=min(self.repetitions, FAST_MAX_REPS))


# ---------------------------------------------------------------- config

_EXPERIMENT_KEYS = {"recipe", "env", "n_list", "gamma", "methods", "targets", "repetitions", "horizon",
                    "rollouts", "truth_rollouts", "crossfit", "seed", "out"}
_TRAIN_LIST_KEYS = {"lr": float, "batch_size": int, "weight_decay": float, "embed_dim": int, "loss_alpha": float}
_TRAIN_SCALAR_KEYS = {"max_epochs", "patience", "ntn_slices", "hidden_dim", "mlp_width", "mlp_depth"}
_TRAIN_FLOAT_KEYS = {"ema_decay"}
_TUMOR_TABLE_KEYS = {"beta_c", "alpha", "beta"}  # one entry per patient group
_TUMOR_KEYS = {f.name.lower(): f.name for f in fields(TumorParams)}  # the parser lowercases keys
_SECTIONS = {"experiment": _EXPERIMENT_KEYS,
             "train": set(_TRAIN_LIST_KEYS) | _TRAIN_SCALAR_KEYS | _TRAIN_FLOAT_KEYS,
             "env": {"linear_reward_var"},
             "tumor": set(_TUMOR_KEYS)}

TUMOR_DEFAULTS_FILE = Path(__file__).with_name("tumor_defaults.ini")


def _key_line(lines, section, key):
    current = None
    for no, line in enumerate(lines, 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].split(":", 1)[0].strip().lower() == key:
            return no
    return None


def _parse_list(raw, conv, name):
    items = [x.strip() for x in raw.replace(";", ",").split(",") if x.strip()]
    try:
        return tuple(conv(x) for x in items)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def _parse_bool(raw, name):
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{name}: expected a boolean, got {raw!r}")


def _parse_int(raw, name):
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None


def _parse_float(raw, name):
    try:
        return float(raw.strip())
    except ValueError:
        raise ConfigError(f"{name}: expected a number, got {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentSpec:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        if lineno is None and getattr(exc, "errors", None):
            lineno = exc.errors[0][0]
        where = f"line {lineno}: " if lineno is not None else ""
        raise ConfigError(f"{source}: syntax error at {where}{exc.message.splitlines()[0]}") from None
    lines = text.splitlines()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}] at line {_key_line(lines, section, '') or '?'}")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                no = _key_line(lines, section, key)
                raise ConfigError(f"{source}: line {no}: unknown key {key!r} in [{section}]")
    if "experiment" not in parser:
        raise ConfigError(f"{source}: missing [experiment] section")
    ex = parser["experiment"]
    if "recipe" not in ex:
        raise ConfigError("recipe: required")
    recipe = ex["recipe"].strip()
    if recipe not in RECIPES:
        raise ConfigError(f"recipe: unknown recipe {recipe!r}; choose from {', '.join(RECIPES)}")
    env_raw = ex.get("env", RECIPE_ENVS[recipe][0].value).strip()
    try:
        env = EnvKind(env_raw)
    except ValueError:
        raise ConfigError(f"env: unknown env {env_raw!r}; choose from "
                          f"{', '.join(e.value for e in EnvKind)}") from None
    kw = {"recipe": recipe, "env": env}
    kw["n_list"] = _parse_list(ex["n_list"], int, "n_list") if "n_list" in ex else DEFAULT_N[recipe]
    kw["gammas"] = _parse_list(ex["gamma"], float, "gamma") if "gamma" in ex else DEFAULT_GAMMAS.get(recipe, (1.0,))
    kw["methods"] = _parse_list(ex["methods"], str, "methods") if "methods" in ex else DEFAULT_METHODS[recipe]
    kw["targets"] = _parse_list(ex["targets"], str, "targets") if "targets" in ex else ("A",)
    kw["horizon"] = _parse_int(ex["horizon"], "horizon") if "horizon" in ex else DEFAULT_HORIZON[env]
    for name in ("repetitions", "rollouts", "truth_rollouts", "seed"):
        if name in ex:
            kw[name] = _parse_int(ex[name], name)
    if "crossfit" in ex:
        kw["crossfit"] = _parse_bool(ex["crossfit"], "crossfit")
    if "out" in ex:
        kw["out"] = ex["out"].strip()
    tkw = {}
    if "train" in parser:
        tr = parser["train"]
        for key, conv in _TRAIN_LIST_KEYS.items():
            if key in tr:
                tkw[key] = _parse_list(tr[key], conv, f"train.{key}")
        for key in _TRAIN_SCALAR_KEYS:
            if key in tr:
                tkw[key] = _parse_int(tr[key], f"train.{key}")
        for key in _TRAIN_FLOAT_KEYS:
            if key in tr:
                tkw[key] = _parse_float(tr[key], f"train.{key}")
    kw["train"] = TrainGrid(**tkw)
    if "env" in parser and "linear_reward_var" in parser["env"]:
        kw["linear_reward_var"] = _parse_float(parser["env"]["linear_reward_var"], "env.linear_reward_var")
    if "tumor" in parser:
        kw["tumor"] = _parse_tumor(parser["tumor"])
    return ExperimentSpec(**kw)


def _parse_tumor(section) -> TumorParams:
    values = {}
    for key in section:
        name = f"tumor.{key}"
        values[_TUMOR_KEYS[key]] = _parse_list(section[key], float, name) if key in _TUMOR_TABLE_KEYS else \
            _parse_float(section[key], name)
    try:
        return TumorParams(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def tumor_defaults() -> TumorParams:
    """PK-PD constants from the shipped (non-normative) defaults file."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(TUMOR_DEFAULTS_FILE.read_text(), str(TUMOR_DEFAULTS_FILE))
    return _parse_tumor(parser["tumor"])


def parse_config(path) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


# ---------------------------------------------------------------- CSV I/O


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            vals = [row[h] for h in header] if isinstance(row, dict) else row
            w.writerow([fmt(v) for v in vals])
    return path


def dataset_header(dataset: Dataset) -> list:
    head = ["traj", "t"] + [f"o{k + 1}" for k in range(dataset.obs_dim)]
    head += ["action"] if dataset.actions.shape[2] == 1 else ["action", "action2"]
    return head + ["reward"]


def write_dataset(dataset: Dataset, path) -> Path:
    n, horizon = dataset.n_trajectories, dataset.horizon
    rows = []
    for i in range(n):
        for t in range(horizon):
            rows.append([i, t, *dataset.observations[i, t], *dataset.actions[i, t], dataset.rewards[i, t]])
    return write_csv(path, dataset_header(dataset), rows)


def read_dataset(path) -> Dataset:
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = [row for row in reader if row]
    obs_cols = [h for h in header if h.startswith("o") and h[1:].isdigit()]
    n_comp = 2 if "action2" in header else 1
    kinds = [k for k in EnvKind if OBS_DIM[k] == len(obs_cols) and ACTION_COMPONENTS[k] == n_comp]
    if len(kinds) != 1:
        raise ValueError(f"{path}: cannot infer the environment from header {header}")
    data = np.array(body, dtype=float)
    traj = data[:, 0].astype(int)
    t = data[:, 1].astype(int)
    n, horizon = traj.max() + 1, t.max() + 1
    if data.shape[0] != n * horizon:
        raise ValueError(f"{path}: expected {n * horizon} rows for a full panel, found {data.shape[0]}")
    d = len(obs_cols)
    obs = np.zeros((n, horizon, d))
    act = np.zeros((n, horizon, n_comp), dtype=np.int64)
    rew = np.zeros((n, horizon))
    obs[traj, t] = data[:, 2:2 + d]
    act[traj, t] = data[:, 2 + d:2 + d + n_comp].astype(np.int64)
    rew[traj, t] = data[:, -1]
    return Dataset(kinds[0], obs, act, rew)


def write_latents(latents: LatentTable, out_dir, prefix="latents") -> list:
    out_dir = Path(out_dir)
    paths = [write_csv(out_dir / f"{prefix}_u.csv", ["traj", "u"], list(enumerate(latents.u))),
             write_csv(out_dir / f"{prefix}_w.csv", ["t", "w"], list(enumerate(latents.w)))]
    per_traj = {k: np.asarray(v) for k, v in latents.aux.items()
                if np.ndim(v) >= 1 and np.shape(v)[0] == len(latents.u)}
    if per_traj:
        header = ["traj"]
        cols = []
        order = ["group", "rho", "K", "beta_c", "alpha", "beta"]
        keys = [k for k in order if k in per_traj] + sorted(k for k in per_traj if k not in order)
        for k in keys:
            v = per_traj[k]
            v2 = v.reshape(len(latents.u), -1)
            names = [k] if v2.shape[1] == 1 else [f"{k}{j + 1}" for j in range(v2.shape[1])]
            header += names
            cols.append(v2)
        table = np.hstack(cols)
        paths.append(write_csv(out_dir / f"{prefix}_aux.csv", header,
                               [[i, *row] for i, row in enumerate(table)]))
    return paths


# ---------------------------------------------------------------- recipes

EVAL_HEADER = ["env", "method", "N", "T", "gamma", "target", "seed", "eta_hat", "eta_true", "runtime_s"]
AGG_HEADER = ["env", "method", "N", "gamma", "target", "lmse", "bias", "n_ok", "n_failed"]
LINEAR_HEADER = ["seed", "assumption", "N", "T", "train_mse", "theory_mse", "ope_mse", "pred_mse"]
LINEAR_AGG_HEADER = ["assumption", "N", "T", "train_mse", "theory_mse", "ope_mse", "pred_mse", "owuc_floor"]
ABLATION_HEADER = ["env", "target", "variant", "lmse", "bias"]
TRUTH_HEADER = ["env", "gamma", "target", "eta_true", "stderr", "n_rollouts"]


@dataclass
class RunManifest:
    spec_hash: str
    version: str
    seeds: list
    wall_clock_s: float
    files: dict
    failed_cells: list
    cell_runtimes: list
    deterministic: bool

    @property
    def ok(self) -> bool:
        return not self.failed_cells

    def write(self, path) -> Path:
        payload = asdict(self)
        payload["files"] = {**self.files, Path(path).name: "self"}  # the manifest lists itself
        payload["python"] = platform.python_version()
        payload["numpy"] = np.__version__
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return Path(path)


def _linear_cell(args):
    n, horizon, seed, target, m, reward_var = args
    start = time.perf_counter()
    rows = linear_replication(n, horizon, seed, target=target, n_rollouts=m, reward_var=reward_var)
    return rows, time.perf_counter() - start


def _nn_cell(args):
    spec, n, gamma, method, rep = args
    cfg = spec.env_config(n, gamma, seed=data_seed(spec.seed, n, gamma, rep))
    dataset, _ = generate(cfg, PolicySpec.behavior())
    seed = train_seed(spec.seed, n, gamma, method, rep)
    grid = spec.train.cells()
    out = []
    for target in spec.targets:
        ope_cfg = OpeConfig(named_target(spec.env, target), spec.rollouts, spec.crossfit,
                            ope_seed(seed, target))
        start = time.perf_counter()
        try:
            est = fit_and_estimate(dataset, method, grid, ope_cfg, seed)
            err = None
        except (TrainingDiverged, FloatingPointError, ValueError, RuntimeError) as exc:
            est, err = float("nan"), f"{type(exc).__name__}: {exc}"
        out.append((target, seed, est, time.perf_counter() - start, err))
    return out


def _truth(spec: ExperimentSpec, gamma: float, target: str):
    cfg = spec.env_config(1, gamma)
    seed = truth_seed(spec.seed, spec.env, gamma, target)
    return true_policy_value(cfg, named_target(spec.env, target), spec.truth_rollouts, seed=seed)


def _map(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _run_linear(spec, out, workers, deterministic, log):
    target = named_target(spec.env, spec.targets[0])
    jobs, seeds = [], []
    for n in spec.n_list:
        for rep in range(spec.repetitions):
            s = data_seed(spec.seed, n, 1.0, rep)
            jobs.append((n, spec.horizon, s, target, spec.rollouts, spec.linear_reward_var))
            seeds.append({"N": n, "rep": rep, "seed": s})
    results = _map(_linear_cell, jobs, workers)
    rows, runtimes = [], []
    for (cell_rows, rt), sd in zip(results, seeds):
        rows.extend(cell_rows)
        runtimes.append({**sd, "runtime_s": rt})
    files = [write_csv(out / "linear_props.csv", LINEAR_HEADER, rows)]
    agg = []
    for n in spec.n_list:
        for kind in DEFAULT_METHODS["linear-props"]:
            sel = [r for r in rows if r["N"] == n and r["assumption"] == kind]
            agg.append({"assumption": kind, "N": n, "T": spec.horizon,
                        **{k: float(np.mean([r[k] for r in sel])) for k in LINEAR_AGG_HEADER[3:]}})
    files.append(write_csv(out / "linear_props_summary.csv", LINEAR_AGG_HEADER, agg))
    if log:
        for r in agg:
            log(f"N={r['N']} {r['assumption']}: pred_mse={r['pred_mse']:.4g} ope_mse={r['ope_mse']:.4g}")
    return files, seeds, runtimes, []


def _run_neural(spec, out, workers, deterministic, log):
    truths = {}
    for g in spec.gammas:
        for tgt in spec.targets:
            truths[(g, tgt)] = _truth(spec, g, tgt)
    files = [write_csv(out / "truth.csv", TRUTH_HEADER,
                       [[spec.env.value, g, t, v.value, v.stderr, v.n_rollouts] for (g, t), v in truths.items()])]
    jobs = [(spec, n, g, method, rep) for n in spec.n_list for g in spec.gammas
            for method in spec.methods for rep in range(spec.repetitions)]
    results = _map(_nn_cell, jobs, workers)
    rows, seeds, runtimes, failed = [], [], [], []
    for (_, n, g, method, rep), cell in zip(jobs, results):
        for target, seed, est, rt, err in cell:
            seeds.append({"N": n, "gamma": g, "method": method, "rep": rep, "target": target, "seed": seed})
            runtimes.append({"N": n, "gamma": g, "method": method, "rep": rep, "target": target, "runtime_s": rt})
            if err is not None:
                failed.append({"N": n, "gamma": g, "method": method, "rep": rep, "target": target, "error": err})
                if log:
                    log(f"cell failed: N={n} gamma={g} {method} rep={rep} {target}: {err}")
                continue
            rows.append({"env": spec.env.value, "method": method, "N": n, "T": spec.horizon, "gamma": g,
                         "target": target, "seed": seed, "eta_hat": est, "eta_true": truths[(g, target)].value,
                         "runtime_s": 0.0 if deterministic else rt})
    files.append(write_csv(out / "results.csv", EVAL_HEADER, rows))
    agg = []
    for n in spec.n_list:
        for g in spec.gammas:
            for method in spec.methods:
                for tgt in spec.targets:
                    sel = [r["eta_hat"] for r in rows if (r["N"], r["gamma"], r["method"], r["target"]) ==
                           (n, g, method, tgt)]
                    n_fail = sum(1 for f in failed if (f["N"], f["gamma"], f["method"], f["target"]) ==
                                 (n, g, method, tgt))
                    lmse, bias = metrics(sel, truths[(g, tgt)].value) if sel else (math.nan, math.nan)
                    agg.append({"env": spec.env.value, "method": method, "N": n, "gamma": g, "target": tgt,
                                "lmse": lmse, "bias": bias, "n_ok": len(sel), "n_failed": n_fail})
                    if log:
                        log(f"N={n} gamma={g} {method} target {tgt}: lmse={lmse:.4g} bias={bias:.4g}")
    files.append(write_csv(out / "aggregate.csv", AGG_HEADER, agg))
    if spec.recipe == "ablation":
        abl = [{"env": r["env"], "target": r["target"], "variant": r["method"], "lmse": r["lmse"],
                "bias": r["bias"]} for r in agg]
        files.append(write_csv(out / "ablation.csv", ABLATION_HEADER, abl))
    return files, seeds, runtimes, failed


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(spec: ExperimentSpec, out_dir=None, workers: int = 1, deterministic: bool = False, log=None) -> RunManifest:
    """Execute a recipe, write its CSVs and a manifest listing every emitted file."""
    out = Path(out_dir if out_dir is not None else spec.out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ConfigError(f"out: directory {out} is not writable")
    start = time.perf_counter()
    runner = _run_linear if spec.recipe == "linear-props" else _run_neural
    files, seeds, runtimes, failed = runner(spec, out, workers, deterministic, log)
    spec_path = out / "spec.json"
    spec_path.write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    files.append(spec_path)
    manifest = RunManifest(
        spec_hash=spec.spec_hash(), version=__version__, seeds=seeds,
        wall_clock_s=time.perf_counter() - start,
        files={p.name: _sha256(p) for p in files}, failed_cells=failed, cell_runtimes=runtimes,
        deterministic=deterministic,
    )
    manifest.write(out / "manifest.json")
    return manifest
