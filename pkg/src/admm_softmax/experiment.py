"""Experiment harness behind the command line: configuration, budgeted
training runs, rho/alpha grids, condition-number estimates and the Newton-CG
CG-residual diagnostic.

Configuration is an INI file with the sections listed in ``SCHEMA``. Values
resolve as: explicit overrides, then the ``OUTPUT_DIR`` environment variable
(output directory only), then the file, then the defaults below.
"""

import configparser
import csv
import io
import json
import logging
import os
import platform
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import __version__
from .admm import AdmmConfig, gram_matrix, precompute_w_system, run_admm
from .baselines import OptimizerConfig, run_baseline
from .data import SplitSpec, images_to_dataset, load_csv, parse_idx, split, split_indices
from .errors import AdmmSoftmaxError, ConfigError
from .features import elm_build, load_precomputed_features, read_header, write_features, write_weights
from .history import Stopwatch
from .linalg import build_laplacian
from .model import Dataset, RegularizerSpec, accuracy, misfit

log = logging.getLogger(__name__)

ALGORITHMS = ("admm", "newton-cg", "lbfgs", "sgd")


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text):
    items = [t for t in str(text).replace(";", ",").split(",") if t.strip()]
    return [float(t) for t in items]


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "format": (str, "idx"),            # idx, mlrf or csv
        "images": (str, ""),
        "labels": (str, ""),
        "path": (str, ""),                 # mlrf or csv file
        "label_column": (str, "-1"),
        "header": (_bool, False),
        "n_classes": (int, 10),
        "train": (int, 10000),
        "val": (int, 2000),
        "test": (int, 2000),
        "split_seed": (int, 0),
        "sequential": (_bool, False),
        "embedding": (str, "elm"),         # elm or none (idx only)
        "elm_seed": (int, 0),
        "elm_filters": (int, 9),
    },
    "run": {
        "algorithm": (str, "admm"),
        "time_budget": (float, 300.0),
        "output_dir": (str, "runs/default"),
        "seed": (int, 0),
        "n_workers": (int, 1),
    },
    "regularizer": {
        "operator": (str, "laplacian"),    # laplacian or identity
        "alpha": (float, 1e-6),
        "grid_height": (int, 0),           # only needed for mlrf/csv input
        "grid_width": (int, 0),
        "channels": (int, 0),
    },
    "admm": {
        "rho": (float, 1e-7),
        "eps_abs": (float, 1e-6),
        "eps_rel": (float, 1e-4),
        "max_iter": (int, 100),
        "z_newton_max_iter": (int, 100),
        "z_newton_grad_tol": (float, 1e-8),
        "inner_cg_max_iter": (int, 50),
        "inner_cg_tol": (float, 1e-8),
        "z_solver": (str, "auto"),
        "init": (str, "reference"),
        "init_scale": (float, 1e-3),
        "use_stopping": (_bool, True),
    },
    "newton-cg": {
        "max_iter": (int, 1000),
        "cg_max_iter": (int, 20),
        "cg_tol": (float, 1e-2),
        "cg_precond": (str, "none"),
        "grad_tol": (float, 0.0),
    },
    "lbfgs": {
        "max_iter": (int, 10000),
        "memory": (int, 10),
        "line_search": (str, "armijo"),
        "wolfe_c2": (float, 0.9),
        "grad_tol": (float, 0.0),
    },
    "sgd": {
        "max_iter": (int, 1000),           # epochs
        "batch_size": (int, 300),
        "learning_rate": (float, 0.1),
        "momentum": (float, 0.9),
        "lr_decay": (float, 1.0),
    },
    "grid": {
        "rho": (_float_list, "1e-7"),
        "alpha": (_float_list, "1e-6"),
    },
}


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Typed view of the merged configuration, one dict per section."""

    sections: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def algorithm(self):
        return self.sections["run"]["algorithm"]

    @property
    def time_budget(self):
        return self.sections["run"]["time_budget"]

    @property
    def output_dir(self):
        return self.sections["run"]["output_dir"]

    @property
    def seed(self):
        return self.sections["run"]["seed"]

    def replace(self, **updates):
        """Copy with ``{"section.key": value}`` style updates (already typed)."""
        new = {s: dict(v) for s, v in self.sections.items()}
        for dotted, value in updates.items():
            sec, key = dotted.split(".", 1)
            new[sec][key] = value
        return ExperimentConfig(new)

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        for sec, values in self.sections.items():
            cp[sec] = {k: _render(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def validate(self):
        d = self.sections["data"]
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"run.algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if d["format"] not in ("idx", "mlrf", "csv"):
            raise ConfigError(f"data.format must be idx, mlrf or csv, got {d['format']!r}")
        if d["embedding"] not in ("elm", "none"):
            raise ConfigError(f"data.embedding must be elm or none, got {d['embedding']!r}")
        if d["format"] != "idx" and d["embedding"] == "elm":
            raise ConfigError("the ELM embedding applies to idx images only; "
                              "set data.embedding = none")
        needed = ("images", "labels") if d["format"] == "idx" else ("path",)
        for key in needed:
            if not d[key]:
                raise ConfigError(f"data.{key} is required for format {d['format']}")
            if not os.path.exists(d[key]):
                raise ConfigError(f"data.{key}: no such file: {d[key]}")
        if self.time_budget < 0:
            raise ConfigError("run.time_budget must be nonnegative")
        if self.sections["regularizer"]["operator"] not in ("laplacian", "identity"):
            raise ConfigError("regularizer.operator must be laplacian or identity")
        try:
            self.admm_config(RegularizerSpec(sp.identity(1), 0.0))
            if self.algorithm != "admm":
                self.optimizer_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def admm_config(self, reg, rho=None):
        a = dict(self.sections["admm"])
        if rho is not None:
            a["rho"] = rho
        return AdmmConfig(reg=reg, time_budget=self.time_budget, seed=self.seed,
                          n_workers=self.sections["run"]["n_workers"], **a)

    def optimizer_config(self):
        kind = self.algorithm
        s = dict(self.sections[kind])
        if kind == "lbfgs":
            s["lbfgs_memory"] = s.pop("memory")
        return OptimizerConfig(kind=kind, time_budget=self.time_budget, seed=self.seed, **s)


def _parse_value(section, key, text):
    try:
        parser, _ = SCHEMA[section][key]
    except KeyError:
        raise ConfigError(f"unknown setting {section}.{key}") from None
    try:
        return parser(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r} ({exc})") from None


def default_config():
    return ExperimentConfig({
        sec: {k: (parser(d) if isinstance(d, str) and parser is not str else d)
              for k, (parser, d) in keys.items()}
        for sec, keys in SCHEMA.items()})


def load_config(path=None, overrides=None, env=None):
    """Merge defaults, an INI file, ``OUTPUT_DIR`` and ``overrides``.

    Args:
        path: INI file or None.
        overrides: mapping ``"section.key" -> str`` (command-line flags).
        env: environment mapping, ``os.environ`` by default.

    Returns:
        ExperimentConfig (not yet validated against the file system).
    """
    env = os.environ if env is None else env
    cfg = default_config()
    updates = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{sec}]")
            for key, text in cp[sec].items():
                updates[f"{sec}.{key}"] = _parse_value(sec, key, text)
    if env.get("OUTPUT_DIR"):
        updates["run.output_dir"] = env["OUTPUT_DIR"]
    for dotted, text in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section {sec!r} in override {dotted!r}")
        updates[dotted] = _parse_value(sec, key, text)
    return cfg.replace(**updates)


# -- data and regularizer -------------------------------------------------

@dataclass
class PreparedData:
    train: Dataset
    val: Dataset
    test: Dataset
    geometry: tuple = None       # (height, width, channels) of the feature grid


def load_data(cfg):
    """Read, embed and split the data described by ``cfg["data"]``."""
    d = cfg["data"]
    spec = SplitSpec(d["train"], d["val"], d["test"], seed=d["split_seed"],
                     sequential=d["sequential"])
    if d["format"] == "idx":
        raw = parse_idx(d["images"], d["labels"])
        parts = [raw.subset(i) for i in split_indices(raw.count, spec)]
        if d["embedding"] == "elm":
            emb = elm_build(d["elm_seed"], raw.height, raw.width, d["elm_filters"])
            geometry = (raw.height, raw.width, emb.n_filters)
        else:
            emb = None
            geometry = (raw.height, raw.width, 1)
        sets = [images_to_dataset(p, d["n_classes"], emb) for p in parts]
        return PreparedData(*sets, geometry=geometry)
    if d["format"] == "mlrf":
        full = load_precomputed_features(d["path"])
    else:
        label = d["label_column"]
        label = int(label) if label.lstrip("-").isdigit() else label
        full = load_csv(d["path"], label, header=d["header"], n_classes=d["n_classes"])
    r = cfg["regularizer"]
    geometry = None
    if r["grid_height"] > 0:
        geometry = (r["grid_height"], r["grid_width"], max(r["channels"], 1))
    return PreparedData(*split(full, spec), geometry=geometry)


def build_regularizer(cfg, n_features, geometry, alpha=None):
    r = cfg["regularizer"]
    alpha = r["alpha"] if alpha is None else alpha
    if r["operator"] == "identity":
        return RegularizerSpec(sp.identity(n_features, format="csr"), alpha)
    if geometry is None:
        raise ConfigError("the laplacian regularizer needs regularizer.grid_height, "
                          "grid_width and channels for this input, or operator = identity")
    h, w, c = geometry
    bias = n_features == h * w * c + 1
    if not bias and n_features != h * w * c:
        raise ConfigError(f"feature count {n_features} does not match grid {h}x{w}x{c}")
    return RegularizerSpec(build_laplacian(h, w, c, bias), alpha)


# -- training ---------------------------------------------------------------

def _train(cfg, data, reg, rho=None, gram=None, callback=None):
    if cfg.algorithm == "admm":
        return run_admm(data.train, data.val, cfg.admm_config(reg, rho=rho), callback=callback,
                        gram=gram)
    return run_baseline(data.train, data.val, reg, cfg.optimizer_config(), callback=callback)


def summarize(cfg, W, hist, data):
    best = hist.best_row()
    out = {
        "algorithm": cfg.algorithm,
        "best_iter": int(best.iter),
        "iterations": int(hist.rows[-1].iter),
        "train_loss": best.train_loss,
        "train_acc": best.train_acc,
        "val_loss": misfit(W, data.val),
        "val_acc": accuracy(W, data.val),
        "test_loss": misfit(W, data.test),
        "test_acc": accuracy(W, data.test),
        "wall_clock": hist.rows[-1].wall_clock,
        "stop_reason": hist.stop_reason,
        "seed": cfg.seed,
        "split_seed": cfg["data"]["split_seed"],
        "elm_seed": cfg["data"]["elm_seed"],
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    out.update({k: v for k, v in hist.diagnostics.items() if np.isscalar(v)})
    return out


def _write_json(path, obj):
    def clean(v):
        if isinstance(v, float) and not np.isfinite(v):
            return None
        return v
    with open(path, "w") as fh:
        json.dump({k: clean(v) for k, v in obj.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_run(out_dir, cfg, W, hist, summary):
    os.makedirs(out_dir, exist_ok=True)
    hist.write_csv(os.path.join(out_dir, "history.csv"))
    hist.write_timing_csv(os.path.join(out_dir, "timing.csv"))
    write_weights(os.path.join(out_dir, "weights.mlrf"), W)
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    with open(os.path.join(out_dir, "config.ini"), "w") as fh:
        fh.write(cfg.to_ini())


def cmd_train(cfg, data=None, callback=None):
    """Train one model and write history, timing, weights, summary and the
    echoed config into ``cfg.output_dir``.

    The clock starts after data loading and embedding; for ADMM it covers
    the W-system factorization, which is also reported on its own.

    Returns:
        (summary dict, best W, TrainHistory)
    """
    cfg.validate()
    if data is None:
        data = load_data(cfg)
    reg = build_regularizer(cfg, data.train.n_features, data.geometry)
    W, hist = _train(cfg, data, reg, callback=callback)
    summary = summarize(cfg, W, hist, data)
    write_run(cfg.output_dir, cfg, W, hist, summary)
    log.info("%s: best val acc %.4f at iter %d, test acc %.4f", cfg.algorithm,
             summary["val_acc"], summary["best_iter"], summary["test_acc"])
    return summary, W, hist


# -- condition numbers ---------------------------------------------------

def _power_iteration(apply, n, n_iter, rng):
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(n_iter):
        y = apply(x)
        lam = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
    return lam


def estimate_condition_number(sys, n_iter=200, seed=0):
    """Estimate ``lambda_max / lambda_min`` of a factored SPD matrix.

    Power iteration on ``A`` and on ``A^{-1}`` (through the Cholesky factor),
    ``n_iter`` steps each, with Rayleigh quotients. This is an estimate: it
    targets about 10% relative accuracy and tends to underestimate when the
    extreme eigenvalues are clustered.

    Args:
        sys: ``WSystemFactor`` or ``SpdFactor``.
    """
    factor = getattr(sys, "factor", sys)
    R = factor.upper
    n = factor.dimension
    rng = np.random.default_rng(seed)
    lam_max = _power_iteration(lambda x: R.T @ (R @ x), n, n_iter, rng)
    inv_max = _power_iteration(factor.solve, n, n_iter, rng)
    return lam_max * inv_max


# -- grid ---------------------------------------------------------------------

GRID_COLUMNS = ("rho", "alpha", "val_acc", "test_acc", "condition", "best_iter",
                "iterations", "status")


def cmd_grid(cfg, rho_grid=None, alpha_grid=None, data=None):
    """ADMM over every (rho, alpha) pair; ``D D^T`` is formed once.

    Writes ``grid.csv`` (one row per cell) and matrix-shaped
    ``grid_val_acc.csv``, ``grid_test_acc.csv`` and ``grid_condition.csv``
    (rows rho, columns alpha). A failing cell is recorded and the grid
    carries on.

    Returns:
        list of row dicts in grid order.
    """
    rho_grid = list(cfg["grid"]["rho"] if rho_grid is None else rho_grid)
    alpha_grid = list(cfg["grid"]["alpha"] if alpha_grid is None else alpha_grid)
    if not rho_grid or not alpha_grid:
        raise ConfigError("rho and alpha grids must be nonempty")
    cfg = cfg.replace(**{"run.algorithm": "admm"})
    cfg.validate()
    if data is None:
        data = load_data(cfg)
    sw = Stopwatch()
    gram = gram_matrix(data.train.D)
    log.info("formed D D^T in %.1f s", sw.elapsed())
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for rho in rho_grid:
        for alpha in alpha_grid:
            row = dict(rho=rho, alpha=alpha, val_acc=np.nan, test_acc=np.nan, condition=np.nan,
                       best_iter=-1, iterations=-1, status="ok")
            cell_cfg = cfg.replace(**{"admm.rho": rho, "regularizer.alpha": alpha})
            try:
                reg = build_regularizer(cell_cfg, data.train.n_features, data.geometry)
                admm_cfg = cell_cfg.admm_config(reg)
                wsys = precompute_w_system(data.train, admm_cfg, gram=gram)
                row["condition"] = estimate_condition_number(wsys)
                W, hist = run_admm(data.train, data.val, admm_cfg, w_system=wsys)
                s = summarize(cell_cfg, W, hist, data)
                row.update(val_acc=s["val_acc"], test_acc=s["test_acc"],
                           best_iter=s["best_iter"], iterations=s["iterations"])
            except (AdmmSoftmaxError, ValueError, ArithmeticError) as exc:
                row["status"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
                log.warning("grid cell rho=%g alpha=%g failed: %s", rho, alpha, exc)
            rows.append(row)
    _write_grid(out_dir, rows, rho_grid, alpha_grid)
    with open(os.path.join(out_dir, "config.ini"), "w") as fh:
        fh.write(cfg.to_ini())
    return rows


def _write_grid(out_dir, rows, rho_grid, alpha_grid):
    with open(os.path.join(out_dir, "grid.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in rows:
            w.writerow([_cell(r[c]) for c in GRID_COLUMNS])
    lookup = {(r["rho"], r["alpha"]): r for r in rows}
    for metric in ("val_acc", "test_acc", "condition"):
        with open(os.path.join(out_dir, f"grid_{metric}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rho\\alpha"] + [repr(float(a)) for a in alpha_grid])
            for rho in rho_grid:
                w.writerow([repr(float(rho))]
                           + [_cell(lookup[(rho, a)][metric]) for a in alpha_grid])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- CG diagnostic --------------------------------------------------------

def cmd_diag_cg(cfg, data=None):
    """Newton-CG run that also writes the terminal CG relative residual per
    Newton iteration (``cg_final_residuals.csv``) and the full CG residual
    traces of the first and last Newton iterations (``cg_traces.csv``).

    Returns:
        (summary, info) where ``info`` holds the per-iteration CG lists.
    """
    if cfg.algorithm != "newton-cg":
        raise ConfigError(f"diag-cg needs run.algorithm = newton-cg, got {cfg.algorithm!r}")
    summary, W, hist = cmd_train(cfg, data=data)
    info = hist.diagnostics
    write_cg_diagnostics(cfg.output_dir, info)
    return summary, info


def write_cg_diagnostics(out_dir, info):
    finals = info.get("cg_final_residual", [])
    traces = info.get("cg_traces", [])
    with open(os.path.join(out_dir, "cg_final_residuals.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["newton_iter", "cg_iterations", "final_relres"])
        for k, (its, res) in enumerate(zip(info.get("cg_iterations", []), finals), start=1):
            w.writerow([k, its, repr(float(res))])
    with open(os.path.join(out_dir, "cg_traces.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["which", "newton_iter", "cg_iter", "relres"])
        if traces:
            picks = [("first", 1, traces[0]), ("last", len(traces), traces[-1])]
            for which, k, tr in picks:
                for j, r in enumerate(tr):
                    w.writerow([which, k, j, repr(float(r))])


# -- embed / inspect ------------------------------------------------------

def cmd_embed(images, labels, out_path, seed=0, n_filters=9, limit=None, n_classes=10):
    """Apply the ELM embedding to an IDX image set and write an MLRF file."""
    raw = parse_idx(images, labels)
    if limit is not None:
        raw = raw.subset(np.arange(min(limit, raw.count)))
    emb = elm_build(seed, raw.height, raw.width, n_filters)
    data = images_to_dataset(raw, n_classes, emb)
    write_features(out_path, data)
    return data


def cmd_inspect(path):
    """Header fields of an MLRF or IDX file, as a dict."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"MLRF":
        info = read_header(path)
        size = os.path.getsize(path)
        n_f, n = info["n_features"], info["n_examples"]
        base = 17 + 8 * n_f * n + 4 * n + 4
        info["kind"] = "mlrf"
        if size == base:
            info["role"] = "dataset"
        elif size == base + 4:
            info["role"] = {0: "dataset", 1: "weights"}.get(_role(path, base), "unknown")
        else:
            info["role"] = "unknown"
        return info
    magic = int.from_bytes(head, "big")
    if magic in (0x803, 0x801):
        ndim = 3 if magic == 0x803 else 1
        with open(path, "rb") as fh:
            dims = np.frombuffer(fh.read(4 + 4 * ndim), dtype=">u4")[1:]
        return {"kind": "idx", "magic": hex(magic), "dims": [int(x) for x in dims]}
    raise ConfigError(f"{path}: not an MLRF or IDX file")


def _role(path, offset):
    with open(path, "rb") as fh:
        fh.seek(offset)
        return int.from_bytes(fh.read(4), "little")
