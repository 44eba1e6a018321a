"""Experiment configuration, orchestration and result tables.

An experiment is a grid of cells ``(seed, method, shots)``. Each cell builds
or learns a trajectory on the training phantoms, then acquires,
reconstructs, fits and scores the evaluation phantoms against a fit of their
fully sampled sequences. Finetuned rows reuse the cell's trajectory and add
per-sample refinement.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import rawtensor
from .decay_model import (DEFAULT_INVERSION_TIMES, WeightedSequence, cardiac_phantom_config,
                          generate_phantom, render_sequence)
from .fitting import fit_map, model_sequence
from .metrics import evaluate
from .optimizer import (OptimRun, ScheduleConfig, StageConfig, initial_run, run_schedule, run_stage,
                        support_mask)
from .sampling import FrameRecon, ReconConfig
from .trajectory import (KinematicLimits, cartesian_trajectory, golden_angle_scheme,
                         radial_scheme, read_trajectory_csv, write_trajectory_csv)

log = logging.getLogger(__name__)

METHODS = ("radial", "gar", "single", "recon_only", "t1_pilot")
LEARNED = {"single": "single_mask", "recon_only": "recon_only", "t1_pilot": "full"}
RESULT_FIELDS = ("seed", "method", "shots", "finetuned", "acceleration", "status",
                 "decay_psnr_db", "decay_vif", "map_psnr_db", "map_vif", "error")
METRIC_FIELDS = ("decay_psnr_db", "decay_vif", "map_psnr_db", "map_vif")
MISSING = "—"


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def acceleration_factor(height, width, n_shots, m_points) -> float:
    """Grid size over acquired sample count, ``(H W) / (n m)``."""
    return (height * width) / (n_shots * m_points)


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale experiment grid.

    Units: inversion times in ms; ``noise_sigma`` is a fraction of the clean
    signal range over all phantoms (``noise_relative``) or absolute signal
    units; k-space in cycles per pixel, ``[-0.5, 0.5]``.
    """

    width: int = 64
    height: int = 64
    phantoms: tuple = ()
    n_phantoms: int = 8
    inversion_times: tuple = DEFAULT_INVERSION_TIMES
    noise_sigma: float = 0.01
    noise_relative: bool = True
    shots: tuple = (8,)
    m_points: int = 65
    n_control: int = 9
    methods: tuple = METHODS
    finetune: tuple = (False,)
    seeds: tuple = (0,)
    output_dir: str = "runs/default"
    recon: ReconConfig = ReconConfig(tikhonov_lambda=80.0, solver="cholesky")
    limits: KinematicLimits = KinematicLimits()
    stages: tuple = (
        StageConfig("recon_pretrain", 60, learning_rate=1e-2, kinematic_penalty_weight=100.0),
        StageConfig("decay", 60, learning_rate=1e-2, kinematic_penalty_weight=100.0, lambda_learning_rate=1e-2),
        StageConfig("per_sample", 12),
    )
    train_fraction: float = 0.8
    evaluate_on: str = "validation"
    full_sampling: bool = False

    def stage(self, name):
        for s in self.stages:
            if s.stage == name:
                return s
        return None

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(config_to_dict(self), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- parsing

def _get(d, key, kind, default, path):
    if key not in d:
        if default is _REQUIRED:
            raise ConfigError(path + key, "missing required field")
        return default
    v = d[key]
    try:
        if kind is bool:
            if not isinstance(v, bool):
                raise TypeError
            return v
        if kind is int:
            if isinstance(v, bool) or int(v) != v:
                raise TypeError
            return int(v)
        return kind(v)
    except (TypeError, ValueError):
        raise ConfigError(path + key, f"expected {kind.__name__}, got {v!r}") from None


_REQUIRED = object()


def _list(d, key, kind, default, path):
    if key not in d:
        if default is _REQUIRED:
            raise ConfigError(path + key, "missing required field")
        return tuple(default)
    v = d[key]
    if not isinstance(v, (list, tuple)):
        v = [v]
    return tuple(_get({key: x}, key, kind, None, path) for x in v)


def config_from_dict(d: dict) -> ExperimentConfig:
    """Validate a parsed config mapping; raises :class:`ConfigError`."""
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a mapping")
    known = {"grid", "phantoms", "inversion_times", "noise", "acquisition", "methods", "finetune",
             "seeds", "output_dir", "recon", "limits", "schedule", "split", "full_sampling"}
    for k in d:
        if k not in known:
            raise ConfigError(str(k), "unknown field")
    grid = d.get("grid")
    if not isinstance(grid, dict):
        raise ConfigError("grid", "missing required field")
    width = _get(grid, "width", int, _REQUIRED, "grid.")
    height = _get(grid, "height", int, _REQUIRED, "grid.")
    if width < 1 or height < 1:
        raise ConfigError("grid", "dimensions must be positive")

    ph = d.get("phantoms")
    if ph is None:
        raise ConfigError("phantoms", "missing required field")
    if isinstance(ph, dict):
        if ph.get("generator") != "cardiac":
            raise ConfigError("phantoms.generator", "only 'cardiac' is available")
        n_ph = _get(ph, "count", int, _REQUIRED, "phantoms.")
        phantoms = ()
    elif isinstance(ph, list):
        for i, p in enumerate(ph):
            if not isinstance(p, dict) or not isinstance(p.get("ellipses"), list):
                raise ConfigError(f"phantoms[{i}].ellipses", "missing required field")
            for j, e in enumerate(p["ellipses"]):
                for key in ("center", "axes", "a", "b", "t1_star"):
                    if key not in e:
                        raise ConfigError(f"phantoms[{i}].ellipses[{j}].{key}", "missing required field")
        phantoms = tuple(json.dumps(p, sort_keys=True) for p in ph)
        n_ph = len(phantoms)
    else:
        raise ConfigError("phantoms", "expected a generator mapping or a list of phantoms")
    if n_ph < 1:
        raise ConfigError("phantoms", "need at least one phantom")

    times = _list(d, "inversion_times", float, DEFAULT_INVERSION_TIMES, "")
    if len(times) < 3 or any(t <= 0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("inversion_times", "need >= 3 positive, strictly increasing values (ms)")

    noise = d.get("noise", {}) or {}
    sigma = _get(noise, "sigma", float, 0.01, "noise.")
    relative = _get(noise, "relative", bool, True, "noise.")
    if sigma < 0:
        raise ConfigError("noise.sigma", "must be non-negative")

    acq = d.get("acquisition")
    if not isinstance(acq, dict):
        raise ConfigError("acquisition", "missing required field")
    shots = _list(acq, "shots", int, _REQUIRED, "acquisition.")
    m_points = _get(acq, "points_per_shot", int, _REQUIRED, "acquisition.")
    n_control = _get(acq, "control_points", int, 9, "acquisition.")
    if not shots or any(s < 1 for s in shots):
        raise ConfigError("acquisition.shots", "shot counts must be positive")
    if m_points < 3 or n_control < 2:
        raise ConfigError("acquisition", "need points_per_shot >= 3 and control_points >= 2")
    full = _get(d, "full_sampling", bool, False, "")
    if not full:
        for s in shots:
            if s * m_points >= width * height:
                raise ConfigError("acquisition.shots", f"{s} x {m_points} samples do not undersample the grid")

    methods = _list(d, "methods", str, METHODS, "")
    for m in methods:
        if m not in METHODS:
            raise ConfigError("methods", f"unknown method {m!r}")
    finetune = _list(d, "finetune", bool, (False,), "")
    seeds = _list(d, "seeds", int, (0,), "")
    out = _get(d, "output_dir", str, "runs/default", "")

    rc = d.get("recon", {}) or {}
    try:
        recon = ReconConfig(
            method=_get(rc, "method", str, "cg-least-squares", "recon."),
            cg_iterations=_get(rc, "cg_iterations", int, 60, "recon."),
            tikhonov_lambda=_get(rc, "tikhonov_lambda", float, 80.0, "recon."),
            dcf=_get(rc, "dcf", bool, True, "recon."),
            solver=_get(rc, "solver", str, "cholesky", "recon."),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("recon", str(exc)) from None

    lc = d.get("limits", {}) or {}
    limits = KinematicLimits(_get(lc, "v_max", float, 1 / 32, "limits."),
                             _get(lc, "a_max", float, 1 / 256, "limits."),
                             _get(lc, "dt", float, 1.0, "limits."))

    sc = d.get("schedule", {}) or {}
    base = ExperimentConfig()
    stages = []
    for st in base.stages:
        s = sc.get(st.stage, {}) or {}
        p = f"schedule.{st.stage}."
        try:
            stages.append(replace(
                st,
                iterations=_get(s, "iterations", int, st.iterations, p),
                learning_rate=_get(s, "learning_rate", float, st.learning_rate, p),
                kinematic_penalty_weight=_get(s, "kinematic_penalty_weight", float, st.kinematic_penalty_weight, p),
                lambda_learning_rate=_get(s, "lambda_learning_rate", float, st.lambda_learning_rate, p),
                momentum=_get(s, "momentum", float, st.momentum, p),
                seed=_get(s, "seed", int, st.seed, p),
            ))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"schedule.{st.stage}", str(exc)) from None

    split = d.get("split", {}) or {}
    frac = _get(split, "train_fraction", float, 0.8, "split.")
    on = _get(split, "evaluate_on", str, "validation", "split.")
    if not 0 < frac <= 1:
        raise ConfigError("split.train_fraction", "must lie in (0, 1]")
    if on not in ("validation", "all"):
        raise ConfigError("split.evaluate_on", "expected 'validation' or 'all'")

    return ExperimentConfig(width=width, height=height, phantoms=phantoms, n_phantoms=n_ph,
                            inversion_times=times, noise_sigma=sigma, noise_relative=relative,
                            shots=shots, m_points=m_points, n_control=n_control, methods=methods,
                            finetune=finetune, seeds=seeds, output_dir=out, recon=recon, limits=limits,
                            stages=tuple(stages), train_fraction=frac, evaluate_on=on, full_sampling=full)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    phantoms = ([json.loads(p) for p in cfg.phantoms] if cfg.phantoms
                else {"generator": "cardiac", "count": cfg.n_phantoms})
    sched = {}
    for s in cfg.stages:
        e = asdict(s)
        e.pop("stage")
        e.pop("batch_size")
        sched[s.stage] = e
    return {
        "grid": {"width": cfg.width, "height": cfg.height},
        "phantoms": phantoms,
        "inversion_times": list(cfg.inversion_times),
        "noise": {"sigma": cfg.noise_sigma, "relative": cfg.noise_relative},
        "acquisition": {"shots": list(cfg.shots), "points_per_shot": cfg.m_points,
                        "control_points": cfg.n_control},
        "methods": list(cfg.methods),
        "finetune": list(cfg.finetune),
        "seeds": list(cfg.seeds),
        "output_dir": cfg.output_dir,
        "recon": {k: v for k, v in asdict(cfg.recon).items() if k != "cg_tol"},
        "limits": asdict(cfg.limits),
        "schedule": sched,
        "split": {"train_fraction": cfg.train_fraction, "evaluate_on": cfg.evaluate_on},
        "full_sampling": cfg.full_sampling,
    }


def load_config(path) -> ExperimentConfig:
    """Parse a YAML config file; YAML syntax errors are reported with their line."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "<file>"
        raise ConfigError(where, f"YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    return config_from_dict(data)


def bundled_config_path(name="cardiac.yaml") -> Path:
    return Path(str(resources.files("t1pilot") / "data" / name))


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    phantoms: list
    sequences: list
    noise_sigma: float
    train: list
    evaluation: list


def build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    """Phantoms and noisy sequences for one seed (fully deterministic)."""
    if cfg.phantoms:
        specs = [dict(json.loads(p), width=cfg.width, height=cfg.height) for p in cfg.phantoms]
    else:
        specs = [cardiac_phantom_config(cfg.width, cfg.height, seed=[seed, i]) for i in range(cfg.n_phantoms)]
    phantoms = [generate_phantom(s) for s in specs]
    sigma = cfg.noise_sigma
    if cfg.noise_relative:
        clean = [render_sequence(p, cfg.inversion_times) for p in phantoms]
        sigma *= max(float(np.ptp(c.frames)) for c in clean)
    seqs = [render_sequence(p, cfg.inversion_times, sigma, seed=[seed, i, 1]) for i, p in enumerate(phantoms)]
    n_train = max(1, int(round(cfg.train_fraction * len(seqs))))
    train = list(range(n_train))
    rest = list(range(n_train, len(seqs)))
    evaluation = rest if cfg.evaluate_on == "validation" and rest else list(range(len(seqs)))
    return Dataset(phantoms, seqs, sigma, train, evaluation)


# ---------------------------------------------------------------- cells

_PRETRAIN_CACHE: dict = {}


def _schedule(cfg, method, stages):
    return ScheduleConfig(stages=stages, mode=LEARNED[method], recon=cfg.recon, limits=cfg.limits,
                          n_shots=0, m_points=cfg.m_points, n_control=cfg.n_control)


def _learn(cfg, data: Dataset, method, shots, seed):
    """``(pretrained run or None, final run)`` for a learned method."""
    train = [data.sequences[i] for i in data.train]
    masks = [support_mask(s) for s in train]
    pre = cfg.stage("recon_pretrain")
    dec = cfg.stage("decay")
    bundle = replace(_schedule(cfg, method, tuple(s for s in (pre, dec) if s is not None)), n_shots=shots)
    start = None
    if pre is not None:
        # recon_only and t1_pilot share the untied pre-training run
        key = (cfg.digest(), seed, shots, method == "single")
        if key not in _PRETRAIN_CACHE:
            _PRETRAIN_CACHE[key] = run_schedule(train, replace(bundle, stages=(pre,)), masks=masks)
        start = _PRETRAIN_CACHE[key]
    return start, run_schedule(train, bundle, masks=masks, start=start)


def _baseline(cfg, method, shots, n_frames) -> OptimRun:
    if cfg.full_sampling:
        traj = cartesian_trajectory(cfg.height, cfg.width, n_frames)
    elif method == "radial":
        traj = radial_scheme(shots, cfg.m_points, n_frames)
    else:
        traj = golden_angle_scheme(shots, cfg.m_points, n_frames)
    return OptimRun(traj, cfg.recon, cfg.limits, frozen=True)


def reconstruct_sequence(run: OptimRun, seq: WeightedSequence, lam=None) -> np.ndarray:
    """Acquire ``seq`` along the run's trajectory and reconstruct every frame."""
    traj = run.trajectory
    recon = run.recon if lam is None else replace(run.recon, tikhonov_lambda=lam)
    out = []
    for f in range(traj.n_frames):
        op = FrameRecon(traj.frame_coords(f), seq.shape, recon, traj.m_points)
        out.append(op.forward(seq.frames[f][None])[0])
    return np.stack(out)


def score_sample(seq: WeightedSequence, recon_frames, mask=None):
    """Fit the reconstruction and score it against the fully sampled fit."""
    m = support_mask(seq) if mask is None else mask
    oracle = fit_map(seq, m)
    fit = fit_map(WeightedSequence(recon_frames, seq.inversion_times), m)
    model = model_sequence(fit, seq.inversion_times)
    ev = m & oracle.valid_mask
    return evaluate(fit.t1_map, oracle.t1_map, model, seq, ev), fit


def _mean_report(reports):
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_FIELDS}


def _write_loss_csv(run, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration", "stage", "loss", "data_term", "penalty_term"))
        for h in run.loss_history:
            w.writerow((h["iteration"], h["stage"], repr(float(h["loss"])), repr(float(h["data_term"])),
                        repr(float(h["penalty_term"]))))


def _stage_echo(run):
    out = []
    for entry in run.stage_log:
        c = entry["config"]
        out.append({"stage": entry["stage"], "loss": entry["loss"], "start": entry["start"],
                    "end": entry["end"], "config": asdict(c)})
    return out


def cell_name(method, shots, seed):
    return f"{method}_shots{shots}_seed{seed}"


def run_cell(cfg: ExperimentConfig, seed: int, method: str, shots: int, out_dir) -> list:
    """Run one grid cell and return its result rows (one per finetune flag)."""
    cdir = Path(out_dir) / "cells" / cell_name(method, shots, seed)
    cdir.mkdir(parents=True, exist_ok=True)
    accel = acceleration_factor(cfg.height, cfg.width, shots, cfg.m_points)
    base = {"seed": seed, "method": method, "shots": shots, "acceleration": accel}
    flags = sorted(set(cfg.finetune))
    try:
        data = build_dataset(cfg, seed)
        n_frames = len(cfg.inversion_times)
        if method in LEARNED and not cfg.full_sampling:
            init = initial_run(n_frames, replace(_schedule(cfg, method, ()), n_shots=shots))
            write_trajectory_csv(init.trajectory, cdir / "trajectory_init.csv")
            pre, run = _learn(cfg, data, method, shots, seed)
            if pre is not None:
                write_trajectory_csv(pre.trajectory, cdir / "trajectory_recon_pretrain.csv")
            if cfg.stage("decay") is not None:
                write_trajectory_csv(run.trajectory, cdir / "trajectory_decay.csv")
            write_trajectory_csv(run.trajectory, cdir / "trajectory_final.csv")
            _write_loss_csv(run, cdir / "loss.csv")
            (cdir / "stages.yaml").write_text(yaml.safe_dump(_stage_echo(run), sort_keys=True))
        else:
            run = _baseline(cfg, method, shots, n_frames)
            write_trajectory_csv(run.trajectory, cdir / "trajectory_final.csv")
        eval_seqs = [data.sequences[i] for i in data.evaluation]
        masks = [support_mask(s) for s in eval_seqs]
        rows = []
        for ft in flags:
            lams = [None] * len(eval_seqs)
            if ft and not cfg.full_sampling:
                ps = cfg.stage("per_sample") or StageConfig("per_sample", 12)
                refined = run_stage(run, eval_seqs, ps, "decay", masks)
                lams = refined.sample_lambdas
                (cdir / "sample_lambdas.json").write_text(json.dumps([repr(float(x)) for x in lams]))
            reports = []
            for k, (seq, m, lam) in enumerate(zip(eval_seqs, masks, lams)):
                frames = seq.frames if cfg.full_sampling else reconstruct_sequence(run, seq, lam)
                rep, fit = score_sample(seq, frames, m)
                reports.append(rep)
                tag = "ft" if ft else "base"
                rawtensor.write(cdir / f"recon_{tag}_{k}.t1pt", frames)
                rawtensor.write(cdir / f"t1_map_{tag}_{k}.t1pt", fit.t1_map)
            rows.append({**base, "finetuned": ft, "status": "ok", **_mean_report(reports), "error": ""})
        return rows
    except Exception as exc:  # a failed cell is reported, the grid continues
        log.exception("cell %s failed", cell_name(method, shots, seed))
        msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return [{**base, "finetuned": ft, "status": "failed", **{k: math.nan for k in METRIC_FIELDS},
                 "error": msg} for ft in flags]


def _cell_job(args):
    cfg, seed, method, shots, out = args
    return run_cell(cfg, seed, method, shots, out)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in RESULT_FIELDS})


def read_results(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            r = dict(r)
            r["seed"] = int(r["seed"])
            r["shots"] = int(r["shots"])
            r["finetuned"] = r["finetuned"] == "true"
            for k in ("acceleration",) + METRIC_FIELDS:
                r[k] = float(r[k])
            rows.append(r)
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs=1) -> list:
    """Run every cell of the grid and write ``results.csv`` plus a config echo."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
    order = {m: i for i, m in enumerate(METHODS)}
    cells = [(cfg, seed, method, shots, str(out))
             for seed in cfg.seeds for shots in cfg.shots
             for method in sorted(cfg.methods, key=order.get)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_job, cells))
    else:
        results = [_cell_job(c) for c in cells]
    rows = [r for cell in results for r in cell]
    rows.sort(key=lambda r: (r["seed"], r["shots"], order[r["method"]], r["finetuned"]))
    write_results(rows, out / "results.csv")
    return rows


# ---------------------------------------------------------------- report

def _label(method, finetuned):
    return method + (" +ft" if finetuned else "")


def aggregate(rows):
    """Mean metrics over seeds per ``(method, finetuned, shots)``, ignoring failed cells."""
    groups: dict = {}
    for r in rows:
        if r["status"] != "ok":
            groups.setdefault((r["method"], r["finetuned"], r["shots"]), [])
            continue
        groups.setdefault((r["method"], r["finetuned"], r["shots"]), []).append(r)
    out = {}
    for key, rs in groups.items():
        out[key] = {k: float(np.mean([r[k] for r in rs])) for k in METRIC_FIELDS} if rs else None
    return out


def format_table(rows) -> str:
    """Aligned text table: methods as rows; Decay then T1-Map PSNR/VIF per shot count."""
    if not rows:
        return ""
    agg = aggregate(rows)
    shots = sorted({r["shots"] for r in rows})
    order = {m: i for i, m in enumerate(METHODS)}
    keys = sorted({(r["method"], r["finetuned"]) for r in rows}, key=lambda k: (k[1], order.get(k[0], 99)))
    header = ["method"]
    for layout, prefix in (("Decay", "decay"), ("T1-Map", "map")):
        for s in shots:
            header += [f"{layout} PSNR@{s}", f"{layout} VIF@{s}"]
    body = []
    for method, ft in keys:
        line = [_label(method, ft)]
        for prefix in ("decay", "map"):
            for s in shots:
                v = agg.get((method, ft, s))
                if v is None:
                    line += [MISSING, MISSING]
                else:
                    line += [f"{v[prefix + '_psnr_db']:.2f}", f"{v[prefix + '_vif']:.4f}"]
        body.append(line)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]) + "\n"


def write_report(run_dir) -> str:
    """Write ``report.txt`` and plot-data CSVs for a finished run directory."""
    run_dir = Path(run_dir)
    res = run_dir / "results.csv"
    rows = read_results(res) if res.exists() else []
    table = format_table(rows)
    if not run_dir.exists():
        return table
    (run_dir / "report.txt").write_text(table)
    cells = run_dir / "cells"
    if cells.is_dir():
        plot = run_dir / "plot_data"
        plot.mkdir(exist_ok=True)
        for cdir in sorted(p for p in cells.iterdir() if p.is_dir()):
            traj_csv = cdir / "trajectory_final.csv"
            if traj_csv.exists():
                write_trajectory_csv(read_trajectory_csv(traj_csv), plot / f"trajectory_{cdir.name}.csv")
            tmap = cdir / "t1_map_base_0.t1pt"
            if tmap.exists():
                m = rawtensor.read(tmap)
                with open(plot / f"t1_map_{cdir.name}.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(("row", "col", "t1_ms"))
                    for (i, j), v in np.ndenumerate(m):
                        w.writerow((i, j, repr(float(v))))
    return table


# ---------------------------------------------------------------- standalone commands

def write_phantoms(cfg: ExperimentConfig, seed, out_dir, config_text=b"") -> list:
    """Phantom parameter maps and noisy sequences as raw tensors, plus provenance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = build_dataset(cfg, seed)
    files = []
    for i, (ph, seq) in enumerate(zip(data.phantoms, data.sequences)):
        for name, arr in (("a", ph.a_map), ("b", ph.b_map), ("t1_star", ph.t1_star_map),
                          ("t1", ph.t1_map), ("labels", ph.region_labels.astype(np.uint8)),
                          ("sequence", seq.frames)):
            fn = f"phantom{i}_{name}.t1pt"
            rawtensor.write(out / fn, arr)
            files.append(fn)
    prov = {"config_sha256": hashlib.sha256(config_text).hexdigest() if config_text else cfg.digest(),
            "seed": seed, "inversion_times_ms": list(cfg.inversion_times),
            "noise_sigma": data.noise_sigma, "files": files}
    (out / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")
    return files


def write_fit(seq: WeightedSequence, out_dir, prefix="fit"):
    """Fit a sequence and store ``a, b, t1_star, t1`` (f32) plus the valid mask (u8)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fit = fit_map(seq)
    for name, arr in (("a", fit.a_map), ("b", fit.b_map), ("t1_star", fit.t1_star_map), ("t1", fit.t1_map),
                      ("valid", fit.valid_mask.astype(np.uint8))):
        rawtensor.write(out / f"{prefix}_{name}.t1pt", arr)
    return fit


def write_baseline_trajectories(cfg: ExperimentConfig, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_frames = len(cfg.inversion_times)
    files = []
    for shots in cfg.shots:
        for name, fn in (("radial", radial_scheme), ("gar", golden_angle_scheme)):
            path = out / f"{name}_shots{shots}.csv"
            write_trajectory_csv(fn(shots, cfg.m_points, n_frames), path)
            files.append(path.name)
    return files
