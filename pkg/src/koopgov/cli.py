"""Command-line harness: ``collect``, ``train``, ``eval`` and ``govern``.

Every subcommand takes ``--config`` (one JSON document; unknown keys are an
error), ``--out`` (output directory) and ``--seed`` (overrides the config).
Exit codes: 0 success, 2 configuration error, 1 runtime failure.

Each output file carries the config hash and tool version, as ``#`` comment
lines in CSVs and as top-level fields in JSON documents.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines as bl
from . import data
from . import governor as gv
from . import koopman as km
from . import nn
from .errors import ConfigError, KoopGovError
from .normalization import NormalizationSpec
from .plant import VehicleParams

log = logging.getLogger("koopgov")

CURVE_COLUMNS = ("epoch", "L", "L1", "L2", "val_L1")


def _strict(cls, d, section):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


@dataclass
class ScenarioConfig:
    seeds: tuple = (0, 1, 2)
    duration: float = 60.0
    mus: tuple = data.TABLE2_MUS
    radii: tuple = data.TABLE2_RADII

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.mus = tuple(float(m) for m in self.mus)
        self.radii = tuple(float(r) for r in self.radii)
        if any(not 0 < m <= 1 for m in self.mus):
            raise ConfigError(f"scenario friction values must lie in (0, 1], got {self.mus}")
        if any(r <= 0 for r in self.radii):
            raise ConfigError("curve radii must be > 0")
        if self.duration <= 0 or not self.seeds:
            raise ConfigError("duration must be > 0 and at least one seed is required")


@dataclass
class EvalConfig:
    delta_masses: tuple = (0.0, 150.0, -150.0)
    robustness_delta_masses: tuple = (150.0, -150.0)

    def __post_init__(self):
        self.delta_masses = tuple(float(v) for v in self.delta_masses)
        self.robustness_delta_masses = tuple(float(v) for v in self.robustness_delta_masses)


@dataclass
class GovernConfig:
    variants: tuple = gv.VARIANTS
    mu: float = 0.2
    initial_speed: float = 12.0
    target_speed: float = 12.0
    speed_gain: float = 1500.0
    turns: tuple = ((1.0, 3.0, 0.05), (6.0, 3.0, 0.05))
    ramp: float = 0.5
    duration: float = 10.0
    mf_delta_mass: float = 150.0

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.turns = tuple(tuple(float(v) for v in t) for t in self.turns)
        bad = [v for v in self.variants if v not in gv.VARIANTS]
        if bad:
            raise ConfigError(f"unknown governor variant(s) {bad}; choose from {gv.VARIANTS}")
        if not 0 < self.mu <= 1:
            raise ConfigError(f"govern.mu must be in (0, 1], got {self.mu}")
        if any(len(t) != 3 for t in self.turns):
            raise ConfigError("each turn is [t_start, duration, amplitude]")

    def driver(self, params: VehicleParams) -> gv.DoubleTurnDriver:
        return gv.DoubleTurnDriver(self.target_speed, self.speed_gain, self.turns, self.ramp,
                                   (params.torque_min, params.torque_max))


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    scenarios: ScenarioConfig = field(default_factory=ScenarioConfig)
    split: tuple = (0.8, 0.1, 0.1)
    train: km.TrainConfig = field(default_factory=km.TrainConfig)
    mlp: bl.MLPConfig = field(default_factory=bl.MLPConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    safe_set: gv.SafeSet = field(default_factory=gv.SafeSet.default)
    govern: GovernConfig = field(default_factory=GovernConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        kw = {}
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "output_dir" in d:
            kw["output_dir"] = str(d["output_dir"])
        if "split" in d:
            kw["split"] = tuple(float(r) for r in d["split"])
        if "vehicle" in d:
            try:
                kw["vehicle"] = VehicleParams.from_dict(d["vehicle"])
            except TypeError as exc:
                raise ConfigError(f"invalid 'vehicle' section: {exc}") from exc
        for name, typ in (("scenarios", ScenarioConfig), ("train", km.TrainConfig),
                          ("mlp", bl.MLPConfig), ("eval", EvalConfig), ("govern", GovernConfig)):
            if name in d:
                kw[name] = _strict(typ, d[name], name)
        if "safe_set" in d:
            kw["safe_set"] = gv.SafeSet.from_dict(d["safe_set"])
        return cls(**kw)

    def to_dict(self) -> dict:
        def plain(v):
            if dataclasses.is_dataclass(v):
                return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
            if isinstance(v, (list, tuple)):
                return [plain(x) for x in v]
            return v
        d = {f.name: plain(getattr(self, f.name)) for f in dataclasses.fields(self)}
        d["vehicle"] = self.vehicle.to_dict()
        d["safe_set"] = self.safe_set.to_dict()
        return d

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, seed=int(seed))

    @property
    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def stamp(self) -> str:
        return f"config_hash={self.hash} tool_version={__version__}"

    # derived seeds, all fixed by the global seed
    @property
    def scenario_seeds(self) -> tuple:
        return tuple(self.seed + s for s in self.scenarios.seeds)

    def train_config(self) -> km.TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def mlp_config(self) -> bl.MLPConfig:
        return dataclasses.replace(self.mlp, seed=self.seed)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(d)


def scenario_specs(cfg: ExperimentConfig) -> list:
    sc = cfg.scenarios
    return data.default_scenarios(cfg.scenario_seeds, sc.duration, sc.mus, sc.radii)


def corpus_hash(directory) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(directory).glob("*.csv")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _json_dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------ stages

def run_collect(cfg: ExperimentConfig, out: Path) -> list:
    corpus = out / "corpus"
    corpus.mkdir(parents=True, exist_ok=True)
    trs = []
    for spec in scenario_specs(cfg):
        tr = data.run_scenario(spec, cfg.vehicle)
        data.write_trajectory(tr, corpus / data.trajectory_filename(tr), cfg.stamp())
        trs.append(tr)
    cov = data.coverage_report(trs)
    for name, row in cov.items():
        if not row["ok"]:
            log.warning("coverage: channel %s spans [%.4g, %.4g], needs <= %.4g and >= %.4g",
                        name, row["min"], row["max"], row["need_min_below"], row["need_max_above"])
    _json_dump({"config_hash": cfg.hash, "tool_version": __version__, "n_trajectories": len(trs),
                "n_samples": int(sum(len(t) for t in trs)), "coverage": cov}, out / "collect_report.json")
    return trs


def prepare(cfg: ExperimentConfig, trajectories):
    """Split, fit normalization on the training part, build normalized windows."""
    tr, va, te = data.split(trajectories, cfg.split, seed=cfg.seed)
    norm = data.fit_normalization(tr)
    K = cfg.train.seq_len
    W = data.window(tr, K).normalized(norm)
    V = data.window(va, K).normalized(norm)
    return (tr, va, te), norm, (W.X, W.U), (V.X, V.U)


def save_mlp(net, norm: NormalizationSpec, path, extra: dict) -> None:
    _json_dump({**extra, "kind": "mlp", "net": nn.to_dict(net), "norm": norm.to_dict()}, path)


def load_mlp(path):
    d = json.loads(Path(path).read_text())
    return nn.from_dict(d["net"]), NormalizationSpec.from_dict(d["norm"])


def run_train(cfg: ExperimentConfig, corpus_dir: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    trajectories = data.read_corpus(corpus_dir)
    _, norm, train_w, val_w = prepare(cfg, trajectories)
    rows = []
    model = km.train(train_w, val_w, cfg.train_config(), norm, on_epoch=rows.append)
    extra = {"config_hash": cfg.hash, "tool_version": __version__, "corpus_hash": corpus_hash(corpus_dir)}
    km.save(model, out / "model.json", extra)
    buf = io.StringIO()
    buf.write(f"# {cfg.stamp()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + [f"{r[k]:.9g}" for k in CURVE_COLUMNS[1:]])
    (out / "training_curve.csv").write_text(buf.getvalue())

    tr_split = data.split(trajectories, cfg.split, seed=cfg.seed)[0]
    I, O = bl.one_step_pairs(tr_split, norm)
    net = bl.train_mlp(I, O, cfg.mlp_config())
    save_mlp(net, norm, out / "mlp.json", extra)
    return model, net


def robustness(cfg: ExperimentConfig, model: km.KoopmanModel, test_trs) -> dict:
    """Koopman RMSE on the test scenarios re-simulated with a heavier/lighter plant."""
    keys = {(t.scenario_id, t.seed) for t in test_trs}
    specs = [s for s in scenario_specs(cfg) if (s.scenario_id, s.excitation.seed) in keys]
    kp = bl.PredictorHandle("koopman", model=model)
    nominal = bl.evaluate_one_step_rmse(kp, [data.run_scenario(s, cfg.vehicle) for s in specs])
    out = {"nominal": nominal.tolist(), "runs": []}
    for dm in cfg.eval.robustness_delta_masses:
        params = cfg.vehicle.with_(mass=cfg.vehicle.mass + dm)
        rm = bl.evaluate_one_step_rmse(kp, [data.run_scenario(s, params) for s in specs])
        out["runs"].append({"delta_mass": dm, "rmse": rm.tolist(), "ratio": (rm / nominal).tolist()})
    lighter = [r for r in out["runs"] if r["delta_mass"] < 0]
    heavier = [r for r in out["runs"] if r["delta_mass"] > 0]
    if lighter and heavier:
        worse = float(np.mean(lighter[0]["ratio"])) > float(np.mean(heavier[0]["ratio"]))
        out["decreased_mass_degrades_more"] = worse
        out["finding"] = ("decreased mass degrades more than increased mass" if worse else
                          "opposite of the reference finding: increased mass degrades more")
    return out


def run_eval(cfg: ExperimentConfig, corpus_dir: Path, model_path: Path, mlp_path: Path, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    trajectories = data.read_corpus(corpus_dir)
    test = data.split(trajectories, cfg.split, seed=cfg.seed)[2]
    model = km.load(model_path)
    preds = [bl.PredictorHandle("koopman", "koopman", model=model)]
    if mlp_path.exists():
        net, norm = load_mlp(mlp_path)
        preds.append(bl.PredictorHandle("mlp", "mlp", net=net, norm=norm))
    for dm in cfg.eval.delta_masses:
        preds.append(bl.PredictorHandle.physics(cfg.vehicle, delta_mass=dm))
    report = bl.evaluation_report(preds, test, {
        "corpus_hash": corpus_hash(corpus_dir), "seed": cfg.seed,
        "scenario_seeds": list(cfg.scenario_seeds),
        "test_trajectories": [f"{t.scenario_id}_seed{t.seed}" for t in test],
    })
    report["robustness"] = robustness(cfg, model, test)
    report["config_hash"] = cfg.hash
    report["tool_version"] = __version__
    _json_dump(report, out / "eval_report.json")
    return report


def run_govern(cfg: ExperimentConfig, model_path: Path | None, out: Path):
    """Closed-loop runs for each variant; returns ``(summary, runs)``."""
    out.mkdir(parents=True, exist_ok=True)
    g = cfg.govern
    params = cfg.vehicle.with_(friction=g.mu)
    model = km.load(model_path) if model_path is not None and model_path.exists() else None
    mf = params.with_(mass=params.mass + g.mf_delta_mass)
    summary = {"config_hash": cfg.hash, "tool_version": __version__, "runs": {}}
    runs = {}
    for variant in g.variants:
        run = gv.closed_loop_run(params, g.driver(params), variant, cfg.safe_set, model,
                                 (g.initial_speed, 0.0, 0.0), g.duration, mf_params=mf)
        runs[variant] = run
        tag = variant.lower().replace("-", "_")
        (out / f"governor_log_{tag}.csv").write_text(gv.governor_log_csv(run, cfg.stamp()))
        (out / f"phase_portrait_{tag}.csv").write_text(gv.phase_portrait_csv(run, cfg.stamp()))
        summary["runs"][variant] = {
            "min_h": run.min_h(cfg.safe_set),
            "bounding_box": list(gv.bounding_box(run.states)),
            "interventions": int(sum(r.torque_applied != r.torque_nominal for r in run.log)),
            "mean_solve_time_us": float(np.mean([r.solve_time for r in run.log]) * 1e6),
        }
    _json_dump(summary, out / "govern_summary.json")
    return summary, runs


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="koopgov", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("collect", "simulate the scenario corpus"),
                        ("train", "train the Koopman model and the MLP baseline"),
                        ("eval", "one-step prediction comparison report"),
                        ("govern", "closed-loop NO/MF/DK governor runs")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "eval"):
            p.add_argument("--corpus", type=Path, default=None, help="default: <out>/corpus")
        if name in ("eval", "govern"):
            p.add_argument("--model", type=Path, default=None, help="default: <out>/model.json")
        if name == "eval":
            p.add_argument("--mlp", type=Path, default=None, help="default: <out>/mlp.json")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_seed(args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path(cfg.output_dir)
    try:
        if args.command == "collect":
            run_collect(cfg, out)
        elif args.command == "train":
            run_train(cfg, args.corpus or out / "corpus", out)
        elif args.command == "eval":
            run_eval(cfg, args.corpus or out / "corpus", args.model or out / "model.json",
                     args.mlp or out / "mlp.json", out)
        else:
            run_govern(cfg, args.model or out / "model.json", out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (KoopGovError, OSError, ValueError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
