"""Run configuration and the stages wired together by the CLI."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import ForgetRequest, InteractionDataset
from .eraser import UnlearnConfig, alt_erase
from .errors import DataError
from .firstorder import TrainConfig, train
from .metrics import (DEFAULT_KS, EvalReport, accuracy_report, consistency_report,
                      repredict_score, reports_to_csv, reports_to_markdown, speedup)
from .mfmodel import ModelState, WeightScheme, init_model, save_checkpoint

log = logging.getLogger(__name__)

SOLVER_ALIASES = {"ah": "ah_newton", "hf": "hf_newton", "first-order": "first_order",
                  "ah_newton": "ah_newton", "hf_newton": "hf_newton", "first_order": "first_order"}
METHOD_LABELS = {"ah_newton": "AltEraser [AH-Newton]", "hf_newton": "AltEraser [HF-Newton]",
                 "first_order": "AltEraser [AdamW]"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 200
    num_items: int = 300
    rank: int = 4
    items_per_user: int = 30
    temperature: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class DatasetConfig:
    format: str = "synthetic"
    path: str | None = None
    max_users: int | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    lam: float = 1e-2
    weights: str = "uniform"
    w0: float = 0.05
    w0_cap: float = 0.1
    init_seed: int = 3


@dataclass(frozen=True)
class ForgetConfig:
    scenario: str = "noise"
    num_users: int = 64
    seed: int = 2


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple = DEFAULT_KS
    rbo_p: float = 0.9
    rbo_variant: str = "extrapolated"


@dataclass(frozen=True)
class BenchConfig:
    retrain_star_seed: int = 1000
    repeats: int = 1
    solvers: tuple = ("ah_newton", "hf_newton", "first_order")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    forget: ForgetConfig = field(default_factory=ForgetConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        out = _jsonable(dataclasses.asdict(self))
        out["model"]["lambda"] = out["model"].pop("lam")
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, blob, where):
    if blob is None:
        return cls()
    if not isinstance(blob, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(blob) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in blob.items():
        default = getattr(cls(), name) if name in fields else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(blob: dict) -> RunConfig:
    blob = json.loads(json.dumps(blob))
    model = blob.get("model")
    if isinstance(model, dict) and "lambda" in model:
        model["lam"] = model.pop("lambda")
    cfg = _build(RunConfig, blob, "config")
    if cfg.dataset.format not in ("synthetic", "movielens", "tsv"):
        raise ConfigError(f"config.dataset.format: unknown format {cfg.dataset.format!r}")
    if cfg.dataset.format != "synthetic":
        if not cfg.dataset.path:
            raise ConfigError("config.dataset.path is required for file datasets")
        if not Path(cfg.dataset.path).exists():
            raise ConfigError(f"config.dataset.path does not exist: {cfg.dataset.path}")
    if cfg.forget.scenario not in ("privacy", "noise"):
        raise ConfigError(f"config.forget.scenario: unknown scenario {cfg.forget.scenario!r}")
    if cfg.model.weights not in ("uniform", "item_popularity"):
        raise ConfigError(f"config.model.weights: unknown scheme {cfg.model.weights!r}")
    if cfg.eval.rbo_variant not in ("min", "extrapolated"):
        raise ConfigError(f"config.eval.rbo_variant: unknown variant {cfg.eval.rbo_variant!r}")
    for s in cfg.bench.solvers:
        if s not in SOLVER_ALIASES:
            raise ConfigError(f"config.bench.solvers: unknown solver {s!r}")
    return cfg


def load_config(path) -> RunConfig:
    try:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(blob)


def with_seed_offset(cfg: RunConfig, offset: int) -> RunConfig:
    """Shift every seed by ``offset`` (used for repeated runs)."""
    if offset == 0:
        return cfg
    syn = dataclasses.replace(cfg.dataset.synthetic, seed=cfg.dataset.synthetic.seed + offset)
    return cfg.replace(
        dataset=dataclasses.replace(cfg.dataset, synthetic=syn),
        split=dataclasses.replace(cfg.split, seed=cfg.split.seed + offset),
        model=dataclasses.replace(cfg.model, init_seed=cfg.model.init_seed + offset),
        train=dataclasses.replace(cfg.train, seed=cfg.train.seed + offset),
        forget=dataclasses.replace(cfg.forget, seed=cfg.forget.seed + offset),
        bench=dataclasses.replace(cfg.bench, retrain_star_seed=cfg.bench.retrain_star_seed + offset),
    )


def seeds_of(cfg: RunConfig) -> dict:
    return {"synthetic": cfg.dataset.synthetic.seed, "split": cfg.split.seed,
            "init": cfg.model.init_seed, "train": cfg.train.seed, "forget": cfg.forget.seed,
            "retrain_star": cfg.bench.retrain_star_seed, "unlearn": cfg.unlearn.seed}


# data preparation ----------------------------------------------------------


def load_dataset(cfg: RunConfig) -> InteractionDataset:
    dc = cfg.dataset
    if dc.format == "synthetic":
        s = dc.synthetic
        ds = dataio.make_planted(s.num_users, s.num_items, s.rank, s.items_per_user,
                                 s.temperature, s.seed)
    elif dc.format == "movielens":
        ds = dataio.load_movielens(dc.path)
    else:
        ds = dataio.load_tsv(dc.path)
    if dc.max_users is not None and dc.max_users < ds.num_users:
        ds = dataio.subsample_users(ds, dc.max_users)
    return dataio.split_per_user(ds, cfg.split.train_fraction, cfg.split.seed)


def make_request(cfg: RunConfig, ds_split: InteractionDataset):
    fc = cfg.forget
    if fc.scenario == "privacy":
        return ds_split, dataio.gen_forget_privacy(ds_split, fc.num_users, fc.seed)
    return dataio.inject_noise_and_gen_forget(ds_split, fc.num_users, fc.seed)


def prepare(cfg: RunConfig, forget_path=None) -> tuple[InteractionDataset, ForgetRequest]:
    """``(D_a, request)`` from the config, or from a previously written forget file."""
    ds = load_dataset(cfg)
    if forget_path is None:
        return make_request(cfg, ds)
    req = dataio.read_forget_request(forget_path, ds)
    if req.scenario == "noise":
        n = ds.num_items
        keys = req.pairs[:, 0] * n + req.pairs[:, 1]
        seen = np.concatenate([ds.train[:, 0] * n + ds.train[:, 1], ds.test[:, 0] * n + ds.test[:, 1]])
        if np.isin(keys, seen).any():
            raise DataError("noise request contains pairs that are real interactions")
        return dataio.restore_noise(ds, req), req
    return ds, req


def weight_scheme(cfg: RunConfig, ds_a: InteractionDataset) -> WeightScheme:
    mc = cfg.model
    return WeightScheme(mc.weights, mc.w0, mc.w0_cap).fit(ds_a)


def initial_model(cfg: RunConfig, ds_a: InteractionDataset, seed: int | None = None) -> ModelState:
    """Random start; ``seed`` overrides the configured init seed (Retrain*)."""
    mc = cfg.model
    return init_model(ds_a.num_users, ds_a.num_items, mc.dim, mc.lam,
                      weight_scheme(cfg, ds_a), mc.init_seed if seed is None else seed)


def unlearn_config(cfg: RunConfig, solver: str | None = None, workers: int | None = None) -> UnlearnConfig:
    uc = cfg.unlearn
    if solver is not None:
        uc = dataclasses.replace(uc, inner_solver=SOLVER_ALIASES[solver])
    if workers is not None:
        uc = dataclasses.replace(uc, parallel_workers=workers)
    return uc


# timed stages ------------------------------------------------------------


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


def run_train(cfg: RunConfig, ds: InteractionDataset, init: ModelState, seed: int | None = None):
    tc = cfg.train if seed is None else dataclasses.replace(cfg.train, seed=seed)
    (model, tlog), secs = timed(train, ds, tc, init)
    return model, tlog, secs


def run_unlearn(cfg: RunConfig, ds_a, req, original, solver=None, workers=None):
    (model, ulog), secs = timed(alt_erase, ds_a, req, original, unlearn_config(cfg, solver, workers))
    return model, ulog, secs


# evaluation --------------------------------------------------------------


def evaluate(name: str, model: ModelState, gold: ModelState, ds_r: InteractionDataset,
             req: ForgetRequest, ev: EvalConfig, runtime: float = float("nan"),
             retrain_seconds: float | None = None) -> list[EvalReport]:
    model.check_bound(ds_r)
    gold.check_bound(ds_r)
    ks = tuple(ev.ks)
    rp = repredict_score(model, req.pairs) if len(req) else float("nan")
    sp = None
    if retrain_seconds and runtime == runtime and runtime > 0:
        sp = speedup(retrain_seconds, runtime)
    out = []
    scopes = (("forgetting_users", np.asarray(req.forgetting_users, dtype=np.int64)),
              ("all_users", np.arange(ds_r.num_users)))
    for scope, users in scopes:
        rbo_at = consistency_report(model, gold, users, ds_r, ks, ev.rbo_p, ev.rbo_variant)
        recall, ndcg = accuracy_report(model, ds_r, users, ks)
        out.append(EvalReport(name, scope, rp, rbo_at, recall, ndcg, runtime, sp))
    return out


def average_reports(runs: list[list[EvalReport]]) -> list[EvalReport]:
    if len(runs) == 1:
        return runs[0]
    out = []
    for group in zip(*runs):
        first = group[0]
        mean = lambda xs: float(np.mean(xs))
        sps = [r.speedup_vs_retrain for r in group]
        out.append(EvalReport(
            first.method_name, first.user_scope,
            mean([r.repredict_score for r in group]),
            {k: mean([r.rbo_at[k] for r in group]) for k in first.rbo_at},
            {k: mean([r.recall_at[k] for r in group]) for k in first.recall_at},
            {k: mean([r.ndcg_at[k] for r in group]) for k in first.ndcg_at},
            mean([r.runtime_seconds for r in group]),
            None if any(s is None for s in sps) else mean(sps)))
    return out


# artifacts ---------------------------------------------------------------


def write_manifest(out_dir, cfg: RunConfig, command: str, artifacts, extra=None) -> None:
    manifest = {"command": command, "config": cfg.to_dict(), "config_sha256": cfg.digest(),
                "seeds": seeds_of(cfg), "artifacts": sorted(str(a) for a in artifacts)}
    if extra:
        manifest.update(extra)
    Path(out_dir, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


def write_reports(out_dir, reports, ks, stem="eval", title="") -> list[str]:
    Path(out_dir, f"{stem}.csv").write_text(reports_to_csv(reports, ks), encoding="utf-8")
    Path(out_dir, f"{stem}.md").write_text(reports_to_markdown(reports, ks, title), encoding="utf-8")
    return [f"{stem}.csv", f"{stem}.md"]


@dataclass
class BenchResult:
    reports: list
    models: dict
    runtimes: dict
    train_logs: dict
    unlearn_logs: dict
    request: ForgetRequest
    ds_a: InteractionDataset
    ds_r: InteractionDataset


def bench_once(cfg: RunConfig, workers: int | None = None) -> BenchResult:
    """Original, Retrain, Retrain*, Warm-Start and every configured AltEraser variant."""
    ds_a, req = prepare(cfg)
    ds_r = dataio.apply_forget(ds_a, req)
    init = initial_model(cfg, ds_a)
    models, runtimes, tlogs, ulogs = {}, {}, {}, {}

    log.info("training Original on %d pairs", ds_a.num_train)
    models["Original"], tlogs["Original"], runtimes["Original"] = run_train(cfg, ds_a, init)
    original = models["Original"]
    log.info("retraining on %d pairs", ds_r.num_train)
    models["Retrain"], tlogs["Retrain"], runtimes["Retrain"] = run_train(cfg, ds_r, init)
    star = cfg.bench.retrain_star_seed
    models["Retrain*"], tlogs["Retrain*"], runtimes["Retrain*"] = run_train(
        cfg, ds_r, initial_model(cfg, ds_a, star), seed=star)
    models["Warm-Start"], tlogs["Warm-Start"], runtimes["Warm-Start"] = run_train(cfg, ds_r, original)
    for solver in cfg.bench.solvers:
        solver = SOLVER_ALIASES[solver]
        label = METHOD_LABELS[solver]
        log.info("unlearning with %s", solver)
        models[label], ulogs[label], runtimes[label] = run_unlearn(cfg, ds_a, req, original, solver, workers)

    gold = models["Retrain"]
    reports = []
    for name, model in models.items():
        retrain_secs = None if name == "Original" else runtimes["Retrain"]
        reports += evaluate(name, model, gold, ds_r, req, cfg.eval, runtimes[name], retrain_secs)
    return BenchResult(reports, models, runtimes, tlogs, ulogs, req, ds_a, ds_r)


def _slug(name: str) -> str:
    name = name.replace("*", "_star")
    return "_".join("".join(c.lower() if c.isalnum() else " " for c in name).split())


def run_bench(cfg: RunConfig, out_dir, workers: int | None = None, repeats: int | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    repeats = cfg.bench.repeats if repeats is None else repeats
    runs, artifacts = [], []
    for r in range(repeats):
        res = bench_once(with_seed_offset(cfg, r), workers)
        runs.append(res.reports)
        sub = out if repeats == 1 else out / f"repeat_{r}"
        sub.mkdir(exist_ok=True)
        prefix = "" if repeats == 1 else f"repeat_{r}/"
        dataio.write_forget_request(res.request, res.ds_a, sub / "forget.tsv")
        artifacts.append(prefix + "forget.tsv")
        for name, model in res.models.items():
            save_checkpoint(model, sub / f"{_slug(name)}.ckpt")
            artifacts.append(prefix + f"{_slug(name)}.ckpt")
        for name, tlog in res.train_logs.items():
            tlog.write_csv(sub / f"{_slug(name)}_trainlog.csv")
            artifacts.append(prefix + f"{_slug(name)}_trainlog.csv")
        for name, ulog in res.unlearn_logs.items():
            ulog.write_csv(sub / f"{_slug(name)}_unlearnlog.csv")
            artifacts.append(prefix + f"{_slug(name)}_unlearnlog.csv")
    reports = average_reports(runs)
    artifacts += write_reports(out, reports, tuple(cfg.eval.ks), title="Unlearning benchmark")
    write_manifest(out, cfg, "bench", artifacts, {"repeats": repeats, "workers": workers})
    return reports
