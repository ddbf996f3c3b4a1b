"""Command-line pipeline: gen-data, pretrain, meta-train, personalize, eval, ablate.

Every stage reads and writes under ``<out>/seed<N>/``::

    data/bench.{json,bin}          gen-data
    pretrain/model.{json,bin}      pretrain (+ log.csv)
    meta/model.{json,bin}          meta-train (+ log.csv)
    personalize/<strategy>_k<K>/   personalize (one checkpoint per person + report)
    eval/<name>.{csv,json}         eval

Config files are JSON with the sections below; unknown keys are rejected.
Precedence is flags > file > defaults. ``seed`` is the single root seed: all
stages derive their randomness from it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ConfigurationError
from .meta import META_LOG_HEADER, MetaConfig, meta_train
from .model import GazeNet, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .personalize import STRATEGIES, EvalReport, PersonalizeConfig, evaluate, person_error, personalize
from .synthgaze import Benchmark, load_dataset, make_benchmark, save_dataset
from .training import PRETRAIN_LOG_HEADER, TrainConfig, pretrain, write_csv

log = logging.getLogger("gazeprompt")

ABLATION_HEADER = ("strategy", "n_samples", "seed", "error_deg")
SUMMARY_HEADER = ("table", "strategy", "n_samples", "mean_error_deg", "std_error_deg", "n_seeds", "best")
ABLATION_STRATEGIES = ("Baseline", "Update-All", "No-Meta", "TPGaze")
EVAL_STRATEGIES = ("none",) + STRATEGIES

# Desk meta-training: the inner step size stays small, but the outer loop uses
# Adam and more iterations than the reference setting so the prompt actually moves.
DESK_META = MetaConfig(inner_lr=1e-2, outer_lr=3e-2, iterations=2000, batch_size=20,
                       mode="first_order", outer_optimizer="adam")


@dataclass(frozen=True)
class DataConfig:
    n_source_persons: int = 20
    n_samples_each: int = 200
    n_target_persons: int = 10
    n_adapt: int = 15
    n_test: int = 100


@dataclass(frozen=True)
class AblateConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    sample_counts: tuple[int, ...] = (1, 5, 10, 15)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "sample_counts", tuple(int(k) for k in self.sample_counts))


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    meta: MetaConfig = DESK_META
    personalize: PersonalizeConfig = field(default_factory=PersonalizeConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    seed: int = 0
    out: str = "runs"
    threads: int = 1

    def seeded(self, seed: int) -> RunConfig:
        return replace(self, seed=seed)

    @property
    def train_cfg(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    @property
    def meta_cfg(self) -> MetaConfig:
        return replace(self.meta, seed=self.seed)

    @property
    def personalize_cfg(self) -> PersonalizeConfig:
        return replace(self.personalize, seed=self.seed)

    def seed_dir(self) -> Path:
        return Path(self.out) / f"seed{self.seed}"

    def to_dict(self) -> dict:
        d = {
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "train": _without_seed(asdict(self.train)),
            "meta": _without_seed(asdict(self.meta)),
            "personalize": _without_seed(asdict(self.personalize)),
            "ablate": {"seeds": list(self.ablate.seeds), "sample_counts": list(self.ablate.sample_counts)},
            "seed": self.seed,
            "out": self.out,
            "threads": self.threads,
        }
        return d


def _without_seed(d: dict) -> dict:
    d.pop("seed", None)
    return d


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "meta": MetaConfig,
             "personalize": PersonalizeConfig, "ablate": AblateConfig}
_SCALARS = {"seed": int, "out": str, "threads": int}


def _section_keys(cls) -> set[str]:
    return {f.name for f in fields(cls)} - {"seed"}


def config_from_dict(raw: dict, base: RunConfig | None = None) -> RunConfig:
    """Merge ``raw`` over ``base`` (defaults if None). Unknown keys raise ConfigurationError."""
    cfg = base or RunConfig()
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(raw) - set(_SECTIONS) - set(_SCALARS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    updates = {}
    for name, cls in _SECTIONS.items():
        if name not in raw:
            continue
        section = raw[name]
        if not isinstance(section, dict):
            raise ConfigurationError(f"config section {name!r} must be an object")
        bad = set(section) - _section_keys(cls)
        if bad:
            raise ConfigurationError(f"unknown keys in section {name!r}: {sorted(bad)}")
        current = getattr(cfg, name)
        if name == "model":
            merged = {**current.to_dict(), **section}
            updates[name] = ModelConfig.from_dict(merged)
        else:
            updates[name] = replace(current, **section)
    for key, typ in _SCALARS.items():
        if key in raw:
            if not isinstance(raw[key], typ) or isinstance(raw[key], bool):
                raise ConfigurationError(f"config key {key!r} must be {typ.__name__}")
            updates[key] = raw[key]
    return replace(cfg, **updates)


def validate_config(cfg: RunConfig) -> None:
    cfg.model.validate()
    try:
        cfg.train_cfg.validate()
        cfg.meta_cfg.validate()
        cfg.personalize_cfg.validate()
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    if cfg.threads < 1:
        raise ConfigurationError(f"threads must be >= 1, got {cfg.threads}")
    if cfg.personalize.num_images > cfg.data.n_adapt:
        raise ConfigurationError(
            f"num_images={cfg.personalize.num_images} exceeds n_adapt={cfg.data.n_adapt}")
    if not cfg.ablate.seeds or not cfg.ablate.sample_counts or min(cfg.ablate.sample_counts) < 1:
        raise ConfigurationError("ablate needs at least one seed and positive sample counts")


# --------------------------------------------------------------------------- paths


def data_path(cfg: RunConfig) -> Path:
    return cfg.seed_dir() / "data" / "bench"


def pretrain_path(cfg: RunConfig) -> Path:
    return cfg.seed_dir() / "pretrain" / "model"


def meta_path(cfg: RunConfig) -> Path:
    return cfg.seed_dir() / "meta" / "model"


def _require(path: Path) -> None:
    for p in (path.with_suffix(".json"), path.with_suffix(".bin")):
        if not p.exists():
            raise FileNotFoundError(f"required file missing: {p} (run the upstream stage first)")


def _load_bench(cfg: RunConfig) -> Benchmark:
    _require(data_path(cfg))
    return load_dataset(data_path(cfg))


def _load_model(cfg: RunConfig, path: Path) -> GazeNet:
    _require(path)
    return load_checkpoint(path, expect_config=cfg.model)


def write_resolved(cfg: RunConfig, stage: str) -> Path:
    path = cfg.seed_dir() / f"{stage}.resolved_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------- stages


def run_gen_data(cfg: RunConfig) -> Benchmark:
    d = cfg.data
    bench = make_benchmark(d.n_source_persons, d.n_samples_each, d.n_target_persons, seed=cfg.seed,
                           n_adapt=d.n_adapt, n_test=d.n_test)
    save_dataset(bench, data_path(cfg))
    log.info("gen-data: %d source samples, %d target persons -> %s", len(bench.source), len(bench.targets),
             data_path(cfg))
    return bench


def run_pretrain(cfg: RunConfig) -> GazeNet:
    bench = _load_bench(cfg)
    model = build_model(cfg.model, cfg.seed)
    rows = pretrain(model, bench.source, cfg.train_cfg)
    save_checkpoint(model, pretrain_path(cfg), extra={"stage": "pretrain"})
    write_csv(pretrain_path(cfg).parent / "log.csv", rows, PRETRAIN_LOG_HEADER)
    return model


def run_meta_train(cfg: RunConfig) -> GazeNet:
    bench = _load_bench(cfg)
    model = _load_model(cfg, pretrain_path(cfg))
    rows = meta_train(model, bench.source, cfg.meta_cfg)
    save_checkpoint(model, meta_path(cfg), extra={"stage": "meta"})
    write_csv(meta_path(cfg).parent / "log.csv", rows, META_LOG_HEADER)
    return model


def _map(fn, items: Sequence, threads: int) -> list:
    # per-person work is independent, so results do not depend on the thread count
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def personalized_report(model: GazeNet, bench: Benchmark, pcfg: PersonalizeConfig, threads: int = 1,
                        save_dir: Path | None = None) -> EvalReport:
    pcfg.validate()

    def one(j: int) -> float:
        person = bench.targets[j]
        adapted = personalize(model, person, pcfg, j)
        if save_dir is not None:
            save_checkpoint(adapted, save_dir / person.person.person_id, extra={"stage": "personalize"})
        return person_error(adapted, person)

    errors = _map(one, range(len(bench.targets)), threads)
    return EvalReport([t.person.person_id for t in bench.targets], errors, float(np.mean(errors)),
                      asdict(pcfg), pcfg.seed)


def run_personalize(cfg: RunConfig) -> EvalReport:
    bench = _load_bench(cfg)
    model = _load_model(cfg, meta_path(cfg))
    pcfg = cfg.personalize_cfg
    out = cfg.seed_dir() / "personalize" / f"{pcfg.strategy}_k{pcfg.num_images}"
    report = personalized_report(model, bench, pcfg, cfg.threads, save_dir=out)
    report.save(out / "report")
    return report


def run_eval(cfg: RunConfig, strategy: str = "prompt_only", checkpoint: str = "meta") -> EvalReport:
    """Evaluate on target persons; ``strategy='none'`` reports the unadapted model."""
    if strategy not in EVAL_STRATEGIES:
        raise ConfigurationError(f"strategy must be one of {EVAL_STRATEGIES}, got {strategy!r}")
    bench = _load_bench(cfg)
    model = _load_model(cfg, meta_path(cfg) if checkpoint == "meta" else pretrain_path(cfg))
    if strategy == "none":
        report = evaluate(model, bench.targets, {"strategy": "none", "num_images": 0, "checkpoint": checkpoint},
                          cfg.seed)
    else:
        report = personalized_report(model, bench, replace(cfg.personalize_cfg, strategy=strategy), cfg.threads)
        report.config["checkpoint"] = checkpoint
    name = f"{checkpoint}_{strategy}" + ("" if strategy == "none" else f"_k{cfg.personalize.num_images}")
    report.save(cfg.seed_dir() / "eval" / name)
    return report


def build_missing(cfg: RunConfig) -> None:
    """Run whichever upstream stages have no artifacts yet for ``cfg.seed``."""
    if not data_path(cfg).with_suffix(".json").exists():
        run_gen_data(cfg)
    if not pretrain_path(cfg).with_suffix(".json").exists():
        run_pretrain(cfg)
    if not meta_path(cfg).with_suffix(".json").exists():
        run_meta_train(cfg)


def ablation_rows(cfg: RunConfig) -> list[dict]:
    """Strategy comparison at the configured sample count plus the TPGaze sample sweep, for one seed."""
    bench = _load_bench(cfg)
    pre = _load_model(cfg, pretrain_path(cfg))
    meta = _load_model(cfg, meta_path(cfg))
    pcfg = cfg.personalize_cfg
    k = pcfg.num_images
    rows = [{"strategy": "Baseline", "n_samples": 0, "seed": cfg.seed,
             "error_deg": evaluate(pre, bench.targets).mean_error}]
    for name, strategy in (("Update-All", "update_all"), ("No-Meta", "no_meta_prompt")):
        err = personalized_report(meta, bench, replace(pcfg, strategy=strategy), cfg.threads).mean_error
        rows.append({"strategy": name, "n_samples": k, "seed": cfg.seed, "error_deg": err})
    for n in sorted(set(cfg.ablate.sample_counts) | {k}):
        err = personalized_report(meta, bench, replace(pcfg, strategy="prompt_only", num_images=n),
                                  cfg.threads).mean_error
        rows.append({"strategy": "TPGaze", "n_samples": n, "seed": cfg.seed, "error_deg": err})
    return rows


def summarize(rows: Sequence[dict], num_images: int) -> list[dict]:
    """Seed-averaged table; ``best`` marks the minimum of each table's column."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["n_samples"]), []).append(float(r["error_deg"]))
    out = []
    for (strategy, n), errs in groups.items():
        in_comparison = (strategy != "TPGaze") or n == num_images
        sweep = strategy == "TPGaze"
        for table, member in (("strategies", in_comparison), ("samples", sweep)):
            if member:
                out.append({"table": table, "strategy": strategy, "n_samples": n,
                            "mean_error_deg": float(np.mean(errs)), "std_error_deg": float(np.std(errs)),
                            "n_seeds": len(errs), "best": ""})
    order = {s: i for i, s in enumerate(ABLATION_STRATEGIES)}
    out.sort(key=lambda r: (r["table"] != "strategies", order[r["strategy"]], r["n_samples"]))
    for table in ("strategies", "samples"):
        members = [r for r in out if r["table"] == table]
        if members:
            min(members, key=lambda r: r["mean_error_deg"])["best"] = "*"
    return out


def run_ablate(cfg: RunConfig, build: bool = False) -> tuple[list[dict], list[dict]]:
    rows = []
    for s in cfg.ablate.seeds:
        scfg = cfg.seeded(s)
        if build:
            build_missing(scfg)
        rows.extend(ablation_rows(scfg))
    summary = summarize(rows, cfg.personalize.num_images)
    out = Path(cfg.out)
    write_csv(out / "ablation.csv", rows, ABLATION_HEADER)
    write_csv(out / "ablation_summary.csv", summary, SUMMARY_HEADER)
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, summary


# --------------------------------------------------------------------------- argparse


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for per-person work (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gazeprompt", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic benchmark")
    sub.add_parser("pretrain", parents=[common], help="supervised pre-training of theta")
    sub.add_parser("meta-train", parents=[common], help="meta-learn the prompt initialization")
    for name in ("personalize", "eval"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--num-images", type=int, help="adaptation images per person")
        sp.add_argument("--steps", type=int, help="personalization steps")
        sp.add_argument("--lr", type=float, help="personalization learning rate")
        choices = STRATEGIES if name == "personalize" else EVAL_STRATEGIES
        sp.add_argument("--strategy", choices=choices)
    sub.choices["eval"].add_argument("--checkpoint", choices=("meta", "pretrain"), default="meta")
    ab = sub.add_parser("ablate", parents=[common], help="strategy ablation and sample-count sweep")
    ab.add_argument("--seeds", type=int, nargs="+", help="seeds to aggregate over")
    ab.add_argument("--build-missing", action="store_true", help="run missing upstream stages first")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        try:
            raw = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{args.config}: invalid JSON ({exc})") from exc
        cfg = config_from_dict(raw, cfg)
    flags = {k: getattr(args, k) for k in ("seed", "out", "threads") if getattr(args, k) is not None}
    cfg = replace(cfg, **flags)
    pflags = {k: getattr(args, k, None) for k in ("num_images", "steps", "lr")}
    pflags = {k: v for k, v in pflags.items() if v is not None}
    if getattr(args, "strategy", None) not in (None, "none"):
        pflags["strategy"] = args.strategy
    if pflags:
        cfg = replace(cfg, personalize=replace(cfg.personalize, **pflags))
    if getattr(args, "seeds", None):
        cfg = replace(cfg, ablate=replace(cfg.ablate, seeds=tuple(args.seeds)))
    validate_config(cfg)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        print(json.dumps({"command": args.command, "config": cfg.to_dict()}, sort_keys=True))
        write_resolved(cfg, args.command)
        if args.command == "gen-data":
            bench = run_gen_data(cfg)
            print(f"source samples: {len(bench.source)}  target persons: {len(bench.targets)}")
        elif args.command == "pretrain":
            run_pretrain(cfg)
            print(f"checkpoint: {pretrain_path(cfg)}.json")
        elif args.command == "meta-train":
            run_meta_train(cfg)
            print(f"checkpoint: {meta_path(cfg)}.json")
        elif args.command == "personalize":
            report = run_personalize(cfg)
            print(f"mean angular error: {report.mean_error:.4f} deg")
        elif args.command == "eval":
            report = run_eval(cfg, args.strategy or cfg.personalize.strategy, args.checkpoint)
            print(f"mean angular error: {report.mean_error:.4f} deg")
        elif args.command == "ablate":
            _, summary = run_ablate(cfg, build=args.build_missing)
            for r in summary:
                print(f"{r['table']:10s} {r['strategy']:10s} n={r['n_samples']:<3d} "
                      f"{r['mean_error_deg']:8.4f} +- {r['std_error_deg']:.4f} {r['best']}")
    except (ConfigurationError, ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
