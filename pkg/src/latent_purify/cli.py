"""Command-line orchestration: data, training, attacks, BO, studies and reports.

Every subcommand reads one JSON experiment config and writes its artifacts
below ``output_dir``::

    data/{train,val,test}.lpds
    models/{mlvgm,classifier}.mlvc, models/{mlvgm,classifier}_log.csv
    attacks/<attack>_<defense>_eot<K>.{advr,csv}
    bo/trace.csv, bo/learned_schedule.json
    studies/<kind>.{csv,svg}
    report/summary.csv, report/sr_<attack>.svg

Exit codes: 0 success, 2 missing inputs, 3 invalid configuration,
4 corrupt artifact (checksum or framing).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, analysis, archive, attacks, classifier, dataset, hpo, mlvgm, svg
from .purifier import AlphaSchedule, ConfigError, PreprocessSpec, PurifierPipeline, make_schedule
from .rng import stream, stream_key

log = logging.getLogger("latent_purify")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_CORRUPT = 0, 2, 3, 4
VERSION = f"v{__version__}"


class MissingInputError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _build(cls, data: dict | None, what: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    for f in fields(cls):
        if f.name in data and isinstance(data[f.name], list):
            data[f.name] = tuple(data[f.name])
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    classes: int = 4
    split_sizes: tuple[int, int, int] = (4000, 500, 500)
    mlvgm_spec: mlvgm.MlvgmSpec = mlvgm.MlvgmSpec()
    mlvgm_train: mlvgm.MlvgmTrainConfig = mlvgm.MlvgmTrainConfig()
    classifier_spec: classifier.ClassifierSpec = classifier.ClassifierSpec()
    classifier_train: classifier.ClassifierTrainConfig = classifier.ClassifierTrainConfig(epochs=20)
    attacks: dict = field(
        default_factory=lambda: {
            "fgsm": attacks.FGSMConfig(),
            "deepfool": attacks.DEEPFOOL_PRESETS["cars"],
            "cw": replace(attacks.CW_PRESETS["cars"], steps=256, restarts=2),
        }
    )
    schedule: str = "cosine"  # a schedule kind, or a path to a schedule JSON file
    alpha_max: float = 0.7
    preprocess: PreprocessSpec = PreprocessSpec()
    eval_samples: int = 100
    bo_steps: int = 95
    bo_samples: int = 256
    fgsm_epsilon: float = 0.03
    combinations: int = 512
    codeswap_samples: int = 500
    ablation_noise_l2: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for k in ("seed", "classes", "eval_samples", "bo_steps", "bo_samples", "combinations", "codeswap_samples"):
            if k in d:
                kw[k] = int(d[k])
        for k in ("alpha_max", "fgsm_epsilon", "ablation_noise_l2"):
            if k in d:
                kw[k] = float(d[k])
        for k in ("output_dir", "schedule"):
            if k in d:
                kw[k] = str(d[k])
        if "split_sizes" in d:
            kw["split_sizes"] = tuple(int(v) for v in d["split_sizes"])
        kw["mlvgm_spec"] = _build(mlvgm.MlvgmSpec, d.get("mlvgm_spec"), "mlvgm_spec")
        kw["mlvgm_train"] = _build(mlvgm.MlvgmTrainConfig, d.get("mlvgm_train"), "mlvgm_train")
        kw["classifier_spec"] = _build(classifier.ClassifierSpec, d.get("classifier_spec"), "classifier_spec")
        kw["classifier_train"] = _build(
            classifier.ClassifierTrainConfig, {"epochs": 20, **d.get("classifier_train", {})}, "classifier_train"
        )
        kw["preprocess"] = _build(PreprocessSpec, d.get("preprocess"), "preprocess")
        if "attacks" in d:
            defaults = cls().attacks
            parsed = {}
            for name, body in d["attacks"].items():
                if name not in defaults:
                    raise ConfigError(f"unknown attack {name!r}")
                parsed[name] = _build(type(defaults[name]), body, f"{name} attack")
            kw["attacks"] = {**defaults, **parsed}
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if len(self.split_sizes) != 3 or min(self.split_sizes) < self.classes:
            raise ConfigError(f"split_sizes must be three counts of at least {self.classes}")
        if sum(self.split_sizes) % self.classes:
            raise ConfigError("split sizes must add up to a multiple of the class count")
        if self.classifier_spec.classes != self.classes:
            raise ConfigError(f"classifier has {self.classifier_spec.classes} classes but the dataset has {self.classes}")
        if self.classifier_spec.input_dim != self.mlvgm_spec.image_dim:
            raise ConfigError("classifier input_dim must equal the MLVGM image_dim")
        if not 0 < self.alpha_max <= 1:
            raise ConfigError(f"alpha_max must be in (0, 1], got {self.alpha_max}")
        if self.eval_samples < 1 or self.bo_samples < 1 or self.codeswap_samples < 1:
            raise ConfigError("sample counts must be positive")
        if self.eval_samples > self.split_sizes[2] or self.bo_samples > self.split_sizes[1]:
            raise ConfigError("evaluation slices cannot exceed their split sizes")
        if self.schedule in _SCHEDULE_KINDS:
            make_schedule(self.schedule, self.mlvgm_spec.levels, self.alpha_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attacks"] = {k: attacks.config_to_dict(v) for k, v in self.attacks.items()}
        for v in d["attacks"].values():
            v.pop("name", None)
        return json.loads(json.dumps(d))

    @property
    def config_hash(self) -> str:
        """Hash of everything that influences results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.blake2b(archive.canonical_json(d), digest_size=8).hexdigest()

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def meta(self, **extra) -> dict:
        return {"config_hash": self.config_hash, "version": VERSION, **extra}


_SCHEDULE_KINDS = ("linear", "cosine", "uniform", "one-minus-linear", "one-minus-cosine")


def load_config(path: str | None, output_dir: str | None = None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise MissingInputError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = ExperimentConfig.from_dict(raw)
    if output_dir is not None:
        cfg = replace(cfg, output_dir=output_dir)
    return cfg


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        env = os.environ.get("LATENT_PURIFY_THREADS", "")
        try:
            n = int(env) if env else 1
        except ValueError as exc:
            raise ConfigError(f"LATENT_PURIFY_THREADS must be an integer, got {env!r}") from exc
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


# ---------------------------------------------------------------------------
# artifact helpers


def _need(path: Path) -> bytes:
    if not path.exists():
        raise MissingInputError(f"missing input {path}; run the producing subcommand first")
    return path.read_bytes()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_split(cfg: ExperimentConfig, name: str) -> dataset.Dataset:
    return dataset.loads(_need(cfg.out / "data" / f"{name}.lpds"))


def _load_models(cfg: ExperimentConfig) -> tuple[mlvgm.Mlvgm, classifier.Classifier]:
    vae = mlvgm.Mlvgm.loads(_need(cfg.out / "models" / "mlvgm.mlvc"))
    clf = classifier.Classifier.loads(_need(cfg.out / "models" / "classifier.mlvc"))
    return vae, clf


def _model_checksums(cfg: ExperimentConfig) -> dict:
    return {
        name: f"{archive.stored_crc(_need(cfg.out / 'models' / f'{name}.mlvc')):016x}" for name in ("mlvgm", "classifier")
    }


def resolve_schedule(cfg: ExperimentConfig, levels: int) -> AlphaSchedule:
    if cfg.schedule in _SCHEDULE_KINDS:
        return make_schedule(cfg.schedule, levels, cfg.alpha_max)
    p = Path(cfg.schedule)
    if not p.is_absolute() and not p.exists():
        p = cfg.out / p
    if not p.exists():
        raise MissingInputError(f"schedule file not found: {cfg.schedule}")
    try:
        schedule = AlphaSchedule.from_json(p.read_text())
    except (json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"unreadable schedule file {p}: {exc}") from exc
    if len(schedule) != levels:
        raise ConfigError(f"schedule has {len(schedule)} values but the MLVGM has {levels} levels")
    return schedule


def _eval_slice(cfg: ExperimentConfig) -> tuple[dataset.Dataset, np.ndarray]:
    test = _load_split(cfg, "test")
    sl = dataset.stratified_slice(test, cfg.eval_samples, cfg.seed, "eval-slice")
    return sl, np.arange(len(sl))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    splits = dataset.generate_splits(cfg.seed, cfg.classes, cfg.split_sizes)
    for name, ds in zip(("train", "val", "test"), splits):
        blob = dataset.save(ds, cfg.out / "data" / f"{name}.lpds", cfg.meta())
        log.info("wrote %s split: %d samples, crc64 %016x", name, len(ds), archive.stored_crc(blob))
    return EXIT_OK


def cmd_train_vae(cfg: ExperimentConfig, args) -> int:
    train, val = _load_split(cfg, "train"), _load_split(cfg, "val")
    tc = replace(cfg.mlvgm_train, seed=stream_key(cfg.seed, "mlvgm-train"))
    model, tlog = mlvgm.train(train.images, tc, cfg.mlvgm_spec, val=val.images)
    model.save(cfg.out / "models" / "mlvgm.mlvc", cfg.meta())
    _write_text(cfg.out / "models" / "mlvgm_log.csv", tlog.to_csv())
    log.info("MLVGM trained: final val mse %.5f", tlog.rows[-1]["val_mse"])
    return EXIT_OK


def cmd_train_clf(cfg: ExperimentConfig, args) -> int:
    train, val = _load_split(cfg, "train"), _load_split(cfg, "val")
    tc = replace(cfg.classifier_train, seed=stream_key(cfg.seed, "classifier-train"))
    model, tlog = classifier.train(train.images, train.labels, tc, cfg.classifier_spec, val=(val.images, val.labels))
    model.save(cfg.out / "models" / "classifier.mlvc", cfg.meta())
    _write_text(cfg.out / "models" / "classifier_log.csv", tlog.to_csv())
    log.info("classifier trained: final val accuracy %.4f", tlog.rows[-1]["val_acc"])
    return EXIT_OK


def attack_target(cfg: ExperimentConfig, defense: str, vae, clf, preprocess: PreprocessSpec | None = None):
    if defense == "none":
        return attacks.classifier_target(clf)
    schedule = resolve_schedule(cfg, vae.spec.levels)
    return PurifierPipeline(vae, clf, schedule, preprocess or cfg.preprocess).as_target()


def run_attack_artifact(cfg, attack: str, defense: str, eot: int | None, threads: int, preprocess=None, tag=None) -> Path:
    vae, clf = _load_models(cfg)
    sl, ids = _eval_slice(cfg)
    acfg = cfg.attacks[attack]
    if eot is not None:
        acfg = replace(acfg, eot=eot)
    target = attack_target(cfg, defense, vae, clf, preprocess)
    records = attacks.minimal_perturbation_sweep(target, sl.images, sl.labels, acfg, cfg.seed, threads, ids)
    stem = tag or f"{attack}_{defense}_eot{acfg.eot}"
    manifest = {
        "meta": cfg.meta(),
        "seed": cfg.seed,
        "models": _model_checksums(cfg),
        "attack": attacks.config_to_dict(acfg),
        "defense": defense,
        "label": stem,
        "preprocess": (preprocess or cfg.preprocess).to_dict() if defense != "none" else None,
    }
    base = cfg.out / "attacks" / stem
    attacks.save_records(base.with_suffix(".advr"), records, manifest)
    _write_text(base.with_suffix(".csv"), attacks.records_to_csv(records))
    sr = np.mean([r.success for r in records])
    log.info("%s: %d records, overall success %.3f", stem, len(records), sr)
    return base.with_suffix(".advr")


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    if args.attack not in cfg.attacks:
        raise ConfigError(f"attack {args.attack!r} is not configured")
    if args.eot is not None and args.eot < 1:
        raise ConfigError("--eot must be at least 1")
    run_attack_artifact(cfg, args.attack, args.defense, args.eot, resolve_threads(args.threads))
    return EXIT_OK


def cmd_bo(cfg: ExperimentConfig, args) -> int:
    vae, clf = _load_models(cfg)
    val = _load_split(cfg, "val")
    sl = dataset.stratified_slice(val, cfg.bo_samples, cfg.seed, "bo-slice")
    objective = hpo.BOObjective.build(vae, clf, sl.images, sl.labels, cfg.fgsm_epsilon, cfg.seed, cfg.preprocess)
    state = hpo.run_bo(
        objective,
        cfg.bo_steps,
        cfg.alpha_max,
        vae.spec.levels,
        stream(cfg.seed, "bo"),
        callback=lambda s: log.debug("bo step %d incumbent %.4f", s.step, s.incumbents[-1]),
    )
    _write_text(cfg.out / "bo" / "trace.csv", state.trace_csv())
    schedule = state.learned_schedule()
    doc = json.loads(schedule.to_json())
    doc["meta"] = cfg.meta(objective=state.incumbent[1])
    _write_text(cfg.out / "bo" / "learned_schedule.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    log.info("BO incumbent %.4f at alpha %s", state.incumbent[1], np.round(schedule.values, 4).tolist())
    return EXIT_OK


def _sr_series(records_by_label: dict[str, list], grid: np.ndarray) -> list[tuple[str, np.ndarray, np.ndarray]]:
    return [(label, grid, analysis.success_rate_curve(recs, grid, label).sr) for label, recs in records_by_label.items()]


def _curves_csv(series) -> str:
    labels = [s[0] for s in series]
    lines = [",".join(["eps"] + labels)]
    grid = series[0][1]
    for i, e in enumerate(grid):
        lines.append(",".join([repr(float(e))] + [repr(float(s[2][i])) for s in series]))
    return "\n".join(lines) + "\n"


def cmd_study(cfg: ExperimentConfig, args) -> int:
    studies = cfg.out / "studies"
    vae, clf = _load_models(cfg)
    if args.kind == "combinations":
        val = _load_split(cfg, "val")
        sl = dataset.stratified_slice(val, cfg.bo_samples, cfg.seed, "bo-slice")
        objective = hpo.BOObjective.build(vae, clf, sl.images, sl.labels, cfg.fgsm_epsilon, cfg.seed, cfg.preprocess)
        study = analysis.random_combination_study(
            objective, cfg.combinations, cfg.alpha_max, vae.spec.levels, stream(cfg.seed, "combinations"), cfg.seed
        )
        _write_text(studies / "combinations.csv", study.to_csv())
        _write_text(
            studies / "combinations.svg",
            svg.scatter_chart(study.rho, study.accuracy, title=f"Pearson {study.pearson:.3f}"),
        )
        log.info("combination study: Pearson(rho, accuracy) = %.4f", study.pearson)
    elif args.kind == "codeswap":
        val = _load_split(cfg, "val")
        sl = dataset.stratified_slice(val, cfg.codeswap_samples, cfg.seed, "codeswap-slice")
        result = analysis.code_swap_study(vae, clf, sl.images, stream(cfg.seed, "codeswap"))
        _write_text(studies / "codeswap.csv", result.to_csv())
        log.info("code-swap retention per level: %s", np.round(result.retention, 4).tolist())
    else:
        threads = resolve_threads(args.threads)
        variants = {
            "none": PreprocessSpec.none(),
            "noise": PreprocessSpec.noise(cfg.ablation_noise_l2),
            "blur": PreprocessSpec.blur(resolution=int(round(np.sqrt(vae.spec.image_dim)))),
        }
        grid = analysis.log_eps_grid()
        curves = {}
        for name, spec in variants.items():
            path = run_attack_artifact(cfg, "deepfool", "purify", None, threads, spec, tag=f"ablation_{name}")
            curves[name] = attacks.load_records(path)[1]
        series = _sr_series(curves, grid)
        _write_text(studies / "preprocess_ablation.csv", _curves_csv(series))
        _write_text(studies / "preprocess_ablation.svg", svg.line_chart(series, title="preprocessing ablation"))
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    adv_dir = cfg.out / "attacks"
    paths = sorted(adv_dir.glob("*.advr")) if adv_dir.is_dir() else []
    if not paths:
        raise MissingInputError(f"no artifacts found in {adv_dir}")
    loaded = []
    for p in paths:
        manifest, records = attacks.load_records(p)
        loaded.append((p, manifest, records))
    hashes = {m.get("meta", {}).get("config_hash") for _, m, _ in loaded}
    if len(hashes) > 1 and not args.force:
        raise ConfigError(f"artifacts come from {len(hashes)} different configs; pass --force to mix them")
    grid = analysis.log_eps_grid()
    by_attack: dict[str, dict[str, list]] = {}
    rows = ["attack,defense,label,eps,sr"]
    for p, m, records in loaded:
        attack = m["attack"]["name"]
        label = m.get("label", p.stem)
        by_attack.setdefault(attack, {})[label] = records
        curve = analysis.success_rate_curve(records, grid, label)
        rows += [f"{attack},{m['defense']},{label},{e!r},{s!r}" for e, s in zip(map(float, curve.eps), map(float, curve.sr))]
    _write_text(cfg.out / "report" / "summary.csv", "\n".join(rows) + "\n")
    for attack, curves in by_attack.items():
        series = _sr_series(curves, grid)
        _write_text(cfg.out / "report" / f"sr_{attack}.svg", svg.line_chart(series, title=f"{attack} success rate"))
    log.info("report: %d artifacts, %d attacks", len(loaded), len(by_attack))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vae": cmd_train_vae,
    "train-clf": cmd_train_clf,
    "attack": cmd_attack,
    "bo": cmd_bo,
    "study": cmd_study,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-purify", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=VERSION)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults are used when omitted)")
    common.add_argument("--output-dir", help="override the config's output_dir")
    common.add_argument("--threads", type=int, help="worker cap (fallback: LATENT_PURIFY_THREADS, then 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-vae", "train-clf", "bo"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("attack", parents=[common])
    p.add_argument("--attack", choices=("fgsm", "deepfool", "cw"), required=True)
    p.add_argument("--defense", choices=("none", "purify"), default="none")
    p.add_argument("--eot", type=int, help="EoT passes K (overrides the config)")
    p = sub.add_parser("study", parents=[common])
    p.add_argument("--kind", choices=("combinations", "codeswap", "preprocess-ablation"), required=True)
    p = sub.add_parser("report", parents=[common])
    p.add_argument("--force", action="store_true", help="mix artifacts from different configs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.output_dir)
        return COMMANDS[args.command](cfg, args)
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except archive.ArchiveError as exc:
        print(f"error: corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
