"""Command-line front end.

Subcommands::

    mafbench gen-world [--config W.json] --out DIR
    mafbench run       --world W.json --setting weak --algorithm irm --test-modality 0 --out DIR
    mafbench sweep     --world W.json --setting weak --protocol oracle --algorithms erm,irm,concat --out DIR
    mafbench select    --runs DIR/runs.jsonl --out DIR2
    mafbench ablate    --world W.json --seeds 5 --out DIR
    mafbench analyze   --world W.json --algorithm irm --test-modality 0 --out DIR
    mafbench report    --out DIR [--verify]

Exit codes: 0 success, 1 usage or configuration error, 2 run failure (including
a manifest hash mismatch under ``report --verify``).

Config files
------------
A config file is one JSON object.  World keys are the fields of
:class:`~mafbench.synthworld.WorldConfig`; sweep keys are ``algorithms``
(list), ``trials``, ``seeds``, ``steps``, ``protocol``, ``setting``,
``global_seed`` and ``threads``.  Unknown keys and type mismatches are rejected
by name.

runs.jsonl
----------
One JSON object per line with keys in this order: ``run_id, setting,
algorithm, family, protocol, seed, trial, test_modality, hparams,
checkpoints, final_test_auc, selected, wall_ms, fold, eval_step, status,
notes``.  Each checkpoint is ``{step, tm_val_auc, loo_val_auc?,
oracle_val_auc}``; ``loo_val_auc`` appears only in LOO records.
``wall_ms`` is null so that reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from . import analysis as an
from . import protocols as pr
from .algorithms import hparams as hp
from .algorithms.training import DEFAULT_STEPS, SETTINGS, AlgorithmSpec, RunRecord, train_params, train_run
from .synthworld import SyntheticWorld, WorldConfig, world_from_json

log = logging.getLogger(__name__)

SETTING_TO_MODE = {v: k for k, v in SETTINGS.items()}
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class RunFailure(Exception):
    pass


@dataclass
class CliConfig:
    algorithms: list[str] = field(default_factory=lambda: list(hp.IMPLEMENTED))
    trials: int = 9
    seeds: int = 3
    steps: int = DEFAULT_STEPS
    protocol: str = "oracle"
    setting: str = "weak"
    global_seed: int = 0
    threads: int = 1


def _check_type(key: str, value, default) -> None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    else:
        ok = True
    if not ok:
        raise UsageError(f"config key {key!r}: expected {type(default).__name__}, got {type(value).__name__}")


def parse_config(data: dict) -> tuple[CliConfig, WorldConfig]:
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    cli_keys = {f.name for f in fields(CliConfig)}
    world_keys = {f.name for f in fields(WorldConfig)}
    for key in data:
        if key not in cli_keys and key not in world_keys:
            raise UsageError(f"unknown config key: {key!r}")
    defaults = CliConfig()
    cli_kwargs = {}
    for key in cli_keys & set(data):
        _check_type(key, data[key], getattr(defaults, key))
        cli_kwargs[key] = data[key]
    try:
        world = WorldConfig.from_dict({k: v for k, v in data.items() if k in world_keys})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = CliConfig(**cli_kwargs)
    _validate_cli(cfg)
    return cfg, world


def _validate_cli(cfg: CliConfig) -> None:
    if cfg.protocol not in pr.PROTOCOLS:
        raise UsageError(f"invalid protocol {cfg.protocol!r}; valid protocols: {', '.join(pr.PROTOCOLS)}")
    if cfg.setting not in SETTING_TO_MODE:
        raise UsageError(f"invalid setting {cfg.setting!r}; valid settings: {', '.join(SETTING_TO_MODE)}")
    for a in cfg.algorithms:
        if a not in hp.IMPLEMENTED:
            raise UsageError(f"unknown algorithm {a!r}; implemented: {', '.join(hp.IMPLEMENTED)}")
    for name in ("trials", "seeds", "steps", "threads"):
        if getattr(cfg, name) < 1:
            raise UsageError(f"{name} must be >= 1")
    if cfg.global_seed < 0:
        raise UsageError("global_seed must be >= 0")


def load_config(path) -> tuple[CliConfig, WorldConfig]:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None
    return parse_config(data)


# ---------------------------------------------------------------------------
# outputs


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise RunFailure(f"cannot write {path}: {exc}") from exc


def runs_jsonl(records: Sequence[RunRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def write_outputs(out_dir, files: dict[str, str], config: dict, global_seed: int,
                  run_ids: Sequence[str] = ()) -> dict:
    """Write ``files`` (name to text) under ``out_dir`` plus a manifest holding their SHA-256 hashes."""
    out = Path(out_dir)
    hashes = {}
    for name in sorted(files):
        _write(out / name, files[name])
        hashes[name] = sha256_file(out / name)
    manifest = {
        "tool": "mafbench",
        "version": __version__,
        "config": config,
        "global_seed": global_seed,
        "std_convention": "population",
        "kl_shrinkage": an.DEFAULT_SHRINKAGE,
        "runs": list(run_ids),
        "files": hashes,
    }
    _write(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_manifest(out_dir) -> list[str]:
    """Names of manifest entries whose file is missing or whose hash differs."""
    out = Path(out_dir)
    try:
        manifest = json.loads((out / MANIFEST).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RunFailure(f"cannot read {out / MANIFEST}: {exc}") from exc
    bad = []
    for name, digest in sorted(manifest.get("files", {}).items()):
        path = out / name
        if not path.is_file() or sha256_file(path) != digest:
            bad.append(name)
    return bad


def read_runs(path) -> list[RunRecord]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    return [RunRecord.from_dict(json.loads(line)) for line in lines if line.strip()]


def _load_world(path) -> SyntheticWorld:
    try:
        return world_from_json(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read world file {path}: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def report_files(records: Sequence[RunRecord]) -> dict[str, str]:
    selections = pr.select_all(records)
    report = pr.aggregate_report(selections)
    return {"runs.jsonl": runs_jsonl(records), "report.csv": report.to_csv()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_world(args) -> int:
    world_cfg = load_config(args.config)[1] if args.config else WorldConfig()
    write_outputs(args.out, {"world.json": world_cfg.to_json()}, {"world": asdict(world_cfg)}, world_cfg.seed)
    return 0


def _algorithms(text: str) -> list[str]:
    if text == "all":
        return list(hp.IMPLEMENTED)
    names = [a.strip().lower() for a in text.split(",") if a.strip()]
    if not names:
        raise UsageError("--algorithms is empty")
    return names


def _sweep_config(args) -> CliConfig:
    base = load_config(args.config)[0] if getattr(args, "config", None) else CliConfig()
    for name in ("trials", "seeds", "steps", "protocol", "setting", "global_seed", "threads"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(base, name, value)
    if getattr(args, "algorithms", None):
        base.algorithms = _algorithms(args.algorithms)
    _validate_cli(base)
    return base


def cmd_sweep(args) -> int:
    cfg = _sweep_config(args)
    world = _load_world(args.world)
    protocols = ("tm", "loo", "oracle") if args.all_protocols else (cfg.protocol,)
    sweep = pr.SweepConfig(tuple(cfg.algorithms), cfg.trials, cfg.seeds, protocols, SETTING_TO_MODE[cfg.setting],
                           cfg.steps, cfg.global_seed, cfg.threads)
    records = pr.run_benchmark(world, sweep)
    failed = [r.run_id for r in records if r.status != "ok"]
    files = report_files(records)
    summary = pr.audit_summary(records)
    files["audit.json"] = json.dumps({k: v for k, v in summary.items()}, indent=2, sort_keys=True) + "\n"
    config = {"world": asdict(world.config), "sweep": asdict(cfg), "protocols": list(protocols)}
    write_outputs(args.out, files, config, cfg.global_seed, [r.run_id for r in records])
    if failed:
        log.error("%d runs failed: %s", len(failed), ", ".join(failed[:5]))
        return 2
    return 0


def cmd_run(args) -> int:
    world = _load_world(args.world)
    k = world.config.num_modalities
    if not 0 <= args.test_modality < k:
        raise UsageError(f"--test-modality must lie in [0, {k - 1}]")
    if args.protocol not in pr.PROTOCOLS:
        raise UsageError(f"invalid protocol {args.protocol!r}; valid protocols: {', '.join(pr.PROTOCOLS)}")
    if args.setting not in SETTING_TO_MODE:
        raise UsageError(f"invalid setting {args.setting!r}; valid settings: {', '.join(SETTING_TO_MODE)}")
    if args.algorithm not in hp.IMPLEMENTED:
        raise UsageError(f"unknown algorithm {args.algorithm!r}; implemented: {', '.join(hp.IMPLEMENTED)}")
    spec = AlgorithmSpec.create(args.algorithm, hp.trial_hparams(args.algorithm, args.trial, args.global_seed))
    job = pr.Job(args.algorithm, args.trial, args.seed, args.test_modality,
                 tuple(m for m in range(k) if m != args.test_modality), (args.protocol,))
    train = list(job.train_modalities)
    rec = train_run(world, train, args.test_modality, spec, SETTING_TO_MODE[args.setting], args.seed, args.steps,
                    args.protocol, trial=args.trial, seed_key=job.seed_key(args.global_seed))
    config = {"world": asdict(world.config), "algorithm": args.algorithm, "setting": args.setting,
              "protocol": args.protocol, "trial": args.trial, "seed": args.seed,
              "test_modality": args.test_modality, "steps": args.steps}
    write_outputs(args.out, {"runs.jsonl": runs_jsonl([rec])}, config, args.global_seed, [rec.run_id])
    return 0 if rec.status == "ok" else 2


def cmd_select(args) -> int:
    records = read_runs(args.runs)
    files = report_files(records)
    sels = [asdict(s) for s in pr.select_all(records)]
    files["selections.json"] = json.dumps(sels, indent=2, sort_keys=True) + "\n"
    write_outputs(args.out, files, {"runs": str(args.runs)}, 0, [r.run_id for r in records])
    return 0


def cmd_ablate(args) -> int:
    world = _load_world(args.world)
    modes = pr.ABLATION_MODES if args.modes == "all" else tuple(m.strip() for m in args.modes.split(","))
    for m in modes:
        if m not in pr.ABLATION_MODES:
            raise UsageError(f"unknown ablation mode {m!r}; valid modes: {', '.join(pr.ABLATION_MODES)}")
    lines = ["mode,mean_auc,std_auc,n_runs"]
    for mode in modes:
        res = pr.run_ablation(world, mode, args.seeds, args.algorithm, args.steps, args.global_seed)
        lines.append(f"{mode},{res.mean:.6f},{res.std:.6f},{len(res.per_run)}")
    config = {"world": asdict(world.config), "modes": list(modes), "seeds": args.seeds,
              "algorithm": args.algorithm, "steps": args.steps}
    write_outputs(args.out, {"ablation.csv": "\n".join(lines) + "\n"}, config, args.global_seed)
    return 0


def cmd_analyze(args) -> int:
    world = _load_world(args.world)
    k = world.config.num_modalities
    if not 0 <= args.test_modality < k:
        raise UsageError(f"--test-modality must lie in [0, {k - 1}]")
    if not 1 <= args.layer <= 4:
        raise UsageError("--layer must lie in [1, 4]")
    mode = SETTING_TO_MODE.get(args.setting)
    if mode is None:
        raise UsageError(f"invalid setting {args.setting!r}; valid settings: {', '.join(SETTING_TO_MODE)}")
    spec = AlgorithmSpec.create(args.algorithm)
    train = [m for m in range(k) if m != args.test_modality]
    seed_key = pr.Job(args.algorithm, 0, args.seed, args.test_modality, tuple(train), ("oracle",)) \
        .seed_key(args.global_seed)
    params = train_params(world, train, args.test_modality, spec, mode, seed_key, args.steps)
    try:
        report = an.analyze(world, params, mode, args.test_modality, layer=args.layer, shrinkage=args.shrinkage,
                            top_n=args.top_n)
    except an.AnalysisError as exc:
        raise UsageError(str(exc)) from None
    files = {"analysis.json": report.to_json(), "kl.csv": report.kl_csv(), "projection.csv": report.projection_csv()}
    config = {"world": asdict(world.config), "algorithm": args.algorithm, "setting": args.setting,
              "test_modality": args.test_modality, "seed": args.seed, "steps": args.steps, "layer": args.layer,
              "shrinkage": args.shrinkage, "top_n": report.top_n}
    write_outputs(args.out, files, config, args.global_seed)
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    if args.verify:
        bad = verify_manifest(out)
        if bad:
            print("hash mismatch: " + ", ".join(bad), file=sys.stderr)
            return 2
        print("manifest verified")
    report = out / "report.csv"
    if not report.is_file() and (out / "runs.jsonl").is_file():
        sys.stdout.write(report_files(read_runs(out / "runs.jsonl"))["report.csv"])
    elif report.is_file():
        sys.stdout.write(report.read_text(encoding="utf-8"))
    elif not args.verify:
        raise UsageError(f"no report.csv or runs.jsonl in {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mafbench", description="Multimodal forgery-detection benchmark on a synthetic world.")
    parser.add_argument("--version", action="version", version=f"mafbench {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-world", help="write a world config (world.json) and manifest")
    g.add_argument("--config", help="JSON config with world keys (defaults when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_world)

    def world_args(p):
        p.add_argument("--world", required=True, help="world.json written by gen-world")
        p.add_argument("--setting", default="weak", help="weak | strong | random_init (perceptor setting)")
        p.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="training steps per run")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--global-seed", type=int, default=0, help="root of every per-run RNG stream")

    r = sub.add_parser("run", help="train one configuration and emit its run record")
    world_args(r)
    r.add_argument("--algorithm", required=True, help="algorithm name, e.g. erm")
    r.add_argument("--protocol", default="oracle", help="tm | loo | oracle")
    r.add_argument("--test-modality", type=int, default=0, help="held-out modality index")
    r.add_argument("--trial", type=int, default=0, help="hyperparameter trial (0 = defaults)")
    r.add_argument("--seed", type=int, default=0, help="seed index")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="random-search sweep over every held-out modality")
    s.add_argument("--world", required=True, help="world.json written by gen-world")
    s.add_argument("--config", help="JSON config supplying sweep keys (flags override it)")
    s.add_argument("--setting", help="weak | strong | random_init")
    s.add_argument("--protocol", help="tm | loo | oracle")
    s.add_argument("--all-protocols", action="store_true", help="emit tm, loo and oracle records from one sweep")
    s.add_argument("--algorithms", help="comma-separated list or 'all'")
    s.add_argument("--trials", type=int, help="hyperparameter trials per algorithm")
    s.add_argument("--seeds", type=int, help="seeds per trial")
    s.add_argument("--steps", type=int, help="training steps per run")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--threads", type=int, help="worker processes (results do not depend on it)")
    s.add_argument("--global-seed", type=int, help="root of every per-run RNG stream")
    s.set_defaults(func=cmd_sweep)

    sel = sub.add_parser("select", help="model selection and report.csv from an existing runs.jsonl")
    sel.add_argument("--runs", required=True, help="runs.jsonl")
    sel.add_argument("--out", required=True, help="output directory")
    sel.set_defaults(func=cmd_select)

    a = sub.add_parser("ablate", help="full / random_init / single_modality ablation")
    a.add_argument("--world", required=True, help="world.json written by gen-world")
    a.add_argument("--modes", default="all", help="comma-separated modes or 'all'")
    a.add_argument("--seeds", type=int, default=5, help="seeds per mode")
    a.add_argument("--algorithm", default="erm", help="algorithm trained in every mode")
    a.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="training steps per run")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--global-seed", type=int, default=0, help="root of every per-run RNG stream")
    a.set_defaults(func=cmd_ablate)

    z = sub.add_parser("analyze", help="feature-space diagnostics of one trained detector")
    world_args(z)
    z.add_argument("--algorithm", default="irm", help="algorithm to train (default hyperparameters)")
    z.add_argument("--test-modality", type=int, default=0, help="held-out modality index")
    z.add_argument("--seed", type=int, default=0, help="seed index")
    z.add_argument("--layer", type=int, default=4, help="detector hidden layer read as the forensic space (1-4)")
    z.add_argument("--top-n", type=int, default=None, help="co-activation top set size (default width/4)")
    z.add_argument("--shrinkage", type=float, default=an.DEFAULT_SHRINKAGE, help="KL covariance shrinkage")
    z.set_defaults(func=cmd_analyze)

    rep = sub.add_parser("report", help="print report.csv; with --verify check manifest hashes")
    rep.add_argument("--out", required=True, help="directory holding manifest.json")
    rep.add_argument("--verify", action="store_true", help="recompute and compare SHA-256 hashes")
    rep.set_defaults(func=cmd_report)
    return parser


def parse_and_dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        return int(args.func(args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RunFailure, pr.AuditViolation, RuntimeError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:  # pragma: no cover - console entry point
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":  # pragma: no cover
    main()
