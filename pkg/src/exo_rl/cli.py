"""Command-line harness: ``exo-rl run|plan|decode-eval|baseline-id|verify-lemmas``.

Every command is a deterministic function of its config and seeds. Outputs
are written atomically, and a failing command removes whatever it wrote.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path as FsPath
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .baselines import BaselineRefused, ppe_coverage, run_exact_id
from .classifier import make_factory
from .core import PpeConfig
from .env import (
    EnvError,
    ExBmdpEnv,
    UnsupportedOperation,
    build_chain,
    build_combolock,
    build_id_counterexample,
    build_tabular,
    random_tabular_env,
)
from .lemmas import verify_lemmas
from .metrics import RunMetrics, decoder_accuracy
from .oracle import exact_optimal_value, open_loop_value
from .planning import evaluate_plan, evaluate_policy, psdp, vi_plan
from .ppe import elimination_error_counts, recover_decoder, run_ppe

log = logging.getLogger("exo_rl")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

ENV_KINDS = ["combolock", "tabular", "id-counterexample", "chain", "random"]

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["env"],
    "additionalProperties": False,
    "properties": {
        "env": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ENV_KINDS},
                "H": {"type": "integer", "minimum": 1},
                "A": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "noise_sigma": {"type": "number", "minimum": 0},
                "exo_bits": {"type": "integer", "minimum": 1},
                "flip_p": {"type": "number", "minimum": 0, "maximum": 1},
                "emission": {"enum": ["dense", "identity", "table"]},
                "document": {"type": "object"},
                "path": {"type": "string"},
                "max_states": {"type": "integer", "minimum": 1},
                "max_actions": {"type": "integer", "minimum": 1},
                "max_horizon": {"type": "integer", "minimum": 2},
                "eta": {"type": "number", "minimum": 0},
                "exo_states": {"type": "integer", "minimum": 1},
                "exo_reward": {"type": "boolean"},
            },
        },
        "algo": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "classifier": {"enum": ["tabular", "softmax", "cheating"]},
                "classifier_params": {"type": "object"},
                "ppe": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "eta": {"type": "number", "minimum": 0},
                        "n_override": {"type": "integer", "minimum": 1},
                        "elimination_threshold_numerator": {"type": "number", "exclusiveMinimum": 0},
                        "decoder_margin_fraction": {"type": "number", "exclusiveMinimum": 0},
                        "log_f_class_size": {"type": "number", "minimum": 0},
                        "sample_count_rule": {"enum": ["cover", "pairwise"]},
                        "fresh_gap_samples": {"type": "boolean"},
                    },
                },
                "planner": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "method": {"enum": ["vi", "psdp"]},
                        "n_per_level": {"type": "integer", "minimum": 1},
                        "reward_samples": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "episodes": {"type": "integer", "minimum": 1},
                "exact_when_possible": {"type": "boolean"},
                "decoder_pairs": {"type": "integer", "minimum": 1},
                "decoder_level": {"type": "integer", "minimum": 2},
            },
        },
        "output_dir": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
    },
}

DEFAULTS = {
    "algo": {
        "classifier": "softmax",
        "classifier_params": {},
        "ppe": {"n_override": 5000},
        "planner": {"method": "vi", "n_per_level": 10_000},
    },
    "evaluation": {"episodes": 10_000, "exact_when_possible": True, "decoder_pairs": 5000, "decoder_level": 2},
    "output_dir": "out",
    "seeds": [0],
}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(doc: dict, base_dir: Optional[FsPath] = None) -> dict:
    """Validate a config document and fill defaults. Raises ConfigError naming the field."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"invalid config field '{where}': {err.message}") from None
    cfg = _merge(DEFAULTS, doc)
    env_cfg = cfg["env"]
    if env_cfg["kind"] == "tabular":
        if "document" not in env_cfg and "path" not in env_cfg:
            raise ConfigError("invalid config field 'env': tabular env needs 'document' or 'path'")
        if "path" in env_cfg and "document" not in env_cfg:
            path = FsPath(env_cfg["path"])
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            try:
                env_cfg["document"] = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as err:
                raise ConfigError(f"invalid config field 'env.path': {err}") from None
    if env_cfg["kind"] == "combolock" and "H" not in env_cfg:
        raise ConfigError("invalid config field 'env.H': combination lock needs a horizon")
    kind = cfg["algo"]["classifier"]
    try:
        make_factory(kind, **cfg["algo"]["classifier_params"])
    except TypeError as err:
        raise ConfigError(f"invalid config field 'algo.classifier_params': {err}") from None
    try:
        build_env(env_cfg, cfg["seeds"][0])
    except (EnvError, ValueError) as err:
        raise ConfigError(f"invalid config field 'env': {err}") from None
    return cfg


def build_env(env_cfg: dict, seed: int) -> ExBmdpEnv:
    kind = env_cfg["kind"]
    env_seed = env_cfg.get("seed", seed)
    if kind == "combolock":
        return build_combolock(
            env_cfg["H"],
            env_seed,
            noise_sigma=env_cfg.get("noise_sigma", 0.1),
            A=env_cfg.get("A", 10),
            exo_bits=env_cfg.get("exo_bits"),
            flip_p=env_cfg.get("flip_p", 0.1),
            emission=env_cfg.get("emission", "dense"),
        )
    if kind == "tabular":
        return build_tabular(env_cfg["document"])
    if kind == "id-counterexample":
        return build_id_counterexample()
    if kind == "chain":
        return build_chain(env_cfg.get("H", 3), env_cfg.get("A", 2))
    return random_tabular_env(
        np.random.default_rng(env_seed),
        max_states=env_cfg.get("max_states", 6),
        max_actions=env_cfg.get("max_actions", 4),
        max_horizon=env_cfg.get("max_horizon", 6),
        eta=env_cfg.get("eta"),
        n_exo=env_cfg.get("exo_states", 2),
        emission=env_cfg.get("emission", "identity"),
        exo_reward=env_cfg.get("exo_reward", False),
    )


def _check_compatible(cfg: dict, env: ExBmdpEnv) -> None:
    kind = cfg["algo"]["classifier"]
    if kind == "tabular" and not env.emission.discrete:
        raise ConfigError("invalid config field 'algo.classifier': tabular classifier needs discrete observations")
    if kind == "softmax" and env.emission.discrete:
        raise ConfigError("invalid config field 'algo.classifier': softmax classifier needs dense observations")
    if kind == "cheating" and not env.emission.has_decoder:
        raise ConfigError("invalid config field 'algo.classifier': environment exposes no ground-truth decoder")
    if env.H < 2:
        raise ConfigError("invalid config field 'env.H': PPE needs a horizon of at least 2")


def optimal_value(env: ExBmdpEnv) -> float:
    if "optimal_value" in env.metadata:
        return float(env.metadata["optimal_value"])
    scope = "endogenous" if env.endogenous_reward else "full"
    return exact_optimal_value(env, scope)[0]


# --------------------------------------------------------------------------
# outputs


class OutputWriter:
    """Atomic file writes into one directory; ``discard`` removes everything written so far."""

    def __init__(self, directory: FsPath):
        self.directory = directory
        self.written: list = []

    def write_text(self, name: str, text: str) -> FsPath:
        self.directory.mkdir(parents=True, exist_ok=True)
        target = self.directory / name
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(target)
        return target

    def write_json(self, name: str, doc) -> FsPath:
        return self.write_text(name, json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")

    def discard(self) -> None:
        for path in self.written:
            if path.exists():
                path.unlink()
        self.written.clear()


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


METRIC_COLUMNS = [
    "seed",
    "H",
    "episodes_used",
    "episodes_ppe",
    "episodes_reward",
    "episodes_planning",
    "episodes_evaluation",
    "type1",
    "type2",
    "decoder_accuracy",
    "value",
    "optimal_value",
    "regret",
]


def metrics_csv(rows: list) -> str:
    """Header: fixed columns, then cover_1..cover_H for the largest horizon seen."""
    H = max((len(m.cover_sizes) for m in rows), default=0)
    columns = METRIC_COLUMNS[:7] + [f"cover_{h}" for h in range(1, H + 1)] + METRIC_COLUMNS[7:]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for m in rows:
        r = m.row()
        writer.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


# --------------------------------------------------------------------------
# pipeline


def run_seed(cfg: dict, seed: int, workers: int, planner: Optional[str] = None) -> tuple:
    """PPE, planning and evaluation for one seed. Returns (metrics, record)."""
    env = build_env(cfg["env"], seed)
    _check_compatible(cfg, env)
    ppe_cfg = PpeConfig(horizon=env.H, seed=seed, workers=workers, **cfg["algo"]["ppe"])
    factory = make_factory(cfg["algo"]["classifier"], **cfg["algo"]["classifier_params"])
    result = run_ppe(env, ppe_cfg, factory, sweep_samples=cfg["algo"]["planner"].get("reward_samples"))
    ev = cfg["evaluation"]
    m = RunMetrics(seed=seed, H=env.H)
    m.episodes_ppe = result.episodes
    m.episodes_reward = result.sweep_episodes
    m.cover_sizes = [len(lvl.survivors) for lvl in result.levels]
    m.type1, m.type2 = elimination_error_counts(result.levels, env)

    h_dec = min(ev["decoder_level"], env.H)
    decoder = recover_decoder(result.levels[h_dec - 1])
    m.decoder_accuracy = decoder_accuracy(
        decoder, env, result.levels[h_dec - 1].survivor_paths, h_dec, ev["decoder_pairs"], seed, workers
    )
    m.episodes_evaluation += 2 * ev["decoder_pairs"]

    method = planner or cfg["algo"]["planner"]["method"]
    record = {"seed": seed, "levels": [lvl.to_dict() for lvl in result.levels], "model": result.model.to_dict()}
    if method == "vi":
        plan = vi_plan(result.model)
        record["plan"] = plan.to_dict()
        if ev["exact_when_possible"] and env.endogenous_reward:
            m.value = open_loop_value(env, plan.actions)
        else:
            m.value = evaluate_plan(env, plan.actions, ev["episodes"], seed, workers)
            m.episodes_evaluation += ev["episodes"]
    else:
        n = cfg["algo"]["planner"]["n_per_level"]
        policy = psdp(env, result.covers(), n, seed, workers=workers)
        m.episodes_planning = n * env.H
        record["policy"] = policy.to_dict()
        m.value = evaluate_policy(env, policy, ev["episodes"], seed, workers)
        m.episodes_evaluation += ev["episodes"]
    m.optimal_value = optimal_value(env)
    record["metrics"] = {**m.row(), "cover_sizes": m.cover_sizes}
    return m, record


def _load_config(path: str) -> dict:
    p = FsPath(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    return resolve_config(doc, p.parent)


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seeds", None):
        cfg["seeds"] = args.seeds
    if getattr(args, "out", None):
        cfg["output_dir"] = args.out
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    out = OutputWriter(FsPath(cfg["output_dir"]))
    try:
        rows, records = [], []
        for seed in cfg["seeds"]:
            m, rec = run_seed(cfg, seed, args.workers)
            log.info("seed %d: covers %s, value %.4f, regret %.4f", seed, m.cover_sizes, m.value, m.regret)
            rows.append(m)
            records.append(rec)
        out.write_text("metrics.csv", metrics_csv(rows))
        out.write_json("run.json", {"version": __version__, "config": cfg, "runs": records})
    except BaseException:
        out.discard()
        raise
    print(metrics_csv(rows), end="")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    out = OutputWriter(FsPath(cfg["output_dir"]))
    try:
        plans = []
        method = args.method or cfg["algo"]["planner"]["method"]
        for seed in cfg["seeds"]:
            m, rec = run_seed(cfg, seed, args.workers, planner=method)
            plans.append({"seed": seed, "method": method, "value": m.value, "optimal_value": m.optimal_value,
                          **{k: rec[k] for k in ("plan", "policy") if k in rec}})
        out.write_json("plan.json", {"version": __version__, "plans": plans})
    except BaseException:
        out.discard()
        raise
    for p in plans:
        print(f"seed {p['seed']}: {p['method']} value {p['value']:.4f} (optimal {p['optimal_value']:.4f})")
    return EXIT_OK


def cmd_decode_eval(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    out = OutputWriter(FsPath(cfg["output_dir"]))
    try:
        rows = []
        for seed in cfg["seeds"]:
            env = build_env(cfg["env"], seed)
            _check_compatible(cfg, env)
            ppe_cfg = PpeConfig(horizon=env.H, seed=seed, workers=args.workers, **cfg["algo"]["ppe"])
            result = run_ppe(env, ppe_cfg, make_factory(cfg["algo"]["classifier"], **cfg["algo"]["classifier_params"]))
            for lvl in result.levels[1:]:
                acc = decoder_accuracy(
                    recover_decoder(lvl), env, lvl.survivor_paths, lvl.h, args.pairs, seed, args.workers
                )
                rows.append({"seed": seed, "h": lvl.h, "cover_size": len(lvl.survivors), "decoder_accuracy": acc})
        buf = io.StringIO()
        writer = csv.DictWriter(buf, ["seed", "h", "cover_size", "decoder_accuracy"], lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})
        out.write_text("decoder.csv", buf.getvalue())
    except BaseException:
        out.discard()
        raise
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_baseline_id(args) -> int:
    doc = {"env": {"kind": "id-counterexample"}}
    base = FsPath(".")
    if args.config:
        base = FsPath(args.config).parent
        try:
            doc = json.loads(FsPath(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config: {err}") from None
    env_doc = doc["env"] if "env" in doc else doc
    cfg = resolve_config({"env": env_doc, "algo": {"classifier": "cheating"}}, base)
    cfg = _apply_overrides(cfg, args)
    env = build_env(cfg["env"], cfg["seeds"][0])
    try:
        id_run = run_exact_id(env)
    except (BaselineRefused, UnsupportedOperation) as err:
        print(f"baseline-id refused: {err}", file=sys.stderr)
        return EXIT_FAIL
    ppe_cfg = PpeConfig(horizon=env.H, seed=cfg["seeds"][0], n_override=args.samples, workers=args.workers)
    ppe = run_ppe(env, ppe_cfg, make_factory("cheating"))
    ppe_cov = ppe_coverage(env, ppe.covers())
    table = []
    for id_lvl, ppe_lvl in zip(id_run.coverage, ppe_cov):
        table.append(
            {
                "h": id_lvl["h"],
                "reachable": id_lvl["reachable"],
                "id_reached": id_lvl["reached"],
                "ppe_reached": ppe_lvl["reached"],
            }
        )
    out = OutputWriter(FsPath(cfg["output_dir"]))
    out.write_json("id_report.json", {"version": __version__, "id": id_run.report(), "coverage": table})
    print(f"{'h':>3} {'reachable':>10} {'ID':>6} {'PPE':>6}")
    for row in table:
        n = len(row["reachable"])
        print(f"{row['h']:>3} {n:>10} {len(row['id_reached']):>3}/{n:<2} {len(row['ppe_reached']):>3}/{n:<2}")
    return EXIT_OK


def cmd_verify_lemmas(args) -> int:
    report = verify_lemmas(args.instances, args.seed, args.eta_scale)
    out = OutputWriter(FsPath(args.out or "."))
    out.write_json("lemma_report.json", report)
    counts: dict = {}
    for row in report["instances"]:
        for name, res in row["lemmas"].items():
            counts.setdefault(name, {}).setdefault(res["status"], 0)
            counts[name][res["status"]] += 1
    for name, c in sorted(counts.items()):
        print(f"{name}: " + ", ".join(f"{k}={v}" for k, v in sorted(c.items())))
    for name, res in report["fixtures"].items():
        print(f"{name}: {res['status']}")
    return EXIT_OK if report["all_passed"] else EXIT_FAIL


def _seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exo-rl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (overrides config)")
        p.add_argument("--workers", type=int, default=1, help="episode-collection threads")

    p = sub.add_parser("run", help="PPE + planning + evaluation, one metrics row per seed")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plan", help="PPE followed by a chosen planner")
    common(p)
    p.add_argument("--method", choices=["vi", "psdp"], default=None, help="defaults to algo.planner.method")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("decode-eval", help="pairwise decoder accuracy at every level")
    common(p)
    p.add_argument("--pairs", type=int, default=5000)
    p.set_defaults(func=cmd_decode_eval)

    p = sub.add_parser("baseline-id", help="exact inverse dynamics vs PPE coverage")
    common(p, config_required=False)
    p.add_argument("--samples", type=int, default=2000, help="PPE samples per level")
    p.set_defaults(func=cmd_baseline_id)

    p = sub.add_parser("verify-lemmas", help="exact structural checks on random instances")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for lemma_report.json")
    p.add_argument("--eta-scale", type=float, default=None, help="pin stochasticity to this multiple of the regime cap")
    p.set_defaults(func=cmd_verify_lemmas)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("EXO_RL_LOG", "WARNING").upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (EnvError, ValueError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
