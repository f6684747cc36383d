"""Command-line driver: ``gen-experts``, ``train``, ``eval`` and ``report``.

Every command reads one YAML or JSON experiment file with the sections
``env``, ``solver``, ``algo``, ``eval`` and ``io``. Unknown keys are errors.
The output directory is ``--out``, else ``$MAIRL_OUT``, else ``io.out``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import metrics
from .approx import NumericError, save_nets, load_nets
from .baselines import TRAINERS, BcConfig, BcPolicy, bc_train
from .datasets import DatasetManifest, DatasetParseError, ManifestMismatch, read_dataset, subsample, write_dataset
from .envs import GemsConfig, MatrixGameConfig, make_env
from .exact_solver import IterationLimit, equilibrium_fixed_point, generate_expert_dataset
from .mamql import MamqlConfig
from .markov_game import TabularUnsupported

log = logging.getLogger("mairl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_ENV_VAR = "MAIRL_OUT"
ALGOS = ("mamql", "bc", "iql-indep", "iql-ma")

DATASET_FILE = "experts.jsonl"
EXPERT_POLICY_FILE = "expert_policy.npz"
EXPERT_SUMMARY_FILE = "expert.json"
# final evaluations of every policy, expert included, use the same episode seeds
EVAL_STREAM = 1


class ConfigError(ValueError):
    pass


# --- configuration ----------------------------------------------------------------

@dataclass
class SolverSection:
    lam: float = 1.0
    tol: float = 1e-6
    damping: float = 0.5
    max_iter: int = 2000
    q_tol: float = 1e-8
    n_steps: int = 2000


@dataclass
class AlgoSection:
    name: str = "mamql"
    bc_updates: int = 5000
    params: dict = field(default_factory=dict)  # MamqlConfig fields


@dataclass
class EvalSection:
    n_episodes: int = 1000  # final evaluation (eval command, expert return)
    train_episodes: int = 50  # per evaluation during training
    interval: int = 100
    convergence_window: int = 50
    convergence_fraction: float = 0.85
    stop_on_convergence: bool = False


@dataclass
class IoSection:
    out: str = "runs"
    dataset: Optional[str] = None  # directory written by gen-experts; default: the out dir
    seeds: List[int] = field(default_factory=lambda: [0])
    dataset_sizes: Optional[List[int]] = None
    checkpoint_every: Optional[int] = None


@dataclass
class ExperimentConfig:
    env: dict
    solver: SolverSection
    algo: AlgoSection
    eval: EvalSection
    io: IoSection

    def mamql_config(self, seed: int) -> MamqlConfig:
        kw = dict(self.algo.params)
        kw.update(seed=seed, eval_interval=self.eval.interval, eval_episodes=self.eval.train_episodes,
                  convergence_window=self.eval.convergence_window,
                  convergence_fraction=self.eval.convergence_fraction,
                  stop_on_convergence=self.eval.stop_on_convergence)
        return MamqlConfig(**kw)

    def bc_config(self, seed: int) -> BcConfig:
        p = self.algo.params
        return BcConfig(backend=p.get("backend", "table"), alpha=p.get("alpha", 3e-4),
                        batch_size=p.get("batch_size", 64), n_updates=self.algo.bc_updates,
                        hidden=p.get("hidden", 64), depth=p.get("depth", 4), seed=seed)


_SECTION_TYPES = {"solver": SolverSection, "eval": EvalSection, "io": IoSection}
_MAMQL_FIELDS = {f.name for f in fields(MamqlConfig)}
_MAMQL_RESERVED = {"seed", "eval_interval", "eval_episodes", "convergence_window",
                   "convergence_fraction", "stop_on_convergence"}


def _section(cls, raw, name):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping completely; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(raw) - {"env", "solver", "algo", "eval", "io"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    env = raw.get("env")
    if not isinstance(env, dict) or "type" not in env:
        raise ConfigError("section 'env' with a 'type' key is required")
    env_cls = {"gems": GemsConfig, "matrix": MatrixGameConfig}.get(env["type"])
    if env_cls is None:
        raise ConfigError(f"unknown env type {env['type']!r}")
    env_keys = {f.name for f in fields(env_cls)} | {"type"}
    bad = sorted(set(env) - env_keys)
    if bad:
        raise ConfigError(f"unknown key(s) in 'env': {', '.join(bad)}")
    algo_raw = dict(raw.get("algo") or {})
    name = algo_raw.pop("name", "mamql")
    if name not in ALGOS:
        raise ConfigError(f"algo.name must be one of {ALGOS}, got {name!r}")
    bc_updates = algo_raw.pop("bc_updates", 5000)
    bad = sorted(set(algo_raw) - (_MAMQL_FIELDS - _MAMQL_RESERVED))
    if bad:
        raise ConfigError(f"unknown or reserved key(s) in 'algo': {', '.join(bad)}")
    cfg = ExperimentConfig(
        env=dict(env),
        solver=_section(SolverSection, raw.get("solver"), "solver"),
        algo=AlgoSection(name=name, bc_updates=bc_updates, params=algo_raw),
        eval=_section(EvalSection, raw.get("eval"), "eval"),
        io=_section(IoSection, raw.get("io"), "io"),
    )
    # build everything once so that value errors surface before any side effect
    try:
        make_env(cfg.env)
        cfg.mamql_config(0)
        cfg.bc_config(0)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.solver.n_steps < 1 or cfg.eval.n_episodes < 1 or cfg.eval.interval < 1:
        raise ConfigError("solver.n_steps, eval.n_episodes and eval.interval must be positive")
    if not cfg.io.seeds:
        raise ConfigError("io.seeds must not be empty")
    if cfg.io.dataset_sizes is not None and any(int(n) < 1 for n in cfg.io.dataset_sizes):
        raise ConfigError("io.dataset_sizes must be positive")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return parse_config(raw)


def resolve_out(args, cfg: Optional[ExperimentConfig]) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV_VAR):
        return Path(os.environ[OUT_ENV_VAR])
    return Path(cfg.io.out if cfg else "runs")


# --- helpers -------------------------------------------------------------------------

def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dataset_dir(cfg: ExperimentConfig, out: Path) -> Path:
    return Path(cfg.io.dataset) if cfg.io.dataset else out


def _load_expert(cfg: ExperimentConfig, env, out: Path):
    d = _dataset_dir(cfg, out)
    data, manifest = read_dataset(d / DATASET_FILE, env)
    expert_policy, expert_return = None, None
    if (d / EXPERT_POLICY_FILE).exists():
        with np.load(d / EXPERT_POLICY_FILE) as z:
            expert_policy = metrics.TablePolicy(env, z["probs"])
    if (d / EXPERT_SUMMARY_FILE).exists():
        expert_return = json.loads((d / EXPERT_SUMMARY_FILE).read_text())["total_return"]
    return data, manifest, expert_policy, expert_return


def _seeds(args, cfg) -> List[int]:
    return [args.seed] if args.seed is not None else [int(s) for s in cfg.io.seeds]


# --- commands ----------------------------------------------------------------------------

def cmd_gen_experts(args) -> int:
    cfg = load_config(args.config)
    out = resolve_out(args, cfg)
    seed = args.seed if args.seed is not None else int(cfg.io.seeds[0])
    env = make_env(cfg.env)
    if not env.is_tabular:
        raise TabularUnsupported("expert generation needs a tabular environment")
    s = cfg.solver
    eq = equilibrium_fixed_point(env.tabular_model(), lam=s.lam, tol=s.tol, damping=s.damping,
                                 max_iter=s.max_iter, q_tol=s.q_tol)
    data = generate_expert_dataset(env, eq, s.n_steps, seed)
    policy = metrics.TablePolicy(env, eq.policies.probs)
    ret = metrics.average_return(policy, env, cfg.eval.n_episodes, seed=(seed, EVAL_STREAM))
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(env.digest(), seed, len(data),
                               metadata={"lam": s.lam, "residual": eq.residual, "rounds": eq.iterations})
    write_dataset(out / DATASET_FILE, data, manifest, env)
    with open(out / EXPERT_POLICY_FILE, "wb") as fh:
        np.savez(fh, probs=eq.policies.probs)
    _dump(out / EXPERT_SUMMARY_FILE, {"env_hash": env.digest(), "residual": eq.residual,
                                      "rounds": eq.iterations, "lam": s.lam, "seed": seed, **ret})
    print(f"equilibrium residual {eq.residual:.3e} after {eq.iterations} rounds (tol {s.tol:g})")
    print(f"expert average return G = {ret['total_return']:.4f} +/- {ret['total_return_stderr']:.4f} "
          f"(per agent {', '.join(f'{x:.4f}' for x in ret['returns'])})")
    print(f"wrote {len(data)} transitions to {out / DATASET_FILE}")
    return EXIT_OK


def run_dir_name(algo: str, size: int, seed: int) -> str:
    return f"{algo}/n{size}_s{seed}"


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = resolve_out(args, cfg)
    env = make_env(cfg.env)
    full, _, expert_policy, expert_return = _load_expert(cfg, env, out)
    sizes = cfg.io.dataset_sizes or [len(full)]
    if max(sizes) > len(full):
        raise ConfigError(f"dataset size {max(sizes)} exceeds the {len(full)} available transitions")
    algo = cfg.algo.name
    for size in sizes:
        for seed in _seeds(args, cfg):
            data = subsample(full, int(size), seed)
            run = out / run_dir_name(algo, int(size), seed)
            run.mkdir(parents=True, exist_ok=True)
            if algo == "bc":
                summary = _train_bc(cfg, env, data, seed, run, expert_policy)
            else:
                summary = _train_online(cfg, env, data, seed, run, expert_policy, expert_return,
                                        resume=args.resume, stop_after=args.stop_after)
            summary.update(algo=algo, seed=seed, dataset_size=int(size), n_transitions=len(data),
                           env=cfg.env.get("type"), expert_return=expert_return)
            _dump(run / "run.json", summary)
            final = summary["final_return"]
            print(f"{run}: episodes {summary['episodes']}, env steps {summary['env_steps']}, "
                  f"final G {'n/a' if final is None else f'{final:.4f}'}")
    return EXIT_OK


def _train_bc(cfg, env, data, seed, run: Path, expert_policy) -> dict:
    pol = bc_train(env, data, cfg.bc_config(seed))
    ev = metrics.evaluate_bundle(pol, env, data, cfg.eval.train_episodes, seed=(seed, 0),
                                 expert_policy=expert_policy)
    rec = metrics.RunRecord(0, 0, seed, ev["total_return"], ev["total_return_stderr"], ev["returns"],
                            ev["return_ratio"], None, ev["nll"], ev["tv"], 0.0)
    metrics.write_records_csv([rec], run / "metrics.csv", env.spec.n_agents)
    ck = run / "checkpoint"
    ck.mkdir(exist_ok=True)
    save_nets(ck / "model.npz", pol.nets())
    _dump(ck / "state.json", {"algo": "bc", "config": asdict(pol.cfg), "env_hash": env.digest()})
    return {"episodes": 0, "env_steps": pol.env_steps, "final_return": rec.total_return,
            "converged_at": None}


def _train_online(cfg, env, data, seed, run: Path, expert_policy, expert_return,
                  resume=False, stop_after=None) -> dict:
    trainer = TRAINERS[cfg.algo.name](env, data, cfg.mamql_config(seed), expert_policy=expert_policy,
                                      expert_return=expert_return)
    ck = run / "checkpoint"
    if resume and (ck / "state.json").exists():
        trainer.load(ck)
        log.info("resumed %s at episode %d", run, trainer.episode)
    episodes_logged = []

    def on_record(r):
        episodes_logged.append(r.episode)
        log.info("episode %d: G=%.4f nll=%s", r.episode, r.total_return, r.nll)

    try:
        trainer.run(on_record=on_record, checkpoint_dir=ck,
                    checkpoint_every=cfg.io.checkpoint_every, stop_after=stop_after)
    finally:
        metrics.write_records_csv(trainer.records, run / "metrics.csv", env.spec.n_agents)
    if stop_after is None or trainer.episode >= trainer.cfg.max_episodes:
        trainer.save(ck)
    conv = None
    if expert_return is not None:
        conv = metrics.episodes_to_convergence(trainer.records, expert_return,
                                               cfg.eval.convergence_window, cfg.eval.convergence_fraction)
    final = trainer.records[-1].total_return if trainer.records else None
    return {"episodes": trainer.episode, "env_steps": trainer.env_steps,
            "final_return": final, "converged_at": conv}


def load_bundle(checkpoint: Path, cfg: ExperimentConfig, env, data):
    """Rebuild a policy bundle (and its reward function, if any) from a checkpoint path."""
    if checkpoint.suffix == ".npz" and checkpoint.name == EXPERT_POLICY_FILE:
        with np.load(checkpoint) as z:
            probs = z["probs"]
        if probs.shape[1] != env.n_states:
            raise ManifestMismatch("expert policy does not match the environment")
        return metrics.TablePolicy(env, probs), None
    state_path = checkpoint / "state.json"
    if not state_path.exists():
        raise FileNotFoundError(f"no checkpoint at {checkpoint}")
    state = json.loads(state_path.read_text())
    if state["env_hash"] != env.digest():
        raise ManifestMismatch("checkpoint was written for a different environment")
    if state["algo"] == "bc":
        pol = BcPolicy(env, BcConfig(**state["config"]))
        nets, _ = load_nets(checkpoint / "model.npz")
        for name, net in pol.nets().items():
            for p, q in zip(net.params, nets[name].params):
                p[...] = q
        return pol, None
    trainer = TRAINERS[state["algo"]](env, data, MamqlConfig(**state["config"]))
    trainer.load(checkpoint)
    return trainer, trainer.reward_predict


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = resolve_out(args, cfg)
    env = make_env(cfg.env)
    data, _, expert_policy, _ = _load_expert(cfg, env, out)
    checkpoint = Path(args.checkpoint)
    bundle, reward_fn = load_bundle(checkpoint, cfg, env, data)
    seed = args.seed if args.seed is not None else int(cfg.io.seeds[0])
    ev = metrics.evaluate_bundle(bundle, env, data, cfg.eval.n_episodes, seed=(seed, EVAL_STREAM),
                                 expert_policy=expert_policy, reward_fn=reward_fn)
    rec = metrics.RunRecord(getattr(bundle, "episode", 0), getattr(bundle, "env_steps", 0), seed,
                            ev["total_return"], ev["total_return_stderr"], ev["returns"],
                            ev["return_ratio"], ev["reward_mse"], ev["nll"], ev["tv"], 0.0)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_records_csv([rec], out / "eval.csv", env.spec.n_agents)
    print(f"G = {rec.total_return:.4f} +/- {rec.total_return_stderr:.4f}; "
          f"per agent {', '.join(f'{x:.4f}' for x in rec.returns)}")
    print(f"NLL {', '.join(f'{x:.4f}' for x in rec.nll)}"
          + (f"; TV {', '.join(f'{x:.4f}' for x in rec.tv)}" if rec.tv else "")
          + (f"; reward MSE {', '.join(f'{x:.4f}' for x in rec.reward_mse)}" if rec.reward_mse else ""))
    if args.plots:
        stream_path = checkpoint.parent / "metrics.csv"
        stream = metrics.read_records_csv(stream_path) if stream_path.exists() else [rec]
        for p in metrics.plot_records({checkpoint.parent.name: stream}, out):
            print(f"wrote {p}")
    return EXIT_OK


REPORT_COLUMNS = ["final_return", "return_stderr", "converged_at", "reward_mse", "nll", "tv"]
REPORT_ORDER = ["expert", "mamql", "iql-ma", "iql-indep", "bc", "ma-airl"]


def cmd_report(args) -> int:
    out = resolve_out(args, None)
    rows = {}
    warnings = 0
    for d in args.runs:
        d = Path(d)
        info_path, stream_path = d / "run.json", d / "metrics.csv"
        if not info_path.exists():
            raise FileNotFoundError(f"{d} is not a run directory (no run.json)")
        info = json.loads(info_path.read_text())
        algo = info["algo"]
        cells = {c: None for c in REPORT_COLUMNS}
        stream = metrics.read_records_csv(stream_path) if stream_path.exists() else []
        if stream:
            last = stream[-1]
            cells.update(final_return=last.total_return, return_stderr=last.total_return_stderr,
                         converged_at=info.get("converged_at"),
                         reward_mse=None if last.reward_mse is None else float(np.mean(last.reward_mse)),
                         nll=float(np.mean(last.nll)),
                         tv=None if last.tv is None else float(np.mean(last.tv)))
        else:
            warnings += 1
            print(f"warning: {stream_path} missing or empty", file=sys.stderr)
        rows.setdefault(algo, []).append(cells)
    rows.setdefault("ma-airl", [])  # not implemented; shown as unavailable
    table = []
    for algo in sorted(rows, key=lambda a: REPORT_ORDER.index(a) if a in REPORT_ORDER else 99):
        runs = rows[algo]
        agg = {"algo": algo, "n_runs": len(runs)}
        for c in REPORT_COLUMNS:
            vals = [r[c] for r in runs if r[c] is not None]
            agg[c] = float(np.median(vals)) if vals else None
        table.append(agg)
    best = max((r["final_return"] for r in table if r["final_return"] is not None), default=None)
    for r in table:
        r["flag"] = ""
        if r["algo"] == "mamql" and r["final_return"] is not None and best is not None and r["final_return"] < best:
            r["flag"] = "NOT-BEST"
    header = ["algo", "n_runs"] + REPORT_COLUMNS + ["flag"]

    def fmt(v):
        if v is None:
            return "n/a"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    out.mkdir(parents=True, exist_ok=True)
    lines = [" | ".join(f"{h:>12}" for h in header)]
    lines += [" | ".join(f"{fmt(r[h]):>12}" for h in header) for r in table]
    text = "\n".join(lines)
    (out / "report.txt").write_text(text + "\n")
    with open(out / "report.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in table:
            fh.write(",".join("" if r[h] is None else str(r[h]) for h in header) + "\n")
    print(text)
    print(f"warnings: {warnings}")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mairl", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML or JSON experiment file")
        sp.add_argument("--out", help=f"output directory (overrides ${OUT_ENV_VAR} and io.out)")
        sp.add_argument("--seed", type=int, help="seed (overrides io.seeds)")

    common(sub.add_parser("gen-experts", help="solve the equilibrium and write an expert dataset"))
    tp = sub.add_parser("train", help="train the configured algorithm")
    common(tp)
    tp.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    tp.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    ep = sub.add_parser("eval", help="evaluate a checkpoint")
    common(ep)
    ep.add_argument("--checkpoint", required=True, help="checkpoint directory or expert_policy.npz")
    ep.add_argument("--plots", action="store_true", help="also write SVG charts")
    rp = sub.add_parser("report", help="tabulate finished runs")
    common(rp, config_required=False)
    rp.add_argument("runs", nargs="+", help="run directories")
    return p


COMMANDS = {"gen-experts": cmd_gen_experts, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ManifestMismatch, TabularUnsupported) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, IterationLimit, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetParseError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
