"""``hyperedit`` command line: task generation, two-phase training, editing, search and comparison.

Exit statuses:
    0  success
    2  config error (invalid config, or config hash differs from the checkpoint's)
    3  data error (missing, unreadable or inconsistent task file)
    4  numeric failure (non-finite loss; a state dump is written next to the output)
    5  checkpoint error (missing or corrupt checkpoint)
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CorruptCheckpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, config_from_dict, derive_seed, load_config
from .env import TaskBatch, generate_task, read_tasks, write_tasks
from .nets import policy_net, value_net
from .ppo import METRIC_COLUMNS, NumericalFailure, pretrain_phase1, train_phase2
from .search import COMPARE_COLUMNS, brute_force, compare, default_grid, evaluate_policy, random_search

log = logging.getLogger("hyperedit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5

# task seeds for split s of master seed m start at m * SPLIT_STRIDE * 2 + s * SPLIT_STRIDE
SPLIT_STRIDE = 50_000_000
SPLITS = {"train": (0, 2000), "eval": (1, 700)}


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# ---- shared plumbing ------------------------------------------------------------


def _provenance(cfg: ExperimentConfig, **seeds) -> dict:
    return {"config_hash": cfg.hash(), "master_seed": cfg.master_seed, **seeds}


def _read_tasks(path):
    try:
        return read_tasks(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_DATA, f"task file not found: {path}") from e
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CliError(EXIT_DATA, f"bad task file {path}: {e}") from e


def _check_tasks(tasks, cfg: ExperimentConfig, path) -> None:
    if not tasks:
        raise CliError(EXIT_DATA, f"{path}: no tasks")
    if tasks[0].D != cfg.environment.D:
        raise CliError(EXIT_DATA, f"{path}: tasks have D={tasks[0].D}, config expects {cfg.environment.D}")


def _load_ckpt(path, cfg: ExperimentConfig | None):
    """Load a checkpoint; its embedded config is used unless ``cfg`` is given, which must hash-match."""
    try:
        meta, nets, space = load_checkpoint(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint not found: {path}") from e
    except CorruptCheckpoint as e:
        raise CliError(EXIT_CHECKPOINT, str(e)) from e
    if "policy" not in nets or "config" not in meta:
        raise CliError(EXIT_CHECKPOINT, f"{path}: missing policy weights or embedded config")
    if cfg is None:
        try:
            cfg = config_from_dict(meta["config"])
        except ConfigError as e:
            raise CliError(EXIT_CHECKPOINT, f"{path}: embedded config invalid: {e}") from e
    if cfg.hash() != meta.get("config_hash"):
        raise CliError(EXIT_CONFIG, f"config hash {cfg.hash()} does not match checkpoint {meta.get('config_hash')}")
    if space != cfg.space:
        raise CliError(EXIT_CHECKPOINT, f"{path}: checkpoint space differs from its config")
    return meta, nets, cfg


def _dims(cfg: ExperimentConfig) -> dict:
    n = cfg.network
    return dict(F=n.F, Fc=n.Fc, E=n.E, Ft=n.Ft, H=n.H)


def _writable(path) -> Path:
    p = Path(path)
    if p.parent and not p.parent.exists():
        raise CliError(EXIT_DATA, f"output directory does not exist: {p.parent}")
    return p


def _write_table(path: Path, columns, rows, header: dict) -> None:
    """CSV preceded by ``# key=value`` provenance lines."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in header.items():
            fh.write(f"# {k}={v}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _numeric_failure(e: NumericalFailure, out: Path) -> CliError:
    dump = out.with_name(out.name + ".dump.json")
    _write_json(dump, {"error": str(e), "state": e.dump})
    return CliError(EXIT_NUMERIC, f"{e}; state dumped to {dump}")


# ---- commands -------------------------------------------------------------------


def cmd_gen_tasks(args, cfg: ExperimentConfig) -> None:
    split_index, default_count = SPLITS[args.split]
    count = default_count if args.count is None else args.count
    if count < 0 or count > SPLIT_STRIDE:
        raise CliError(EXIT_CONFIG, f"count must lie in [0, {SPLIT_STRIDE}]")
    seed = cfg.master_seed if args.seed is None else args.seed
    first = seed * 2 * SPLIT_STRIDE + split_index * SPLIT_STRIDE
    tasks = [generate_task(cfg.environment, first + i) for i in range(count)]
    out = _writable(args.out)
    write_tasks(out, tasks, {**_provenance(cfg, seed=seed), "split": args.split, "first_task_seed": first})
    log.info("wrote %d %s tasks to %s", count, args.split, out)


def cmd_pretrain(args, cfg: ExperimentConfig) -> None:
    head, tasks = _read_tasks(args.tasks)
    _check_tasks(tasks, cfg, args.tasks)
    out = _writable(args.out)
    init_seed, train_seed = derive_seed(cfg.master_seed, "policy-init"), derive_seed(cfg.master_seed, "phase1")
    pol = policy_net(cfg.environment.D, cfg.space.sizes, seed=init_seed, **_dims(cfg))
    p1 = cfg.phase1
    try:
        hist = pretrain_phase1(pol, cfg.space, TaskBatch.stack(tasks), cfg.schedule(), p1.steps, train_seed,
                               lr=p1.lr, batch_episodes=p1.batch_episodes, prior=p1.prior(),
                               label_smoothing=p1.label_smoothing)
    except NumericalFailure as e:
        raise _numeric_failure(e, out) from e
    save_checkpoint(out, {"policy": pol}, cfg.space, cfg.hash(), cfg.master_seed, {
        "stage": "phase1", "config": cfg.to_dict(), "seeds": {"policy_init": init_seed, "phase1": train_seed},
        "train_task_seeds": [t.seed for t in tasks], "final_loss": hist[-1] if hist else None,
    })
    log.info("phase 1 done: %d steps, final loss %s", p1.steps, hist[-1] if hist else "n/a")


def cmd_train(args, cfg: ExperimentConfig) -> None:
    meta, nets, cfg = _load_ckpt(args.init, cfg)
    head, tasks = _read_tasks(args.tasks)
    _check_tasks(tasks, cfg, args.tasks)
    out, metrics_path = _writable(args.out), _writable(args.metrics)
    ref = nets.get("reference", nets["policy"])
    pol = nets["policy"].copy()
    value_seed, train_seed = derive_seed(cfg.master_seed, "value-init"), derive_seed(cfg.master_seed, "phase2")
    val = nets.get("value") or value_net(cfg.environment.D, seed=value_seed, **_dims(cfg))
    task_objs = tasks if cfg.reward_mode == "judge" else None
    try:
        res = train_phase2(pol, ref, val, TaskBatch.stack(tasks), cfg.schedule(), cfg.space, cfg.reward(),
                           cfg.phase2, train_seed, task_objs=task_objs)
    except NumericalFailure as e:
        raise _numeric_failure(e, out) from e
    seeds = {"value_init": value_seed, "phase2": train_seed}
    train_seeds = sorted(set(meta.get("train_task_seeds", [])) | {t.seed for t in tasks})
    save_checkpoint(out, {"policy": pol, "value": val, "reference": ref}, cfg.space, cfg.hash(), cfg.master_seed, {
        "stage": "phase2", "config": cfg.to_dict(), "seeds": seeds, "train_task_seeds": train_seeds,
    })
    header = {**_provenance(cfg, **seeds), "normalize_advantages": cfg.phase2.normalize_advantages,
              "alg2_literal": cfg.phase2.alg2_literal}
    _write_table(metrics_path, METRIC_COLUMNS, res.metrics, header)
    log.info("phase 2 done: %d episodes", len(res.metrics))


def _pick_task(tasks, args):
    if args.task_seed is not None:
        hit = [t for t in tasks if t.seed == args.task_seed]
        if not hit:
            raise CliError(EXIT_DATA, f"no task with seed {args.task_seed}")
        return hit[0]
    if not 0 <= args.index < len(tasks):
        raise CliError(EXIT_DATA, f"task index {args.index} out of range for {len(tasks)} tasks")
    return tasks[args.index]


def cmd_edit(args, cfg: ExperimentConfig | None) -> None:
    meta, nets, cfg = _load_ckpt(args.checkpoint, cfg)
    _, tasks = _read_tasks(args.tasks)
    _check_tasks(tasks, cfg, args.tasks)
    task = _pick_task(tasks, args)
    out = _writable(args.out)
    sched, space = cfg.schedule(), cfg.space
    ev = evaluate_policy(nets["policy"], task, sched, space, cfg.reward())
    steps = []
    for t, a in zip(range(sched.T, 0, -1), ev.actions):
        steps.append({"t": t, **{h.name: h.values[i] for h, i in zip(space.heads, a.indices)}})
    _write_json(out, {
        **_provenance(cfg), "task_seed": task.seed, "inversion_step": ev.inversion_step, "nfe_count": ev.nfe_count,
        "reward": {"total": ev.reward.total, "r_edit": ev.reward.r_edit, "r_noedit": ev.reward.r_noedit},
        "trajectory": steps, "final_x0": ev.final_x0.tolist(),
    })
    print(f"task {task.seed}: reward {ev.reward.total:.6f}, inversion step {ev.inversion_step}, NFE {ev.nfe_count}")


def cmd_search(args, cfg: ExperimentConfig) -> None:
    _, tasks = _read_tasks(args.tasks)
    _check_tasks(tasks, cfg, args.tasks)
    out = _writable(args.out)
    sched, space, rc = cfg.schedule(), cfg.space, cfg.reward()
    grid = default_grid(sched.T, space, cfg.search.gate_points)
    seed = derive_seed(cfg.master_seed, "search")
    rows = []
    for j, task in enumerate(tasks):
        bf = brute_force(task, sched, space, grid, rc)
        row = {"task": task.seed, "best_r": bf.best_config.r, "best_gate_ratio": bf.best_config.gate_ratio,
               "best_scale_index": bf.best_config.scale_index, "best_reward": bf.best_reward, "nfe_brute": bf.nfe_count}
        for k in cfg.search.random_ks:
            rs = random_search(task, sched, space, grid, k, rc, seed + j)
            row[f"random_{k}"] = rs.best_reward
            row[f"nfe_random_{k}"] = rs.nfe_count
        rows.append(row)
    columns = list(rows[0]) if rows else ["task"]
    _write_table(out, columns, rows, {**_provenance(cfg, search=seed), "grid_size": len(grid)})
    _write_json(out.with_suffix(".json"), {**_provenance(cfg, search=seed), "grid_size": len(grid), "rows": rows})


def cmd_compare(args, cfg: ExperimentConfig | None) -> None:
    meta, nets, cfg = _load_ckpt(args.checkpoint, cfg)
    _, tasks = _read_tasks(args.tasks)
    _check_tasks(tasks, cfg, args.tasks)
    overlap = set(meta.get("train_task_seeds", [])) & {t.seed for t in tasks}
    if overlap:
        raise CliError(EXIT_DATA, f"{len(overlap)} comparison tasks were used in training")
    out = _writable(args.out)
    sched, space = cfg.schedule(), cfg.space
    grid = default_grid(sched.T, space, cfg.search.gate_points)
    seed = derive_seed(cfg.master_seed, "compare")
    rows = compare(nets["policy"], tasks, sched, space, grid, cfg.reward(), seed, ks=(1, 2, 3))
    prov = {**_provenance(cfg, compare=seed), "grid_size": len(grid),
            "note": "optimal is the best global config; per-step policies may exceed it"}
    _write_table(out, COMPARE_COLUMNS, rows, prov)
    _write_json(out.with_suffix(".json"), {**prov, "columns": list(COMPARE_COLUMNS), "rows": rows})
    agg = rows[-1]
    print(f"{len(tasks)} tasks: default {agg['default']:.4f}  policy {agg['policy']:.4f}  "
          f"optimal {agg['optimal']:.4f}  normalized {agg['normalized']:.4f}")


# ---- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperedit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(fn=fn)
        if config:
            s.add_argument("--config", help="experiment config (YAML); defaults apply when omitted")
        return s

    s = add("gen-tasks", cmd_gen_tasks, "generate a synthetic task file")
    s.add_argument("--split", choices=sorted(SPLITS), default="train")
    s.add_argument("--count", type=int, help="number of tasks (default 2000 train, 700 eval)")
    s.add_argument("--seed", type=int, help="task seed base (default: master seed)")
    s.add_argument("--out", required=True)

    s = add("pretrain", cmd_pretrain, "Phase 1: imitate the hyperparameter prior")
    s.add_argument("--tasks", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")

    s = add("train", cmd_train, "Phase 2: PPO from a Phase-1 checkpoint")
    s.add_argument("--tasks", required=True)
    s.add_argument("--init", required=True, help="Phase-1 checkpoint (the KL reference)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--metrics", required=True, help="per-episode metrics CSV")

    s = add("edit", cmd_edit, "run the policy on one task and report the trajectory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tasks", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--index", type=int, default=0, help="position in the task file")
    g.add_argument("--task-seed", type=int)
    s.add_argument("--out", required=True)

    s = add("search", cmd_search, "brute-force and random search baselines")
    s.add_argument("--tasks", required=True)
    s.add_argument("--out", required=True, help="CSV path; a .json twin is written alongside")

    s = add("compare", cmd_compare, "policy vs default, random trials and brute force")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tasks", required=True)
    s.add_argument("--out", required=True, help="CSV path; a .json twin is written alongside")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # checkpoint-driven commands fall back to the config embedded in the checkpoint
        uses_ckpt = args.command in ("edit", "compare", "train")
        cfg = load_config(args.config) if (args.config or not uses_ckpt) else None
        args.fn(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
