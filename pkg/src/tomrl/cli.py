"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .buffers import load_buffer, save_buffer
from .config import ExperimentConfig, apply_overrides, load_config, reference_yaml
from .envs import RoadAndRocks, make_offline_dataset
from .errors import ConfigError, DimensionError, NumericalFault, TomError
from .loop import decile_means, run_offline, run_online, write_metrics_csv
from .models import save_model
from .oracles import SUITES, run_suite
from .sac import load_policy, save_policy
from .tom import importance_weights, load_discriminator, load_dual_q, save_discriminator, save_dual_q

OUTPUT_ROOT_ENV = "TOMRL_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)


def run_directory(cfg: ExperimentConfig, seed: int) -> Path:
    return _output_root(cfg) / f"{cfg.name}-seed{seed}"


def _train_one(cfg: ExperimentConfig, seed: int, out: Path) -> bool:
    loop_cfg = cfg.loop_config(seed)
    env = cfg.make_env()
    rng = np.random.default_rng(seed)
    if cfg.mode == "online":
        result = run_online(loop_cfg, env, rng)
    else:
        ds_cfg = cfg.dataset
        if ds_cfg.get("path"):
            dataset = load_buffer(ds_cfg["path"])
        else:
            dataset = make_offline_dataset(env, ds_cfg.get("n_random", 20000), ds_cfg.get("n_expert_traj", 5),
                                           np.random.default_rng(ds_cfg.get("seed", 0)))
        result = run_offline(loop_cfg, dataset, dataset.subset(dataset.tags == 1), env, rng)

    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result, out / "metrics.csv")
    with open(out / "phases.csv", "w", newline="") as fh:
        fh.write("# tomrl-phases v1 (wall-clock seconds; not reproducible)\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "phase", "seconds"])
        for row in result:
            for phase, secs in row.phase_seconds.items():
                w.writerow([row.epoch, phase, f"{secs:.6f}"])
    files = ["metrics.csv", "phases.csv", "policy.json", "buffer.csv"]
    save_policy(result.policy, out / "policy.json")
    save_buffer(result.buffer, out / "buffer.csv")
    if result.model is not None:
        save_model(result.model, out / "model.json")
        files.append("model.json")
    if result.discriminator is not None:
        save_discriminator(result.discriminator, out / "discriminator.json")
        save_dual_q(result.dual_q, out / "dual_q.json")
        files += ["discriminator.json", "dual_q.json"]
    manifest = {"version": 1, "package_version": __version__, "seed": seed,
                "config_hash": cfg.hash(seed), "config": cfg.resolved(seed),
                "status": "failed" if result.failed else "ok", "files": sorted(files)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return not result.failed


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.overrides)
    ok = True
    for seed in cfg.seeds:
        out = run_directory(cfg, seed)
        good = _train_one(cfg, seed, out)
        print(f"{out}: {'ok' if good else 'FAILED (learner divergence)'}")
        ok &= good
    return EXIT_OK if ok else EXIT_NUMERICAL


def weights_table(checkpoint_dir, buffer_path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """(insertion indices, importance weights, on-road flags or None) for every buffer row."""
    ckpt = Path(checkpoint_dir)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    conf = manifest["config"]
    if not (ckpt / "discriminator.json").exists():
        raise ConfigError(f"{ckpt} holds no discriminator/dual-Q checkpoint (scheme {conf['scheme']!r})")
    disc = load_discriminator(ckpt / "discriminator.json")
    q = load_dual_q(ckpt / "dual_q.json")
    policy = load_policy(ckpt / "policy.json")
    buf = load_buffer(buffer_path)
    sd, ad = buf.state_dim, buf.action_dim
    if disc.spec.input_dim != 2 * sd + ad or q.spec.input_dim != sd + ad or policy.spec.input_dim != sd:
        raise DimensionError(
            f"checkpoint expects state/action dims inconsistent with buffer ({sd}, {ad}): "
            f"discriminator input {disc.spec.input_dim}, Q input {q.spec.input_dim}")
    rng = np.random.default_rng(manifest["seed"])
    w = importance_weights(q, policy, disc, buf.states, buf.actions, buf.next_states, conf["divergence"],
                           q.gamma, rng, conf["loop"]["weight_value_samples"])
    on_road = None
    if conf["env"]["name"] == "road_and_rocks":
        env_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in conf["env"].items() if k != "name"}
        on_road = RoadAndRocks(**env_kw).is_on_road(buf.states)
    return buf.insertion_indices, w, on_road


def weights_csv(indices, weights, on_road=None) -> str:
    out = io.StringIO()
    out.write("# tomrl-weights v1\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["insertion_index", "weight"] + (["on_road"] if on_road is not None else []))
    for i in range(len(weights)):
        row = [int(indices[i]), repr(float(weights[i]))]
        if on_road is not None:
            row.append(int(on_road[i]))
        w.writerow(row)
    out.write("# deciles (contiguous, oldest first)\n")
    w.writerow(["decile", "mean_weight"])
    for k, m in enumerate(decile_means(weights)):
        w.writerow([k, repr(m)])
    return out.getvalue()


def read_weights_csv(path) -> tuple[list[dict], list[dict]]:
    """Parse a weight dump back into (per-transition rows, decile rows)."""
    sections, current = [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            current = []
            sections.append(current)
        else:
            current.append(line)
    rows = list(csv.DictReader(sections[0]))
    deciles = list(csv.DictReader(sections[1]))
    return rows, deciles


def cmd_dump_weights(args) -> int:
    idx, w, on_road = weights_table(args.checkpoint_dir, args.buffer)
    text = weights_csv(idx, w, on_road)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(sorted(SUITES))}")
    report = run_suite(args.suite, args.seeds)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_make_dataset(args) -> int:
    env = RoadAndRocks(map_seed=args.map_seed)
    buf = make_offline_dataset(env, args.n_random, args.n_expert_traj, np.random.default_rng(args.seed))
    save_buffer(buf, args.out)
    print(f"wrote {len(buf)} transitions to {args.out}")
    return EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(reference_yaml())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tomrl", description="Policy-aware model learning experiments and oracle checks.")
    p.add_argument("--version", action="version", version=f"tomrl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run online or offline training for every configured seed")
    t.add_argument("config", help="YAML experiment configuration")
    t.add_argument("overrides", nargs="*", help="key=value overrides, e.g. seed=7 loop.epochs=3")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("dump-weights", help="importance weight for every transition of a buffer")
    d.add_argument("checkpoint_dir")
    d.add_argument("buffer", help="buffer CSV (e.g. <run>/buffer.csv)")
    d.add_argument("--out", help="output CSV path (default: stdout)")
    d.set_defaults(func=cmd_dump_weights)

    o = sub.add_parser("oracle-check", help="run a tabular property suite")
    o.add_argument("suite", help=f"one of {', '.join(sorted(SUITES))}")
    o.add_argument("--seeds", type=int, default=100, help="number of random instances (where applicable)")
    o.set_defaults(func=cmd_oracle_check)

    m = sub.add_parser("make-dataset", help="generate the road-and-rocks offline dataset")
    m.add_argument("--out", required=True)
    m.add_argument("--n-random", type=int, default=20000)
    m.add_argument("--n-expert-traj", type=int, default=5)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--map-seed", type=int, default=0)
    m.set_defaults(func=cmd_make_dataset)

    r = sub.add_parser("defaults", help="print the configuration reference with all defaults")
    r.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFault, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
