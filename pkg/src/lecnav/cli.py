"""Command line entry point.

    lecnav gen-map     --config cfg.json --out DIR
    lecnav gen-teacher --config cfg.json [--teacher planner|llm --n 50 --l 5] --out DIR
    lecnav run-ec      --config cfg.json --out DIR
    lecnav run-lec     --config cfg.json --teacher-knowledge DIR --out DIR
    lecnav eval        --config cfg.json --run DIR --out DIR
    lecnav compare     DIR DIR [DIR ...] --out DIR

Every CSV starts with a ``# config_hash=...`` line followed by the column
header.  Exit status: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import ec, lec, metrics
from .env import ConfigError, obs_dim
from .teacher import (HttpCompletionClient, SelectionError, TeacherKnowledge, episode_score,
                      generate_planner_episodes, llm_teacher_episode, select_top_l,
                      write_episodes)

log = logging.getLogger("lecnav")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# ------------------------------------------------------------------ output helpers

def write_csv(path, config_hash, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def read_csv(path):
    """Returns (config_hash, list of dict rows)."""
    lines = Path(path).read_text().splitlines()
    chash = ""
    if lines and lines[0].startswith("# config_hash="):
        chash = lines.pop(0).split("=", 1)[1]
    return chash, list(csv.DictReader(lines))


def prepare_out(out, force):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def versions():
    from importlib import metadata
    import scipy
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"artifact": own, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def write_manifest(out, cfg, command, seeds, wall_time, **extra):
    blob = {"command": command, "config_hash": cfgmod.config_hash(cfg),
            "world_key": cfgmod.world_key(cfg), "seeds": list(seeds), "versions": versions(),
            "wall_time_s": round(wall_time, 3), **extra}
    (Path(out) / "manifest.json").write_text(json.dumps(blob, indent=1) + "\n")
    (Path(out) / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def run_seeds(fn, seeds, *args):
    """One worker per seed; falls back to in-process on a single core."""
    workers = min(len(seeds), os.cpu_count() or 1)
    if workers <= 1:
        return [fn(s, *args) for s in seeds]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, seeds, *[[a] * len(seeds) for a in args]))


def save_params(path, params):
    np.savez(path, **{name: t.data for name, t in params})


def load_params(path, scenario, train_cfg):
    p = ec.init_params(scenario.n_agents, obs_dim(scenario.world, train_cfg.use_dest_delta),
                       train_cfg, seed=train_cfg.seed)
    with np.load(path) as blob:
        for name, t in p:
            if name not in blob or blob[name].shape != t.data.shape:
                raise ConfigError(f"checkpoint {path} does not match the configured network ({name})")
            t.data = blob[name].copy()
    return p


def seeds_of(cfg, args):
    if args.seed is not None:
        return [args.seed]
    return cfg.get("seeds", [0])


# ------------------------------------------------------------------ subcommands

def cmd_gen_map(cfg, args, out):
    sc = cfgmod.build_scenario(cfg)
    chash = cfgmod.config_hash(cfg)
    sc.world.save(out / "map.json")
    weak = sc.weak_mask()
    rows = [(x, y, repr(float(sc.world.channel.gains[x, y])), int(sc.world.buildings[x, y]),
             int(weak[x, y])) for y in range(sc.world.height) for x in range(sc.world.width)]
    write_csv(out / "cells.csv", chash, ["x", "y", "gain", "building", "weak"], rows)
    return {"weak_fraction": float(weak.mean()), "eta": sc.eta}


def cmd_gen_teacher(cfg, args, out):
    sc = cfgmod.build_scenario(cfg)
    tc = cfgmod.teacher_config(cfg)
    for key in ("teacher", "n", "l"):
        val = getattr(args, key)
        if val is not None:
            tc["source" if key == "teacher" else key] = val
    if tc["l"] > tc["n"]:
        raise ConfigError(f"config field teacher/l: L={tc['l']} exceeds N={tc['n']}")
    seed = seeds_of(cfg, args)[0]
    if tc["source"] == "planner":
        episodes = generate_planner_episodes(sc, tc["n"], temperature=tc["temperature"], seed=seed)
    else:
        if "endpoint" not in tc:
            raise ConfigError("config field teacher/endpoint: required for the llm teacher")
        client = HttpCompletionClient(tc["endpoint"], tc["max_tokens"], tc["timeout"])
        shots = []
        if "shots_file" in tc:
            shots = [tuple(p) for p in json.loads(Path(tc["shots_file"]).read_text())][:tc["k"]]
        episodes = [llm_teacher_episode(sc, client, tc["snr_db"], shots, seed=seed + n).episode
                    for n in range(tc["n"])]
    write_episodes(out / "episodes.jsonl", episodes)
    kn = select_top_l(episodes, sc, tc["l"])
    kn.save(out)
    chash = cfgmod.config_hash(cfg)
    write_csv(out / "selection.csv", chash,
              ["rank", "episode", "score", "refined_score", "max_length", "refined_max_length"],
              [(r, kn.picked[r], repr(float(kn.scores[r])), repr(float(kn.refined_scores[r])),
                max(episodes[kn.picked[r]].lengths), max(kn.episodes[r].lengths))
               for r in range(len(kn.picked))])
    scores = [episode_score(e, sc) for e in episodes]
    write_csv(out / "episodes.csv", chash, ["episode", "score", "finished", "max_length"],
              [(n, repr(float(s)), int(e.finished), max(e.lengths)) for n, (e, s) in
               enumerate(zip(episodes, scores))])
    return {"teacher": tc, "picked": kn.picked}


def _train_worker(seed, cfg, scheme, knowledge_dir, out):
    sc = cfgmod.build_scenario(cfg)
    chash = cfgmod.config_hash(cfg)
    sub = Path(out) / f"seed_{seed}"
    sub.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    if scheme == "ec":
        res = ec.train_ec(cfgmod.train_config(cfg, seed), sc)
        header = ["episode", "mean_return", "epsilon", "loss"]
    else:
        kn = TeacherKnowledge.load(knowledge_dir)
        res = lec.train_lec(cfgmod.kd_config(cfg, seed), sc, kn)
        header = ["episode", "mean_return", "epsilon", "loss", "kld_mean"]
    write_csv(sub / "curve.csv", chash, header,
              [[row[k] if isinstance(row[k], int) else repr(float(row[k])) for k in header]
               for row in res.curve])
    save_params(sub / "params.npz", res.params)
    return seed, time.time() - t0


def _check_knowledge(path, cfg):
    d = Path(path)
    if not (d / "selection.json").is_file() or not (d / "selected.jsonl").is_file():
        raise ConfigError(f"teacher knowledge not found in {d} (run gen-teacher first)")
    kn = TeacherKnowledge.load(d)
    n = cfgmod.build_scenario(cfg).n_agents
    if kn.n_agents != n:
        raise ConfigError(f"teacher knowledge has {kn.n_agents} UEs, scenario has {n}")


def cmd_train(scheme):
    def run(cfg, args, out):
        cfgmod.build_scenario(cfg)
        cfgmod.kd_config(cfg, 0) if scheme == "lec" else cfgmod.train_config(cfg, 0)
        knowledge = None
        if scheme == "lec":
            knowledge = str(Path(args.teacher_knowledge).resolve())
            _check_knowledge(knowledge, cfg)
        seeds = seeds_of(cfg, args)
        times = run_seeds(_train_worker, seeds, cfg, scheme, knowledge, str(out))
        return {"scheme": scheme, "teacher_knowledge": knowledge,
                "seed_wall_time_s": {str(s): round(t, 3) for s, t in times}}
    return run


def _summarize_curve(values, cfg):
    ev = cfgmod.eval_config(cfg)
    n = len(values)
    if n == 0:
        return None, float("nan"), float("nan")
    order = ev["poly_order"]
    window = ev.get("window") or metrics.desk_window(n, order)
    if window > n or window <= order:
        return None, float("nan"), float(np.mean(values))
    s = metrics.smooth(np.asarray(values), order, window)
    tail = max(1, n // 10)
    return metrics.convergence_episode(s, ev["fraction"]), float(s.max()), float(np.mean(values[-tail:]))


def cmd_eval(cfg, args, out):
    run = Path(args.run)
    if not (run / "manifest.json").is_file():
        raise ConfigError(f"{run} is not a run directory (no manifest.json)")
    run_manifest = json.loads((run / "manifest.json").read_text())
    run_cfg = json.loads((run / "config.json").read_text())
    if cfgmod.world_key(run_cfg) != cfgmod.world_key(cfg):
        raise ConfigError("eval config describes a different world/roster than the run")
    sc = cfgmod.build_scenario(cfg)
    ev = cfgmod.eval_config(cfg)
    chash = cfgmod.config_hash(cfg)
    scheme = run_manifest.get("scheme", "")
    per_ep, curves, summary = [], [], []
    for seed in run_manifest["seeds"]:
        sub = run / f"seed_{seed}"
        tcfg = cfgmod.train_config(run_cfg, seed)
        params = load_params(sub / "params.npz", sc, tcfg)
        rec = ec.evaluate(sc, params, tcfg, ev["episodes"], seed=ev["seed"])
        tt = rec.travel_times()
        finals = metrics.record_cppr(rec)
        rets = rec.returns()
        gains = sc.world.channel.gains
        for b in range(ev["episodes"]):
            lengths = [int(tt[b, j]) if rec.done[b, j] else None for j in range(sc.n_agents)]
            for j in range(sc.n_agents):
                per_ep.append((seed, b, j, int(tt[b, j]), int(rec.done[b, j]), repr(float(rets[b, j])),
                               repr(float(finals[b, j]))))
                if None in lengths:
                    continue
                pos = rec.positions[1:lengths[j] + 1, b, j]
                g = gains[pos[:, 0], pos[:, 1]]
                for t, v in enumerate(metrics.cppr_curve(g, sc.eta, lengths)):
                    curves.append((seed, b, j, t, repr(float(v))))
        _, rows = read_csv(sub / "curve.csv")
        conv, max_s, final = _summarize_curve([float(r["mean_return"]) for r in rows], run_cfg)
        complete = rec.done.all(axis=1)
        k = min(ev["top_k"], ev["episodes"])
        top = metrics.top_k_of_m(tt.max(axis=1), k)
        top_c = finals[top][complete[top]]
        summary.append((seed, scheme, "" if conv is None else conv, repr(max_s), repr(final),
                        repr(float(rets.mean())), repr(float(complete.mean())),
                        repr(float(tt.max(axis=1).mean())),
                        repr(float(np.nanmean(finals))) if complete.any() else "",
                        repr(float(top_c.mean())) if top_c.size else "",
                        repr(float(top_c.std())) if top_c.size else ""))
    write_csv(out / "episodes.csv", chash,
              ["seed", "episode", "ue", "travel_time", "arrived", "return", "final_cppr"], per_ep)
    write_csv(out / "cppr_curves.csv", chash, ["seed", "episode", "ue", "t", "cppr"], curves)
    write_csv(out / "summary.csv", chash,
              ["seed", "scheme", "convergence_episode", "max_smoothed", "final_return",
               "eval_return", "complete_rate", "mean_travel_time", "cppr_mean", "cppr_topk_mean",
               "cppr_topk_std"], summary)
    return {"scheme": scheme, "run": str(run.resolve()), "seeds": run_manifest["seeds"]}


def _run_stats(d):
    """Per-run aggregate for compare: (scheme, world_key, seeds, mean
    convergence or None, mean final return, mean CPPR or None)."""
    d = Path(d)
    if not (d / "manifest.json").is_file():
        raise ConfigError(f"{d} is not a run or eval directory")
    man = json.loads((d / "manifest.json").read_text())
    cfg = json.loads((d / "config.json").read_text())
    convs, finals, cpprs = [], [], []
    if (d / "summary.csv").is_file():
        _, rows = read_csv(d / "summary.csv")
        for r in rows:
            convs.append(int(r["convergence_episode"]) if r["convergence_episode"] else None)
            finals.append(float(r["final_return"]))
            if r["cppr_mean"]:
                cpprs.append(float(r["cppr_mean"]))
    else:
        for seed in man["seeds"]:
            if not (d / f"seed_{seed}" / "curve.csv").is_file():
                raise ConfigError(f"{d} has no curve for seed {seed}")
            _, rows = read_csv(d / f"seed_{seed}" / "curve.csv")
            conv, _, final = _summarize_curve([float(r["mean_return"]) for r in rows], cfg)
            convs.append(conv)
            finals.append(final)
    conv = None if not convs or None in convs else float(np.mean(convs))
    return {"dir": str(d), "scheme": man.get("scheme", ""), "world_key": man["world_key"],
            "seeds": man["seeds"], "convergence": conv, "n_converged": sum(c is not None for c in convs),
            "final_return": float(np.mean(finals)) if finals else float("nan"),
            "cppr": float(np.mean(cpprs)) if cpprs else None}


def cmd_compare(cfg, args, out):
    if len(args.runs) < 2:
        raise ConfigError("compare needs at least two run directories")
    stats = [_run_stats(d) for d in args.runs]
    keys = {s["world_key"] for s in stats}
    if len(keys) > 1:
        raise ConfigError("runs use different worlds or UE rosters; refusing to compare")
    chash = cfgmod.config_hash({"compare": [s["dir"] for s in stats]})
    fmt = lambda v: "" if v is None else repr(v)
    write_csv(out / "summary.csv", chash,
              ["run", "scheme", "seeds", "convergence_episode", "n_converged", "final_return", "cppr_mean"],
              [(s["dir"], s["scheme"], " ".join(map(str, s["seeds"])), fmt(s["convergence"]),
                s["n_converged"], repr(s["final_return"]), fmt(s["cppr"])) for s in stats])
    rows = []
    for i in range(len(stats)):
        for k in range(i + 1, len(stats)):
            a, b = stats[i], stats[k]
            if a["scheme"] == "lec" and b["scheme"] == "ec":
                a, b = b, a
            red = metrics.reduction(a["convergence"], b["convergence"])
            rows.append((a["dir"], b["dir"], fmt(a["convergence"]), fmt(b["convergence"]), fmt(red)))
    write_csv(out / "reductions.csv", chash,
              ["run_a", "run_b", "convergence_a", "convergence_b", "reduction"], rows)
    return {"runs": [s["dir"] for s in stats]}


# ------------------------------------------------------------------ entry

def build_parser():
    p = argparse.ArgumentParser(prog="lecnav", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", help="output directory (default: config 'out')")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the config list")
        sp.add_argument("--force", action="store_true", help="write into a non-empty directory")

    common(sub.add_parser("gen-map", help="write the map and per-cell gains"))
    sp = sub.add_parser("gen-teacher", help="generate and select teacher trajectories")
    common(sp)
    sp.add_argument("--teacher", choices=["planner", "llm"])
    sp.add_argument("--n", type=int)
    sp.add_argument("--l", type=int)
    common(sub.add_parser("run-ec", help="train emergent communication"))
    sp = sub.add_parser("run-lec", help="train language-guided emergent communication")
    common(sp)
    sp.add_argument("--teacher-knowledge", required=True, help="gen-teacher output directory")
    sp = sub.add_parser("eval", help="greedy evaluation, CPPR and convergence of a run")
    common(sp)
    sp.add_argument("--run", required=True, help="run-ec/run-lec output directory")
    sp = sub.add_parser("compare", help="convergence reduction table across runs")
    common(sp, config=False)
    sp.add_argument("runs", nargs="+")
    return p


COMMANDS = {"gen-map": cmd_gen_map, "gen-teacher": cmd_gen_teacher, "run-ec": cmd_train("ec"),
            "run-lec": cmd_train("lec"), "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    try:
        cfg = cfgmod.load(args.config) if getattr(args, "config", None) else {}
        out = args.out or cfg.get("out")
        if not out:
            raise ConfigError("no output directory: pass --out or set 'out' in the config")
        out = prepare_out(out, args.force)
        extra = COMMANDS[args.command](cfg, args, out) or {}
        seeds = extra.pop("seeds", None) or (seeds_of(cfg, args) if cfg else [])
        write_manifest(out, cfg, args.command, seeds, time.time() - t0, **extra)
    except (ConfigError, SelectionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
