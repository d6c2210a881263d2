"""Command line front end: ``safedoe run | compare | oracle``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 campaign
aborted (a checkpoint is written next to the trace).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .campaign import METHODS, run_campaign
from .config import build_case, bundled, dumps, load, resolve, apply_env
from .errors import CampaignAborted, ConfigError, SafeDoeError
from .report import (compare, compare_markdown, load_results, sha256, write_aggregate, write_campaign,
                     write_checkpoint, write_compare_csv)

log = logging.getLogger("safedoe")


def _resolved_config(ref):
    """Resolved config dict from a TOML path or a bundled case name, with env overrides."""
    p = Path(ref)
    if p.suffix == ".toml" or p.exists():
        return load(p, os.environ)
    return resolve(apply_env(bundled(ref), os.environ))


def parse_seeds(seed, seeds):
    """``--seeds`` is a count (N seeds from ``seed``), a list "1,5,9" or a range "0-19"."""
    if seeds is None:
        return [seed]
    text = str(seeds).strip()
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    if "-" in text[1:]:
        a, b = text.split("-", 1)
        return list(range(int(a), int(b) + 1))
    n = int(text)
    if n < 1:
        raise ValueError("--seeds needs a positive count")
    return list(range(seed, seed + n))


def _one(job):
    cfg, method, seed, out_dir, max_iter = job
    case = build_case(cfg)
    t0 = time.perf_counter()
    try:
        state = run_campaign(case, method, seed=seed, max_iter=max_iter)
    except CampaignAborted as exc:
        path = write_checkpoint(exc.checkpoint, out_dir)
        return {"aborted": True, "error": str(exc), "checkpoint": str(path)}
    return write_campaign(state, case, out_dir, wall_s=time.perf_counter() - t0)


def cmd_run(args):
    cfg = _resolved_config(args.config)
    if args.max_iters is not None:
        if args.max_iters < 0:
            raise ConfigError("must be >= 0", "campaign.max_iter")
        cfg["campaign"]["max_iter"] = args.max_iters
    seed = cfg["campaign"]["seed"] if args.seed is None else args.seed
    seeds = parse_seeds(seed, args.seeds)
    methods = list(METHODS) if args.method == "all" else [args.method]
    build_case(cfg)
    if args.dry_run:
        sys.stdout.write(dumps(cfg))
        print(f"# methods: {', '.join(methods)}; seeds: {seeds}")
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dumps(cfg))
    single = len(methods) == 1 and len(seeds) == 1
    jobs = []
    for method in methods:
        for s in seeds:
            d = out if single else out / method / f"seed_{s:03d}"
            jobs.append((cfg, method, s, d, cfg["campaign"]["max_iter"]))
    manifest = {
        "version": __version__,
        "config": str(args.config),
        "resolved_config": "config.toml",
        "case": cfg["plant"]["name"],
        "methods": methods,
        "seeds": seeds,
        "out": str(out),
        "runs": [str(Path(j[3]).relative_to(out)) or "." for j in jobs],
        "checksums": {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_one, jobs))
    else:
        results = [_one(j) for j in jobs]
    aborted = [r for r in results if r.get("aborted")]
    done = [r for r in results if not r.get("aborted")]
    if not single and done:
        write_aggregate(done, out / "aggregate.csv")
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in ("manifest.json", "timing.ndjson"))
    manifest["checksums"] = {str(p.relative_to(out)): sha256(p) for p in files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for r in done:
        print(f"{r['case']} {r['method']} seed={r['seed']}: {r['termination']}, "
              f"{r['n_designed']} designed, g1 violations {r['violations'][0]}, chi2 {r['final_chi2']}")
    if aborted:
        for r in aborted:
            print(f"campaign aborted: {r['error']}; checkpoint: {r['checkpoint']}", file=sys.stderr)
        return 3
    return 0


def cmd_compare(args):
    if len(args.dirs) < 2:
        raise SafeDoeError("compare needs at least two trace sets")
    rows = compare(args.dirs)
    md = compare_markdown(rows)
    sys.stdout.write(md)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_compare_csv(rows, out / "compare.csv")
        (out / "compare.md").write_text(md)
    return 0


def cmd_oracle(args):
    from . import oracles

    if args.name == "cantelli":
        if not args.args:
            raise SafeDoeError("usage: oracle cantelli EPS")
        res = oracles.cantelli_oracle(float(args.args[0]))
        print(f"cantelli r: oracle {res['oracle']:.6f}  library {res['library']:.6f}  rel_err {res['rel_err']:.2e}")
    elif args.name == "gp2pt":
        for row in oracles.gp_two_point_oracle(args.args[0] if args.args else None):
            print(f"x={row['x']}: oracle mean/var {row['oracle'][0]:.12g} {row['oracle'][1]:.12g}  "
                  f"library {row['library'][0]:.12g} {row['library'][1]:.12g}  rel_err {row['rel_err']:.2e}")
    elif args.name == "mc-propagate":
        res = oracles.mc_propagate_oracle(args.args[0] if args.args else None, samples=args.samples)
        print(f"mean: oracle {res['oracle'][0]:.6g}  library {res['library'][0]:.6g}  rel_err {res['rel_err'][0]:.2e}")
        print(f"var:  oracle {res['oracle'][1]:.6g}  library {res['library'][1]:.6g}  rel_err {res['rel_err'][1]:.2e}")
    elif args.name == "fd-sens":
        case = build_case(_resolved_config(args.args[0] if args.args else "case1"))
        u = case.preliminary[0]
        # the fitted model's reactions are the leading plant reactions
        theta = case.plant.theta[:case.model.n_theta]
        res = oracles.fd_sensitivity_oracle(case.model, u, theta)
        print(f"sensitivities at u={[float(x) for x in u]}: max rel_err {res['rel_err']:.2e}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="safedoe", description="Safe model-based design of experiments campaigns")
    p.add_argument("--version", action="version", version=f"safedoe {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run seeded campaigns")
    r.add_argument("--config", required=True, help="TOML file or bundled case name (case1, case2)")
    r.add_argument("--method", choices=list(METHODS) + ["all"], default="gp")
    r.add_argument("--seed", type=int, default=None, help="campaign seed (default: config value)")
    r.add_argument("--seeds", default=None, help="count N, list 1,2,3 or range 0-19")
    r.add_argument("--out", default="runs")
    r.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    r.add_argument("--max-iters", type=int, default=None)
    r.add_argument("--jobs", type=int, default=1, help="parallel campaign processes")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare trace sets")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_compare)

    o = sub.add_parser("oracle", help="run an independent check")
    o.add_argument("name", choices=["cantelli", "gp2pt", "mc-propagate", "fd-sens"])
    o.add_argument("args", nargs="*")
    o.add_argument("--samples", type=int, default=100_000)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SafeDoeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
