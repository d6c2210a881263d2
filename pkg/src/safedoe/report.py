"""Campaign artifacts: trace, summary tables, plot data and suite comparison."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import SafeDoeError
from .estimation import t_quantile


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if x is None else x for x in row])


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def campaign_result(state, case, wall_s=None):
    """Headline numbers of one finished campaign."""
    last = state.reports[-1] if state.reports else None
    viol = state.violations()
    n = len(state.designed)
    return {
        "case": case.name,
        "method": state.method,
        "seed": state.seed,
        "termination": state.termination,
        "iterations": state.iterations,
        "n_designed": n,
        "n_experiments": len(state.measurements),
        "violations": [int(v) for v in viol],
        "violation_rate": [float(v) / n if n else 0.0 for v in viol],
        "final_chi2": None if last is None else last["chi2_sample"],
        "chi2_ref": None if last is None else last["chi2_ref"],
        "passed": bool(last and last["chi2_pass"] and all(last["t_pass"])),
        "theta": None if state.theta is None else [float(x) for x in state.theta],
        "wall_s": wall_s,
    }


def write_campaign(state, case, out_dir, wall_s=None):
    """Write trace.ndjson, timing.ndjson, summary.csv, result.json and plotdata/*.csv."""
    out = Path(out_dir)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    (out / "trace.ndjson").write_text(state.trace_lines())
    (out / "timing.ndjson").write_text("".join(json.dumps(t) + "\n" for t in state.timing))
    names = list(case.model.param_names)
    gnames = [c.name for c in case.constraints]

    # per-iteration estimates and statistics, one row per fit
    header = ["fit", "n_experiments"] + names + [f"t_{p}" for p in names] + ["t_ref", "chi2_sample", "chi2_ref",
                                                                               "passed"]
    rows = []
    for i, rep in enumerate(state.reports):
        n_exp = state.n_preliminary + i
        if rep is None:
            rows.append([i, n_exp] + [None] * (2 * len(names) + 4))
            continue
        rows.append([i, n_exp] + rep["theta"] + rep["t_values"]
                    + [rep["t_ref"], rep["chi2_sample"], rep["chi2_ref"], rep["chi2_pass"] and all(rep["t_pass"])])
    _write_csv(out / "summary.csv", header, rows)

    # constraint values against experiment index, with the GP band where one exists
    by_index = {rec.get("index"): rec for rec in state.trace if rec.get("index") is not None}
    rows = []
    for m in state.measurements:
        rec = by_index.get(m.index, {})
        row = [m.index, m.index >= state.n_preliminary]
        for i in range(len(gnames)):
            row.append(float(m.g[i]))
            if "gp_mean" in rec:
                mu, sd = rec["gp_mean"][i], np.sqrt(max(rec["gp_var"][i], 0.0))
                row += [mu, mu - 3 * sd, mu + 3 * sd]
            else:
                row += [None, None, None]
        rows.append(row)
    header = ["experiment", "designed"]
    for g in gnames:
        header += [g, f"{g}_gp_mean", f"{g}_gp_lower3", f"{g}_gp_upper3"]
    _write_csv(out / "plotdata" / "constraints.csv", header, rows)

    # parameter trajectories with 95 % intervals
    rows = []
    for i, rep in enumerate(state.reports):
        if rep is None:
            continue
        half = t_quantile(1 - rep["alpha"] / 2, rep["dof"]) * np.sqrt(np.clip(rep["cov_diag"], 0, None))
        rows.append([i, state.n_preliminary + i] + [x for pair in zip(rep["theta"], half) for x in pair])
    header = ["fit", "n_experiments"] + [x for p in names for x in (p, f"{p}_ci95")]
    _write_csv(out / "plotdata" / "parameters.csv", header, rows)

    # trust-region radii (GP-MBDoE only)
    rows = [[rec["iteration"]] + rec["radii_after"] for rec in state.trace if "radii_after" in rec]
    _write_csv(out / "plotdata" / "radius.csv", ["iteration"] + [f"R_{g}" for g in gnames], rows)

    # design-variable trajectory in physical units
    rows = [[m.index, m.index >= state.n_preliminary] + [float(x) for x in m.u] for m in state.measurements]
    _write_csv(out / "plotdata" / "designs.csv", ["experiment", "designed"] + list(case.space.names), rows)

    result = campaign_result(state, case, wall_s)
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def write_checkpoint(state, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "checkpoint.json"
    path.write_text(json.dumps(state.to_dict(), indent=2, default=_json_default) + "\n")
    (out / "trace.ndjson").write_text(state.trace_lines())
    return path


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not serializable: {type(x)}")


AGG_HEADER = ["case", "method", "seed", "termination", "n_designed", "violations_g1", "violation_rate_g1",
              "final_chi2", "passed", "wall_s"]


def aggregate_rows(results):
    return [[r["case"], r["method"], r["seed"], r["termination"], r["n_designed"], r["violations"][0],
             r["violation_rate"][0], r["final_chi2"], r["passed"], r["wall_s"]] for r in results]


def write_aggregate(results, path):
    _write_csv(path, AGG_HEADER, aggregate_rows(results))


def load_results(path):
    """``result.json`` records under a suite or campaign directory."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.rglob("result.json"))
    out = []
    for f in files:
        rec = json.loads(f.read_text())
        timing = f.parent / "timing.ndjson"
        if rec.get("wall_s") is None and timing.exists():
            lines = [json.loads(x) for x in timing.read_text().splitlines() if x.strip()]
            rec["wall_s"] = sum(t.get("total_s", t.get("estimate_s", 0) + t.get("design_s", 0)) for t in lines)
        out.append(rec)
    return out


def method_table(results):
    """Per-method medians and pooled violation rates."""
    table = {}
    for method in sorted({r["method"] for r in results}):
        rs = [r for r in results if r["method"] == method]
        n = sum(r["n_designed"] for r in rs)
        v = sum(r["violations"][0] for r in rs)
        chi = [r["final_chi2"] for r in rs if r["final_chi2"] is not None]
        wall = [r["wall_s"] for r in rs if r.get("wall_s") is not None]
        table[method] = {
            "campaigns": len(rs),
            "median_chi2": float(np.median(chi)) if chi else None,
            "violations": v,
            "designed": n,
            "violation_rate": v / n if n else 0.0,
            "median_experiments": float(np.median([r["n_experiments"] for r in rs])),
            "wall_s": float(np.sum(wall)) if wall else None,
        }
    return table


COMPARE_COLUMNS = ["median_chi2", "violations", "designed", "violation_rate", "median_experiments", "wall_s"]


def compare(dirs):
    """Per-method tables for each trace set plus deltas against the first set.

    Raises SafeDoeError when the sets mix case studies.
    """
    sets = []
    for d in dirs:
        res = load_results(d)
        if not res:
            raise SafeDoeError(f"{d}: no campaign results found")
        sets.append((str(d), res))
    cases = {r["case"] for _, res in sets for r in res}
    if len(cases) > 1:
        raise SafeDoeError(f"cannot compare different case studies: {sorted(cases)}")
    rows = []
    base = method_table(sets[0][1])
    for name, res in sets:
        tab = method_table(res)
        for method, stats in tab.items():
            row = {"set": name, "method": method, **stats}
            ref = base.get(method)
            for col in ("median_chi2", "violation_rate", "median_experiments"):
                a, b = stats[col], None if ref is None else ref[col]
                row[f"delta_{col}"] = None if a is None or b is None else a - b
            rows.append(row)
    return rows


def compare_markdown(rows):
    cols = ["set", "method"] + COMPARE_COLUMNS + ["delta_median_chi2", "delta_violation_rate"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = []
        for c in cols:
            x = r.get(c)
            cells.append("" if x is None else (f"{x:.4g}" if isinstance(x, float) else str(x)))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_compare_csv(rows, path):
    cols = list(rows[0].keys())
    _write_csv(path, cols, [[r[c] for c in cols] for r in rows])
