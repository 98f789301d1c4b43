"""Command-line entry point: ``specflow <command> [options]``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import complexity, config as cfgmod, evaluation, formats, likelihood, manifold, synth, training
from .errors import (
    BasisMismatchError,
    ConfigParseError,
    FormatVersionError,
    SpecflowError,
)

FORMAT_SCORES = "specflow-scores-v1"
FORMAT_TRAIN_REPORT = "specflow-train-report-v1"
FORMAT_ROC = "specflow-roc-v1"
FORMAT_HIST = "specflow-hist-v1"
FORMAT_GAP = "specflow-gap-v1"
FORMAT_SWEEP = "specflow-sweep-v1"
FORMAT_TRAJ = "specflow-traj-v1"
FORMAT_WEIGHTS = "specflow-weights-v1"
FORMAT_REPORT = "specflow-report-v1"

SCORE_COLUMNS = [
    "seed", "anomaly_tag", "log_likelihood", "score", "z0_norm", "steps", "method",
    "is_critical", "trigger", "min_accel", "max_yaw_rate",
]


def _floats(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigParseError(f"cannot parse number list {text!r}") from None


def _load_config(path: str | None) -> cfgmod.RunConfig:
    return cfgmod.load(path) if path else cfgmod.RunConfig()


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# pipeline steps shared by the subcommands and ``repro``


def write_weights(scenarios, path, alpha: float) -> None:
    rows = []
    for s in scenarios:
        cw = complexity.complexity_weight(s.future_m(), alpha)
        rows.append((s.seed, cw.tortuosity, cw.jerk_energy, cw.weight))
    formats.write_csv(path, FORMAT_WEIGHTS, ["seed", "tau", "jerk", "weight"], rows)


def write_train_report(report: training.TrainReport, path) -> None:
    rows = [
        (r.epoch, r.flow_loss, r.coord_rmse_m, r.grad_norm_mean, r.grad_norm_max, r.lr, r.flow_share, r.coord_share, r.coord_norm_ratio)
        for r in report.epochs
    ]
    header = [
        "epoch", "flow_loss", "coord_rmse_m", "grad_norm_mean", "grad_norm_max", "lr",
        "flow_grad_share", "coord_grad_share", "coord_norm_ratio",
    ]
    formats.write_csv(path, FORMAT_TRAIN_REPORT, header, rows)


def score_rows(ckpt, basis, scenarios, steps: int, chunk: int = 256) -> list[tuple]:
    res = likelihood.score_scenarios(ckpt, basis, scenarios, steps=steps, chunk=chunk)
    rows = []
    for s, ll, z0 in zip(scenarios, res["log_likelihood"], res["z0"]):
        g = evaluation.label_scenario(s)
        rows.append(
            (s.seed, s.anomaly_tag, float(ll), float(-ll), float(np.linalg.norm(z0)), steps, "exact",
             int(g.is_critical), g.trigger, g.min_accel, g.max_yaw_rate)
        )
    return rows


def read_scored(path) -> tuple[list[evaluation.ScoredScenario], np.ndarray]:
    rows = formats.read_csv(path, FORMAT_SCORES)
    scored, kin = [], []
    for r in rows:
        g = evaluation.GoldenLabel(
            is_critical=bool(int(r["is_critical"])),
            trigger=r["trigger"],
            min_accel=float(r["min_accel"]),
            max_yaw_rate=float(r["max_yaw_rate"]),
        )
        scored.append(evaluation.ScoredScenario(int(r["seed"]), r["anomaly_tag"], float(r["log_likelihood"]), g))
        kin.append(-g.min_accel)
    return scored, np.array(kin)


def write_eval(scored, kin_scores, out: Path, config_echo: dict | None = None, n_bins: int = 40,
               nominal_fpr: float = evaluation.NOMINAL_FPR) -> dict:
    rep = evaluation.evaluate(scored, kin_scores, nominal_fpr, n_bins)
    hist = rep.histogram
    out.parent.mkdir(parents=True, exist_ok=True)
    d = {"format_version": FORMAT_REPORT, **rep.to_dict()}
    if config_echo is not None:
        d["config"] = config_echo
    _json_dump(d, out)
    if rep.roc is not None:
        formats.write_csv(
            out.parent / "roc.csv", FORMAT_ROC, ["fpr", "tpr", "threshold"],
            zip(rep.roc.fpr.tolist(), rep.roc.tpr.tolist(), rep.roc.thresholds.tolist()),
        )
    formats.write_csv(
        out.parent / "hist.csv", FORMAT_HIST, ["bin_lo", "bin_hi", "nominal", "critical"],
        ((float(a), float(b), int(n), int(c)) for a, b, n, c in zip(hist.edges[:-1], hist.edges[1:], hist.nominal_counts, hist.critical_counts)),
    )
    formats.write_csv(
        out.parent / "gap.csv", FORMAT_GAP, ["anomaly_tag", "count", "heuristic_hit_rate", "median_score", "score_hit_rate"],
        ((r.tag, r.count, r.heuristic_hit_rate, r.median_score, r.score_hit_rate) for r in rep.gap_table),
    )
    return d


def write_sweep(rows: list[likelihood.SweepRow], path) -> None:
    formats.write_csv(
        path, FORMAT_SWEEP,
        ["steps", "mean_log_likelihood", "deviation_variance", "mean_abs_deviation", "latency_per_sample_s"],
        ((r.steps, r.mean_log_likelihood, r.deviation_variance, r.mean_abs_deviation, r.latency_per_sample) for r in rows),
    )


def write_traversal(basis, component: int, offsets, out_dir: Path) -> list[Path]:
    """``component`` is 1-based (PC1 is the leading mode)."""
    if not 1 <= component <= basis.k:
        raise ValueError(f"--pc must be in [1, {basis.k}], got {component}")
    out_dir.mkdir(parents=True, exist_ok=True)
    trajs = manifold.traverse(basis, component - 1, offsets)
    paths = []
    for off, traj in zip(offsets, trajs):
        p = out_dir / f"pc{component}_offset_{format(off, 'g')}.csv"
        m = traj * synth.SCALE
        formats.write_csv(p, FORMAT_TRAJ, ["t_s", "x_m", "y_m"], ((float(t), float(x), float(y)) for t, (x, y) in zip(synth.FUTURE_TIMES, m)))
        paths.append(p)
    return paths


def _check_basis(ckpt: training.Checkpoint, basis: manifold.SpectralBasis) -> None:
    if ckpt.basis_hash != basis.digest():
        raise BasisMismatchError(f"checkpoint expects basis {ckpt.basis_hash[:12]}, got {basis.digest()[:12]}")


# ----------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    rc = _load_config(args.config)
    seed = rc.seed if args.seed is None else args.seed
    ds = synth.build_dataset(rc.generate, seed)
    formats.write_dataset(ds, args.out)
    if args.emit_weights:
        write_weights(ds.train, args.emit_weights, rc.train.alpha)
    return 0


def cmd_fit(args) -> int:
    ds = formats.read_dataset(args.dataset)
    k = args.k if args.k is not None else _load_config(args.config).section("fit-manifold")["k"]
    b = manifold.fit([s.future for s in ds.train if s.anomaly_tag == synth.NOMINAL], k)
    formats.write_basis(b, args.out)
    return 0


def cmd_train(args) -> int:
    rc = _load_config(args.config)
    ds = formats.read_dataset(args.dataset)
    basis = formats.read_basis(args.basis)
    ckpt, report = training.train(ds.train, basis, rc.train)
    formats.write_checkpoint(ckpt, args.out)
    write_train_report(report, args.report or str(Path(args.out).with_suffix(".report.csv")))
    if args.emit_weights:
        write_weights(ds.train, args.emit_weights, rc.train.alpha)
    return 0


def cmd_score(args) -> int:
    ckpt = formats.read_checkpoint(args.ckpt)
    basis = formats.read_basis(args.basis)
    _check_basis(ckpt, basis)
    ds = formats.read_dataset(args.dataset)
    scenarios = ds.val if args.split == "val" else ds.train
    rows = score_rows(ckpt, basis, scenarios, args.steps)
    formats.write_csv(args.out, FORMAT_SCORES, SCORE_COLUMNS, rows)
    return 0


def cmd_eval(args) -> int:
    scored, kin = read_scored(args.scores)
    write_eval(scored, kin, Path(args.out), n_bins=args.bins, nominal_fpr=args.nominal_fpr)
    return 0


def cmd_traverse(args) -> int:
    basis = formats.read_basis(args.basis)
    write_traversal(basis, args.pc, _floats(args.offsets), Path(args.out))
    return 0


def cmd_sweep(args) -> int:
    ckpt = formats.read_checkpoint(args.ckpt)
    basis = formats.read_basis(args.basis)
    _check_basis(ckpt, basis)
    ds = formats.read_dataset(args.dataset)
    grid = [int(g) for g in _floats(args.grid)]
    rows = likelihood.ode_sweep(ckpt, basis, ds.val[: args.n], grid)
    write_sweep(rows, args.out)
    return 0


def run_pipeline(rc: cfgmod.RunConfig, out: Path) -> dict:
    """generate -> fit-manifold -> train -> score -> eval -> sweep-ode -> traverse."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(cfgmod.dumps(rc), encoding="utf-8")
    ds = synth.build_dataset(rc.generate, rc.seed)
    formats.write_dataset(ds, out / "dataset.ndjson")
    basis = manifold.fit([s.future for s in ds.train], rc.section("fit-manifold")["k"])
    formats.write_basis(basis, out / "basis.pca")
    ckpt, report = training.train(ds.train, basis, rc.train)
    formats.write_checkpoint(ckpt, out / "model.ckpt")
    write_train_report(report, out / "train_report.csv")
    sc = rc.section("score")
    rows = score_rows(ckpt, basis, ds.val, sc["steps"], sc["chunk"])
    formats.write_csv(out / "scores.csv", FORMAT_SCORES, SCORE_COLUMNS, rows)
    scored, kin = read_scored(out / "scores.csv")
    es = rc.section("eval")
    rep = write_eval(scored, kin, out / "report.json", rc.to_dict(), es["n_bins"], es["nominal_fpr"])
    sw = rc.section("sweep-ode")
    write_sweep(likelihood.ode_sweep(ckpt, basis, ds.val[: sw["n_scenarios"]], sw["grid"]), out / "sweep.csv")
    tr = rc.section("traverse")
    for c in tr["components"]:
        if c <= basis.k:
            write_traversal(basis, int(c), [float(o) for o in tr["offsets"]], out / "traverse")
    return rep


def cmd_repro(args) -> int:
    rc = _load_config(args.config)
    run_pipeline(rc, Path(args.out))
    return 0


def validate_artifacts(paths: Sequence[str]) -> list[dict]:
    """Check format versions, basis/checkpoint linkage and dataset headers."""
    results = []
    bases, ckpts = {}, {}
    for p in paths:
        entry = {"path": str(p), "ok": True, "kind": "unknown", "error": None}
        try:
            with open(p, encoding="utf-8") as fh:
                first = fh.readline().rstrip("\n")
            if first.startswith("{") and formats.FORMAT_DS in first:
                entry["kind"] = "dataset"
                formats.read_dataset(p)
            elif first == formats.FORMAT_PCA:
                entry["kind"] = "basis"
                bases[p] = formats.read_basis(p)
            elif first.startswith("specflow-ckpt-"):
                entry["kind"] = "checkpoint"
                ckpts[p] = formats.read_checkpoint(p)
            elif first.startswith(formats.FORMAT_CSV_PREFIX + "specflow-"):
                entry["kind"] = "table"
            elif first.startswith("{") and json.loads(Path(p).read_text(encoding="utf-8")).get("format_version", "").startswith("specflow-"):
                entry["kind"] = "json"
            else:
                raise FormatVersionError(f"unrecognized format header {first[:40]!r}")
        except SpecflowError as exc:
            entry.update(ok=False, error=exc.code, message=str(exc))
        except (OSError, ValueError, UnicodeDecodeError) as exc:
            code = {"checkpoint": "CKPT_CORRUPT", "basis": "BASIS_CORRUPT", "dataset": "DS_CORRUPT"}.get(entry["kind"], "UNREADABLE")
            entry.update(ok=False, error=code, message=str(exc))
        results.append(entry)
    digests = {b.digest() for b in bases.values()}
    for p, ck in ckpts.items():
        if bases and ck.basis_hash not in digests:
            for e in results:
                if e["path"] == str(p):
                    e.update(ok=False, error="BASIS_MISMATCH", message="no supplied basis matches this checkpoint")
    return results


def cmd_validate(args) -> int:
    results = validate_artifacts(args.paths)
    for r in results:
        status = "ok" if r["ok"] else f"FAIL {r['error']}"
        print(f"{r['path']}\t{r['kind']}\t{status}")
    bad = [r for r in results if not r["ok"]]
    if bad:
        raise SpecflowError(f"{len(bad)} artifact(s) failed validation", code=bad[0]["error"])
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specflow", description="Flow-matching trajectory anomaly detection.")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default: $SPECFLOW_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--emit-weights", help="CSV of per-scenario complexity weights")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit-manifold", help="fit the PCA basis on nominal training futures")
    f.add_argument("--dataset", required=True)
    f.add_argument("--k", type=int)
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("train", help="train the conditional flow")
    t.add_argument("--dataset", required=True)
    t.add_argument("--basis", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--report")
    t.add_argument("--emit-weights")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="exact-trace log-likelihood of every scenario")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--basis", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--split", choices=("val", "train"), default="val")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="AUC, histogram and gap table from a scores file")
    e.add_argument("--scores", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--bins", type=int, default=40)
    e.add_argument("--nominal-fpr", type=float, default=evaluation.NOMINAL_FPR, help="operating point of the gap table")
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("traverse", help="dump trajectories along one principal component")
    tr.add_argument("--basis", required=True)
    tr.add_argument("--pc", type=int, required=True, help="1-based component index")
    tr.add_argument("--offsets", default="-2,-1,0,1,2")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_traverse)

    sw = sub.add_parser("sweep-ode", help="likelihood stability versus RK4 step count")
    sw.add_argument("--ckpt", required=True)
    sw.add_argument("--basis", required=True)
    sw.add_argument("--dataset", required=True)
    sw.add_argument("--grid", default="5,10,20,50")
    sw.add_argument("--n", type=int, default=200)
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep)

    r = sub.add_parser("repro", help="run the whole pipeline from one config")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_repro)

    v = sub.add_parser("validate", help="check artifact versions and linkage")
    v.add_argument("paths", nargs="+")
    v.set_defaults(func=cmd_validate)
    return p


def _thread_count(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SPECFLOW_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigParseError(f"SPECFLOW_THREADS must be an integer, got {env!r}") from None
    return None


def _join_list_flags(argv: list[str]) -> list[str]:
    """Let ``--offsets -2,-1,0`` through: argparse would read the value as a flag."""
    out: list[str] = []
    it = iter(argv)
    for a in it:
        if a in ("--offsets", "--grid"):
            nxt = next(it, None)
            out.append(a if nxt is None else f"{a}={nxt}")
        else:
            out.append(a)
    return out


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_list_flags(list(sys.argv[1:] if argv is None else argv)))
    try:
        threads = _thread_count(args)
        with threadpool_limits(limits=threads):
            return int(args.func(args))
    except SpecflowError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"ERROR {type(exc).__name__.upper()}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
