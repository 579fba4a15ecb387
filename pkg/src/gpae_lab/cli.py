"""gpae-lab command line.

    gpae-lab <verify|train|compare|gap|gradcheck> --config PATH --out DIR [--seed N] [--single-thread]

Exit codes: 0 success, 1 a certified claim failed (or a run aborted), 2 usage
or configuration error.
"""

from __future__ import annotations

import os
import sys

if "--single-thread" in sys.argv:
    # must happen before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"

import argparse
import hashlib
import json
import logging
from pathlib import Path

log = logging.getLogger("gpae_lab")

EXIT_OK, EXIT_CLAIM, EXIT_CONFIG = 0, 1, 2
OUT_ENV = "GPAE_LAB_OUT"


class ConfigProblem(Exception):
    pass


def load_config(path: str | None) -> tuple[dict, str]:
    """Parse a JSON config; returns (dict, short hash of the raw text)."""
    if path is None:
        return {}, hashlib.sha256(b"{}").hexdigest()[:12]
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigProblem(f"{path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigProblem(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigProblem(f"{path}: top level must be a JSON object")
    return data, hashlib.sha256(text.encode()).hexdigest()[:12]


def _check_keys(cfg: dict, defaults: dict, where: str):
    unknown = sorted(set(cfg) - set(defaults))
    if unknown:
        raise ConfigProblem(f"{where}: unknown field(s) {', '.join(unknown)}")


def _meta(cfg_hash: str) -> str:
    from . import __version__
    return f"config={cfg_hash} version={__version__}"


def _write(out: Path, name: str, text: str):
    (out / name).write_text(text)


def cmd_verify(cfg: dict, cfg_hash: str, out: Path, seed) -> int:
    from .experiments import VERIFY_DEFAULTS, run_verify

    _check_keys(cfg, VERIFY_DEFAULTS, "verify config")
    if seed is not None:
        cfg["seed"] = seed
    certs = run_verify(cfg)
    cdir = out / "certificates"
    cdir.mkdir(exist_ok=True)
    summary = {"config": cfg_hash, "claims": {}}
    for c in certs:
        _write(cdir, f"{c.claim}.json", json.dumps(c.to_dict(), indent=2, sort_keys=True) + "\n")
        summary["claims"][c.claim] = {"passed": c.passed, "advisory": c.advisory}
        status = "PASS" if c.passed else ("ADVISORY-FAIL" if c.advisory else "FAIL")
        print(f"{status:14s} {c.claim}")
    ok = all(c.passed for c in certs if not c.advisory)
    summary["all_passed"] = ok
    _write(out, "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if ok else EXIT_CLAIM


def cmd_train(cfg: dict, cfg_hash: str, out: Path, seed, deterministic: bool) -> int:
    from .trainer import ConfigError, TrainConfig, train, write_checkpoint

    if seed is not None:
        cfg["seed"] = seed
    try:
        tc = TrainConfig.from_dict(cfg)
    except (ConfigError, TypeError) as exc:
        raise ConfigProblem(f"train config: {exc}") from exc
    res = train(tc, deterministic=deterministic)
    _write(out, "metrics.csv", res.metrics_csv())
    write_checkpoint(res, out / "checkpoint.npz")
    final = {"config": tc.to_dict(), "episodes": res.final_eval.episodes,
             "mean_return": res.final_eval.mean_return, "success_rate": res.final_eval.success_rate,
             "delta_a": res.delta_a.mean, "delta_a_events": res.delta_a.count, "error": res.error}
    _write(out, "final.json", json.dumps(final, indent=2, sort_keys=True) + "\n")
    if res.error:
        log.error("training aborted: %s", res.error)
        return EXIT_CLAIM
    print(f"iterations={len(res.metrics)} final_return={res.final_eval.mean_return}")
    return EXIT_OK


def cmd_compare(cfg: dict, cfg_hash: str, out: Path, seed) -> int:
    from .correction import rows_to_csv
    from .experiments import COMPARE_COLUMNS, COMPARE_DEFAULTS, dt_wins, run_compare

    _check_keys(cfg, COMPARE_DEFAULTS, "compare config")
    rows = run_compare(cfg, seed_offset=seed or 0)
    _write(out, "compare.csv", rows_to_csv(rows, COMPARE_COLUMNS, _meta(cfg_hash)))
    if any(r["scheme"] == "DT" for r in rows) and {"ST", "IT"} <= {r["scheme"] for r in rows}:
        wins, total = dt_wins(rows, cfg.get("eta", COMPARE_DEFAULTS["eta"]))
        print(f"DT smallest gap in {wins}/{total} seeds")
    return EXIT_OK


def cmd_gap(cfg: dict, cfg_hash: str, out: Path, seed) -> int:
    from .correction import rows_to_csv
    from .experiments import DELTA_A_COLUMNS, GAP_DEFAULTS, PERF_COLUMNS, run_gap

    _check_keys(cfg, GAP_DEFAULTS, "gap config")
    da, perf = run_gap(cfg)
    _write(out, "delta_a.csv", rows_to_csv(da, DELTA_A_COLUMNS, _meta(cfg_hash)))
    _write(out, "performance.csv", rows_to_csv(perf, PERF_COLUMNS, _meta(cfg_hash)))
    return EXIT_OK


def cmd_gradcheck(cfg: dict, cfg_hash: str, out: Path, seed, tol: float = 1e-4) -> int:
    from .experiments import GRADCHECK_DEFAULTS, run_gradcheck

    _check_keys(cfg, GRADCHECK_DEFAULTS, "gradcheck config")
    if seed is not None:
        cfg["seed"] = seed
    reports, boundary = run_gradcheck(cfg)
    doc = {k: json.loads(r.to_json()) for k, r in reports.items()}
    doc["boundary_samples_excluded_by_pattern"] = boundary
    ok = all(r.passed(tol) for r in reports.values())
    doc["passed"] = ok
    _write(out, "gradcheck.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for k, r in reports.items():
        print(f"{'PASS' if r.passed(tol) else 'FAIL'} {k} worst={r.worst:.3e}")
    return EXIT_OK if ok else EXIT_CLAIM


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpae-lab", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=["verify", "train", "compare", "gap", "gradcheck"])
    p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    p.add_argument("--out", default=os.environ.get(OUT_ENV), help=f"output directory (default ${OUT_ENV})")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--single-thread", action="store_true", help="force single-threaded, deterministic runs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.out:
        print(f"gpae-lab: --out is required (or set ${OUT_ENV})", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg, cfg_hash = load_config(args.config)
        if args.command == "verify":
            return cmd_verify(cfg, cfg_hash, out, args.seed)
        if args.command == "train":
            return cmd_train(cfg, cfg_hash, out, args.seed, args.single_thread)
        if args.command == "compare":
            return cmd_compare(cfg, cfg_hash, out, args.seed)
        if args.command == "gap":
            return cmd_gap(cfg, cfg_hash, out, args.seed)
        return cmd_gradcheck(cfg, cfg_hash, out, args.seed)
    except ConfigProblem as exc:
        print(f"gpae-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, TypeError, KeyError) as exc:
        print(f"gpae-lab: config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
