"""Command-line entry point: ``gridtwin {solve,twin,diagnose,convert-case}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import compare_bias_spectra, factor_decompose, spectrum_report
from .config import ExperimentConfig, load_config
from .errors import ConfigError, GridTwinError, IOFailure
from .estimation import (BiasReport, benchmark_jacobian, bias_report, estimate_jacobian,
                         write_heatmap_pgm, write_matrix_csv)
from .matpower import convert_matpower
from .network import Network, apply_branch_edit, branches_between, load_case, parse_case
from .neural import chain_rule_jacobian, predict, relative_rmse, save_model, train
from .powerflow import solve_powerflow
from .telemetry import simulate_series, standardize, write_series_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = IOFailure.exit_code


def _dump_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# diagnosis

_LABEL = re.compile(r"∂([PQ])(\d+)/∂(θ|V)(\d+)")


@dataclass(frozen=True)
class Suspect:
    kind: str
    buses: tuple[int, ...]
    tier: int
    score: float
    lines: tuple[tuple[int, str], ...] = ()

    def to_dict(self, rank: int) -> dict:
        return {"rank": rank, "kind": self.kind, "buses": list(self.buses), "tier": self.tier,
                "score": self.score,
                "lines": [{"line": n, "text": t} for n, t in self.lines]}


def case_record_lines(text: str) -> tuple[dict, dict]:
    """Line numbers of BUS and BRANCH records: ``{bus: [(n, text)]}``, ``{(a, b): [...]}``."""
    buses, branches = {}, {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.upper() in ("BASE_MVA", "BUS", "BRANCH", "GEN"):
            section = line.upper()
            continue
        fields = [f for f in re.split(r"[,\s]+", line) if f]
        try:
            ids = [int(float(f)) for f in fields[:2]]
        except ValueError:
            continue
        if section == "BUS":
            buses.setdefault(ids[0], []).append((n, raw.strip()))
        elif section == "BRANCH" and len(ids) == 2:
            branches.setdefault(tuple(sorted(ids)), []).append((n, raw.strip()))
    return buses, branches


def rank_suspects(outliers, net: Network, case_text: str | None = None) -> list[Suspect]:
    """Map labeled bias outliers to description-file records.

    An off-diagonal outlier between buses i and j implicates the branches
    joining them (tier 1) and the other branches at i and j (tier 2).  A
    diagonal outlier implicates the bus's own shunt record.  Within a tier,
    records are ordered by the summed magnitude of their outliers.
    """
    scores: dict[tuple, list] = {}

    def add(key, tier, amount):
        entry = scores.setdefault(key, [tier, 0.0])
        entry[0] = min(entry[0], tier)
        entry[1] += amount

    for label, value in outliers:
        m = _LABEL.fullmatch(label)
        if not m:
            raise ConfigError(f"cannot interpret outlier label {label!r}")
        i, j, mag = int(m.group(2)), int(m.group(4)), abs(float(value))
        if i == j:
            add(("shunt", (i,)), 1, mag)
            continue
        pair = tuple(sorted((i, j)))
        if branches_between(net, i, j):
            add(("branch", pair), 1, mag)
        for bus in (i, j):
            for br in net.branches:
                other = tuple(sorted((br.from_bus, br.to_bus)))
                if bus in other and other != pair:
                    add(("branch", other), 2, mag)

    bus_lines, branch_lines = case_record_lines(case_text) if case_text else ({}, {})
    out = []
    for (kind, buses), (tier, score) in scores.items():
        lines = bus_lines.get(buses[0], []) if kind == "shunt" else branch_lines.get(buses, [])
        out.append(Suspect(kind, buses, tier, score, tuple(lines)))
    out.sort(key=lambda s: (s.tier, -s.score, s.kind, s.buses))
    return out


# ---------------------------------------------------------------------------
# twin pipeline


class _Bundle:
    def __init__(self, root: Path, heatmaps: bool):
        self.root = root
        self.heatmaps = heatmaps
        self.files: list[str] = []
        root.mkdir(parents=True, exist_ok=True)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if rel not in self.files:
            self.files.append(rel)
        return p

    def json(self, rel, doc):
        _dump_json(self.path(rel), doc)

    def matrix(self, rel, matrix, index_map):
        write_matrix_csv(self.path(rel + ".csv"), matrix, index_map)
        if self.heatmaps:
            write_heatmap_pgm(self.path(rel + ".pgm"), matrix)

    def report(self, rel, rep: BiasReport):
        self.matrix(rel + "/bias", rep.bias, rep.index_map)
        rep.write_json(self.path(rel + "/bias.json"))


class StageFailure(Exception):
    def __init__(self, stage: str, cause: GridTwinError):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def run_twin(cfg: ExperimentConfig, emit_heatmaps: bool = False) -> dict:
    """Run the full pipeline and return the manifest (also written to disk)."""
    bundle = _Bundle(Path(cfg.output_dir), emit_heatmaps)
    summary: dict = {}
    state: dict = {}
    stage = "load"
    try:
        try:
            case_text = Path(cfg.case_path).read_text(encoding="utf-8")
            true_net = parse_case(case_text)
            described = true_net
            if cfg.corruption is not None:
                described = apply_branch_edit(true_net, cfg.corruption)

            stage = "simulate"
            series = simulate_series(true_net, cfg.fluctuation, tolerance=cfg.pf_tolerance)
            write_series_csv(series, bundle.path("telemetry/states.csv"),
                             bundle.path("telemetry/injections.csv"))
            _write_amplitudes(bundle, series, cfg)

            stage = "benchmark"
            bench = benchmark_jacobian(described, series)
            bundle.matrix("benchmark/j_mean", bench.j_mean, bench.index_map)
            bundle.matrix("benchmark/j_std", bench.j_std, bench.index_map)
            summary["benchmark"] = {
                "samples": bench.samples,
                "max_j_std_over_max_j_mean": float(bench.j_std.max() / np.abs(bench.j_mean).max())}

            stage = "lse"
            windows = {}
            for w in cfg.lse_windows:
                rep = bias_report(estimate_jacobian(series, 0, w), bench, cfg.outliers)
                bundle.report(f"lse/window_{w}", rep)
                windows[str(w)] = {"frobenius_rel": rep.frobenius_rel, "max_abs": rep.max_abs,
                                   "top_outlier": rep.outliers[0].label if rep.outliers else None}
                state["report"] = rep
                state["window"] = w
            if windows:
                summary["lse_windows"] = windows
                bundle.json("lse/windows.json", windows)

            if cfg.corruption is not None and "report" in state:
                stage = "diagnose"
                rep = state["report"]
                suspects = rank_suspects([(o.label, o.value) for o in rep.outliers], described,
                                         case_text)
                bundle.json("diagnosis/suspects.json",
                            {"suspects": [s.to_dict(k + 1) for k, s in enumerate(suspects[:20])]})
                summary["diagnosis"] = {"top_outlier": rep.outliers[0].label if rep.outliers
                                        else None,
                                        "top_suspect": suspects[0].to_dict(1) if suspects else None}

            if cfg.correction is not None and "report" in state:
                stage = "correct"
                fixed = apply_branch_edit(described, cfg.correction)
                bench_fixed = benchmark_jacobian(fixed, series)
                w = state["window"]
                rep_fixed = bias_report(estimate_jacobian(series, 0, w), bench_fixed, cfg.outliers)
                bundle.report(f"corrected/window_{w}", rep_fixed)
                state["fixed"] = rep_fixed
                summary["corrected"] = {"window": w, "max_abs": rep_fixed.max_abs,
                                        "frobenius_rel": rep_fixed.frobenius_rel}

            if cfg.mlp.enabled:
                stage = "mlp"
                summary["mlp"] = _run_mlp(bundle, cfg, series, bench, state.get("report"))

            if cfg.analytics.enabled and "report" in state:
                stage = "analytics"
                summary["analytics"] = _run_analytics(bundle, cfg, state)
        except OSError as exc:
            raise StageFailure(stage, IOFailure(str(exc))) from exc
        except GridTwinError as exc:
            raise StageFailure(stage, exc) from exc
    except StageFailure as failure:
        _write_manifest(bundle, cfg, summary, failure)
        raise
    return _write_manifest(bundle, cfg, summary, None)


def _write_amplitudes(bundle: _Bundle, series, cfg: ExperimentConfig) -> None:
    fl = cfg.fluctuation
    std_y = standardize(series.y_series, fl.artificial_noise_sigma, fl.seed)
    with open(bundle.path("telemetry/amplitude.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "raw_std", "standardized_std", "standardized_max_abs"])
        for lab, raw, z in zip(series.index_map.injection_labels(), series.y_series, std_y):
            w.writerow([lab, repr(float(raw.std())), repr(float(z.std())),
                        repr(float(np.abs(z).max()))])


def _run_mlp(bundle: _Bundle, cfg: ExperimentConfig, series, bench, lse_report) -> dict:
    result = train(series, cfg.mlp.train, cfg.mlp.layer_sizes)
    model = result.model
    save_model(model, bundle.path("mlp/model.json"))
    with open(bundle.path("mlp/losses.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for k, loss in enumerate(result.losses):
            w.writerow([k, repr(float(loss))])

    labels = series.index_map.injection_labels()
    missing = [m for m in cfg.mlp.monitored if m not in labels]
    if missing:
        raise ConfigError(f"monitored injections {missing} are not in the injection vector")
    rows = [labels.index(m) for m in cfg.mlp.monitored]
    a, b = cfg.mlp.train.test_range
    pred = predict(model, series.x_series[:, a:b].T).T
    with open(bundle.path("mlp/predictions.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", *(f"{m}{s}" for m in cfg.mlp.monitored for s in ("", "*"))])
        for k in range(b - a):
            vals = []
            for r in rows:
                vals += [repr(float(series.y_series[r, a + k])), repr(float(pred[r, k]))]
            w.writerow([int(series.timestamps[a + k]), *vals])

    x_mean = series.x_series.mean(axis=1)
    rep = bias_report(chain_rule_jacobian(model, x_mean), bench, cfg.outliers)
    bundle.report("mlp/chain_rule", rep)
    rr = relative_rmse(model, series, rows, (a, b))
    out = {"relative_rmse": {m: float(v) for m, v in zip(cfg.mlp.monitored, rr)},
           "final_loss": float(result.losses[-1]),
           "chain_rule_frobenius_rel": rep.frobenius_rel}
    if lse_report is not None:
        out["lse_frobenius_rel"] = lse_report.frobenius_rel
        out["chain_rule_over_lse"] = rep.frobenius_rel / lse_report.frobenius_rel
    return out


def _run_analytics(bundle: _Bundle, cfg: ExperimentConfig, state: dict) -> dict:
    ac = cfg.analytics
    rep = state["report"]
    if "fixed" in state:
        cmp = compare_bias_spectra(rep.bias, state["fixed"].bias, ac.num_factors, ac.scaling)
        cmp.write_json(bundle.path("analytics/spectra.json"))
        cmp.bias_a.write_histogram_csv(bundle.path("analytics/histogram_corrupted.csv"))
        cmp.bias_b.write_histogram_csv(bundle.path("analytics/histogram_corrected.csv"))
        return cmp.summary()
    spec = spectrum_report(rep.bias, ac.scaling)
    k = ac.num_factors if ac.num_factors is not None else \
        min(len(spec.spikes), min(rep.bias.shape) - 1)
    resid = spectrum_report(factor_decompose(rep.bias, k).residues, ac.scaling)
    _dump_json(bundle.path("analytics/spectrum.json"),
               {"bias": spec.to_dict(), "residue": resid.to_dict(), "num_factors": k})
    spec.write_histogram_csv(bundle.path("analytics/histogram.csv"))
    return {"spikes": len(spec.spikes), "num_factors": k, "ks": spec.ks_distance,
            "residue_ks": resid.ks_distance}


def _write_manifest(bundle: _Bundle, cfg: ExperimentConfig, summary: dict,
                    failure: StageFailure | None) -> dict:
    bundle.json("summary.json", summary)
    artifacts = []
    for rel in bundle.files:
        p = bundle.root / rel
        if p.exists():
            artifacts.append({"path": rel, "sha256": _sha256(p), "bytes": p.stat().st_size})
    manifest = {
        "tool": "gridtwin",
        "version": __version__,
        "status": "failed" if failure else "ok",
        "case_sha256": _sha256(cfg.case_path) if Path(cfg.case_path).exists() else None,
        "seeds": cfg.seeds(),
        "config": cfg.raw,
        "artifacts": artifacts,
    }
    if failure:
        manifest["failed_stage"] = failure.stage
        manifest["error"] = str(failure.cause)
    _dump_json(bundle.root / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    net = load_case(args.case)
    sol = solve_powerflow(net, tolerance=args.tolerance, max_iter=args.max_iter)
    text = sol.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "solution.json").write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_twin(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = cfg.with_output(args.out)
    try:
        manifest = run_twin(cfg, args.emit_heatmaps)
    except StageFailure as failure:
        print(f"gridtwin: {failure}", file=sys.stderr)
        return failure.cause.exit_code
    print(json.dumps({"status": manifest["status"], "output_dir": str(cfg.output_dir),
                      "artifacts": len(manifest["artifacts"])}))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    with open(args.report, encoding="utf-8") as fh:
        report = json.load(fh)
    case_text = Path(args.case).read_text(encoding="utf-8")
    net = parse_case(case_text)
    outliers = [(o["label"], o["value"]) for o in report.get("outliers", [])]
    suspects = rank_suspects(outliers, net, case_text)[: args.top]
    doc = {"suspects": [s.to_dict(k + 1) for k, s in enumerate(suspects)]}
    if not suspects:
        doc["message"] = "no suspects"
    text = json.dumps(doc, indent=2, ensure_ascii=False)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "suspects.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_convert_case(args) -> int:
    text = convert_matpower(Path(args.input).read_text(encoding="utf-8"))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridtwin", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the power flow of a case file")
    p.add_argument("case")
    p.add_argument("--out", help="directory for solution.json (default: stdout)")
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=20)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("twin", help="run an experiment pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override every stage seed")
    p.add_argument("--out", help="override output_dir")
    p.add_argument("--emit-heatmaps", action="store_true", help="also write PGM heatmaps")
    p.set_defaults(func=cmd_twin)

    p = sub.add_parser("diagnose", help="rank description-file records behind bias outliers")
    p.add_argument("report", help="bias.json written by twin")
    p.add_argument("case", help="the case file used for the benchmark")
    p.add_argument("--out")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("convert-case", help="convert a Matpower .m case to case-file text")
    p.add_argument("input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_convert_case)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GridTwinError as exc:
        print(f"gridtwin: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"gridtwin: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"gridtwin: malformed input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
