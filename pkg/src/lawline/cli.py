"""``lawline`` command line: fit, compare, predict, simulate, report.

Exit codes: 0 success, 1 I/O error, 2 domain or fit error, 3 invalid arguments.
``LAWLINE_THREADS`` caps the worker threads used for independent fits and areas.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from lawline.analysis import (
    CLAMP_NOTE,
    NOISE_NOTE,
    ReportOptions,
    build_report,
    forecast_downstream,
    intervention_matrix,
    parallel_map,
)
from lawline.artifacts import (
    atomic_write_text,
    csv_text,
    dumps_json,
    load_laws,
    load_matrices,
    matrix_csv,
    matrix_long_csv,
    slug,
    write_json,
)
from lawline.core import CheckpointRecord, LawlineError, LossUnit
from lawline.fitlaw import ComputeToLossLaw, LossToLossLaw, fit_loss_to_loss, irreducible_law
from lawline.ingest import (
    ConfigGroup,
    average_label,
    convert_unit,
    dumps_jsonl,
    group_by_config,
    load_records,
    with_average,
)
from lawline.plot import render_svg
from lawline.synth import WorldSpec, generate, intervention_scenario, reference_world

logger = logging.getLogger("lawline")

EXIT_OK, EXIT_IO, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"interval must look like LO:HI, got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"interval needs LO < HI, got {text!r}")
    return lo, hi


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _unit(text: str) -> LossUnit:
    try:
        return LossUnit.parse(text)
    except LawlineError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# --- shared record handling ---


def _load_all(paths: Sequence[str]) -> list[CheckpointRecord]:
    records: list[CheckpointRecord] = []
    for p in paths:
        rs = load_records(p)
        for d in rs.diagnostics:
            print(f"{p}: {d}", file=sys.stderr)
        records.extend(rs.records)
    return records


def _prepare(records: list[CheckpointRecord], unit: Optional[LossUnit]) -> list[CheckpointRecord]:
    if unit is not None:
        records = convert_unit(records, unit)
    return records


_AVG = re.compile(r"^avg\((.+)\)$")


def _ensure_labels(records: list[CheckpointRecord], labels: Sequence[str]) -> list[CheckpointRecord]:
    """Materialize ``avg(a,b,...)`` labels on records that lack them."""
    for label in labels:
        m = _AVG.match(label)
        if m:
            records = with_average(records, m.group(1).split(","), label)
    return records


@dataclass
class _PairResult:
    config_label: str
    x_dataset: str
    y_dataset: str
    x_law: Optional[ComputeToLossLaw]
    y_law: Optional[ComputeToLossLaw]
    l2l: Optional[LossToLossLaw]
    error: Optional[str]


def _fit_groups(groups: Sequence[ConfigGroup], x_label: str, y_labels: Sequence[str]) -> list[_PairResult]:
    stage1_jobs = [(g, d) for g in groups for d in [x_label, *y_labels]]

    def stage1(job):
        g, d = job
        try:
            return irreducible_law(g, d), None
        except LawlineError as exc:
            return None, f"{d}: {exc}"

    stage1_out = dict(zip([(g.config, d) for g, d in stage1_jobs], parallel_map(stage1, stage1_jobs)))
    pair_jobs = [(g, y) for g in groups for y in y_labels]

    def stage2(job) -> _PairResult:
        g, y = job
        x_law, x_err = stage1_out[(g.config, x_label)]
        y_law, y_err = stage1_out[(g.config, y)]
        if x_err or y_err:
            return _PairResult(g.config.label, x_label, y, x_law, y_law, None, x_err or y_err)
        try:
            l2l = fit_loss_to_loss(g, x_label, y, x_law.e_irreducible, y_law.e_irreducible)
        except LawlineError as exc:
            return _PairResult(g.config.label, x_label, y, x_law, y_law, None, str(exc))
        return _PairResult(g.config.label, x_label, y, x_law, y_law, l2l, None)

    return parallel_map(stage2, pair_jobs)


def _fit_from_args(args) -> tuple[list[ConfigGroup], list[_PairResult]]:
    records = _prepare(_load_all(args.records), args.unit)
    x_sets = args.x_dataset
    y_sets = args.y_datasets
    x_label = average_label(x_sets)
    records = with_average(records, x_sets, x_label)
    if args.average:
        y_labels = [average_label(y_sets)]
        records = with_average(records, y_sets, y_labels[0])
    else:
        y_labels = list(y_sets)
    groups = group_by_config(records)
    return groups, _fit_groups(groups, x_label, y_labels)


def _laws_of(results: Sequence[_PairResult]) -> list:
    laws: list = []
    seen = set()
    for r in results:
        for law in (r.x_law, r.y_law, r.l2l):
            if law is not None and law.law_id not in seen:
                seen.add(law.law_id)
                laws.append(law)
    return laws


SUMMARY_HEADER = [
    "config", "x_dataset", "y_dataset", "unit", "n_points", "e_x", "e_y", "k_coef", "kappa",
    "r_squared", "x_fallback_used", "y_fallback_used", "status",
]


def _summary_rows(results: Sequence[_PairResult]) -> list[list]:
    rows = []
    for r in results:
        law = r.l2l
        rows.append(
            [
                r.config_label,
                r.x_dataset,
                r.y_dataset,
                law.unit.value if law else "",
                law.n_points if law else None,
                r.x_law.e_irreducible if r.x_law else None,
                r.y_law.e_irreducible if r.y_law else None,
                law.k_coef if law else None,
                law.kappa if law else None,
                law.r_squared if law else None,
                r.x_law.fallback_used if r.x_law else None,
                r.y_law.fallback_used if r.y_law else None,
                "ok" if law else f"scatter-only: {r.error}",
            ]
        )
    return rows


def _print_summary(results: Sequence[_PairResult]) -> None:
    for r in results:
        if r.l2l:
            fb = " fallback_used=true" if (r.x_law.fallback_used or r.y_law.fallback_used) else ""
            print(
                f"{r.config_label}  {r.x_dataset} -> {r.y_dataset}  K={r.l2l.k_coef:.4g} "
                f"kappa={r.l2l.kappa:.4g}  E_x={r.l2l.e_x:.4g} E_y={r.l2l.e_y:.4g}  "
                f"R2={r.l2l.r_squared:.3f}  n={r.l2l.n_points}{fb}"
            )
        else:
            print(f"{r.config_label}  {r.x_dataset} -> {r.y_dataset}  FAILED: {r.error}", file=sys.stderr)


# --- subcommands ---


POINTS_HEADER = ["config", "params_n", "tokens_d", "seed", "step", "x_dataset", "y_dataset", "x_loss", "y_loss"]


def _point_rows(groups: Sequence[ConfigGroup], results: Sequence[_PairResult]) -> list[list]:
    """The (x, y) losses each pair was fitted on, one row per checkpoint."""
    by_label = {g.config.label: g for g in groups}
    rows = []
    for r in results:
        for rec in by_label[r.config_label].records:
            rows.append(
                [
                    r.config_label, rec.params_n, rec.tokens_d, rec.seed, rec.step, r.x_dataset, r.y_dataset,
                    rec.losses[r.x_dataset].value if r.x_dataset in rec.losses else None,
                    rec.losses[r.y_dataset].value if r.y_dataset in rec.losses else None,
                ]
            )
    return rows


def cmd_fit(args) -> int:
    groups, results = _fit_from_args(args)
    out = Path(args.out)
    write_json(out / "laws.json", {"laws": [law.to_dict() for law in _laws_of(results)]})
    atomic_write_text(out / "fit_summary.csv", csv_text(SUMMARY_HEADER, _summary_rows(results)))
    atomic_write_text(out / "points.csv", csv_text(POINTS_HEADER, _point_rows(groups, results)))
    _print_summary(results)
    failed = [r for r in results if r.l2l is None]
    if failed and not (args.allow_partial and len(failed) < len(results)):
        return EXIT_DOMAIN
    return EXIT_OK


def _matrices(l2l: Sequence[LossToLossLaw], interval) -> list:
    pairs: dict[tuple[str, str], list[LossToLossLaw]] = {}
    for law in l2l:
        pairs.setdefault((law.x_dataset, law.y_dataset), []).append(law)
    out = []
    for (x, y), laws in pairs.items():
        if len(laws) < 2:
            continue
        named = [(law.config.label, law) for law in laws]
        out.append(intervention_matrix(named, interval))
    return out


def _write_matrices(out: Path, matrices) -> None:
    for m in matrices:
        stem = f"matrix__{slug(m.x_dataset)}__{slug(m.y_dataset)}"
        atomic_write_text(out / f"{stem}.csv", matrix_csv(m))
        atomic_write_text(out / f"{stem}_long.csv", matrix_long_csv(m))
    write_json(out / "matrices.json", {"matrices": [m.to_dict() for m in matrices]})


def cmd_compare(args) -> int:
    if args.laws:
        l2l = [law for law in load_laws(args.laws) if isinstance(law, LossToLossLaw)]
    elif args.records:
        if not args.x_dataset or not args.y_datasets:
            raise UsageError("--x-dataset and --y-datasets are required with --records")
        _, results = _fit_from_args(args)
        _print_summary(results)
        l2l = [r.l2l for r in results if r.l2l is not None]
    else:
        raise UsageError("give --laws or --records")
    if args.y_datasets and args.laws:
        wanted = set(args.y_datasets) | {average_label(args.y_datasets)}
        l2l = [law for law in l2l if law.y_dataset in wanted]
    matrices = _matrices(l2l, args.interval)
    if not matrices:
        print("compare needs at least two configurations fitted on the same axes", file=sys.stderr)
        return EXIT_DOMAIN
    _write_matrices(Path(args.out), matrices)
    for m in matrices:
        print(f"{m.x_dataset} -> {m.y_dataset} on [{m.interval[0]:g}, {m.interval[1]:g}] ({m.unit.value})")
        width = max(len(label) for label in m.labels)
        for label, row in zip(m.labels, m.areas):
            print(f"  {label:<{width}}  " + "  ".join(f"{v:7.4f}" for v in row))
    return EXIT_OK


def cmd_predict(args) -> int:
    laws = load_laws(args.laws)
    l2l = [law for law in laws if isinstance(law, LossToLossLaw)]
    if args.config:
        l2l = [law for law in l2l if law.config.label == args.config]
    if args.y_dataset:
        l2l = [law for law in l2l if law.y_dataset == args.y_dataset]
    if len(l2l) != 1:
        raise UsageError(f"expected exactly one matching loss-to-loss law, found {len(l2l)}; use --config/--y-dataset")
    target = l2l[0]
    trains = [
        law
        for law in laws
        if isinstance(law, ComputeToLossLaw) and law.config == target.config and law.eval_dataset == target.x_dataset
    ]
    if not trains:
        trains = [law for law in laws if isinstance(law, ComputeToLossLaw)]
        if len(trains) != 1:
            raise UsageError("no compute-to-loss law matches the loss-to-loss law's x dataset and config")
    forecast = forecast_downstream(trains[0], target, args.n, args.d)
    text = dumps_json(forecast.to_dict())
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / "forecast.json" if out.suffix != ".json" else out, text)
    sys.stdout.write(text)
    return EXIT_OK


def _preset_worlds(name: str) -> list[WorldSpec]:
    if name == "reference":
        return [reference_world(noise_sigma=0.01)]
    if name == "interventions":
        return list(intervention_scenario())
    raise UsageError(f"unknown preset {name!r}")


def cmd_simulate(args) -> int:
    if args.world:
        data = json.loads(Path(args.world).read_text(encoding="utf-8"))
        items = data if isinstance(data, list) else [data]
        try:
            worlds = [WorldSpec.from_dict(item) for item in items]
        except (KeyError, TypeError) as exc:
            raise LawlineError(f"invalid world spec: {exc}") from None
    elif args.preset:
        worlds = _preset_worlds(args.preset)
    else:
        raise UsageError("give a world spec file or --preset")
    records: list[CheckpointRecord] = []
    for i, world in enumerate(worlds):
        records.extend(generate(world, args.seed + i).records)
    out = Path(args.out)
    target = out if out.suffix == ".jsonl" else out / "records.jsonl"
    atomic_write_text(target, dumps_jsonl(records))
    if args.preset and out.suffix != ".jsonl":
        write_json(out / "worlds.json", [w.to_dict() for w in worlds])
    print(f"wrote {len(records)} records to {target}")
    return EXIT_OK


def cmd_report(args) -> int:
    laws = load_laws(args.laws) if args.laws else []
    matrices = load_matrices(args.matrices) if args.matrices else []
    records: list[CheckpointRecord] = _load_all(args.records) if args.records else []
    l2l = [law for law in laws if isinstance(law, LossToLossLaw)]
    units = {law.unit for law in laws}
    if len(units) == 1 and records:
        records = _prepare(records, units.pop())
    records = _ensure_labels(records, sorted({d for law in l2l for d in (law.x_dataset, law.y_dataset)}))
    groups = group_by_config(records)
    if args.compare and not matrices:
        matrices = _matrices(l2l, args.interval)
    notes = [CLAMP_NOTE]
    if any(r.seed is not None for r in records) and args.synthetic_note:
        notes.append(NOISE_NOTE)
    options = ReportOptions(args.interval, args.curve_points, args.subsample, args.seed, tuple(notes))
    report = build_report(groups, laws, matrices, options)

    out = Path(args.out)
    write_json(out / "report.json", report.to_dict())
    atomic_write_text(
        out / "laws.csv",
        csv_text(
            ["law_id", "config", "x_dataset", "y_dataset", "unit", "k_coef", "kappa", "e_x", "e_y", "r_squared", "n_points"],
            [
                [d["law_id"], d["config"]["pretrain_data"] + "/" + d["config"]["architecture"] + "/" + d["config"]["tokenizer"],
                 d["x_dataset"], d["y_dataset"], d["unit"], d["k_coef"], d["kappa"], d["e_x"], d["e_y"],
                 d["r_squared"], d["n_points"]]
                for d in report.loss_laws
            ],
        ),
    )
    atomic_write_text(
        out / "compute_laws.csv",
        csv_text(
            ["law_id", "eval_dataset", "unit", "e_irreducible", "a_coef", "b_coef", "alpha", "beta", "fallback_used", "sse", "n_points"],
            [
                [d["law_id"], d["eval_dataset"], d["unit"], d["e_irreducible"], d["a_coef"], d["b_coef"],
                 d["alpha"], d["beta"], d["fallback_used"], d["sse"], d["n_points"]]
                for d in report.compute_laws
            ],
        ),
    )
    atomic_write_text(
        out / "curves.csv",
        csv_text(["law_id", "x", "y"], [[c["law_id"], x, y] for c in report.curves for x, y in c["points"]]),
    )
    atomic_write_text(
        out / "scatter.csv",
        csv_text(["law_id", "x", "y"], [[s["law_id"], x, y] for s in report.scatter for x, y in s["points"]]),
    )
    if matrices:
        _write_matrices(out, matrices)

    by_axes: dict[tuple[str, str], list[dict]] = {}
    for curve, scatter in zip(report.curves, report.scatter):
        by_axes.setdefault((curve["x_dataset"], curve["y_dataset"]), []).append(
            {"name": curve["config"], "curve": curve["points"], "scatter": scatter["points"]}
        )
    for (x, y), series in by_axes.items():
        unit = next((law.unit for law in l2l if (law.x_dataset, law.y_dataset) == (x, y)), None)
        suffix = f" [{unit.value}]" if unit else ""
        svg = render_svg(f"{y} vs {x}", f"{x}{suffix}", f"{y}{suffix}", series)
        atomic_write_text(out / "plots" / f"{slug(x)}__{slug(y)}.svg", svg)
    print(
        f"report: {len(report.loss_laws)} loss-to-loss laws, {len(report.matrices)} matrices, "
        f"{len(report.scatter_only)} scatter-only groups -> {out}"
    )
    return EXIT_OK


# --- parser ---


def _add_fit_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--x-dataset", type=_csv_list, required=required, help="x-axis dataset(s); several are averaged")
    p.add_argument("--y-datasets", type=_csv_list, required=required, help="comma-separated y-axis datasets")
    p.add_argument(
        "--average",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="fit one law on the mean of the y datasets (default) instead of one per dataset",
    )
    p.add_argument("--unit", type=_unit, default=None, help="nats or bpb; converts records before fitting")
    p.add_argument("--allow-partial", action="store_true", help="exit 0 when at least one fit succeeded")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lawline", description="Fit and compare loss-to-loss scaling laws.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="two-stage fit of loss-to-loss laws per configuration")
    p.add_argument("records", nargs="+", help="JSONL or CSV record files")
    _add_fit_flags(p, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="area-between-curves matrix across configurations")
    p.add_argument("--laws", nargs="*", default=[], help="law JSON files from `fit`")
    p.add_argument("--records", nargs="*", default=[], help="record files to fit first")
    _add_fit_flags(p, required=False)
    p.add_argument("--interval", type=parse_interval, default=(0.0, 2.0), help="x range LO:HI (default 0:2)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("predict", help="compose compute-to-train and train-to-test laws")
    p.add_argument("--laws", nargs="+", required=True, help="law JSON files")
    p.add_argument("--n", type=lambda s: int(float(s)), required=True, help="parameter count N")
    p.add_argument("--d", type=lambda s: int(float(s)), required=True, help="training tokens D")
    p.add_argument("--config", help="config label selecting the law")
    p.add_argument("--y-dataset", help="y dataset selecting the law")
    p.add_argument("--out", help="directory or .json path for forecast.json")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="generate synthetic checkpoint records")
    p.add_argument("world", nargs="?", help="world spec JSON (object or list)")
    p.add_argument("--preset", choices=["reference", "interventions"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory or .jsonl path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="tables, curve samples and SVG plots")
    p.add_argument("--records", nargs="*", default=[])
    p.add_argument("--laws", nargs="*", default=[])
    p.add_argument("--matrices", nargs="*", default=[])
    p.add_argument("--compare", action="store_true", help="compute matrices from the laws when none are given")
    p.add_argument("--interval", type=parse_interval, default=(0.0, 2.0))
    p.add_argument("--subsample", type=int, default=None, help="scatter points shown per curve")
    p.add_argument("--curve-points", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthetic-note", action="store_true", help="note the independent-noise assumption")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lawline: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LawlineError as exc:
        print(f"lawline: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"lawline: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"lawline: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
