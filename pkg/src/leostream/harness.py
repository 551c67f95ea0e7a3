"""Batch experiment driver: trace generation, controller runs, comparisons.

A run covers every (controller x trace x user-count) cell of the
experiment config and emits one result row per cell. Payload files
(results.csv / results.json) are byte-deterministic for a given config;
wall-clock decision latencies go to a separate timing.csv so they never
perturb the payload.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import time as _time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .multiuser import (
    CENTRALIZED_USER_CAP,
    CentralizedCoordinator,
    MultiUserScenario,
    simulate_multi,
)
from .planners import JointMpcController, SeparateController, offline_optimal
from .simcore import (
    DEFAULT_LADDER_MBPS,
    EXTENDED_LADDER_MBPS,
    QoEBreakdown,
    SimConfig,
    VideoSpec,
    run_session,
)
from .traces import TraceGenConfig, TraceSet, gen_trace_set, read_trace, write_trace

SEPARATE_CONTROLLERS = ("separate:mvt", "separate:mrss", "separate:mb")
JOINT_CONTROLLERS = ("joint:dual", "joint:manifold")
ALL_CONTROLLERS = SEPARATE_CONTROLLERS + JOINT_CONTROLLERS + (
    "centralized",
    "offline-optimal",
)

RESULT_COLUMNS = (
    "controller",
    "predictor",
    "n_users",
    "trace_id",
    "seed",
    "qoe_total",
    "quality",
    "rebuf_penalty",
    "smooth_penalty",
    "handoff_count",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    trace_generate: TraceGenConfig | None = None
    trace_load: str | None = None
    video: VideoSpec = field(default_factory=VideoSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    controllers: tuple[str, ...] = ("separate:mb", "joint:dual")
    predictor: str = "robust"
    user_counts: tuple[int, ...] = (1,)
    background_users: int = 0
    repetitions: int = 1
    seed_base: int = 0
    out_dir: str = "results"
    horizon: int = 5
    dp_dt: float | None = None
    offline_dt: float | None = None
    jobs: int = 1
    dump_candidates: bool = False

    def __post_init__(self):
        if self.trace_generate is None and self.trace_load is None:
            raise ConfigError("config needs a trace source: generate or load")
        if not self.controllers:
            raise ConfigError("config needs at least one controller")
        for name in self.controllers:
            if name not in ALL_CONTROLLERS:
                raise ConfigError(
                    f"unknown controller {name!r}; choose from {ALL_CONTROLLERS}"
                )
        if self.predictor not in ("robust", "oracle"):
            raise ConfigError("predictor must be robust or oracle")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if any(u < 1 for u in self.user_counts):
            raise ConfigError("user counts must be >= 1")
        if self.background_users < 0:
            raise ConfigError("background_users must be >= 0")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


def _parse_ladder(value) -> tuple[float, ...]:
    if value == "default":
        return DEFAULT_LADDER_MBPS
    if value == "extended":
        return EXTENDED_LADDER_MBPS
    return tuple(float(v) for v in value)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed JSON config file."""
    try:
        trace = data.get("trace", {})
        gen_cfg = None
        load = None
        if "generate" in trace:
            gen_cfg = TraceGenConfig(**trace["generate"])
        if "load" in trace:
            load = trace["load"]
        video_data = dict(data.get("video", {}))
        if "ladder" in video_data:
            video_data["bitrate_ladder_mbps"] = _parse_ladder(video_data.pop("ladder"))
        video = VideoSpec(**video_data)
        sim = SimConfig(**data.get("sim", {}))
        return ExperimentConfig(
            trace_generate=gen_cfg,
            trace_load=load,
            video=video,
            sim=sim,
            controllers=tuple(data.get("controllers", ("separate:mb", "joint:dual"))),
            predictor=data.get("predictor", "robust"),
            user_counts=tuple(data.get("user_counts", (1,))),
            background_users=int(data.get("background_users", 0)),
            repetitions=int(data.get("repetitions", 1)),
            seed_base=int(data.get("seed_base", 0)),
            out_dir=data.get("out_dir", "results"),
            horizon=int(data.get("horizon", 5)),
            dp_dt=data.get("dp_dt"),
            offline_dt=data.get("offline_dt"),
            jobs=int(data.get("jobs", 1)),
            dump_candidates=bool(data.get("dump_candidates", False)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad experiment config: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


@dataclass
class ResultRow:
    controller: str
    predictor: str
    n_users: int
    trace_id: str
    seed: int
    qoe_total: float
    quality: float
    rebuf_penalty: float
    smooth_penalty: float
    handoff_count: float
    mean_decision_ms: float

    def key(self) -> tuple:
        return (self.controller, self.predictor, self.n_users, self.trace_id, self.seed)


def build_controller(
    name: str,
    video: VideoSpec,
    sim: SimConfig,
    predictor: str,
    horizon: int,
    dp_dt: float | None,
    dump_candidates: bool = False,
):
    kind, _, variant = name.partition(":")
    if kind == "separate":
        return SeparateController(
            video, sim, strategy=variant, predictor=predictor, horizon=horizon
        )
    if kind == "joint":
        return JointMpcController(
            video,
            sim,
            mode=variant,
            predictor=predictor,
            horizon=horizon,
            dp_dt=dp_dt,
            dump_candidates=dump_candidates,
        )
    raise ConfigError(f"cannot build controller {name!r}")


def _trace_for_rep(exp: ExperimentConfig, rep: int) -> tuple[str, int, TraceSet]:
    seed = exp.seed_base + rep
    if exp.trace_generate is not None:
        cfg = dataclasses.replace(exp.trace_generate, seed=seed)
        return f"gen{seed}", seed, gen_trace_set(cfg)
    paths = sorted(Path(exp.trace_load).glob("*.csv")) if Path(
        exp.trace_load
    ).is_dir() else [Path(exp.trace_load)]
    if not paths:
        raise ConfigError(f"no trace CSVs under {exp.trace_load}")
    path = paths[rep % len(paths)]
    return path.stem, seed, read_trace(path)


def _breakdown_means(breakdowns: list[QoEBreakdown]) -> tuple[float, float, float, float]:
    n = len(breakdowns)
    qoe = sum(b.qoe_total for b in breakdowns) / n
    quality = sum(b.quality_total for b in breakdowns) / n
    rebuf = sum(b.rebuf_penalty_total for b in breakdowns) / n
    smooth = sum(b.smooth_penalty_total for b in breakdowns) / n
    return qoe, quality, rebuf, smooth


def run_cell(
    exp: ExperimentConfig,
    trace: TraceSet,
    trace_id: str,
    seed: int,
    controller_name: str,
    n_users: int,
) -> tuple[ResultRow, list[tuple]]:
    """Execute one experiment cell; returns its row and any per-candidate
    (chunk, satellite, handoff point, qoe) debug rows."""
    video, sim = exp.video, exp.sim

    if controller_name == "offline-optimal":
        if n_users != 1 or exp.background_users != 0:
            raise ConfigError(
                "offline-optimal supports exactly 1 user and no background load"
            )
        t0 = _time.perf_counter()
        breakdown = offline_optimal(trace, video, sim, exp.offline_dt)
        elapsed = _time.perf_counter() - t0
        handoffs = sum(1 for oc in breakdown.per_chunk if oc.handoff_performed)
        return ResultRow(
            controller_name,
            exp.predictor,
            n_users,
            trace_id,
            seed,
            breakdown.qoe_total,
            breakdown.quality_total,
            breakdown.rebuf_penalty_total,
            breakdown.smooth_penalty_total,
            float(handoffs),
            1000.0 * elapsed / video.n_chunks,
        ), []

    if controller_name == "centralized":
        if n_users > CENTRALIZED_USER_CAP:
            raise ConfigError(
                f"centralized controller capped at {CENTRALIZED_USER_CAP} users"
            )
        coordinator = CentralizedCoordinator(
            video, sim, predictor=exp.predictor, horizon=exp.horizon, dp_dt=exp.dp_dt
        )
        controllers = [coordinator] * n_users
    else:
        controllers = [
            build_controller(
                controller_name, video, sim, exp.predictor, exp.horizon, exp.dp_dt,
                exp.dump_candidates,
            )
            for _ in range(n_users)
        ]

    if n_users == 1 and exp.background_users == 0 and controller_name != "centralized":
        session = run_session(trace, controllers[0], video, sim)
        latencies = list(session.decision_latencies_s)
        breakdowns = [session.breakdown]
        handoffs = [float(session.handoff_count)]
    else:
        scenario = MultiUserScenario(
            trace=trace, controllers=controllers, n_background=exp.background_users
        )
        result = simulate_multi(scenario, video, sim, seed=seed)
        if result.failures:
            raise RuntimeError(f"user failures: {result.failures}")
        breakdowns = [b for b in result.per_user if b is not None]
        handoffs = [
            float(sum(1 for oc in b.per_chunk if oc.handoff_performed))
            for b in breakdowns
        ]
        latencies = [lat for per_user in result.decision_latencies_s for lat in per_user]

    qoe, quality, rebuf, smooth = _breakdown_means(breakdowns)
    mean_ms = 1000.0 * sum(latencies) / len(latencies) if latencies else 0.0
    candidate_rows = []
    if exp.dump_candidates:
        for uid, ctrl in enumerate(controllers):
            for chunk, sat, h, qoe_val in getattr(ctrl, "candidate_rows", []):
                candidate_rows.append((uid, chunk, sat, h, qoe_val))
    return ResultRow(
        controller_name,
        exp.predictor,
        n_users,
        trace_id,
        seed,
        qoe,
        quality,
        rebuf,
        smooth,
        sum(handoffs) / len(handoffs),
        mean_ms,
    ), candidate_rows


def _run_cell_task(args):
    exp, rep, controller_name, n_users = args
    trace_id, seed, trace = _trace_for_rep(exp, rep)
    key = (controller_name, exp.predictor, n_users, trace_id, seed)
    try:
        row, candidates = run_cell(exp, trace, trace_id, seed, controller_name, n_users)
        return key, row, candidates, None
    except Exception as exc:
        return key, None, [], f"{type(exc).__name__}: {exc}"


@dataclass
class RunOutput:
    rows: list[ResultRow]
    failures: dict[tuple, str]
    candidate_rows: list[tuple] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def run_experiment(exp: ExperimentConfig) -> RunOutput:
    """Run every (controller x trace x user-count) cell."""
    tasks = [
        (exp, rep, controller, n_users)
        for rep in range(exp.repetitions)
        for controller in exp.controllers
        for n_users in exp.user_counts
    ]
    results = []
    if exp.jobs > 1:
        with ProcessPoolExecutor(max_workers=exp.jobs) as pool:
            results = list(pool.map(_run_cell_task, tasks))
    else:
        results = [_run_cell_task(task) for task in tasks]

    rows = [row for _, row, _, err in results if err is None]
    failures = {key: err for key, _, _, err in results if err is not None}
    rows.sort(key=lambda r: r.key())
    candidate_rows = [
        key + cand
        for key, _, cands, err in sorted(results, key=lambda item: item[0])
        if err is None
        for cand in cands
    ]
    return RunOutput(rows=rows, failures=failures, candidate_rows=candidate_rows)


def write_results(out_dir: str | Path, output: RunOutput) -> dict[str, Path]:
    """Emit results.csv / results.json (payload) and timing.csv (wall clock)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "results.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in output.rows:
        writer.writerow(
            [
                row.controller,
                row.predictor,
                row.n_users,
                row.trace_id,
                row.seed,
                repr(row.qoe_total),
                repr(row.quality),
                repr(row.rebuf_penalty),
                repr(row.smooth_penalty),
                repr(row.handoff_count),
            ]
        )
    csv_path.write_text(buf.getvalue(), encoding="utf-8")

    json_path = out / "results.json"
    payload = {
        "rows": [
            {
                "controller": row.controller,
                "predictor": row.predictor,
                "n_users": row.n_users,
                "trace_id": row.trace_id,
                "seed": row.seed,
                "qoe_total": row.qoe_total,
                "quality": row.quality,
                "rebuf_penalty": row.rebuf_penalty,
                "smooth_penalty": row.smooth_penalty,
                "handoff_count": row.handoff_count,
            }
            for row in output.rows
        ],
        "failures": {" / ".join(map(str, k)): v for k, v in output.failures.items()},
    }
    json_path.write_text(
        json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )

    timing_path = out / "timing.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["controller", "predictor", "n_users", "trace_id", "seed", "mean_decision_ms"]
    )
    for row in output.rows:
        writer.writerow(
            [
                row.controller,
                row.predictor,
                row.n_users,
                row.trace_id,
                row.seed,
                f"{row.mean_decision_ms:.6f}",
            ]
        )
    timing_path.write_text(buf.getvalue(), encoding="utf-8")

    paths = {"csv": csv_path, "json": json_path, "timing": timing_path}
    if output.candidate_rows:
        cand_path = out / "candidates.csv"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            [
                "controller", "predictor", "n_users", "trace_id", "seed",
                "user", "chunk_index", "satellite", "handoff_point", "best_qoe",
            ]
        )
        for rec in output.candidate_rows:
            writer.writerow([*rec[:9], repr(rec[9])])
        cand_path.write_text(buf.getvalue(), encoding="utf-8")
        paths["candidates"] = cand_path
    return paths


def gen_traces(exp: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    """Write one trace file per repetition; deterministic per seed."""
    if exp.trace_generate is None:
        raise ConfigError("gen-traces needs a generate block in the config")
    out = Path(out_dir) / "traces"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for rep in range(exp.repetitions):
        seed = exp.seed_base + rep
        cfg = dataclasses.replace(exp.trace_generate, seed=seed)
        trace = gen_trace_set(cfg)
        path = out / f"trace_rep{rep:03d}.csv"
        write_trace(trace, path)
        paths.append(path)
    return paths


def read_result_rows(path: str | Path) -> list[ResultRow]:
    rows = []
    with Path(path).open(encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append(
                ResultRow(
                    controller=rec["controller"],
                    predictor=rec["predictor"],
                    n_users=int(rec["n_users"]),
                    trace_id=rec["trace_id"],
                    seed=int(rec["seed"]),
                    qoe_total=float(rec["qoe_total"]),
                    quality=float(rec["quality"]),
                    rebuf_penalty=float(rec["rebuf_penalty"]),
                    smooth_penalty=float(rec["smooth_penalty"]),
                    handoff_count=float(rec["handoff_count"]),
                    mean_decision_ms=0.0,
                )
            )
    return rows


@dataclass
class SummaryRow:
    n_users: int
    controller: str
    n_cells: int
    mean_qoe: float
    median_qoe: float
    p10_qoe: float
    p90_qoe: float
    improvement_over_best_separate_pct: float | None


def compare_results(paths: list[str | Path]) -> list[SummaryRow]:
    """Aggregate result files and score joint controllers against the best
    separate baseline per user count."""
    rows: list[ResultRow] = []
    for path in paths:
        rows.extend(read_result_rows(path))
    if not rows:
        raise ConfigError("no result rows to compare")

    cells: dict[tuple, set[str]] = {}
    for row in rows:
        cells.setdefault((row.n_users, row.trace_id, row.seed), set()).add(row.controller)
    if not any(len(ctrls) >= 2 for ctrls in cells.values()):
        raise ConfigError("no overlapping cells between controllers")

    rows.sort(key=lambda r: r.key())
    grouped: dict[tuple[int, str], list[float]] = {}
    for row in rows:
        grouped.setdefault((row.n_users, row.controller), []).append(row.qoe_total)

    means = {key: float(np.mean(v)) for key, v in grouped.items()}
    summary = []
    for (n_users, controller), values in sorted(grouped.items()):
        arr = np.array(values)
        improvement = None
        if controller in JOINT_CONTROLLERS:
            separate = [
                means[(n_users, c)]
                for c in SEPARATE_CONTROLLERS
                if (n_users, c) in means
            ]
            if separate:
                best = max(separate)
                if best != 0:
                    improvement = 100.0 * (means[(n_users, controller)] - best) / abs(best)
        summary.append(
            SummaryRow(
                n_users=n_users,
                controller=controller,
                n_cells=len(values),
                mean_qoe=float(arr.mean()),
                median_qoe=float(np.median(arr)),
                p10_qoe=float(np.percentile(arr, 10)),
                p90_qoe=float(np.percentile(arr, 90)),
                improvement_over_best_separate_pct=improvement,
            )
        )
    return summary


def write_summary(out_dir: str | Path, summary: list[SummaryRow]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "n_users",
            "controller",
            "n_cells",
            "mean_qoe",
            "median_qoe",
            "p10_qoe",
            "p90_qoe",
            "improvement_over_best_separate_pct",
        ]
    )
    for row in summary:
        writer.writerow(
            [
                row.n_users,
                row.controller,
                row.n_cells,
                repr(row.mean_qoe),
                repr(row.median_qoe),
                repr(row.p10_qoe),
                repr(row.p90_qoe),
                "" if row.improvement_over_best_separate_pct is None
                else repr(row.improvement_over_best_separate_pct),
            ]
        )
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def format_report(rows: list[ResultRow]) -> str:
    """Human-readable mean-QoE table grouped by user count and controller."""
    grouped: dict[tuple[int, str], list[ResultRow]] = {}
    for row in rows:
        grouped.setdefault((row.n_users, row.controller), []).append(row)
    lines = [
        f"{'users':>5}  {'controller':<16} {'cells':>5} {'mean qoe':>10} "
        f"{'quality':>9} {'rebuf':>8} {'smooth':>8} {'handoffs':>8}"
    ]
    for (n_users, controller), cell_rows in sorted(grouped.items()):
        qoe = np.mean([r.qoe_total for r in cell_rows])
        quality = np.mean([r.quality for r in cell_rows])
        rebuf = np.mean([r.rebuf_penalty for r in cell_rows])
        smooth = np.mean([r.smooth_penalty for r in cell_rows])
        handoffs = np.mean([r.handoff_count for r in cell_rows])
        lines.append(
            f"{n_users:>5}  {controller:<16} {len(cell_rows):>5} {qoe:>10.4f} "
            f"{quality:>9.4f} {rebuf:>8.4f} {smooth:>8.4f} {handoffs:>8.2f}"
        )
    return "\n".join(lines)
