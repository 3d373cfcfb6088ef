"""Batch pipeline wiring: configuration, artifact persistence, stages.

Every persisted artifact embeds a fingerprint hashing the input flow log
together with the semantic configuration (window, vocab, projection,
clustering and policy settings; worker count and paths are excluded so
artifacts are byte-identical at any parallelism). Measured wall time is a
side file, not a fingerprinted artifact, so reruns stay byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Union

from .clustering import (
    GroupAssignment,
    GroupingParams,
    SecurityGroups,
    fit_groups,
    save_cluster_model,
    select_best,
)
from .features import matrix_to_csv
from .flows import (
    DROP_UNKNOWN,
    POLICIES,
    ClassifiedFlow,
    DataError,
    MemberScope,
    filter_flows,
    load_scope,
    parse_flow_log,
    scope_to_text,
)
from .metrics import REPORT_HEADER, EvalReport, evaluate, report_row
from .pca import save_pca
from .rules import (
    check_ruleset,
    extract_service_flows,
    generalize,
    make_matcher,
    ruleset_to_csv,
)
from .synth import generate, random_scenario


class UsageError(Exception):
    """Bad command line or configuration."""


#: Config fields that define artifact content (hashed into fingerprints).
SEMANTIC_FIELDS = (
    "unknown_policy",
    "window_seconds",
    "top_k_ports",
    "pca_target",
    "k",
    "seed",
    "tol",
    "max_iter",
    "restarts",
)


@dataclass
class PipelineConfig:
    # paths
    flow_log: str = ""
    scope: str = ""
    out_dir: str = "out"
    ground_truth: str = ""
    grid: str = ""
    dataset: str = "dataset"
    # regime and grouping hyper-parameters
    unknown_policy: str = DROP_UNKNOWN
    window_seconds: int = 3600
    top_k_ports: int = 64
    pca_target: Union[float, int] = 0.95
    k: Union[int, float, None] = None
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 300
    restarts: int = 4
    homogeneity_floor: float = 0.95
    # execution controls (not part of artifact identity)
    workers: int = 1
    strict: bool = False
    export_features: bool = False
    # synthetic scenario knobs
    synth_group_count: int = 10
    synth_endpoints_per_group: int = 3
    synth_windows: int = 8
    synth_flows_per_endpoint_window: int = 20
    synth_noise_rate: float = 0.0
    synth_services_per_group: int = 5
    synth_port_pool: int = 128
    synth_external_fraction: float = 0.0
    synth_object_count: int = 3

    def grouping_params(self) -> GroupingParams:
        return GroupingParams(
            window_seconds=self.window_seconds,
            top_k_ports=self.top_k_ports,
            pca_target=self.pca_target,
            k=self.k,
            seed=self.seed,
            tol=self.tol,
            max_iter=self.max_iter,
            restarts=self.restarts,
        )

    def semantic_dict(self) -> dict:
        return {name: getattr(self, name) for name in SEMANTIC_FIELDS}


def _parse_dim_or_fraction(value: str, key: str) -> Union[float, int]:
    """Values with a decimal point are fractions in (0, 1]; bare integers
    are fixed dimensions/counts."""
    try:
        if "." in value or "e" in value.lower():
            return float(value)
        return int(value)
    except ValueError as exc:
        raise UsageError(f"config key {key}: cannot parse {value!r}") from exc


def _parse_bool(value: str, key: str) -> bool:
    low = value.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise UsageError(f"config key {key}: expected a boolean, got {value!r}")


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    config = replace(base) if base is not None else PipelineConfig()
    valid = {f.name: f for f in fields(PipelineConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in valid:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        setattr(config, key, _coerce(key, value))
    _validate_config(config)
    return config


def _coerce(key: str, value: str):
    if key in ("pca_target", "k"):
        if key == "k" and value.lower() in ("", "none", "auto"):
            return None
        return _parse_dim_or_fraction(value, key)
    if key in ("strict", "export_features"):
        return _parse_bool(value, key)
    if key in (
        "window_seconds", "top_k_ports", "seed", "max_iter", "restarts", "workers",
        "synth_group_count", "synth_endpoints_per_group", "synth_windows",
        "synth_flows_per_endpoint_window", "synth_services_per_group",
        "synth_port_pool", "synth_object_count",
    ):
        try:
            return int(value)
        except ValueError as exc:
            raise UsageError(f"config key {key}: expected an integer, got {value!r}") from exc
    if key in (
        "tol", "homogeneity_floor", "synth_noise_rate", "synth_external_fraction",
    ):
        try:
            return float(value)
        except ValueError as exc:
            raise UsageError(f"config key {key}: expected a number, got {value!r}") from exc
    return value


def _validate_config(config: PipelineConfig) -> None:
    if config.unknown_policy not in POLICIES:
        raise UsageError(
            f"unknown_policy must be one of {POLICIES}, got {config.unknown_policy!r}"
        )
    if config.window_seconds < 1 or config.top_k_ports < 1:
        raise UsageError("window_seconds and top_k_ports must be >= 1")
    if isinstance(config.pca_target, float) and not 0.0 < config.pca_target <= 1.0:
        raise UsageError("pca_target fraction must be in (0, 1]")
    if isinstance(config.pca_target, int) and config.pca_target < 1:
        raise UsageError("pca_target dimension must be >= 1")
    if config.seed < 0:
        raise UsageError("seed must be >= 0")
    if config.workers < 1:
        raise UsageError("workers must be >= 1")


def load_config(path: Union[str, Path]) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def config_to_text(config: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        value = getattr(config, f.name)
        if value is None:
            value = "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def fingerprint(log_bytes: bytes, config: PipelineConfig) -> str:
    digest = hashlib.sha256()
    digest.update(log_bytes)
    digest.update(b"\n--config--\n")
    digest.update(json.dumps(config.semantic_dict(), sort_keys=True).encode())
    return digest.hexdigest()


def _read_log_bytes(config: PipelineConfig) -> bytes:
    try:
        return Path(config.flow_log).read_bytes()
    except OSError as exc:
        raise DataError(f"ingest: cannot read flow log {config.flow_log}: {exc}") from exc


def _load_scope_file(config: PipelineConfig) -> MemberScope:
    try:
        text = Path(config.scope).read_text()
    except OSError as exc:
        raise DataError(f"ingest: cannot read scope {config.scope}: {exc}") from exc
    return load_scope(text)


def ingest(config: PipelineConfig) -> tuple[list[ClassifiedFlow], "IngestOutput"]:
    """Parse and filter the configured flow log; returns kept records."""
    log_bytes = _read_log_bytes(config)
    scope = _load_scope_file(config)
    records, malformed = parse_flow_log(
        log_bytes.decode("utf-8", errors="replace"), strict=config.strict
    )
    kept, report = filter_flows(records, scope, config.unknown_policy)
    return kept, IngestOutput(
        scope=scope,
        fingerprint=fingerprint(log_bytes, config),
        malformed=malformed,
        report=report,
    )


@dataclass
class IngestOutput:
    scope: MemberScope
    fingerprint: str
    malformed: int
    report: object


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def assignments_csv(assignments: list[GroupAssignment]) -> str:
    lines = ["endpoint,group_id"]
    lines.extend(f"{a.endpoint},{a.group_id}" for a in assignments)
    return "\n".join(lines) + "\n"


def mean_distances_csv(assignments: list[GroupAssignment]) -> str:
    k = len(assignments[0].mean_distances) if assignments else 0
    lines = ["endpoint," + ",".join(f"d{i}" for i in range(k))]
    for a in assignments:
        lines.append(a.endpoint + "," + ",".join(repr(float(x)) for x in a.mean_distances))
    return "\n".join(lines) + "\n"


def groups_payload(groups: SecurityGroups, fp: str, config: PipelineConfig) -> str:
    payload = {
        "kind": "security_groups",
        "fingerprint": fp,
        "suggested_qty": groups.suggested_qty,
        "groups": {str(gid): sorted(members) for gid, members in groups.groups.items()},
        "config": config.semantic_dict(),
    }
    return json.dumps(payload, sort_keys=True) + "\n"


def load_groups(path: Union[str, Path]) -> tuple[SecurityGroups, str]:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read groups artifact {path}: {exc}") from exc
    if payload.get("kind") != "security_groups":
        raise DataError(f"{path} is not a security-groups artifact")
    groups = {
        int(gid): frozenset(members) for gid, members in payload["groups"].items()
    }
    return (
        SecurityGroups(groups=groups, suggested_qty=int(payload["suggested_qty"])),
        payload["fingerprint"],
    )


GROUP_SUMMARY_HEADER = "dataset,asset_qty,suggested_group_qty,runtime_s"


def run_group(config: PipelineConfig) -> dict:
    """Ingest, learn the groups, persist every artifact.

    Returns a summary dict; wall time covers ingest through assignment and
    is written to timing.json (a measurement, not a fingerprinted artifact).
    """
    out = Path(config.out_dir)
    t0 = time.perf_counter()
    kept, ingest_out = ingest(config)
    if not kept:
        raise DataError("ingest: no records kept after filtering; nothing to group")
    try:
        result = fit_groups(kept, config.grouping_params(), config.workers)
    except ValueError as exc:
        raise DataError(f"grouping: {exc}") from exc
    elapsed = time.perf_counter() - t0

    fp = ingest_out.fingerprint
    out.mkdir(parents=True, exist_ok=True)
    save_pca(result.pca_model, out / "pca_model.json")
    save_cluster_model(
        result.cluster_model,
        out / "cluster_model.json",
        config=config.semantic_dict(),
        fingerprint=fp,
    )
    _write(out / "groups.json", groups_payload(result.groups, fp, config))
    _write(out / "assignments.csv", assignments_csv(result.assignments))
    _write(out / "mean_distances.csv", mean_distances_csv(result.assignments))
    report = ingest_out.report
    _write(
        out / "ingest_report.json",
        json.dumps(
            {
                "records_read": report.records_read,
                "records_kept": report.records_kept,
                "records_dropped_unknown": report.records_dropped_unknown,
                "records_mapped_to_objects": report.records_mapped_to_objects,
                "distinct_endpoints": report.distinct_endpoints,
                "malformed_lines": ingest_out.malformed,
            },
            sort_keys=True,
        )
        + "\n",
    )
    if config.export_features:
        _write(out / "features.csv", matrix_to_csv(result.matrix))
    _write(
        out / "timing.json",
        json.dumps({"grouping_seconds": elapsed}, sort_keys=True) + "\n",
    )
    summary = {
        "dataset": config.dataset,
        "asset_qty": len(result.assignments),
        "suggested_group_qty": result.groups.suggested_qty,
        "runtime_s": elapsed,
    }
    return summary


def run_rules(config: PipelineConfig) -> dict:
    """Synthesize and check the ruleset from grouping artifacts."""
    out = Path(config.out_dir)
    groups, stored_fp = load_groups(out / "groups.json")
    kept, ingest_out = ingest(config)
    if ingest_out.fingerprint != stored_fp:
        raise DataError(
            "rules: grouping artifacts are stale (input or config fingerprint "
            "mismatch); rerun the group stage"
        )
    try:
        tuples = extract_service_flows(kept, groups, ingest_out.scope)
        ruleset = generalize(tuples)
        hygiene = check_ruleset(ruleset, groups, ingest_out.scope)
    except ValueError as exc:
        raise DataError(f"rules: {exc}") from exc
    if hygiene.any_to_any or hygiene.duplicates:
        raise RuntimeError(
            "rules: synthesized ruleset failed structural guarantees "
            f"(any_to_any={len(hygiene.any_to_any)}, duplicates={len(hygiene.duplicates)})"
        )
    _write(out / "ruleset.csv", ruleset_to_csv(ruleset))
    _write(out / "hygiene.txt", hygiene.to_text())
    return {
        "rules": len(ruleset.rules),
        "any_to_any": len(hygiene.any_to_any),
        "duplicates": len(hygiene.duplicates),
        "empty_group_refs": len(hygiene.empty_group_refs),
        "redundant_pairs": len(hygiene.redundant),
    }


def load_ground_truth(path: Union[str, Path]) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"eval: cannot read ground truth {path}: {exc}") from exc
    truth: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DataError(f"eval: ground truth line {lineno}: expected endpoint,label")
        if lineno == 1 and parts[0].strip().lower() == "endpoint":
            continue
        truth[parts[0].strip()] = parts[1].strip()
    if not truth:
        raise DataError(f"eval: ground truth {path} is empty")
    return truth


def run_eval(config: PipelineConfig) -> tuple[EvalReport, str]:
    """Score the persisted groups against ground truth; emit the report row."""
    out = Path(config.out_dir)
    groups, stored_fp = load_groups(out / "groups.json")
    log_bytes = _read_log_bytes(config)
    if fingerprint(log_bytes, config) != stored_fp:
        raise DataError(
            "eval: grouping artifacts are stale (input or config fingerprint "
            "mismatch); rerun the group stage"
        )
    truth = load_ground_truth(config.ground_truth)
    try:
        timing = json.loads((out / "timing.json").read_text())
        elapsed = float(timing["grouping_seconds"])
    except OSError as exc:
        raise DataError("eval: timing.json missing; run the group stage first") from exc
    report = evaluate(groups, truth, run_time_seconds=elapsed)
    row = report_row(report, config.dataset)
    _write(out / "eval_report.csv", REPORT_HEADER + "\n" + row + "\n")
    _write(
        out / "eval_report.json",
        json.dumps(
            {
                "dataset": config.dataset,
                "asset_qty": report.asset_qty,
                "group_qty": report.true_group_qty,
                "suggested_group_qty": report.suggested_group_qty,
                "runtime_s": report.run_time_seconds,
                "homogeneity": report.homogeneity,
                "completeness": report.completeness,
                "v_measure": report.v_measure,
            },
            sort_keys=True,
        )
        + "\n",
    )
    return report, row


def parse_grid(text: str, base: PipelineConfig) -> list[PipelineConfig]:
    """Grid file: one config per line, ';'-separated key = value overrides."""
    configs: list[PipelineConfig] = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        overrides = "\n".join(part.strip() for part in line.split(";") if part.strip())
        configs.append(parse_config_text(overrides, base=base))
    return configs


def run_tune(config: PipelineConfig) -> dict:
    """Sweep the grid, write the winning config and the per-entry report."""
    try:
        grid_text = Path(config.grid).read_text()
    except OSError as exc:
        raise UsageError(f"tune: cannot read grid {config.grid}: {exc}") from exc
    grid = parse_grid(grid_text, config)
    if not grid:
        raise DataError(f"tune: grid {config.grid} contains no configurations")
    kept, _ = ingest(config)
    truth = load_ground_truth(config.ground_truth)

    reports: list[EvalReport] = []
    for entry in grid:
        t0 = time.perf_counter()
        try:
            result = fit_groups(kept_for(entry, config, kept), entry.grouping_params(),
                                config.workers)
        except ValueError as exc:
            raise DataError(f"tune: {exc}") from exc
        elapsed = time.perf_counter() - t0
        reports.append(evaluate(result.groups, truth, run_time_seconds=elapsed))
    idx, below_floor = select_best(reports, config.homogeneity_floor)
    out = Path(config.out_dir)
    _write(out / "best_config.txt", config_to_text(grid[idx]))
    rows = [REPORT_HEADER + ",below_floor"]
    for i, rep in enumerate(reports):
        flag = "1" if below_floor and i == idx else "0"
        rows.append(report_row(rep, f"{config.dataset}@{i}") + "," + flag)
    _write(out / "tune_report.csv", "\n".join(rows) + "\n")
    return {
        "winner_index": idx,
        "below_floor": below_floor,
        "homogeneity": reports[idx].homogeneity,
        "v_measure": reports[idx].v_measure,
    }


def kept_for(
    entry: PipelineConfig, base: PipelineConfig, base_kept: list[ClassifiedFlow]
) -> list[ClassifiedFlow]:
    """Re-ingest only when a grid entry changes the filtering policy."""
    if entry.unknown_policy == base.unknown_policy:
        return base_kept
    entry_kept, _ = ingest(entry)
    return entry_kept


def run_synth(config: PipelineConfig) -> dict:
    """Generate a synthetic scenario into out_dir (flows, scope, truth)."""
    try:
        spec = random_scenario(
            config.synth_group_count,
            config.synth_endpoints_per_group,
            config.synth_windows,
            config.synth_flows_per_endpoint_window,
            services_per_group=config.synth_services_per_group,
            port_pool=config.synth_port_pool,
            external_fraction=config.synth_external_fraction,
            object_count=config.synth_object_count,
            noise_rate=config.synth_noise_rate,
            seed=config.seed,
            window_seconds=config.window_seconds,
        )
        scenario = generate(spec)
    except ValueError as exc:
        raise DataError(f"synth: {exc}") from exc
    out = Path(config.out_dir)
    _write(out / "flows.csv", scenario.log_text)
    _write(out / "scope.txt", scope_to_text(scenario.scope))
    _write(out / "truth.csv", scenario.truth_csv)
    return {
        "flows": scenario.total_flows,
        "noise_flows": scenario.noise_flows,
        "endpoints": len(scenario.truth),
        "groups": config.synth_group_count,
    }


def verify_ruleset_completeness(config: PipelineConfig) -> tuple[int, int]:
    """Count (allowed, total) over the records a persisted ruleset was built
    from; used by the acceptance checks."""
    from .rules import load_ruleset

    out = Path(config.out_dir)
    groups, _ = load_groups(out / "groups.json")
    kept, ingest_out = ingest(config)
    ruleset = load_ruleset(out / "ruleset.csv")
    matcher = make_matcher(ruleset, groups, ingest_out.scope)
    allowed = sum(1 for rec in kept if matcher(rec.flow) == "allow")
    return allowed, len(kept)
