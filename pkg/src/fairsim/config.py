"""Experiment configuration: ``[section]`` headers and ``key = value`` lines.

Every field can also be overridden from the command line as ``--key value``
(underscores become dashes). Parse errors name the file and line.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .ensemble import GROWTH_MODES, PER_MEMBER, REDUCE_MEMBER, REDUCTION_MODES
from .iscsi import MODES

WORKLOADS = ("seq_write", "seq_read", "postmark", "postmark_multi", "rewrite", "seek")
CWND_SIDES = ("initiator", "target")


class ConfigError(ValueError):
    pass


def _f(section: str, default, **kw):
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata={"section": section, **kw})
    return field(default=default, metadata={"section": section, **kw})


@dataclass
class ExperimentConfig:
    modes: list[str] = _f("experiment", ["standard", "fair"])
    workload: str = _f("experiment", "seq_write")
    delays_ms: list[float] = _f("experiment", [0.0, 2.0, 4.0, 6.0, 8.0, 10.0])
    seeds: list[int] = _f("experiment", [1, 2, 3, 4, 5])
    out_dir: str = _f("experiment", "out")
    jobs: int = _f("experiment", 1)

    bandwidth_bps: int = _f("network", 1_000_000_000)
    loss_prob: float = _f("network", 0.027)
    queue_capacity_pkts: int = _f("network", 100)
    delay_is_one_way: bool = _f("network", True)

    n_conns: int = _f("tcp", 4)
    growth_mode: str = _f("tcp", PER_MEMBER)
    reduction_mode: str = _f("tcp", REDUCE_MEMBER)
    initial_cwnd_segments: int = _f("tcp", 2)
    send_buffer_bytes: int = _f("tcp", 512 * 1024)
    min_rto_ms: float = _f("tcp", 200.0)
    max_rto_ms: float = _f("tcp", 60000.0)
    initial_rto_ms: float = _f("tcp", 1000.0)

    max_outstanding: int = _f("iscsi", 32)
    disk_overhead_us: float = _f("iscsi", 500.0)
    disk_rate_bps: int = _f("iscsi", 400_000_000)
    seek_penalty_ms: float = _f("iscsi", 4.0)

    file_size_bytes: int = _f("workload", 64 * 1024 * 1024)
    file_scale: float = _f("workload", 1.0)
    block_size_bytes: int = _f("workload", 1024)
    postmark_files: int = _f("workload", 2000)
    postmark_transactions: int = _f("workload", 5000)
    postmark_size_min: int = _f("workload", 500)
    postmark_size_max: int = _f("workload", 100 * 1024)
    postmark_processes: int = _f("workload", 10)
    shared_session: bool = _f("workload", True)
    bonnie_seekers: int = _f("workload", 3)
    bonnie_seeks: int = _f("workload", 8000)

    sample_ms: float = _f("metrics", 10.0)
    cwnd_side: str = _f("metrics", "initiator")

    def __post_init__(self):
        self.validate()

    @property
    def effective_file_size(self) -> int:
        return int(self.file_size_bytes * self.file_scale)

    def validate(self) -> None:
        problems = []
        for m in self.modes:
            if m not in MODES:
                problems.append(f"modes: unknown mode {m!r}")
        if not self.modes:
            problems.append("modes: at least one mode is required")
        if self.workload not in WORKLOADS:
            problems.append(f"workload: must be one of {', '.join(WORKLOADS)}")
        if not self.seeds:
            problems.append("seeds: at least one seed is required")
        if any(s < 0 for s in self.seeds):
            problems.append("seeds: must be non-negative")
        if not self.delays_ms or any(d < 0 for d in self.delays_ms):
            problems.append("delays_ms: need one or more non-negative delays")
        if not 0.0 <= self.loss_prob <= 1.0:
            problems.append("loss_prob: must be in [0, 1]")
        if self.bandwidth_bps <= 0:
            problems.append("bandwidth_bps: must be positive")
        if self.n_conns < 1:
            problems.append("n_conns: must be at least 1")
        if self.growth_mode not in GROWTH_MODES:
            problems.append(f"growth_mode: must be one of {', '.join(GROWTH_MODES)}")
        if self.reduction_mode not in REDUCTION_MODES:
            problems.append(f"reduction_mode: must be one of {', '.join(REDUCTION_MODES)}")
        if self.cwnd_side not in CWND_SIDES:
            problems.append(f"cwnd_side: must be one of {', '.join(CWND_SIDES)}")
        for name in ("queue_capacity_pkts", "max_outstanding", "send_buffer_bytes",
                     "initial_cwnd_segments", "jobs", "disk_rate_bps", "block_size_bytes",
                     "postmark_files", "postmark_processes", "bonnie_seekers"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be at least 1")
        for name in ("file_size_bytes", "postmark_transactions", "bonnie_seeks"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be non-negative")
        if self.file_scale <= 0:
            problems.append("file_scale: must be positive")
        if not 0 < self.postmark_size_min <= self.postmark_size_max:
            problems.append("postmark_size_min/max: need 0 < min <= max")
        if self.sample_ms <= 0:
            problems.append("sample_ms: must be positive")
        if not 0 < self.min_rto_ms <= self.max_rto_ms:
            problems.append("min_rto_ms/max_rto_ms: need 0 < min <= max")
        if problems:
            raise ConfigError("; ".join(problems))


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _kind(name: str) -> str:
    return str(FIELDS[name].type)


def parse_value(name: str, text: str):
    kind = _kind(name)
    text = text.strip()
    try:
        if kind.startswith("list"):
            items = [t.strip() for t in text.split(",") if t.strip()]
            inner = kind[5:-1]
            conv = {"int": int, "float": float, "str": str}[inner]
            return [conv(i) for i in items]
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "int":
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def format_value(value) -> str:
    if isinstance(value, list):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>", lines: dict | None = None) -> dict:
    """Read a config text into ``{field: value}``; unknown keys are errors.

    If ``lines`` is given it receives the line number of every key.
    """
    values = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            known = {f.metadata["section"] for f in FIELDS.values()}
            if section not in known:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if section is not None and FIELDS[key].metadata["section"] != section:
            raise ConfigError(
                f"{where}: key {key!r} belongs in [{FIELDS[key].metadata['section']}], not [{section}]")
        try:
            values[key] = parse_value(key, val)
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        if lines is not None:
            lines[key] = lineno
    return values


def build(values: dict, source: str = "<config>", lines: dict | None = None) -> ExperimentConfig:
    """Construct a config, pointing validation errors at the offending lines."""
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        if not lines:
            raise
        located = []
        for problem in str(exc).split("; "):
            key = problem.split(":", 1)[0].split("/", 1)[0]
            if key in lines:
                problem = f"{source}:{lines[key]}: {problem}"
            located.append(problem)
        raise ConfigError("; ".join(located)) from None


def load(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    lines: dict = {}
    values = parse_text(Path(path).read_text(), str(path), lines)
    for key in overrides or {}:
        lines.pop(key, None)
    values.update(overrides or {})
    return build(values, str(path), lines)


def dumps(cfg: ExperimentConfig) -> str:
    out = []
    section = None
    for name, f in FIELDS.items():
        sec = f.metadata["section"]
        if sec != section:
            if section is not None:
                out.append("")
            out.append(f"[{sec}]")
            section = sec
        out.append(f"{name} = {format_value(getattr(cfg, name))}")
    return "\n".join(out) + "\n"


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    lines: dict = {}
    values = parse_text(text, source, lines)
    return build(values, source, lines)
