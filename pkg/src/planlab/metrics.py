"""Per-episode training metrics and their CSV encoding.

The CSV layout is fixed: one comment line embedding the format version and
the resolved config digest, then the header, then one row per episode. Floats
are written with repr() so files are byte-stable under fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import FormatError

CSV_HEADER = ("episode,phase,query_id,agent_cost,expert_cost,cost_ratio,"
              "latency_s,expert_latency_s,latency_ratio,loss,epsilon,timeout_flag")

CSV_VERSION = 1


@dataclass
class EpisodeRecord:
    episode: int
    phase: str
    query_id: int
    agent_cost: float
    expert_cost: float
    cost_ratio: float
    latency_s: float
    expert_latency_s: float
    latency_ratio: float
    loss: float
    epsilon: float
    timeout_flag: int
    # Diagnostics below are intentionally not part of the CSV: wall-clock
    # would break byte-stable reruns.
    wall_clock: float = 0.0
    slip_active: bool = False

    def csv_row(self) -> str:
        return ",".join([
            str(self.episode), self.phase, str(self.query_id),
            repr(self.agent_cost), repr(self.expert_cost), repr(self.cost_ratio),
            repr(self.latency_s), repr(self.expert_latency_s),
            repr(self.latency_ratio), repr(self.loss), repr(self.epsilon),
            str(self.timeout_flag),
        ])


@dataclass
class Metrics:
    records: list[EpisodeRecord] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def extend(self, other: "Metrics") -> None:
        self.records.extend(other.records)
        self.info.update(other.info)

    def phase_records(self, phase: str) -> list[EpisodeRecord]:
        return [r for r in self.records if r.phase == phase]

    def timeout_count(self) -> int:
        return sum(r.timeout_flag for r in self.records)


def write_metrics_csv(metrics: Metrics, path: str, config_digest: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# planlab_metrics format_version={CSV_VERSION} "
                 f"config_digest={config_digest}\n")
        fh.write(CSV_HEADER + "\n")
        for record in metrics.records:
            fh.write(record.csv_row() + "\n")


def read_metrics_csv(path: str) -> Metrics:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if not body or body[0] != CSV_HEADER:
        raise FormatError(f"{path}: missing or inconsistent metrics header")
    for lineno, line in enumerate(body[1:], start=2):
        parts = line.split(",")
        if len(parts) != 12:
            raise FormatError(f"{path}:{lineno}: expected 12 columns")
        records.append(EpisodeRecord(
            episode=int(parts[0]), phase=parts[1], query_id=int(parts[2]),
            agent_cost=float(parts[3]), expert_cost=float(parts[4]),
            cost_ratio=float(parts[5]), latency_s=float(parts[6]),
            expert_latency_s=float(parts[7]), latency_ratio=float(parts[8]),
            loss=float(parts[9]), epsilon=float(parts[10]),
            timeout_flag=int(parts[11])))
    return Metrics(records=records)
