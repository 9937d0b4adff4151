import math
import os
from dataclasses import dataclass, field

from utils.errors import CloudFormatError, MetricError

FIXED_COLUMNS = ("cycle", "labeled_points", "labeled_fraction", "labeled_area_m2", "miou")
NOTE_PREFIX = "# note: "


def _fmt(value: float) -> str:
    return "nan" if math.isnan(value) else repr(float(value))


@dataclass
class LogRow:
    cycle: int
    labeled_points: int
    labeled_fraction: float
    labeled_area_m2: float
    miou: float
    ious: list[float]
    wall_seconds: float = 0.0

    def body(self) -> str:
        """CSV fields without wall_seconds; identical across replays of the same run."""
        fields = [
            str(self.cycle),
            str(self.labeled_points),
            _fmt(self.labeled_fraction),
            _fmt(self.labeled_area_m2),
            _fmt(self.miou),
        ]
        return ",".join(fields + [_fmt(v) for v in self.ious])

    def line(self) -> str:
        return f"{self.body()},{self.wall_seconds:.3f}"


@dataclass
class ExperimentLog:
    class_count: int
    fingerprint: str = ""
    config_json: str = "{}"
    rows: list[LogRow] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def header(self) -> str:
        return ",".join(FIXED_COLUMNS + tuple(f"iou_c{c}" for c in range(self.class_count)) + ("wall_seconds",))

    def append(self, row: LogRow) -> None:
        if len(row.ious) != self.class_count:
            raise MetricError(f"row has {len(row.ious)} IoUs for {self.class_count} classes")
        if self.rows:
            last = self.rows[-1]
            if row.labeled_fraction < last.labeled_fraction or row.labeled_area_m2 < last.labeled_area_m2:
                raise MetricError(f"labeled budget decreased at cycle {row.cycle}")
        self.rows.append(row)

    def note(self, text: str) -> None:
        self.notes.append(text)

    def body_lines(self) -> list[str]:
        return [row.body() for row in self.rows] + [NOTE_PREFIX + n for n in self.notes]

    def to_csv(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        lines = [f"# fingerprint={self.fingerprint} config={self.config_json}", self.header]
        lines += [row.line() for row in self.rows]
        lines += [NOTE_PREFIX + n for n in self.notes]
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")


def read_csv(path: str) -> ExperimentLog:
    """Parse a log written by `ExperimentLog.to_csv`."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    fingerprint, config_json, header = "", "{}", None
    rows, notes = [], []
    for number, text in enumerate(lines, start=1):
        if text.startswith(NOTE_PREFIX):
            notes.append(text[len(NOTE_PREFIX) :])
        elif text.startswith("# fingerprint="):
            meta, _, config_json = text[2:].partition(" config=")
            fingerprint = meta.split("=", 1)[1]
        elif header is None:
            header = text.split(",")
        else:
            values = text.split(",")
            if len(values) != len(header):
                raise CloudFormatError(f"expected {len(header)} columns, found {len(values)}", number)
            rows.append(
                LogRow(
                    cycle=int(values[0]),
                    labeled_points=int(values[1]),
                    labeled_fraction=float(values[2]),
                    labeled_area_m2=float(values[3]),
                    miou=float(values[4]),
                    ious=[float(v) for v in values[5:-1]],
                    wall_seconds=float(values[-1]),
                )
            )
    if header is None:
        raise CloudFormatError(f"{path} has no header row", 1)
    class_count = len(header) - len(FIXED_COLUMNS) - 1
    log = ExperimentLog(class_count=class_count, fingerprint=fingerprint, config_json=config_json)
    log.rows, log.notes = rows, notes
    return log
