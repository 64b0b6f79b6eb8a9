"""Summary statistics, empirical CDFs and reference-table comparison."""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np
import yaml

from .engine import DurationSeries


class EmptySeries(ValueError):
    pass


class InvalidParameter(ValueError):
    pass


class RowMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SummaryStats:
    """min/max/mean/std in seconds; std uses the sample (n-1) denominator."""

    min: float
    max: float
    mean: float
    std: float
    n: int


def summarize(samples) -> SummaryStats:
    values = _as_seconds(samples)
    if values.size == 0:
        raise EmptySeries("no samples to summarize")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return SummaryStats(
        min=float(values.min()),
        max=float(values.max()),
        mean=float(values.mean()),
        std=std,
        n=int(values.size),
    )


def _as_seconds(samples) -> np.ndarray:
    if isinstance(samples, DurationSeries):
        return samples.seconds()
    return np.asarray(samples, dtype=np.float64)


class ECDF:
    """Right-continuous step function F(t) = (#samples <= t) / n."""

    def __init__(self, samples):
        values = np.sort(_as_seconds(samples))
        if values.size == 0:
            raise EmptySeries("cannot build an eCDF from no samples")
        self.samples = values

    def __call__(self, t: float) -> float:
        return float(np.searchsorted(self.samples, t, side="right")) / self.samples.size

    def quantile(self, p: float) -> float:
        """Smallest sample t with F(t) >= p (lower order statistic)."""
        if not 0.0 < p <= 1.0:
            raise InvalidParameter(f"probability {p} outside (0, 1]")
        n = self.samples.size
        index = int(np.ceil(p * n)) - 1
        return float(self.samples[index])

    def steps(self) -> list[tuple[float, float]]:
        """One (duration, cumulative probability) pair per distinct sample."""
        values, counts = np.unique(self.samples, return_counts=True)
        cumulative = np.cumsum(counts) / self.samples.size
        return [(float(v), float(c)) for v, c in zip(values, cumulative)]


def ecdf(samples) -> ECDF:
    return ECDF(samples)


def quantile(e: ECDF, p: float) -> float:
    return e.quantile(p)


def export_ecdf_csv(e: ECDF, path, header_lines: list[str] | None = None) -> None:
    with open(path, "w") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        fh.write("duration_s,cumulative_probability\n")
        for duration, prob in e.steps():
            fh.write(f"{duration:.4f},{prob:.10g}\n")


def import_ecdf_csv(path) -> ECDF:
    durations = []
    probs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("duration_s"):
                continue
            d, p = line.split(",")
            durations.append(float(d))
            probs.append(float(p))
    # Reconstruct multiplicities from the probability steps.
    samples: list[float] = []
    n = round(1.0 / min(np.diff([0.0] + probs)))
    prev = 0.0
    for d, p in zip(durations, probs):
        count = round((p - prev) * n)
        samples.extend([d] * count)
        prev = p
    return ECDF(samples)


DEFAULT_TOLERANCES = {"min": 0.10, "max": 0.10, "mean": 0.10, "std": 0.50}


@dataclass(frozen=True)
class ReferenceRow:
    attenuation_db: float
    rssi_dbm: float
    iolw: dict[str, float]
    iolws: dict[str, float]
    tolerances: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    def stats_for(self, mode: str) -> dict[str, float]:
        if mode == "iolw":
            return self.iolw
        if mode == "iolws":
            return self.iolws
        raise InvalidParameter(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class FieldComparison:
    field: str
    reference: float
    observed: float
    relative_error: float
    tolerance: float
    passed: bool


@dataclass(frozen=True)
class ComparisonReport:
    attenuation_db: float
    mode: str
    fields: tuple[FieldComparison, ...]

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.fields)


def compare_to_reference(
    stats: SummaryStats,
    ref: ReferenceRow,
    mode: str,
    attenuation_db: float | None = None,
) -> ComparisonReport:
    if attenuation_db is not None and attenuation_db != ref.attenuation_db:
        raise RowMismatch(
            f"stats are for {attenuation_db} dB, reference row is {ref.attenuation_db} dB"
        )
    expected = ref.stats_for(mode)
    fields = []
    for name in ("min", "max", "mean", "std"):
        reference = expected[name]
        observed = getattr(stats, name)
        tolerance = ref.tolerances.get(name, DEFAULT_TOLERANCES[name])
        if reference == 0.0:
            rel = 0.0 if observed == 0.0 else float("inf")
        else:
            rel = (observed - reference) / reference
        fields.append(
            FieldComparison(
                field=name,
                reference=reference,
                observed=observed,
                relative_error=rel,
                tolerance=tolerance,
                passed=abs(rel) <= tolerance,
            )
        )
    return ComparisonReport(
        attenuation_db=ref.attenuation_db, mode=mode, fields=tuple(fields)
    )


@dataclass(frozen=True)
class ReferenceTables:
    connect: tuple[ReferenceRow, ...]
    handover_printed: tuple[ReferenceRow, ...]
    handover_surplus_ms: tuple[float, float]
    handover_max_s: float
    connect_q99: tuple[tuple[float, float], ...]   # (rssi_dbm, max seconds)
    handover_q99: tuple[tuple[float, float], ...]
    tolerances: dict[str, float]

    def connect_row(self, attenuation_db: float) -> ReferenceRow:
        for row in self.connect:
            if row.attenuation_db == attenuation_db:
                return row
        raise RowMismatch(f"no reference row at {attenuation_db} dB")

    def handover_target_row(self, attenuation_db: float, connect_mean: float) -> dict:
        """Prose-derived handover target: connect mean plus the surplus band."""
        low, high = self.handover_surplus_ms
        return {
            "mean_low": connect_mean + low / 1000.0,
            "mean_high": connect_mean + high / 1000.0,
            "max": self.handover_max_s,
        }


def load_reference_tables(path=None) -> ReferenceTables:
    if path is None:
        resource = importlib.resources.files("iolwsim.data") / "reference_tables.yaml"
        raw = yaml.safe_load(resource.read_text())
    else:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    tolerances = dict(DEFAULT_TOLERANCES)
    tolerances.update(raw.get("tolerances", {}))

    def rows(section) -> tuple[ReferenceRow, ...]:
        out = []
        for entry in raw[section]["rows"]:
            out.append(
                ReferenceRow(
                    attenuation_db=float(entry["attenuation_db"]),
                    rssi_dbm=float(entry["rssi_dbm"]),
                    iolw={k: float(v) for k, v in entry["iolw"].items()},
                    iolws={k: float(v) for k, v in entry["iolws"].items()},
                    tolerances=tolerances,
                )
            )
        return tuple(out)

    targets = raw["handover_targets"]
    return ReferenceTables(
        connect=rows("connect"),
        handover_printed=rows("handover_printed"),
        handover_surplus_ms=tuple(targets["surplus_over_connect_ms"]),
        handover_max_s=float(targets["max_s"]),
        connect_q99=tuple(
            (float(e["rssi_dbm"]), float(e["max_s"])) for e in raw["connect_q99"]
        ),
        handover_q99=tuple(
            (float(e["rssi_dbm"]), float(e["max_s"])) for e in targets["q99"]
        ),
        tolerances=tolerances,
    )
