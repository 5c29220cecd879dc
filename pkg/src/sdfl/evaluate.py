"""Objective evaluation: output SNR, octile tranches, aggregation tables.

Scores are global energy-ratio SNRs.  Test files are ranked by a pluggable
per-file difficulty score (by default the measured SNR of the noisy input;
alternatively any externally computed score loaded from CSV) and split into
8 equal tranches, tranche 1 holding the worst scores.  Reports carry the
overall mean plus per-tranche means for every system, with the noisy input
itself always present as the "Noisy" baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SNR_CAP_DB = 120.0
RESIDUAL_FLOOR = 1e-12


def snr_metric(clean: np.ndarray, estimate: np.ndarray) -> float:
    """10*log10 of clean energy over residual energy, capped at +120 dB.

    The cap triggers when the residual energy drops below 1e-12 of the clean
    energy, so a perfect estimate scores +120 instead of infinity.
    """
    clean = np.asarray(clean, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if clean.shape != estimate.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {estimate.shape}")
    e_clean = float(np.sum(clean ** 2))
    if e_clean == 0.0:
        raise ValueError("clean reference is silent")
    e_res = float(np.sum((estimate - clean) ** 2))
    if e_res < RESIDUAL_FLOOR * e_clean:
        return SNR_CAP_DB
    return 10.0 * np.log10(e_clean / e_res)


@dataclass
class ScoreRecord:
    id: str
    score: float
    tranche: int | None = None


def partition_octiles(records: list[ScoreRecord],
                      n_tranches: int = 8) -> dict[str, int]:
    """Assign tranches 1..n by ascending score (ties broken by id).

    Sizes are as equal as possible; when the count is not divisible the
    first (worst) tranches take the extra element.  Returns {id: tranche}
    and stamps each record in place.
    """
    if len(records) < n_tranches:
        raise ValueError(f"need at least {n_tranches} records, got {len(records)}")
    ranked = sorted(records, key=lambda r: (r.score, r.id))
    base, extra = divmod(len(ranked), n_tranches)
    assignment: dict[str, int] = {}
    pos = 0
    for tranche in range(1, n_tranches + 1):
        size = base + (1 if tranche <= extra else 0)
        for rec in ranked[pos:pos + size]:
            rec.tranche = tranche
            assignment[rec.id] = tranche
        pos += size
    return assignment


@dataclass
class ReportRow:
    system: str
    tranche: int                    # 0 = overall
    n_files: int
    mean_snr_db: float


@dataclass
class Report:
    rows: list[ReportRow]
    tranches: dict[str, int]
    n_tranches: int
    partition_key: str

    def cell(self, system: str, tranche: int) -> float:
        for row in self.rows:
            if row.system == system and row.tranche == tranche:
                return row.mean_snr_db
        raise KeyError((system, tranche))


def evaluate_corpus(files: list[dict], systems: dict[str, dict[str, np.ndarray]],
                    external_scores: dict[str, float] | None = None,
                    n_tranches: int = 8) -> Report:
    """Score every system on every test file and aggregate per tranche.

    ``files`` rows need ``id``, ``clean`` and ``noisy`` sample arrays.  Each
    system maps file id -> estimate samples and must cover every file.  The
    noisy inputs are scored as the implicit "Noisy" system.  Ranking uses the
    measured input SNR unless ``external_scores`` supplies id -> score.
    """
    if not files:
        raise ValueError("no test files")
    ids = [f["id"] for f in files]
    all_systems = {"Noisy": {f["id"]: f["noisy"] for f in files}}
    for name, outputs in systems.items():
        if name == "Noisy":
            raise ValueError('"Noisy" is reserved for the unprocessed input')
        missing = [i for i in ids if i not in outputs]
        if missing:
            raise ValueError(f"system {name!r} lacks outputs for {missing}")
        all_systems[name] = outputs

    per_file: dict[str, dict[str, float]] = {name: {} for name in all_systems}
    for f in files:
        for name, outputs in all_systems.items():
            per_file[name][f["id"]] = snr_metric(f["clean"], outputs[f["id"]])

    if external_scores is not None:
        unknown = [i for i in ids if i not in external_scores]
        if unknown:
            raise ValueError(f"external score CSV lacks ids {unknown}")
        key = "external"
        scores = [ScoreRecord(i, float(external_scores[i])) for i in ids]
    else:
        key = "input-snr"
        scores = [ScoreRecord(i, per_file["Noisy"][i]) for i in ids]
    tranches = partition_octiles(scores, n_tranches)

    rows = []
    for name in all_systems:
        vals = np.array([per_file[name][i] for i in ids])
        rows.append(ReportRow(name, 0, len(ids), float(vals.mean())))
        for tranche in range(1, n_tranches + 1):
            sel = np.array([per_file[name][i] for i in ids
                            if tranches[i] == tranche])
            rows.append(ReportRow(name, tranche, len(sel), float(sel.mean())))
    return Report(rows, tranches, n_tranches, key)


def report_csv_lines(report: Report) -> list[str]:
    lines = ["system,tranche,n_files,mean_snr_db"]
    for row in report.rows:
        lines.append(f"{row.system},{row.tranche},{row.n_files},"
                     f"{row.mean_snr_db:.6f}")
    return lines


def report_text(report: Report) -> str:
    """Aligned table: one row per system, overall plus per-tranche means."""
    systems = []
    for row in report.rows:
        if row.system not in systems:
            systems.append(row.system)
    width = max(len(s) for s in systems + ["system"]) + 2
    header = "system".ljust(width) + "overall" + "".join(
        f"  T{t}".rjust(9) for t in range(1, report.n_tranches + 1))
    lines = [header, "-" * len(header)]
    for name in systems:
        cells = [f"{report.cell(name, 0):7.2f}"]
        cells += [f"{report.cell(name, t):7.2f}"
                  for t in range(1, report.n_tranches + 1)]
        lines.append(name.ljust(width) + "  ".join(cells))
    lines.append("-" * len(header))
    lines.append(f"mean SNR in dB; tranche 1 = hardest by {report.partition_key} "
                 f"ranking; SNR capped at +{SNR_CAP_DB:.0f} dB "
                 f"(residual below {RESIDUAL_FLOOR:g} of reference energy)")
    return "\n".join(lines)
