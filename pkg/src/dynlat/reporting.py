"""Sweep reports, latency comparisons, and figure rendering.

Reports are line-delimited JSON: a header record with provenance (config
hash, seed, code version) followed by one record per policy grid point.
Alongside each report the sweep writes a two-column ``revisions,cer`` CSV
series per model and renders the matching figure to PNG. Relative
improvements between reports are computed as ``(base - new) / base``.

``wall_clock_s`` is the one volatile field in a report; everything else is
a pure function of config and seed, so re-runs produce identical files once
that field is ignored.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from dynlat.errors import ConfigError

REPORT_TAG = "dynlat-report"
REPORT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Short stable digest of a JSON-serializable config."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


@dataclass
class SweepRow:
    model: str
    encoder_revise: int
    decoder_revise: int
    chunk_frames: int
    latency_ms: float
    mean_cer: Optional[float]
    utterances: int
    wall_clock_s: float
    error: Optional[str] = None


@dataclass
class SweepReport:
    metadata: Dict[str, object]
    rows: List[SweepRow] = field(default_factory=list)


def write_report(path, report: SweepReport) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {"format": REPORT_TAG, "version": REPORT_VERSION, **report.metadata}
        fh.write(canonical_json(header) + "\n")
        for row in report.rows:
            fh.write(canonical_json(asdict(row)) + "\n")


def read_report(path) -> SweepReport:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != REPORT_TAG:
            raise ConfigError(f"{path}: not a {REPORT_TAG} file")
        if header.get("version") != REPORT_VERSION:
            raise ConfigError(f"{path}: unsupported report version {header.get('version')}")
        metadata = {k: v for k, v in header.items() if k not in ("format", "version")}
        rows = []
        for line in fh:
            if line.strip():
                rows.append(SweepRow(**json.loads(line)))
    return SweepReport(metadata=metadata, rows=rows)


def relative_improvement_pct(base_cer: float, new_cer: float) -> float:
    """Percentage reduction of CER relative to the baseline."""
    if base_cer == 0:
        return 0.0
    return (base_cer - new_cer) / base_cer * 100.0


def compare_reports(reports: Sequence[SweepReport], names: Sequence[str]) -> List[dict]:
    """Join usable rows across reports by latency; first report is the base.

    Rows whose latency has no counterpart in the base are flagged, not
    fatal. Rows that errored during their sweep are skipped.
    """
    if not reports:
        raise ConfigError("need at least one report")

    def usable(report):
        return {row.latency_ms: row for row in report.rows if row.error is None and row.mean_cer is not None}

    base = usable(reports[0])
    joined: List[dict] = []
    latencies = sorted({lat for rep in reports for lat in usable(rep)})
    for lat in latencies:
        entry: Dict[str, object] = {"latency_ms": lat, "unmatched": lat not in base}
        for name, rep in zip(names, reports):
            row = usable(rep).get(lat)
            if row is None:
                continue
            entry[f"cer:{name}"] = row.mean_cer
            if lat in base and rep is not reports[0]:
                entry[f"improvement_pct:{name}"] = round(
                    relative_improvement_pct(base[lat].mean_cer, row.mean_cer), 2
                )
        joined.append(entry)
    return joined


def format_comparison_table(joined: List[dict], names: Sequence[str]) -> str:
    headers = ["latency_ms"]
    for name in names:
        headers.append(f"cer:{name}")
    for name in names[1:]:
        headers.append(f"impr%:{name}")
    lines = ["  ".join(f"{h:>16}" for h in headers)]
    for entry in joined:
        cells = [f"{entry['latency_ms']:>16.1f}"]
        for name in names:
            val = entry.get(f"cer:{name}")
            cells.append(f"{val:>16.4f}" if val is not None else f"{'-':>16}")
        for name in names[1:]:
            val = entry.get(f"improvement_pct:{name}")
            cells.append(f"{val:>16.2f}" if val is not None else f"{'-':>16}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def write_series(path, rows: Sequence[SweepRow]) -> None:
    """Two-column CER-vs-revisions series for external plotting."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("revisions,cer\n")
        for row in sorted(rows, key=lambda r: (r.decoder_revise, r.encoder_revise)):
            if row.error is None and row.mean_cer is not None:
                fh.write(f"{row.decoder_revise},{row.mean_cer:.6f}\n")


def render_sweep_figure(path, rows_by_model: Dict[str, List[SweepRow]]) -> None:
    """CER against revision depth, one line per model."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in sorted(rows_by_model.items()):
        pts = sorted(
            ((r.decoder_revise, r.mean_cer) for r in rows if r.error is None and r.mean_cer is not None),
        )
        if pts:
            ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("revisions (chunks)")
    ax.set_ylabel("CER (%)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_comparison_figure(path, joined: List[dict], names: Sequence[str]) -> None:
    """Grouped bars of CER by latency for each report."""
    fig, ax = plt.subplots(figsize=(6, 4))
    latencies = [entry["latency_ms"] for entry in joined]
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        xs, ys = [], []
        for j, entry in enumerate(joined):
            val = entry.get(f"cer:{name}")
            if val is not None:
                xs.append(j + i * width)
                ys.append(100 * val)
        ax.bar(xs, ys, width=width, label=name)
    ax.set_xticks([j + width * (len(names) - 1) / 2 for j in range(len(joined))])
    ax.set_xticklabels([f"{lat:.0f} ms" for lat in latencies])
    ax.set_xlabel("algorithmic latency")
    ax.set_ylabel("CER (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
