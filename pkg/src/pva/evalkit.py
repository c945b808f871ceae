"""Event-level confusion accounting, the detection metric suite, and report
emission: sweep tables as CSV, line charts as standalone SVG, and richer
figure rendering through matplotlib.

Undefined ratios (0/0) are reported as None, never silently 0 or 1: small
event sets routinely hit empty classes.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

from .rhythm import Label

SWEEP_COLUMNS = (
    "T", "upload_frac", "mean_latency_ms", "total_energy_mj",
    "se", "sp", "ppv", "npv", "acc", "bac", "f1",
)


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


@dataclass(frozen=True)
class MetricsReport:
    se: float | None
    sp: float | None
    ppv: float | None
    npv: float | None
    acc: float | None
    bac: float | None
    f1: float | None

    def as_dict(self):
        return {
            "se": self.se, "sp": self.sp, "ppv": self.ppv, "npv": self.npv,
            "acc": self.acc, "bac": self.bac, "f1": self.f1,
        }


def event_confusion(decisions) -> ConfusionCounts:
    """Tally shock decisions against event truth labels."""
    tp = fn = tn = fp = 0
    for d in decisions:
        if d.truth is Label.VTVF:
            if d.shocked:
                tp += 1
            else:
                fn += 1
        else:
            if d.shocked:
                fp += 1
            else:
                tn += 1
    return ConfusionCounts(tp=tp, fn=fn, tn=tn, fp=fp)


def _ratio(num, den):
    return num / den if den > 0 else None


def harmonic_f1(ppv, se):
    if ppv is None or se is None or ppv + se == 0:
        return None
    return 2.0 * ppv * se / (ppv + se)


def metrics(c: ConfusionCounts) -> MetricsReport:
    """The full detection metric suite from event-level counts."""
    se = _ratio(c.tp, c.tp + c.fn)
    sp = _ratio(c.tn, c.tn + c.fp)
    ppv = _ratio(c.tp, c.tp + c.fp)
    npv = _ratio(c.tn, c.tn + c.fn)
    acc = _ratio(c.tp + c.tn, c.total)
    bac = (se + sp) / 2.0 if se is not None and sp is not None else None
    return MetricsReport(se=se, sp=sp, ppv=ppv, npv=npv, acc=acc, bac=bac,
                         f1=harmonic_f1(ppv, se))


@dataclass(frozen=True)
class SweepRow:
    t: float
    upload_frac: float
    mean_latency_ms: float
    total_energy_mj: float
    report: MetricsReport

    def value(self, column: str):
        if column == "T":
            return self.t
        if column in ("upload_frac", "mean_latency_ms", "total_energy_mj"):
            return getattr(self, column)
        return self.report.as_dict()[column]


def _fmt(v) -> str:
    if v is None:
        return "nan"
    return f"{v:.6f}"


def write_sweep_csv(rows, path):
    if not rows:
        raise ReportError("no sweep rows to write")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.value(c)) for c in SWEEP_COLUMNS])


def read_sweep_csv(path):
    rows = []
    with open(path) as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != list(SWEEP_COLUMNS):
            raise ReportError(f"unexpected sweep header in {path}")
        for raw in reader:
            vals = {}
            for c in SWEEP_COLUMNS:
                v = float(raw[c])
                vals[c] = None if math.isnan(v) else v
            report = MetricsReport(
                se=vals["se"], sp=vals["sp"], ppv=vals["ppv"], npv=vals["npv"],
                acc=vals["acc"], bac=vals["bac"], f1=vals["f1"],
            )
            rows.append(SweepRow(
                t=vals["T"],
                upload_frac=vals["upload_frac"],
                mean_latency_ms=vals["mean_latency_ms"],
                total_energy_mj=vals["total_energy_mj"],
                report=report,
            ))
    return rows


# ---------------------------------------------------------------------------
# Standalone SVG line charts: one polyline per series, labels as text
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_sweep_svg(rows, path, series=("acc", "se", "sp", "upload_frac"),
                    width=640, height=400, y_label="value"):
    """Render sweep series against the threshold as a minimal SVG chart."""
    if not rows:
        raise ReportError("no sweep rows to plot")
    ml, mr, mt, mb = 60, 150, 20, 45
    px_w, px_h = width - ml - mr, height - mt - mb

    xs = [row.t for row in rows]
    points = {}
    for name in series:
        vals = [row.value(name) for row in rows]
        points[name] = vals
    finite = [v for vals in points.values() for v in vals if v is not None]
    if not finite:
        raise ReportError("all requested series are undefined")
    y_lo, y_hi = min(finite), max(finite)
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0

    def sx(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * px_w

    def sy(y):
        return mt + (1.0 - (y - y_lo) / (y_hi - y_lo)) * px_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{mt + px_h}" x2="{ml + px_w}" y2="{mt + px_h}" '
        'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + px_h}" stroke="black"/>',
    ]
    for i in range(5):
        xv = x_lo + (x_hi - x_lo) * i / 4
        yv = y_lo + (y_hi - y_lo) * i / 4
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{mt + px_h + 16}" font-size="11" '
            f'text-anchor="middle">{xv:.2f}</text>'
        )
        parts.append(
            f'<text x="{ml - 6}" y="{sy(yv):.1f}" font-size="11" '
            f'text-anchor="end">{yv:.3g}</text>'
        )
    parts.append(
        f'<text x="{ml + px_w / 2:.1f}" y="{height - 8}" font-size="13" '
        'text-anchor="middle">T</text>'
    )
    parts.append(
        f'<text x="16" y="{mt + px_h / 2:.1f}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 16 {mt + px_h / 2:.1f})">{y_label}</text>'
    )
    for k, name in enumerate(series):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        pts = " ".join(
            f"{sx(x):.2f},{sy(v):.2f}"
            for x, v in zip(xs, points[name])
            if v is not None
        )
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{pts}"/>'
        )
        parts.append(
            f'<text x="{ml + px_w + 10}" y="{mt + 14 + 16 * k}" font-size="12" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


def emit_report(rows, path, format="csv", series=("acc", "se", "sp", "upload_frac")):
    """Write the sweep table as CSV or a line chart as SVG."""
    if format == "csv":
        write_sweep_csv(rows, path)
    elif format == "svg":
        write_sweep_svg(rows, path, series=series)
    else:
        raise ReportError(f"unknown report format {format!r}")


# ---------------------------------------------------------------------------
# Matplotlib figure rendering (PNG files alongside the delimited output)
# ---------------------------------------------------------------------------

_FIGURES = (
    ("accuracy", ("acc", "se", "sp", "f1"), "event metric"),
    ("upload", ("upload_frac",), "upload fraction"),
    ("latency", ("mean_latency_ms",), "mean latency (ms)"),
    ("energy", ("total_energy_mj",), "total energy (mJ)"),
)


def render_figures(rows, outdir, stem="sweep"):
    """Render the standard sweep figures to PNG files; returns written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    xs = [row.t for row in rows]
    written = []
    for name, series, ylabel in _FIGURES:
        fig, ax = plt.subplots(figsize=(5.2, 3.4))
        for label in series:
            ys = [row.value(label) for row in rows]
            ax.plot(xs, [float("nan") if y is None else y for y in ys],
                    marker="o", markersize=3, label=label)
        ax.set_xlabel("confidence threshold T")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        if len(series) > 1:
            ax.legend(fontsize=8)
        fig.tight_layout()
        path = outdir / f"{stem}_{name}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
