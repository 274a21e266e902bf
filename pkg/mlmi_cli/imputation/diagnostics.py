"""
Convergence diagnostics for sampler traces.

R-hat here is the Gelman-Rubin potential scale reduction applied to
contiguous segments of the post-burn-in trace (one chain split into
n_segments pieces, or every chain split that way when chains are merged).
"""
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import jinja2
import numpy as np
import pandas as pd
from scipy import stats

from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.mlmm_gibbs import PHASE_BURNIN, PHASE_IMPUTATION, ChainStore
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
PLOT_TEMPLATE = "plot.svg.j2"

DEFAULT_SEGMENTS = 4
DEFAULT_THRESHOLD = 1.05
PLOT_KINDS = ("trace", "acf", "posterior")

_BLOCK = re.compile(r"^(?P<block>[A-Za-z]+)\[(?P<index>.*)\]$")


@dataclass(frozen=True)
class Rhat:
    value: float
    n_segments: int


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float
    n: int


@dataclass(frozen=True)
class BlockSummary:
    block: str
    minimum: float
    q25: float
    mean: float
    q75: float
    maximum: float
    worst_name: str
    worst_value: float


@dataclass(frozen=True)
class ConvergenceReport:
    rhat: Dict[str, float]
    summary: Tuple[float, float, float, float, float]
    blocks: Tuple[BlockSummary, ...]
    worst_name: str
    worst_value: float
    threshold: float
    flagged: Tuple[str, ...]
    n_segments: int
    metadata: Dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return not self.flagged


# --- R-hat ---


def psrf_segments(segments: np.ndarray) -> float:
    """R-hat from a (k x L) array of equally long segments."""
    segments = np.asarray(segments, dtype=float)
    k, L = segments.shape
    if k < 2 or L < 2:
        raise ValidationError(f"Need at least 2 segments of length >= 2, got {k} x {L}")
    W = float(np.mean(np.var(segments, axis=1, ddof=1)))
    B = L * float(np.var(np.mean(segments, axis=1), ddof=1))
    if W <= 0.0:
        # every segment constant: identical segments converge trivially
        return 1.0 if B <= 0.0 else float("inf")
    V = ((L - 1.0) / L) * W + B / L
    return float(np.sqrt(V / W))


def _split(trace: np.ndarray, n_segments: int) -> np.ndarray:
    trace = np.asarray(trace, dtype=float).reshape(-1)
    if n_segments < 2:
        raise ValidationError("n_segments must be >= 2")
    if trace.shape[0] < 2 * n_segments:
        raise ValidationError(f"Trace of length {trace.shape[0]} is too short for {n_segments} segments")
    L = trace.shape[0] // n_segments
    # remainder dropped from the front (earliest draws)
    return trace[trace.shape[0] - L * n_segments :].reshape(n_segments, L)


def potential_scale_reduction(trace, n_segments: int = DEFAULT_SEGMENTS) -> Rhat:
    return Rhat(value=psrf_segments(_split(trace, n_segments)), n_segments=n_segments)


def _chain_segments(traces: Sequence[np.ndarray], n_segments: int) -> np.ndarray:
    if len(traces) == 1:
        return _split(traces[0], n_segments)
    shortest = min(t.shape[0] for t in traces)
    return np.vstack([_split(t[t.shape[0] - shortest :], n_segments) for t in traces])


# --- ACF and summaries ---


def autocorrelation(trace, lags: Sequence[int]) -> np.ndarray:
    """Sample autocorrelation at the requested lags; NaN everywhere for a constant trace."""
    x = np.asarray(trace, dtype=float).reshape(-1)
    lags = [int(k) for k in lags]
    n = x.shape[0]
    if any(k < 0 for k in lags):
        raise ValidationError("Lags must be non-negative")
    if lags and max(lags) >= n:
        raise ValidationError(f"Lag {max(lags)} is not smaller than the trace length {n}")
    dev = x - x.mean()
    denom = float(dev @ dev)
    if denom == 0.0:
        return np.full(len(lags), np.nan)
    return np.array([float(dev[: n - k] @ dev[k:]) / denom for k in lags])


def posterior_summary(trace) -> PosteriorSummary:
    x = np.asarray(trace, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValidationError("Cannot summarize an empty trace")
    q025, q50, q975 = np.quantile(x, [0.025, 0.5, 0.975], method="linear")
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return PosteriorSummary(mean=float(x.mean()), sd=sd, q025=float(q025), q50=float(q50), q975=float(q975), n=int(x.size))


# --- Report ---


def parameter_block(name: str) -> Tuple[str, str]:
    """'Psi[1,2]' -> ('Psi', '1,2')."""
    match = _BLOCK.match(name)
    if not match:
        return name, ""
    return match.group("block"), match.group("index")


def _five_numbers(values: np.ndarray) -> Tuple[float, float, float, float, float]:
    q25, q75 = np.quantile(values, [0.25, 0.75], method="linear")
    return float(values.min()), float(q25), float(values.mean()), float(q75), float(values.max())


def _worst(rhat: Dict[str, float], names: Sequence[str]) -> Tuple[str, float]:
    # largest value first, ties by name
    name = sorted(names, key=lambda n: (-rhat[n], n))[0]
    return name, rhat[name]


def convergence_report(store: ChainStore, n_segments: int = DEFAULT_SEGMENTS, threshold: float = DEFAULT_THRESHOLD, metadata: Dict = None) -> ConvergenceReport:
    """R-hat per parameter over the imputation phase, summarized per block."""
    if not np.any(store.phases == PHASE_IMPUTATION):
        raise ValidationError("Chain store has no stored iterations after burn-in")

    chain_ids = store.chains()
    rhat = {}
    for name in store.names:
        traces = [store.post_burnin(name, chain=c) for c in chain_ids]
        rhat[name] = psrf_segments(_chain_segments(traces, n_segments))

    values = np.array([rhat[n] for n in store.names])
    worst_name, worst_value = _worst(rhat, store.names)

    blocks = []
    for block in dict.fromkeys(parameter_block(n)[0] for n in store.names):
        names = [n for n in store.names if parameter_block(n)[0] == block]
        block_values = np.array([rhat[n] for n in names])
        b_name, b_value = _worst(rhat, names)
        blocks.append(BlockSummary(block, *_five_numbers(block_values), worst_name=b_name, worst_value=b_value))

    flagged = tuple(n for n in store.names if rhat[n] > threshold)
    if flagged:
        logger.warning(f"{len(flagged)} parameter(s) exceed R-hat {threshold:.3f}; a longer burn-in may be required")

    return ConvergenceReport(
        rhat=rhat,
        summary=_five_numbers(values),
        blocks=tuple(blocks),
        worst_name=worst_name,
        worst_value=worst_value,
        threshold=threshold,
        flagged=flagged,
        n_segments=n_segments,
        metadata=dict(metadata or {}),
    )


# --- Plot export ---


def _scale(values: np.ndarray, lo: float, hi: float, out_lo: float, out_hi: float) -> np.ndarray:
    if hi <= lo:
        return np.full(values.shape, (out_lo + out_hi) / 2.0)
    return out_lo + (values - lo) * (out_hi - out_lo) / (hi - lo)


class _Canvas:
    width = 640
    height = 360
    left = 60
    right = 20
    top = 40
    bottom = 50

    def __init__(self, x_range, y_range):
        self.x_range = x_range
        self.y_range = y_range

    def x(self, values):
        return _scale(np.asarray(values, dtype=float), *self.x_range, self.left, self.width - self.right)

    def y(self, values):
        return _scale(np.asarray(values, dtype=float), *self.y_range, self.height - self.bottom, self.top)

    def points(self, xs, ys) -> str:
        return " ".join(f"{px:.2f},{py:.2f}" for px, py in zip(self.x(xs), self.y(ys)))


def _padded(lo: float, hi: float) -> Tuple[float, float]:
    if hi <= lo:
        return lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_svg(title: str, x_label: str, y_label: str, canvas: _Canvas, polylines: List[Dict], segments: List[Dict]) -> str:
    template = jinja2.Template((TEMPLATE_DIR / PLOT_TEMPLATE).read_text(encoding="utf-8"), autoescape=True)
    x_ticks = [{"pos": float(canvas.x([v])[0]), "label": f"{v:.4g}"} for v in np.linspace(*canvas.x_range, 5)]
    y_ticks = [{"pos": float(canvas.y([v])[0]), "label": f"{v:.4g}"} for v in np.linspace(*canvas.y_range, 5)]
    return template.render(
        title=title,
        x_label=x_label,
        y_label=y_label,
        width=canvas.width,
        height=canvas.height,
        left=canvas.left,
        right=canvas.width - canvas.right,
        top=canvas.top,
        bottom=canvas.height - canvas.bottom,
        x_ticks=x_ticks,
        y_ticks=y_ticks,
        polylines=polylines,
        segments=segments,
    )


def _trace_table(store: ChainStore, parameter: str) -> pd.DataFrame:
    frame = pd.DataFrame({"iteration": store.iterations, "phase": store.phases, "value": store.trace(parameter)})
    if store.n_chains > 1:
        frame.insert(0, "chain", store.chain_ids)
    return frame


def _trace_svg(store: ChainStore, parameter: str, table: pd.DataFrame) -> str:
    canvas = _Canvas(_padded(float(table["iteration"].min()), float(table["iteration"].max())), _padded(float(table["value"].min()), float(table["value"].max())))
    polylines = []
    for chain in store.chains():
        keep = store.chain_ids == chain
        polylines.append({"points": canvas.points(store.iterations[keep], store.values[keep, store.names.index(parameter)]), "cls": "series"})
    segments = []
    burn = store.iterations[store.phases == PHASE_BURNIN]
    if burn.size:
        px = float(canvas.x([store.burnin_end])[0])
        segments.append({"x1": px, "y1": canvas.top, "x2": px, "y2": canvas.height - canvas.bottom, "cls": "marker"})
    return render_svg(f"Trace of {parameter}", "iteration", parameter, canvas, polylines, segments)


def _acf_svg(parameter: str, table: pd.DataFrame) -> str:
    rho = table["rho"].fillna(0.0).to_numpy()
    canvas = _Canvas(_padded(0.0, float(table["lag"].max()) or 1.0), (min(-0.1, float(rho.min())), 1.05))
    zero = float(canvas.y([0.0])[0])
    segments = [{"x1": canvas.left, "y1": zero, "x2": canvas.width - canvas.right, "y2": zero, "cls": "axis"}]
    for lag, value in zip(table["lag"], rho):
        px = float(canvas.x([lag])[0])
        segments.append({"x1": px, "y1": zero, "x2": px, "y2": float(canvas.y([value])[0]), "cls": "series"})
    return render_svg(f"Autocorrelation of {parameter}", "lag", "rho", canvas, [], segments)


def _posterior_svg(parameter: str, draws: np.ndarray, summary: PosteriorSummary) -> str:
    lo, hi = _padded(float(draws.min()), float(draws.max()))
    grid = np.linspace(lo, hi, 200)
    if np.ptp(draws) > 0 and draws.size > 1:
        density = stats.gaussian_kde(draws)(grid)
    else:
        density = np.zeros_like(grid)
    canvas = _Canvas((lo, hi), (0.0, float(density.max()) * 1.05 or 1.0))
    segments = []
    for value in (summary.q025, summary.q50, summary.q975):
        px = float(canvas.x([value])[0])
        segments.append({"x1": px, "y1": canvas.top, "x2": px, "y2": canvas.height - canvas.bottom, "cls": "marker"})
    polylines = [{"points": canvas.points(grid, density), "cls": "series"}]
    return render_svg(f"Posterior of {parameter}", parameter, "density", canvas, polylines, segments)


def export_plot_data(store: ChainStore, parameter: str, what: str, out_path=None, svg_path=None, lags: Sequence[int] = None) -> pd.DataFrame:
    """
    Tabulate one parameter for plotting and optionally write the table and an SVG.

    trace: (iteration, phase, value), every stored iteration from both phases.
    acf: (lag, rho) on the imputation phase.
    posterior: (statistic, value) summary rows on the imputation phase.
    """
    if what not in PLOT_KINDS:
        raise ValidationError(f"Unknown plot kind '{what}' (expected one of: {', '.join(PLOT_KINDS)})")
    store.trace(parameter)

    svg = None
    if what == "trace":
        table = _trace_table(store, parameter)
        if svg_path is not None:
            svg = _trace_svg(store, parameter, table)
    else:
        draws = store.post_burnin(parameter)
        if draws.size == 0:
            raise ValidationError("Chain store has no stored iterations after burn-in")
        if what == "acf":
            lags = list(lags) if lags is not None else list(range(min(50, draws.size - 1) + 1))
            table = pd.DataFrame({"lag": lags, "rho": autocorrelation(draws, lags)})
            if svg_path is not None:
                svg = _acf_svg(parameter, table)
        else:
            summary = posterior_summary(draws)
            table = pd.DataFrame(
                {
                    "statistic": ["mean", "sd", "q2.5", "q50", "q97.5", "n"],
                    "value": [summary.mean, summary.sd, summary.q025, summary.q50, summary.q975, summary.n],
                }
            )
            if svg_path is not None:
                svg = _posterior_svg(parameter, draws, summary)

    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_path, index=False, na_rep="NA", lineterminator="\n")
        logger.info(f"Wrote {what} data for {parameter} to {out_path}")
    if svg is not None:
        svg_path = Path(svg_path)
        svg_path.parent.mkdir(parents=True, exist_ok=True)
        svg_path.write_text(svg, encoding="utf-8")
        logger.info(f"Wrote {what} plot for {parameter} to {svg_path}")
    return table
