"""
Validation observables and scaling metrics.

The throughput model is

    tr(n_p) = 1 / (alpha / n_p + beta)

with alpha the cost of the whole system and beta the per-rank cost that
does not shrink with the rank count (ghost atoms). It is linear in the
reciprocals, 1/tr = alpha · (1/n_p) + beta, which is where it is fitted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize, stats

from .exceptions import ParseError, ScalingFitError
from .system import AtomSet, SimBox, minimum_image
from .util import PathLike

logger = logging.getLogger(__name__)

STRONG = "strong"
WEAK = "weak"
WEAK_EFFICIENCY_DEFINITION = (
    "weak-scaling efficiency = tr(n) / tr(ref) of the system replicated n/ref times; "
    "every replica advances the same simulated time, so this is the per-replica throughput ratio"
)


def gyration_radii(atoms: AtomSet, group: Iterable[int], box: Optional[SimBox] = None) -> Tuple[float, float, float]:
    """
    Mass-weighted radii of gyration about the x, y and z axes through the
    group's center of mass.

    With a periodic `box` the group is first made whole: every atom is moved
    to its image nearest a reference, twice (first atom, then the center of mass).

    >>> atoms = AtomSet([0, 1], [0, 0], [[-1.0, 0, 0], [1.0, 0, 0]])
    >>> gyration_radii(atoms, [0, 1])
    (0.0, 1.0, 1.0)
    """
    ids = np.fromiter(group, dtype=np.int64)
    select = np.isin(atoms.global_ids, ids)
    if not np.any(select):
        raise ValueError("the gyration group is empty")
    pos = atoms.positions[select]
    m = atoms.masses[select]
    if box is not None and any(box.periodic):
        pos = pos[0] + minimum_image(pos - pos[0], box)
        com = np.average(pos, axis=0, weights=m)
        pos = com + minimum_image(pos - com, box)
    com = np.average(pos, axis=0, weights=m)
    d2 = (pos - com) ** 2
    total = np.sum(m)
    radii = []
    for axis in range(3):
        perpendicular = np.sum(d2, axis=1) - d2[:, axis]
        radii.append(float(np.sqrt(np.sum(m * perpendicular) / total)))
    return radii[0], radii[1], radii[2]


@dataclass
class StabilityReport:
    """Outcome of `stability_check`"""

    passed: bool
    max_deviation: float
    drift_slope: float
    windowed: pd.DataFrame


def stability_check(series: Union[pd.DataFrame, np.ndarray], window: int, band: float) -> StabilityReport:
    """
    Pass when every rolling-window mean of every column stays within ±`band`
    (relative) of the first window's mean.

    `drift_slope` is the largest least-squares slope per sample, relative to
    the first window's mean.
    """
    df = pd.DataFrame(series)
    if window < 1 or len(df) < window:
        raise ValueError(f"need at least window={window} samples, got {len(df)}")
    windowed = df.rolling(window).mean().dropna()
    first = windowed.iloc[0]
    scale = first.abs().where(first.abs() > 0, 1.0)
    deviation = ((windowed - first).abs() / scale).to_numpy()
    t = np.arange(len(df), dtype=np.float64)
    slopes = [np.polyfit(t, df[c].to_numpy(dtype=np.float64), 1)[0] / scale[c] for c in df.columns] if len(df) > 1 else [0.0]
    drift = float(max(slopes, key=abs))
    max_deviation = float(deviation.max())
    passed = max_deviation <= band
    logger.info("stability: max deviation %.3g (band %.3g), drift %.3g per sample", max_deviation, band, drift)
    return StabilityReport(bool(passed), max_deviation, drift, windowed)


def predict_throughput(alpha: float, beta: float, n_p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Throughput on `n_p` ranks

    >>> round(predict_throughput(8.0, 0.5, 8), 4)
    0.6667
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    if alpha == 0 and beta == 0:
        raise ScalingFitError("throughput is undefined for alpha = beta = 0")
    if np.any(np.asarray(n_p) < 1):
        raise ValueError("n_p must be at least 1")
    return 1.0 / (alpha / n_p + beta)


@dataclass
class ScalingFit:
    """Fitted throughput-model coefficients"""

    alpha: float
    beta: float
    r_squared: float
    residuals: np.ndarray

    def predict(self, n_p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """Throughput predicted by the fit"""
        return predict_throughput(self.alpha, self.beta, n_p)

    def to_dict(self) -> dict:
        """JSON-ready form"""
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "r_squared": self.r_squared,
            "residuals": self.residuals.tolist(),
        }


def fit_throughput(points: Union[pd.DataFrame, Sequence[Tuple[float, float]]]) -> ScalingFit:
    """
    Least squares on 1/tr = alpha/n_p + beta with both coefficients kept
    non-negative; r² is that of the linearized fit.

    >>> fit = fit_throughput([(n, 1 / (800 / n + 12.5)) for n in (1, 2, 4, 8)])
    >>> round(fit.alpha, 6), round(fit.beta, 6), round(fit.r_squared, 6)
    (800.0, 12.5, 1.0)
    """
    n_p, tr = _points(points)
    if len(np.unique(n_p)) < 2:
        raise ScalingFitError("fitting needs at least two distinct rank counts")
    if np.any(tr <= 0):
        raise ScalingFitError("throughputs must be positive")
    x, y = 1.0 / n_p, 1.0 / tr
    design = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    if np.any(coef < 0):
        coef, _ = optimize.nnls(design, y)
        logger.warning("throughput fit clamped to alpha=%.4g beta=%.4g", coef[0], coef[1])
    residuals = y - design @ coef
    ss_res = float(np.sum(residuals**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(coef[0]), float(coef[1]), r_squared, residuals)


def _points(points: Union[pd.DataFrame, Sequence[Tuple[float, float]]]) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(points, pd.DataFrame):
        return points["n_ranks"].to_numpy(dtype=np.float64), points["throughput"].to_numpy(dtype=np.float64)
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def read_points(path: PathLike) -> pd.DataFrame:
    """Read a sweep CSV with at least the columns n_ranks and throughput"""
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"{path}: {e}") from e
    missing = {"n_ranks", "throughput"} - set(df.columns)
    if missing:
        raise ParseError(f"{path}: missing columns {sorted(missing)}", 1)
    return df


def scaling_efficiency(throughputs: Mapping[int, float], reference: int, mode: str = STRONG) -> Dict[int, float]:
    """
    Efficiency relative to `reference` ranks.

    Strong: (tr(n) / tr(ref)) · (ref / n). Weak: tr(n) / tr(ref), see
    `WEAK_EFFICIENCY_DEFINITION`.

    >>> scaling_efficiency({8: 1.0, 16: 2.0, 32: 2.0}, 8)
    {8: 1.0, 16: 1.0, 32: 0.5}
    """
    if reference not in throughputs:
        raise ValueError(f"reference rank count {reference} has no throughput")
    if mode not in (STRONG, WEAK):
        raise ValueError(f"mode must be {STRONG!r} or {WEAK!r}")
    ref_tr = throughputs[reference]
    if mode == WEAK:
        return {n: tr / ref_tr for n, tr in throughputs.items()}
    return {n: (tr / ref_tr) * (reference / n) for n, tr in throughputs.items()}


def model_efficiency(alpha: float, beta: float, n: int, reference: int) -> float:
    """
    Strong-scaling efficiency implied by the throughput model,
    (alpha + beta·ref) / (alpha + beta·n)
    """
    return float(predict_throughput(alpha, beta, n) / predict_throughput(alpha, beta, reference) * reference / n)


def beta_for_efficiency(target: float, n: int, reference: int, alpha: float = 1.0) -> float:
    """
    The beta at which the model's efficiency on `n` ranks equals `target`

    >>> beta = beta_for_efficiency(0.66, 16, 8)
    >>> round(model_efficiency(1.0, beta, 32, 8), 6)
    0.392857
    """
    if not reference / n < target <= 1.0:
        raise ValueError(f"target efficiency must lie in ({reference / n:g}, 1]")
    return alpha * (1.0 - target) / (target * n - reference)


@dataclass
class ImbalanceReport:
    """Per-rank inference seconds and the resulting imbalance"""

    seconds: np.ndarray
    lam: float
    sync_overhead: float


def load_imbalance(seconds: Sequence[float]) -> ImbalanceReport:
    """
    lambda = t_max / t_mean - 1 and sync overhead Σ_r (t_max - t_r)

    >>> report = load_imbalance([1.0, 1.0, 1.0, 2.0])
    >>> round(report.lam, 12), report.sync_overhead
    (0.6, 3.0)
    """
    t = np.asarray(seconds, dtype=np.float64)
    if not t.size:
        raise ValueError("need at least one rank")
    mean = float(np.mean(t))
    lam = float(t.max() / mean - 1.0) if mean > 0 else 0.0
    return ImbalanceReport(t, max(lam, 0.0), float(np.sum(t.max() - t)))


def load_correlation(loads: Sequence[float], seconds: Sequence[float]) -> float:
    """Pearson correlation between per-rank atom load and time"""
    if len(loads) < 2:
        raise ValueError("correlation needs at least two points")
    return float(stats.pearsonr(np.asarray(loads, dtype=np.float64), np.asarray(seconds, dtype=np.float64))[0])


def efficiency_table(
    points: pd.DataFrame, fit: ScalingFit, reference: int, mode: str = STRONG
) -> pd.DataFrame:
    """Measured and modeled throughput and efficiency per rank count"""
    means = points.groupby("n_ranks")["throughput"].mean()
    measured = scaling_efficiency({int(n): float(t) for n, t in means.items()}, reference, mode)
    n_p = means.index.to_numpy(dtype=np.float64)
    modeled_tr = fit.predict(n_p)
    modeled = modeled_tr / fit.predict(float(reference))
    if mode == STRONG:
        modeled = modeled * reference / n_p
    return pd.DataFrame(
        {
            "n_ranks": means.index.astype(int),
            "throughput": means.to_numpy(),
            "model_throughput": modeled_tr,
            "efficiency": [measured[int(n)] for n in means.index],
            "model_efficiency": modeled,
        }
    )
