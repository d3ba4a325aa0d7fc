import csv
import datetime as dt
import logging
import os

import numpy as np

from app.errors import TimelineError
from app.schemas import ClassHistogram, RipenessSeries, RiskConfig, RiskRecord, Variety, VarietyRisk

logger = logging.getLogger(__name__)


def red_fraction(hist: ClassHistogram, cfg: RiskConfig) -> float:
    return float(sum(hist.fractions[c - 1] for c in cfg.red_classes))


def ripeness_from_red_fractions(red_fractions) -> np.ndarray:
    """Red fraction on each date over the red fraction on the final date."""
    red = np.asarray(red_fractions, dtype=np.float64)
    if len(red) == 0 or not red[-1] > 0:
        raise TimelineError("undefined ratio: the final date has no red berries")
    ratios = red / red[-1]
    ratios[-1] = 1.0
    return ratios


def ripeness_series(hists: list[ClassHistogram], cfg: RiskConfig) -> RipenessSeries:
    if len(hists) < 2:
        raise TimelineError(f"a ripeness series needs at least 2 dates, got {len(hists)}")
    bogs = {h.bog_id for h in hists}
    if len(bogs) != 1:
        raise TimelineError(f"histograms of several bogs in one series: {sorted(bogs)}")
    dates = [h.date for h in hists]
    for a, b in zip(dates, dates[1:]):
        if a >= b:
            raise TimelineError(f"dates are not strictly increasing ({a} then {b})")

    red = [red_fraction(h, cfg) for h in hists]
    ratios = ripeness_from_red_fractions(red)
    varieties = {h.variety for h in hists if h.variety is not None}
    return RipenessSeries(
        bog_id=hists[0].bog_id,
        variety=varieties.pop() if len(varieties) == 1 else None,
        dates=dates,
        red_fractions=red,
        ratios=[float(r) for r in ratios],
        risk_dates=[d for d, r in zip(dates, ratios) if r >= cfg.threshold],
        threshold=cfg.threshold,
    )


def first_risk_date(series: RipenessSeries) -> dt.date | None:
    return series.risk_dates[0] if series.risk_dates else None


def variety_comparison(all_series: list[RipenessSeries]) -> list[VarietyRisk]:
    """Varieties ordered by mean day of year of the first risk date, fastest first.

    Equal means are ordered by variety name.
    """
    days: dict[Variety, list[int]] = {}
    years: dict[Variety, int] = {}
    for series in all_series:
        if series.variety is None:
            logger.warning("series of bog %s has no variety, left out of the comparison", series.bog_id)
            continue
        days.setdefault(series.variety, [])
        first = first_risk_date(series)
        if first is not None:
            days[series.variety].append(first.timetuple().tm_yday)
            years.setdefault(series.variety, first.year)

    ranking = []
    for variety, crossing in days.items():
        if not crossing:
            logger.warning("variety %s never crosses the risk threshold, excluded", variety.value)
            continue
        mean_day = float(np.mean(crossing))
        mean_date = dt.date(years[variety], 1, 1) + dt.timedelta(days=round(mean_day) - 1)
        ranking.append(
            VarietyRisk(
                variety=variety,
                mean_day_of_year=mean_day,
                mean_first_risk_date=mean_date,
                n_series=len(crossing),
            )
        )
    ranking.sort(key=lambda v: (v.mean_day_of_year, v.variety.value))
    return ranking


def risk_report(all_series: list[RipenessSeries]) -> list[RiskRecord]:
    return [
        RiskRecord(bog=s.bog_id, variety=s.variety, first_risk_date=first_risk_date(s), threshold=s.threshold)
        for s in all_series
    ]


def write_ripeness_csv(all_series: list[RipenessSeries], path: str | os.PathLike) -> None:
    """Ratio table, one row per bog and one column per date (blank where a bog has no visit)."""
    dates = sorted({d for s in all_series for d in s.dates})
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bog", *(d.isoformat() for d in dates)])
        for s in all_series:
            by_date = dict(zip(s.dates, s.ratios))
            writer.writerow([s.bog_id, *(f"{by_date[d]:.3f}" if d in by_date else "" for d in dates)])
