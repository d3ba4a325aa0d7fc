from fastapi import APIRouter, HTTPException

from app.errors import CranberryError
from app.schemas import FirstRiskResponse, RipenessSeries, RiskConfig, SeriesRequest, VarietyRisk
from app.timeline import first_risk_date, ripeness_series, variety_comparison

router = APIRouter(prefix="/api/ripeness", tags=["ripeness"])


@router.post("/series", response_model=RipenessSeries)
async def build_series(request: SeriesRequest):
    """Ripeness ratios for one bog, histograms in date order."""
    try:
        return ripeness_series(request.histograms, RiskConfig(threshold=request.threshold))
    except CranberryError as e:
        raise HTTPException(status_code=400, detail=e.detail)


@router.post("/first-risk", response_model=FirstRiskResponse)
async def first_risk(series: RipenessSeries):
    return FirstRiskResponse(bog=series.bog_id, first_risk_date=first_risk_date(series))


@router.post("/varieties", response_model=list[VarietyRisk])
async def compare_varieties(series: list[RipenessSeries]):
    return variety_comparison(series)
