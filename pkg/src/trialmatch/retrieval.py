"""Step 2: multi-tier registry search, consolidation, and retrieval statistics.

Queries the public trial registry's v2 REST interface (paged studies search
with condition, intervention, status, and location parameters). Tiers descend
in specificity: the exact primary diagnosis first, then the base diagnosis,
then each synonym. Recall is the goal; precision is Step 3's job.
"""

from __future__ import annotations

import logging
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import requests

from .common import canonical_json, pretty_json, read_json, sha256_hex, write_text_atomic
from .errors import MissingDiagnosis, QuotaExceeded, RegistryUnavailable
from .extraction import Demographics, PatientReport

logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://clinicaltrials.gov/api/v2"
DEFAULT_PAGE_SIZE = 100
DEFAULT_MAX_TRIALS_CAP = 5000
DEFAULT_RATE_PER_SEC = 2.0
PAGE_RETRIES = 3
PAGE_BACKOFF_BASE_SECONDS = 0.5

NCT_ID_RE = re.compile(r"^NCT\d{8}$")
_AGE_RE = re.compile(r"^(\d+(?:\.\d+)?)\s+(year|month|week|day)s?$", re.IGNORECASE)

RECRUITING = "RECRUITING"

_EXCLUSION_SPLIT_RE = re.compile(r"exclusion criteria\s*:?", re.IGNORECASE)


class TierSource(str, Enum):
    PRIMARY_DIAGNOSIS = "PrimaryDiagnosis"
    BASE_DIAGNOSIS = "BaseDiagnosis"
    SYNONYM = "Synonym"


@dataclass(frozen=True)
class SearchTier:
    tier_index: int
    condition_term: str
    source: TierSource
    intervention_terms: tuple[str, ...] = ()


@dataclass(frozen=True)
class MinimumCriteria:
    """Filters attached to every query tier."""

    recruiting_only: bool = True
    country: str = "United States"
    age_years: int | None = None
    sex: str | None = None


@dataclass(frozen=True)
class QueryPlan:
    patient_id: str
    tiers: tuple[SearchTier, ...]
    minimum: MinimumCriteria
    page_size: int = DEFAULT_PAGE_SIZE
    max_trials_cap: int = DEFAULT_MAX_TRIALS_CAP

    def __post_init__(self):
        if not self.tiers:
            raise ValueError("query plan requires at least one tier")
        if self.tiers[0].source is not TierSource.PRIMARY_DIAGNOSIS:
            raise ValueError("tier 0 must search the primary diagnosis")
        if self.page_size <= 0 or self.max_trials_cap <= 0:
            raise ValueError("page_size and max_trials_cap must be positive")


@dataclass(frozen=True)
class EligibilityFacets:
    min_age_years: float | None = None
    max_age_years: float | None = None
    sex: str = "ALL"
    locations: tuple[str, ...] = ()

    def to_document(self) -> dict:
        return {
            "min_age_years": self.min_age_years,
            "max_age_years": self.max_age_years,
            "sex": self.sex,
            "locations": list(self.locations),
        }


@dataclass
class CandidateTrial:
    nct_id: str
    trial_title: str
    description: str
    inclusion_criteria: str
    exclusion_criteria: str
    overall_status: str
    eligibility_facets: EligibilityFacets
    retrieved_via_tiers: set[int] = field(default_factory=set)

    def to_document(self) -> dict:
        return {
            "nct_id": self.nct_id,
            "trial_title": self.trial_title,
            "description": self.description,
            "inclusion_criteria": self.inclusion_criteria,
            "exclusion_criteria": self.exclusion_criteria,
            "overall_status": self.overall_status,
            "eligibility_facets": self.eligibility_facets.to_document(),
            "retrieved_via_tiers": sorted(self.retrieved_via_tiers),
        }

    @classmethod
    def from_document(cls, doc: dict) -> "CandidateTrial":
        facets = doc.get("eligibility_facets", {})
        return cls(
            nct_id=doc["nct_id"],
            trial_title=doc.get("trial_title", ""),
            description=doc.get("description", ""),
            inclusion_criteria=doc.get("inclusion_criteria", ""),
            exclusion_criteria=doc.get("exclusion_criteria", ""),
            overall_status=doc.get("overall_status", ""),
            eligibility_facets=EligibilityFacets(
                min_age_years=facets.get("min_age_years"),
                max_age_years=facets.get("max_age_years"),
                sex=facets.get("sex", "ALL"),
                locations=tuple(facets.get("locations", ())),
            ),
            retrieved_via_tiers=set(doc.get("retrieved_via_tiers", ())),
        )


@dataclass(frozen=True)
class TierCount:
    tier_index: int
    fetched: int
    new_unique: int


@dataclass(frozen=True)
class RetrievalStats:
    patient_id: str
    per_tier_counts: tuple[TierCount, ...]
    total_unique: int
    duplicates_removed: int
    capped: bool

    def to_document(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "per_tier_counts": [
                {"tier_index": c.tier_index, "fetched": c.fetched, "new_unique": c.new_unique}
                for c in self.per_tier_counts
            ],
            "total_unique": self.total_unique,
            "duplicates_removed": self.duplicates_removed,
            "capped": self.capped,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "RetrievalStats":
        return cls(
            patient_id=doc["patient_id"],
            per_tier_counts=tuple(
                TierCount(c["tier_index"], c["fetched"], c["new_unique"])
                for c in doc.get("per_tier_counts", ())
            ),
            total_unique=doc["total_unique"],
            duplicates_removed=doc["duplicates_removed"],
            capped=doc.get("capped", False),
        )


def build_query_plan(report: PatientReport, minimum: MinimumCriteria,
                     page_size: int = DEFAULT_PAGE_SIZE,
                     max_trials_cap: int = DEFAULT_MAX_TRIALS_CAP) -> QueryPlan:
    """Turn a patient report into descending-specificity search tiers.

    Tier 0 is the exact primary diagnosis, tier 1 the base diagnosis when
    known, then one tier per synonym in report order. Interventions ride on
    every tier; age and sex join the minimum criteria when known.
    """
    if not report.primary_diagnosis.is_present:
        raise MissingDiagnosis(
            f"patient {report.patient_id}: no primary diagnosis to search on"
        )
    interventions: tuple[str, ...] = ()
    if report.current_interventions.is_present:
        interventions = tuple(report.current_interventions.value)

    tiers = [SearchTier(0, str(report.primary_diagnosis.value),
                        TierSource.PRIMARY_DIAGNOSIS, interventions)]
    if report.base_diagnosis.is_present:
        tiers.append(SearchTier(len(tiers), str(report.base_diagnosis.value),
                                TierSource.BASE_DIAGNOSIS, interventions))
    if report.diagnosis_synonyms.is_present:
        for synonym in report.diagnosis_synonyms.value:
            tiers.append(SearchTier(len(tiers), synonym, TierSource.SYNONYM,
                                    interventions))

    age = minimum.age_years
    sex = minimum.sex
    if report.patient_demographics.is_present:
        demographics: Demographics = report.patient_demographics.value
        if demographics.age is not None:
            age = demographics.age
        if demographics.sex != "Unknown":
            sex = demographics.sex
    merged = MinimumCriteria(
        recruiting_only=minimum.recruiting_only,
        country=minimum.country,
        age_years=age,
        sex=sex,
    )
    return QueryPlan(
        patient_id=report.patient_id,
        tiers=tuple(tiers),
        minimum=merged,
        page_size=page_size,
        max_trials_cap=max_trials_cap,
    )


def tier_request_params(tier: SearchTier, minimum: MinimumCriteria,
                        page_size: int, page_token: str | None) -> dict:
    """Wire parameters for one page of one tier's search."""
    params: dict = {
        "query.cond": tier.condition_term,
        "pageSize": page_size,
    }
    if tier.intervention_terms:
        params["query.intr"] = " OR ".join(tier.intervention_terms)
    if minimum.recruiting_only:
        params["filter.overallStatus"] = RECRUITING
    if minimum.country:
        params["query.locn"] = minimum.country
    if page_token is not None:
        params["pageToken"] = page_token
    return params


def request_digest(params: dict) -> str:
    """Key for the page cache and replay fixtures; order-insensitive."""
    return sha256_hex(canonical_json(params))


def parse_age_years(text: str | None) -> float | None:
    """Registry age strings ("18 Years", "6 Months") to fractional years."""
    if not text:
        return None
    match = _AGE_RE.match(text.strip())
    if not match:
        return None
    value = float(match.group(1))
    unit = match.group(2).lower()
    per_year = {"year": 1.0, "month": 12.0, "week": 52.0, "day": 365.0}[unit]
    return value / per_year


def split_eligibility_text(text: str) -> tuple[str, str]:
    """Split a combined criteria blob at its exclusion heading."""
    parts = _EXCLUSION_SPLIT_RE.split(text, maxsplit=1)
    if len(parts) == 1:
        return text.strip(), ""
    inclusion = re.sub(r"inclusion criteria\s*:?", "", parts[0],
                       count=1, flags=re.IGNORECASE)
    return inclusion.strip(), parts[1].strip()


def parse_study_record(record: dict) -> CandidateTrial | None:
    """One registry study payload into a CandidateTrial; None when unusable."""
    protocol = record.get("protocolSection", {})
    ident = protocol.get("identificationModule", {})
    nct_id = ident.get("nctId", "")
    if not NCT_ID_RE.match(nct_id):
        return None
    status = protocol.get("statusModule", {}).get("overallStatus", "")
    description = protocol.get("descriptionModule", {}).get("briefSummary", "")
    eligibility = protocol.get("eligibilityModule", {})
    inclusion, exclusion = split_eligibility_text(
        eligibility.get("eligibilityCriteria", "") or ""
    )
    locations = tuple(sorted({
        loc.get("country", "")
        for loc in protocol.get("contactsLocationsModule", {}).get("locations", ())
        if loc.get("country")
    }))
    facets = EligibilityFacets(
        min_age_years=parse_age_years(eligibility.get("minimumAge")),
        max_age_years=parse_age_years(eligibility.get("maximumAge")),
        sex=(eligibility.get("sex") or "ALL").upper(),
        locations=locations,
    )
    return CandidateTrial(
        nct_id=nct_id,
        trial_title=ident.get("briefTitle", ""),
        description=description,
        inclusion_criteria=inclusion,
        exclusion_criteria=exclusion,
        overall_status=status,
        eligibility_facets=facets,
        retrieved_via_tiers=set(),
    )


def passes_facets(trial: CandidateTrial, minimum: MinimumCriteria) -> bool:
    """Client-side enforcement of the minimum criteria over trial facets."""
    if minimum.recruiting_only and trial.overall_status != RECRUITING:
        return False
    facets = trial.eligibility_facets
    if minimum.age_years is not None:
        if facets.min_age_years is not None and minimum.age_years < facets.min_age_years:
            return False
        if facets.max_age_years is not None and minimum.age_years > facets.max_age_years:
            return False
    if minimum.sex is not None and facets.sex not in ("ALL", minimum.sex.upper()):
        return False
    return True


class TokenBucket:
    """Blocking rate limiter shared by all live page requests."""

    def __init__(self, rate_per_sec: float = DEFAULT_RATE_PER_SEC,
                 clock=time.monotonic, sleeper=time.sleep):
        if rate_per_sec <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate_per_sec
        self.capacity = max(1.0, rate_per_sec)
        self._tokens = self.capacity
        self._clock = clock
        self._sleeper = sleeper
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleeper(wait)


class LiveRegistryClient:
    """HTTPS pager against the registry, with disk cache and rate limiting."""

    def __init__(self, base_url: str = DEFAULT_BASE_URL,
                 session: requests.Session | None = None,
                 rate_limiter: TokenBucket | None = None,
                 cache_dir: Path | None = None,
                 cache_bust: bool = False,
                 timeout_sec: float = 30.0,
                 sleeper=time.sleep):
        self.base_url = base_url.rstrip("/")
        self._session = session or requests.Session()
        self._rate_limiter = rate_limiter or TokenBucket()
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.cache_bust = cache_bust
        self.timeout_sec = timeout_sec
        self._sleeper = sleeper

    def fetch_page(self, params: dict) -> dict:
        digest = request_digest(params)
        if self.cache_dir and not self.cache_bust:
            cached = self.cache_dir / f"{digest}.json"
            if cached.exists():
                return read_json(cached)
        payload = self._fetch_live(params)
        if self.cache_dir:
            write_text_atomic(self.cache_dir / f"{digest}.json", pretty_json(payload))
        return payload

    def _fetch_live(self, params: dict) -> dict:
        url = f"{self.base_url}/studies"
        last_failure = "no attempts made"
        for attempt in range(1, PAGE_RETRIES + 2):
            if attempt > 1:
                self._sleeper(PAGE_BACKOFF_BASE_SECONDS * 2 ** (attempt - 2))
            self._rate_limiter.acquire()
            try:
                response = self._session.get(url, params=params, timeout=self.timeout_sec)
            except requests.RequestException as exc:
                last_failure = str(exc)
                continue
            if response.status_code == 429:
                raise QuotaExceeded("registry rate limit exceeded (HTTP 429)")
            if response.status_code >= 500:
                last_failure = f"HTTP {response.status_code}"
                continue
            if response.status_code != 200:
                raise RegistryUnavailable(
                    f"HTTP {response.status_code}: {response.text[:200]}"
                )
            try:
                return response.json()
            except ValueError as exc:
                last_failure = f"non-JSON body: {exc}"
                continue
        raise RegistryUnavailable(
            f"page request failed after {PAGE_RETRIES + 1} attempts: {last_failure}"
        )


class ReplayRegistryClient:
    """Serves recorded page payloads keyed by request digest."""

    def __init__(self, fixture_dir: Path):
        self.fixture_dir = Path(fixture_dir)

    def fetch_page(self, params: dict) -> dict:
        path = self.fixture_dir / f"{request_digest(params)}.json"
        if not path.exists():
            raise RegistryUnavailable(
                f"no recorded page for {canonical_json(params)} "
                f"(expected {path.name} in {self.fixture_dir})"
            )
        return read_json(path)


def execute_plan(plan: QueryPlan, client) -> tuple[list[CandidateTrial], RetrievalStats]:
    """Run every tier in order, deduplicate by NCT ID, and count the flow.

    First-seen tier wins ownership of a trial; later tiers only extend its
    retrieved_via_tiers set. duplicates_removed is defined by conservation
    (everything fetched minus everything kept), so facet-rejected and
    over-cap records land there too.
    """
    candidates: dict[str, CandidateTrial] = {}
    per_tier: list[TierCount] = []
    capped = False

    for tier in plan.tiers:
        fetched = 0
        new_unique = 0
        page_token: str | None = None
        while not capped:
            params = tier_request_params(tier, plan.minimum, plan.page_size, page_token)
            payload = client.fetch_page(params)
            studies = payload.get("studies", [])
            fetched += len(studies)
            for record in studies:
                trial = parse_study_record(record)
                if trial is None or not passes_facets(trial, plan.minimum):
                    continue
                existing = candidates.get(trial.nct_id)
                if existing is not None:
                    existing.retrieved_via_tiers.add(tier.tier_index)
                    continue
                if len(candidates) >= plan.max_trials_cap:
                    capped = True
                    break
                trial.retrieved_via_tiers.add(tier.tier_index)
                candidates[trial.nct_id] = trial
                new_unique += 1
            page_token = payload.get("nextPageToken")
            if page_token is None:
                break
        per_tier.append(TierCount(tier.tier_index, fetched, new_unique))
        if capped:
            logger.warning("patient %s: candidate cap %d reached at tier %d",
                           plan.patient_id, plan.max_trials_cap, tier.tier_index)
            break

    total_unique = len(candidates)
    total_fetched = sum(c.fetched for c in per_tier)
    stats = RetrievalStats(
        patient_id=plan.patient_id,
        per_tier_counts=tuple(per_tier),
        total_unique=total_unique,
        duplicates_removed=total_fetched - total_unique,
        capped=capped,
    )
    return list(candidates.values()), stats


def summarize_retrieval(stats_list: list[RetrievalStats]) -> dict:
    """Corpus-level retrieval summary with the synonym expansion ratio."""
    if not stats_list:
        return {
            "patients": 0,
            "mean_total_unique": 0.0,
            "min_total_unique": 0,
            "max_total_unique": 0,
            "expansion_ratio": None,
        }
    totals = [s.total_unique for s in stats_list]
    tier0 = sum(
        next((c.new_unique for c in s.per_tier_counts if c.tier_index == 0), 0)
        for s in stats_list
    )
    ratio = (sum(totals) / tier0) if tier0 > 0 else None
    return {
        "patients": len(stats_list),
        "mean_total_unique": sum(totals) / len(totals),
        "min_total_unique": min(totals),
        "max_total_unique": max(totals),
        "expansion_ratio": ratio,
    }
