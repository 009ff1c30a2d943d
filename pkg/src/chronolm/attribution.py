"""Author matching between catalogs and model-based date attribution.

Names are canonicalized (lowercased, diacritics stripped, "Last, First"
reordered, embedded digits and parentheticals removed) and compared by
normalized Levenshtein distance: edit distance over the longer length,
so 0 is identical and 1 completely disjoint.

Matching runs two passes.  Pass one accepts close names only when the
records' life dates agree (at least one comparable field, no
contradiction); pass two mops up remaining names at a stricter
threshold with no date requirement.  Each catalog record matches at
most one authority record.

Date attribution sends one fixed question per work to a text completion
endpoint and parses the first plausible year from the reply.  Requests
are cached to an append-only JSONL file keyed by work id so interrupted
runs resume without refetching; unparseable replies are kept as
failures, never fabricated into years.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

PROMPT_TEMPLATE = "When was the work {} by {} written? Answer just with the year."


class AttributionError(ValueError):
    pass


# -- names -------------------------------------------------------------------


def canonical_name(name: str) -> str:
    """Normalize an author name for comparison.

    "Twain, Mark (1835-1910)" and "Mark Twain" both canonicalize to
    "mark twain".
    """
    s = unicodedata.normalize("NFKD", name)
    s = "".join(ch for ch in s if not unicodedata.combining(ch))
    s = re.sub(r"\([^)]*\)", " ", s)
    s = re.sub(r"\d+", " ", s)
    s = s.lower()
    if "," in s:
        head, _, tail = s.partition(",")
        s = f"{tail} {head}"
    s = re.sub(r"[^a-z\s]", " ", s)
    return " ".join(s.split())


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def name_distance(a: str, b: str) -> float:
    """Normalized edit distance between canonicalized names, in [0, 1]."""
    ca, cb = canonical_name(a), canonical_name(b)
    if not ca and not cb:
        return 0.0
    if not ca or not cb:
        return 1.0
    return levenshtein(ca, cb) / max(len(ca), len(cb))


@dataclass(frozen=True)
class AuthorRecord:
    id: str
    name: str
    birth_year: int | None = None
    death_year: int | None = None


@dataclass(frozen=True)
class AuthorMatch:
    authority_id: str
    catalog_id: str
    distance: float
    matched_pass: int  # 1 with date agreement, 2 name-only


@dataclass
class MatchResult:
    matches: list[AuthorMatch]
    unmatched_catalog: list[str]
    unmatched_authority: list[str]


def _dates_agree(a: AuthorRecord, b: AuthorRecord) -> bool:
    """True when at least one life date is comparable and none disagree."""
    comparable = 0
    for fa, fb in ((a.birth_year, b.birth_year), (a.death_year, b.death_year)):
        if fa is not None and fb is not None:
            if fa != fb:
                return False
            comparable += 1
    return comparable >= 1


def match_authors(
    authority: Sequence[AuthorRecord],
    catalog: Sequence[AuthorRecord],
    pass1_threshold: float = 0.25,
    pass2_threshold: float = 0.10,
) -> MatchResult:
    """Two-pass fuzzy matching of catalog authors onto an authority list.

    Candidate pairs are taken best-distance-first.  An authority record
    may absorb several catalog records (catalogs duplicate authors
    under name variants); each catalog record matches once.
    """
    if not 0.0 <= pass2_threshold <= pass1_threshold <= 1.0:
        raise AttributionError(
            f"thresholds must satisfy 0 <= pass2 ({pass2_threshold}) "
            f"<= pass1 ({pass1_threshold}) <= 1"
        )
    pairs = []
    for a in authority:
        for c in catalog:
            d = name_distance(a.name, c.name)
            if d <= pass1_threshold:
                pairs.append((d, a.id, c.id, a, c))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))

    matched_catalog: dict[str, AuthorMatch] = {}
    for d, aid, cid, a, c in pairs:
        if cid in matched_catalog:
            continue
        if _dates_agree(a, c):
            matched_catalog[cid] = AuthorMatch(
                authority_id=aid, catalog_id=cid, distance=d, matched_pass=1
            )
    for d, aid, cid, a, c in pairs:
        if cid in matched_catalog or d > pass2_threshold:
            continue
        matched_catalog[cid] = AuthorMatch(
            authority_id=aid, catalog_id=cid, distance=d, matched_pass=2
        )

    matches = sorted(matched_catalog.values(), key=lambda m: (m.catalog_id, m.authority_id))
    matched_auth = {m.authority_id for m in matches}
    return MatchResult(
        matches=matches,
        unmatched_catalog=sorted(c.id for c in catalog if c.id not in matched_catalog),
        unmatched_authority=sorted(a.id for a in authority if a.id not in matched_auth),
    )


# -- date attribution --------------------------------------------------------


class CompletionClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpCompletionClient:
    """Chat-completions HTTP client (OpenAI-style payload).

    Configured entirely by constructor arguments; reads the API key from
    the environment variable named by ``api_key_env`` when given.
    """

    def __init__(
        self,
        url: str,
        model: str,
        api_key: str | None = None,
        api_key_env: str | None = None,
        temperature: float = 0.0,
        timeout: float = 30.0,
    ):
        self.url = url
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        if api_key is None and api_key_env:
            api_key = os.environ.get(api_key_env)
        self.api_key = api_key

    def complete(self, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(
            self.url,
            headers=headers,
            json={
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.temperature,
            },
            timeout=self.timeout,
        )
        resp.raise_for_status()
        data = resp.json()
        return data["choices"][0]["message"]["content"]


@dataclass(frozen=True)
class WorkRef:
    title: str
    author: str
    gold_years: tuple[int, ...] = ()

    @property
    def work_id(self) -> str:
        key = f"{self.title}\x1f{self.author}"
        return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


@dataclass
class DateAttribution:
    work_id: str
    title: str
    author: str
    predicted_year: int | None  # None: the reply held no plausible year
    raw_response: str
    gold_years: tuple[int, ...] = ()


_YEAR_RE = re.compile(r"(?<!\d)(\d{3,4})(?!\d)")


def extract_year(text: str, plausible_range: tuple[int, int]) -> int | None:
    """First standalone 3-4 digit integer within the plausible range."""
    lo, hi = plausible_range
    for m in _YEAR_RE.finditer(text):
        y = int(m.group(1))
        if lo <= y <= hi:
            return y
    return None


def _load_cache(path) -> dict[str, dict]:
    cache: dict[str, dict] = {}
    if path and os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn tail write; refetch that work
                if "work_id" in rec:
                    cache[rec["work_id"]] = rec
    return cache


def attribute_dates(
    works: Sequence[WorkRef],
    client: CompletionClient,
    plausible_range: tuple[int, int] = (1000, 2100),
    cache_path: str | None = None,
    max_retries: int = 3,
    backoff_s: float = 1.0,
    max_in_flight: int = 4,
    sleep: Callable[[float], None] = time.sleep,
) -> list[DateAttribution]:
    """Ask the client for each work's composition year.

    Results come back in input order regardless of completion order.
    Transport errors retry with exponential backoff; a work that keeps
    failing raises after ``max_retries`` attempts.  The cache file is
    append-only JSONL; reruns skip works already present.
    """
    import threading

    cache = _load_cache(cache_path)
    cache_fh = open(cache_path, "a", encoding="utf-8") if cache_path else None
    write_lock = threading.Lock()

    def fetch(work: WorkRef) -> dict:
        wid = work.work_id
        hit = cache.get(wid)
        if hit is not None:
            return hit
        prompt = PROMPT_TEMPLATE.format(work.title, work.author)
        delay = backoff_s
        last_exc: Exception | None = None
        for attempt in range(max_retries):
            try:
                reply = client.complete(prompt)
            except Exception as exc:
                last_exc = exc
                if attempt + 1 < max_retries:
                    sleep(delay)
                    delay *= 2
                continue
            rec = {
                "work_id": wid,
                "title": work.title,
                "author": work.author,
                "raw_response": reply,
            }
            # persist immediately so an interrupted run resumes here
            with write_lock:
                if cache_fh is not None and wid not in cache:
                    cache_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    cache_fh.flush()
                cache[wid] = rec
            return rec
        raise AttributionError(
            f"attribution failed for {work.title!r} after {max_retries} attempts: {last_exc}"
        ) from last_exc

    try:
        if max_in_flight > 1 and len(works) > 1:
            with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
                records = list(pool.map(fetch, works))
        else:
            records = [fetch(w) for w in works]
    finally:
        if cache_fh is not None:
            cache_fh.close()

    return [
        DateAttribution(
            work_id=rec["work_id"],
            title=work.title,
            author=work.author,
            predicted_year=extract_year(rec["raw_response"], plausible_range),
            raw_response=rec["raw_response"],
            gold_years=work.gold_years,
        )
        for work, rec in zip(works, records)
    ]


# -- scoring -----------------------------------------------------------------


@dataclass
class AttributionScore:
    n: int
    n_predicted: int  # replies that contained a usable year
    hits: dict[int, int]  # tolerance -> count within tolerance
    accuracy: dict[int, float]  # tolerance -> hits / n
    disqualified: int  # predictions farther than dq_delta from every gold year
    dq_delta: int | None


def evaluate_attribution(
    attributions: Sequence[DateAttribution],
    tolerances: Sequence[int] = (0, 5, 10),
    dq_delta: int | None = None,
) -> AttributionScore:
    """Score predictions against gold years at several tolerances.

    A prediction is a hit at tolerance t when it lies within t years of
    any gold year.  Works without a usable predicted year count in the
    denominator as misses.  With ``dq_delta``, predictions farther than
    that from every gold year are additionally counted as disqualified
    (``dq_delta`` must be at least the largest tolerance, otherwise a
    hit could simultaneously be disqualified).
    """
    scored = [a for a in attributions if a.gold_years]
    if not scored:
        raise AttributionError("no attributions carry gold years")
    tolerances = sorted(set(int(t) for t in tolerances))
    if dq_delta is not None and tolerances and dq_delta < max(tolerances):
        raise AttributionError(
            f"dq_delta {dq_delta} must be >= the largest tolerance {max(tolerances)}"
        )
    hits = {t: 0 for t in tolerances}
    disqualified = 0
    n_predicted = 0
    for a in scored:
        if a.predicted_year is None:
            continue
        n_predicted += 1
        err = min(abs(a.predicted_year - g) for g in a.gold_years)
        for t in tolerances:
            if err <= t:
                hits[t] += 1
        if dq_delta is not None and err > dq_delta:
            disqualified += 1
    n = len(scored)
    return AttributionScore(
        n=n,
        n_predicted=n_predicted,
        hits=hits,
        accuracy={t: hits[t] / n for t in tolerances},
        disqualified=disqualified,
        dq_delta=dq_delta,
    )
