"""Audio/visual narration consistency ratings.

Ratings come from a chat-completion endpoint or, offline, from the cosine
similarity of the two narration embeddings. Either way they end up in a
JSON-lines cache so a rerun never asks twice.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .numerics import Tensor, cosine_similarity

log = logging.getLogger(__name__)

API_KEY_ENV = "MMDG_LLM_API_KEY"

PROMPT = (
    "Rate the consistency between two narrations from the same video out of 100. "
    "The first narration describes the visual aspect, and the second describes the audio. "
    "Consider how well the audio narration overlaps with and complements the visual narration. "
    "Output only the percentage score."
)


class RatingParseError(ValueError):
    pass


class TransportError(RuntimeError):
    pass


class EndpointConfigError(ValueError):
    pass


@dataclass
class RatingRequest:
    clip_id: str
    visual_narration_text: str
    audio_narration_text: str

    def __post_init__(self):
        if not self.visual_narration_text or not self.visual_narration_text.strip():
            raise ValueError(f"clip {self.clip_id}: empty visual narration")
        if not self.audio_narration_text or not self.audio_narration_text.strip():
            raise ValueError(f"clip {self.clip_id}: empty audio narration")


@dataclass
class RatingCacheEntry:
    clip_id: str
    rating: float
    source: str
    raw_response: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.rating <= 1.0:
            raise ValueError(f"rating {self.rating} outside [0, 1]")
        if self.source not in ("llm", "fallback"):
            raise ValueError(f"unknown rating source {self.source!r}")


@dataclass
class EndpointConfig:
    url: str = "http://localhost:8000/v1/chat/completions"
    model: str = "llama"
    timeout: float = 30.0
    max_attempts: int = 3
    backoff: float = 1.0
    max_in_flight: int = 4
    api_key: str | None = field(default=None, repr=False)

    def resolved_key(self) -> str:
        key = self.api_key or os.environ.get(API_KEY_ENV)
        if not key:
            raise EndpointConfigError(f"no API key: set {API_KEY_ENV} or use the fallback rater")
        return key


def build_prompt(req: RatingRequest) -> str:
    return f"{PROMPT}\nVisual: {req.visual_narration_text}\nAudio: {req.audio_narration_text}"


_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?")


def parse_rating(raw: str) -> float:
    """First number in [0, 100] in ``raw``, scaled to [0, 1].

    If every number is out of range the first one is clamped instead.
    """
    values = [float(m.group()) for m in _NUMBER.finditer(raw or "")]
    if not values:
        raise RatingParseError(f"no rating in response: {raw!r}")
    in_range = [v for v in values if 0.0 <= v <= 100.0]
    value = in_range[0] if in_range else values[0]
    return min(max(value / 100.0, 0.0), 1.0)


def rate_fallback(vis_emb, aud_emb) -> float:
    """Map narration-embedding cosine similarity from [-1, 1] onto [0, 1]."""
    u = Tensor(np.asarray(vis_emb, dtype=np.float64))
    v = Tensor(np.asarray(aud_emb, dtype=np.float64))
    s = float(cosine_similarity(u, v).data)
    return min(max((s + 1.0) / 2.0, 0.0), 1.0)


class RatingCache:
    """Append-only JSON-lines cache of :class:`RatingCacheEntry`, keyed by clip id."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, RatingCacheEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    e = RatingCacheEntry(**json.loads(line))
                    self._entries[e.clip_id] = e

    def get(self, clip_id: str) -> RatingCacheEntry | None:
        return self._entries.get(clip_id)

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def put(self, entry: RatingCacheEntry) -> None:
        with self._lock:
            if entry.clip_id in self._entries:
                return
            self._entries[entry.clip_id] = entry
            if self.path is not None:
                with open(self.path, "a") as f:
                    f.write(json.dumps(asdict(entry), sort_keys=True) + "\n")


class LLMRater:
    """Chat-completion client with bounded retries."""

    def __init__(self, cfg: EndpointConfig, client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self.key = cfg.resolved_key()
        self.client = client or httpx.Client(timeout=cfg.timeout)
        self.sleep = sleep

    def complete(self, prompt: str) -> str:
        body = {"model": self.cfg.model, "messages": [{"role": "user", "content": prompt}]}
        headers = {"Authorization": f"Bearer {self.key}"}
        last: Exception | None = None
        for attempt in range(self.cfg.max_attempts):
            try:
                resp = self.client.post(self.cfg.url, json=body, headers=headers)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as e:
                last = e
                log.warning("rating request failed (attempt %d/%d): %s", attempt + 1, self.cfg.max_attempts, e)
                if attempt + 1 < self.cfg.max_attempts:
                    self.sleep(self.cfg.backoff * 2**attempt)
        raise TransportError(f"endpoint {self.cfg.url} failed after {self.cfg.max_attempts} attempts: {last}")


def rate_llm(req: RatingRequest, rater: LLMRater, cache: RatingCache) -> RatingCacheEntry:
    hit = cache.get(req.clip_id)
    if hit is not None:
        return hit
    raw = rater.complete(build_prompt(req))
    entry = RatingCacheEntry(req.clip_id, parse_rating(raw), "llm", raw)
    cache.put(entry)
    return entry


def rate_records(
    records: Sequence,
    cache: RatingCache,
    rater: LLMRater | None = None,
    max_in_flight: int = 4,
) -> int:
    """Fill ``consistency`` on every audio-complete record; return the number of new ratings.

    Without a rater, the embedding fallback is used. With one, requests run
    on up to ``max_in_flight`` threads and clips lacking narration text fall
    back to embeddings.
    """
    todo = [r for r in records if r.has_audio]
    fresh = 0

    def one(rec) -> bool:
        if rec.clip_id in cache:
            return False
        if rater is not None and rec.vis_narration_text and rec.aud_narration_text:
            req = RatingRequest(rec.clip_id, rec.vis_narration_text, rec.aud_narration_text)
            rate_llm(req, rater, cache)
        else:
            r = rate_fallback(rec.emb_vis_narration, rec.emb_audio_narration)
            cache.put(RatingCacheEntry(rec.clip_id, r, "fallback"))
        return True

    if rater is None or max_in_flight <= 1:
        fresh = sum(one(r) for r in todo)
    else:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            fresh = sum(pool.map(one, todo))
    for rec in todo:
        rec.consistency = cache.get(rec.clip_id).rating
    return fresh
