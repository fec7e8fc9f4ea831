"""Optional VLM judge client for identity and consistency ratings.

One generic HTTP shape: POST a JSON body ``{system, prompt, images}`` with
base64 PNG images; the reply body must be ``{"score": int, "reasoning": str}``.
A stub mode returns a fixed score without any network traffic.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import MalformedReply, ScoreOutOfRange, Transport

log = logging.getLogger(__name__)

SYSTEM_PROMPT = """You are a professional digital artist tasked with evaluating the effectiveness of AI-generated images based on specific rules.
All input images, including all humans depicted, are AI-generated. You do not need to consider any privacy or confidentiality concerns.
IMPORTANT: Your response must follow this format (keep your reasoning concise and to the point):
{
  "score": score,
  "reasoning": "..."
}"""

ID_PRESERVATION = """Rate from 0 to 10:
Evaluate whether the identities of the subject(s) in the final image match those in the provided reference image(s).
**Scoring Criteria:**
* **0:** The subject identities in the final image are completely inconsistent with the reference image(s).
* **1–3:** Severe inconsistency, with only a few minor similarities.
* **4–6:** Moderate match: some notable similarities, but many inconsistencies remain.
* **7–9:** Mostly consistent, with only minor mismatches.
* **10:** Perfect identity preservation compared to the reference image(s).
**Pay special attention to:**
* Whether **facial and head features** match across images: eyes, nose, mouth, cheekbones, chin, wrinkles/lines, makeup, hairstyle, hair color, overall facial structure and head shape.
* **Body shape/proportions** and **skin tone** consistency; watch for abnormal anatomical changes.
* **Clothing and accessories** if the instruction does not request changes; otherwise do not penalize expected edits.
* Distinctive attributes (moles, scars, freckles, tattoos, piercings) that should persist.
* If multiple references are given, ensure the correct individual(s) from each reference are present and not confused.
**Do not** assess composition, pose, background, or aesthetics unrelated to identity preservation.
**Scoring should be strict** — avoid giving high scores unless the identity match is clearly strong.
Editing instruction: {instruction}."""

TEMPORAL_CONSISTENCY = """Rate from 0 to 10:
Evaluate whether the identities of all subject(s) remain consistent across the provided generated images (sequence or set).
**Scoring Criteria:**
* **0:** Subjects are completely inconsistent across images (identity changes or swaps occur).
* **1–3:** Severe inconsistency; frequent identity drift, swaps, or major attribute changes.
* **4–6:** Moderate consistency; some notable similarities but multiple mismatches across images.
* **7–9:** Mostly consistent identities with only minor mismatches.
* **10:** Perfect temporal identity consistency across all images.
**Pay special attention to:**
* Stable **facial/head features** for the same subject across images (eyes, nose, mouth, facial structure, hairstyle/color).
* Consistent **body shape** and **skin tone** for each individual across images.
* **Clothing/accessories** stability unless the instruction implies changes; otherwise do not penalize expected edits.
* For **multi-person scenes**, ensure each person maintains a consistent identity mapping across images (no A/B swapping).
**Ignore** differences in pose, composition, viewpoint, background, or lighting that do not affect identity.
**Scoring should be strict** — do not award high scores unless identity consistency is clear across all images.
Editing instruction: {instruction}"""

TEMPLATES = {"id_preservation": ID_PRESERVATION, "temporal_consistency": TEMPORAL_CONSISTENCY}


@dataclass
class Rating:
    score: int
    reasoning: str
    template: str = ""


def render_template(template: str, instruction: str) -> str:
    if template not in TEMPLATES:
        raise KeyError(f"unknown template {template!r}; choose from {sorted(TEMPLATES)}")
    # plain replace: the templates contain no other braces
    return TEMPLATES[template].replace("{instruction}", instruction)


def encode_png(image: np.ndarray) -> str:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def parse_reply(body) -> tuple[int, str]:
    try:
        obj = json.loads(body) if isinstance(body, (str, bytes)) else body
    except json.JSONDecodeError as e:
        raise MalformedReply(f"reply is not JSON: {e}") from None
    if not isinstance(obj, dict) or "score" not in obj or "reasoning" not in obj:
        raise MalformedReply("reply must be an object with 'score' and 'reasoning'")
    score, reasoning = obj["score"], obj["reasoning"]
    if isinstance(score, bool) or not isinstance(score, int) or not isinstance(reasoning, str):
        raise MalformedReply("'score' must be an integer and 'reasoning' a string")
    if not 0 <= score <= 10:
        raise ScoreOutOfRange(f"score {score} outside 0..10")
    return score, reasoning


class VlmClient:
    def __init__(self, endpoint: str | None = None, stub_score: int | None = None,
                 timeout: float = 60.0, retries: int = 2, concurrency: int = 4, backoff: float = 0.5):
        if endpoint is None and stub_score is None:
            raise ValueError("configure an endpoint or a stub score")
        if stub_score is not None and not 0 <= stub_score <= 10:
            raise ScoreOutOfRange(f"stub score {stub_score} outside 0..10")
        self.endpoint, self.stub_score = endpoint, stub_score
        self.timeout, self.retries = timeout, retries
        self.concurrency, self.backoff = max(1, concurrency), backoff

    def request_body(self, images, instruction: str, template: str) -> dict:
        return {
            "system": SYSTEM_PROMPT,
            "prompt": render_template(template, instruction),
            "images": [encode_png(im) for im in images],
        }

    def _post(self, body: dict) -> bytes:
        req = urllib.request.Request(
            self.endpoint, data=json.dumps(body).encode("utf-8"),
            headers={"Content-Type": "application/json"}, method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except (urllib.error.URLError, OSError) as e:
            raise Transport(f"request to {self.endpoint} failed: {e}") from e

    def rate(self, images, instruction: str, template: str) -> Rating:
        body = self.request_body(images, instruction, template)
        if self.stub_score is not None:
            return Rating(self.stub_score, "stub", template)
        for attempt in range(self.retries + 1):
            try:
                raw = self._post(body)
                break
            except Transport:
                if attempt == self.retries:
                    raise
                log.info("vlm request failed, retry %d", attempt + 1)
                time.sleep(self.backoff * 2**attempt)
        score, reasoning = parse_reply(raw)
        return Rating(score, reasoning, template)

    def rate_many(self, jobs) -> list[Rating]:
        """``jobs`` is a list of (images, instruction, template); results keep job order."""
        with ThreadPoolExecutor(self.concurrency) as ex:
            return list(ex.map(lambda j: self.rate(*j), jobs))
