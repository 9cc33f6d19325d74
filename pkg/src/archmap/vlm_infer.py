"""Schema-constrained inference through a pluggable vision-language backend.

A request bundles the three rendered views (PNG, front/back/bottom), the
prompt and the strict report schema, with temperature pinned to 0. Backends
turn a request into raw response text; :func:`parse_and_repair` turns that
text into a validated :class:`InferenceOutcome`.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import httpx
import jsonschema
import numpy as np

from . import dkb
from .dkb import Anomaly, DentalOntology, StructuredReport, Violation
from .render import VIEW_ORDER, MultiViewSet, canonical_arch, encode_png

MODES = ("thinking", "non-thinking")
DEFAULT_ATTEMPTS = 3


class BackendUnreachable(RuntimeError):
    """Transport kept failing after every retry."""


class BackendRejected(RuntimeError):
    """The backend answered with a non-success status."""

    def __init__(self, status: int, body: str):
        super().__init__(f"backend returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class TransientBackendError(RuntimeError):
    """Retryable transport failure raised by a backend."""


@dataclass(frozen=True)
class InferenceRequest:
    images: tuple[bytes, bytes, bytes]
    prompt: str
    schema: dict
    mode: str = "non-thinking"
    model_name: str = "mock"
    arch_side: str = "upper"
    temperature: float = 0.0
    view_names: tuple[str, ...] = VIEW_ORDER
    case_id: str = field(default="", compare=False)

    def __post_init__(self):
        if self.temperature != 0.0:
            raise ValueError("temperature is pinned to 0")
        if len(self.images) != 3 or tuple(self.view_names) != VIEW_ORDER:
            raise ValueError("exactly 3 images in front/back/bottom order are required")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def digest(self) -> str:
        """Content hash of everything the backend sees (case_id excluded)."""
        h = hashlib.sha256()
        meta = {
            "prompt": self.prompt,
            "schema": self.schema,
            "mode": self.mode,
            "model_name": self.model_name,
            "arch_side": self.arch_side,
            "temperature": self.temperature,
            "views": list(self.view_names),
        }
        h.update(json.dumps(meta, sort_keys=True).encode())
        for img in self.images:
            h.update(hashlib.sha256(img).digest())
        return h.hexdigest()

    def image_digests(self) -> list[str]:
        return [hashlib.sha256(img).hexdigest() for img in self.images]

    def prompt_digest(self) -> str:
        return hashlib.sha256(self.prompt.encode()).hexdigest()


@dataclass
class InferenceOutcome:
    report: StructuredReport | None
    json_valid: bool
    repair_applied: bool
    violations: list[Violation]
    raw: str
    latency: float = 0.0

    def __post_init__(self):
        if self.report is not None and not self.json_valid:
            raise ValueError("a report implies json_valid")


def arch_name(arch_side: str) -> str:
    """'upper' or 'lower' for any accepted arch alias."""
    return "upper" if canonical_arch(arch_side) == "maxillary" else "lower"


def request_from_images(images, arch_side: str, ontology: DentalOntology | None, mode: str = "non-thinking",
                        model_name: str = "mock", *, dkb_enabled: bool = True,
                        case_id: str = "") -> InferenceRequest:
    """Request from already encoded PNG views in front/back/bottom order.

    With ``dkb_enabled`` False the prompt carries no ontology tables or rules.
    """
    ontology = ontology or dkb.load_ontology()
    arch = arch_name(arch_side)
    schema = dkb.report_schema(ontology)
    if dkb_enabled:
        prompt = dkb.render_prompt(ontology, arch, schema)
    else:
        prompt = dkb.minimal_prompt(arch, schema)
    return InferenceRequest(tuple(images), prompt, schema, mode, model_name, arch, case_id=case_id)


def build_request(views: MultiViewSet, ontology: DentalOntology | None, mode: str = "non-thinking",
                  model_name: str = "mock", *, dkb_enabled: bool = True, case_id: str = "") -> InferenceRequest:
    """Encode the three views losslessly and attach the prompt and schema."""
    images = tuple(encode_png(img) for img in views.views)
    return request_from_images(images, views.arch_side, ontology, mode, model_name,
                               dkb_enabled=dkb_enabled, case_id=case_id)


class Backend(Protocol):
    name: str
    supports_thinking: bool

    def complete(self, request: InferenceRequest) -> str: ...


def infer(backend: Backend, request: InferenceRequest, *, attempts: int = DEFAULT_ATTEMPTS,
          backoff_s: float = 0.5, sleep: Callable[[float], None] = time.sleep) -> str:
    """Raw reply text. Transport failures are retried with exponential backoff
    (``attempts`` calls in total); any reply, valid JSON or not, is returned as is."""
    last: Exception | None = None
    for k in range(attempts):
        try:
            return backend.complete(request)
        except TransientBackendError as exc:
            last = exc
            if k + 1 < attempts:
                sleep(backoff_s * 2**k)
    raise BackendUnreachable(f"{attempts} attempts failed: {last}") from last


# ---------------------------------------------------------------- parsing

_FENCE = re.compile(r"```[a-zA-Z0-9_-]*")


def first_brace_block(text: str) -> str | None:
    """First balanced ``{...}`` block, ignoring braces inside JSON strings."""
    text = _FENCE.sub("", text)
    start = text.find("{")
    while start != -1:
        depth, in_str, esc = 0, False, False
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start : i + 1]
        start = text.find("{", start + 1)
    return None


_STRUCTURAL = jsonschema.Draft202012Validator(dkb.structural_schema())


def _loads(text: str):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, RecursionError):
        return None


def parse_and_repair(raw: str, ontology: DentalOntology | None = None, *, validate: bool = True,
                     latency: float = 0.0) -> InferenceOutcome:
    """Strict parse, then at most one extraction-only repair pass.

    ``json_valid`` means the final text parsed and matched the report's
    structure (types and required fields). Vocabulary problems are left to the
    knowledge-base validation so they can be counted as hallucinations. With
    ``validate`` False (no knowledge base) no semantic rules are applied.
    """
    data = _loads(raw)
    repaired = False
    if data is None:
        block = first_brace_block(raw)
        repaired = True
        data = _loads(block) if block is not None else None
    if not isinstance(data, dict) or not _STRUCTURAL.is_valid(data):
        return InferenceOutcome(None, False, repaired, [], raw, latency)
    report = StructuredReport.from_dict(data)
    violations = dkb.validate_report(report, ontology) if validate else []
    return InferenceOutcome(report, True, repaired, violations, raw, latency)


# ---------------------------------------------------------------- backends


def _rng(digest: str, seed: int) -> np.random.Generator:
    key = hashlib.sha256(f"{seed}:{digest}".encode()).digest()
    return np.random.default_rng(int.from_bytes(key[:8], "little"))


_SIDE_NAMES = {1: "upper right", 2: "upper left", 3: "lower left", 4: "lower right"}
_POSITION_NAMES = {4: "first premolar", 5: "second premolar"}


class MockBackend:
    """Deterministic stand-in for a vision-language model.

    The reply is a pure function of (request digest, seed). It describes a
    plausible permanent arch: optionally third molars, optionally one
    documented premolar extraction. ``corrupt`` maps case ids to a corruption:
    ``hallucinate`` (an out-of-ontology stage label), ``malformed`` (truncated
    JSON) or ``wrapped`` (valid JSON inside prose and a code fence).
    """

    name = "mock"
    supports_thinking = True

    def __init__(self, seed: int = 0, corrupt: dict[str, str] | None = None,
                 ontology: DentalOntology | None = None):
        self.seed = int(seed)
        self.corrupt = dict(corrupt or {})
        bad = set(self.corrupt.values()) - {"hallucinate", "malformed", "wrapped"}
        if bad:
            raise ValueError(f"unknown corruption kinds {sorted(bad)}")
        self.ontology = ontology or dkb.load_ontology()

    def report_for(self, request: InferenceRequest) -> StructuredReport:
        rng = _rng(request.digest(), self.seed)
        quads = (1, 2) if request.arch_side == "upper" else (3, 4)
        third = bool(rng.random() < 0.3)
        top = 8 if third else 7
        codes = [10 * q + p for q in quads for p in range(1, top + 1)]
        anomalies = []
        if rng.random() < 0.25:
            q = quads[int(rng.integers(2))]
            pos = int(rng.integers(4, 6))
            code = 10 * q + pos
            codes.remove(code)
            anomalies.append(Anomaly("extracted", code, f"{_SIDE_NAMES[q]} {_POSITION_NAMES[pos]} site",
                                     "healed extraction space"))
        return dkb.report_from_codes(request.arch_side, codes, self.ontology, anomalies=anomalies,
                                     third_molar_evidence=third)

    def complete(self, request: InferenceRequest) -> str:
        report = self.report_for(request).to_dict()
        kind = self.corrupt.get(request.case_id)
        if kind == "hallucinate":
            report["dentition_stage"] = "adolescent"
        text = json.dumps(report, indent=2)
        if kind == "malformed":
            return text[: len(text) // 2]
        if kind == "wrapped":
            return f"Here is the report.\n```json\n{text}\n```\nLet me know if you need more."
        return text


class HttpBackend:
    """Generic chat-style HTTP JSON backend.

    Sends one user message with a text part and three base64 PNG image parts.
    The thinking mode is passed through as ``thinking_flag`` when configured;
    otherwise it is recorded by the caller as advisory only.
    """

    name = "http"

    def __init__(self, url: str, model_name: str, *, api_key_env: str | None = "ARCHMAP_API_KEY",
                 timeout_s: float = 120.0, thinking_flag: str | None = None,
                 transport: httpx.BaseTransport | None = None):
        self.url = url
        self.model_name = model_name
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.thinking_flag = thinking_flag
        self.supports_thinking = thinking_flag is not None
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def body(self, request: InferenceRequest) -> dict:
        parts = [{"type": "text", "text": request.prompt}]
        for name, img in zip(request.view_names, request.images):
            url = "data:image/png;base64," + base64.b64encode(img).decode("ascii")
            parts.append({"type": "image_url", "image_url": {"url": url}, "name": name})
        body = {
            "model": request.model_name or self.model_name,
            "messages": [{"role": "user", "content": parts}],
            "temperature": request.temperature,
            "response_format": {"type": "json_schema",
                                "json_schema": {"name": "dental_arch_report", "schema": request.schema,
                                                "strict": True}},
        }
        if self.thinking_flag:
            body[self.thinking_flag] = request.mode == "thinking"
        return body

    def complete(self, request: InferenceRequest) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env) if self.api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._client.post(self.url, json=self.body(request), headers=headers)
        except httpx.TransportError as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code >= 400:
            raise BackendRejected(resp.status_code, resp.text)
        return extract_message_text(resp.text)

    def close(self) -> None:
        self._client.close()


def extract_message_text(body: str) -> str:
    """Assistant text from a chat-completion style body; the body itself otherwise."""
    data = _loads(body)
    if isinstance(data, dict):
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            return body
        if isinstance(content, list):
            return "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if isinstance(content, str):
            return content
    return body


def run_inference(backend: Backend, request: InferenceRequest, ontology: DentalOntology | None,
                  *, dkb_enabled: bool = True, attempts: int = DEFAULT_ATTEMPTS, backoff_s: float = 0.5,
                  sleep: Callable[[float], None] = time.sleep) -> InferenceOutcome:
    """infer + parse_and_repair, with wall-clock latency."""
    t0 = time.perf_counter()
    raw = infer(backend, request, attempts=attempts, backoff_s=backoff_s, sleep=sleep)
    latency = time.perf_counter() - t0
    return parse_and_repair(raw, ontology, validate=dkb_enabled, latency=latency)
