"""Port implementations backed by an OpenAI-compatible chat endpoint.

Configuration comes from arguments or the environment:
``TOOLKP_VLM_ENDPOINT``, ``TOOLKP_VLM_API_KEY``, ``TOOLKP_VLM_MODEL``.
Temperature and image encoding (PNG data URLs) are our defaults; nothing
about them is normative.
"""

from __future__ import annotations

import base64
import io
import json
import os
import re
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np
from PIL import Image, ImageDraw

from ..extraction import sample_tracking_keypoints
from ..errors import MalformedResponse, OutOfRangeSelection, TransportError
from ..keypoints import TaskSpec
from . import CandidateRendering, FrameContext, Region, parse_index
from .mock import RegionCenterCorrespondence

TEMPLATE_IDS = ("function_point_detection", "function_point_transfer", "grasp_point_transfer", "function_axis_alignment")
REGION_CANDIDATES = 12


def load_template(template_id: str, version: str = "v1") -> str:
    if template_id not in TEMPLATE_IDS:
        raise KeyError(f"unknown prompt template {template_id!r}")
    return resources.files("toolkp").joinpath(f"data/prompts/{version}/{template_id}.txt").read_text()


@dataclass
class RemoteConfig:
    endpoint: str
    api_key: str = ""
    model: str = "gpt-4o"
    template_version: str = "v1"
    attempts: int = 3
    backoff_s: float = 1.0
    timeout_s: float = 60.0
    temperature: float = 0.0
    log_dir: str | None = None

    @classmethod
    def from_env(cls, **overrides) -> RemoteConfig:
        endpoint = overrides.pop("endpoint", None) or os.environ.get("TOOLKP_VLM_ENDPOINT")
        if not endpoint:
            raise TransportError("no VLM endpoint configured (set TOOLKP_VLM_ENDPOINT)")
        kw = {"api_key": os.environ.get("TOOLKP_VLM_API_KEY", ""), "model": os.environ.get("TOOLKP_VLM_MODEL", "gpt-4o")}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(endpoint=endpoint, **kw)

    @property
    def url(self) -> str:
        e = self.endpoint.rstrip("/")
        return e if e.endswith("/chat/completions") else e + "/chat/completions"


def frame_image(frame: FrameContext) -> Image.Image:
    """RGB view of a frame; falls back to a gray rendering of the masks."""
    if frame.rgb is not None:
        return Image.fromarray(np.asarray(frame.rgb, np.uint8)).convert("RGB")
    h, w = frame.tool_mask.shape
    img = np.full((h, w), 40, np.uint8)
    if frame.target_mask is not None:
        img[frame.target_mask.astype(bool)] = 120
    img[frame.tool_mask.astype(bool)] = 200
    return Image.fromarray(img).convert("RGB")


def annotate(img: Image.Image, points, labels: bool = True) -> Image.Image:
    """Red dots, labelled P0..Pn when ``labels``."""
    out = img.copy()
    draw = ImageDraw.Draw(out)
    for i, (u, v) in enumerate(np.asarray(points, float).reshape(-1, 2)):
        draw.ellipse([u - 3, v - 3, u + 3, v + 3], fill=(255, 0, 0))
        if labels:
            draw.text((u + 4, v - 10), f"P{i}", fill=(255, 0, 0))
    return out


def to_data_url(img: Image.Image) -> str:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def extract_json(text: str) -> dict:
    """Parse the first JSON object in a reply, tolerating code fences."""
    text = re.sub(r"```(?:json)?", "", text)
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        raise ValueError("no JSON object in reply")
    obj = json.loads(text[start : end + 1])
    if not isinstance(obj, dict):
        raise ValueError("reply JSON is not an object")
    return obj


class VLMClient:
    def __init__(self, config: RemoteConfig, http: httpx.Client | None = None):
        self.config = config
        self.http = http or httpx.Client(timeout=config.timeout_s)
        self._calls = 0

    def _log(self, payload: dict, reply) -> None:
        if not self.config.log_dir:
            return
        d = Path(self.config.log_dir)
        d.mkdir(parents=True, exist_ok=True)
        self._calls += 1
        record = {"request": payload, "response": reply}
        (d / f"call_{self._calls:04d}.json").write_text(json.dumps(record, sort_keys=True, indent=1))

    def _post(self, payload: dict) -> str:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        try:
            resp = self.http.post(self.config.url, json=payload, headers=headers)
            resp.raise_for_status()
            body = resp.json()
            return body["choices"][0]["message"]["content"]
        except httpx.HTTPError as exc:
            raise TransportError(f"request to {self.config.url} failed: {exc}") from exc
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected chat-completion envelope: {exc}") from exc

    def ask(self, template_id: str, task: TaskSpec | None, images: Sequence[Image.Image], key: str):
        """Send one templated request and return ``reply[key]``.

        Transport faults and replies without a parsable ``key`` are retried
        up to ``attempts`` times in total.
        """
        content = []
        if task is not None:
            content.append({"type": "text", "text": json.dumps(task.to_dict(), sort_keys=True)})
        for img in images:
            content.append({"type": "image_url", "image_url": {"url": to_data_url(img)}})
        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": load_template(template_id, self.config.template_version)},
                {"role": "user", "content": content},
            ],
        }
        last: Exception | None = None
        for attempt in range(self.config.attempts):
            if attempt and self.config.backoff_s > 0:
                time.sleep(self.config.backoff_s)
            try:
                text = self._post(payload)
            except (TransportError, MalformedResponse) as exc:
                self._log(payload, {"error": str(exc)})
                last = exc
                continue
            self._log(payload, text)
            try:
                return extract_json(text)[key]
            except (ValueError, KeyError) as exc:
                last = MalformedResponse(f"reply lacks a valid {key!r}: {exc}")
        if isinstance(last, TransportError):
            raise last
        raise MalformedResponse(f"no valid reply after {self.config.attempts} attempts: {last}")


def _checked_index(value, n: int, what: str) -> int:
    try:
        i = parse_index(value)
    except ValueError as exc:
        raise MalformedResponse(str(exc)) from exc
    if not 0 <= i < n:
        raise OutOfRangeSelection(f"{what} index {i} outside [0, {n})")
    return i


class RemoteFunctionPointSelector:
    def __init__(self, client: VLMClient):
        self.client = client

    def select(self, frame: FrameContext, candidates: np.ndarray, task: TaskSpec) -> int:
        img = annotate(frame_image(frame), candidates)
        value = self.client.ask("function_point_detection", task, [img], "function_keypoint")
        return _checked_index(value, len(candidates), "function_keypoint")


class RemoteRegionProposer:
    """Picks a labelled test-tool candidate; the region is centred on it."""

    def __init__(self, client: VLMClient, task: TaskSpec | None = None, n_candidates: int = REGION_CANDIDATES, side: float = 24.0):
        self.client = client
        self.task = task
        self.n_candidates = n_candidates
        self.side = side

    def propose(self, demo_frame: FrameContext, test_frame: FrameContext, tool_mask: np.ndarray, role: str) -> Region:
        if role not in ("func", "grasp"):
            raise ValueError(f"region proposals exist for func/grasp only, not {role!r}")
        example = annotate(frame_image(demo_frame), [demo_frame.marks[role]], labels=False)
        cands = sample_tracking_keypoints(tool_mask, self.n_candidates)
        test = annotate(frame_image(test_frame), cands)
        template, key = (
            ("function_point_transfer", "function_keypoint") if role == "func" else ("grasp_point_transfer", "grasp_keypoint")
        )
        i = _checked_index(self.client.ask(template, self.task, [example, test], key), len(cands), key)
        return Region((float(cands[i][0]), float(cands[i][1])), self.side)


class RemoteAxisRefiner:
    def __init__(self, client: VLMClient):
        self.client = client

    def select(self, demo_frame, renderings: Sequence[CandidateRendering], task) -> int:
        images = []
        for r in renderings:
            if r.image is None:
                raise ValueError("remote axis refinement needs rendered candidate images")
            images.append(Image.fromarray(np.asarray(r.image, np.uint8)).convert("RGB"))
        value = self.client.ask("function_axis_alignment", task, images, "selected_idx")
        return _checked_index(value, len(renderings), "selected_idx")


@dataclass
class RemotePorts:
    selector: RemoteFunctionPointSelector
    proposer: RemoteRegionProposer
    matcher: RegionCenterCorrespondence
    refiner: RemoteAxisRefiner


def remote_vlm_client(
    endpoint_url: str | None = None,
    api_key: str | None = None,
    prompt_template_id: str = "v1",
    *,
    task: TaskSpec | None = None,
    http: httpx.Client | None = None,
    **config,
) -> RemotePorts:
    """All four ports over one client. Dense matching has no model behind it
    here, so the matcher snaps to the proposed region's centre."""
    cfg = RemoteConfig.from_env(endpoint=endpoint_url, api_key=api_key, template_version=prompt_template_id, **config)
    client = VLMClient(cfg, http=http)
    return RemotePorts(
        RemoteFunctionPointSelector(client),
        RemoteRegionProposer(client, task=task),
        RegionCenterCorrespondence(),
        RemoteAxisRefiner(client),
    )
