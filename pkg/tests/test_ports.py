import json
import math

import httpx
import numpy as np
import pytest

from toolkp.errors import MalformedResponse, OutOfRangeSelection, TransportError, UnknownTask
from toolkp.geometry import CameraIntrinsics
from toolkp.keypoints import TaskSpec
from toolkp.ports import CandidateRendering, FrameContext, Region, parse_index
from toolkp.ports.mock import (
    IdentityCorrespondence,
    IdentityRegionProposer,
    OracleRefiner,
    RegionCenterCorrespondence,
    ScriptedSelector,
)
from toolkp.ports.remote import TEMPLATE_IDS, RemoteConfig, extract_json, load_template, remote_vlm_client

K = CameraIntrinsics(100.0, 100.0, 16.0, 12.0, 32, 24)
TASK = TaskSpec("pour", "mug", "bowl")


def frame(marks=None):
    m = np.zeros((24, 32), bool)
    m[5:15, 5:25] = True
    return FrameContext(K, m, marks=marks or {})


def renderings(offsets_deg=(-45, -30, -10, 0, 10, 30, 45)):
    return [CandidateRendering(math.radians(d), np.zeros((24, 32), np.uint8)) for d in offsets_deg]


# --- mocks ---------------------------------------------------------------------------


def test_scripted_selector():
    s = ScriptedSelector({"pour": 2})
    assert s.select(frame(), np.zeros((5, 2)), TASK) == 2
    assert s.select(frame(), np.zeros((5, 2)), "pour") == 2
    with pytest.raises(UnknownTask):
        s.select(frame(), np.zeros((5, 2)), TaskSpec("cut", "knife", "bread"))
    with pytest.raises(ValueError):
        ScriptedSelector({})


def test_oracle_refiner_nearest_and_ties():
    r = renderings()
    assert OracleRefiner(math.radians(28)).select(None, r) == 5
    assert OracleRefiner(math.radians(-90)).select(None, r) == 0
    # exactly between 0 and 10 degrees: the smaller magnitude wins
    assert OracleRefiner(math.radians(5)).select(None, r) == 3
    assert OracleRefiner(math.radians(-5)).select(None, r) == 3
    with pytest.raises(ValueError):
        OracleRefiner(math.nan)


def test_identity_transfer_ports():
    f = frame({"func": (20.0, 10.0)})
    reg = IdentityRegionProposer().propose(f, f, f.tool_mask, "func")
    assert reg.center == (20.0, 10.0)
    assert np.array_equal(IdentityCorrespondence().match((20.0, 10.0), f, f, reg), [20, 10])
    assert IdentityCorrespondence().match((0.0, 0.0), f, f, reg) is None


def test_region_center_correspondence_snaps_onto_tool():
    f = frame()
    assert np.array_equal(RegionCenterCorrespondence().match(None, f, f, Region((10.0, 8.0), 6)), [10, 8])
    # centre off the tool: nearest tool pixel inside the region
    assert np.array_equal(RegionCenterCorrespondence().match(None, f, f, Region((10.0, 17.0), 6)), [10, 14])
    assert RegionCenterCorrespondence().match(None, f, f, Region((2.0, 22.0), 2)) is None


def test_parse_index_forms():
    assert parse_index(3) == parse_index("3") == parse_index("P3") == parse_index(" p3 ") == 3
    for bad in ("three", 2.5, None, True):
        with pytest.raises(ValueError):
            parse_index(bad)


# --- prompts ---------------------------------------------------------------------------


def test_templates_ship_and_name_reply_keys():
    keys = {
        "function_point_detection": "function_keypoint",
        "function_point_transfer": "function_keypoint",
        "grasp_point_transfer": "grasp_keypoint",
        "function_axis_alignment": "selected_idx",
    }
    for tid in TEMPLATE_IDS:
        assert keys[tid] in load_template(tid)
    with pytest.raises(KeyError):
        load_template("nope")


def test_extract_json_tolerates_fences():
    assert extract_json('```json\n{"selected_idx": 2}\n```') == {"selected_idx": 2}
    with pytest.raises(ValueError):
        extract_json("no json here")


# --- remote client over a mock transport ------------------------------------------------


def chat_reply(content: str) -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


def ports_with(handler, **cfg):
    http = httpx.Client(transport=httpx.MockTransport(handler))
    return remote_vlm_client("http://vlm.test/v1", "key", task=TASK, http=http, backoff_s=0, **cfg)


def test_remote_selector_request_and_reply(tmp_path):
    seen = []

    def handler(request):
        seen.append(request)
        return chat_reply('{"function_keypoint": "P2"}')

    ports = ports_with(handler, log_dir=str(tmp_path))
    assert ports.selector.select(frame(), np.array([[6, 6], [10, 10], [20, 10]]), TASK) == 2
    req = seen[0]
    assert str(req.url) == "http://vlm.test/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer key"
    body = json.loads(req.content)
    assert body["messages"][0]["content"] == load_template("function_point_detection")
    images = [c for c in body["messages"][1]["content"] if c["type"] == "image_url"]
    assert len(images) == 1 and images[0]["image_url"]["url"].startswith("data:image/png;base64,")
    assert len(list(tmp_path.glob("call_*.json"))) == 1


def test_remote_retries_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            return httpx.Response(503)
        if len(calls) == 2:
            return chat_reply("I think the answer is obvious")
        return chat_reply('{"selected_idx": 4}')

    assert ports_with(handler).refiner.select(None, renderings(), TASK) == 4
    assert len(calls) == 3


def test_remote_transport_failure_after_three_attempts():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("down", request=request)

    with pytest.raises(TransportError):
        ports_with(handler).selector.select(frame(), np.zeros((3, 2)) + 6, TASK)
    assert len(calls) == 3


def test_remote_malformed_and_out_of_range():
    with pytest.raises(MalformedResponse):
        ports_with(lambda r: chat_reply("{}")).refiner.select(None, renderings(), TASK)
    with pytest.raises(MalformedResponse):
        ports_with(lambda r: httpx.Response(200, json={"oops": 1})).refiner.select(None, renderings(), TASK)
    with pytest.raises(OutOfRangeSelection):
        ports_with(lambda r: chat_reply('{"selected_idx": 7}')).refiner.select(None, renderings(), TASK)


def test_remote_region_proposer_centres_on_candidate():
    f = frame({"func": (20.0, 10.0), "grasp": (6.0, 6.0)})
    ports = ports_with(lambda r: chat_reply('{"grasp_keypoint": 0}'))
    reg = ports.proposer.propose(f, f, f.tool_mask, "grasp")
    u, v = reg.center
    assert f.tool_mask[int(v), int(u)]
    with pytest.raises(ValueError):
        ports.proposer.propose(f, f, f.tool_mask, "center")


def test_remote_config_from_env(monkeypatch):
    monkeypatch.delenv("TOOLKP_VLM_ENDPOINT", raising=False)
    with pytest.raises(TransportError):
        RemoteConfig.from_env()
    monkeypatch.setenv("TOOLKP_VLM_ENDPOINT", "http://x/v1/chat/completions")
    monkeypatch.setenv("TOOLKP_VLM_MODEL", "m")
    cfg = RemoteConfig.from_env()
    assert cfg.url == "http://x/v1/chat/completions" and cfg.model == "m"
