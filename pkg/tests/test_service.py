import io
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from geoedit.imaging import ImageBuffer, MaskBuffer
from geoedit.service import ServiceConfig, create_app, grow_mask_from_clicks


def png_bytes(arr: np.ndarray, mode: str) -> bytes:
    out = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(out, format="PNG")
    return out.getvalue()


def scene_image(res=32):
    """Gray background with a flat red square object."""
    arr = np.full((res, res, 3), 120, dtype=np.uint8)
    arr[8:20, 8:20] = (220, 40, 40)
    return arr


def scene_mask(res=32):
    arr = np.zeros((res, res), dtype=np.uint8)
    arr[8:20, 8:20] = 255
    return arr


@pytest.fixture()
def client(tiny_editor, tmp_path):
    config = ServiceConfig(data_dir=tmp_path / "sessions", workers=2, sampler_steps=3, seed=0)
    app = create_app(tiny_editor, config)
    with TestClient(app) as c:
        yield c


def create_session(client) -> str:
    resp = client.post("/sessions", content=png_bytes(scene_image(), "RGB"),
                       headers={"Content-Type": "image/png"})
    assert resp.status_code == 201, resp.text
    return resp.json()["id"]


def upload_mask(client, sid, role="source"):
    resp = client.put(f"/sessions/{sid}/mask/{role}", content=png_bytes(scene_mask(), "L"))
    assert resp.status_code == 200


def wait_done(client, sid, timeout=60.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status = client.get(f"/sessions/{sid}/status").json()
        if status["state"] in ("done", "failed"):
            return status
        time.sleep(0.05)
    raise TimeoutError("job did not finish")


INSTRUCTION = {"op": "move", "direction": "right", "magnitude": 0.08, "difficulty": "easy"}


class TestBasics:
    def test_health(self, client):
        assert client.get("/health").json() == {"status": "ok"}

    def test_unknown_session(self, client):
        assert client.get("/sessions/deadbeef").status_code == 404

    def test_oversized_upload_rejected(self, tiny_editor, tmp_path):
        config = ServiceConfig(data_dir=tmp_path, max_upload_bytes=64, sampler_steps=3)
        with TestClient(create_app(tiny_editor, config)) as c:
            resp = c.post("/sessions", content=png_bytes(scene_image(), "RGB"))
            assert resp.status_code == 413

    def test_bad_upload_rejected(self, client):
        resp = client.post("/sessions", content=b"not a png")
        assert resp.status_code == 400


class TestMasks:
    def test_assist_mask_region_grow(self, client):
        sid = create_session(client)
        resp = client.post(f"/sessions/{sid}/mask/assist",
                           json={"points": [[12, 12]], "tolerance": 0.1})
        assert resp.status_code == 200
        mask = np.asarray(Image.open(io.BytesIO(resp.content)))
        expected = scene_mask()
        assert np.array_equal(mask >= 128, expected >= 128)

    def test_assist_needs_points(self, client):
        sid = create_session(client)
        assert client.post(f"/sessions/{sid}/mask/assist", json={"points": []}).status_code == 400

    def test_assist_rejects_outside_click(self, client):
        sid = create_session(client)
        resp = client.post(f"/sessions/{sid}/mask/assist", json={"points": [[99, 2]]})
        assert resp.status_code == 400

    def test_mask_roles_and_dimension_check(self, client):
        sid = create_session(client)
        upload_mask(client, sid, "source")
        upload_mask(client, sid, "completion")
        bad = png_bytes(np.zeros((8, 8), dtype=np.uint8), "L")
        resp = client.put(f"/sessions/{sid}/mask/source", content=bad)
        assert resp.status_code == 409
        assert client.put(f"/sessions/{sid}/mask/banana", content=bad).status_code == 400

    def test_grow_mask_union_of_clicks(self):
        arr = np.zeros((16, 16, 3), dtype=np.float32)
        arr[2:5, 2:5] = (1.0, 0, 0)
        arr[10:13, 10:13] = (0, 1.0, 0)
        img = ImageBuffer(arr)
        mask = grow_mask_from_clicks(img, [[3, 3], [11, 11]], tolerance=0.1)
        assert mask.data[3, 3] == 1 and mask.data[11, 11] == 1
        assert mask.data.sum() == 18


class TestPreview:
    def test_preview_requires_mask(self, client):
        sid = create_session(client)
        resp = client.post(f"/sessions/{sid}/preview", json={"instruction": INSTRUCTION})
        assert resp.status_code == 409

    def test_preview_pure(self, client):
        sid = create_session(client)
        upload_mask(client, sid)
        r1 = client.post(f"/sessions/{sid}/preview", json={"instruction": INSTRUCTION})
        assert r1.status_code == 200
        names = r1.json()
        a1 = client.get(f"/sessions/{sid}/artifacts/{names['coarse']}").content
        m1 = client.get(f"/sessions/{sid}/artifacts/{names['target_mask']}").content
        r2 = client.post(f"/sessions/{sid}/preview", json={"instruction": INSTRUCTION})
        assert r2.status_code == 200
        a2 = client.get(f"/sessions/{sid}/artifacts/{names['coarse']}").content
        m2 = client.get(f"/sessions/{sid}/artifacts/{names['target_mask']}").content
        assert a1 == a2 and m1 == m2

    def test_preview_out_of_bounds(self, client):
        sid = create_session(client)
        # small object hugging the right border: a hard rightward move exits fully
        edge = np.zeros((32, 32), dtype=np.uint8)
        edge[2:6, 28:32] = 255
        resp = client.put(f"/sessions/{sid}/mask/source", content=png_bytes(edge, "L"))
        assert resp.status_code == 200
        bad = {"op": "move", "direction": "right", "magnitude": 0.4, "difficulty": "hard"}
        resp = client.post(f"/sessions/{sid}/preview", json={"instruction": bad})
        assert resp.status_code == 409
        assert resp.json()["error"] == "out_of_bounds"

    def test_preview_bad_instruction(self, client):
        sid = create_session(client)
        upload_mask(client, sid)
        bad = {"op": "move", "direction": "right", "magnitude": 99.0, "difficulty": "easy"}
        assert client.post(f"/sessions/{sid}/preview", json={"instruction": bad}).status_code == 400


class TestJobs:
    def test_full_flow_and_byte_stable_artifacts(self, client):
        sid = create_session(client)
        upload_mask(client, sid)
        preview = client.post(f"/sessions/{sid}/preview", json={"instruction": INSTRUCTION})
        assert preview.status_code == 200
        run = client.post(f"/sessions/{sid}/run/full", json={})
        assert run.status_code == 202
        status = wait_done(client, sid)
        assert status["state"] == "done", status
        arts = client.get(f"/sessions/{sid}").json()["artifacts"]
        for needed in ("refined.png", "background.png", "composite.png", "target_mask.png"):
            assert needed in arts
        first = client.get(f"/sessions/{sid}/artifacts/refined.png").content
        second = client.get(f"/sessions/{sid}/artifacts/refined.png").content
        assert first == second

    def test_stepwise_inpaint_then_refine(self, client):
        sid = create_session(client)
        upload_mask(client, sid)
        # refine before prerequisites -> conflict
        assert client.post(f"/sessions/{sid}/run/refine", json={}).status_code == 409
        client.post(f"/sessions/{sid}/preview", json={"instruction": INSTRUCTION})
        resp = client.post(f"/sessions/{sid}/run/inpaint", json={"prompt": "empty scene"})
        assert resp.status_code == 202
        assert wait_done(client, sid)["state"] == "done"
        resp = client.post(f"/sessions/{sid}/run/refine", json={})
        assert resp.status_code == 202
        assert wait_done(client, sid)["state"] == "done"
        arts = client.get(f"/sessions/{sid}").json()["artifacts"]
        assert "refined.png" in arts

    def test_run_requires_mask(self, client):
        sid = create_session(client)
        assert client.post(f"/sessions/{sid}/run/full",
                           json={"instruction": INSTRUCTION}).status_code == 409

    def test_double_submit_rejected(self, tiny_editor, tmp_path):
        class SlowEditor:
            def __getattr__(self, name):
                return getattr(tiny_editor, name)

            def edit(self, request):
                time.sleep(1.0)
                return tiny_editor.edit(request)

        config = ServiceConfig(data_dir=tmp_path, workers=2, sampler_steps=3, seed=0)
        with TestClient(create_app(SlowEditor(), config)) as client:
            sid = create_session(client)
            upload_mask(client, sid)
            client.post(f"/sessions/{sid}/preview", json={"instruction": INSTRUCTION})
            first = client.post(f"/sessions/{sid}/run/full", json={})
            assert first.status_code == 202
            second = client.post(f"/sessions/{sid}/run/full", json={})
            assert second.status_code == 409
            assert second.json()["error"] == "job_running"
            status = wait_done(client, sid)
            assert status["state"] == "done"  # first job unharmed by the rejection
