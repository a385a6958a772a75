"""Human curation of generated scenes: decision store, HTTP service, export.

Decisions are written ahead to an append-only JSONL log and acknowledged only
after the bytes are on disk, so a service restart never loses a decision; the
in-memory view is the last-write-wins fold of the log. The HTTP API serves
scene payloads as versioned JSON ("v1") and accepts accept/reject decisions.
"""

from __future__ import annotations

import json
import os
import shutil
import threading
import time
from dataclasses import dataclass, asdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from .labels import class_palette
from .scenes import VoxelScene, read_scene

SCHEMA_VERSION = "v1"
DECISIONS = ("pending", "accepted", "rejected")


@dataclass(frozen=True)
class CurationRecord:
    scene_id: str
    source: str = "unconditional"
    decision: str = "pending"
    reviewer: str = ""
    note: str = ""
    timestamp: float = 0.0

    def __post_init__(self):
        if self.decision not in DECISIONS:
            raise ValueError(f"unknown decision {self.decision!r}")


class CurationStore:
    """Write-ahead decision log with a serialized writer."""

    def __init__(self, records_path):
        self.path = Path(records_path)
        self._lock = threading.Lock()
        self._records: dict[str, CurationRecord] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                data = json.loads(line)
                self._records[data["scene_id"]] = CurationRecord(**data)

    def register(self, scene_id: str, source: str) -> None:
        """Make a scene known without recording a decision."""
        with self._lock:
            if scene_id not in self._records:
                self._records[scene_id] = CurationRecord(scene_id=scene_id, source=source)

    def record(self, scene_id: str, decision: str, reviewer: str = "", note: str = "") -> CurationRecord:
        if decision not in ("accepted", "rejected"):
            raise ValueError(f"decision must be accepted or rejected, got {decision!r}")
        with self._lock:
            prev = self._records.get(scene_id)
            source = prev.source if prev else "unconditional"
            rec = CurationRecord(
                scene_id=scene_id,
                source=source,
                decision=decision,
                reviewer=reviewer,
                note=note,
                timestamp=time.time(),
            )
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._records[scene_id] = rec
            return rec

    def get(self, scene_id: str) -> CurationRecord | None:
        with self._lock:
            return self._records.get(scene_id)

    def statuses(self) -> dict[str, CurationRecord]:
        with self._lock:
            return dict(self._records)

    def accepted_ids(self) -> list[str]:
        with self._lock:
            return sorted(sid for sid, r in self._records.items() if r.decision == "accepted")


# ------------------------------ scene payloads ------------------------------

def scene_payload(scene_id: str, scene: VoxelScene, decision: str, source: str,
                  condition_points=None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": scene_id,
        "grid": {
            "min_corner": list(scene.grid.min_corner),
            "max_corner": list(scene.grid.max_corner),
            "resolution": scene.grid.resolution,
            "dims": list(scene.grid.dims),
        },
        "class_count": scene.class_count,
        "coords": scene.coords.tolist(),
        "labels": scene.labels.tolist(),
        "palette": {str(cid): list(rgb) for cid, rgb in class_palette(scene.class_count).items()},
        "condition_points": None if condition_points is None else np.asarray(condition_points).tolist(),
        "decision": decision,
        "source": source,
    }


class SceneLibrary:
    """Scenes on disk: <id>.vsc1, optional <id>.cond.bin (float32 xyz) and
    <id>.meta.json carrying the conditioning source."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.ids = sorted(p.stem for p in self.directory.glob("*.vsc1"))
        if not self.ids:
            raise ValueError(f"no .vsc1 scenes under {directory}")

    def source(self, scene_id: str) -> str:
        meta = self.directory / f"{scene_id}.meta.json"
        if meta.exists():
            return json.loads(meta.read_text()).get("source", "unconditional")
        return "unconditional"

    def scene(self, scene_id: str) -> VoxelScene:
        return read_scene(self.directory / f"{scene_id}.vsc1")

    def condition_points(self, scene_id: str):
        path = self.directory / f"{scene_id}.cond.bin"
        if not path.exists():
            return None
        return np.fromfile(path, dtype="<f4").reshape(-1, 3)


# ------------------------------- service -------------------------------

class CurationService(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, bind, library: SceneLibrary, store: CurationStore):
        self.library = library
        self.store = store
        for scene_id in library.ids:
            store.register(scene_id, library.source(scene_id))
        super().__init__(bind, _Handler)


class _Handler(BaseHTTPRequestHandler):
    server: CurationService

    def log_message(self, fmt, *args):  # keep test output clean
        pass

    def _json(self, status: int, payload) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(body)

    def do_OPTIONS(self):  # CORS preflight for the browser client
        self._json(200, {})

    def do_GET(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        if parts == ["scenes"]:
            return self._list_scenes(parse_qs(url.query))
        if len(parts) == 2 and parts[0] == "scenes":
            return self._get_scene(parts[1])
        if parts == ["export"]:
            return self._json(200, {"accepted": self.server.store.accepted_ids()})
        if parts == ["healthz"]:
            return self._json(200, {"status": "ok"})
        return self._json(404, {"error": f"unknown path {url.path}"})

    def _list_scenes(self, query):
        page = int(query.get("page", ["0"])[0])
        page_size = int(query.get("page_size", ["50"])[0])
        want = query.get("status", [None])[0]
        if page < 0 or page_size < 1:
            return self._json(400, {"error": "bad paging parameters"})
        statuses = self.server.store.statuses()
        items = [
            {"id": sid, "decision": statuses[sid].decision, "source": statuses[sid].source}
            for sid in self.server.library.ids
            if want is None or statuses[sid].decision == want
        ]
        lo = page * page_size
        return self._json(
            200,
            {
                "total": len(items),
                "page": page,
                "page_size": page_size,
                "scenes": items[lo : lo + page_size],
            },
        )

    def _get_scene(self, scene_id: str):
        if scene_id not in self.server.library.ids:
            return self._json(404, {"error": f"unknown scene {scene_id}"})
        record = self.server.store.get(scene_id)
        payload = scene_payload(
            scene_id,
            self.server.library.scene(scene_id),
            record.decision if record else "pending",
            record.source if record else "unconditional",
            self.server.library.condition_points(scene_id),
        )
        return self._json(200, payload)

    def do_POST(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        if len(parts) != 3 or parts[0] != "scenes" or parts[2] != "decision":
            return self._json(404, {"error": f"unknown path {url.path}"})
        scene_id = parts[1]
        if scene_id not in self.server.library.ids:
            return self._json(404, {"error": f"unknown scene {scene_id}"})
        try:
            length = int(self.headers.get("Content-Length", "0"))
            data = json.loads(self.rfile.read(length) or b"{}")
            decision = data["decision"]
            if decision not in ("accepted", "rejected"):
                raise ValueError(f"bad decision {decision!r}")
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            return self._json(400, {"error": f"malformed decision: {exc}"})
        record = self.server.store.record(
            scene_id, decision, data.get("reviewer", ""), data.get("note", "")
        )
        return self._json(200, {"id": scene_id, "decision": record.decision})


def serve_curation(scenes_dir, records_path, bind=("127.0.0.1", 0)) -> CurationService:
    """Construct the service (not yet serving); call serve_forever() or use
    in a thread. The bound port is available as server.server_address."""
    return CurationService(bind, SceneLibrary(scenes_dir), CurationStore(records_path))


# -------------------------------- export --------------------------------

def export_curated(records_path, scenes_dir, out_dir) -> dict:
    """Copy exactly the accepted scenes into out_dir and write a manifest with
    per-source counts."""
    store = CurationStore(records_path)
    library = SceneLibrary(scenes_dir)
    accepted = store.accepted_ids()
    missing = [sid for sid in accepted if sid not in library.ids]
    if missing:
        raise FileNotFoundError(f"accepted scenes missing from {scenes_dir}: {missing}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_source: dict[str, int] = {}
    for sid in accepted:
        shutil.copyfile(Path(scenes_dir) / f"{sid}.vsc1", out / f"{sid}.vsc1")
        source = store.get(sid).source
        per_source[source] = per_source.get(source, 0) + 1
    manifest = {"total": len(accepted), "per_source": per_source, "ids": accepted}
    (out / "curated_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest
