"""Server side of the human pose-review workflow.

A review batch is a directory of per-sample lift results plus preview
meshes. Verdicts are persisted to an append-only JSON-lines log next to
the batch, so the in-memory state can always be rebuilt by replay.
Items move from 'unreviewed' to exactly one of 'acceptable' or 'bad';
re-reviewing is refused. The HTTP layer exposes listing, item detail,
verdict posting and a training-set export that drops everything a
reviewer did not accept.
"""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .lifting import export_training_set

VERDICT_LOG = "verdicts.jsonl"
ALLOWED_VERDICTS = ("acceptable", "bad")


class UnknownItem(KeyError):
    pass


class AlreadyReviewed(ValueError):
    pass


class ReviewStore:
    """Loads a batch directory and serializes verdict writes."""

    def __init__(self, batch_dir):
        self.batch_dir = Path(batch_dir)
        self._lock = threading.Lock()
        self.items: dict[str, dict] = {}
        for path in sorted(self.batch_dir.glob("*.lift.json")):
            with open(path) as f:
                payload = json.load(f)
            payload.setdefault("verdict", "unreviewed")
            self.items[str(payload["id"])] = payload
        self._replay_log()

    def _log_path(self) -> Path:
        return self.batch_dir / VERDICT_LOG

    def _replay_log(self):
        path = self._log_path()
        if not path.exists():
            return
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                item = self.items.get(str(entry["id"]))
                if item is not None:
                    item["verdict"] = entry["verdict"]

    def _summary(self, item: dict) -> dict:
        return {
            "id": item["id"],
            "verdict": item["verdict"],
            "reprojection_error": item.get("reprojection_error"),
            "converged": item.get("converged", True),
        }

    def list_items(self, verdict: str | None = None, page: int = 0,
                   page_size: int = 50) -> dict:
        ids = sorted(self.items)
        rows = [self._summary(self.items[i]) for i in ids]
        if verdict:
            rows = [r for r in rows if r["verdict"] == verdict]
        total = len(rows)
        start = page * page_size
        return {
            "items": rows[start:start + page_size],
            "page": page,
            "page_size": page_size,
            "total": total,
        }

    def get_item(self, item_id: str) -> dict:
        item = self.items.get(str(item_id))
        if item is None:
            raise UnknownItem(item_id)
        out = dict(item)
        out["mesh_url"] = f"/items/{item_id}/mesh.obj"
        return out

    def mesh_path(self, item_id: str) -> Path:
        if str(item_id) not in self.items:
            raise UnknownItem(item_id)
        return self.batch_dir / f"{item_id}.preview.obj"

    def set_verdict(self, item_id: str, verdict: str) -> dict:
        if verdict not in ALLOWED_VERDICTS:
            raise ValueError(f"verdict must be one of {ALLOWED_VERDICTS}")
        with self._lock:
            item = self.items.get(str(item_id))
            if item is None:
                raise UnknownItem(item_id)
            if item["verdict"] != "unreviewed":
                raise AlreadyReviewed(f"item {item_id} is already {item['verdict']}")
            item["verdict"] = verdict
            entry = {"id": str(item_id), "verdict": verdict, "timestamp": time.time()}
            with open(self._log_path(), "a") as f:
                f.write(json.dumps(entry) + "\n")
        return self._summary(item)

    def export_training(self) -> list[dict]:
        verdicts = {i: item["verdict"] for i, item in self.items.items()}
        rows = [self.items[i] for i in sorted(self.items)]
        return export_training_set(rows, verdicts)


_FALLBACK_PAGE = """<!doctype html>
<html><body><h1>Pose review service</h1>
<p>No review client assets were found. The JSON API is live:
GET /items, GET /items/&lt;id&gt;, POST /items/&lt;id&gt;/verdict,
GET /export.</p></body></html>
"""


def make_review_server(store: ReviewStore, port: int = 0,
                       static_dir=None) -> ThreadingHTTPServer:
    """HTTP server over a review store; verdict writes go through the
    store's single lock."""
    static_root = Path(static_dir).resolve() if static_dir else None

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # keep test output quiet
            pass

        def _json(self, code: int, payload):
            body = json.dumps(payload).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _file(self, path: Path, content_type: str):
            try:
                data = path.read_bytes()
            except OSError:
                self._json(404, {"error": "not_found", "message": str(path.name)})
                return
            self.send_response(200)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _static(self, rel: str):
            if static_root is None:
                body = _FALLBACK_PAGE.encode()
                self.send_response(200)
                self.send_header("Content-Type", "text/html")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                return
            target = (static_root / rel.lstrip("/")).resolve()
            if not str(target).startswith(str(static_root)):
                self._json(404, {"error": "not_found", "message": rel})
                return
            if target.is_dir():
                target = target / "index.html"
            ctype = {
                ".html": "text/html", ".js": "text/javascript",
                ".css": "text/css", ".json": "application/json",
            }.get(target.suffix, "application/octet-stream")
            self._file(target, ctype)

        def do_GET(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if not parts:
                    self._static("index.html")
                elif parts[0] == "items" and len(parts) == 1:
                    q = parse_qs(url.query)
                    self._json(200, store.list_items(
                        verdict=q.get("verdict", [None])[0],
                        page=int(q.get("page", ["0"])[0]),
                        page_size=int(q.get("page_size", ["50"])[0])))
                elif parts[0] == "items" and len(parts) == 2:
                    self._json(200, store.get_item(parts[1]))
                elif parts[0] == "items" and len(parts) == 3 and parts[2] == "mesh.obj":
                    self._file(store.mesh_path(parts[1]), "text/plain")
                elif parts[0] == "export":
                    self._json(200, {"items": store.export_training()})
                else:
                    self._static(url.path)
            except UnknownItem as exc:
                self._json(404, {"error": "unknown_item", "message": str(exc)})
            except (ValueError, KeyError) as exc:
                self._json(400, {"error": "bad_request", "message": str(exc)})

        def do_POST(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if len(parts) == 3 and parts[0] == "items" and parts[2] == "verdict":
                    length = int(self.headers.get("Content-Length", "0"))
                    body = json.loads(self.rfile.read(length) or b"{}")
                    updated = store.set_verdict(parts[1], body.get("verdict", ""))
                    self._json(200, updated)
                else:
                    self._json(404, {"error": "not_found", "message": url.path})
            except UnknownItem as exc:
                self._json(404, {"error": "unknown_item", "message": str(exc)})
            except AlreadyReviewed as exc:
                self._json(409, {"error": "already_reviewed", "message": str(exc)})
            except (ValueError, KeyError) as exc:
                self._json(400, {"error": "bad_request", "message": str(exc)})

    return ThreadingHTTPServer(("127.0.0.1", port), Handler)
