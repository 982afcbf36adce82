"""HTTP service backing the cluster-labeling UI.

JSON API over the inference artifacts in a working directory:

    GET  /api/clusters            one summary per pseudo-cluster (exactly K)
    GET  /api/clusters/{id}/points?limit=N   sampled member + context points
    GET  /api/classes             class taxonomy (names, colors)
    GET  /api/progress            labeled / total counts
    POST /api/mapping             partial or full ClassMapping JSON
    POST /api/submit              validate totality, run map+eval server-side

Point payloads are flat [x, y, z, ...] arrays. Mapping writes are serialized
through one lock and persisted with an atomic replace.
"""

from __future__ import annotations

import json
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import evalmap, synth
from .core import load_xyz
from .net import load_checkpoint

_SAMPLE_CAP = 20000
_SAMPLE_SEED = 20240501


class LabelingServer:
    def __init__(self, workdir, classes=synth.CLASS_NAMES, ui_dir=None):
        self.workdir = Path(workdir)
        self.classes = tuple(classes)
        self.colors = tuple(synth.CLASS_COLORS[: len(self.classes)])
        self.pc2 = load_xyz(self.workdir / "work_pc2.xyz", epoch_tag=2)
        self.pc1 = load_xyz(self.workdir / "work_pc1.xyz", epoch_tag=1)
        self.pseudo = np.loadtxt(self.workdir / "pred_pseudo.txt", dtype=np.int64).ravel()
        _, bb = load_checkpoint(self.workdir / "model.dcnp")
        self.k = bb.n_prototypes
        self.lock = threading.Lock()
        self.mapping = self._load_mapping()
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self._members = [np.flatnonzero(self.pseudo == c) for c in range(self.k)]

    def _load_mapping(self) -> evalmap.ClassMapping:
        path = self.workdir / "mapping.json"
        if path.exists():
            return evalmap.ClassMapping.from_json(path.read_text())
        return evalmap.ClassMapping(len(self.classes))

    def _persist_mapping(self):
        tmp = self.workdir / "mapping.json.tmp"
        tmp.write_text(self.mapping.to_json())
        os.replace(tmp, self.workdir / "mapping.json")

    # ------------------------------------------------------------- payloads
    def clusters_payload(self):
        out = []
        for cid in range(self.k):
            ids = self._members[cid]
            entry = self.mapping.entries.get(cid)
            if len(ids):
                xyz = self.pc2.xyz[ids]
                centroid = xyz[:, :2].mean(axis=0)
                spread = float(np.sqrt(((xyz[:, :2] - centroid) ** 2).sum(axis=1).mean()))
                mean_height = float(xyz[:, 2].mean())
            else:
                spread = 0.0
                mean_height = 0.0
            out.append({
                "id": cid,
                "count": int(len(ids)),
                "label": None if entry is None else entry[0],
                "provenance": None if entry is None else entry[1],
                "mean_height": mean_height,
                "spread": spread,
            })
        return out

    def points_payload(self, cid: int, limit: int):
        limit = max(1, min(int(limit), _SAMPLE_CAP))
        ids = self._members[cid]
        rng = np.random.default_rng(_SAMPLE_SEED + cid)
        if len(ids) > limit:
            ids = ids[np.sort(rng.choice(len(ids), size=limit, replace=False))]
        pts = self.pc2.xyz[ids]
        context = np.empty((0, 3))
        if len(pts):
            lo = pts[:, :2].min(axis=0) - 2.0
            hi = pts[:, :2].max(axis=0) + 2.0
            mask = np.all((self.pc1.xyz[:, :2] >= lo) & (self.pc1.xyz[:, :2] <= hi), axis=1)
            ctx_ids = np.flatnonzero(mask)
            if len(ctx_ids) > limit:
                ctx_ids = ctx_ids[np.sort(rng.choice(len(ctx_ids), size=limit, replace=False))]
            context = self.pc1.xyz[ctx_ids]
        return {
            "cluster": cid,
            "count": int(len(self._members[cid])),
            "points": [round(float(v), 4) for v in pts.ravel()],
            "context": [round(float(v), 4) for v in context.ravel()],
        }

    def classes_payload(self):
        return {"classes": [
            {"id": i, "name": name, "color": self.colors[i % len(self.colors)]}
            for i, name in enumerate(self.classes)
        ]}

    def progress_payload(self):
        return {"labeled": len(self.mapping.entries), "total": self.k}

    def apply_mapping_update(self, doc: dict):
        entries = doc.get("entries")
        if not isinstance(entries, list):
            raise ValueError("body must carry an 'entries' list")
        with self.lock:
            for e in entries:
                cid = int(e["cluster"])
                cls = int(e["class"])
                if not 0 <= cid < self.k:
                    raise KeyError(f"unknown cluster id {cid}")
                self.mapping.assign(cid, cls, e.get("provenance", "user"))
            self._persist_mapping()
        return self.progress_payload()

    def submit(self):
        with self.lock:
            missing = [cid for cid in range(self.k)
                       if cid not in self.mapping.entries]
            if missing:
                return None, missing
            pred = evalmap.apply_mapping(self.pseudo, self.mapping)
            if self.pc2.labels is None:
                return {"note": "no ground truth available; mapping persisted"}, None
            report = evalmap.metrics(pred, self.pc2.labels, len(self.classes),
                                     change_class_ids=range(1, len(self.classes)))
            binary = evalmap.binary_collapse(pred, self.pc2.labels)
            doc = {"schema": 1,
                   "multiclass": json.loads(report.to_json()),
                   "binary": json.loads(binary.to_json())}
            (self.workdir / "metrics.json").write_text(json.dumps(doc, indent=2))
            (self.workdir / "metrics.txt").write_text(
                evalmap.format_table(report, self.classes))
            return doc, None

    def make_handler(self):
        state = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # keep test output quiet
                pass

            def _json(self, code: int, payload):
                body = json.dumps(payload).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", "application/json; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                path, _, query = self.path.partition("?")
                if path == "/api/clusters":
                    return self._json(200, state.clusters_payload())
                if path.startswith("/api/clusters/") and path.endswith("/points"):
                    cid_str = path[len("/api/clusters/"):-len("/points")]
                    try:
                        cid = int(cid_str)
                    except ValueError:
                        return self._json(400, {"detail": f"bad cluster id {cid_str!r}"})
                    if not 0 <= cid < state.k:
                        return self._json(400, {"detail": f"unknown cluster id {cid}"})
                    limit = 2000
                    for part in query.split("&"):
                        if part.startswith("limit="):
                            try:
                                limit = int(part[len("limit="):])
                            except ValueError:
                                return self._json(400, {"detail": "bad limit"})
                    return self._json(200, state.points_payload(cid, limit))
                if path == "/api/classes":
                    return self._json(200, state.classes_payload())
                if path == "/api/progress":
                    return self._json(200, state.progress_payload())
                return self._static(path)

            def _static(self, path: str):
                if state.ui_dir is None:
                    return self._json(404, {"detail": f"no route {path}"})
                rel = "index.html" if path in ("/", "") else path.lstrip("/")
                target = (state.ui_dir / rel).resolve()
                if not str(target).startswith(str(state.ui_dir.resolve())) or not target.is_file():
                    return self._json(404, {"detail": f"no route {path}"})
                ctype = {
                    ".html": "text/html", ".js": "text/javascript",
                    ".css": "text/css", ".json": "application/json",
                    ".map": "application/json", ".svg": "image/svg+xml",
                }.get(target.suffix, "application/octet-stream")
                body = target.read_bytes()
                self.send_response(200)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length) if length else b"{}"
                try:
                    doc = json.loads(raw.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError):
                    return self._json(400, {"detail": "body must be UTF-8 JSON"})
                if self.path == "/api/mapping":
                    try:
                        return self._json(200, state.apply_mapping_update(doc))
                    except KeyError as exc:
                        return self._json(400, {"detail": str(exc.args[0])})
                    except (ValueError, TypeError) as exc:
                        return self._json(400, {"detail": str(exc)})
                if self.path == "/api/submit":
                    result, missing = state.submit()
                    if missing is not None:
                        return self._json(409, {"detail": "mapping incomplete",
                                                "missing": missing})
                    return self._json(200, result)
                return self._json(404, {"detail": f"no route {self.path}"})

        return Handler

    def serve_forever(self, port: int, host: str = "127.0.0.1"):
        httpd = ThreadingHTTPServer((host, port), self.make_handler())
        try:
            httpd.serve_forever()
        finally:
            httpd.server_close()

    def start_background(self, port: int = 0, host: str = "127.0.0.1"):
        """Start on an ephemeral port (tests); returns (server, port)."""
        httpd = ThreadingHTTPServer((host, port), self.make_handler())
        thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        thread.start()
        return httpd, httpd.server_address[1]
