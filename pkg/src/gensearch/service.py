"""Search endpoint: newline-delimited JSON over TCP.

One request per line, one response line per request. Every request is an
object with a ``type`` field and an optional ``id`` echoed back.

Requests::

    {"type": "search", "query_tokens": [int, ...], "user_id": int, "top_n": int}
    {"type": "insert", "path": "3-17-40", "item_id": int}
    {"type": "remove", "path": "3-17-40", "item_id": int}
    {"type": "ping"}
    {"type": "stats"}

Success responses carry ``"ok": true``, ``model_version`` and
``trie_version``. A search response lists ``results`` as objects with
``item_id``, ``path`` (dash-joined codes) and ``score`` (path log-prob),
best first, at most ``top_n`` of them. Failures return
``{"ok": false, "error": {"code": str, "message": str}}`` and leave the
connection open.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading

from .codebook import format_path, parse_path
from .decoding import Retriever, rank_results
from .numeric import ParamStore
from .trie import SidTrie

log = logging.getLogger(__name__)


class RequestError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _int_field(req: dict, name: str, default=None) -> int:
    if name not in req:
        if default is None:
            raise RequestError("missing_field", f"field {name!r} is required")
        return default
    val = req[name]
    if isinstance(val, bool) or not isinstance(val, int):
        raise RequestError("bad_field", f"field {name!r} must be an integer")
    return val


class SearchService:
    """Request handling independent of the transport."""

    def __init__(self, params: ParamStore, trie: SidTrie, model_version: str, beam_size: int = 32,
                 max_top_n: int = 1000):
        self.trie = trie
        self.beam_size = beam_size
        self.max_top_n = max_top_n
        self._model_lock = threading.Lock()
        self._set_model(params, model_version)

    def _set_model(self, params: ParamStore, version: str) -> None:
        retriever = Retriever(params, self.trie, self.beam_size, self.beam_size)
        with self._model_lock:
            self._model = (retriever, version)

    def swap_model(self, params: ParamStore, version: str) -> None:
        """Replace the model atomically; in-flight searches finish on the old one."""
        self._set_model(params, version)

    def _envelope(self, req_type: str, version: str, **body) -> dict:
        return {"ok": True, "type": req_type, "model_version": version, "trie_version": self.trie.version, **body}

    def search(self, req: dict) -> dict:
        tokens = req.get("query_tokens")
        if not isinstance(tokens, list) or not tokens or not all(
                isinstance(t, int) and not isinstance(t, bool) for t in tokens):
            raise RequestError("bad_field", "field 'query_tokens' must be a non-empty list of integers")
        user = _int_field(req, "user_id", 0)
        top_n = _int_field(req, "top_n", 10)
        if top_n < 0 or top_n > self.max_top_n:
            raise RequestError("bad_field", f"field 'top_n' must lie in [0, {self.max_top_n}]")
        with self._model_lock:
            retriever, version = self._model
        with self.trie.lock.read():
            if top_n == 0 or len(self.trie) == 0:
                return self._envelope("search", version, results=[])
            n_paths = max(1, min(top_n, retriever.beam_size))
            paths = retriever.search(tokens, user, top_n=n_paths)
            ranked = rank_results(paths, self.trie)[:top_n]
            return self._envelope("search", version, results=[
                {"item_id": r.item_id, "path": format_path(r.path), "score": r.score} for r in ranked])

    def admin(self, req: dict) -> dict:
        op = req["type"]
        path_text = req.get("path")
        if not isinstance(path_text, str):
            raise RequestError("missing_field", "field 'path' must be a dash-joined code string")
        try:
            path = parse_path(path_text)
        except ValueError as exc:
            raise RequestError("bad_field", str(exc)) from None
        item = _int_field(req, "item_id")
        with self.trie.lock.write():
            try:
                self.trie.update(op, path, item)
            except KeyError as exc:
                raise RequestError("not_found", exc.args[0]) from None
            except ValueError as exc:
                raise RequestError("bad_field", str(exc)) from None
        with self._model_lock:
            version = self._model[1]
        return self._envelope(op, version)

    def handle(self, req) -> dict:
        if not isinstance(req, dict):
            raise RequestError("bad_request", "request must be a JSON object")
        kind = req.get("type")
        if kind == "search":
            return self.search(req)
        if kind in ("insert", "remove"):
            return self.admin(req)
        with self._model_lock:
            version = self._model[1]
        if kind == "ping":
            return self._envelope("ping", version)
        if kind == "stats":
            with self.trie.lock.read():
                return self._envelope("stats", version, n_entries=len(self.trie))
        raise RequestError("unknown_type", f"unknown request type {kind!r}")

    def handle_line(self, line: str) -> str:
        req_id = None
        try:
            try:
                req = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RequestError("bad_json", f"malformed JSON: {exc.msg}") from None
            if isinstance(req, dict):
                req_id = req.get("id")
            resp = self.handle(req)
        except RequestError as exc:
            resp = {"ok": False, "error": {"code": exc.code, "message": exc.message}}
        except Exception as exc:  # keep the connection alive on unexpected failures
            log.exception("request failed")
            resp = {"ok": False, "error": {"code": "internal", "message": str(exc)}}
        if req_id is not None:
            resp["id"] = req_id
        return json.dumps(resp)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: SearchService = self.server.service
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            self.wfile.write((service.handle_line(line) + "\n").encode())
            self.wfile.flush()


class SearchServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: SearchService):
        super().__init__(address, _Handler)
        self.service = service


def parse_listen(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        host, port = "127.0.0.1", addr
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ValueError(f"bad listen address {addr!r}; expected host:port") from None
