import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from counterfactual_ir.corpus import Document, Query, segment
from counterfactual_ir.scoring import Bm25Index, Bm25Scorer


def toy_docs():
    texts = {
        "a": "the cat sat on the mat.",
        "b": "dogs chase the cat around.",
        "c": "birds sing at dawn.",
        "d": "a cat and a dog. the cat sleeps.",
        "e": "nothing relevant here at all.",
    }
    return {k: Document.from_text(k, v) for k, v in texts.items()}


@pytest.fixture
def docs():
    return toy_docs()


@pytest.fixture
def bm25(docs):
    return Bm25Scorer(Bm25Index.build(docs.values()))


def planted_doc(n_passages=4, key=2, width=6, query_terms=("alpha", "beta")):
    """Non-overlapping passages of ``width`` filler tokens; passage ``key`` carries the query terms."""
    words = []
    for i in range(n_passages):
        block = [f"p{i}x{j}" for j in range(width)]
        if i == key:
            for j, t in enumerate(query_terms):
                block[j * 2] = t
        words += block
    doc = Document.from_text("planted", " ".join(words))
    return doc, segment(doc, width, 0.0), Query.from_text("q", " ".join(query_terms))


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        server = self.server
        with server.lock:
            server.in_flight += 1
            server.max_in_flight = max(server.max_in_flight, server.in_flight)
            server.requests.append(self.path)
        try:
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            time.sleep(server.delay)
            status, payload = server.respond(self.path, body)
            raw = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)
        finally:
            with server.lock:
                server.in_flight -= 1


def default_respond(path, body):
    if path == "/score":
        # deterministic: score = count of query tokens present in the text
        q = set(body["query"].split())
        return 200, {"scores": [float(sum(t in q for t in text.split())) for text in body["texts"]]}
    if path == "/embed":
        return 200, {"embeddings": [[float(len(t)), 1.0, 0.0] for t in body["texts"]]}
    return 404, {}


@pytest.fixture
def http_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    server.lock = threading.Lock()
    server.in_flight = 0
    server.max_in_flight = 0
    server.requests = []
    server.delay = 0.0
    server.respond = default_respond
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    server.url = f"http://127.0.0.1:{server.server_address[1]}"
    yield server
    server.shutdown()
    server.server_close()


# one (criterion, passed, detail) row per acceptance check, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
