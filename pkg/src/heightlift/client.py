"""HTTP client for the detection service.

Without a base URL the client drives an in-process instance of the FastAPI
app, so the CLI works standalone while still exercising the same
request/response path a remote deployment would.
"""

from __future__ import annotations

import httpx


class ServiceClient:
    def __init__(self, base_url=None, timeout=None):
        if base_url:
            self._client = httpx.Client(base_url=base_url, timeout=timeout)
        else:
            from starlette.testclient import TestClient

            from .service.app import create_app
            self._client = TestClient(create_app(),
                                      base_url="http://heightlift.local")

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False

    def health(self):
        return self._client.get("/v1/health")

    def synth(self, payload):
        return self._client.post("/v1/synth", json=payload)

    def train(self, payload):
        return self._client.post("/v1/train", json=payload)

    def infer(self, payload):
        return self._client.post("/v1/infer", json=payload)

    def evaluate(self, payload):
        return self._client.post("/v1/eval", json=payload)

    def render_bev(self, payload):
        return self._client.post("/v1/render-bev", json=payload)
