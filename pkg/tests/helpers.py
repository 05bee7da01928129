"""Shared test scaffolding: scripted callback sinks and raw HTTP helpers."""

import json
import threading

from dynaseal.httpio import HttpService, JsonResponse, RunningServer


class CallbackSink(HttpService):
    """Records callback deliveries; can be scripted to fail first.

    `script` is a list of HTTP statuses to answer with, one per request;
    once exhausted every request gets 200.
    """

    def __init__(self, script=None):
        self.script = list(script or [])
        self.received = []
        self.requests = 0
        self._lock = threading.Lock()

    def handle(self, method, path, headers, body):
        with self._lock:
            self.requests += 1
            status = self.script.pop(0) if self.script else 200
            if status == 200:
                self.received.append(json.loads(body.decode()))
        return JsonResponse(status, {"status": "ok"} if status == 200 else {"error": "scripted"})


def run_sink(script=None):
    sink = CallbackSink(script)
    server = RunningServer(sink)
    return sink, server
