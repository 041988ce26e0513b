"""Line-oriented JSON protocol for evaluating external policies.

Request, one line per query::

    {"goal_text": "...", "state_text": "...", "step_index": 3}

Response, one line::

    {"action": 2}            or            {"actions": [1, 2, 3]}

A sequence is consumed step by step before the next request is sent.
Transports: a subprocess speaking the protocol on stdin/stdout, or an HTTP
endpoint receiving the request as a POST body.

Running ``python -m teduo.bridge --action 2`` starts a constant responder on
stdio; ``--actions 1,2,3`` answers every request with that sequence.
"""
from __future__ import annotations

import argparse
import json
import selectors
import subprocess
import sys
import urllib.error
import urllib.request
from collections import deque

from . import gridworld as gw
from .llm import TransportError


class ProtocolError(ValueError):
    """The responder sent something that is not a valid response."""


def encode_request(goal_text: str, state_text: str, step_index: int) -> str:
    return json.dumps({"goal_text": goal_text, "state_text": state_text,
                       "step_index": int(step_index)}, sort_keys=True)


def _action(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < gw.N_ACTIONS:
        raise ProtocolError(f"action must be an integer in 0..{gw.N_ACTIONS - 1}, got {v!r}")
    return v


def parse_bridge_response(line) -> list:
    """Action list from one response line."""
    try:
        obj = json.loads(line)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ProtocolError(f"response is not JSON: {line!r}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("response must be a JSON object")
    if "action" in obj and "actions" in obj:
        raise ProtocolError("response holds both 'action' and 'actions'")
    if "action" in obj:
        return [_action(obj["action"])]
    if "actions" in obj:
        acts = obj["actions"]
        if not isinstance(acts, list) or not acts:
            raise ProtocolError("'actions' must be a non-empty list")
        return [_action(a) for a in acts]
    raise ProtocolError("response holds neither 'action' nor 'actions'")


class StdioTransport:
    """Talk to a subprocess, one JSON line each way."""

    def __init__(self, command, timeout: float = 30.0):
        self.command = list(command)
        self.timeout = timeout
        self._proc = None

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE,
                                          stdout=subprocess.PIPE, text=True, bufsize=1)
        return self._proc

    def request(self, line: str) -> str:
        proc = self._ensure()
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"responder closed its input: {exc}") from exc
        sel = selectors.DefaultSelector()
        sel.register(proc.stdout, selectors.EVENT_READ)
        try:
            if not sel.select(self.timeout):
                raise TransportError(f"no response within {self.timeout}s")
        finally:
            sel.close()
        out = proc.stdout.readline()
        if not out:
            raise TransportError("responder exited")
        return out.rstrip("\n")

    def close(self):
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
            if self._proc.stdout:
                self._proc.stdout.close()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class HTTPTransport:
    """POST each request line to ``url``; the body of the reply is the response."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def request(self, line: str) -> str:
        req = urllib.request.Request(self.url, data=line.encode(), method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read().decode().strip()
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(str(exc)) from exc

    def close(self):
        pass


class BridgePolicy:
    """Policy whose actions come from an external responder.

    ``state_text`` defaults to the raw state text; pass a fitted abstraction
    to send abstract text instead.
    """

    kind = "bridge"

    def __init__(self, transport, goal_text: str, abstraction=None, max_concurrency: int = 1):
        self.transport = transport
        self.goal_text = goal_text
        self.abstraction = abstraction
        self.max_concurrency = max_concurrency
        self._queue: deque = deque()
        self.requests = 0

    def reset(self):
        self._queue.clear()

    def state_text(self, state) -> str:
        if self.abstraction is None:
            return gw.textualize(state)
        return self.abstraction.text(self.abstraction.transform_one(state))

    def act(self, state, step: int) -> int:
        if not self._queue:
            line = encode_request(self.goal_text, self.state_text(state), step)
            self._queue.extend(parse_bridge_response(self.transport.request(line)))
            self.requests += 1
        return self._queue.popleft()


def bridge_policy(endpoint: str, goal_text: str, timeout: float = 30.0,
                  abstraction=None) -> BridgePolicy:
    """``http(s)://...`` selects HTTP; anything else is a shell-split command."""
    if endpoint.startswith(("http://", "https://")):
        transport = HTTPTransport(endpoint, timeout)
    else:
        import shlex
        transport = StdioTransport(shlex.split(endpoint), timeout)
    return BridgePolicy(transport, goal_text, abstraction)


def _serve(response: str, stdin=sys.stdin, stdout=sys.stdout) -> None:
    for line in stdin:
        if not line.strip():
            continue
        json.loads(line)
        stdout.write(response + "\n")
        stdout.flush()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="constant-action bridge responder")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--action", type=int)
    g.add_argument("--actions", type=str, help="comma-separated action codes")
    args = p.parse_args(argv)
    if args.action is not None:
        response = json.dumps({"action": args.action})
    else:
        response = json.dumps({"actions": [int(a) for a in args.actions.split(",")]})
    parse_bridge_response(response)
    _serve(response)
    return 0


if __name__ == "__main__":
    sys.exit(main())
