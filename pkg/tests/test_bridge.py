import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from teduo import gridworld as gw
from teduo.bridge import (BridgePolicy, HTTPTransport, ProtocolError, StdioTransport,
                          bridge_policy, encode_request, parse_bridge_response)
from teduo.evaluation import EpisodeAborted, evaluate, rollout
from teduo.goals import Goal
from teduo.llm import TransportError

RESPONDER = [sys.executable, "-m", "teduo.bridge"]


def test_request_encoding_is_one_sorted_line():
    line = encode_request("go to the tile (1,1)", "a\nb", 3)
    assert "\n" not in line
    assert json.loads(line) == {"goal_text": "go to the tile (1,1)", "state_text": "a\nb",
                                "step_index": 3}
    assert line.startswith('{"goal_text"')


@pytest.mark.parametrize("line,expected", [('{"action": 2}', [2]),
                                           ('{"actions": [1, 2, 3]}', [1, 2, 3]),
                                           ('{"action": 0, "note": "x"}', [0])])
def test_valid_responses(line, expected):
    assert parse_bridge_response(line) == expected


@pytest.mark.parametrize("line", ['', 'nope', '[2]', '{"action": 7}', '{"action": -1}',
                                  '{"action": true}', '{"action": 2.0}', '{"actions": []}',
                                  '{"actions": 2}', '{"action": 1, "actions": [1]}', '{}'])
def test_invalid_responses(line):
    with pytest.raises(ProtocolError):
        parse_bridge_response(line)


class FakeTransport:
    def __init__(self, replies):
        self.replies = list(replies)
        self.lines = []

    def request(self, line):
        self.lines.append(json.loads(line))
        return self.replies.pop(0)


def test_sequence_consumed_before_requery():
    t = FakeTransport(['{"actions": [1, 2]}', '{"action": 0}'])
    pol = BridgePolicy(t, "goal")
    x = gw.empty_room(5, 5)
    assert [pol.act(x, 0), pol.act(x, 1), pol.act(x, 2)] == [1, 2, 0]
    assert [r["step_index"] for r in t.lines] == [0, 2]
    assert t.lines[0]["state_text"] == gw.textualize(x)


def test_stdio_constant_responder():
    with StdioTransport(RESPONDER + ["--action", "2"], timeout=30) as t:
        for i in range(3):
            assert parse_bridge_response(t.request(encode_request("g", "s", i))) == [2]


def test_stdio_responder_that_exits_is_a_transport_error():
    with StdioTransport([sys.executable, "-c", "pass"], timeout=10) as t:
        with pytest.raises(TransportError):
            t.request(encode_request("g", "s", 0))


def test_stdio_timeout():
    cmd = [sys.executable, "-c", "import time; time.sleep(30)"]
    with StdioTransport(cmd, timeout=0.5) as t:
        with pytest.raises(TransportError):
            t.request(encode_request("g", "s", 0))


def test_transport_failure_aborts_rollout():
    pol = bridge_policy(f"{sys.executable} -c pass", "go to the tile (3,1)", timeout=10)
    x = gw.empty_room(6, 3, agent_pos=(1, 1), agent_dir=1)
    with pytest.raises(EpisodeAborted):
        rollout(x, pol, Goal("go_to_tile", tile=(3, 1)))
    pol.transport.close()


@pytest.fixture
def http_responder():
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            reply = json.dumps({"action": 2 if body["step_index"] < 10 else 6}).encode()
            self.send_response(200)
            self.send_header("Content-Length", str(len(reply)))
            self.end_headers()
            self.wfile.write(reply)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/act"
    server.shutdown()


def test_http_transport(http_responder):
    pol = bridge_policy(http_responder, "go to the tile (4,1)")
    assert isinstance(pol.transport, HTTPTransport)
    x = gw.empty_room(7, 3, agent_pos=(1, 1), agent_dir=1)
    rep = evaluate([(Goal("go_to_tile", tile=(4, 1)), x)], lambda g: pol, cap=20)
    assert rep.success_rate == 1.0 and rep.mean_episode_length == 3


def test_http_unreachable_is_transport_error():
    with pytest.raises(TransportError):
        HTTPTransport("http://127.0.0.1:9/none", timeout=2).request("{}")
