"""Optional chat-completion client and the two prompt templates it serves.

Nothing in the pipeline requires network access; these are used only when
an endpoint is configured.
"""
from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass

TOKEN_ENV = "TEDUO_LLM_TOKEN"


class TransportError(RuntimeError):
    pass


class CompletionParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass
class ChatClient:
    """POSTs ``{"messages": [...], "temperature": 0, "top_k": 1, ...}`` to ``url``
    and returns the text of the first choice."""

    url: str
    model: str = "default"
    temperature: float = 0.0
    top_k: int = 1
    max_tokens: int = 8000
    timeout: float = 60.0

    def complete(self, system: str, user: str) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "system", "content": system},
                         {"role": "user", "content": user}],
            "temperature": self.temperature,
            "top_k": self.top_k,
            "max_tokens": self.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.url, data=json.dumps(body).encode(), headers=headers,
                                     method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(str(exc)) from exc
        try:
            choice = payload["choices"][0]
            return choice["message"]["content"] if "message" in choice else choice["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise CompletionParseError("unexpected response body", json.dumps(payload)) from exc


ABSTRACTION_SYSTEM = ("You are helping a Reinforcement learning agent in the minigrid environment. "
                      "Always answer as helpfully as possible, while being truthful.")

ABSTRACTION_USER = """Given a grid, its features and a goal, can you simplify the features of the grid by detecting all the objects related to the goal and if necessary goal location. if necessary, make sure to flag all the relevant object and not just one.

I'm giving you two examples on the same grid:

Grid : "It is a 22 by 22 tiles grid. The features of the environment are:
0. The following tiles are wall: (1,7) (1,14) (2,7) (2,14) (3,7) (3,14) (4,7) (5,7) (5,14) (6,14) (7,1) (7,2) (7,3) (7,4) (7,5) (7,6) (7,7) (7,8) (7,9) (7,10) (7,11) (7,13) (7,14) (7,15) (7,16) (7,17) (7,18) (7,19) (7,20) (8,7) (8,14) (9,14) (10,7) (10,14) (11,7) (11,14) (12,7) (13,7) (13,14) (14,1) (14,2) (14,3) (14,4) (14,5) (14,6) (14,7) (14,9) (14,10) (14,11) (14,12) (14,13) (14,14) (14,16) (14,17) (14,18) (14,19) (14,20) (15,7) (15,14) (16,7) (16,14) (17,7) (17,14) (18,7) (18,14) (19,14) (20,7) (20,14)
1. A open purple box is on tile (1,20)
2. A open green box is on tile (5,8)
3. A open yellow box is on tile (6,5)
4. A open blue box is on tile (8,13)
5. A open purple box is on tile (15,3)
6. A open grey box is on tile (18,10)
7. A open red box is on tile (20,19)
8. A closed yellow door is on tile (4,14)
9. A closed purple door is on tile (6,7)
10. A locked grey door is on tile (7,12)
11. A closed red door is on tile (9,7)
12. A closed yellow door is on tile (12,14)
13. A closed grey door is on tile (14,8)
14. A closed grey door is on tile (14,15)
15. A closed red door is on tile (19,7)
16. A blue key is on tile (3,5)
17. A grey key is on tile (8,10)
18. A blue key is on tile (11,4)
19. A purple ball is on tile (1,16)
20. A green ball is on tile (2,20)
21. A blue ball is on tile (3,19)
22. A red ball is on tile (9,12)
23. A grey ball is on tile (9,13)
24. A yellow ball is on tile (13,1)
25. A grey ball is on tile (13,6)
26. A yellow ball is on tile (17,6)
27. Inventory : []

Exemple 1 :
The goal is "Pick up a blue key".

Following the indications, the correct output is these simplified features :

{{"goal object" : (3,5) (11,4)}}

Example 2 :
The goal is "Put a green box next to a grey ball".

Following the indications, the correct output is these simplified features :

{{"goal object" : (18,10),
"goal location" : (9,13) (13,6),}}

Now, my goal is "{goal}" and I am in the following grid :
"It is a {width} by {height} tiles grid. The features of the environment are:
{state}

Let's think step by step. First, tell me about your knowledge of the Minigrid/BabyAI reinforcement learning environment. Then, provide an analysis of the environment and the goal. Finally, write simplified features in the same format as the example."""

REWARD_SYSTEM = ("You are a helpful and honest judge of good progress in the Minigrid/BabyAI "
                 "reinforcement learning environment with respect to a specific GOAL. Always "
                 "answer as helpfully as possible, while being truthful, simple and concise. If "
                 "you don't know the answer to a question, don't share false information.")

REWARD_USER = """I will present you a GOAL to be achieved and the descriptions of a STATE of the environment. Examples of goal are "opening a door", "go to a specific location", "putting an object next to another other" or "picking up an object".
First, tell me about your knowledge of the Minigrid/BabyAI reinforcement learning environment related to the goal.
Then, write an analysis describing the semantics of the state strictly using information from the description and your knowledge of Minigrid/BabyAI.
Finally, respond by explicitly declaring if the state indicates that the GOAL has been achieved at any point in the past, writing either ("goal achieved": True), or ("goal achieved": False). If you have a doubt, you could also say ("goal achieved": NA).

The environment is a {width} by {height} tiles grid. An object that has been picked up is placed in the agent inventory.

The agent or an object is considered at an object location if it is on an adjacent tile to the object (for example, (4,2) and (5,3) are not adjacent as their Manhattan distance |4-5| + |2-3| = 2 is strictly superior to 1) or it is in the inventory. If the goal explicitly mentions the agent going to an object or putting an object near another object, compute the Manhattan distance, show the details of the computation, explicitly compare the result to 1 and then verify your reasoning does not have any mistakes and base your decision only on the Manhattan distance. Don't say they are adjacent if their Manhattan distance is higher than 1. Don't forget to check the inventory. If the coordinates of the destination are mentioned, the agent must go to this exact tile.

For other types of goals, do not compute them and ignore the previous paragraph.

{{"STATE": {state}}}

{{"GOAL": {goal}}}"""


_BLOCK_RE = re.compile(r"\{[^{}]*\}", re.S)
_KEY_RE = re.compile(r"""["']goal (object|location)["']\s*:\s*((?:\(\s*\d+\s*,\s*\d+\s*\)[\s,]*)*)""")
_TILE_RE = re.compile(r"\(\s*(\d+)\s*,\s*(\d+)\s*\)")


def parse_selection(text: str) -> dict:
    """Tiles from the last ``{"goal object": ..., "goal location": ...}`` block."""
    blocks = [b for b in _BLOCK_RE.findall(text) if "goal" in b]
    if not blocks:
        raise CompletionParseError("no feature block in completion", text)
    out = {"object": set(), "location": set()}
    for key, tiles in _KEY_RE.findall(blocks[-1]):
        out[key] |= {(int(a), int(b)) for a, b in _TILE_RE.findall(tiles)}
    if not out["object"] and not out["location"]:
        raise CompletionParseError("feature block names no tiles", text)
    return out


_VERDICT_RE = re.compile(r"""["']?goal achieved["']?\s*:\s*(True|False|NA)""", re.I)


def parse_verdict(text: str):
    """1, 0 or ``None`` (NA) from the last "goal achieved" declaration."""
    found = _VERDICT_RE.findall(text)
    if not found:
        raise CompletionParseError("no verdict in completion", text)
    v = found[-1].lower()
    return {"true": 1, "false": 0, "na": None}[v]
