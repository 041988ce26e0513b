"""Stage orchestration: configuration, seeding, artifacts and manifests.

Every stage reads the artifacts of the stages before it from the work
directory, writes its own, and records a manifest chaining the digests of
its inputs and outputs.  Nothing time-dependent is written, so reruns with
the same configuration are byte-identical.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from . import gridworld as gw
from .abstraction import AbstractDataset, FeatureSelection, GoalAbstraction, project_dataset
from .collect import CollectionPolicyMix, TransitionDataset, collect, visited_goals
from .evaluation import (AbstractAgent, BotAgent, MetricsReport, NullAgent, build_suite, evaluate,
                         format_table, to_csv)
from .goals import Goal, GoalSizeError, enumerate_goals, read_goals, render, split_goals, write_goals
from .labeling import (GroundTruthLabeler, LLMLabeler, RewardProxy, label_dataset, label_subset,
                       select_labeling_subset)
from .llm import ChatClient
from .offline_rl import (EmpiricalTransitions, QTable, SolverConfig, TabularPolicy, gcbc,
                         greedy_policy, q_learning)
from .sft import build_sft_records, emit_jsonl, positives_of, write_manifest

logger = logging.getLogger(__name__)

STAGES = ("collect", "abstract", "label", "solve", "sft", "eval", "sweep", "report")
PIPELINE_STAGES = ("collect", "abstract", "label", "solve", "sft", "eval")


class ConfigError(ValueError):
    """Invalid configuration (exit code 3)."""


class DependencyError(RuntimeError):
    """An upstream artifact is missing (exit code 2)."""


# -- configuration ------------------------------------------------------------

DEFAULT_CONFIG = {
    "seed": 0,
    "env": {
        "train_specs": [{"rooms_x": 3, "rooms_y": 3, "room_size": 6}],
        "test_specs": [{"rooms_x": 3, "rooms_y": 3, "room_size": 6, "layout_seed": 10_000}],
    },
    "goals": {"path": None, "n_train": 500, "n_test": 100, "put_next": True,
              "require_visited": False},
    "collect": {"budget": 800_000, "mix": [["goal_oriented_bot", 1.0]], "step_cap": 500,
                "random_episode_len": None},
    "abstraction": {"oracle": "rule", "enabled": True, "room_restriction": True},
    "labeling": {"oracle": "ground_truth", "cap": 5000, "target_precision": 0.95,
                 "proxy": {"lr": 1e-5, "max_epochs": 3000, "batch_size": 256, "patience": None,
                           "pooling": "max", "hidden": 32, "channels": 32, "dropout": 0.1}},
    "solver": {"alpha": 0.1, "gamma": 0.7, "epsilon": 1e-6, "max_sweeps": 10_000},
    "baselines": {"filtered_bc_threshold": 0.6},
    "sft": {"max_len": 500, "variant": "canonical"},
    "eval": {"cap": 500, "n_starts": 10, "cells": ["train_env/train_goals"]},
    "sweep": {"fractions": [0.1, 0.3, 1.0], "seeds": None, "n_goals": None},
}

DESK_OVERRIDES = {
    "env": {
        "train_specs": [{"rooms_x": 2, "rooms_y": 2, "room_size": 4, "layout_seed": s}
                        for s in range(4)],
        "test_specs": [{"rooms_x": 2, "rooms_y": 2, "room_size": 4, "layout_seed": s}
                       for s in (100, 101)],
    },
    "goals": {"n_train": 20, "n_test": 10, "put_next": False, "require_visited": True},
    "collect": {"budget": 50_000, "mix": [["goal_oriented_bot", 0.7], ["uniform_random", 0.3]],
                "random_episode_len": 60},
    "labeling": {"proxy": {"lr": 3e-3, "max_epochs": 150, "patience": 15}},
    "eval": {"n_starts": 10, "cells": ["train_env/train_goals", "test_env/train_goals"]},
    "sweep": {"n_goals": 10},
}

PRESETS = {"full": {}, "desk": DESK_OVERRIDES}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source=None, overrides: dict | None = None) -> dict:
    """Resolve a preset name or YAML file on top of the defaults."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if source is not None:
        if str(source) in PRESETS:
            cfg = deep_merge(cfg, PRESETS[str(source)])
        else:
            path = Path(source)
            if not path.exists():
                raise ConfigError(f"config file {source} not found")
            try:
                data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {source}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a mapping")
            base = data.pop("preset", None)
            if base is not None:
                if base not in PRESETS:
                    raise ConfigError(f"unknown preset {base!r}")
                cfg = deep_merge(cfg, PRESETS[base])
            cfg = deep_merge(cfg, data)
    cfg = deep_merge(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        for key in ("train_specs", "test_specs"):
            specs = cfg["env"][key]
            if not specs:
                raise ConfigError(f"env.{key} is empty")
            for s in specs:
                gw.EnvSpec.from_dict(s)
        CollectionPolicyMix(tuple(map(tuple, cfg["collect"]["mix"])), cfg["collect"]["step_cap"],
                            cfg["collect"]["random_episode_len"])
        SolverConfig(**cfg["solver"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if int(cfg["collect"]["budget"]) <= 0:
        raise ConfigError("collect.budget must be positive")
    if cfg["abstraction"]["oracle"] not in ("rule", "llm"):
        raise ConfigError("abstraction.oracle must be 'rule' or 'llm'")
    if cfg["labeling"]["oracle"] not in ("ground_truth", "llm"):
        raise ConfigError("labeling.oracle must be 'ground_truth' or 'llm'")
    if not 0 < cfg["labeling"]["target_precision"] <= 1:
        raise ConfigError("labeling.target_precision must lie in (0, 1]")
    if int(cfg["labeling"]["cap"]) < 1:
        raise ConfigError("labeling.cap must be positive")
    if int(cfg["eval"]["cap"]) < 1 or int(cfg["sft"]["max_len"]) < 1:
        raise ConfigError("eval.cap and sft.max_len must be positive")
    if cfg["sft"]["variant"] not in ("canonical", "paraphrase"):
        raise ConfigError("sft.variant must be 'canonical' or 'paraphrase'")
    for f in cfg["sweep"]["fractions"]:
        if not 0 < f <= 1:
            raise ConfigError("sweep fractions must lie in (0, 1]")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def stage_seed(master: int, stage: str) -> int:
    """Seed for ``stage`` derived from the master seed alone."""
    h = hashlib.sha256(f"{int(master)}:{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# -- per-goal solving ---------------------------------------------------------

@dataclass
class GoalSolution:
    goal: Goal
    abstraction: GoalAbstraction
    dataset: AbstractDataset
    labeled: AbstractDataset | None = None
    proxy: RewardProxy | None = None
    subset_size: int = 0
    subset_positives: int = 0
    qtable: QTable | None = None
    policy: TabularPolicy | None = None
    gcbc: TabularPolicy | None = None


def make_abstraction(goal: Goal, selection: FeatureSelection, cfg: dict,
                     enabled: bool | None = None) -> GoalAbstraction:
    a = cfg["abstraction"]
    ab = GoalAbstraction(goal, a["oracle"], a["enabled"] if enabled is None else enabled,
                         a["room_restriction"])
    ab.selection_ = selection
    ab._cache = {}
    return ab


def proxy_params(cfg: dict, seed: int, shape) -> dict:
    p = dict(cfg["labeling"]["proxy"])
    p.update(grid_shape=tuple(shape), target_precision=cfg["labeling"]["target_precision"],
             random_state=seed)
    return p


# -- work directory -----------------------------------------------------------

class Pipeline:
    """Runs stages against a work directory.

    Intermediate results are cached in memory, so running several stages in
    one process projects and labels each goal only once.
    """

    def __init__(self, cfg: dict, workdir, workers: int = 1, llm_endpoint: str | None = None):
        self.cfg = cfg
        self.workdir = Path(workdir)
        self.workers = max(1, int(workers))
        self.llm_endpoint = llm_endpoint
        self.master = int(cfg["seed"])
        self.digest = config_digest(cfg)
        self._mem: dict = {}
        self._solutions: dict = {}
        if cfg["abstraction"]["oracle"] == "llm" or cfg["labeling"]["oracle"] == "llm":
            if not llm_endpoint:
                raise ConfigError("an LLM oracle is configured but no --llm-endpoint was given")
        torch.set_num_threads(1)

    # paths and manifests

    def stage_dir(self, stage: str) -> Path:
        d = self.workdir / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def manifest_path(self, stage: str) -> Path:
        return self.workdir / stage / "manifest.json"

    def require(self, stage: str) -> dict:
        path = self.manifest_path(stage)
        if not path.exists():
            raise DependencyError(f"missing {stage} artifacts; run `teduo {stage}` first")
        man = json.loads(path.read_text(encoding="utf-8"))
        if man.get("config_digest") != self.digest:
            raise DependencyError(f"{stage} artifacts were built with a different config; "
                                  f"rerun `teduo {stage}`")
        return man

    def write_manifest(self, stage: str, inputs: list, outputs: list, summary: dict) -> dict:
        man = {"stage": stage, "config_digest": self.digest, "seed": stage_seed(self.master, stage),
               "inputs": {str(Path(p).relative_to(self.workdir)): file_digest(p) for p in inputs},
               "outputs": {str(Path(p).relative_to(self.workdir)): file_digest(p)
                           for p in outputs},
               "summary": summary}
        write_json(self.manifest_path(stage), man)
        return man

    def _map(self, fn, items):
        items = list(items)
        if self.workers == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))

    def client(self) -> ChatClient | None:
        return ChatClient(self.llm_endpoint) if self.llm_endpoint else None

    # loaders

    @property
    def train_specs(self) -> list:
        return [gw.EnvSpec.from_dict(s) for s in self.cfg["env"]["train_specs"]]

    @property
    def test_specs(self) -> list:
        return [gw.EnvSpec.from_dict(s) for s in self.cfg["env"]["test_specs"]]

    def dataset(self) -> TransitionDataset:
        if "dataset" not in self._mem:
            self.require("collect")
            self._mem["dataset"] = TransitionDataset.load(self.workdir / "collect" / "dataset.jsonl")
        return self._mem["dataset"]

    def goals(self) -> tuple[list, list]:
        if "goals" not in self._mem:
            self.require("collect")
            d = self.workdir / "collect"
            self._mem["goals"] = (read_goals(d / "goals_train.jsonl"),
                                  read_goals(d / "goals_test.jsonl"))
        return self._mem["goals"]

    def selections(self) -> dict:
        if "selections" not in self._mem:
            self.require("abstract")
            data = json.loads((self.workdir / "abstract" / "selections.json").read_text())
            self._mem["selections"] = {Goal.from_id(k): FeatureSelection.from_dict(v)
                                       for k, v in data.items()}
        return self._mem["selections"]

    def grid_shape(self) -> tuple[int, int]:
        specs = self.train_specs + self.test_specs
        return max(s.width for s in specs), max(s.height for s in specs)

    # -- stages --

    def run_collect(self) -> dict:
        cfg = self.cfg
        seed = stage_seed(self.master, "collect")
        mix = CollectionPolicyMix(tuple(map(tuple, cfg["collect"]["mix"])),
                                  cfg["collect"]["step_cap"], cfg["collect"]["random_episode_len"])
        data = collect(self.train_specs, mix, int(cfg["collect"]["budget"]), seed)
        out = self.stage_dir("collect")
        data.save(out / "dataset.jsonl")
        gcfg = cfg["goals"]
        if gcfg["path"]:
            candidates = read_goals(gcfg["path"])
        else:
            pool = set()
            for spec in self.train_specs:
                pool.update(enumerate_goals(gw.generate_env(spec, 0), put_next=gcfg["put_next"]))
            candidates = sorted(pool, key=lambda g: g.id)
        n_candidates = len(candidates)
        if gcfg["require_visited"]:
            visited = visited_goals(data, candidates)
            train_pool = [g for g in candidates if g in visited]
        else:
            train_pool = candidates
        try:
            tr = split_goals(train_pool, seed, gcfg["n_train"], 0) if gcfg["n_train"] else None
            train = list(tr.train) if tr else []
            rest = [g for g in candidates if g not in set(train)]
            test = list(split_goals(rest, seed + 1, 0, gcfg["n_test"]).test) if gcfg["n_test"] else []
        except GoalSizeError as exc:
            raise ConfigError(f"goal split: {exc}") from exc
        train.sort(key=lambda g: g.id)
        test.sort(key=lambda g: g.id)
        write_goals(train, out / "goals_train.jsonl")
        write_goals(test, out / "goals_test.jsonl")
        self._mem["dataset"] = data
        self._mem["goals"] = (train, test)
        self._solutions.clear()
        outputs = [out / "dataset.jsonl", out / "goals_train.jsonl", out / "goals_test.jsonl"]
        return self.write_manifest("collect", [], outputs, {
            "transitions": len(data), "trajectories": len(data.trajectories),
            "dataset_digest": data.digest(), "candidate_goals": n_candidates,
            "train_goals": len(train), "test_goals": len(test),
            "bot_fallbacks": data.metadata.get("bot_fallbacks", 0)})

    def run_abstract(self) -> dict:
        data = self.dataset()
        train, _ = self.goals()
        example = data.trajectories[0].x0
        client = self.client() if self.cfg["abstraction"]["oracle"] == "llm" else None

        def fit(goal):
            ab = GoalAbstraction(goal, self.cfg["abstraction"]["oracle"],
                                 self.cfg["abstraction"]["enabled"],
                                 self.cfg["abstraction"]["room_restriction"], client)
            ab.fit([example])
            dg = project_dataset(data, goal, abstraction=ab)
            return goal, ab, dg

        results = self._map(fit, train)
        selections, stats = {}, {}
        for goal, ab, dg in results:
            selections[goal.id] = ab.selection_.to_dict()
            stats[goal.id] = dg.stats
            self._solutions[goal] = GoalSolution(goal, ab, dg)
        out = self.stage_dir("abstract")
        write_json(out / "selections.json", selections)
        write_json(out / "stats.json", stats)
        self._mem["selections"] = {g: FeatureSelection.from_dict(v)
                                   for g, v in ((Goal.from_id(k), v) for k, v in selections.items())}
        totals = {k: int(sum(s[k] for s in stats.values())) for k in
                  ("unique_raw", "unique_abstract", "unique_phi")}
        up = self.workdir / "collect"
        return self.write_manifest("abstract", [up / "dataset.jsonl", up / "goals_train.jsonl"],
                                   [out / "selections.json", out / "stats.json"],
                                   {"goals": len(stats), "totals": totals})

    def solution(self, goal: Goal) -> GoalSolution:
        sol = self._solutions.get(goal)
        if sol is None:
            ab = make_abstraction(goal, self.selections()[goal], self.cfg)
            dg = project_dataset(self.dataset(), goal, abstraction=ab)
            sol = self._solutions[goal] = GoalSolution(goal, ab, dg)
        return sol

    def _labeler(self, goal: Goal):
        if self.cfg["labeling"]["oracle"] == "llm":
            w, h = self.grid_shape()
            return LLMLabeler(self.client(), goal, w, h)
        return GroundTruthLabeler(goal)

    def _label_goal(self, indexed) -> tuple:
        i, goal = indexed
        sol = self.solution(goal)
        seed = stage_seed(self.master, "label") + i
        subset = select_labeling_subset(sol.dataset, int(self.cfg["labeling"]["cap"]), seed)
        labeled = label_subset(subset, goal, self._labeler(goal))
        states, y = labeled.usable()
        proxy = RewardProxy(**proxy_params(self.cfg, seed, self.grid_shape()))
        proxy.fit(states, y)
        sol.proxy = proxy
        sol.subset_size = len(subset)
        sol.subset_positives = int(sum(v == 1 for v in labeled.labels))
        sol.labeled = label_dataset(sol.dataset, proxy, GroundTruthLabeler(goal))
        return goal, {"subset": len(subset), "positives": sol.subset_positives,
                      "na": int(sum(v is None for v in labeled.labels)),
                      "degenerate": proxy.degenerate_, "calibrated": proxy.calibrated_,
                      "threshold": proxy.threshold_, "best_val_loss": proxy.best_val_loss_,
                      "labeled_positive_transitions": int(sol.labeled.rewards.sum())}

    def run_label(self) -> dict:
        train, _ = self.goals()
        self.selections()
        out = self.stage_dir("label")
        (out / "proxies").mkdir(exist_ok=True)
        results = self._map(self._label_goal, enumerate(train))
        outputs, summary = [], {}
        for i, (goal, info) in enumerate(results):
            path = out / "proxies" / f"{i:04d}.bin"
            self._solutions[goal].proxy.save(path, {"goal_id": goal.id})
            outputs += [path, Path(str(path) + ".json")]
            summary[goal.id] = info
        write_json(out / "labels.json", summary)
        outputs.append(out / "labels.json")
        flagged = sorted(g for g, v in summary.items() if v["degenerate"] or not v["calibrated"])
        return self.write_manifest("label", [self.workdir / "abstract" / "selections.json"],
                                   outputs, {"goals": len(summary), "flagged": flagged})

    def proxy_for(self, i: int, goal: Goal) -> RewardProxy:
        sol = self.solution(goal)
        if sol.proxy is None:
            self.require("label")
            sol.proxy = RewardProxy.load(self.workdir / "label" / "proxies" / f"{i:04d}.bin")
            sol.labeled = label_dataset(sol.dataset, sol.proxy, GroundTruthLabeler(goal))
        return sol.proxy

    def _solve_goal(self, indexed):
        i, goal = indexed
        self.proxy_for(i, goal)
        sol = self.solution(goal)
        sol.qtable = q_learning(sol.labeled, SolverConfig(**self.cfg["solver"]))
        sol.policy = greedy_policy(sol.qtable, sol.dataset.index)
        sol.gcbc = gcbc(sol.dataset)
        return goal

    def run_solve(self) -> dict:
        self.require("label")
        train, _ = self.goals()
        self._map(self._solve_goal, enumerate(train))
        out = self.stage_dir("solve")
        (out / "qtables").mkdir(exist_ok=True)
        outputs, summary = [], {}
        for i, goal in enumerate(train):
            sol = self._solutions[goal]
            path = out / "qtables" / f"{i:04d}.bin"
            sol.qtable.save(path)
            outputs += [path, Path(str(path) + ".json")]
            summary[goal.id] = {"converged": sol.qtable.converged, "sweeps": sol.qtable.sweeps,
                                "coverage": len(sol.policy), "gcbc_coverage": len(sol.gcbc)}
        inputs = sorted((self.workdir / "label" / "proxies").glob("*.bin"))
        return self.write_manifest("solve", inputs, outputs, {
            "goals": len(summary), "non_converged": sorted(g for g, v in summary.items()
                                                           if not v["converged"])})

    def qtable_for(self, i: int, goal: Goal) -> GoalSolution:
        sol = self.solution(goal)
        if sol.qtable is None:
            self.require("solve")
            self.proxy_for(i, goal)
            sol.qtable = QTable.load(self.workdir / "solve" / "qtables" / f"{i:04d}.bin")
            if sol.qtable.n_states != len(sol.dataset.states):
                raise DependencyError("solve artifacts do not match the dataset; rerun `teduo solve`")
            sol.policy = greedy_policy(sol.qtable, sol.dataset.index)
            sol.gcbc = gcbc(sol.dataset)
        return sol

    def run_sft(self) -> dict:
        self.require("solve")
        train, _ = self.goals()
        records, per_goal, excluded = [], {}, {}
        for i, goal in enumerate(train):
            sol = self.qtable_for(i, goal)
            if not sol.proxy.usable:
                reason = "degenerate" if sol.proxy.degenerate_ else "uncalibrated"
                excluded[goal.id] = reason
                logger.info("goal %s excluded from SFT (%s proxy)", goal.id, reason)
                continue
            build = build_sft_records(sol.policy, EmpiricalTransitions(sol.dataset),
                                      positives_of(sol.proxy, sol.dataset), sol.dataset,
                                      max_len=int(self.cfg["sft"]["max_len"]))
            per_goal[goal.id] = build.summary()
            records.extend(build.records)
        out = self.stage_dir("sft")
        n = emit_jsonl(records, None, out / "sft.jsonl", self.cfg["sft"]["variant"],
                       stage_seed(self.master, "sft"))
        write_manifest(out / "records.json", per_goal, excluded, self.digest)
        self._mem["sft_records"] = records
        inputs = sorted((self.workdir / "solve" / "qtables").glob("*.bin"))
        return self.write_manifest("sft", inputs, [out / "sft.jsonl", out / "records.json"], {
            "records": n, "excluded_goals": excluded,
            "discards": {k: sum(v["discards"][k] for v in per_goal.values())
                         for k in ("coverage", "loop", "max_len")}})

    def suites(self, train: list, test: list) -> dict:
        seed = stage_seed(self.master, "eval")
        n = int(self.cfg["eval"]["n_starts"])
        goal_sets = {"train_goals": train, "test_goals": test}
        env_sets = {"train_env": self.train_specs, "test_env": self.test_specs}
        suites = {}
        for k, cell in enumerate(self.cfg["eval"]["cells"]):
            env, goals = cell.split("/")
            if env not in env_sets or goals not in goal_sets:
                raise ConfigError(f"unknown eval cell {cell!r}")
            suites[cell] = build_suite(goal_sets[goals], env_sets[env], n, seed + k)
        return suites

    def run_eval(self) -> dict:
        self.require("solve")
        train, test = self.goals()
        sols = {g: self.qtable_for(i, g) for i, g in enumerate(train)}
        cap = int(self.cfg["eval"]["cap"])
        agents = {
            "teduo_gcrl": lambda g: AbstractAgent(sols[g].abstraction, sols[g].policy)
            if g in sols else NullAgent(),
            "gcbc": lambda g: AbstractAgent(sols[g].abstraction, sols[g].gcbc)
            if g in sols else NullAgent(),
            "oracle_bot": BotAgent,
        }
        results, lines = {}, []
        for cell, suite in self.suites(train, test).items():
            results[cell] = {}
            for name, factory in agents.items():
                rep = evaluate(suite, factory, cap)
                results[cell][name] = rep
                for o in rep.outcomes:
                    lines.append(json.dumps({"cell": cell, "agent": name, "success": o.success,
                                             "steps": o.steps, "invalid": o.invalid_count,
                                             "total_actions": o.total_actions,
                                             "goal_id": o.goal_id, "start_text": o.start_text,
                                             "actions": list(o.actions)}, sort_keys=True))
        out = self.stage_dir("eval")
        metrics = {c: {a: r.summary() for a, r in rows.items()} for c, rows in results.items()}
        write_json(out / "metrics.json", metrics)
        (out / "outcomes.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (out / "table.txt").write_text("".join(f"[{c}]\n" + format_table(rows) + "\n"
                                               for c, rows in results.items()), encoding="utf-8")
        (out / "metrics.csv").write_text("".join(to_csv({f"{c}:{a}": r for a, r in rows.items()})
                                                 for c, rows in results.items()), encoding="utf-8")
        self._mem["eval"] = results
        inputs = sorted((self.workdir / "solve" / "qtables").glob("*.bin"))
        outputs = [out / n for n in ("metrics.json", "outcomes.jsonl", "table.txt", "metrics.csv")]
        return self.write_manifest("eval", inputs, outputs, {
            c: {a: r.success_rate for a, r in rows.items()} for c, rows in results.items()})

    def run_sweep(self) -> dict:
        """Label, solve and evaluate on dataset prefixes, with and without abstraction."""
        self.require("collect")
        cfg = self.cfg
        seeds = cfg["sweep"]["seeds"] or [self.master]
        rows = []
        for seed in seeds:
            if seed == self.master:
                data, (train, _) = self.dataset(), self.goals()
            else:
                sub = Pipeline(deep_merge(cfg, {"seed": seed}), self.workdir / "sweep" / f"seed{seed}")
                sub.run_collect()
                data, (train, _) = sub.dataset(), sub.goals()
            n_goals = cfg["sweep"]["n_goals"]
            goals = train[:n_goals] if n_goals else train
            suite = build_suite(goals, self.train_specs, int(cfg["eval"]["n_starts"]),
                                stage_seed(seed, "sweep"))
            example = data.trajectories[0].x0
            for frac in cfg["sweep"]["fractions"]:
                part = data.prefix(frac)
                reps = sweep_cell(part, goals, suite, example, cfg, seed, self.grid_shape())
                for enabled in (True, False):
                    rows.append({"seed": seed, "fraction": frac, "abstraction": enabled,
                                 "transitions": len(part), **reps[enabled].summary()})
        out = self.stage_dir("sweep")
        write_json(out / "sweep.json", rows)
        return self.write_manifest("sweep", [self.workdir / "collect" / "dataset.jsonl"],
                                   [out / "sweep.json"], {"rows": len(rows)})

    def run_report(self) -> dict:
        manifests = {s: self.require(s) for s in PIPELINE_STAGES}
        metrics = json.loads((self.workdir / "eval" / "metrics.json").read_text())
        report = {"config_digest": self.digest,
                  "manifests": {s: hashlib.sha256(canonical_json(m).encode()).hexdigest()
                                for s, m in manifests.items()},
                  "summaries": {s: m["summary"] for s, m in manifests.items()},
                  "metrics": metrics}
        sweep_path = self.workdir / "sweep" / "sweep.json"
        if sweep_path.exists() and self.manifest_path("sweep").exists():
            report["sweep"] = json.loads(sweep_path.read_text())
        out = self.stage_dir("report")
        write_json(out / "report.json", report)
        digest = file_digest(out / "report.json")
        (out / "digest.txt").write_text(digest + "\n", encoding="utf-8")
        (out / "report.txt").write_text(render_report(report), encoding="utf-8")
        return {"digest": digest}

    def run(self, stage: str) -> dict:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return getattr(self, f"run_{stage}")()

    def run_all(self, with_sweep: bool = False) -> dict:
        for s in PIPELINE_STAGES:
            self.run(s)
        if with_sweep:
            self.run_sweep()
        return self.run_report()


def sweep_cell(data: TransitionDataset, goals: list, suite: list, example, cfg: dict,
               seed: int, shape) -> dict:
    """Success of greedy tabular policies trained on ``data``, keyed by abstraction on/off.

    The reward proxy reads ``phi`` only, which both variants share, so one
    proxy per goal labels both projections.
    """
    agents = {True: {}, False: {}}
    for i, goal in enumerate(goals):
        projected = {}
        for enabled in (True, False):
            ab = GoalAbstraction(goal, "rule", enabled, cfg["abstraction"]["room_restriction"])
            ab.fit([example])
            projected[enabled] = ab, project_dataset(data, goal, abstraction=ab)
        pseed = stage_seed(seed, "label") + i
        subset = select_labeling_subset(projected[True][1], int(cfg["labeling"]["cap"]), pseed)
        states, y = label_subset(subset, goal).usable()
        proxy = RewardProxy(**proxy_params(cfg, pseed, shape)).fit(states, y)
        for enabled, (ab, dg) in projected.items():
            ldg = label_dataset(dg, proxy, GroundTruthLabeler(goal))
            q = q_learning(ldg, SolverConfig(**cfg["solver"]))
            agents[enabled][goal] = AbstractAgent(ab, greedy_policy(q, dg.index))
    cap = int(cfg["eval"]["cap"])
    return {enabled: evaluate(suite, lambda g, e=enabled: agents[e][g], cap)
            for enabled in (True, False)}


def render_report(report: dict) -> str:
    lines = [f"config digest: {report['config_digest']}", ""]
    for cell, rows in report["metrics"].items():
        lines.append(f"[{cell}]")
        lines.append(f"{'Method':<16} {'Success (%)':>12} {'Length':>9} {'Invalid (%)':>12} {'n':>5}")
        for name, r in rows.items():
            lines.append(f"{name:<16} {100 * r['success_rate']:12.1f} "
                         f"{r['mean_episode_length']:9.1f} {100 * r['invalid_ratio']:12.1f} "
                         f"{r['n']:5d}")
        lines.append("")
    if "sweep" in report:
        lines.append("[sweep]")
        lines.append(f"{'seed':>10} {'fraction':>8} {'abstraction':>11} {'Success (%)':>12}")
        for r in report["sweep"]:
            lines.append(f"{r['seed']:>10} {r['fraction']:8.2f} {str(r['abstraction']):>11} "
                         f"{100 * r['success_rate']:12.1f}")
    return "\n".join(lines) + "\n"
