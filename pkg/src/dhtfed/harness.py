"""Experiment orchestration: synthetic topics, scenarios, metrics, reports.

Topics are Gaussian class pairs in a shared 2-D informative subspace with
their class directions spread at equal angles, so one linear head can fit
any single topic cleanly but no single head fits all topics at once. That
preserves the single-vs-mixed-topic contrast the experiments measure
without any text pipeline.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fedagg import (CENTRALIZED, DECENTRALIZED, FederatedSession, ModeSelector,
                     RoundConfig, RoundMetrics, SocialGraph)
from .model import LocalDataset, serialize_params
from .overlay import Overlay, random_ids
from .simnet import LinkModel, Simulator
from .tree import TreeConfig, TreeManager

SINGLE_TOPIC_PER_TREE = "single"
MIXED = "mixed"

_TEST_STREAM = 1 << 130  # keeps test-set draws disjoint from per-node streams


@dataclass
class TopicSpec:
    topic_id: int
    mean0: np.ndarray
    mean1: np.ndarray
    cov_scale: float
    samples_per_node: int

    def __post_init__(self) -> None:
        if np.array_equal(self.mean0, self.mean1):
            raise ValueError("class means must be distinct")
        if self.cov_scale < 0:
            raise ValueError("cov_scale must be >= 0")


def make_topics(n_topics: int, hidden_dim: int, seed: int,
                separation: float = 4.0, cov_scale: float = 1.0,
                samples_per_node: int = 200) -> list[TopicSpec]:
    """Topic class-mean pairs at equal angles in a seeded 2-D subspace."""
    if hidden_dim < 2:
        raise ValueError("hidden_dim must be >= 2 for the topic geometry")
    rng = np.random.default_rng([seed, 0x701C5])
    u = rng.normal(size=hidden_dim)
    u /= np.linalg.norm(u)
    v = rng.normal(size=hidden_dim)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    topics = []
    for t in range(n_topics):
        angle = 2.0 * math.pi * t / max(n_topics, 1)
        direction = math.cos(angle) * u + math.sin(angle) * v
        half = 0.5 * separation * direction
        topics.append(TopicSpec(t, -half, half, cov_scale, samples_per_node))
    return topics


def generate_topic_data(spec: TopicSpec, node_ids: list[int],
                        seed: int) -> dict[int, LocalDataset]:
    """Per-node datasets, deterministic per (seed, node id, topic)."""
    out = {}
    for nid in sorted(node_ids):
        rng = np.random.default_rng([seed, spec.topic_id, nid])
        n = spec.samples_per_node
        y = rng.integers(0, 2, size=n)
        means = np.where(y[:, None] == 1, spec.mean1, spec.mean0)
        x = means + spec.cov_scale * rng.normal(size=(n, spec.mean0.size))
        out[nid] = LocalDataset(x, y, spec.topic_id)
    return out


def generate_testset(spec: TopicSpec, n: int, seed: int) -> LocalDataset:
    rng = np.random.default_rng([seed, spec.topic_id, _TEST_STREAM])
    y = rng.integers(0, 2, size=n)
    means = np.where(y[:, None] == 1, spec.mean1, spec.mean0)
    x = means + spec.cov_scale * rng.normal(size=(n, spec.mean0.size))
    return LocalDataset(x, y, spec.topic_id)


def mixed_node_data(topics: list[TopicSpec], node_ids: list[int], seed: int,
                    points_per_node: int) -> dict[int, LocalDataset]:
    """Each node holds an even split of every topic's data."""
    shares = [points_per_node // len(topics)] * len(topics)
    for i in range(points_per_node - sum(shares)):
        shares[i] += 1
    out = {}
    for nid in sorted(node_ids):
        xs, ys = [], []
        for spec, share in zip(topics, shares):
            rng = np.random.default_rng([seed, spec.topic_id, nid])
            y = rng.integers(0, 2, size=share)
            means = np.where(y[:, None] == 1, spec.mean1, spec.mean0)
            xs.append(means + spec.cov_scale * rng.normal(size=(share, spec.mean0.size)))
            ys.append(y)
        out[nid] = LocalDataset(np.concatenate(xs), np.concatenate(ys), -1)
    return out


# -- metrics -------------------------------------------------------------------

def compute_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be equal-length, non-empty")
    return float(np.mean(predictions == labels))


def compute_f1(predictions, labels, positive_label: int = 1) -> float:
    """Binary F1 for the positive class; 0 when precision + recall = 0."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be equal-length, non-empty")
    tp = int(np.sum((predictions == positive_label) & (labels == positive_label)))
    fp = int(np.sum((predictions == positive_label) & (labels != positive_label)))
    fn = int(np.sum((predictions != positive_label) & (labels == positive_label)))
    if tp == 0 and (fp > 0 or fn > 0):
        return 0.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class MetricsRecord:
    scenario: str
    round: int
    topic: int
    accuracy: float
    f1: float
    dissemination: float
    max_ingress_bytes: int
    mode: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


# -- scenario configuration ------------------------------------------------------

_CONFIG_SECTIONS = {
    "scenario": ["name", "nodes", "fanout", "tree_count", "assignment", "rounds", "seed"],
    "data": ["topics", "points_per_node", "test_points", "separation", "cov_scale"],
    "model": ["hidden_dim", "lam", "eta", "eta_local", "steps", "batch",
              "upload", "agg_mode", "penalty"],
    "link": ["lat_lo", "lat_hi", "bandwidth"],
    "tree": ["heartbeat_period", "failure_timeout", "intercept"],
    "fed": ["mode", "gossip_k", "bytes_threshold", "latency_threshold"],
    "failures": ["events"],
}


@dataclass
class ScenarioConfig:
    seed: int
    name: str = "scenario"
    nodes: int = 60
    fanout: int = 16
    tree_count: int = 3
    assignment: str = SINGLE_TOPIC_PER_TREE
    rounds: int = 20
    topics: int = 3
    points_per_node: int = 200
    test_points: int = 400
    separation: float = 4.0
    cov_scale: float = 1.0
    hidden_dim: int = 32
    lam: float = 0.5
    eta: float = 1.0
    eta_local: float = 0.1
    steps: int = 10
    batch: int = 32
    upload: str = "delta"
    agg_mode: str = "weighted"
    penalty: str = "squared"
    lat_lo: float = 10.0
    lat_hi: float = 50.0
    bandwidth: float = 1048.576
    heartbeat_period: float = 1000.0
    failure_timeout: float = 3000.0
    intercept: bool = True
    mode: str = CENTRALIZED  # centralized | decentralized | auto
    gossip_k: int = 3
    bytes_threshold: int = 1 << 20
    latency_threshold: float = 2000.0
    failures: list[tuple[float, int, str]] = field(default_factory=list)

    def validate(self) -> None:
        if self.nodes < 1 or self.rounds < 1 or self.fanout < 1:
            raise ValueError("nodes, rounds and fanout must be positive")
        if self.topics < 1 or self.points_per_node < 1 or self.test_points < 1:
            raise ValueError("topics, points_per_node and test_points must be positive")
        if self.assignment not in (SINGLE_TOPIC_PER_TREE, MIXED):
            raise ValueError("assignment must be 'single' or 'mixed'")
        if self.assignment == SINGLE_TOPIC_PER_TREE and self.tree_count != self.topics:
            raise ValueError("single-topic assignment needs tree_count == topics")
        if self.assignment == MIXED and self.tree_count != 1:
            raise ValueError("mixed assignment uses exactly one tree")
        if self.nodes < self.tree_count:
            raise ValueError("need at least one node per tree")
        if self.mode not in (CENTRALIZED, DECENTRALIZED, "auto"):
            raise ValueError("mode must be centralized, decentralized or auto")
        if self.hidden_dim < 2:
            raise ValueError("hidden_dim must be >= 2")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")

    @classmethod
    def from_ini(cls, path: str) -> "ScenarioConfig":
        """Parse the key/value config format; unknown sections or keys fail."""
        parser = configparser.ConfigParser()
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
        kwargs = {}
        for section in parser.sections():
            if section not in _CONFIG_SECTIONS:
                raise ValueError(f"unknown config section [{section}]")
            for key in parser[section]:
                if key not in _CONFIG_SECTIONS[section]:
                    raise ValueError(f"unknown config key {key!r} in [{section}]")
                if section == "failures":
                    kwargs["failures"] = _parse_failures(parser[section][key])
                else:
                    kwargs[key] = _coerce(key, parser[section][key])
        if "seed" not in kwargs:
            raise ValueError("config must set scenario.seed")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


_INT_KEYS = {"nodes", "fanout", "tree_count", "rounds", "seed", "topics",
             "points_per_node", "test_points", "hidden_dim", "steps", "batch",
             "gossip_k", "bytes_threshold"}
_FLOAT_KEYS = {"separation", "cov_scale", "lam", "eta", "eta_local", "lat_lo",
               "lat_hi", "bandwidth", "heartbeat_period", "failure_timeout",
               "latency_threshold"}
_BOOL_KEYS = {"intercept"}


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"bad boolean {raw!r} for {key}")
    return raw


def _parse_failures(raw: str) -> list[tuple[float, int, str]]:
    events = []
    for line in raw.strip().splitlines():
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"failure event needs 'time node_index action': {line!r}")
        t, idx, action = float(parts[0]), int(parts[1]), parts[2]
        if action not in ("fail", "rejoin"):
            raise ValueError(f"unknown failure action {action!r}")
        events.append((t, idx, action))
    if events != sorted(events, key=lambda e: e[0]):
        raise ValueError("failure events must be time-ordered")
    return events


# -- scenario execution ------------------------------------------------------------

@dataclass
class ScenarioResult:
    config: ScenarioConfig
    records: list[MetricsRecord]
    round_metrics: list[RoundMetrics]
    final_weights: dict[str, bytes]
    tree_stats: dict[str, object]

    def records_blob(self) -> bytes:
        return ("\n".join(r.to_json() for r in self.records) + "\n").encode()


def run_scenario(cfg: ScenarioConfig, quiet: bool = True) -> ScenarioResult:
    """Build the overlay and trees, distribute data, run T federated rounds
    interleaved with ensemble inference on held-out per-topic test sets."""
    cfg.validate()
    ids = random_ids(cfg.nodes, cfg.seed)
    overlay = Overlay.build(ids)
    sim = Simulator(seed=cfg.seed,
                    link=LinkModel(cfg.lat_lo, cfg.lat_hi, cfg.bandwidth),
                    alive=overlay.is_alive)
    trees = TreeManager(overlay, sim, TreeConfig(
        fanout_cap=cfg.fanout, heartbeat_period=cfg.heartbeat_period,
        failure_timeout=cfg.failure_timeout, intercept_joins=cfg.intercept))

    topics = make_topics(cfg.topics, cfg.hidden_dim, cfg.seed,
                         cfg.separation, cfg.cov_scale, cfg.points_per_node)
    testsets = {t.topic_id: generate_testset(t, cfg.test_points, cfg.seed)
                for t in topics}

    partitions = [sorted(ids)[k::cfg.tree_count] for k in range(cfg.tree_count)]
    sessions: list[FederatedSession] = []
    tree_names: list[str] = []
    for k in range(cfg.tree_count):
        name = f"{cfg.name}-tree-{k}"
        gid, root = trees.create_group(name)
        for nid in partitions[k]:
            if nid not in trees.groups[gid].members:
                trees.join_group(nid, gid)
        if cfg.assignment == SINGLE_TOPIC_PER_TREE:
            data = generate_topic_data(topics[k], partitions[k], cfg.seed)
        else:
            data = mixed_node_data(topics, partitions[k], cfg.seed,
                                   cfg.points_per_node)
        sessions.append(FederatedSession(
            trees, gid, data, cfg.hidden_dim,
            RoundConfig(eta=cfg.eta, steps=cfg.steps, batch=cfg.batch,
                        upload=cfg.upload, agg_mode=cfg.agg_mode,
                        penalty=cfg.penalty, gossip_k=cfg.gossip_k,
                        seed=cfg.seed),
            lam=cfg.lam, eta_local=cfg.eta_local))
        tree_names.append(name)

    socials: dict[int, SocialGraph] = {}
    selectors = [ModeSelector(cfg.bytes_threshold, cfg.latency_threshold)
                 for _ in sessions]
    failures = list(cfg.failures)
    sorted_ids = sorted(ids)

    records: list[MetricsRecord] = []
    all_round_metrics: list[RoundMetrics] = []
    for rnd in range(cfg.rounds):
        _apply_due_failures(failures, sim, overlay, trees, sorted_ids, cfg)
        for k, session in enumerate(sessions):
            mode = cfg.mode if cfg.mode != "auto" else selectors[k].mode
            if mode == DECENTRALIZED:
                if k not in socials:
                    leaves = session.contributing_leaves()
                    socials[k] = SocialGraph.ring_with_chords(
                        leaves, chords=len(leaves) // 2, seed=cfg.seed * 1000 + k)
                metrics = session.decentralized_round(socials[k])
            else:
                metrics = session.centralized_round()
            if cfg.mode == "auto":
                selectors[k].update(metrics.max_ingress_bytes, metrics.root_latency)
            all_round_metrics.append(metrics)

            topic_ids = ([topics[k].topic_id]
                         if cfg.assignment == SINGLE_TOPIC_PER_TREE
                         else sorted(testsets))
            for tid in topic_ids:
                test = testsets[tid]
                labels, _counts = session.ensemble_infer(test.x)
                records.append(MetricsRecord(
                    scenario=cfg.name, round=rnd, topic=tid,
                    accuracy=compute_accuracy(labels, test.y),
                    f1=compute_f1(labels, test.y),
                    dissemination=metrics.dissemination,
                    max_ingress_bytes=metrics.max_ingress_bytes,
                    mode=metrics.mode))
            if not quiet:
                last = [r for r in records if r.round == rnd]
                acc = sum(r.accuracy for r in last) / len(last)
                print(f"round {rnd:3d} tree {k} mode={metrics.mode} "
                      f"acc={acc:.4f} lat={metrics.root_latency:.0f}ms")

    final_weights = {name: serialize_params(s.global_params)
                     for name, s in zip(tree_names, sessions)}
    stats = {name: trees.tree_stats(s.gid)
             for name, s in zip(tree_names, sessions)}
    return ScenarioResult(cfg, records, all_round_metrics, final_weights, stats)


def _apply_due_failures(failures, sim, overlay, trees, sorted_ids, cfg) -> None:
    """Fail/rejoin actions whose time has come, then heal overlay and trees."""
    due = [f for f in failures if f[0] <= sim.now]
    if not due:
        return
    del failures[: len(due)]
    for _t, idx, action in due:
        nid = sorted_ids[idx % len(sorted_ids)]
        if action == "fail" and overlay.is_alive(nid):
            overlay.fail(nid)
        elif action == "rejoin" and not overlay.is_alive(nid):
            stale = [gid for gid, g in trees.groups.items() if nid in g.members]
            for gid in stale:
                trees.remove_member(gid, nid)
            overlay.rejoin(nid)
            for gid in stale:
                trees.join_group(nid, gid)
    overlay.repair()
    for gid in list(trees.groups):
        depth = max(trees.tree_stats(gid).depth, 1)
        trees.enable_heartbeats(gid)
        sim.run_until(sim.now + cfg.failure_timeout
                      + (depth + 1) * cfg.heartbeat_period)
        trees.disable_heartbeats(gid)
        sim.run()


# -- dissemination study -------------------------------------------------------------

@dataclass
class DisseminationRow:
    nodes: int
    tree_count: int
    payload_bytes: int
    per_tree_ms: list[float]
    depth: int

    @property
    def max_ms(self) -> float:
        return max(self.per_tree_ms)

    @property
    def mean_ms(self) -> float:
        return sum(self.per_tree_ms) / len(self.per_tree_ms)


def measure_dissemination(payload_bytes: list[int], node_counts: list[int],
                          tree_counts: list[int], seed: int, fanout: int = 16,
                          link: Optional[LinkModel] = None,
                          intercept: bool = True) -> list[DisseminationRow]:
    """Simulated time for every member to receive a payload multicast from
    the root(s); one row per (N, tree count, payload size) combination."""
    rows = []
    for n in node_counts:
        for tc in tree_counts:
            for nb in payload_bytes:
                ids = random_ids(n, seed)
                overlay = Overlay.build(ids)
                sim = Simulator(seed=seed, link=link or LinkModel(),
                                alive=overlay.is_alive)
                trees = TreeManager(overlay, sim, TreeConfig(
                    fanout_cap=fanout, intercept_joins=intercept))
                gids = []
                parts = [sorted(ids)[k::tc] for k in range(tc)]
                for k in range(tc):
                    gid, _root = trees.create_group(f"disseminate-{n}-{tc}-{k}")
                    for nid in parts[k]:
                        if nid not in trees.groups[gid].members:
                            trees.join_group(nid, gid)
                    gids.append(gid)
                results = [trees.multicast(g, nb) for g in gids]
                sim.run()
                depth = max(trees.tree_stats(g).depth for g in gids)
                rows.append(DisseminationRow(
                    n, tc, nb, [r.elapsed for r in results], depth))
    return rows


# -- result files ----------------------------------------------------------------------

def write_records(records: list[MetricsRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str) -> list[MetricsRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(MetricsRecord(**json.loads(line)))
    return out


def summary_rows(records: list[MetricsRecord]) -> list[dict]:
    """Final-round accuracy/F1 per (scenario, topic)."""
    last_round: dict[tuple[str, int], MetricsRecord] = {}
    for r in records:
        key = (r.scenario, r.topic)
        if key not in last_round or r.round >= last_round[key].round:
            last_round[key] = r
    rows = []
    for (scenario, topic) in sorted(last_round):
        r = last_round[(scenario, topic)]
        rows.append({
            "scenario": scenario, "topic": topic, "round": r.round,
            "accuracy": round(r.accuracy, 6), "f1": round(r.f1, 6),
            "dissemination_ms": round(r.dissemination, 3),
            "max_ingress_bytes": r.max_ingress_bytes, "mode": r.mode,
        })
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(no records)\n"
    cols = list(rows[0].keys())
    widths = {c: max(len(c), max(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines.append("  ".join("-" * widths[c] for c in cols))
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"


def write_csv(rows: list[dict], path: str) -> None:
    if not rows:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("")
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()
