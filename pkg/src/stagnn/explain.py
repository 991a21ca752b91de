"""Explanation graphs per alarm and the three-stage alarm/detection/causality review."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .detection import AlarmEvent, AttackWindow

GCS_EDGES_PER_NODE = 5
EDGE_WEIGHT_FLOOR = 0.1
RANK_COLORS = ("#d7191c", "#fd8d3c", "#fecc5c")
ANOMALOUS_COLOR = "#ffffb2"


@dataclass
class ExplanationGraph:
    nodes: list[str]
    similarity_edges: list[tuple[str, str, float]] = field(default_factory=list)
    attention_edges: list[tuple[str, str, float]] = field(default_factory=list)
    anomalous: list[str] = field(default_factory=list)   # ordered by contribution rank
    stages: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "nodes": [{"id": n, "stage": self.stages.get(n),
                       "rank": self.anomalous.index(n) + 1 if n in self.anomalous else None}
                      for n in self.nodes],
            "similarity_edges": [{"a": a, "b": b, "weight": w} for a, b, w in self.similarity_edges],
            "attention_edges": [{"src": s, "dst": d, "weight": w} for s, d, w in self.attention_edges],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExplanationGraph":
        ranked = sorted((n for n in d["nodes"] if n["rank"] is not None), key=lambda n: n["rank"])
        return cls(
            nodes=[n["id"] for n in d["nodes"]],
            similarity_edges=[(e["a"], e["b"], e["weight"]) for e in d["similarity_edges"]],
            attention_edges=[(e["src"], e["dst"], e["weight"]) for e in d["attention_edges"]],
            anomalous=[n["id"] for n in ranked],
            stages={n["id"]: n["stage"] for n in d["nodes"] if n["stage"] is not None},
        )


def build_gcs(similarity: np.ndarray, nodes: Sequence[str] | None = None,
              per_node: int = GCS_EDGES_PER_NODE) -> list[tuple[str, str, float]]:
    """Undirected edges: each node's ``per_node`` most similar other nodes.

    Row order is by descending weight, then lower column index. Pairs chosen
    from both ends are kept once with the larger weight; edges are listed
    by (lower index, higher index).
    """
    S = np.asarray(similarity, dtype=np.float64)
    N = S.shape[0]
    names = list(nodes) if nodes is not None else [str(i) for i in range(N)]
    pairs: dict[tuple[int, int], float] = {}
    for i in range(N):
        cols = [j for j in range(N) if j != i]
        cols.sort(key=lambda j: (-S[i, j], j))
        for j in cols[:per_node]:
            key = (min(i, j), max(i, j))
            pairs[key] = max(pairs.get(key, -np.inf), float(S[i, j]))
    return [(names[a], names[b], w) for (a, b), w in sorted(pairs.items())]


def build_ga(attention: np.ndarray, anomalous: Iterable[str],
             nodes: Sequence[str] | None = None) -> list[tuple[str, str, float]]:
    """Directed edges ``j -> i`` weighted by ``A[i, j]`` that touch an anomalous node.

    Row i of the attention matrix holds how much entity i draws from each
    neighbour, so information flows from column to row. Zero weights and
    self-attention are skipped.
    """
    A = np.asarray(attention, dtype=np.float64)
    N = A.shape[0]
    names = list(nodes) if nodes is not None else [str(i) for i in range(N)]
    idx = {n: k for k, n in enumerate(names)}
    anom = {idx[n] for n in anomalous}
    out = []
    for i in range(N):
        for j in range(N):
            if i != j and A[i, j] > 0 and (i in anom or j in anom):
                out.append((names[j], names[i], float(A[i, j])))
    return out


def explain_window(similarity: np.ndarray, attention: np.ndarray, nodes: Sequence[str],
                   anomalous: Sequence[str], stages: dict[str, str] | None = None
                   ) -> ExplanationGraph:
    return ExplanationGraph(list(nodes), build_gcs(similarity, nodes),
                            build_ga(attention, anomalous, nodes), list(anomalous),
                            dict(stages or {}))


# ---------------------------------------------------------------------------
# ground truth and verdicts
# ---------------------------------------------------------------------------

@dataclass
class CausalGroundTruth:
    stages: dict[str, list[str]]
    edges: set[tuple[str, str]]

    @property
    def entities(self) -> list[str]:
        return [e for members in self.stages.values() for e in members]

    @property
    def stage_of(self) -> dict[str, str]:
        return {e: s for s, members in self.stages.items() for e in members}

    def successors(self, node: str) -> set[str]:
        return {b for a, b in self.edges if a == node}

    def prior_adjacency(self, nodes: Sequence[str]) -> np.ndarray:
        """Same-stage entities fully connected, plus documented edges (symmetrized)."""
        st = self.stage_of
        idx = {n: k for k, n in enumerate(nodes)}
        A = np.zeros((len(nodes), len(nodes)))
        for a in nodes:
            for b in nodes:
                if a in st and st.get(a) == st.get(b):
                    A[idx[a], idx[b]] = 1.0
        for a, b in self.edges:
            if a in idx and b in idx:
                A[idx[a], idx[b]] = A[idx[b], idx[a]] = 1.0
        return A

    def to_json(self) -> dict:
        return {"stages": self.stages, "edges": sorted([a, b] for a, b in self.edges)}

    @classmethod
    def from_json(cls, d: dict) -> "CausalGroundTruth":
        return cls({k: list(v) for k, v in d["stages"].items()},
                   {(a, b) for a, b in d["edges"]})

    @classmethod
    def load(cls, path) -> "CausalGroundTruth":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class CausalVerdict:
    alarm_raised: str                  # "correct" | "incorrect"
    detection: str | None              # "correct" | "incorrect" | None (not evaluated)
    causality: str | None              # "correct" | "partial" | "incorrect" | None (withheld)
    reasons: list[str] = field(default_factory=list)
    attack_id: str | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


def matching_attack(timestamp: float, attacks: Sequence[AttackWindow],
                    tolerance: float) -> AttackWindow | None:
    """Attack containing ``timestamp``, else the nearest one within tolerance."""
    inside = [a for a in attacks if a.start <= timestamp <= a.end]
    if inside:
        return inside[0]
    near = [(min(abs(timestamp - a.start), abs(timestamp - a.end)), a) for a in attacks]
    near = [(d, a) for d, a in near if d <= tolerance]
    return min(near, key=lambda da: da[0])[1] if near else None


def classify_alarm(alarm: AlarmEvent, attacks: Sequence[AttackWindow],
                   tolerance: float) -> str:
    return "correct" if matching_attack(alarm.timestamp, attacks, tolerance) else "incorrect"


def classify_detection(top3: Iterable[str], targets: Iterable[str]) -> str:
    return "correct" if set(top3) & set(targets) else "incorrect"


def normalized_edges(edges: Sequence[tuple[str, str, float]]) -> list[tuple[str, str, float]]:
    """Divide edge weights by the largest weight in the graph."""
    if not edges:
        return []
    m = max(w for _, _, w in edges)
    return [(a, b, w / m) for a, b, w in edges] if m > 0 else []


def classify_causality(attention_edges: Sequence[tuple[str, str, float]], top3: Iterable[str],
                       truth: CausalGroundTruth | None,
                       attack_targets: Iterable[str] = ()) -> tuple[str | None, list[str]]:
    """Compare strong attention edges around the top-3 entities with ground truth.

    Considered edges touch a top-3 entity and keep >= 0.1 of the strongest
    edge's weight. Correct when every considered edge is a documented
    directed dependency. Otherwise partial when some edge is reversed, a
    two-hop path, within one stage, or has exactly one endpoint in the attack
    chain (targets and their direct successors). The partial rules are
    codified approximations and the reason codes say which one fired.
    """
    if truth is None:
        return None, ["ground_truth_missing"]
    top = set(top3)
    considered = [(a, b) for a, b, w in normalized_edges(attention_edges)
                  if w >= EDGE_WEIGHT_FLOOR and (a in top or b in top)]
    if not considered:
        return "incorrect", ["no_considered_edges"]
    exact = [(a, b) in truth.edges for a, b in considered]
    if all(exact):
        return "correct", ["exact_match"]
    stage = truth.stage_of
    targets = set(attack_targets)
    chain = targets | {s for t in targets for s in truth.successors(t)}
    reasons = []
    for (a, b), ok in zip(considered, exact):
        if ok:
            continue
        if (b, a) in truth.edges:
            reasons.append("reversed_direction")
        elif truth.successors(a) & {x for x, y in truth.edges if y == b}:
            reasons.append("indirect_path")
        elif a in stage and stage.get(a) == stage.get(b):
            reasons.append("subsystem_match")
        elif chain and (a in chain) != (b in chain):
            reasons.append("partial_overlap")
    if reasons:
        if any(exact):
            reasons.insert(0, "exact_match")
        return "partial", sorted(set(reasons), key=reasons.index)
    if any(exact):
        return "partial", ["weak_exact_match"]
    return "incorrect", ["no_dependency"]


def review_alarm(alarm: AlarmEvent, graph: ExplanationGraph, attacks: Sequence[AttackWindow],
                 truth: CausalGroundTruth | None, tolerance: float) -> CausalVerdict:
    """Stage 1 alarm placement, stage 2 top-3 overlap, stage 3 causal consistency."""
    attack = matching_attack(alarm.timestamp, attacks, tolerance)
    top3 = [e for e, _ in alarm.top3]
    targets = attack.targets if attack else ()
    causality, reasons = classify_causality(graph.attention_edges, top3, truth, targets)
    if attack is None:
        return CausalVerdict("incorrect", None, causality, reasons)
    return CausalVerdict("correct", classify_detection(top3, attack.targets), causality,
                         reasons, attack.attack_id)


def verdict_summary(verdicts: Sequence[CausalVerdict]) -> dict:
    """Counts in the shape of an alarms / detection / causality summary table."""
    raised = [v for v in verdicts if v.alarm_raised == "correct"]
    return {
        "alarms": len(verdicts),
        "alarms_correct": len(raised),
        "detection_correct": sum(v.detection == "correct" for v in raised),
        "causality_correct": sum(v.causality == "correct" for v in raised),
        "causality_partial": sum(v.causality == "partial" for v in raised),
        "causality_incorrect": sum(v.causality == "incorrect" for v in raised),
    }


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _q(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(g: ExplanationGraph) -> str:
    lines = ["digraph explanation {", "  rankdir=LR;", "  node [shape=ellipse, style=filled];"]
    by_stage: dict[str, list[str]] = {}
    for n in g.nodes:
        by_stage.setdefault(g.stages.get(n, ""), []).append(n)
    for k, (stage, members) in enumerate(sorted(by_stage.items(), key=lambda kv: kv[0])):
        if stage:
            lines.append(f"  subgraph cluster_{k} {{")
            lines.append(f"    label={_q(stage)};")
            lines.append("    rank=same;")
            lines += [f"    {_q(n)};" for n in members]
            lines.append("  }")
    for n in g.nodes:
        if n in g.anomalous:
            r = g.anomalous.index(n)
            color = RANK_COLORS[r] if r < len(RANK_COLORS) else ANOMALOUS_COLOR
        else:
            color = "#d9d9d9"
        lines.append(f"  {_q(n)} [fillcolor={_q(color)}];")
    for a, b, w in g.similarity_edges:
        # dot wants integer edge weights, and cosine similarity can be negative
        lines.append(f"  {_q(a)} -> {_q(b)} [dir=none, color=gray, tooltip={_q(f'{w:.6f}')}];")
    for a, b, w in g.attention_edges:
        lines.append(f"  {_q(a)} -> {_q(b)} [color=red, penwidth={0.5 + 4.5 * w:.3f}, "
                     f"label={_q(f'{w:.3f}')}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_graph(g: ExplanationGraph, fmt: str) -> str:
    if fmt == "dot":
        return to_dot(g)
    if fmt == "json":
        return json.dumps(g.to_json(), indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown graph format {fmt!r} (expected 'dot' or 'json')")


def save_graph(g: ExplanationGraph, path, fmt: str) -> None:
    from pathlib import Path
    from .io_utils import atomic_write_text
    atomic_write_text(Path(path), export_graph(g, fmt))
