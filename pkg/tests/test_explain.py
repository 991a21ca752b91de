import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stagnn.detection import AlarmEvent, AttackWindow
from stagnn.explain import (
    CausalGroundTruth, ExplanationGraph, build_ga, build_gcs, classify_alarm, classify_causality,
    classify_detection, explain_window, export_graph, normalized_edges, review_alarm, save_graph,
    to_dot, verdict_summary,
)
from stagnn.numerics import topk_renormalize, Tensor

import oracles

DATA = Path(__file__).parent / "data"

TRUTH = CausalGroundTruth(
    stages={"P1": ["LIT101", "MV101", "P101"], "P2": ["FIT201", "AIT201", "P201"],
            "P3": ["LIT301"]},
    edges={("MV101", "LIT101"), ("LIT101", "P101"), ("P101", "FIT201"), ("FIT201", "LIT301"),
           ("P201", "AIT201")},
)


def _as_dict(edges, names=None):
    pos = {n: k for k, n in enumerate(names)} if names else None
    out = {}
    for a, b, w in edges:
        key = (int(a), int(b)) if pos is None else (pos[a], pos[b])
        out[key] = w
    return out


def _sparse_attention(rng, n, k):
    a = rng.uniform(size=(n, n)) ** 3
    return topk_renormalize(Tensor(a / a.sum(axis=1, keepdims=True)), k).data


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def test_three_nodes_give_at_most_three_edges():
    S = np.random.default_rng(0).normal(size=(3, 3))
    assert len(build_gcs(S)) <= 3


def test_similarity_edges_match_oracle():
    rng = np.random.default_rng(1)
    for trial in range(100):
        n = 8 if trial < 50 else int(rng.integers(2, 14))
        S = rng.normal(size=(n, n))
        if trial % 3 == 0:
            S = np.round(S, 1)      # plenty of ties
        got = build_gcs(S)
        assert _as_dict(got) == oracles.gcs_edges(S.tolist())
        assert len(got) <= min(5 * n, n * (n - 1) // 2)


@given(st.integers(0, 10_000), st.integers(2, 10))
def test_each_node_keeps_its_strongest_row_entries(seed, n):
    S = np.random.default_rng(seed).normal(size=(n, n))
    edges = _as_dict(build_gcs(S))
    for i in range(n):
        row = sorted((S[i, j], j) for j in range(n) if j != i)
        kept = row[::-1][:5]
        for w, j in kept:
            assert edges[(min(i, j), max(i, j))] >= w
        dropped = row[::-1][5:]
        if dropped:
            assert min(w for w, _ in kept) >= max(w for w, _ in dropped)


def test_relabelling_a_symmetric_matrix_relabels_the_edges():
    rng = np.random.default_rng(2)
    M = rng.normal(size=(7, 7))
    S = M + M.T
    names = [f"n{i}" for i in range(7)]
    perm = [3, 6, 0, 1, 5, 2, 4]
    base = {frozenset((a, b)): w for a, b, w in build_gcs(S, names)}
    moved = {frozenset((a, b)): w for a, b, w in
             build_gcs(S[perm][:, perm], [names[p] for p in perm])}
    assert base == moved


def test_attention_edges_match_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 12))
        A = _sparse_attention(rng, n, int(rng.integers(1, n + 1)))
        anomalous = set(rng.choice(n, size=int(rng.integers(0, 4)), replace=True).tolist())
        got = build_ga(A, [str(i) for i in anomalous])
        assert _as_dict(got) == oracles.ga_edges(A.tolist(), anomalous)
        assert all(int(a) in anomalous or int(b) in anomalous for a, b, _ in got)
        assert all(0 < w <= 1 for _, _, w in got)


def test_no_anomalous_nodes_no_attention_edges():
    A = _sparse_attention(np.random.default_rng(4), 6, 3)
    assert build_ga(A, []) == []


def test_single_anomalous_node_sparsity_bound():
    A = _sparse_attention(np.random.default_rng(5), 12, 6)
    edges = build_ga(A, ["4"])
    into = [e for e in edges if e[1] == "4"]
    assert len(into) <= 6
    assert all(e[0] == "4" for e in edges if e[1] != "4")


def test_explain_window_keeps_rank_order():
    rng = np.random.default_rng(6)
    g = explain_window(rng.normal(size=(4, 4)), _sparse_attention(rng, 4, 2), list("ABCD"),
                       ["C", "A"], {"A": "P1"})
    assert g.anomalous == ["C", "A"] and g.stages == {"A": "P1"}


# ---------------------------------------------------------------------------
# verdicts
# ---------------------------------------------------------------------------

ATTACKS = [AttackWindow(1000, 1300, "A1", targets=("LIT101",)),
           AttackWindow(3000, 3300, "A2", targets=("P201",))]


def _alarm(t, top3=("LIT101", "MV101", "P101")):
    return AlarmEvent(float(t), 0, 1.0, "conformal", [(e, 1.0) for e in top3])


@pytest.mark.parametrize("t, verdict", [(1150, "correct"), (970, "correct"), (940, "correct"),
                                        (939, "incorrect"), (2000, "incorrect"),
                                        (3360, "correct")])
def test_alarm_placement(t, verdict):
    assert classify_alarm(_alarm(t), ATTACKS, 60) == verdict


def test_detection_overlap():
    assert classify_detection(["P101", "LIT101", "FIT201"], ["LIT101"]) == "correct"
    assert classify_detection(["P101", "FIT201"], ["LIT301"]) == "incorrect"
    # a cascade that surfaces only downstream entities is not credited
    assert classify_detection(["FIT601", "P602", "LIT101"], ["DPIT301"]) == "incorrect"


@pytest.mark.parametrize("edges, top3, targets, verdict, reason", [
    ([("MV101", "LIT101", 0.8)], ["LIT101"], (), "correct", "exact_match"),
    ([("LIT101", "MV101", 0.8)], ["LIT101"], (), "partial", "reversed_direction"),
    ([("LIT101", "FIT201", 0.8)], ["LIT101"], (), "partial", "indirect_path"),
    ([("AIT201", "FIT201", 0.8)], ["FIT201"], (), "partial", "subsystem_match"),
    ([("LIT301", "MV101", 0.8)], ["MV101"], (), "incorrect", "no_dependency"),
    ([("AIT201", "LIT101", 0.8)], ["LIT101"], ("P201",), "partial", "partial_overlap"),
    ([("MV101", "LIT101", 1.0), ("LIT301", "MV101", 0.05)], ["MV101"], (), "correct",
     "exact_match"),
    ([("MV101", "LIT101", 1.0), ("LIT301", "MV101", 0.5)], ["MV101"], (), "partial",
     "weak_exact_match"),
    ([("LIT301", "FIT201", 0.9)], ["MV101"], (), "incorrect", "no_considered_edges"),
    ([], ["MV101"], (), "incorrect", "no_considered_edges"),
])
def test_causality_cases(edges, top3, targets, verdict, reason):
    got, reasons = classify_causality(edges, top3, TRUTH, targets)
    assert got == verdict and reason in reasons
    assert classify_causality(edges, top3, TRUTH, targets) == (got, reasons)


def test_missing_ground_truth_withholds_verdict():
    assert classify_causality([("A", "B", 1.0)], ["A"], None) == (None, ["ground_truth_missing"])


@given(st.lists(st.floats(1e-6, 10.0), min_size=1, max_size=20))
def test_normalized_weights_reach_one(weights):
    out = normalized_edges([("a", "b", w) for w in weights])
    ws = [w for _, _, w in out]
    assert all(0 < w <= 1 for w in ws) and max(ws) == 1.0


def test_review_and_summary():
    g = ExplanationGraph(TRUTH.entities, attention_edges=[("MV101", "LIT101", 0.5)])
    inside = review_alarm(_alarm(1100), g, ATTACKS, TRUTH, 60)
    assert (inside.alarm_raised, inside.detection, inside.causality) == (
        "correct", "correct", "correct")
    assert inside.attack_id == "A1"
    stray = review_alarm(_alarm(2000), g, ATTACKS, TRUTH, 60)
    assert stray.alarm_raised == "incorrect" and stray.detection is None
    missed = review_alarm(_alarm(3100), g, ATTACKS, TRUTH, 60)
    assert missed.detection == "incorrect"
    blind = review_alarm(_alarm(1100), g, ATTACKS, None, 60)
    assert blind.causality is None and blind.reasons == ["ground_truth_missing"]
    assert verdict_summary([inside, stray, missed, blind]) == {
        "alarms": 4, "alarms_correct": 3, "detection_correct": 2, "causality_correct": 2,
        "causality_partial": 0, "causality_incorrect": 0}


def test_ground_truth_file(tmp_path):
    path = tmp_path / "truth.json"
    path.write_text(json.dumps(TRUTH.to_json()))
    back = CausalGroundTruth.load(path)
    assert back == TRUTH
    assert back.stage_of["AIT201"] == "P2" and back.successors("LIT101") == {"P101"}
    A = back.prior_adjacency(["LIT101", "P101", "FIT201", "LIT301"])
    assert A.tolist() == [[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]]


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _fixture_graph():
    return ExplanationGraph(
        nodes=["LIT101", "P101", "FIT201"],
        similarity_edges=[("LIT101", "P101", 0.9), ("P101", "FIT201", -0.25)],
        attention_edges=[("LIT101", "P101", 0.6), ("FIT201", "P101", 0.4)],
        anomalous=["P101", "FIT201"],
        stages={"LIT101": "P1", "P101": "P1", "FIT201": "P2"},
    )


def test_dot_matches_golden_file():
    assert to_dot(_fixture_graph()).encode() == (DATA / "three_node.dot").read_bytes()


def test_empty_graph_exports():
    empty = ExplanationGraph([])
    assert export_graph(empty, "dot").encode() == (DATA / "empty.dot").read_bytes()
    assert json.loads(export_graph(empty, "json")) == {
        "nodes": [], "similarity_edges": [], "attention_edges": []}


def test_json_round_trip(tmp_path):
    g = _fixture_graph()
    save_graph(g, tmp_path / "g.json", "json")
    assert ExplanationGraph.from_json(json.loads((tmp_path / "g.json").read_text())) == g


def test_unknown_format():
    with pytest.raises(ValueError, match="unknown graph format"):
        export_graph(_fixture_graph(), "svg")


def test_quoting_in_dot():
    g = ExplanationGraph(['we"ird'], anomalous=['we"ird'])
    assert '"we\\"ird" [fillcolor="#d7191c"];' in to_dot(g)
