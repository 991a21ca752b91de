"""Synthetic multi-stage water plant with threshold control and scripted attacks.

Each stage owns a tank (level sensor ``LIT``), an inflow meter (``FIT``) and an
outflow pump (``P``) that feeds the next stage; stage 1 draws from a source
through valve ``MV101`` and stage 2 carries a quality probe ``AIT201``. One
PLC per stage reports its readings to SCADA over CIP-like flows and reads
the downstream level for its interlock.

The simulation ticks at 1 s. All randomness is drawn up front from the seed,
so a run with an attack script and a run without one share every noise
sample (counterfactual pairs).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .detection import AttackWindow
from .explain import CausalGroundTruth
from .pipeline import FlowRecord, NodeMap, PointRecord

ATTACK_KINDS = ("sensor_spoof_constant", "sensor_ramp", "actuator_force", "flow_flood",
                "payload_tamper")

SCADA_IP = "192.168.1.200"
HMI_IP = "192.168.1.201"
# 2025-01-06 is a Monday
DEFAULT_START = 1736121600.0


class SpecError(ValueError):
    pass


@dataclass
class StageSpec:
    name: str
    tank_capacity: float = 1000.0
    init_level: float = 500.0
    pump_rate: float = 4.0
    pump_on_level: float = 700.0     # pump starts at or above this level
    pump_off_level: float = 350.0    # pump stops at or below this level
    interlock_level: float = 850.0   # pump held off while downstream level >= this
    plc_ip: str = ""


@dataclass
class PlantSpec:
    stages: list[StageSpec]
    source_rate: float = 6.0
    valve_open_level: float = 500.0
    valve_close_level: float = 800.0
    level_noise: float = 1.0
    flow_noise: float = 0.05
    quality_noise: float = 0.5
    report_period: int = 5
    source_variation: float = 0.15   # relative std of the slowly varying source rate
    source_timescale: float = 900.0  # correlation time of that variation, seconds
    start_time: float = DEFAULT_START
    recycle: tuple[int, int] | None = None   # (from stage index, to stage index)

    def __post_init__(self):
        if not self.stages:
            raise SpecError("plant needs at least one stage")
        for s in self.stages:
            if min(s.tank_capacity, s.pump_rate, s.init_level) < 0:
                raise SpecError(f"stage {s.name}: rates and levels must be >= 0")
            if not s.pump_off_level < s.pump_on_level <= s.tank_capacity:
                raise SpecError(f"stage {s.name}: need off < on <= capacity")
        if self.source_timescale <= 0 or self.source_variation < 0:
            raise SpecError("source variation must be >= 0 with a positive timescale")
        if self.source_rate < 0 or min(self.level_noise, self.flow_noise, self.quality_noise) < 0:
            raise SpecError("rates and noise levels must be >= 0")
        if self.recycle is not None:
            a, b = self.recycle
            if a != len(self.stages) - 1 or not 0 <= b < a:
                raise SpecError("recycle must run from the last stage to an earlier one")

    # entity naming
    def stage_entities(self, k: int) -> list[str]:
        n = k + 1
        ents = [f"FIT{n}01", f"LIT{n}01", f"P{n}01"]
        if k == 0:
            ents.insert(0, "MV101")
        if k == 1:
            ents.insert(1, "AIT201")
        return ents

    @property
    def entities(self) -> list[str]:
        return [e for k in range(len(self.stages)) for e in self.stage_entities(k)]

    @property
    def actuators(self) -> list[str]:
        return [e for e in self.entities if e.startswith(("P", "MV"))]

    @property
    def plc_names(self) -> list[str]:
        return [f"PLC{k + 1}" for k in range(len(self.stages))]

    def plc_ip(self, k: int) -> str:
        return self.stages[k].plc_ip or f"192.168.1.{10 * (k + 1)}"


def default_plant() -> PlantSpec:
    """Six stages, 20 entities; rates chosen so every actuator cycles."""
    rates = [4.0, 4.5, 5.0, 5.5, 6.0, 6.5]
    stages = [StageSpec(f"P{k + 1}", pump_rate=r, init_level=420.0 + 60 * k)
              for k, r in enumerate(rates)]
    # the valve reopens exactly where P101 stops, so both keep cycling
    stages[0].pump_off_level = 500.0
    return PlantSpec(stages)


@dataclass
class Attack:
    start: float        # seconds from simulation start
    end: float
    kind: str
    target: str
    magnitude: float
    attack_id: str = ""

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


def validate_script(spec: PlantSpec, script: Sequence[Attack], horizon: int) -> None:
    ents = set(spec.entities)
    plcs = set(spec.plc_names)
    for a in script:
        if a.kind not in ATTACK_KINDS:
            raise SpecError(f"unknown attack kind {a.kind!r}")
        if not 0 <= a.start < a.end <= horizon:
            raise SpecError(f"attack {a.attack_id or a.target} outside horizon [0, {horizon}]")
        if a.kind in ("flow_flood", "payload_tamper"):
            if a.target not in plcs:
                raise SpecError(f"{a.kind} target must be a PLC, got {a.target!r}")
        elif a.target not in ents:
            raise SpecError(f"unknown attack target {a.target!r}")
        if a.kind == "actuator_force" and a.target not in spec.actuators:
            raise SpecError(f"actuator_force target {a.target!r} is not an actuator")
        if a.kind in ("sensor_spoof_constant", "sensor_ramp") and a.target in spec.actuators:
            raise SpecError(f"{a.kind} target {a.target!r} is not a sensor")
    by_target: dict[str, list[Attack]] = {}
    for a in script:
        by_target.setdefault(a.target, []).append(a)
    for t, lst in by_target.items():
        lst.sort(key=lambda a: a.start)
        for x, y in zip(lst, lst[1:]):
            if y.start < x.end:
                raise SpecError(f"overlapping attacks on {t}")


@dataclass
class SimulationResult:
    spec: PlantSpec
    seconds: np.ndarray                       # tick offsets, (H,)
    reported: dict[str, np.ndarray]           # sensor -> reported reading, actuator -> 0/1
    true_state: dict[str, np.ndarray]
    inflow: np.ndarray                        # (H, stages) actual inflow per tank
    outflow: np.ndarray                       # (H, stages) actual outflow per tank (incl. spill)
    flows: list[FlowRecord]
    ground_truth: CausalGroundTruth
    network_ground_truth: CausalGroundTruth
    labels: list[AttackWindow] = field(default_factory=list)

    @property
    def start_time(self) -> float:
        return self.spec.start_time

    def points(self) -> Iterator[PointRecord]:
        acts = set(self.spec.actuators)
        names = list(self.reported)
        t0 = self.spec.start_time
        for k, s in enumerate(self.seconds):
            ts = t0 + float(s)
            for e in names:
                v = self.reported[e][k]
                yield PointRecord(ts, e, ("on" if v > 0.5 else "off") if e in acts else float(v))

    def node_map(self) -> NodeMap:
        m = {self.spec.plc_ip(k): name for k, name in enumerate(self.spec.plc_names)}
        m[SCADA_IP] = "SCADA"
        m[HMI_IP] = "HMI"
        return NodeMap(m)


def _ground_truth(spec: PlantSpec) -> CausalGroundTruth:
    stages = {s.name: spec.stage_entities(k) for k, s in enumerate(spec.stages)}
    n = len(spec.stages)
    edges = {("MV101", "FIT101"), ("MV101", "LIT101"), ("LIT101", "MV101"), ("P101", "AIT201")}
    for k in range(n):
        i = k + 1
        p, lit = f"P{i}01", f"LIT{i}01"
        edges |= {(p, lit), (lit, p)}
        if k + 1 < n:
            nxt = f"LIT{i + 1}01"
            edges |= {(p, nxt), (p, f"FIT{i + 1}01"), (nxt, p)}
    if spec.recycle is not None:
        a, b = spec.recycle
        edges |= {(f"P{a + 1}01", f"LIT{b + 1}01")}
    return CausalGroundTruth(stages, edges)


def _network_ground_truth(spec: PlantSpec) -> CausalGroundTruth:
    plcs = spec.plc_names
    edges = {(p, "SCADA") for p in plcs} | {("SCADA", p) for p in plcs} | {("HMI", "SCADA")}
    edges |= {(plcs[k + 1], plcs[k]) for k in range(len(plcs) - 1)}
    return CausalGroundTruth({"control": plcs, "supervisory": ["SCADA", "HMI", "other"]}, edges)


def simulate(spec: PlantSpec, horizon: int, seed: int = 0,
             attacks: Sequence[Attack] = (), flows: bool = True,
             payload_quantum: float = 1.0) -> SimulationResult:
    """Run the plant for ``horizon`` one-second ticks.

    Level update per tick: ``level += inflow - outflow`` where outflow is the
    pump flow limited to the water available, plus spill above capacity.
    Sensor attacks change only reported readings; actuator attacks pin the
    actuator and the physics follow.
    """
    validate_script(spec, attacks, horizon)
    rng = np.random.default_rng(seed)
    n = len(spec.stages)
    H = int(horizon)
    ents = spec.entities
    sensors = [e for e in ents if e not in spec.actuators]
    noise = {e: rng.standard_normal(H) for e in sensors}
    jitter = rng.integers(0, spec.report_period, size=(len(spec.plc_names) + 2,))
    other_times = np.cumsum(rng.exponential(30.0, size=int(H / 30.0) + 16))
    other_ports = rng.integers(49152, 65535, size=len(other_times))
    source = spec.source_rate * np.maximum(
        1.0 + spec.source_variation * _ou_path(rng, H, spec.source_timescale), 0.0)

    level = np.array([s.init_level for s in spec.stages], dtype=np.float64)
    pump = np.zeros(n, bool)
    valve = True
    quality = 250.0

    true_state = {e: np.zeros(H) for e in ents}
    reported = {e: np.zeros(H) for e in ents}
    inflow_log = np.zeros((H, n))
    outflow_log = np.zeros((H, n))

    forced = [a for a in attacks if a.kind == "actuator_force"]
    sensor_attacks = [a for a in attacks if a.kind in ("sensor_spoof_constant", "sensor_ramp")]

    for t in range(H):
        # controllers act on the true levels observed at the start of the tick
        if level[0] <= spec.valve_open_level:
            valve = True
        elif level[0] >= spec.valve_close_level:
            valve = False
        for k, s in enumerate(spec.stages):
            downstream_full = k + 1 < n and level[k + 1] >= spec.stages[k + 1].interlock_level
            if level[k] >= s.pump_on_level and not downstream_full:
                pump[k] = True
            elif level[k] <= s.pump_off_level or downstream_full:
                pump[k] = False
        v_now, p_now = valve, pump.copy()
        for a in forced:
            if a.active(t):
                on = a.magnitude > 0.5
                if a.target == "MV101":
                    v_now = on
                else:
                    p_now[int(a.target[1]) - 1] = on

        inflow = np.zeros(n)
        outflow = np.zeros(n)
        inflow[0] = source[t] if v_now else 0.0
        moved = np.zeros(n)
        for k, s in enumerate(spec.stages):
            if p_now[k]:
                moved[k] = min(s.pump_rate, level[k] + inflow[k])
                outflow[k] += moved[k]
                if k + 1 < n:
                    inflow[k + 1] += moved[k]
        if spec.recycle is not None:
            a, b = spec.recycle
            # a quarter of the product flow returns upstream
            back = 0.25 * moved[a]
            inflow[b] += back
        new = level + inflow - outflow
        spill = np.maximum(new - np.array([s.tank_capacity for s in spec.stages]), 0.0)
        outflow += spill
        level = new - spill
        inflow_log[t], outflow_log[t] = inflow, outflow

        target_q = 400.0 if p_now[0] else 250.0
        quality += 0.01 * (target_q - quality)

        true_state["MV101"][t] = float(v_now)
        true_state["AIT201"][t] = quality
        for k in range(n):
            i = k + 1
            true_state[f"LIT{i}01"][t] = level[k]
            true_state[f"FIT{i}01"][t] = inflow[k]
            true_state[f"P{i}01"][t] = float(p_now[k])

    for e in ents:
        if e in noise:
            sigma = (spec.level_noise if e.startswith("LIT") else
                     spec.quality_noise if e.startswith("AIT") else spec.flow_noise)
            reported[e] = true_state[e] + sigma * noise[e]
        else:
            reported[e] = true_state[e].copy()
    secs = np.arange(H, dtype=np.float64)
    for a in sensor_attacks:
        m = (secs >= a.start) & (secs < a.end)
        if a.kind == "sensor_spoof_constant":
            reported[a.target][m] = a.magnitude
        else:
            # k seconds into the attack the reading is off by k * magnitude
            reported[a.target][m] += a.magnitude * (secs[m] - a.start + 1.0)

    flow_list = _flows(spec, reported, H, attacks, jitter, other_times, other_ports,
                       payload_quantum) if flows else []
    labels = [AttackWindow(spec.start_time + a.start, spec.start_time + a.end,
                           a.attack_id or f"A{j + 1}", f"{a.kind} {a.target} {a.magnitude:g}",
                           (a.target,))
              for j, a in enumerate(sorted(attacks, key=lambda a: a.start))]
    return SimulationResult(spec, secs, reported, true_state, inflow_log, outflow_log, flow_list,
                            _ground_truth(spec), _network_ground_truth(spec), labels)


def _ou_path(rng: np.random.Generator, n: int, tau: float) -> np.ndarray:
    """Unit-variance Ornstein-Uhlenbeck path sampled at 1 s."""
    a = math.exp(-1.0 / tau)
    eps = rng.standard_normal(n) * math.sqrt(1.0 - a * a)
    out = np.empty(n)
    z = rng.standard_normal()
    for t in range(n):
        z = a * z + eps[t]
        out[t] = z
    return out


def _pack(values: Sequence[float]) -> bytes:
    return struct.pack(f"<{len(values)}f", *values)


def _flows(spec: PlantSpec, reported: dict[str, np.ndarray], H: int, attacks: Sequence[Attack],
           jitter: np.ndarray, other_times: np.ndarray, other_ports: np.ndarray,
           quantum: float) -> list[FlowRecord]:
    t0 = spec.start_time
    period = spec.report_period
    out: list[FlowRecord] = []
    floods = [a for a in attacks if a.kind == "flow_flood"]
    tampers = [a for a in attacks if a.kind == "payload_tamper"]
    n = len(spec.stages)
    for k, plc in enumerate(spec.plc_names):
        ip = spec.plc_ip(k)
        ents = spec.stage_entities(k)
        for t in range(int(jitter[k]), H, period):
            vals = [round(float(reported[e][t]) / quantum) * quantum for e in ents]
            for a in tampers:
                if a.target == plc and a.active(t):
                    vals = [v + a.magnitude for v in vals]
            copies = 1
            for a in floods:
                if a.target == plc and a.active(t):
                    copies = max(1, int(round(a.magnitude)))
            for c in range(copies):
                ts = t0 + t + c * 0.01
                # SCADA poll, PLC response with the stage readings
                out.append(FlowRecord(ts, SCADA_IP, ip, 50000 + k, "TCP", 64))
                out.append(FlowRecord(ts + 0.001, ip, SCADA_IP, 44818, "TCP",
                                      60 + 4 * len(vals), _pack(vals), tuple(vals)))
                if k > 0:
                    # interlock: this PLC publishes its level to the upstream PLC
                    lvl = round(float(reported[f"LIT{k + 1}01"][t]) / quantum) * quantum
                    out.append(FlowRecord(ts + 0.002, ip, spec.plc_ip(k - 1), 2222, "UDP", 68,
                                          _pack([lvl]), (lvl,)))
    for t in range(int(jitter[n]), H, 60):
        out.append(FlowRecord(t0 + t, HMI_IP, SCADA_IP, 51000, "TCP", 120))
        out.append(FlowRecord(t0 + t + 0.001, SCADA_IP, HMI_IP, 443, "TCP", 900))
    for tt, port in zip(other_times, other_ports):
        if tt >= H:
            break
        out.append(FlowRecord(t0 + float(tt), "10.0.0.%d" % (port % 7 + 2), "10.0.0.255",
                              int(port), "UDP", 92))
    out.sort(key=lambda f: f.ts)
    return out


def inject(spec: PlantSpec, horizon: int, seed: int, script: Sequence[Attack],
           flows: bool = True) -> tuple[SimulationResult, SimulationResult]:
    """Return (attacked, counterfactual) runs sharing all noise; labels on the attacked run."""
    attacked = simulate(spec, horizon, seed, script, flows)
    clean = simulate(spec, horizon, seed, (), flows)
    return attacked, clean


def default_attack_script(test_start: float, spacing: float = 1200.0,
                          duration: float = 300.0, force_duration: float = 150.0) -> list[Attack]:
    """Six attacks, ``spacing`` seconds apart, starting 10 min into the test span.

    Pumps are forced for ``force_duration``; longer forcing empties or floods
    tanks and the plant then needs many minutes to return to its cycle.
    """
    plan = [
        ("sensor_spoof_constant", "LIT301", 500.0),
        ("actuator_force", "P201", 1.0),
        ("sensor_ramp", "LIT401", 1.5),
        ("actuator_force", "P301", 1.0),
        ("sensor_spoof_constant", "FIT501", 0.0),
        ("actuator_force", "P201", 0.0),
    ]
    out = []
    for j, (kind, target, mag) in enumerate(plan):
        s = test_start + 600.0 + j * spacing
        d = force_duration if kind == "actuator_force" else duration
        out.append(Attack(s, s + d, kind, target, mag, f"A{j + 1}"))
    return out
