"""Command-line lifecycle: simulate, ingest, train, calibrate, detect, evaluate, monitor.

Every command reads a flat TOML run configuration (``--config``), lets flags
override individual keys, and writes its outputs atomically under the run's
output directory. Exit codes: 0 ok, 1 usage or configuration, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import tomli

from . import detection as det
from . import explain as ex
from . import pipeline as pl
from .io_utils import (arrays_bytes, atomic_write_bytes, atomic_write_json, atomic_write_jsonl,
                       atomic_write_text, load_arrays, read_jsonl, sha256_bytes)
from .model import ConfigError, ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .simulator import (SpecError, default_attack_script, default_plant, simulate)
from .training import NumericError, TrainConfig, train

logger = logging.getLogger("stagnn")

CONFIG_VERSION = 1
OUT_DIR_ENV = "STAGNN_OUT_DIR"
MODALITIES = ("physical", "netflow", "netflow_payload", "multimodal")
SPLITS = ("train", "calibration", "test")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    schema_version: int = CONFIG_VERSION
    modality: str = "physical"
    # inputs; empty means the file of that name in the output directory
    points: str = ""
    flows: str = ""
    node_map: str = ""
    labels: str = ""
    ground_truth: str = ""
    prior: str = ""
    out_dir: str = "run"
    seed: int = 0
    # data layout
    interval: float = 10.0
    window: int = 6
    exogenous: bool = False
    train_fraction: float = 0.8
    calibration_fraction: float = 0.1
    test_fraction: float = 0.1
    # model
    embed_dim: int = 128
    temporal_heads: int = 4
    spatial_heads: int = 4
    top_k: int = 6
    # training
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    gamma_cont: float = 1.0
    gamma_bool: float = 1.0
    patience: int = 5
    # detection and monitoring
    alpha: float = 0.01
    tolerance: float = det.DEFAULT_TOLERANCE
    horizon: int = 360
    drift_factor: float = 10.0
    # simulator
    sim_hours: float = 20.0
    sim_attacks: bool = True
    sim_attack_start_hours: float = 18.0
    sim_flows: bool = True

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.calibration_fraction, self.test_fraction)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def input_path(self, key: str, default_name: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else self.out / default_name

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           epochs=self.epochs, batch_size=self.batch_size,
                           gamma_cont=self.gamma_cont, gamma_bool=self.gamma_bool,
                           seed=self.seed, patience=self.patience)

    def problems(self) -> list[str]:
        """Every invalid or contradictory setting, not just the first."""
        out = []
        if self.schema_version != CONFIG_VERSION:
            out.append(f"schema_version {self.schema_version} is not supported "
                       f"(expected {CONFIG_VERSION})")
        if self.modality not in MODALITIES:
            out.append(f"modality must be one of {', '.join(MODALITIES)}, got {self.modality!r}")
        if self.interval <= 0:
            out.append("interval must be > 0")
        if self.window < 1:
            out.append("window must be >= 1")
        if any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            out.append(f"train/calibration/test fractions must be >= 0 and sum to 1, "
                       f"got {self.fractions}")
        if min(self.embed_dim, self.temporal_heads, self.spatial_heads, self.top_k) < 1:
            out.append("embed_dim, heads and top_k must be >= 1")
        elif self.embed_dim % self.temporal_heads or self.embed_dim % self.spatial_heads:
            out.append("embed_dim must be divisible by both head counts")
        if self.learning_rate < 0 or self.weight_decay < 0:
            out.append("learning_rate and weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            out.append("epochs must be >= 0, batch_size and patience >= 1")
        if self.gamma_cont < 0 or self.gamma_bool < 0 or self.gamma_cont + self.gamma_bool == 0:
            out.append("gamma_cont and gamma_bool must be >= 0 and not both 0")
        if not 0 < self.alpha < 1:
            out.append("alpha must lie in (0, 1)")
        if self.tolerance < 0:
            out.append("tolerance must be >= 0")
        if self.horizon < 1 or self.drift_factor <= 0:
            out.append("horizon must be >= 1 and drift_factor > 0")
        if self.sim_hours <= 0:
            out.append("sim_hours must be > 0")
        if self.sim_attacks and not 0 <= self.sim_attack_start_hours < self.sim_hours:
            out.append("sim_attack_start_hours must lie inside the simulated span")
        return out


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PATH_KEYS = ("points", "flows", "node_map", "labels", "ground_truth", "prior", "out_dir")


def _coerce(key: str, value, errors: list[str]):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        if isinstance(value, bool):
            return value
    elif kind == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(value, str):
        return value
    errors.append(f"{key}: expected {kind}, got {type(value).__name__} {value!r}")
    return None


def load_config(path: Path | None, overrides: dict) -> RunConfig:
    """File keys, then the output-directory environment override, then flags."""
    values: dict = {}
    errors: list[str] = []
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as e:
            raise UsageError(f"{path}: {e}") from None
        base = Path(path).resolve().parent
        for key, value in raw.items():
            if key not in _FIELD_TYPES:
                errors.append(f"unknown config key {key!r}")
                continue
            if isinstance(value, dict):
                errors.append(f"{key}: nested tables are not allowed (flat keys only)")
                continue
            v = _coerce(key, value, errors)
            if v is not None and key in _PATH_KEYS and v:
                v = str((base / v).resolve())
            if v is not None:
                values[key] = v
        if "schema_version" not in raw:
            errors.append("schema_version is missing")
    env_out = os.environ.get(OUT_DIR_ENV)
    if env_out:
        values["out_dir"] = env_out
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    cfg = RunConfig(**values)
    for key in _PATH_KEYS:
        if getattr(cfg, key):
            setattr(cfg, key, str(Path(getattr(cfg, key)).resolve()))
    errors += cfg.problems()
    if errors:
        raise UsageError("invalid configuration: " + "; ".join(errors))
    return cfg


# ---------------------------------------------------------------------------
# split files and the leakage guard
# ---------------------------------------------------------------------------

def windows_bytes(w: pl.WindowSet) -> bytes:
    return arrays_bytes(x=w.x, y=w.y, target_index=w.target_index, times=w.times,
                        window=np.array(w.window))


def read_windows(path: Path) -> pl.WindowSet:
    try:
        a = load_arrays(path)
    except FileNotFoundError:
        raise pl.DataError(f"missing window file {path}") from None
    except (OSError, ValueError) as e:
        raise pl.DataError(f"{path}: not a window archive ({e})") from None
    missing = {"x", "y", "target_index", "times", "window"} - set(a)
    if missing:
        raise pl.DataError(f"{path}: missing arrays {sorted(missing)}")
    return pl.WindowSet(a["x"], a["y"], a["target_index"], a["times"], int(a["window"]))


def _split_entry(w: pl.WindowSet, data: bytes, name: str) -> dict:
    interval_first = float(w.times[0]) if len(w) else None
    return {"file": f"{name}.npz", "sha256": sha256_bytes(data), "n_windows": len(w),
            "first_target_time": interval_first,
            "last_target_time": float(w.times[-1]) if len(w) else None,
            "first_step": int(w.start_index[0]) if len(w) else None,
            "last_step": int(w.target_index[-1]) if len(w) else None}


def read_manifest(out: Path) -> dict:
    path = out / "manifest.json"
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise pl.DataError(f"missing {path}; run ingest first") from None


def read_split(out: Path, name: str, manifest: dict) -> pl.WindowSet:
    """Load a split only if its bytes match the manifest written at ingest time."""
    entry = manifest["splits"].get(name)
    if entry is None:
        raise pl.DataError(f"manifest has no split {name!r}")
    path = out / entry["file"]
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise pl.DataError(f"missing split file {path}") from None
    if sha256_bytes(data) != entry["sha256"]:
        raise pl.DataError(f"{path} does not match the manifest hash; re-run ingest")
    return read_windows(path)


def assert_precedes(manifest: dict, earlier: str, later: str) -> None:
    a, b = manifest["splits"][earlier], manifest["splits"][later]
    if a["last_step"] is not None and b["first_step"] is not None and \
            a["last_step"] >= b["first_step"]:
        raise pl.DataError(f"split {later!r} overlaps {earlier!r} in time")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> int:
    spec = default_plant()
    horizon = int(round(cfg.sim_hours * 3600))
    script = default_attack_script(cfg.sim_attack_start_hours * 3600) if cfg.sim_attacks else []
    script = [a for a in script if a.end <= horizon]
    res = simulate(spec, horizon, cfg.seed, script, flows=cfg.sim_flows)
    out = cfg.out
    atomic_write_text(out / "points.csv", pl.format_points_csv(res.points()))
    if cfg.sim_flows:
        atomic_write_text(out / "flows.jsonl", pl.format_flows_jsonl(res.flows))
        atomic_write_text(out / "nodes.txt", res.node_map().format())
    atomic_write_text(out / "labels.csv", det.format_labels_csv(res.labels))
    atomic_write_json(out / "ground_truth.json", res.ground_truth.to_json())
    atomic_write_json(out / "network_ground_truth.json", res.network_ground_truth.to_json())
    logger.info("simulated %d s with %d attacks into %s", horizon, len(script), out)
    return EXIT_OK


def load_series(cfg: RunConfig) -> pl.RegularSeries:
    mod = cfg.modality
    points = flows = None
    if mod in ("physical", "multimodal"):
        points = pl.read_points_csv(cfg.input_path("points", "points.csv"))
    if mod != "physical":
        flows = pl.read_flows_jsonl(cfg.input_path("flows", "flows.jsonl"))
        node_map = pl.NodeMap.read(cfg.input_path("node_map", "nodes.txt"))
    payload = mod in ("netflow_payload", "multimodal")
    if mod == "physical":
        return pl.resample_points(points, cfg.interval)
    if mod != "multimodal":
        return pl.resample_flows(flows, node_map, cfg.interval, payload=payload)
    # a common grid spanning both sources
    ts = [p.timestamp for p in points] + [f.ts for f in flows]
    start = math.floor(min(ts) / cfg.interval) * cfg.interval
    end = start + (math.floor((max(ts) - start) / cfg.interval) + 1) * cfg.interval
    a = pl.resample_points(points, cfg.interval, start, end)
    b = pl.resample_flows(flows, node_map, cfg.interval, payload=True, start=start, end=end)
    return a.merge(b)


def cmd_ingest(cfg: RunConfig, args) -> int:
    out = cfg.out
    series = load_series(cfg)
    if args.apply_schema:
        # encode a further stream with a frozen schema, e.g. for monitoring
        schema = pl.FeatureSchema.load(args.apply_schema)
        w = pl.make_windows(pl.transform(series, schema), cfg.window, series.times)
        atomic_write_bytes(out / f"{args.name}.npz", windows_bytes(w))
        logger.info("encoded %d windows into %s", len(w), out / f"{args.name}.npz")
        return EXIT_OK
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        split, schema = pl.build_dataset(series, cfg.window, cfg.fractions, cfg.exogenous)
    for w in caught:
        logger.warning("%s", w.message)
    manifest = {"modality": cfg.modality, "interval": cfg.interval, "window": cfg.window,
                "splits": {}}
    for name in SPLITS:
        data = windows_bytes(getattr(split, name))
        atomic_write_bytes(out / f"{name}.npz", data)
        manifest["splits"][name] = _split_entry(getattr(split, name), data, name)
    schema_text = json.dumps(schema.to_json(), indent=2, sort_keys=True) + "\n"
    atomic_write_text(out / "schema.json", schema_text)
    manifest["schema_sha256"] = sha256_bytes(schema_text.encode())
    atomic_write_json(out / "manifest.json", manifest)
    logger.info("windows train=%d calibration=%d test=%d", len(split.train),
                len(split.calibration), len(split.test))
    return EXIT_OK


def _load_schema(out: Path) -> pl.FeatureSchema:
    try:
        return pl.FeatureSchema.load(out / "schema.json")
    except FileNotFoundError:
        raise pl.DataError(f"missing {out / 'schema.json'}; run ingest first") from None


def cmd_train(cfg: RunConfig, args) -> int:
    out = cfg.out
    manifest = read_manifest(out)
    assert_precedes(manifest, "train", "calibration")
    schema = _load_schema(out)
    tr = read_split(out, "train", manifest)
    val = read_split(out, "calibration", manifest)
    prior = None
    if cfg.prior:
        prior = ex.CausalGroundTruth.load(cfg.prior).prior_adjacency(schema.nodes)
    mcfg = ModelConfig(n_entities=len(schema.nodes), n_features=schema.n_features,
                       window=cfg.window, embed_dim=cfg.embed_dim,
                       temporal_heads=cfg.temporal_heads, spatial_heads=cfg.spatial_heads,
                       top_k=min(cfg.top_k, len(schema.nodes)), has_prior=prior is not None)
    params = init_params(mcfg, seed=cfg.seed, prior=prior)
    params, report = train(params, tr, schema, cfg.train_config(), validation=val)
    save_checkpoint(params, out / "checkpoint.bin")
    rep = report.to_json()
    rep.pop("wall_clock")   # keeps the report byte-identical across reruns
    atomic_write_json(out / "train_report.json", rep)
    logger.info("trained %d epochs in %.1f s; best epoch %d", len(report.epoch_losses),
                report.wall_clock, report.best_epoch)
    return EXIT_OK


def _load_model(out: Path):
    try:
        return load_checkpoint(out / "checkpoint.bin")
    except FileNotFoundError:
        raise pl.DataError(f"missing {out / 'checkpoint.bin'}; run train first") from None


def _gammas(cfg: RunConfig) -> tuple[float, float]:
    return cfg.gamma_cont, cfg.gamma_bool


def _finite_scores(s: det.ScoreSeries) -> det.ScoreSeries:
    if not np.isfinite(s.scores).all():
        raise NumericError("non-finite anomaly scores")
    return s


def cmd_calibrate(cfg: RunConfig, args) -> int:
    out = cfg.out
    manifest = read_manifest(out)
    assert_precedes(manifest, "train", "calibration")
    schema = _load_schema(out)
    params = _load_model(out)
    cal_w = read_split(out, "calibration", manifest)
    s = _finite_scores(det.score_windows(params, cal_w, schema, *_gammas(cfg)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", det.UnattainableAlphaWarning)
        cal = det.calibrate(det.diff_nonconformity(s.scores), cfg.alpha)
    for w in caught:
        logger.warning("%s", w.message)
    doc = cal.to_json()
    doc["last_score"] = float(s.scores[-1])
    atomic_write_json(out / "calibration.json", doc)
    logger.info("alpha=%g threshold=%s (rank %d of %d)", cal.alpha, doc["threshold"], cal.rank,
                len(cal.scores))
    return EXIT_OK


def _load_calibration(path: Path) -> tuple[det.ConformalCalibration, float | None]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise pl.DataError(f"missing {path}; run calibrate first") from None
    return det.ConformalCalibration.from_json(doc), doc.get("last_score")


def _stream(cfg: RunConfig, args, manifest: dict | None) -> tuple[pl.WindowSet, bool]:
    """The windows to score: a named split (hash-checked) or an external archive."""
    if args.stream in SPLITS:
        if manifest is None:
            manifest = read_manifest(cfg.out)
        assert_precedes(manifest, "calibration", "test")
        return read_split(cfg.out, args.stream, manifest), args.stream == "test"
    return read_windows(Path(args.stream)), False


def _stages(cfg: RunConfig) -> dict[str, str]:
    path = cfg.input_path("ground_truth", "ground_truth.json")
    return ex.CausalGroundTruth.load(path).stage_of if path.exists() else {}


def cmd_detect(cfg: RunConfig, args) -> int:
    out = cfg.out
    schema = _load_schema(out)
    params = _load_model(out)
    cal, last = _load_calibration(out / "calibration.json")
    if not cal.attainable:
        logger.warning("alpha=%g is unattainable with %d calibration scores: threshold is +inf, "
                       "no alarms can be raised", cal.alpha, len(cal.scores))
    windows, contiguous = _stream(cfg, args, None)
    s = _finite_scores(det.score_windows(params, windows, schema, *_gammas(cfg)))
    alarms = det.detect(s, cal, previous_score=last if contiguous else None)
    stages = _stages(cfg)
    # explanation graphs go to a staging directory that replaces the old one at the end
    graphs = out / "graphs"
    staging = Path(tempfile.mkdtemp(dir=out, prefix=".graphs."))
    try:
        frozen = params.freeze()
        for a in alarms:
            fw = forward(windows.x[a.window_id:a.window_id + 1], frozen)
            g = ex.explain_window(fw.similarity[0], fw.attention[0], schema.nodes,
                                  [e for e, _ in a.top3], stages)
            ex.save_graph(g, staging / f"alarm_{a.window_id:06d}.dot", "dot")
            ex.save_graph(g, staging / f"alarm_{a.window_id:06d}.json", "json")
        if graphs.exists():
            shutil.rmtree(graphs)
        os.replace(staging, graphs)
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    atomic_write_bytes(out / "scores.npz", arrays_bytes(
        times=s.times, scores=s.scores, entity_errors=s.entity_errors, window_ids=s.window_ids))
    atomic_write_jsonl(out / "alarms.jsonl", [a.to_json() for a in alarms])
    atomic_write_json(out / "detect_summary.json", {
        "stream": args.stream, "n_windows": len(s), "n_alarms": len(alarms),
        "alpha": cal.alpha, "threshold": None if math.isinf(cal.threshold) else cal.threshold,
        "attainable": cal.attainable})
    logger.info("%d alarms over %d windows", len(alarms), len(s))
    return EXIT_OK


def _metrics_row(name: str, threshold, m: det.MetricsReport) -> dict:
    return {"method": name, "threshold": threshold, "F1": m.F1, "precision": m.precision,
            "recall": m.recall, "FPR": m.FPR, "AD": m.attacks_detected,
            "n_attacks": m.n_attacks}


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = cfg.out
    labels_path = cfg.input_path("labels", "labels.csv")
    try:
        attacks = det.read_labels_csv(labels_path)
    except FileNotFoundError:
        raise pl.DataError(f"missing labels file {labels_path}") from None
    try:
        alarms = [det.AlarmEvent.from_json(d) for d in read_jsonl(out / "alarms.jsonl")]
        sc = load_arrays(out / "scores.npz")
    except FileNotFoundError as e:
        raise pl.DataError(f"missing {e.filename}; run detect first") from None
    cal, _ = _load_calibration(out / "calibration.json")
    times = sc["times"]
    metrics = det.evaluate(alarms, attacks, times, cfg.tolerance)
    thr, _ = det.f1_max_threshold(sc["scores"], det.window_labels(times, attacks))
    s = det.ScoreSeries(sc["window_ids"], times, sc["scores"], sc["entity_errors"],
                        np.zeros((len(times), 0, 0)), _load_schema(out).nodes)
    best = det.evaluate(det.threshold_alarms(s, thr), attacks, times, cfg.tolerance)
    conformal_thr = None if math.isinf(cal.threshold) else cal.threshold
    comparison = [_metrics_row("conformal", conformal_thr, metrics),
                  _metrics_row("f1max", thr, best)]
    gt_path = cfg.input_path("ground_truth", "ground_truth.json")
    truth = ex.CausalGroundTruth.load(gt_path) if gt_path.exists() else None
    verdicts = []
    for a in alarms:
        try:
            with open(out / "graphs" / f"alarm_{a.window_id:06d}.json", encoding="utf-8") as fh:
                g = ex.ExplanationGraph.from_json(json.load(fh))
        except FileNotFoundError:
            raise pl.DataError(f"missing explanation graph for window {a.window_id}") from None
        v = ex.review_alarm(a, g, attacks, truth, cfg.tolerance)
        verdicts.append({"timestamp": a.timestamp, "window_id": a.window_id, **v.to_json()})
    summary = ex.verdict_summary([ex.CausalVerdict(**{k: d[k] for k in (
        "alarm_raised", "detection", "causality", "reasons", "attack_id")}) for d in verdicts])
    atomic_write_json(out / "metrics.json", metrics.to_json())
    atomic_write_json(out / "comparison.json", comparison)
    atomic_write_jsonl(out / "verdicts.jsonl", verdicts)
    atomic_write_json(out / "verdict_summary.json", summary)
    for row in comparison:
        logger.info("%-9s F1 %.3f FPR %.4f AD %d/%d", row["method"], row["F1"], row["FPR"],
                    row["AD"], row["n_attacks"])
    return EXIT_OK


def cmd_monitor(cfg: RunConfig, args) -> int:
    out = cfg.out
    schema = _load_schema(out)
    params = _load_model(out)
    cal, _ = _load_calibration(out / "calibration.json")
    if args.recalibrate_on:
        base = read_windows(Path(args.recalibrate_on))
        cal = det.recalibrate(params, base, schema, cfg.alpha, *_gammas(cfg))
        doc = cal.to_json()
        atomic_write_json(out / "recalibration.json", doc)
    windows, _ = _stream(cfg, args, None)
    s = _finite_scores(det.score_windows(params, windows, schema, *_gammas(cfg)))
    alarms = det.detect(s, cal)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        report = det.drift_monitor(alarms, len(s), cal.alpha, cfg.horizon, cfg.drift_factor)
    for msg in report.warnings:
        logger.warning("%s", msg)
    atomic_write_json(out / "drift.json", report.to_json())
    logger.info("overall FPR %.4f, drift %s", report.overall_fpr, report.drift)
    return EXIT_OK


COMMANDS = {
    "simulate": (cmd_simulate, "generate synthetic plant telemetry, labels and ground truth"),
    "ingest": (cmd_ingest, "resample, encode and split raw data into windows"),
    "train": (cmd_train, "train the forecaster on the training split"),
    "calibrate": (cmd_calibrate, "fit the conformal threshold on the calibration split"),
    "detect": (cmd_detect, "score a stream, raise alarms and export explanation graphs"),
    "evaluate": (cmd_evaluate, "metrics, threshold comparison and alarm verdicts"),
    "monitor": (cmd_monitor, "rolling false-positive rate and drift flag on normal data"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=None)
        else:
            kind = {"int": int, "float": float}.get(f.type, str)
            g.add_argument(flag, dest=f.name, type=kind, default=None, metavar=f.type.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stagnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="flat TOML run configuration")
        if name == "ingest":
            p.add_argument("--apply-schema", type=Path,
                           help="encode the whole input with this schema instead of splitting")
            p.add_argument("--name", default="stream",
                           help="archive name for --apply-schema output")
        if name in ("detect", "monitor"):
            p.add_argument("--stream", default="test",
                           help="split name or path to a window archive")
        if name == "monitor":
            p.add_argument("--recalibrate-on", help="window archive of a new normal baseline")
        _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    prog = f"stagnn {args.command}"
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "ingest" and args.apply_schema and not args.apply_schema.exists():
            raise pl.DataError(f"schema file not found: {args.apply_schema}")
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command][0](cfg, args)
    except UsageError as e:
        print(f"{prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"{prog}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pl.DataError, pl.SplitError, det.SchemaMismatch, ConfigError, SpecError,
            ValueError, KeyError, OSError) as e:
        msg = str(e).replace("\n", " ")
        print(f"{prog}: data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
