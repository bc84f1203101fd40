"""Config-driven experiments: node layouts, replicas, sweeps and CSV/JSON output."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .adversary import (
    JamMode,
    Jammer,
    JammerConfig,
    ReplayAttacker,
    SnifferObserver,
    enlargement_attack,
    sniffer_estimate,
)
from .channel import ChannelConfig, Position, delay_samples, free_space_gain, noise_power_for_snr
from .protocol import InitiatorNode, RangingConfig, ReflectorNode, ReflectorOutcome, request_pattern, run_session
from .sequences import SharedKey

LAYOUTS = ("PAIR", "EQUIDISTANT", "RANDOM_DISC")
MIN_DISC_DISTANCE = 1.0
DEFAULT_SESSION_TARGET = 1e-3
SESSION_COLUMNS = ("scenario_id", "replica", "reflector_id", "true_distance_m", "est_distance_m",
                   "error_m", "failed", "n_responses_received")
AGGREGATE_COLUMNS = ("axis_value", "mae_m", "failure_rate", "ci95_m")
ADVERSARY_TYPES = ("jammer", "replay", "sniffer")


class ScenarioValidationError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid scenario config:\n" + "\n".join(f"  - {v}" for v in self.violations))


@dataclass(frozen=True)
class ScenarioConfig:
    layout: str = "PAIR"
    n_reflectors: int = 1
    distance: float = 10.0
    sample_rate: float = 100e6
    bandwidth: Optional[float] = None
    carrier: float = 2.45e9
    sequence_length: int = 512
    alpha: float = 50.0
    l0: int = 256
    batch_size: int = 10
    window: Optional[int] = None
    session_duration_target: Optional[float] = None
    epoch_duration: float = 1.0
    tof_max: float = 1e-6
    hw_latency: float = 0.0
    snr_db: Optional[float] = 20.0
    noise_power: Optional[float] = None
    reference_distance: Optional[float] = None
    sic: bool = True
    interpolation: bool = True
    duplicate_check: bool = True
    channel_passband: float = 2 / 3
    adversary: Optional[dict] = None
    replicas: int = 10
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.layout not in LAYOUTS:
            out.append(f"layout must be one of {', '.join(LAYOUTS)}")
        if self.layout == "PAIR" and self.n_reflectors != 1:
            out.append("PAIR layout needs n_reflectors = 1")
        if self.n_reflectors < 1:
            out.append("n_reflectors must be >= 1")
        if not self.distance > 0:
            out.append("distance must be > 0")
        if self.layout == "RANDOM_DISC" and self.distance <= MIN_DISC_DISTANCE:
            out.append(f"RANDOM_DISC radius must exceed {MIN_DISC_DISTANCE} m")
        if not self.sample_rate > 0:
            out.append("sample_rate must be > 0")
        b = self.effective_bandwidth
        if not b > 0:
            out.append("bandwidth must be > 0")
        elif self.sample_rate > 0:
            if b > self.sample_rate:
                out.append("bandwidth must not exceed sample_rate")
            elif abs(self.sample_rate / b - round(self.sample_rate / b)) > 1e-9:
                out.append("sample_rate / bandwidth must be an integer")
        for name in ("carrier", "epoch_duration", "tof_max"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0")
        for name in ("sequence_length", "l0", "batch_size", "replicas"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.alpha < 1:
            out.append("alpha must be >= 1")
        if self.hw_latency < 0:
            out.append("hw_latency must be >= 0")
        if self.window is not None and self.window < 1:
            out.append("window must be >= 1")
        if self.session_duration_target is not None and not self.session_duration_target > 0:
            out.append("session_duration_target must be > 0")
        if (self.snr_db is None) == (self.noise_power is None):
            out.append("give exactly one of snr_db and noise_power")
        if self.noise_power is not None and self.noise_power < 0:
            out.append("noise_power must be >= 0")
        if self.reference_distance is not None and not self.reference_distance > 0:
            out.append("reference_distance must be > 0")
        if not 0 < self.channel_passband <= 1:
            out.append("channel_passband must lie in (0, 1]")
        if self.seed < 0:
            out.append("seed must be >= 0")
        out += _adversary_violations(self.adversary)
        if not out:
            w = self.effective_window
            T = 1 / self.sample_rate
            t_resp = self.sequence_length * self.upsample_factor * T
            if w < 1:
                out.append("session_duration_target too short for one response per batch slot")
            elif self.session_duration_target is not None and \
                    self.batch_size * (w * T + t_resp) > self.session_duration_target * (1 + 1e-9):
                out.append("batch_size * (window * T + T_RESP) exceeds session_duration_target")
            else:
                try:
                    self.ranging_config()
                except ValueError as e:
                    out.append(str(e))
        return out

    def validate(self) -> "ScenarioConfig":
        v = self.violations()
        if v:
            raise ScenarioValidationError(v)
        return self

    @property
    def effective_bandwidth(self) -> float:
        return self.sample_rate if self.bandwidth is None else self.bandwidth

    @property
    def upsample_factor(self) -> int:
        return int(round(self.sample_rate / self.effective_bandwidth))

    @property
    def effective_window(self) -> int:
        """Waiting window in samples, derived from the session target when not given."""
        if self.window is not None:
            return self.window
        target = self.session_duration_target or DEFAULT_SESSION_TARGET
        T = 1 / self.sample_rate
        t_resp = self.sequence_length * self.upsample_factor * T
        return int(math.floor((target / self.batch_size - t_resp) / T + 1e-9))

    def ranging_config(self) -> RangingConfig:
        return RangingConfig(
            sequence_length=self.sequence_length, alpha=self.alpha, l0=self.l0, window=self.effective_window,
            batch_size=self.batch_size, sample_rate=self.sample_rate, bandwidth=self.effective_bandwidth,
            tof_max=self.tof_max, hw_latency=self.hw_latency, epoch_duration=self.epoch_duration,
            sic=self.sic, interpolation=self.interpolation, duplicate_check=self.duplicate_check)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ScenarioValidationError(["config must be a JSON object"])
        known = {f.name: f for f in dataclasses.fields(cls)}
        problems = [f"unknown field {k!r}" for k in data if k not in known]
        for k, v in data.items():
            if k in known and not _type_ok(known[k].type, v):
                problems.append(f"field {k!r} has wrong type {type(v).__name__}")
        if problems:
            raise ScenarioValidationError(problems)
        return cls(**data).validate()

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e.strerror}") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ScenarioValidationError([f"{path}: not valid JSON ({e.msg} at line {e.lineno})"]) from e
        return cls.from_dict(data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _type_ok(annotation: str, value: Any) -> bool:
    optional = annotation.startswith("Optional[")
    base = annotation[9:-1] if optional else annotation
    if value is None:
        return optional
    if base == "bool":
        return isinstance(value, bool)
    if base == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if base == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if base == "str":
        return isinstance(value, str)
    if base == "dict":
        return isinstance(value, dict)
    return True


_ADVERSARY_FIELDS = {
    "jammer": {"type", "mode", "power", "position", "duty_cycle", "pulse_length"},
    "replay": {"type", "record_length", "position", "replay_delay", "jam_power", "target_index", "responses"},
    "sniffer": {"type", "position", "waiting_known", "assumption"},
}


def _adversary_violations(spec: Optional[dict]) -> list[str]:
    if spec is None:
        return []
    kind = spec.get("type")
    if kind not in ADVERSARY_TYPES:
        return [f"adversary.type must be one of {', '.join(ADVERSARY_TYPES)}"]
    out = [f"unknown adversary field {k!r}" for k in spec if k not in _ADVERSARY_FIELDS[kind]]
    pos = spec.get("position")
    if not (isinstance(pos, list) and len(pos) in (2, 3) and all(isinstance(v, (int, float)) for v in pos)):
        out.append("adversary.position must be [x, y] or [x, y, z]")
    if kind == "jammer" and spec.get("mode", "continuous") not in ("continuous", "intermittent"):
        out.append("adversary.mode must be continuous or intermittent")
    if kind == "replay" and not (isinstance(spec.get("record_length"), int) and spec["record_length"] >= 1):
        out.append("adversary.record_length must be an integer >= 1")
    if kind == "sniffer" and spec.get("assumption", "colocated") not in ("colocated", "midpoint"):
        out.append("adversary.assumption must be colocated or midpoint")
    return out


def reference_noise_power(cfg: ScenarioConfig) -> float:
    """Noise power giving ``snr_db`` for one response received at the reference distance."""
    if cfg.noise_power is not None:
        return cfg.noise_power
    rc = cfg.ranging_config()
    probe = request_pattern(SharedKey(bytes(32)), 0, 0, rc)
    y, _ = delay_samples(probe.samples, 0.0, cfg.channel_passband)
    k = (y.size - probe.samples.size) // 2
    span_power = float(np.mean(np.abs(y[k:k + probe.samples.size]) ** 2))
    ref = cfg.reference_distance or cfg.distance
    return noise_power_for_snr(span_power * abs(free_space_gain(ref, cfg.carrier)) ** 2, cfg.snr_db)


def place_reflectors(cfg: ScenarioConfig, rng: np.random.Generator) -> list[Position]:
    if cfg.layout == "PAIR":
        return [Position(cfg.distance, 0.0)]
    theta = rng.uniform(0, 2 * np.pi, cfg.n_reflectors)
    if cfg.layout == "EQUIDISTANT":
        r = np.full(cfg.n_reflectors, cfg.distance)
    else:
        # uniform over the annulus MIN_DISC_DISTANCE <= r <= radius
        u = rng.uniform(0, 1, cfg.n_reflectors)
        r = np.sqrt(MIN_DISC_DISTANCE ** 2 + u * (cfg.distance ** 2 - MIN_DISC_DISTANCE ** 2))
    return [Position(float(a * np.cos(t)), float(a * np.sin(t))) for a, t in zip(r, theta)]


@dataclass
class ReplicaResult:
    replica: int
    outcomes: list[ReflectorOutcome]
    session_duration: float
    attack: Optional[dict] = None
    sniffer_errors: list[float] = field(default_factory=list)

    @property
    def failure_rate(self) -> float:
        return sum(o.failed for o in self.outcomes) / len(self.outcomes)

    @property
    def mae(self) -> Optional[float]:
        errs = [abs(o.error) for o in self.outcomes if not o.failed]
        return float(np.mean(errs)) if errs else None


@dataclass
class ScenarioReport:
    config: ScenarioConfig
    seed: int
    replicas: list[ReplicaResult]

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    @property
    def scenario_id(self) -> str:
        return f"{self.config_hash[:12]}-{self.seed}"

    def succeeded(self) -> list[ReflectorOutcome]:
        return [o for r in self.replicas for o in r.outcomes if not o.failed]

    @property
    def mae(self) -> Optional[float]:
        errs = [abs(o.error) for o in self.succeeded()]
        return float(np.mean(errs)) if errs else None

    @property
    def failure_rate(self) -> float:
        total = sum(len(r.outcomes) for r in self.replicas)
        failed = sum(o.failed for r in self.replicas for o in r.outcomes)
        return failed / total

    @property
    def ci95(self) -> Optional[float]:
        per = [r.mae for r in self.replicas if r.mae is not None]
        if len(per) < 2:
            return None
        return 1.96 * statistics.stdev(per) / math.sqrt(len(per))

    def error_table(self) -> list[tuple[int, int, float, Optional[float], Optional[float], bool, int]]:
        return [(r.replica, o.reflector_id, o.true_distance, o.estimate, o.error, o.failed, o.n_received)
                for r in self.replicas for o in r.outcomes]


def _build_adversary(spec: Optional[dict], seed: int):
    if spec is None:
        return None
    pos = Position(*spec["position"])
    kind = spec["type"]
    if kind == "jammer":
        return Jammer(JammerConfig(JamMode(spec.get("mode", "continuous")), spec.get("power", 1.0), pos,
                                   spec.get("duty_cycle", 1.0), spec.get("pulse_length", 512), seed))
    if kind == "replay":
        return ReplayAttacker(spec["record_length"], pos, target=-1, replay_delay=spec.get("replay_delay", 0),
                              jam_power=spec.get("jam_power", 1.0),
                              responses=tuple(spec.get("responses", [0])), seed=seed)
    return SnifferObserver(pos)


def run_replica(cfg: ScenarioConfig, replica: int, seed_seq: np.random.SeedSequence) -> ReplicaResult:
    """One independent session; all randomness comes from ``seed_seq``."""
    layout_seq, key_seq, session_seq, adv_seq = seed_seq.spawn(4)
    rc = cfg.ranging_config()
    key = SharedKey(np.random.default_rng(key_seq).bytes(32))
    positions = place_reflectors(cfg, np.random.default_rng(layout_seq))
    epoch = replica + 1
    ini = InitiatorNode(0, Position(0.0, 0.0), key, rc)
    refl = [ReflectorNode(k + 1, p, current_epoch=epoch) for k, p in enumerate(positions)]
    channel = ChannelConfig(sample_rate=cfg.sample_rate, carrier=cfg.carrier,
                            noise_power=reference_noise_power(cfg), passband=cfg.channel_passband)
    rng = np.random.default_rng(session_seq)
    adv = _build_adversary(cfg.adversary, int(adv_seq.generate_state(1)[0]))

    if isinstance(adv, ReplayAttacker):
        idx = cfg.adversary.get("target_index", 0)
        adv.target = refl[idx % len(refl)].id
        attack = enlargement_attack(adv, ini, refl, channel, epoch, rng)
        result = attack.result
        summary = {"x_detected": attack.x_detected, "y_detected": attack.y_detected,
                   "enlarged_accepted": attack.enlarged_accepted}
        return ReplicaResult(replica, list(result.outcomes.values()), result.session_duration, summary)
    result = run_session(ini, refl, channel, epoch, [adv] if isinstance(adv, Jammer) else [], rng)
    sniff = []
    if isinstance(adv, SnifferObserver):
        est = sniffer_estimate(adv, result, rc.window, waiting_known=cfg.adversary.get("waiting_known", False),
                               assumption=cfg.adversary.get("assumption", "colocated"))
        sniff = [e.error for e in est]
    return ReplicaResult(replica, list(result.outcomes.values()), result.session_duration, None, sniff)


def worker_count() -> int:
    env = os.environ.get("RANGESIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"RANGESIM_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _run_indexed(args):
    cfg, i, seq = args
    return run_replica(cfg, i, seq)


def run_scenario(cfg: ScenarioConfig, seed: Optional[int] = None, workers: Optional[int] = None) -> ScenarioReport:
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    seqs = np.random.SeedSequence(seed).spawn(cfg.replicas)
    jobs = [(cfg, i, s) for i, s in enumerate(seqs)]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        results = [_run_indexed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_indexed, jobs))
    return ScenarioReport(cfg, seed, results)


SWEEPABLE = tuple(f.name for f in dataclasses.fields(ScenarioConfig)
                  if f.name not in ("layout", "adversary", "seed", "replicas"))


def sweep_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def sweep(base: ScenarioConfig, axis: str, values: Sequence, workers: Optional[int] = None) -> list[ScenarioReport]:
    if axis not in SWEEPABLE:
        raise ScenarioValidationError([f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEPABLE)}"])
    cfgs = []
    problems = []
    for i, v in enumerate(values):
        c = dataclasses.replace(base, **{axis: v}, seed=sweep_seed(base.seed, i))
        problems += [f"{axis}={v}: {p}" for p in c.violations()]
        cfgs.append(c)
    if problems:
        raise ScenarioValidationError(problems)
    return [run_scenario(c, workers=workers) for c in cfgs]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def session_rows(report: ScenarioReport) -> list[list[str]]:
    return [[report.scenario_id, _fmt(rep), _fmt(rid), _fmt(true_d), _fmt(est), _fmt(err), _fmt(failed), _fmt(n)]
            for rep, rid, true_d, est, err, failed, n in report.error_table()]


def aggregate_row(report: ScenarioReport, axis_value=None) -> list[str]:
    return [_fmt(axis_value), _fmt(report.mae), _fmt(report.failure_rate), _fmt(report.ci95)]


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    try:
        path.write_text(buf.getvalue())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def emit_report(report: ScenarioReport | Sequence[ScenarioReport], path, *, axis: Optional[str] = None,
                values: Optional[Sequence] = None) -> dict[str, Path]:
    """Write sessions.csv, aggregate.csv and config.json into directory ``path``."""
    reports = [report] if isinstance(report, ScenarioReport) else list(report)
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror}") from e
    vals = list(values) if values is not None else [None] * len(reports)
    files = {"sessions": out / "sessions.csv", "aggregate": out / "aggregate.csv", "config": out / "config.json"}
    _write_csv(files["sessions"], SESSION_COLUMNS, [row for r in reports for row in session_rows(r)])
    _write_csv(files["aggregate"], AGGREGATE_COLUMNS, [aggregate_row(r, v) for r, v in zip(reports, vals)])
    side = {
        "config": reports[0].config.to_dict() if axis is None else None,
        "axis": axis,
        "points": [{"axis_value": v, "seed": r.seed, "config_hash": r.config_hash, "config": r.config.to_dict()}
                   for r, v in zip(reports, vals)],
    }
    if axis is None:
        side["seed"] = reports[0].seed
        side["config_hash"] = reports[0].config_hash
    try:
        files["config"].write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {files['config']}: {e.strerror}") from e
    return files
