"""Experiment configuration, reproduction recipes, reports and the command line.

Every experiment is a closed preset (``table1``, ``table2``, ``fig5``, ``fig6``,
``fig7``) whose knobs can be changed through a flat ``section.key = value``
config file or ``--set section.key=value`` flags. Stochastic claims are judged
on medians over the configured seeds.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .efm import (
    EFM,
    PipelineArtifacts,
    PipelineConfig,
    efm_lookup,
    injective_feature_map,
    run_deepmod_pipeline,
)
from .features import FeatureMapWarning, NoiseAugmenter, StateFeatureMap, binarize, noisy_source
from .gridworld import (
    ACTIONS,
    DP_ARRIVAL,
    EPISODE_EVAL,
    FROZEN_LAKE,
    GridSpec,
    load_map,
    step,
    transitions,
)
from .learners import (
    REDUCED_HIDDEN,
    DDPNConfig,
    DQNConfig,
    TrainingTrace,
    ddpn_state_values,
    dqn_state_values,
    is_stochastic,
    one_hot_source,
    stabilization_iteration,
    train_ddpn,
    train_dqn,
)
from .nn import Activation, LayerSpec, backward_mse, dumps, forward, init_network
from .tabular import QLearningConfig, ValueTable, q_learning, state_values_from_q, value_iteration

log = logging.getLogger(__name__)

OUT_ENV = "DEEPMOD_OUT"
DEFAULT_OUT = "deepmod_out"
PRESETS = ("table1", "table2", "fig5", "fig6", "fig7")
SECTIONS = ("qlearning", "ddpn", "reduced", "dqn", "pipeline")

TOL_TABULAR = 0.15
TOL_CLEAN = 0.5
TOL_NOISY = 1.2
TOL_DQN_START = 1.0
STABLE_WINDOW = 50

_LABELS = "ABCDEFGHIJKLMNOP"


def _column(*values: float) -> dict[str, float]:
    return dict(zip(_LABELS, values))


# Published reference values for the built-in 4x4 lake, keyed by experiment and method.
REFERENCE = {
    "table1": {
        "qlearning": _column(
            5.31, 5.90, 6.56, 5.90, 5.90, -3.44, 7.29, -3.44, 6.561, 7.29, 8.1, -1.0, -2.71, 8.1, 9.0, 10.0
        ),
        "value_iteration": _column(
            5.31, 5.91, 6.56, 5.91, 5.91, -3.44, 7.29, -3.44, 6.561, 7.29, 8.01, -1.01, -2.71, 8.01, 8.99, 9.99
        ),
        "ddpn": _column(
            5.43, 5.74, 6.48, 5.72, 5.73, -3.46, 7.20, -3.50, 6.53, 7.22, 7.88, -1.13, -2.77, 7.92, 8.83, 9.85
        ),
        "reduced_ddpn": _column(
            5.31, 5.42, 6.11, 5.43, 5.47, -3.92, 6.99, -3.80, 6.24, 6.93, 7.74, -1.41, -3.10, 7.72, 8.60, 9.62
        ),
    },
    "table2": {
        "dqn": _column(
            5.35, 5.76, 6.45, 6.08, 5.63, -3.78, 7.44, -3.20, 6.54, 6.96, 7.63, -1.24, -2.87, 7.80, 9.07, 9.75
        ),
        "value_iteration": _column(
            5.31, 5.91, 6.56, 5.91, 5.91, -3.44, 7.29, -3.44, 6.561, 7.29, 8.01, -1.01, -2.71, 8.01, 8.99, 9.99
        ),
        "noisy_ddpn": _column(
            5.43, 6.26, 6.91, 5.97, 6.37, -2.52, 7.66, -3.12, 7.31, 7.77, 8.54, -0.32, -2.34, 8.93, 9.81, 10.49
        ),
        "reduced_ddpn": _column(
            5.31, 5.90, 6.56, 5.90, 5.90, -3.44, 7.29, -3.44, 6.561, 7.29, 8.099, -1.00, -2.709, 8.09, 8.99, 9.99
        ),
        "deepmod_ddpn": _column(
            5.60, 6.65, 6.87, 6.59, 6.07, -3.49, 7.54, -3.50, 6.96, 7.87, 8.64, -0.76, -2.45, 8.48, 9.39, 10.3
        ),
    },
}

TABLE1_METHODS = ("qlearning", "value_iteration", "ddpn", "reduced_ddpn")
TABLE2_METHODS = ("dqn", "value_iteration", "noisy_ddpn", "reduced_ddpn", "deepmod_ddpn")
CURVE_METHODS = {
    "fig5": ("noisy_ddpn", "reduced_ddpn"),
    "fig6": ("ddpn", "reduced_ddpn"),
    "fig7": ("ddpn1", "deepmod_ddpn"),
}


# ---------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    name: str = "table1"
    env: str = "builtin"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = ""
    n_noise: int = 20
    value_samples: int = 20
    qlearning: QLearningConfig = field(default_factory=QLearningConfig)
    ddpn: DDPNConfig = field(default_factory=DDPNConfig)
    reduced: DDPNConfig = field(default_factory=lambda: DDPNConfig(hidden=REDUCED_HIDDEN))
    dqn: DQNConfig = field(default_factory=DQNConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        if self.name not in PRESETS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {', '.join(PRESETS)}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.n_noise < 0 or self.value_samples < 1:
            raise ValueError("n_noise must be >= 0 and value_samples >= 1")

    def grid(self) -> GridSpec:
        return FROZEN_LAKE if self.env == "builtin" else load_map(self.env)

    def output_root(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def preset(name: str) -> ExperimentConfig:
    return ExperimentConfig(name=name)


def _parse_hidden(text: str) -> tuple:
    out = []
    for item in text.split(","):
        width, act = item.strip().split(":")
        out.append((int(width), Activation(act.strip()).value))
    return tuple(out)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{w}:{a}" for w, a in value)
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, text: str, current):
    text = text.strip()
    if name == "hidden":
        return _parse_hidden(text)
    if name == "seeds":
        return tuple(int(t) for t in text.split(",") if t.strip())
    if isinstance(current, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def set_option(config: ExperimentConfig, key: str, text: str) -> ExperimentConfig:
    """Return a copy of ``config`` with ``section.key`` set from its text form."""
    section, _, name = key.strip().partition(".")
    if not name:
        raise ValueError(f"config key {key!r} needs a section prefix")
    if section == "experiment":
        target = config
    elif section in SECTIONS:
        target = getattr(config, section)
    else:
        raise ValueError(f"unknown config section {section!r}")
    known = {f.name for f in fields(target) if not f.name.startswith("_")}
    if section == "experiment":
        known -= set(SECTIONS)
    if name not in known:
        raise ValueError(f"unknown config key {key!r}")
    value = _coerce(name, text, getattr(target, name))
    if section == "experiment":
        return replace(config, **{name: value})
    return replace(config, **{section: replace(target, **{name: value})})


def parse_config_text(text: str) -> list[tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(
    name: str, path: str | Path | None = None, overrides: Sequence[str] = ()
) -> ExperimentConfig:
    """Preset ``name``, then the config file, then ``key=value`` overrides."""
    config = preset(name)
    pairs = parse_config_text(Path(path).read_text()) if path else []
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        pairs.append((key, value))
    for key, value in pairs:
        if key.strip() == "experiment.name":
            raise ValueError("experiment.name is fixed by the subcommand")
        config = set_option(config, key, value)
    return config


def config_to_text(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(config):
        if f.name not in SECTIONS:
            lines.append(f"experiment.{f.name} = {_format_value(getattr(config, f.name))}")
    for section in SECTIONS:
        sub = getattr(config, section)
        for f in fields(sub):
            if not f.name.startswith("_"):
                lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- reports


@dataclass
class Check:
    """One verdict. ``kind="max"`` passes when measured <= bound, ``"min"`` when >=."""

    name: str
    passed: bool
    measured: float
    bound: float
    kind: str = "max"
    detail: str = ""

    def line(self) -> str:
        op = "<=" if self.kind == "max" else ">="
        tail = f" ({self.detail})" if self.detail else ""
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.measured:.4g} {op} {self.bound:g}{tail}"


def check_max(name: str, measured: float, bound: float, detail: str = "") -> Check:
    measured = float(measured)
    return Check(name, bool(np.isfinite(measured) and measured <= bound), measured, bound, "max", detail)


def check_min(name: str, measured: float, bound: float, detail: str = "") -> Check:
    measured = float(measured)
    return Check(name, bool(np.isfinite(measured) and measured >= bound), measured, bound, "min", detail)


@dataclass
class MethodRun:
    values: ValueTable
    trace: TrainingTrace | None = None
    seconds: float = 0.0
    artifacts: PipelineArtifacts | None = None


@dataclass
class RunReport:
    experiment: str
    spec: GridSpec
    seeds: tuple[int, ...]
    methods: tuple[str, ...]
    runs: dict[int, dict[str, MethodRun]] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    reference_method: str = "value_iteration"
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def column(self, method: str) -> np.ndarray:
        """Median over seeds of one method's state values."""
        cols = [self.runs[s][method].values.v for s in self.seeds if method in self.runs[s]]
        return np.median(np.stack(cols), axis=0)

    def traces(self, method: str) -> dict[int, TrainingTrace]:
        return {s: self.runs[s][method].trace for s in self.seeds if self.runs[s].get(method) and self.runs[s][method].trace}

    def timings(self, method: str) -> list[float]:
        return [self.runs[s][method].seconds for s in self.seeds if method in self.runs[s]]

    def values_csv(self) -> str:
        present = [m for m in self.methods if all(m in self.runs[s] for s in self.seeds)]
        cols = {m: self.column(m) for m in present}
        deltas = [m for m in present if m != self.reference_method and self.reference_method in cols]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state_label", *present, *[f"delta_{m}" for m in deltas]])
        for s in self.spec.states:
            row = [self.spec.label(s)]
            row += [f"{cols[m][s]:.6f}" for m in present]
            row += [f"{cols[m][s] - cols[self.reference_method][s]:.6f}" for m in deltas]
            w.writerow(row)
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "seed", "seconds"])
        for s in self.seeds:
            for m in self.methods:
                if m in self.runs[s]:
                    w.writerow([m, s, f"{self.runs[s][m].seconds:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"experiment {self.experiment}, seeds {','.join(map(str, self.seeds))}"]
        lines += [c.line() for c in self.checks]
        lines.append(f"{len(self.checks) - len(self.failures())}/{len(self.checks)} checks passed")
        return "\n".join(lines) + "\n"

    def write(self, out: Path) -> list[Path]:
        """Values, traces and the report; timings go to their own file."""
        out.mkdir(parents=True, exist_ok=True)
        written = []

        def emit(name: str, text: str):
            path = out / name
            path.write_text(text)
            written.append(path)

        if any(m in self.runs[s] for s in self.seeds for m in self.methods):
            emit(f"values_{self.experiment}.csv", self.values_csv())
        for m in self.methods:
            for seed, trace in self.traces(m).items():
                emit(f"trace_{m}_{seed}.csv", trace.to_csv(timings=False))
        emit(f"timing_{self.experiment}.csv", self.timing_csv())
        emit(f"report_{self.experiment}.txt", self.summary())
        return written


# ---------------------------------------------------------------- runs


def _mean_values(net, source, spec: GridSpec, samples: int) -> ValueTable:
    if not is_stochastic(source):
        return ddpn_state_values(net, source, spec)
    return ValueTable(spec, np.mean([ddpn_state_values(net, source, spec).v for _ in range(samples)], axis=0))


def _noise_seed(seed: int, offset: int = 0) -> int:
    return 10_000 + 100 * seed + offset


def _feature_map(net, spec: GridSpec, config: ExperimentConfig, n_noise: int, seed: int) -> StateFeatureMap:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FeatureMapWarning)
        return injective_feature_map(
            net,
            spec,
            n_noise,
            _noise_seed(seed, 50),
            config.pipeline.extract_attempts,
            config.pipeline.layer_index,
        )


def clean_runs(spec: GridSpec, config: ExperimentConfig, seed: int, methods: Iterable[str]) -> dict[str, MethodRun]:
    """Noise-free methods for one seed: tabular Q, VI, DDPN and reduced DDPN."""
    methods = set(methods)
    out: dict[str, MethodRun] = {}
    gamma = config.ddpn.gamma
    t0 = time.perf_counter()
    out["value_iteration"] = MethodRun(value_iteration(spec, DP_ARRIVAL, gamma), None, time.perf_counter() - t0)
    if "qlearning" in methods:
        t0 = time.perf_counter()
        qt = q_learning(spec, DP_ARRIVAL, replace(config.qlearning, rng_seed=seed))
        out["qlearning"] = MethodRun(state_values_from_q(spec, qt), None, time.perf_counter() - t0)
    if methods & {"ddpn", "reduced_ddpn"}:
        src = one_hot_source(spec)
        net, trace = train_ddpn(spec, replace(config.ddpn, seed=seed), src, method="ddpn")
        out["ddpn"] = MethodRun(ddpn_state_values(net, src, spec), trace, trace.seconds)
        if "reduced_ddpn" in methods:
            fmap = _feature_map(net, spec, config, 0, seed)
            rnet, rtrace = train_ddpn(spec, replace(config.reduced, seed=seed), fmap.source(), method="reduced_ddpn")
            out["reduced_ddpn"] = MethodRun(ddpn_state_values(rnet, fmap.source(), spec), rtrace, rtrace.seconds)
    return out


def noisy_runs(spec: GridSpec, config: ExperimentConfig, seed: int, methods: Iterable[str]) -> dict[str, MethodRun]:
    """Noisy-input methods for one seed: DQN, noisy DDPN, reduced DDPN, full pipeline."""
    methods = set(methods)
    n = config.n_noise
    out: dict[str, MethodRun] = {}
    t0 = time.perf_counter()
    out["value_iteration"] = MethodRun(value_iteration(spec, DP_ARRIVAL, config.ddpn.gamma), None, time.perf_counter() - t0)
    if "dqn" in methods:
        src = noisy_source(spec, NoiseAugmenter(n, _noise_seed(seed, 1)))
        net, trace = train_dqn(spec, replace(config.dqn, seed=seed), src)
        values = dqn_state_values(net, src, spec, config.value_samples)
        out["dqn"] = MethodRun(values, trace, trace.seconds)
    if methods & {"noisy_ddpn", "reduced_ddpn"}:
        src = noisy_source(spec, NoiseAugmenter(n, _noise_seed(seed, 2)))
        net, trace = train_ddpn(spec, replace(config.ddpn, seed=seed), src, method="noisy_ddpn")
        out["noisy_ddpn"] = MethodRun(_mean_values(net, src, spec, config.value_samples), trace, trace.seconds)
        if "reduced_ddpn" in methods:
            fmap = _feature_map(net, spec, config, n, seed)
            rnet, rtrace = train_ddpn(spec, replace(config.reduced, seed=seed), fmap.source(), method="reduced_ddpn")
            out["reduced_ddpn"] = MethodRun(ddpn_state_values(rnet, fmap.source(), spec), rtrace, rtrace.seconds)
    if methods & {"deepmod_ddpn", "ddpn1"}:
        art = run_pipeline(spec, config, seed, noisy=True)
        out["ddpn1"] = MethodRun(art.step1_values, art.traces["ddpn1"], art.traces["ddpn1"].seconds)
        out["deepmod_ddpn"] = MethodRun(art.ddpn2_values, art.traces["ddpn2"], art.traces["ddpn2"].seconds, art)
    return out


def run_pipeline(spec: GridSpec, config: ExperimentConfig, seed: int, noisy: bool = True, use_dqn: bool | None = None):
    pcfg = replace(config.pipeline, noisy=noisy, master_seed=seed, n_noise=config.n_noise)
    if use_dqn is not None:
        pcfg = replace(pcfg, use_dqn=use_dqn)
    return run_deepmod_pipeline(spec, pcfg)


def _collect(config: ExperimentConfig, kind: str, methods: Sequence[str]) -> dict[int, dict[str, MethodRun]]:
    spec = config.grid()
    runner = clean_runs if kind == "clean" else noisy_runs
    runs = {}
    for seed in config.seeds:
        log.info("%s runs, seed %d", kind, seed)
        runs[seed] = runner(spec, config, seed, methods)
    return runs


# ---------------------------------------------------------------- checks


def _ref(experiment: str, method: str, spec: GridSpec) -> np.ndarray:
    col = REFERENCE[experiment][method]
    return np.array([col[spec.label(s)] for s in spec.states])


def _uses_reference_grid(spec: GridSpec) -> bool:
    return spec == FROZEN_LAKE


def sign_violations(spec: GridSpec, v: np.ndarray) -> int:
    """States whose sign disagrees with hole membership, plus one if the goal is not the maximum."""
    v = np.asarray(v, dtype=float)
    holes = np.array([s in spec.holes for s in spec.states])
    bad = int(np.sum((v < 0) != holes))
    return bad + int(np.argmax(v) != spec.goal)


def final_test_fraction(trace: TrainingTrace, target: float = 4.0, window: int | None = STABLE_WINDOW) -> float:
    rewards = trace.rewards("test")
    if window:
        rewards = rewards[-window:]
    return float(np.mean(np.isclose(rewards, target))) if len(rewards) else float("nan")


def efm_oracle_mismatches(efm: EFM, fmap: StateFeatureMap) -> int:
    """Keys whose table entry differs from feature-map-after-true-step."""
    spec = fmap.spec
    bad = 0
    for s, a, s2 in transitions(spec):
        expected = (fmap[s2], step(spec, DP_ARRIVAL, s, a).reward)
        try:
            bad += efm_lookup(efm, fmap[s], a) != expected
        except KeyError:
            bad += 1
    return int(bad)


def _value_check(report: RunReport, name: str, method: str, target: np.ndarray, tol: float) -> Check:
    delta = np.abs(report.column(method) - target)
    worst = int(np.argmax(delta))
    return check_max(name, float(delta.max()), tol, f"worst at {report.spec.label(worst)}")


def _test_check(report: RunReport, name: str, method: str, bound: float, window: int | None) -> Check:
    fracs = [final_test_fraction(t, window=window) for t in report.traces(method).values()]
    return check_min(name, min(fracs) if fracs else float("nan"), bound, "worst seed")


def table1_checks(report: RunReport) -> list[Check]:
    spec = report.spec
    vi = report.column("value_iteration")
    checks = []
    if _uses_reference_grid(spec):
        checks.append(_value_check(report, "value iteration vs reference", "value_iteration", _ref("table1", "value_iteration", spec), TOL_TABULAR))
        checks.append(_value_check(report, "q-learning vs reference", "qlearning", _ref("table1", "qlearning", spec), TOL_TABULAR))
    checks.append(_value_check(report, "q-learning vs value iteration", "qlearning", vi, TOL_TABULAR))
    checks.append(_value_check(report, "ddpn vs value iteration", "ddpn", vi, TOL_CLEAN))
    checks.append(_test_check(report, "ddpn final test rewards at 4.0", "ddpn", 1.0, STABLE_WINDOW))
    checks.append(_value_check(report, "reduced ddpn vs value iteration", "reduced_ddpn", vi, TOL_CLEAN))
    checks.append(_test_check(report, "reduced ddpn final test rewards at 4.0", "reduced_ddpn", 1.0, STABLE_WINDOW))
    secs = max(report.timings("value_iteration"))
    checks.append(check_max("value iteration seconds", secs, 1.0))
    return checks


def table2_checks(report: RunReport) -> list[Check]:
    spec = report.spec
    vi = report.column("value_iteration")
    checks = []
    if _uses_reference_grid(spec):
        ref_a = REFERENCE["table2"]["dqn"]["A"]
        checks.append(check_max("dqn start value vs reference", abs(report.column("dqn")[spec.start] - ref_a), TOL_DQN_START))
    for m in ("dqn", "noisy_ddpn", "reduced_ddpn", "deepmod_ddpn"):
        checks.append(check_max(f"{m} sign structure", sign_violations(spec, report.column(m)), 0))
    checks.append(_value_check(report, "noisy ddpn vs value iteration", "noisy_ddpn", vi, TOL_NOISY))
    checks.append(_value_check(report, "reduced ddpn vs value iteration", "reduced_ddpn", vi, TOL_CLEAN))
    checks.append(_test_check(report, "reduced ddpn test rewards at 4.0", "reduced_ddpn", 0.95, None))
    checks.append(_value_check(report, "deepmod ddpn vs value iteration", "deepmod_ddpn", vi, TOL_NOISY))
    checks.append(_test_check(report, "deepmod ddpn final test rewards at 4.0", "deepmod_ddpn", 1.0, STABLE_WINDOW))
    arts = [report.runs[s]["deepmod_ddpn"].artifacts for s in report.seeds]
    checks.append(check_max("efm uncovered pairs", max(len(a.efm.missing) for a in arts), 0))
    bad = max(efm_oracle_mismatches(a.efm, a.fmap) for a in arts)
    checks.append(check_max("efm lookup vs true step", bad, 0))
    return checks


def _stab(trace: TrainingTrace, cap: int) -> int:
    it = stabilization_iteration(trace)
    return cap if it is None else it


def curve_checks(which: str, report: RunReport, config: ExperimentConfig) -> list[Check]:
    cap = config.ddpn.bellman_iterations + config.ddpn.eval_every
    a, b = CURVE_METHODS[which]
    med = {m: float(np.median([_stab(t, cap) for t in report.traces(m).values()])) for m in (a, b)}
    report.extras["stabilization"] = med
    checks = []
    if which == "fig5":
        ratio = med[b] / med[a] if med[a] else float("inf")
        checks.append(check_max("reduced/noisy median stabilization ratio", ratio, 2 / 3, f"{med[b]:g} vs {med[a]:g}"))
        secs = {m: float(np.median(report.timings(m))) for m in (a, b)}
        checks.append(Check("reduced trains faster than noisy full", secs[b] < secs[a], secs[b], secs[a], "max", "median seconds"))
    elif which == "fig6":
        for m in (a, b):
            checks.append(_test_check(report, f"{m} test rewards at 4.0 throughout", m, 1.0, None))
    else:
        checks.append(check_max("deepmod ddpn median stabilization", med[b], 25))
        checks.append(_test_check(report, "deepmod ddpn test rewards at 4.0 throughout", b, 1.0, None))
    return checks


# ---------------------------------------------------------------- recipes


def reproduce_table1(config: ExperimentConfig | None = None) -> RunReport:
    config = config or preset("table1")
    runs = _collect(config, "clean", TABLE1_METHODS)
    report = RunReport("table1", config.grid(), config.seeds, TABLE1_METHODS, runs)
    report.checks = table1_checks(report)
    return report


def reproduce_table2(config: ExperimentConfig | None = None) -> RunReport:
    config = config or preset("table2")
    runs = _collect(config, "noisy", TABLE2_METHODS)
    report = RunReport("table2", config.grid(), config.seeds, TABLE2_METHODS, runs)
    report.checks = table2_checks(report)
    return report


def reproduce_curves(which: str, config: ExperimentConfig | None = None, runs=None) -> RunReport:
    """Reward curves for ``fig5``/``fig6``/``fig7``; ``runs`` may reuse table runs."""
    which = which if which.startswith("fig") else f"fig{which}"
    if which not in CURVE_METHODS:
        raise ValueError(f"unknown figure {which!r}")
    config = config or preset(which)
    methods = CURVE_METHODS[which]
    if runs is None:
        runs = _collect(config, "clean" if which == "fig6" else "noisy", methods)
    report = RunReport(which, config.grid(), config.seeds, methods, runs)
    report.checks = curve_checks(which, report, config)
    return report


def timing_report(config: ExperimentConfig | None = None) -> dict[str, list[float]]:
    """Training seconds per seed for the noisy full DDPN and the reduced DDPN."""
    config = config or preset("fig5")
    runs = _collect(config, "noisy", CURVE_METHODS["fig5"])
    return {m: [runs[s][m].seconds for s in config.seeds] for m in CURVE_METHODS["fig5"]}


def curves_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "iteration", "phase", "reward"])
    for m in report.methods:
        for seed, trace in report.traces(m).items():
            for r in trace.records:
                w.writerow([m, seed, r.iteration, r.phase, repr(r.reward)])
    return buf.getvalue()


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _median_curve(traces: Iterable[TrainingTrace], phase: str) -> tuple[np.ndarray, np.ndarray]:
    traces = list(traces)
    its = traces[0].iterations(phase)
    n = min(len(t.rewards(phase)) for t in traces)
    return its[:n], np.median(np.stack([t.rewards(phase)[:n] for t in traces]), axis=0)


def curves_svg(report: RunReport) -> str:
    """Two panels (training, testing) of median reward per iteration; no timestamps."""
    width, height, pad = 900, 380, 50
    panel_w = (width - 3 * pad) / 2
    panel_h = height - 2 * pad - 20
    curves = {}
    for m in report.methods:
        traces = report.traces(m).values()
        if traces:
            curves[m] = {ph: _median_curve(traces, ph) for ph in ("train", "test")}
    ys = [y for c in curves.values() for _, yy in c.values() for y in yy]
    y_lo = min(min(ys, default=0.0), 0.0)
    y_hi = max(max(ys, default=5.0), 5.0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{report.experiment}: reward per iteration (median over {len(report.seeds)} seeds)</text>',
    ]
    for k, phase in enumerate(("train", "test")):
        x0 = pad + k * (panel_w + pad)
        y0 = pad
        xs_all = [x for c in curves.values() for x in c[phase][0]]
        x_hi = max(xs_all, default=1)
        out.append(f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{panel_w:.1f}" height="{panel_h:.1f}" fill="none" stroke="black"/>')
        out.append(f'<text x="{x0 + panel_w / 2:.1f}" y="{y0 - 8:.1f}" text-anchor="middle">{"training" if phase == "train" else "testing"}</text>')
        out.append(f'<text x="{x0 + panel_w / 2:.1f}" y="{y0 + panel_h + 30:.1f}" text-anchor="middle">iteration</text>')

        def px(x):
            return x0 + panel_w * (x / x_hi if x_hi else 0)

        def py(y):
            return y0 + panel_h * (1 - (y - y_lo) / (y_hi - y_lo))

        for tick in np.linspace(y_lo, y_hi, 5):
            out.append(f'<text x="{x0 - 5:.1f}" y="{py(tick) + 4:.1f}" text-anchor="end">{tick:.1f}</text>')
        out.append(f'<text x="{x0:.1f}" y="{y0 + panel_h + 15:.1f}" text-anchor="middle">0</text>')
        out.append(f'<text x="{x0 + panel_w:.1f}" y="{y0 + panel_h + 15:.1f}" text-anchor="middle">{x_hi}</text>')
        for j, (m, c) in enumerate(curves.items()):
            xs, yy = c[phase]
            pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, yy))
            out.append(f'<polyline fill="none" stroke="{_COLORS[j % len(_COLORS)]}" stroke-width="1.5" points="{pts}"/>')
            if k == 0:
                out.append(f'<text x="{x0 + 10:.1f}" y="{y0 + panel_h - 10 - 15 * j:.1f}" fill="{_COLORS[j % len(_COLORS)]}">{m}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- property checks


def gradient_check(n_networks: int = 100, seed: int = 0, h: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_networks):
        widths = rng.integers(1, 6, size=rng.integers(2, 5))
        acts = [Activation.TANH, Activation.RELU, Activation.IDENTITY]
        specs = [LayerSpec(int(a), int(b), acts[rng.integers(3)]) for a, b in zip(widths[:-1], widths[1:])]
        net = init_network(specs, seed=seed * 1000 + k)
        for b in net.biases:
            b += rng.normal(0, 0.1, b.shape)
        x = rng.normal(size=(3, specs[0].fan_in))
        y = rng.normal(size=(3, specs[-1].fan_out))
        _, grads = backward_mse(net, forward(net, x), y)
        for p, g in zip(net.params(), grads):
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = np.mean((forward(net, x).output - y) ** 2)
                p[idx] = old - h
                down = np.mean((forward(net, x).output - y) ** 2)
                p[idx] = old
                num[idx] = (up - down) / (2 * h)
            scale = max(np.linalg.norm(g) + np.linalg.norm(num), 1e-8)
            worst = max(worst, float(np.linalg.norm(g - num) / scale))
    return worst


def property_checks(spec: GridSpec | None = None) -> list[Check]:
    spec = spec or FROZEN_LAKE
    checks = [check_max("backprop vs central differences (100 nets)", gradient_check(), 1e-4)]
    rng = np.random.default_rng(0)
    a = rng.normal(size=(200, 32))
    b = binarize(a)
    bad = int(np.sum(~np.isin(b, (-1, 1)))) + int(np.sum(binarize(b) != b))
    checks.append(check_max("binarization total and idempotent", bad, 0))
    bad = 0
    for s in spec.nonterminal_states:
        for act in ACTIONS:
            dp, ev = step(spec, DP_ARRIVAL, s, act), step(spec, EPISODE_EVAL, s, act)
            bad += dp.next != ev.next or ev.reward != dp.reward + EPISODE_EVAL.step_penalty
    checks.append(check_max("episode reward = arrival reward + step penalty", bad, 0))
    cfg = DDPNConfig(bellman_iterations=4, epochs_per_iteration=5, test_episodes=2)
    first = [dumps(train_ddpn(spec, cfg)[0]) for _ in range(2)]
    vt = [value_iteration(spec).to_csv() for _ in range(2)]
    checks.append(check_max("same seed gives identical artifacts", int(first[0] != first[1]) + int(vt[0] != vt[1]), 0))
    return checks


# ---------------------------------------------------------------- CLI


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepmod", description="Gridworld DP, value networks and feature models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("table1", "clean-input state values"),
        ("table2", "noisy-input state values"),
        ("check", "full acceptance suite"),
    ):
        _common(sub.add_parser(name, help=help_))
    p = sub.add_parser("curves", help="reward curves")
    p.add_argument("--fig", required=True, choices=("5", "6", "7"))
    _common(p)
    for name in ("pipeline", "efm-dump"):
        p = sub.add_parser(name, help="run the feature-model pipeline" if name == "pipeline" else "write efm.csv")
        p.add_argument("--noisy", action=argparse.BooleanOptionalAction, default=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--dqn", action="store_true", help="estimate values with a DQN in step one")
        _common(p)
    return parser


def _config_for(args, name: str) -> ExperimentConfig:
    overrides = list(args.set)
    if args.seeds:
        overrides.append(f"experiment.seeds={args.seeds}")
    if args.out:
        overrides.append(f"experiment.out_dir={args.out}")
    return load_config(name, args.config, overrides)


def _emit(report: RunReport, out: Path) -> int:
    report.write(out)
    sys.stdout.write(report.summary())
    return 0 if report.passed else 1


def _pipeline_report(spec: GridSpec, config: ExperimentConfig, art: PipelineArtifacts, seed: int) -> RunReport:
    vi = value_iteration(spec, DP_ARRIVAL, config.pipeline.gamma)
    runs = {
        seed: {
            "value_iteration": MethodRun(vi),
            "step1": MethodRun(art.step1_values),
            "ddpn2": MethodRun(art.ddpn2_values, art.traces["ddpn2"], art.traces["ddpn2"].seconds),
        }
    }
    if "ddpn1" in art.traces:
        runs[seed]["ddpn1"] = MethodRun(art.step1_values, art.traces["ddpn1"], art.traces["ddpn1"].seconds)
    report = RunReport("pipeline", spec, (seed,), ("value_iteration", "step1", "ddpn2", "ddpn1"), runs)
    report.checks = [
        check_max("efm uncovered pairs", len(art.efm.missing), 0),
        check_max("efm lookup vs true step", efm_oracle_mismatches(art.efm, art.fmap), 0),
        _value_check(report, "ddpn2 vs value iteration", "ddpn2", vi.v, TOL_NOISY),
        _test_check(report, "ddpn2 final test rewards at 4.0", "ddpn2", 1.0, STABLE_WINDOW),
        check_min("efm-greedy episode reward", min(art.final_rewards), 4.0),
    ]
    return report


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    name = {"curves": f"fig{getattr(args, 'fig', '')}", "check": "table1", "pipeline": "table2", "efm-dump": "table2"}.get(
        args.command, args.command
    )
    try:
        config = _config_for(args, name)
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2
    out = config.output_root()
    spec = config.grid()

    if args.command == "table1":
        return _emit(reproduce_table1(config), out)
    if args.command == "table2":
        return _emit(reproduce_table2(config), out)
    if args.command == "curves":
        report = reproduce_curves(config.name, config)
        status = _emit(report, out)
        (out / f"curves_{config.name}.csv").write_text(curves_csv(report))
        (out / f"curves_{config.name}.svg").write_text(curves_svg(report))
        return status
    if args.command in ("pipeline", "efm-dump"):
        art = run_pipeline(spec, config, args.seed, noisy=args.noisy, use_dqn=args.dqn or None)
        out.mkdir(parents=True, exist_ok=True)
        art.efm.save(out / "efm.csv")
        art.fmap.save(out / "features.csv")
        if args.command == "efm-dump":
            sys.stdout.write(art.efm.to_csv())
            return 0 if art.efm.complete else 1
        return _emit(_pipeline_report(spec, config, art, args.seed), out)
    return run_check(config, out)


def run_check(config: ExperimentConfig, out: Path) -> int:
    """Tables, curves and property checks sharing one set of runs; 1 if anything fails."""
    t1 = reproduce_table1(replace(config, name="table1"))
    t2 = reproduce_table2(replace(config, name="table2"))
    reports = [t1, t2]
    for which, runs in (("fig5", t2.runs), ("fig6", t1.runs), ("fig7", t2.runs)):
        rep = reproduce_curves(which, replace(config, name=which), runs)
        reports.append(rep)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"curves_{which}.csv").write_text(curves_csv(rep))
        (out / f"curves_{which}.svg").write_text(curves_svg(rep))
    for rep in reports:
        rep.write(out)
        sys.stdout.write(rep.summary())
    props = property_checks(config.grid())
    sys.stdout.write("properties\n" + "".join(c.line() + "\n" for c in props))
    failed = sum(len(r.failures()) for r in reports) + sum(not c.passed for c in props)
    sys.stdout.write(f"{'all checks passed' if not failed else f'{failed} checks failed'}\n")
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main())
