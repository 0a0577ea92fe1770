import xml.etree.ElementTree as ET

import numpy as np
import pytest

from deepmod.gridworld import FROZEN_LAKE
from deepmod.harness import (
    OUT_ENV,
    REFERENCE,
    Check,
    ExperimentConfig,
    check_max,
    check_min,
    config_to_text,
    efm_oracle_mismatches,
    final_test_fraction,
    load_config,
    main,
    parse_config_text,
    preset,
    set_option,
    sign_violations,
)
from deepmod.learners import TrainingTrace
from deepmod.tabular import value_iteration

FAST = [
    "--seeds", "0",
    "--set", "ddpn.bellman_iterations=16",
    "--set", "reduced.bellman_iterations=16",
    "--set", "pipeline.bellman_iterations=16",
    "--set", "ddpn.test_episodes=4",
    "--set", "reduced.test_episodes=4",
    "--set", "pipeline.test_episodes=4",
    "--set", "qlearning.episodes=1500",
    "--set", "pipeline.q_episodes=1500",
    "--set", "dqn.episodes=20",
]


def test_presets_are_closed():
    for name in ("table1", "table2", "fig5", "fig6", "fig7"):
        assert preset(name).name == name
    with pytest.raises(ValueError):
        ExperimentConfig(name="table3")
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())


def test_set_option_coerces_types():
    cfg = preset("table1")
    cfg = set_option(cfg, "ddpn.learning_rate", "0.01")
    cfg = set_option(cfg, "pipeline.noisy", "false")
    cfg = set_option(cfg, "reduced.hidden", "16:relu, 8:tanh")
    cfg = set_option(cfg, "experiment.seeds", "3,4")
    assert cfg.ddpn.learning_rate == 0.01 and cfg.pipeline.noisy is False
    assert cfg.reduced.hidden == ((16, "relu"), (8, "tanh")) and cfg.seeds == (3, 4)
    for bad in ("ddpn.nope", "nosection.x", "learning_rate", "experiment.ddpn"):
        with pytest.raises(ValueError):
            set_option(cfg, bad, "1")
    with pytest.raises(ValueError):
        set_option(cfg, "ddpn.eval_every", "0")  # sub-config validation runs
    with pytest.raises(ValueError):
        set_option(cfg, "pipeline.noisy", "maybe")


def test_config_text_round_trip(tmp_path):
    cfg = set_option(preset("fig5"), "ddpn.epochs_per_iteration", "7")
    text = config_to_text(cfg)
    pairs = [p for p in parse_config_text(text) if p[0] != "experiment.name"]
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\n" + "\n".join(f"{k} = {v}" for k, v in pairs) + "\n")
    again = load_config("fig5", path)
    assert again == cfg
    assert load_config("fig5", path, ["ddpn.epochs_per_iteration=9"]).ddpn.epochs_per_iteration == 9
    with pytest.raises(ValueError):
        parse_config_text("no equals sign")
    with pytest.raises(ValueError):
        load_config("fig5", None, ["experiment.name=table1"])


def test_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert preset("table1").output_root() == tmp_path / "env"
    assert ExperimentConfig(out_dir=str(tmp_path / "x")).output_root() == tmp_path / "x"


def test_check_helpers():
    assert check_max("a", 0.1, 0.15).passed and not check_max("a", float("nan"), 1).passed
    assert check_min("b", 1.0, 0.95).passed and not check_min("b", 0.5, 0.95).passed
    assert Check("c", False, 2.0, 1.0).line().startswith("FAIL c: 2 <= 1")


def test_sign_violations():
    v = value_iteration(FROZEN_LAKE).v
    assert sign_violations(FROZEN_LAKE, v) == 0
    w = v.copy()
    w[5] = 1.0
    w[0] = 20.0
    assert sign_violations(FROZEN_LAKE, w) == 2


def test_final_test_fraction():
    t = TrainingTrace()
    for k, r in enumerate([-3.0] * 10 + [4.0] * 50, 1):
        t.add(k, "test", r, 0.0, 0.0)
    assert final_test_fraction(t) == 1.0
    assert final_test_fraction(t, window=None) == pytest.approx(50 / 60)


def test_reference_columns_are_complete():
    for table in REFERENCE.values():
        for col in table.values():
            assert list(col) == list("ABCDEFGHIJKLMNOP")


def _csvs(path):
    return {p.name: p.read_bytes() for p in sorted(path.glob("*.csv")) if not p.name.startswith("timing_")}


def test_table1_cli_is_byte_reproducible(tmp_path, capsys):
    codes = [main(["table1", *FAST, "--out", str(tmp_path / d)]) for d in ("a", "b")]
    out = capsys.readouterr().out
    assert "PASS value iteration vs reference" in out
    a, b = _csvs(tmp_path / "a"), _csvs(tmp_path / "b")
    assert a == b
    assert {"values_table1.csv", "trace_ddpn_0.csv", "trace_reduced_ddpn_0.csv"} <= set(a)
    header = a["values_table1.csv"].decode().splitlines()[0]
    assert header == "state_label,qlearning,value_iteration,ddpn,reduced_ddpn,delta_qlearning,delta_ddpn,delta_reduced_ddpn"
    assert codes[0] == codes[1]


def test_failed_checks_give_nonzero_exit(tmp_path):
    args = ["table1", "--seeds", "0", "--set", "ddpn.bellman_iterations=2", "--set", "reduced.bellman_iterations=2",
            "--set", "ddpn.test_episodes=2", "--set", "reduced.test_episodes=2", "--out", str(tmp_path)]
    assert main(args) == 1
    assert "FAIL" in (tmp_path / "report_table1.txt").read_text()


def test_curves_cli_writes_svg(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    main(["curves", "--fig", "6", *FAST])
    svg = (tmp_path / "curves_fig6.svg").read_text()
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg") and svg.count("<polyline") == 4
    assert "202" not in svg.split("\n", 3)[2]  # no dates in the title
    rows = (tmp_path / "curves_fig6.csv").read_text().splitlines()
    assert rows[0] == "method,seed,iteration,phase,reward" and len(rows) > 10


def test_pipeline_and_efm_dump_cli(tmp_path, capsys):
    rc = main(["pipeline", "--no-noisy", "--seed", "0", *FAST, "--out", str(tmp_path / "p")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "PASS efm lookup vs true step" in out
    assert len((tmp_path / "p" / "efm.csv").read_text().splitlines()) == 61
    assert main(["efm-dump", "--no-noisy", *FAST, "--out", str(tmp_path / "d")]) == 0
    assert capsys.readouterr().out.startswith("f,action,f_next,reward")


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["table1", "--set", "ddpn.bogus=1", "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_efm_oracle_counts_mismatches(spec, clean_ddpn):
    from deepmod.efm import EFM, ExplorationConfig, build_efm
    from deepmod.features import build_state_feature_map
    from deepmod.gridworld import DP_ARRIVAL

    fmap = build_state_feature_map(clean_ddpn[0], spec)
    efm = build_efm(spec, DP_ARRIVAL, fmap, ExplorationConfig(seed=1))
    assert efm_oracle_mismatches(efm, fmap) == 0
    assert efm_oracle_mismatches(EFM(), fmap) == 60
