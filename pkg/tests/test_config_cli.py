import csv
import json
import math

import pytest
from click.testing import CliRunner

from anongoss import cli
from anongoss.analysis import InvariantViolation
from anongoss.config import ConfigError, ScenarioConfig, expand_sweeps, parse_config, parse_sweep
from anongoss.scenario import METRIC_UNITS, run_scenario

SMALL = """
[sim]
seed = 5
n_nodes = 20
sim_ticks = 1500
warmup_rounds = 25

[sampling]
phi_size = 15

[onion]
k_min = 2
k_max = 4

[delegation]
n_delegations = 6
wave_size = 6

[aggregation]
aggregator = identity

[adversary]
collusion_fraction = 0.2
sniffer = true
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


def invoke(*args):
    return CliRunner().invoke(cli.main, [str(a) for a in args])


class TestParse:
    def test_defaults(self):
        cfg = parse_config("[sim]\nseed = 1\n")
        assert cfg.n_nodes == 100 and cfg.k_min == 5 and cfg.k_max == 20
        assert cfg.view_capacity == 20 and cfg.shuffle_size == 10 and cfg.phi_size == 50
        assert cfg.latency_min == 1 and cfg.latency_max == 10 and cfg.round_interval_ticks == 10
        assert cfg.epsilon == 1e-8 and cfg.window_rounds == 5
        assert math.isinf(cfg.route_ttl_ticks)
        cfg.validate()

    def test_types(self):
        cfg = parse_config(SMALL)
        assert cfg.seed == 5 and cfg.sniffer is True and cfg.collusion_fraction == 0.2

    def test_missing_seed_names_field(self):
        with pytest.raises(ConfigError, match="sim.seed"):
            parse_config("[sim]\nn_nodes = 30\n").validate()

    @pytest.mark.parametrize(
        "text,key",
        [
            ("[sim]\nseed = 1\nbogus = 3\n", "sim.bogus"),
            ("[sim]\nseed = x\n", "sim.seed"),
            ("[sim]\nseed = 1\n[adversary]\nsniffer = maybe\n", "adversary.sniffer"),
            ("[sim]\nseed = 1\n[return]\nreturn_mode = carrier\n", "return.return_mode"),
            ("[sim]\nseed = 1\nn_nodes = 30\n", "sampling.phi_size"),
            ("[sim]\nseed = 1\n[onion]\nk_min = 9\nk_max = 3\n", "onion.k_min"),
        ],
    )
    def test_errors_name_the_key(self, text, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            parse_config(text).validate()

    def test_syntax_error(self):
        with pytest.raises(ConfigError):
            parse_config("no section here")

    def test_dotted_access(self):
        cfg = parse_config(SMALL)
        assert cfg.get("onion.k_max") == 4
        assert cfg.with_value("onion.k_max", "6").k_max == 6
        with pytest.raises(ConfigError):
            cfg.get("onion.nothing")
        assert set(cfg.to_dict()) == set(ScenarioConfig.fields_by_dotted())


class TestSweep:
    def test_parse(self):
        assert parse_sweep("adversary.collusion_fraction=0.1, 0.2,0.3") == (
            "adversary.collusion_fraction", ["0.1", "0.2", "0.3"])

    @pytest.mark.parametrize("spec", ["nokey", "sim.nothing=1", "sim.seed="])
    def test_bad(self, spec):
        with pytest.raises(ConfigError):
            parse_sweep(spec)

    def test_cartesian(self):
        base = parse_config(SMALL)
        cells = expand_sweeps(base, [parse_sweep("onion.k_max=3,4"), parse_sweep("sim.seed=1,2,3")])
        assert len(cells) == 6
        assert [(c.k_max, c.seed) for _, c in cells] == [(3, 1), (3, 2), (3, 3), (4, 1), (4, 2), (4, 3)]
        assert cells[0][0] == {"onion.k_max": "3", "sim.seed": "1"}


class TestScenario:
    def test_metrics_documented(self):
        res = run_scenario(parse_config(SMALL))
        names = {m.metric for m in res.metrics}
        assert names <= set(METRIC_UNITS)
        assert {"result_rate", "messages_per_delegation", "collusion_deanon_rate", "sniffer_identification_rate"} <= names
        assert res.metric("delegations") == 6
        assert res.metric("result_rate") == 1.0
        assert all(m.unit == METRIC_UNITS[m.metric] for m in res.metrics)

    def test_waves_cycle_when_larger_than_network(self):
        cfg = parse_config(SMALL).with_value("delegation.n_delegations", 30).with_value("delegation.wave_size", 30)
        res = run_scenario(cfg)
        assert res.metric("delegations") == 30


class TestRunCommand:
    def test_outputs_and_determinism(self, cfg_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert invoke("run", "--config", cfg_file, "--out", a).exit_code == 0
        assert invoke("run", "--config", cfg_file, "--out", b).exit_code == 0
        for name in ("summary.csv", "events.jsonl", "reports.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        rows = list(csv.DictReader((a / "summary.csv").open()))
        assert rows and set(rows[0]) == {"scenario", "params", "metric", "value", "unit"}
        for line in (a / "events.jsonl").read_text().splitlines():
            json.loads(line)

    def test_seed_override_changes_output(self, cfg_file, tmp_path):
        invoke("run", "--config", cfg_file, "--out", tmp_path / "a")
        invoke("run", "--config", cfg_file, "--out", tmp_path / "b", "--seed", 99)
        assert (tmp_path / "a" / "events.jsonl").read_bytes() != (tmp_path / "b" / "events.jsonl").read_bytes()

    def test_missing_seed_exit_2(self, tmp_path):
        p = tmp_path / "noseed.ini"
        p.write_text(SMALL.replace("seed = 5\n", ""))
        r = invoke("run", "--config", p, "--out", tmp_path / "o")
        assert r.exit_code == 2 and "sim.seed" in r.output

    def test_missing_file_exit_2(self, tmp_path):
        assert invoke("run", "--config", tmp_path / "nope.ini", "--out", tmp_path / "o").exit_code == 2

    def test_bad_sweep_exit_2(self, cfg_file, tmp_path):
        r = invoke("run", "--config", cfg_file, "--out", tmp_path / "o", "--sweep", "onion.k_max=1")
        assert r.exit_code == 2 and "onion.k_min" in r.output

    def test_invariant_exit_3(self, cfg_file, tmp_path, monkeypatch):
        def broken(cfg, sid):
            raise InvariantViolation("state mentions a stranger")

        monkeypatch.setattr(cli, "run_scenario", broken)
        r = invoke("run", "--config", cfg_file, "--out", tmp_path / "o")
        assert r.exit_code == 3 and "stranger" in r.output

    def test_sweep_blocks(self, cfg_file, tmp_path):
        out = tmp_path / "sw"
        r = invoke("run", "--config", cfg_file, "--out", out, "--sweep", "adversary.collusion_fraction=0.1,0.2,0.3")
        assert r.exit_code == 0
        rows = list(csv.DictReader((out / "summary.csv").open()))
        assert sorted({row["scenario"] for row in rows}) == ["s0", "s1", "s2"]
        assert {row["params"] for row in rows} == {f"adversary.collusion_fraction={f}" for f in ("0.1", "0.2", "0.3")}
        rep = invoke("report", "--out", out)
        assert rep.exit_code == 0 and rep.output.count("scenario s") == 3


class TestReportCommand:
    def test_empty_dir(self, tmp_path):
        r = invoke("report", "--out", tmp_path)
        assert r.exit_code == 1 and "missing data" in r.output
        with pytest.raises(cli.MissingData):
            cli.report(str(tmp_path))

    def test_single_block(self, cfg_file, tmp_path):
        invoke("run", "--config", cfg_file, "--out", tmp_path)
        text = cli.report(str(tmp_path))
        assert text.count("scenario s") == 1
        for label in ("delivery rate", "messages per delegation", "mean route length", "degree"):
            assert label in text

    def test_push_window_cheaper_paired(self, cfg_file, tmp_path):
        out = tmp_path / "modes"
        r = invoke("run", "--config", cfg_file, "--out", out, "--sweep", "return.return_mode=push_full,push_window")
        assert r.exit_code == 0
        per = {row["params"]: float(row["value"]) for row in csv.DictReader((out / "summary.csv").open())
               if row["metric"] == "messages_per_delegation"}
        assert per["return.return_mode=push_window"] < per["return.return_mode=push_full"]
