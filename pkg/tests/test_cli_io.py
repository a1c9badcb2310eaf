import numpy as np
import pytest
import yaml
from fastapi.testclient import TestClient
from hypothesis import given, settings, strategies as st

from ymhstab.cli import main
from ymhstab.cli_io import (ExperimentConfig, convergence_study, execute, flag_order, load_config,
                            parse_config, run_experiment)
from ymhstab.errors import ConfigInvalid, InsufficientLadder, PipelineFailure
from ymhstab.service import app


def test_unknown_keys_rejected():
    with pytest.raises(ConfigInvalid):
        parse_config({"experiment": "identities", "vortex": {"lamda": [1.0]}})
    with pytest.raises(ConfigInvalid):
        parse_config({"experiment": "identities", "tolerance": 1e-6})


@pytest.mark.parametrize("bad", [
    {"experiment": "nope"},
    {"experiment": "identities", "vortex": {"lam": [-1.0]}},
    {"experiment": "identities", "vortex": {"degree": 0}},
    {"experiment": "identities", "vortex": {"N": 10}},
    {"experiment": "identities", "vortex": {"scheme_order": 3}},
    {"experiment": "residual-scan", "fields": {"eps_list": [0.5]}},
])
def test_out_of_range_rejected(bad):
    with pytest.raises(ConfigInvalid):
        parse_config(bad)


@settings(max_examples=30, deadline=None)
@given(lam=st.lists(st.floats(0.05, 20.0), min_size=1, max_size=4),
       eps=st.lists(st.floats(0.001, 0.19), min_size=1, max_size=4),
       seed=st.integers(0, 2 ** 32), n=st.integers(20, 10 ** 5))
def test_config_round_trip(lam, eps, seed, n):
    cfg = parse_config({"experiment": "residual-scan", "seed": seed, "vortex": {"lam": lam, "N": n},
                        "fields": {"eps_list": eps}})
    again = parse_config(yaml.safe_load(cfg.to_yaml()))
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_digest_ignores_output_dir_only():
    a = parse_config({"experiment": "metric-check", "out": "x"})
    b = parse_config({"experiment": "metric-check", "out": "y"})
    c = parse_config({"experiment": "metric-check", "seed": 1})
    assert a.digest() == b.digest() != c.digest()


def test_load_config(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("experiment: metric-check\nseed: 4\ngeometry:\n  points: 10\n")
    assert load_config(path).geometry.points == 10
    path.write_text("- not a mapping\n")
    with pytest.raises(ConfigInvalid):
        load_config(path)


def test_identities_manifest(tmp_path):
    m = run_experiment({"experiment": "identities", "vortex": {"lam": [1.0, 2.0]}}, out=tmp_path)
    gaps = [c for c in m.checks if c.name.startswith("identity_")]
    assert len(gaps) == 10 and all(c.passed and c.value < 1e-6 for c in gaps)
    names = [c.name for c in m.checks]
    assert len(names) == len(set(names))


def _payloads(path):
    return {p.name: p.read_bytes() for p in sorted(path.glob("*.csv"))}


@pytest.mark.parametrize("experiment", ["metric-check", "solve-vortex", "jacobi-kernels"])
def test_reruns_are_byte_identical(tmp_path, experiment):
    cfg = {"experiment": experiment, "seed": 11}
    m1 = run_experiment(cfg, out=tmp_path / "a")
    m2 = run_experiment(cfg, out=tmp_path / "b")
    assert _payloads(tmp_path / "a") == _payloads(tmp_path / "b")
    assert m1.config_digest == m2.config_digest
    assert m1.model_dump(exclude={"timings"}) == m2.model_dump(exclude={"timings"})


def test_seed_changes_sampled_points(tmp_path):
    run_experiment({"experiment": "metric-check", "seed": 1}, out=tmp_path / "a")
    run_experiment({"experiment": "metric-check", "seed": 2}, out=tmp_path / "b")
    a, b = _payloads(tmp_path / "a"), _payloads(tmp_path / "b")
    assert a["metric_points.csv"] != b["metric_points.csv"]
    assert a["inverse_expansion.csv"] == b["inverse_expansion.csv"]


def test_no_orphan_artifacts(tmp_path):
    m = run_experiment({"experiment": "metric-check"}, out=tmp_path)
    listed = {a.name for a in m.artifacts}
    assert {p.name for p in tmp_path.iterdir()} == listed | {"config.yaml", "manifest.yaml"}
    for a in m.artifacts:
        lines = (tmp_path / a.name).read_text().splitlines()
        assert lines[0][0].isalpha() and len(lines) == a.rows + 1
    assert list(yaml.safe_load((tmp_path / "manifest.yaml").read_text()))[:3] == [
        "experiment", "config_digest", "seed"]


def test_fiber_spectrum_records_instability(tmp_path):
    m = run_experiment({"experiment": "fiber-spectrum", "vortex": {"lam": [1.5], "degree": 2},
                        "fiber": {"fourier_mode_max": 3}}, out=tmp_path)
    (check,) = m.checks
    assert check.value < -1e-3 and check.passed


def test_pipeline_failure_carries_context(tmp_path):
    with pytest.raises(PipelineFailure, match="DomainTooSmall"):
        run_experiment({"experiment": "solve-vortex", "vortex": {"R_max": 5.0}}, out=tmp_path)


def test_convergence_study_orders():
    (row,) = convergence_study({"experiment": "converge"})
    assert abs(row["order"] - 2) < 0.2 and not row["flagged"]
    (hook,) = convergence_study({"experiment": "converge", "converge": {"first_order_hook": True}})
    assert abs(hook["order"] - 1) < 0.2 and hook["flagged"]
    (vortex,) = convergence_study({"experiment": "converge",
                                   "converge": {"check": "vortex", "ladder": [500, 1000, 2000]}})
    assert abs(vortex["order"] - 2) < 0.2 and not vortex["flagged"]


def test_convergence_study_needs_three_levels():
    with pytest.raises(InsufficientLadder):
        convergence_study({"experiment": "converge", "converge": {"ladder": [401, 801]}})


@pytest.mark.parametrize("order, flagged", [(2.0, False), (1.5, False), (2.5, False), (1.0, True), (3.1, True)])
def test_flag_order(order, flagged):
    assert flag_order(order) is flagged


# ---------------------------------------------------------------------------
# service and command line


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def test_service_health(client):
    assert client.get("/health").json()["status"] == "ok"
    assert "energy-compare" in client.get("/experiments").json()


def test_service_run_matches_in_process(client):
    cfg = {"experiment": "metric-check", "seed": 5, "geometry": {"points": 20}}
    body = client.post("/run", json=cfg).json()
    manifest, arts = execute(ExperimentConfig(**cfg))
    assert body["artifacts"] == arts
    assert body["manifest"]["config_digest"] == manifest.config_digest


def test_service_rejects_bad_config(client):
    assert client.post("/run", json={"experiment": "metric-check", "bogus": 1}).status_code == 422
    r = client.post("/convergence", json={"experiment": "converge", "converge": {"ladder": [401, 801]}})
    assert r.status_code == 422


def test_service_pipeline_failure(client):
    r = client.post("/run", json={"experiment": "solve-vortex", "vortex": {"R_max": 5.0}})
    assert r.status_code == 500 and "DomainTooSmall" in r.json()["detail"]


def test_cli_run(tmp_path, capsys):
    assert main(["metric-check", "--out", str(tmp_path), "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "PASS metric_vs_gram_max_gap" in out
    assert yaml.safe_load((tmp_path / "config.yaml").read_text())["seed"] == 3


def test_cli_config_file_and_mismatch(tmp_path, capsys):
    path = tmp_path / "cfg.yaml"
    path.write_text(f"experiment: metric-check\nout: {tmp_path / 'o'}\ngeometry:\n  points: 5\n")
    assert main(["metric-check", "--config", str(path)]) == 0
    assert len((tmp_path / "o" / "metric_points.csv").read_text().splitlines()) == 6
    assert main(["identities", "--config", str(path)]) == 2
    path.write_text("experiment: metric-check\ntypo: 1\n")
    assert main(["metric-check", "--config", str(path)]) == 2


def test_cli_strict_exit_code(tmp_path):
    # the first-order hook is flagged, so a strict run reports failure
    path = tmp_path / "cfg.yaml"
    path.write_text("experiment: converge\nconverge:\n  first_order_hook: true\n")
    assert main(["converge", "--config", str(path), "--out", str(tmp_path / "o"), "--strict"]) == 3
