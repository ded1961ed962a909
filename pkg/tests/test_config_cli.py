import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clecarpet import ConfigError
from clecarpet import cli
from clecarpet.config import RunConfig, dump_config, parse_config
from clecarpet.manifest import RunManifest

LIGHT = """\
seed = 7
[soup]
min_duration = 5e-4
[carpet]
eps = [0.125, 0.25]
[stats]
replicas = 2
pairs = 100
[levy]
paths = 1000
horizon = 100.0
positivity_draws = 100000
n_list = [1, 2, 4, 8]
[render]
eps = 0.125
[dist]
count = 3
"""


@pytest.fixture
def light(tmp_path):
    p = tmp_path / "light.toml"
    p.write_text(LIGHT)
    return p


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# -- configuration --------------------------------------------------------------

def test_defaults_validate():
    cfg = parse_config("")
    assert cfg.carpet.grid == 256 and cfg.stats.band == 64
    assert cfg.eps_list == pytest.approx([4 * cfg.h, 8 * cfg.h, 16 * cfg.h])


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**64 - 1),
    fmt=st.sampled_from(["csv", "json"]),
    eps=st.lists(st.floats(0.04, 0.5), min_size=1, max_size=3, unique=True),
    k=st.floats(2.7, 3.99),
    reps=st.integers(1, 500),
    ps=st.lists(st.floats(0.01, 0.99), min_size=1, max_size=4),
    pts=st.lists(st.lists(st.floats(-1, 1), min_size=4, max_size=4), max_size=3),
)
def test_config_roundtrip(seed, fmt, eps, k, reps, ps, pts):
    over = {"seed": seed, "format": fmt, "carpet": {"eps": sorted(eps)}, "render": {"eps": min(eps)}, "levy": {"kappa": [k]},
            "stats": {"replicas": reps, "p_list": ps}, "dist": {"points": pts}}
    cfg = parse_config("", [json.dumps(over)])
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


@pytest.mark.parametrize("over, word", [
    ({"carpet": {"eps": [0.001]}}, "4h"),
    ({"soup": {"min_duration": 0.01}}, "min_duration"),
    ({"carpet": {"grid": 128}}, "grid"),
    ({"levy": {"kappa": [4.5]}}, "kappa"),
    ({"format": "xml"}, "format"),
    ({"stats": {"p_list": [1.0]}}, "p_list"),
    ({"bogus": 1}, "unknown"),
    ({"carpet": {"bogus": 1}}, "unknown"),
])
def test_validation_errors(over, word):
    with pytest.raises(ConfigError, match=word):
        parse_config("", [json.dumps(over)])


def test_bad_toml_and_json():
    with pytest.raises(ConfigError):
        parse_config("seed = = 1")
    with pytest.raises(ConfigError):
        parse_config("", ["{not json"])
    with pytest.raises(ConfigError):
        parse_config("", ["[1, 2]"])


def test_overrides_merge_in_order():
    cfg = parse_config("seed = 1\n[stats]\nreplicas = 9\n", ['{"seed": 2}', '{"stats": {"pairs": 5}}'])
    assert cfg.seed == 2 and cfg.stats.replicas == 9 and cfg.stats.pairs == 5


def test_manifest_hash_ignores_timestamp():
    a = RunManifest(1, "levy", {"x": 1}, ["n"], timestamp="2020-01-01T00:00:00Z")
    b = RunManifest(1, "levy", {"x": 1}, ["n"], timestamp="2021-01-01T00:00:00Z")
    assert a.hash == b.hash and a.to_json() != b.to_json()
    assert RunManifest.from_dict(json.loads(a.to_json())).to_json() == a.to_json()
    assert RunManifest(1, "levy", {"x": 2}).hash != a.hash


# -- command line ---------------------------------------------------------------

def test_config_error_exit_code(tmp_path, capsys):
    rc = cli.main(["levy", "--grid", "100", "--out", str(tmp_path / "o")])
    assert rc == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and "grid" in err["message"]


def test_unknown_flag_is_config_error(capsys):
    assert cli.main(["levy", "--nope"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "config"


def test_subprocess_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "clecarpet", "sample", "--eps", "0.0001", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert "error" in json.loads(r.stderr)


def test_levy_schema(tmp_path, light):
    out = tmp_path / "o"
    assert cli.main(["levy", "--config", str(light), "--kappa", "3", "--paths", "1000", "--horizon", "100",
                     "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "levy.csv").open()))
    assert len(rows) == 1 and "positivity_estimate" in rows[0]
    assert abs(float(rows[0]["positivity_estimate"]) - 0.625) < 0.01
    man = json.loads((out / "manifest.json").read_text())
    assert rows[0]["manifest_hash"] == man["manifest_hash"]
    for key in ("tool_version", "master_seed", "config_hash", "subcommand", "timestamp", "approximation_notes"):
        assert key in man


def test_levy_json_format(tmp_path, light):
    out = tmp_path / "o"
    assert cli.main(["levy", "--config", str(light), "--format", "json", "--out", str(out)]) == 0
    rows = json.loads((out / "levy.json").read_text())
    assert rows[0]["kappa"] == 3.0


def test_replay_is_byte_identical(tmp_path, light):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["dist", "--config", str(light), "--out", str(a)]) == 0
    assert cli.main(["dist", "--manifest", str(a / "manifest.json"), "--out", str(b), "--threads", "2"]) == 0
    assert files(a) == files(b)


def test_replay_rejects_extra_flags(tmp_path, light, capsys):
    a = tmp_path / "a"
    assert cli.main(["levy", "--config", str(light), "--out", str(a)]) == 0
    assert cli.main(["levy", "--manifest", str(a / "manifest.json"), "--seed", "3", "--out", str(tmp_path / "b")]) == 2
    assert cli.main(["dist", "--manifest", str(a / "manifest.json"), "--out", str(tmp_path / "c")]) == 2


def test_writes_only_into_out_dir(tmp_path, light, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    out = tmp_path / "dest"
    assert cli.main(["carpet", "--config", str(light), "--out", str(out)]) == 0
    assert list(work.iterdir()) == []
    names = sorted(files(out))
    assert names == ["carpet_000.pgm", "carpet_000.pgm.json", "carpet_001.pgm", "carpet_001.pgm.json",
                     "config.toml", "manifest.json"]
    h = json.loads((out / "manifest.json").read_text())["manifest_hash"]
    assert json.loads((out / "carpet_000.pgm.json").read_text())["manifest"] == h


def test_env_var_output_dir(tmp_path, light, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env_out"))
    assert cli.main(["levy", "--config", str(light)]) == 0
    assert (tmp_path / "env_out" / "levy.csv").exists()
    monkeypatch.delenv(cli.OUT_ENV)
    assert cli.main(["levy", "--config", str(light)]) == 0
    assert (tmp_path / "clecarpet-out" / "levy.csv").exists()


def test_config_file_written_reparses(tmp_path, light):
    out = tmp_path / "o"
    assert cli.main(["levy", "--config", str(light), "--out", str(out)]) == 0
    cfg = parse_config((out / "config.toml").read_text())
    man = json.loads((out / "manifest.json").read_text())
    assert cfg == RunConfig.from_dict(man["config"])


def test_sample_embeds_manifest_hash(tmp_path, light):
    out = tmp_path / "o"
    assert cli.main(["sample", "--config", str(light), "--out", str(out)]) == 0
    h = json.loads((out / "manifest.json").read_text())["manifest_hash"]
    assert f"# manifest {h}" in (out / "ensemble_000.txt").read_text()


def test_dist_explicit_points(tmp_path, light):
    out = tmp_path / "o"
    assert cli.main(["dist", "--config", str(light), "--points", "0", "0", "0.1", "0.1", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "dist.csv").open()))
    assert len(rows) == 2 and {r["eps"] for r in rows} == {"0.125", "0.25"}
    assert cli.main(["dist", "--config", str(light), "--points", "0", "0", "0.1", "--out", str(out)]) == 2


def test_report_rows(tmp_path, light):
    out = tmp_path / "o"
    assert cli.main(["report", "--config", str(light), "--out", str(out)]) == 0
    stats_ = {r["statistic"] for r in csv.DictReader((out / "report.csv").open())}
    assert {"comparability_spread", "holder_slope", "midpoint_defect_median", "dn_distance_mean"} <= stats_
    assert (out / "comparability.csv").exists()


def test_median_requires_fifty_replicas(tmp_path, light, capsys):
    assert cli.main(["median", "--config", str(light), "--out", str(tmp_path / "o")]) == 2


def test_selftest_exit_codes(tmp_path, monkeypatch, capsys):
    assert cli.main(["selftest", "--out", str(tmp_path / "a")]) == 0
    rows = list(csv.DictReader((tmp_path / "a" / "selftest.csv").open()))
    assert len(rows) >= 10 and all(r["passed"] == "True" for r in rows)
    import clecarpet.checks as checks
    monkeypatch.setattr(checks, "run_selftest", lambda seed: [("broken", False, "planted failure")])
    assert cli.main(["selftest", "--out", str(tmp_path / "b")]) == 3


def test_threads_must_be_positive(capsys):
    assert cli.main(["levy", "--threads", "0"]) == 2


def test_render_png(tmp_path, light):
    out = tmp_path / "o"
    assert cli.main(["render", "--config", str(light), "--source", "0.9", "0.0", "--out", str(out)]) == 0
    from PIL import Image
    img = Image.open(out / "field.png")
    assert img.size == (256, 256)
    assert img.text["manifest"] == json.loads((out / "manifest.json").read_text())["manifest_hash"]
    assert np.asarray(img).ndim == 3
