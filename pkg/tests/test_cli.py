import csv

import pytest

from chunkkv.cli import main
from chunkkv.config import RunConfig, parse_config_text, resolve_config
from chunkkv.errors import ConfigError
from chunkkv.scheduler import PolicyKind


@pytest.fixture
def small_trace(tmp_path):
    path = tmp_path / "t.jsonl"
    rc = main(["generate", "--n-requests", "12", "--mean-chunk-tokens", "48", "--qps", "20", "-o", str(path)])
    assert rc == 0
    return path


def test_generate_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert main(["generate", "--preset", "emrqa-like", "--n-requests", "20", "--seed", "3", "-o", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_env_seed_fallback(tmp_path, monkeypatch):
    a, b, c = (tmp_path / n for n in ("a", "b", "c"))
    monkeypatch.setenv("MEPIC_SIM_SEED", "11")
    main(["generate", "--n-requests", "5", "-o", str(a)])
    main(["generate", "--n-requests", "5", "--seed", "11", "-o", str(b)])
    main(["generate", "--n-requests", "5", "--seed", "12", "-o", str(c)])
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()


def test_replay_writes_csvs(small_trace, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["replay", str(small_trace), "--policy", "epic(8)", "-o", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"series_epic_8.csv", "latency_epic_8.csv", "summary_epic_8.csv"}
    rows = list(csv.DictReader(open(out / "summary_epic_8.csv")))
    assert rows[0]["policy"] == "epic(8)" and int(rows[0]["completed"]) == 12
    assert "peak_blocks_used=" in capsys.readouterr().out


def test_compare_writes_ratios(small_trace, tmp_path):
    out = tmp_path / "cmp"
    rc = main(["compare", str(small_trace), "--policies", "canonical,naive,full", "-o", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "comparison.csv")))
    assert [r["policy"] for r in rows] == [
        "canonical", "naive", "full", "ratio:naive/canonical", "ratio:full/canonical",
    ]


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["generate"],
        ["generate", "--preset", "nope", "-o", "x"],
        ["replay", "t.jsonl", "--policy", "mystery"],
        ["replay", "t.jsonl", "--remote-policy", "sometimes"],
        ["verify-rope", "--dtype", "f16"],
        ["compare", "t.jsonl", "--policies", "canonical"],
    ],
)
def test_usage_errors_exit_1(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "t.jsonl").write_text("")
    assert main(argv) == 1


def test_runtime_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{oops\n")
    assert main(["replay", str(bad)]) == 2
    assert main(["replay", str(tmp_path / "missing.jsonl")]) == 2


def test_block_size_mismatch_exit_2(small_trace):
    assert main(["replay", str(small_trace), "--block-size", "32"]) == 2


def test_verify_rope_exit_codes(capsys):
    assert main(["verify-rope", "--instances", "20"]) == 0
    assert capsys.readouterr().out.count("PASS") == 2
    assert main(["verify-rope", "--instances", "5", "--dtype", "f64", "--inject-error"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.conf"
    cfg.write_text("version = 1\n# comment\ncapacity_blocks = 99\nepic_n = 4\nretain_prefix = yes\n")
    merged = resolve_config({"epic_n": 8, "capacity_blocks": None}, cfg, environ={})
    assert merged.capacity_blocks == 99
    assert merged.epic_n == 8
    assert merged.retain_prefix is True
    assert merged.make_policy("epic").recompute_tokens == 8
    assert resolve_config({}, None, environ={}) == RunConfig()


def test_config_seed_precedence(tmp_path):
    cfg = tmp_path / "run.conf"
    cfg.write_text("version = 1\nseed = 5\n")
    env = {"MEPIC_SIM_SEED": "9"}
    assert resolve_config({}, cfg, env).seed == 5
    assert resolve_config({"seed": 1}, cfg, env).seed == 1
    assert resolve_config({}, None, env).seed == 9


@pytest.mark.parametrize(
    "text",
    [
        "capacity_blocks = 5\n",
        "version = 2\n",
        "version = 1\nwhat = 3\n",
        "version = 1\nseed = 1\nseed = 2\n",
        "version = 1\nseed = one\n",
        "version = 1\noffload = maybe\n",
        "version = 1\njust a line\n",
    ],
)
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_bad_config_values():
    with pytest.raises(ConfigError):
        resolve_config({"capacity_blocks": 0}, None, {})
    with pytest.raises(ConfigError, match="valid presets"):
        resolve_config({"preset": "imdb"}, None, {})
    with pytest.raises(ConfigError):
        resolve_config({"dtype": "bf16"}, None, {})


def test_unknown_config_key_via_cli(tmp_path, small_trace):
    cfg = tmp_path / "bad.conf"
    cfg.write_text("version = 1\nturbo = on\n")
    assert main(["replay", str(small_trace), "--config", str(cfg)]) == 1


def test_policy_names():
    cfg = RunConfig(epic_n=24, cacheblend_p=0.3)
    assert cfg.make_policy("epic").recompute_tokens == 24
    assert cfg.make_policy("cacheblend(0.5)").recompute_fraction == 0.5
    assert cfg.make_policy("full").kind is PolicyKind.FULL_RECOMPUTE
    with pytest.raises(ValueError):
        cfg.make_policy("epic(")
