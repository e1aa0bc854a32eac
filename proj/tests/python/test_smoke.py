"""Smoke tests for the python surface of the native module."""

import json
import math
import pathlib

import pytest

import zhmf

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "fixtures"


def test_haversine_known_distance():
    nyc_la = zhmf.haversine_km(40.7128, -74.0060, 34.0522, -118.2437)
    assert nyc_la == pytest.approx(3935.746254609723, rel=1e-12)
    assert zhmf.haversine_km(51.5, -0.1, 51.5, -0.1) == 0.0


def test_cosine():
    assert zhmf.cosine([1.0, 0.0], [0.0, 2.0]) == pytest.approx(0.0)
    assert zhmf.cosine([1.0, 2.0], [2.0, 4.0]) == pytest.approx(1.0)
    with pytest.raises(zhmf.DataError):
        zhmf.cosine([1.0], [1.0, 2.0])
    with pytest.raises(zhmf.DataError):
        zhmf.cosine([0.0, 0.0], [1.0, 2.0])


def test_hash_embed_properties():
    a = zhmf.hash_embed("Coffee Shop at dawn", dim=32, seed=1)
    assert len(a) == 32
    assert a == zhmf.hash_embed("coffee SHOP at dawn!", dim=32, seed=1)
    assert a != zhmf.hash_embed("Coffee Shop at dawn", dim=32, seed=2)
    assert any(x != 0.0 for x in a)
    assert zhmf.hash_embed("??", dim=8) == [0.0] * 8
    # shared tokens pull texts together
    close = zhmf.cosine(a, zhmf.hash_embed("coffee shop at night", dim=32, seed=1))
    far = zhmf.cosine(a, zhmf.hash_embed("gym workout routine", dim=32, seed=1))
    assert close > far


def test_metrics():
    assert zhmf.reciprocal_rank(0) == 0.0
    assert zhmf.reciprocal_rank(4) == 0.25
    ranks = [1, 3, 0]
    assert zhmf.acc_at_k(ranks, 1) == pytest.approx(1 / 3)
    assert zhmf.acc_at_k(ranks, 5) == pytest.approx(2 / 3)
    assert zhmf.mean_reciprocal_rank(ranks) == pytest.approx((1 + 1 / 3 + 0) / 3)
    with pytest.raises(zhmf.DataError):
        zhmf.acc_at_k([], 1)


def test_parse_categories():
    reply = '```json\n["coffee  shop", "Moon Base", "Office"]\n```'
    ranked, unmatched = zhmf.parse_categories(
        reply, ["Coffee Shop", "Office", "Gym"], 20
    )
    assert ranked == ["Coffee Shop", "Office"]
    assert unmatched == ["Moon Base"]


def test_parse_pois():
    reply = 'Best bets:\n```json\n["p2", "p9", "p1"]\n```'
    ranked, rejected = zhmf.parse_pois(reply, ["p1", "p2", "p3"], 20)
    assert ranked == ["p2", "p1"]
    assert rejected == ["p9"]


def test_full_command_chain(tmp_path):
    script = tmp_path / "script.jsonl"
    script.write_text(
        json.dumps({"schema": "zhmf-script/1", "default_policy": "presented_order"})
        + "\n"
    )
    config = json.dumps(
        {
            "data": {"checkins": str(FIXTURES / "mini_checkins.csv")},
            "backend": {"script": str(script)},
            "embedding": {"dim": 32},
            "output_dir": str(tmp_path / "out"),
        }
    )

    pre = json.loads(zhmf.preprocess(config))
    assert pre["trajectories"] > 0
    assert pre["test"] > 0

    build = json.loads(zhmf.build_memory(config))
    assert build["experience_steps"] > 0

    run = json.loads(zhmf.run(config))
    assert run["completed"] == run["total"] > 0

    table = zhmf.evaluate(config)
    assert table.splitlines()[0].startswith("scope")
    jsonl = zhmf.evaluate(config, "", "jsonl")
    overall = [
        json.loads(line)
        for line in jsonl.splitlines()
        if json.loads(line)["scope"] == "overall"
    ]
    assert len(overall) == 1
    assert 0.0 <= overall[0]["mrr"] <= 1.0

    with pytest.raises(zhmf.ConfigError):
        zhmf.evaluate(config, "", "yaml")


def test_strict_config_rejects_unknown_keys():
    with pytest.raises(zhmf.ConfigError):
        zhmf.preprocess(json.dumps({"runn": {}}))
