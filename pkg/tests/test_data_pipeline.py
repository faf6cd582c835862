import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import write_csv
from honestforest.data_pipeline import (ActionEvent, Interaction, SampleReport, build_samples,
                                        filter_one_way, haversine_km, ingest_users, load_samples,
                                        read_events, zip_distance)
from honestforest.errors import DataError, MalformedStreamError, SchemaError
from honestforest.synthetic_dgp import simulate_world, validation_config, write_world

HEADER = ["user_id", "gender", "age", "sport_freq", "income", "education", "zip", "height"]


def user_rows(n, start=0, gender="m"):
    return [[f"u{start + i}", gender, 20 + i, i % 4, 1 + i % 6, 1 + i % 5, f"{10000 + start + i}", 170 + i]
            for i in range(n)]


def ev(s, r, t, a):
    return ActionEvent(s, r, float(t), a)


# --------------------------------------------------------------------------
# ingestion


def test_clean_file_keeps_every_row(tmp_path):
    path = write_csv(tmp_path / "users.csv", HEADER, user_rows(10))
    users = ingest_users(path)
    assert len(users) == 10
    assert sum(users.drops.values()) == 0
    assert [f.name for f in users.features] == ["height"]


def test_daily_sport_frequency_is_dropped(tmp_path):
    rows = user_rows(5)
    rows[2][3] = "daily"
    users = ingest_users(write_csv(tmp_path / "users.csv", HEADER, rows))
    assert len(users) == 4
    assert users.drops["daily"] == 1
    assert "u2" not in users.frame.index


def test_conflicting_answers_drop_one_row(tmp_path):
    rows = user_rows(6)
    rows[4][4] = "2|5"
    users = ingest_users(write_csv(tmp_path / "users.csv", HEADER, rows))
    assert users.drops["conflict"] == 1
    assert sum(users.drops.values()) == 1
    assert len(users) == 5


def test_missing_and_implausible_rows(tmp_path):
    rows = user_rows(6)
    rows[0][2] = ""       # missing age
    rows[1][2] = 16       # under age
    rows[2][4] = 9        # income out of range
    users = ingest_users(write_csv(tmp_path / "users.csv", HEADER, rows))
    assert users.drops["missing"] == 1
    assert users.drops["implausible"] == 2
    assert len(users) == 3


def test_exclusions_remove_columns(tmp_path):
    path = write_csv(tmp_path / "users.csv", HEADER, user_rows(4))
    users = ingest_users(path, exclusions=["height"])
    assert "height" not in users.frame.columns
    assert users.features == ()


def test_schema_errors(tmp_path):
    path = write_csv(tmp_path / "users.csv", HEADER[:-2], [r[:-2] for r in user_rows(3)])
    with pytest.raises(SchemaError):
        ingest_users(path)
    with pytest.raises(DataError):
        ingest_users(tmp_path / "absent.csv")
    rows = user_rows(2)
    for r in rows:
        r[3] = "daily"
    with pytest.raises(DataError):
        ingest_users(write_csv(tmp_path / "all_daily.csv", HEADER, rows))


def test_records_round_trip(tmp_path):
    users = ingest_users(write_csv(tmp_path / "users.csv", HEADER, user_rows(3)))
    rec = users.records()[1]
    assert (rec.user_id, rec.age, rec.sport_frequency, rec.income_level, rec.education_level) == (
        "u1", 21, 1, 2, 2)
    assert rec.ordered_features == (171.0,)


# --------------------------------------------------------------------------
# one-way filter: the three worked scenarios


def test_visit_then_message_is_valid():
    out = filter_one_way([ev("A", "B", 0, "visit"), ev("A", "B", 1, "message")])
    assert out == [Interaction("A", "B", True, 0.0)]


def test_recipient_visit_is_invisible():
    out = filter_one_way([ev("A", "B", 0, "visit"), ev("B", "A", 1, "visit"),
                          ev("A", "B", 2, "message")])
    ab = [i for i in out if (i.sender_id, i.recipient_id) == ("A", "B")]
    assert ab == [Interaction("A", "B", True, 0.0)]


def test_provoked_message_is_discarded():
    out = filter_one_way([ev("A", "B", 0, "visit"), ev("A", "B", 1, "like"),
                          ev("B", "A", 2, "visit"), ev("B", "A", 3, "like"),
                          ev("A", "B", 4, "message")])
    ab = [i for i in out if (i.sender_id, i.recipient_id) == ("A", "B")]
    assert ab == [Interaction("A", "B", False, 0.0)]


def test_ties_keep_input_order():
    # message listed before the recipient's like at the same second: counts
    out = filter_one_way([ev("A", "B", 0, "visit"), ev("A", "B", 5, "message"),
                          ev("B", "A", 5, "like")])
    assert out[0].message_sent
    out = filter_one_way([ev("A", "B", 0, "visit"), ev("B", "A", 5, "like"),
                          ev("A", "B", 5, "message")])
    assert not [i for i in out if i.sender_id == "A"][0].message_sent


def test_malformed_streams():
    with pytest.raises(MalformedStreamError):
        filter_one_way([ev("A", "B", 0, "message")])
    with pytest.raises(MalformedStreamError):
        ev("A", "B", 0, "wink")
    with pytest.raises(MalformedStreamError):
        ev("A", "A", 0, "visit")


def test_filter_is_idempotent_on_its_output():
    events = [ev("A", "B", 0, "visit"), ev("A", "B", 1, "message"), ev("C", "B", 2, "visit"),
              ev("B", "C", 3, "like"), ev("C", "B", 4, "message"), ev("D", "E", 5, "visit")]
    once = filter_one_way(events)
    replay = []
    for it in once:
        replay.append(ev(it.sender_id, it.recipient_id, it.first_visit_time, "visit"))
        if it.message_sent:
            replay.append(ev(it.sender_id, it.recipient_id, it.first_visit_time, "message"))
    assert filter_one_way(replay) == once


# --------------------------------------------------------------------------
# distances


def test_haversine_berlin_munich():
    # law-of-cosines evaluation of the same sphere, frozen
    assert haversine_km(52.52, 13.405, 48.137, 11.575) == pytest.approx(504.337899438232, rel=1e-9)


def test_zip_distance_basics():
    cents = {"a": (52.52, 13.405), "b": (48.137, 11.575)}
    assert zip_distance("a", "a", cents) == 0.0
    assert zip_distance("a", "b", cents) == zip_distance("b", "a", cents)
    assert math.isnan(zip_distance("a", "zz", cents))


coords = st.tuples(st.floats(-80, 80), st.floats(-179, 179))


@settings(max_examples=200, deadline=None)
@given(coords, coords, coords)
def test_distance_symmetry_and_triangle(p, q, r):
    cents = {"p": p, "q": q, "r": r}
    pq, qp = zip_distance("p", "q", cents), zip_distance("q", "p", cents)
    assert pq == qp
    assert pq >= 0
    assert pq <= zip_distance("p", "r", cents) + zip_distance("r", "q", cents) + 1e-6


# --------------------------------------------------------------------------
# sample assembly


def _mini_users(tmp_path):
    rows = user_rows(3, 0, "f") + user_rows(3, 3, "m")
    rows[5][3] = 3
    return ingest_users(write_csv(tmp_path / "users.csv", HEADER, rows))


def test_partition_by_recipient_gender(tmp_path):
    users = _mini_users(tmp_path)
    cents = {f"{10000 + i}": (50.0 + 0.1 * i, 10.0) for i in range(6)}
    its = [Interaction("u3", "u0", False, 0), Interaction("u4", "u1", True, 1),
           Interaction("u5", "u2", False, 2), Interaction("u0", "u5", True, 3),
           Interaction("u1", "u4", False, 4)]
    report = SampleReport()
    female, male = build_samples(users, its, cents, report)
    assert (female.n, male.n) == (3, 2)
    assert (report.female, report.male) == (3, 2)
    row = list(male.recipient_ids).index("u5")
    assert (male.y[row], male.d[row]) == (1.0, 3)
    assert male.column("distance")[row] == pytest.approx(haversine_km(50.0, 10.0, 50.5, 10.0))


def test_assembly_errors(tmp_path):
    users = _mini_users(tmp_path)
    cents = {f"{10000 + i}": (50.0, 10.0) for i in range(6)}
    with pytest.raises(DataError):
        build_samples(users, [Interaction("u3", "nobody", False, 0)], cents)
    with pytest.raises(DataError):
        build_samples(users, [Interaction("u3", "u4", False, 0)], cents)


def test_emitted_log_counts(tmp_path):
    world = simulate_world(validation_config(n=300, seed=4))
    write_world(world, tmp_path)
    # count oracle: ordered pairs whose first sender visit precedes any visible
    # action of the recipient toward the sender, split by the recipient's gender
    events = pd.read_csv(tmp_path / "events.csv", comment="#").reset_index()
    users = pd.read_csv(tmp_path / "users.csv", comment="#", dtype={"zip": str})
    gender = dict(zip(users.user_id, users.gender))
    key = list(zip(events.timestamp, events["index"]))
    events["key"] = key
    first_visit = events[events.action == "visit"].groupby(["sender_id", "recipient_id"]).key.min()
    first_visible = events[events.action != "visit"].groupby(["sender_id", "recipient_id"]).key.min()
    opened = [r for (s, r), k in first_visit.items()
              if (r, s) not in first_visible.index or first_visible[(r, s)] > k]
    expected = pd.Series([gender[r] for r in opened]).value_counts()
    _, interactions, _, female, male, _ = load_samples(tmp_path)
    assert male.n == expected.get("m", 0) == world.sample.n
    assert female.n == expected.get("f", 0)
    order = np.argsort(male.recipient_ids.astype(str))
    ref = np.argsort(world.sample.recipient_ids.astype(str))
    np.testing.assert_array_equal(male.y[order], world.sample.y[ref])
    np.testing.assert_array_equal(male.d[order], world.sample.d[ref])
    np.testing.assert_allclose(male.X[order], world.sample.X[ref], rtol=0, atol=0)


def test_read_events_rejects_bad_timestamp(tmp_path):
    path = write_csv(tmp_path / "events.csv", ["sender_id", "recipient_id", "timestamp", "action"],
                     [["a", "b", "x", "visit"]])
    with pytest.raises(MalformedStreamError):
        read_events(path)
