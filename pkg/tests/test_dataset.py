import json

import pytest

from toolcurriculum.dataset import DatasetError, Instance, dump_instances, load_instances


def test_round_trip():
    items = [
        Instance("a", "q1", "r1", ("PATH",)),
        Instance("b", "q2", "r2", ("SEARCH", "ROUTE"), category_hint="medical"),
    ]
    assert load_instances(dump_instances(items)) == items


def test_duplicate_ids():
    rec = json.dumps({"id": "x", "query": "q", "response": "r", "gold_tools": []})
    with pytest.raises(DatasetError, match="line 2: duplicate"):
        load_instances(rec + "\n" + rec + "\n")


@pytest.mark.parametrize(
    "record",
    [
        {"id": "x", "query": "q", "response": "r"},
        {"id": "x", "query": "q", "response": "r", "gold_tools": "PATH"},
        {"id": "x", "query": "q", "response": "r", "gold_tools": [], "extra": 1},
    ],
)
def test_bad_records(record):
    with pytest.raises(DatasetError):
        load_instances(json.dumps(record))
