from pathlib import Path

import numpy as np
import pytest

from escm2.data import read_dataset_csv, write_dataset_csv
from escm2.ingest import (MAX_BAD_FRACTION, OOV_INDEX, IngestError, IngestSchema, Vocabulary,
                          load_csv, load_csv_report, schema_from_dict, split, write_ingest_csv)

FIXTURE = Path(__file__).parent / "fixtures" / "impressions_100.csv"
SCHEMA = IngestSchema(feature_columns=("user_id", "item_id", "category"))


def hand_parse(path):
    """Plain line-by-line reading of the fixture: good rows, malformed line numbers, rejections."""
    good, bad, rejected = [], [], 0
    lines = Path(path).read_text().splitlines()
    for line_no, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if not all(f.isdigit() for f in fields):
            bad.append(line_no)
            continue
        *codes, o, r = (int(f) for f in fields)
        if r == 1 and o == 0:
            rejected += 1
            continue
        good.append((line_no - 2, codes, o, r))
    return good, bad, rejected


def test_fixture_rows_match_hand_parse():
    ds, vocab, report = load_csv_report(FIXTURE, SCHEMA)
    good, bad, rejected = hand_parse(FIXTURE)
    assert report.rows_read == 100
    assert [e.line for e in report.malformed] == bad == [79]
    assert report.rejected_conversion_without_click == rejected == 1
    assert len(ds) == len(good) == 98
    assert ds.provenance == "ingested"
    decode = {col: {v: k for k, v in m.items()} for col, m in vocab.columns.items()}
    for i, (pid, codes, o, r) in enumerate(good):
        assert ds.pair_id[i] == pid
        back = [decode[col][int(idx)] for col, idx in zip(SCHEMA.feature_columns, ds.feature_ids[i])]
        assert back == codes
        assert (ds.click[i], ds.conversion[i]) == (o, r)


def test_vocabulary_is_a_bijection(tmp_path):
    ds, vocab, _ = load_csv_report(FIXTURE, SCHEMA)
    indices = [v for m in vocab.columns.values() for v in m.values()]
    assert sorted(indices) == list(range(1, vocab.size))
    assert OOV_INDEX not in ds.feature_ids
    vocab.to_json(tmp_path / "vocab.json")
    assert Vocabulary.from_json(tmp_path / "vocab.json") == vocab


def test_corrupt_vocabulary_sidecar(tmp_path):
    (tmp_path / "v.json").write_text('{"a": {"1": 1}, "b": {"2": 1}}')
    with pytest.raises(IngestError):
        Vocabulary.from_json(tmp_path / "v.json")


def test_unknown_codes_map_to_oov(tmp_path):
    _, vocab, _ = load_csv_report(FIXTURE, SCHEMA)
    write_ingest_csv(tmp_path / "held.csv", SCHEMA, [(1001, 7, 3, 1, 1), (555, 7, 12345, 0, 0)])
    ds, _, report = load_csv_report(tmp_path / "held.csv", SCHEMA, vocab)
    assert OOV_INDEX not in ds.feature_ids[0]
    assert ds.feature_ids[1, 0] == OOV_INDEX and ds.feature_ids[1, 2] == OOV_INDEX
    assert report.oov_codes == 2


def test_header_only_file_gives_empty_dataset(tmp_path):
    (tmp_path / "e.csv").write_text("user_id,item_id,category,click,conversion\n")
    ds = load_csv(tmp_path / "e.csv", SCHEMA)
    assert len(ds) == 0
    assert ds.feature_ids.shape == (0, 3)


def test_missing_header_or_columns(tmp_path):
    (tmp_path / "none.csv").write_text("")
    with pytest.raises(IngestError, match="header"):
        load_csv(tmp_path / "none.csv", SCHEMA)
    (tmp_path / "cols.csv").write_text("user_id,item_id,click,conversion\n1,2,0,0\n")
    with pytest.raises(IngestError, match="category"):
        load_csv(tmp_path / "cols.csv", SCHEMA)


def test_too_many_bad_rows_fail_the_file(tmp_path):
    rows = [(1, 2, 3, 0, 0)] * 98
    write_ingest_csv(tmp_path / "b.csv", SCHEMA, rows + [(1, 2, 3, 2, 0), (1, -2, 3, 0, 0)])
    assert MAX_BAD_FRACTION == 0.01
    with pytest.raises(IngestError, match="2 of 100"):
        load_csv(tmp_path / "b.csv", SCHEMA)


def test_id_column_and_delimiter(tmp_path):
    schema = IngestSchema(feature_columns=("f",), delimiter="\t", id_column="rid")
    (tmp_path / "t.tsv").write_text("rid\tf\tclick\tconversion\n90\t4\t1\t1\n12\t5\t0\t0\n")
    ds = load_csv(tmp_path / "t.tsv", schema)
    assert ds.pair_id.tolist() == [90, 12]


def test_schema_validation():
    with pytest.raises(ValueError):
        IngestSchema(feature_columns=())
    with pytest.raises(ValueError):
        IngestSchema(feature_columns=("click",))
    with pytest.raises(ValueError):
        IngestSchema(feature_columns=("a",), delimiter=";;")
    with pytest.raises(ValueError, match="colour"):
        schema_from_dict({"feature_columns": ["a"], "colour": 1})
    assert schema_from_dict({"feature_columns": ["a"]}).click_column == "click"


def test_export_roundtrip_is_idempotent(tmp_path):
    ds = load_csv(FIXTURE, SCHEMA)
    write_dataset_csv(ds, tmp_path / "d.csv")
    once = read_dataset_csv(tmp_path / "d.csv", provenance="ingested")
    assert once.equals(ds)
    write_dataset_csv(once, tmp_path / "d2.csv")
    assert (tmp_path / "d.csv").read_text() == (tmp_path / "d2.csv").read_text()


def test_split_contract():
    ds = load_csv(FIXTURE, SCHEMA)
    tr, va = split(ds, 0.1, 3)
    assert len(tr) + len(va) == len(ds)
    assert len(va) == round(0.1 * len(ds))
    assert not set(tr.pair_id) & set(va.pair_id)
    tr2, va2 = split(ds, 0.1, 3)
    assert tr.equals(tr2) and va.equals(va2)
    with pytest.raises(ValueError):
        split(ds, 1.0, 0)
    with pytest.raises(ValueError):
        split(ds, 0.0, 0)
