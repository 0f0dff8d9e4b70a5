import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asrmerge.dataprep import (
    DataPrepError,
    DatasetKind,
    Manifest,
    SampleRecord,
    cap_manifest,
    clean_manifest,
    clean_transcript,
    filter_samples,
    flag_truncation,
    language_table,
    load_rules,
    lookup_language,
    prepare,
    read_jsonl_manifest,
    read_manifest,
    read_tsv_manifest,
    support_language_names,
    upsample,
    vote_score,
    write_jsonl_manifest,
)


def rec(i, duration=2.0, text="hello world", up=0, down=0, flagged=False):
    return SampleRecord(f"r{i}", f"clips/{i}.mp3", duration, text, up, down, None, flagged)


def spont(i, votes, duration=2.0, text="hi"):
    return SampleRecord(f"s{i}", f"{i}.wav", duration, text, single_votes=votes)


def scripted(records):
    return Manifest("lg", DatasetKind.SCRIPTED, records)


def test_filter_examples():
    m = scripted([rec(0), rec(1, text="   "), rec(2, flagged=True), rec(3, duration=0.0), rec(4, text="\t\n")])
    assert [r.id for r in filter_samples(m).records] == ["r0"]
    ok = scripted([rec(i) for i in range(4)])
    assert filter_samples(ok) == ok


def test_filter_idempotent(rng):
    records = [rec(i, duration=float(rng.integers(0, 3)), flagged=bool(rng.integers(0, 2))) for i in range(40)]
    once = filter_samples(scripted(records))
    assert filter_samples(once) == once


def test_vote_score_examples():
    assert vote_score(rec(0, up=3, down=1), DatasetKind.SCRIPTED) == 2
    assert vote_score(rec(0, up=0, down=2), DatasetKind.SCRIPTED) == -2
    assert vote_score(spont(0, 0), DatasetKind.SPONTANEOUS) == 0
    with pytest.raises(DataPrepError):
        vote_score(spont(0, 3), DatasetKind.SCRIPTED)
    with pytest.raises(DataPrepError):
        vote_score(SampleRecord("x", "x", 1.0, "t"), DatasetKind.SPONTANEOUS)


def test_negative_votes_rejected_on_record():
    with pytest.raises(DataPrepError):
        SampleRecord("x", "x", 1.0, "t", up_votes=-1, down_votes=0)
    with pytest.raises(DataPrepError):
        SampleRecord("x", "x", float("nan"), "t")


def test_upsample_copies_adjacent():
    m = scripted([rec(0, up=2), rec(1), rec(2, up=0, down=2)])
    out = upsample(m)
    assert [r.id for r in out.records] == ["r0", "r0", "r0", "r1", "r2"]


def test_cap_examples():
    small = scripted([rec(i) for i in range(50)])
    assert cap_manifest(small, 100_000) is small
    twelve = scripted([rec(i) for i in range(12)])
    a = cap_manifest(twelve, 5, seed=7)
    b = cap_manifest(twelve, 5, seed=7)
    assert len(a) == 5
    assert a == b
    assert len(cap_manifest(twelve, 1, seed=0)) == 1
    with pytest.raises(DataPrepError):
        cap_manifest(twelve, 0)


@given(n=st.integers(0, 60), cap=st.integers(1, 80), seed=st.integers(0, 2**32))
@settings(max_examples=100, deadline=None)
def test_cap_is_ordered_subset(n, cap, seed):
    m = scripted([rec(i) for i in range(n)])
    out = cap_manifest(m, cap, seed)
    assert len(out) == min(n, cap)
    pos = [int(r.id[1:]) for r in out.records]
    assert pos == sorted(pos)
    assert len(set(pos)) == len(pos)


def test_truncation_examples():
    m = scripted([rec(0, duration=45.2), rec(1, duration=30.0), rec(2, duration=3.1)])
    out = flag_truncation(m)
    a, b, c = out.records
    assert a.truncated and a.effective_duration_s == 30.0 and a.duration_s == 45.2
    assert not b.truncated and b.effective_duration_s is None
    assert c == m.records[2]
    assert flag_truncation(out) == out
    assert [r.transcript for r in out.records] == [r.transcript for r in m.records]


def test_clean_examples():
    assert clean_transcript("a\tb\n") == "a b"
    assert clean_transcript("  x\x00y    z ") == "xy z"
    assert clean_transcript("é") == "é"
    assert clean_transcript("a\tb\n", rules=[]) == "a\tb\n"


@given(st.text(max_size=40))
@settings(max_examples=300, deadline=None)
def test_clean_idempotent(text):
    once = clean_transcript(text)
    assert clean_transcript(once) == once


def test_load_rules(tmp_path):
    p = tmp_path / "rules.tsv"
    p.write_text("# drop punctuation\n[.,!?]\t\n\n@nfc\nfoo\tbar\n", encoding="utf-8")
    rules = load_rules(p)
    assert rules == [("[.,!?]", ""), ("@nfc", ""), ("foo", "bar")]
    assert clean_transcript("foo, bar!", rules) == "bar bar"

    bad = tmp_path / "bad.tsv"
    bad.write_text("ok\t\n([unclosed\tx\n", encoding="utf-8")
    with pytest.raises(DataPrepError, match=":2:"):
        load_rules(bad)


def test_only_cleaning_touches_transcripts(rng):
    records = [rec(i, duration=float(rng.uniform(0.5, 60)), text=f" t{i}\t x ", up=int(rng.integers(0, 3))) for i in range(30)]
    m = scripted(records)
    texts = {r.id: r.transcript for r in m.records}
    for stage in (filter_samples, flag_truncation, upsample, lambda x: cap_manifest(x, 10, 3)):
        for r in stage(m).records:
            assert r.transcript == texts[r.id]
    cleaned = clean_manifest(m)
    assert all(r.transcript == f"t{r.id[1:]} x" for r in cleaned.records)


def test_tsv_reader_aliases_and_kind(tmp_path):
    cv = tmp_path / "cv.tsv"
    cv.write_text(
        "client_id\tpath\tsentence\tup_votes\tdown_votes\tduration_ms\tflags\n"
        "c\ta.mp3\tHello there\t2\t0\t1500\t\n"
        "c\tb.mp3\tSecond\t1\t1\t31000\t1\n",
        encoding="utf-8",
    )
    m = read_tsv_manifest(cv, language="lg")
    assert m.kind is DatasetKind.SCRIPTED
    assert [r.id for r in m.records] == ["a.mp3", "b.mp3"]
    assert m.records[0].duration_s == 1.5
    assert m.records[1].flagged

    sps = tmp_path / "sps.tsv"
    sps.write_text("audio_id\taudio_file\tduration\ttranscription\tvotes\nx1\tx1.wav\t4.0\tsome words\t3\n", encoding="utf-8")
    m2 = read_tsv_manifest(sps)
    assert m2.kind is DatasetKind.SPONTANEOUS
    assert m2.records[0].single_votes == 3 and m2.records[0].up_votes is None


def test_tsv_reader_rejects_duplicates_and_bad_headers(tmp_path):
    dup = tmp_path / "dup.tsv"
    dup.write_text("id\tpath\tduration\tsentence\tvotes\na\ta\t1\tx\t0\na\tb\t1\ty\t0\n", encoding="utf-8")
    with pytest.raises(DataPrepError, match="duplicate"):
        read_tsv_manifest(dup)
    nohead = tmp_path / "nohead.tsv"
    nohead.write_text("foo\tbar\n1\t2\n", encoding="utf-8")
    with pytest.raises(DataPrepError):
        read_tsv_manifest(nohead)


def test_jsonl_round_trip(tmp_path):
    m = flag_truncation(scripted([rec(0, duration=40.0, text="é ü"), rec(1)]))
    write_jsonl_manifest(m, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl")
    assert back == m
    first = json.loads((tmp_path / "m.jsonl").read_text(encoding="utf-8").splitlines()[0])
    assert first["truncated"] is True and first["kind"] == "SCRIPTED"
    assert read_jsonl_manifest(tmp_path / "m.jsonl") == m


def test_prepare_counts():
    records = [spont(0, 0), spont(1, 1), spont(2, 2, duration=40.0), spont(3, 5, text=" ")]
    out, counts = prepare(Manifest("sps", "SPONTANEOUS", records), cap=100_000)
    assert counts == {"input": 4, "filtered": 3, "cleaned": 3, "truncated_flagged": 1, "upsampled": 6, "capped": 6}
    assert len(out) == 6
    _, capped = prepare(Manifest("sps", "SPONTANEOUS", records), cap=4, seed=1)
    assert capped["capped"] == 4


# ------------------------------------------------------------- language table

EXPECTED_TARGETS = {
    # target: (support count, proxy, test_only)
    "qxp": (13, "Spanish", True),
    "bas": (None, None, True),
    "ush": (None, None, True),
    "ady": (1, "Kazakh", True),
    "kbd": (None, None, True),
    "sco": (0, "English", False),
    "top": (0, None, False),
    "tob": (0, None, False),
}


def test_language_table_shape():
    table = language_table()
    assert len(table) == 26
    assert len({r.target for r in table}) == 26
    assert sorted(r.target for r in table if r.test_only) == ["ady", "bas", "kbd", "qxp", "ush"]
    assert sorted(r.target for r in table if not r.supports) == ["sco", "tob", "top"]
    for code, (n, proxy, test_only) in EXPECTED_TARGETS.items():
        row = lookup_language(code)
        assert row.test_only is test_only
        if n is not None:
            assert len(row.supports) == n
        if proxy is not None:
            assert row.proxy == proxy


def test_lookup_examples():
    qxp = lookup_language("qxp")
    assert qxp.script == "Latin"
    assert len(set(qxp.supports)) == 13
    ady = lookup_language("ady")
    assert ady.supports == ("ab",)
    assert ady.script == "Cyrillic & Latin"
    with pytest.raises(KeyError):
        lookup_language("xx")


def test_support_codes_are_named():
    names = support_language_names()
    used = {s for row in language_table() for s in row.supports}
    assert used <= set(names)


def test_upsample_law_matches_loop(rng):
    for _ in range(50):
        n = int(rng.integers(0, 20))
        votes = rng.integers(-3, 6, size=n)
        m = Manifest("x", "SPONTANEOUS", [spont(i, 0) for i in range(n)])
        m = m.with_records(SampleRecord(r.id, r.audio_path, 1.0, "t", single_votes=max(int(v), 0)) for r, v in zip(m.records, votes))
        expected = 0
        for r in m.records:
            expected += max(r.single_votes, 0) + 1
        assert len(upsample(m)) == expected
        assert np.all(np.diff([int(r.id[1:]) for r in upsample(m).records]) >= 0)
