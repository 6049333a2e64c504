"""Parsing, duration labels, filtering, sentence segmentation, splits, stats."""

import math
from datetime import date

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trialspan.errors import EmptyDatasetError, XmlParseError
from trialspan.ingest import (
    Skip,
    TrialRecord,
    compute_duration,
    filter_eligible,
    ingest_directory,
    load_jsonl,
    parse_trial_xml,
    record_from_dict,
    record_to_dict,
    save_jsonl,
    split_sentences,
    split_temporal,
    summarize,
)
from trialspan.ingest import InvalidIntervalError

from _synth import make_records


class TestParseTrialXml:
    def test_reference_record(self, table_fixture_xml):
        record = parse_trial_xml(table_fixture_xml)
        assert isinstance(record, TrialRecord)
        assert record.nct_id == "NCT00610792"
        assert record.phase == 2
        assert record.diseases == ["Ovarian Cancer"]
        assert record.drugs == ["bortezomib and pegylated liposomal doxorubicin"]
        assert record.start_date == date(2006, 7, 1)
        assert record.completion_date == date(2009, 9, 1)
        # month-granularity dates: 1158 days / 365.25
        assert record.duration_years == pytest.approx(1158 / 365.25, abs=1e-12)
        assert abs(record.duration_years - 3.2) <= 0.05
        assert "ECOG performance status grade 0 or 1" in record.inclusion
        assert "Active infection" in record.exclusion

    def test_observational_study_is_skipped(self, fixtures_dir):
        doc = (fixtures_dir / "observational.xml").read_text()
        assert parse_trial_xml(doc) == Skip("non-interventional", "NCT90000001")

    def test_missing_completion_date_is_skipped(self, fixtures_dir):
        doc = (fixtures_dir / "missing_completion.xml").read_text()
        assert parse_trial_xml(doc) == Skip("missing completion_date", "NCT90000002")

    def test_non_drug_intervention_is_skipped(self, fixtures_dir):
        doc = (fixtures_dir / "no_drug.xml").read_text()
        assert parse_trial_xml(doc) == Skip("no drug intervention", "NCT90000003")

    def test_malformed_xml_raises_with_byte_offset(self, fixtures_dir):
        doc = (fixtures_dir / "malformed.xml").read_text()
        with pytest.raises(XmlParseError) as exc:
            parse_trial_xml(doc)
        assert isinstance(exc.value.byte_offset, int)
        assert 0 <= exc.value.byte_offset <= len(doc.encode())

    def test_combined_phase_maps_to_later_phase(self, table_fixture_xml):
        doc = table_fixture_xml.replace("Phase 2", "Phase 1/Phase 2")
        assert parse_trial_xml(doc).phase == 2

    def test_na_phase_is_skipped(self, table_fixture_xml):
        doc = table_fixture_xml.replace("Phase 2", "N/A")
        assert parse_trial_xml(doc) == Skip("unknown phase", "NCT00610792")


class TestComputeDuration:
    def test_table_example(self):
        assert compute_duration(date(2006, 7, 1), date(2009, 9, 1)) == pytest.approx(
            1158 / 365.25)
        assert abs(compute_duration(date(2006, 7, 1), date(2009, 9, 1)) - 3.2) <= 0.05

    def test_one_calendar_year(self):
        assert compute_duration(date(2019, 1, 1), date(2020, 1, 1)) == pytest.approx(
            1.0, abs=0.003)

    def test_one_day(self):
        assert compute_duration(date(2019, 1, 1), date(2019, 1, 2)) == pytest.approx(
            1 / 365.25)

    def test_invalid_interval(self):
        with pytest.raises(InvalidIntervalError):
            compute_duration(date(2020, 1, 1), date(2020, 1, 1))
        with pytest.raises(InvalidIntervalError):
            compute_duration(date(2020, 1, 2), date(2020, 1, 1))


class TestFilterEligible:
    def _record(self, **kwargs):
        base = dict(
            nct_id="NCT00000001", phase=2, diseases=["ovarian cancer"],
            drugs=["bortezomib", "doxorubicin"],
            inclusion=["Age >= 18"], exclusion=["Active infection"],
            start_date=date(2006, 7, 1), completion_date=date(2009, 9, 1),
            duration_years=3.2,
        )
        base.update(kwargs)
        return TrialRecord(**base)

    def test_reference_record_passes(self):
        assert filter_eligible(self._record()) is True

    def test_too_long_fails(self):
        assert filter_eligible(self._record(duration_years=12.0)) is False

    def test_boundary_durations(self):
        assert filter_eligible(self._record(duration_years=9.999)) is True
        assert filter_eligible(self._record(duration_years=10.0)) is True
        assert filter_eligible(self._record(duration_years=10.001)) is False

    def test_no_drugs_fails(self):
        assert filter_eligible(self._record(drugs=[])) is False

    def test_no_criteria_fails(self):
        assert filter_eligible(self._record(inclusion=[], exclusion=[])) is False

    def test_pure_predicate(self):
        record = self._record()
        before = record_to_dict(record)
        filter_eligible(record)
        assert record_to_dict(record) == before


class TestSplitSentences:
    def test_headers_and_delimiters(self):
        text = ("Inclusion Criteria: Age >= 18; ECOG 0 or 1 "
                "Exclusion Criteria: Active infection")
        assert split_sentences(text) == (["Age >= 18", "ECOG 0 or 1"],
                                         ["Active infection"])

    def test_empty_input(self):
        assert split_sentences("") == ([], [])

    def test_no_headers_defaults_to_inclusion(self):
        assert split_sentences("Life expectancy of at least 3 months") == (
            ["Life expectancy of at least 3 months"], [])

    def test_bullets_and_newlines(self):
        text = "Inclusion Criteria:\n  -  Age >= 18\n  -  Signed consent\n"
        assert split_sentences(text) == (["Age >= 18", "Signed consent"], [])

    @given(st.text(max_size=300))
    def test_never_emits_empty_sentences(self, text):
        incl, excl = split_sentences(text)
        assert all(s.strip() for s in incl + excl)

    @given(st.text(alphabet=st.characters(categories=("Lu", "Ll", "Nd", "Zs"),
                                          include_characters=";\n-"),
                   max_size=300))
    def test_preserves_alphanumeric_content(self, text):
        incl, excl = split_sentences(text)
        def alnum(s):
            return "".join(ch for ch in s.lower() if ch.isalnum())
        joined = alnum("".join(incl + excl))
        source = alnum(text)
        # header words are consumed at most once each
        for header in ("inclusioncriteria", "exclusioncriteria"):
            if header in source and header not in joined:
                source = source.replace(header, "", 1)
        assert joined == source


class TestSplitTemporal:
    def test_basic_partition(self):
        records = make_records(2, seed=1)
        records[0].start_date = date(2018, 6, 1)
        records[1].start_date = date(2019, 6, 1)
        split = split_temporal(records, date(2019, 1, 1))
        assert split.train == [records[0]]
        assert split.test == [records[1]]

    def test_degenerate_partition(self):
        records = make_records(4, seed=2)
        for r in records:
            r.start_date = date(2020, 3, 1)
        split = split_temporal(records, date(2019, 1, 1))
        assert split.train == [] and len(split.test) == 4

    def test_partition_property(self):
        records = make_records(10, seed=3)
        cutoff = date(2019, 1, 1)
        split = split_temporal(records, cutoff)
        ids = lambda rs: {r.nct_id for r in rs}
        assert ids(split.train) | ids(split.test) == ids(records)
        assert ids(split.train) & ids(split.test) == set()
        assert all(r.start_date >= cutoff for r in split.test)
        assert all(r.start_date < cutoff for r in split.train)

    def test_empty_input(self):
        with pytest.raises(EmptyDatasetError):
            split_temporal([], date(2019, 1, 1))


def _quantile_oracle(values, q):
    """Brute-force linear-interpolation quantile."""
    ordered = sorted(values)
    pos = q * (len(ordered) - 1)
    lo = math.floor(pos)
    hi = math.ceil(pos)
    return ordered[lo] + (ordered[hi] - ordered[lo]) * (pos - lo)


class TestSummarize:
    def _records_with_durations(self, durations, phase=2):
        records = make_records(len(durations), seed=4)
        for record, duration in zip(records, durations):
            record.duration_years = duration
            record.phase = phase
        return records

    def test_tiny_example(self):
        stats = summarize(self._records_with_durations([1.0, 2.0, 3.0]))
        assert stats.overall.mean == pytest.approx(2.0)
        assert stats.overall.median == pytest.approx(2.0)
        assert stats.overall.count == 3

    def test_against_quantile_oracle(self):
        durations = [0.003, 0.83, 1.73, 3.00]
        stats = summarize(self._records_with_durations(durations))
        assert stats.overall.q1 == pytest.approx(_quantile_oracle(durations, 0.25))
        assert stats.overall.median == pytest.approx(_quantile_oracle(durations, 0.5))
        assert stats.overall.q3 == pytest.approx(_quantile_oracle(durations, 0.75))
        # frozen oracle values
        assert stats.overall.q1 == pytest.approx(0.62325)
        assert stats.overall.median == pytest.approx(1.28)
        assert stats.overall.q3 == pytest.approx(2.0475)

    def test_quantile_ordering_invariant(self):
        rng = np.random.default_rng(0)
        durations = rng.uniform(0.1, 9.5, size=25).tolist()
        stats = summarize(self._records_with_durations(durations))
        s = stats.overall
        assert s.min <= s.q1 <= s.median <= s.q3

    def test_per_phase(self):
        records = make_records(40, seed=5)
        stats = summarize(records)
        per_phase_total = sum(s.count for s in stats.per_phase.values() if s is not None)
        assert per_phase_total == stats.overall.count
        for phase, s in stats.per_phase.items():
            if s is not None:
                expected = [r.duration_years for r in records if r.phase == phase]
                assert s.count == len(expected)
                assert s.mean == pytest.approx(float(np.mean(expected)))

    def test_empty_input(self):
        with pytest.raises(EmptyDatasetError):
            summarize([])


class TestJsonlRoundTrip:
    def test_round_trip_identity(self, tmp_path):
        records = make_records(12, seed=6)
        path = tmp_path / "dataset.jsonl"
        save_jsonl(records, path)
        assert load_jsonl(path) == records

    def test_bytes_are_stable(self, tmp_path):
        records = make_records(5, seed=7)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_jsonl(records, a)
        save_jsonl(records, b)
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes().endswith(b"\n")

    def test_dict_round_trip(self):
        record = make_records(1, seed=8)[0]
        assert record_from_dict(record_to_dict(record)) == record


class TestIngestDirectory:
    def test_fixture_directory(self, fixtures_dir, tmp_path):
        # malformed.xml raises, so point at a clean copy of the others
        clean = tmp_path / "xml"
        clean.mkdir()
        for name in ("NCT00610792.xml", "observational.xml",
                     "missing_completion.xml", "no_drug.xml"):
            (clean / name).write_text((fixtures_dir / name).read_text())
        records, skips = ingest_directory(clean)
        assert [r.nct_id for r in records] == ["NCT00610792"]
        assert {s.reason for s in skips} == {
            "non-interventional", "missing completion_date", "no drug intervention"}
