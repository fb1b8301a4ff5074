import pytest

from chopper.ingest import load_canonical
from chopper.model import (Category, HardwareSpec, KernelRecord, KernelTable, Timestamp, TraceStore,
                           WorkloadSpec, us_to_ns, validate_store)

HW = HardwareSpec.smt(1e15, 2e9, 5.3e12, 1, 4)
WL = WorkloadSpec(1, 1024, 1, 4096, 8, 2, 128, {}, 0, 1)


def rec(corr, start, end, stream=0):
    return KernelRecord(0, stream, corr, "k", Category.Compute, start, start, end)


def test_same_stream_overlap_is_one_violation():
    v = validate_store(TraceStore.build([rec(1, 0, 101), rec(2, 100, 200)], HW, WL))
    assert len(v) == 1
    assert v[0].rule == "same-stream kernels disjoint"
    assert "corr=1" in v[0].record and "corr=2" in v[0].record


def test_other_stream_overlap_is_fine():
    assert validate_store(TraceStore.build([rec(1, 0, 101), rec(2, 100, 200, stream=1)], HW, WL)) == []


def test_end_before_start():
    v = validate_store(TraceStore.build([rec(1, 10, 5)], HW, WL))
    assert [x.rule for x in v] == ["start <= end"]


def test_generator_store_is_valid(small_bundle):
    assert validate_store(load_canonical(small_bundle[0], validate=False)) == []


def test_table_sorts_and_round_trips_records():
    recs = [rec(3, 50, 60), rec(1, 0, 10), rec(2, 20, 30)]
    t = KernelTable.from_records(recs)
    assert t.corr.tolist() == [1, 2, 3]
    assert list(t.records()) == sorted(recs, key=lambda r: r.dispatch_ts)


def test_timestamps():
    assert Timestamp.from_us(1.5).value == 1500
    assert us_to_ns(0.0005) == 0 and us_to_ns(0.0015) == 2
    with pytest.raises(ValueError):
        Timestamp(-1)


def test_spec_dict_round_trip():
    assert HardwareSpec.from_dict(HW.to_dict()) == HW
    assert WorkloadSpec.from_dict(WL.to_dict()) == WL
    assert HW.physical_core_count == 2
    assert WL.config_label == "b1s1"
