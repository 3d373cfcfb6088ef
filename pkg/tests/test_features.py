import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from microseg.features import (
    SampleMatrix,
    build_schema,
    destandardize,
    encode,
    encode_windows,
    matrix_to_csv,
    one_hot,
    standardize,
    windowize,
)
from microseg.flows import ClassifiedFlow, PeerClass

from conftest import flow


def classified(src, dst, dst_is_member=True, dst_object="internet", **kwargs):
    rec = flow(src, dst, **kwargs)
    dst_class = (
        PeerClass.member(dst) if dst_is_member else PeerClass.network_object(dst_object)
    )
    return ClassifiedFlow(rec, PeerClass.member(src), dst_class)


class TestBuildSchema:
    def test_frequency_ranked_ports(self):
        records = (
            [classified("10.0.0.1", "10.0.0.2", dst_port=443) for _ in range(10)]
            + [classified("10.0.0.1", "10.0.0.2", dst_port=53, protocol="UDP") for _ in range(5)]
            + [classified("10.0.0.1", "10.0.0.2", dst_port=8080)]
        )
        schema = build_schema(records, top_k_ports=2)
        assert schema.protocol_vocab == ("TCP", "UDP")
        assert schema.port_vocab == (53, 443)

    def test_singleton(self):
        records = [classified("10.0.0.1", "8.8.8.8", dst_is_member=False)]
        schema = build_schema(records, top_k_ports=8)
        assert schema.protocol_vocab == ("TCP",)
        assert schema.port_vocab == (443,)
        assert schema.peer_vocab == ("internet",)

    def test_tie_breaks_to_lower_port(self):
        records = [
            classified("10.0.0.1", "10.0.0.2", dst_port=8080),
            classified("10.0.0.1", "10.0.0.2", dst_port=80),
        ]
        schema = build_schema(records, top_k_ports=1)
        assert schema.port_vocab == (80,)

    def test_empty_records_error(self):
        with pytest.raises(ValueError):
            build_schema([], top_k_ports=4)

    def test_order_invariant(self):
        records = [
            classified("10.0.0.1", "10.0.0.2", dst_port=p, protocol=proto)
            for p, proto in [(443, "TCP"), (53, "UDP"), (22, "TCP"), (443, "TCP")]
        ]
        schema1 = build_schema(records, top_k_ports=2)
        schema2 = build_schema(list(reversed(records)), top_k_ports=2)
        assert schema1 == schema2

    def test_dimension_formula(self):
        records = [classified("10.0.0.1", "8.8.8.8", dst_is_member=False)]
        schema = build_schema(records, top_k_ports=8)
        # 2*(1+1) + 2*(1+1) + (1+1) + 3
        assert schema.dimension == 13


class TestOneHot:
    def test_known_value(self):
        assert one_hot("TCP", ["TCP", "UDP", "ICMP"]).tolist() == [1, 0, 0, 0]

    def test_overflow_slot(self):
        assert one_hot("GRE", ["TCP", "UDP", "ICMP"]).tolist() == [0, 0, 0, 1]

    def test_empty_vocab(self):
        assert one_hot("anything", []).tolist() == [1]

    @given(st.integers(min_value=0, max_value=30), st.integers(min_value=0, max_value=8))
    def test_always_sums_to_one(self, value, vocab_size):
        vec = one_hot(value, list(range(vocab_size)))
        assert vec.sum() == 1.0
        assert len(vec) == vocab_size + 1


class TestWindowize:
    def test_single_window(self):
        records = [classified("10.0.0.1", "10.0.0.2", timestamp=t) for t in range(60)]
        buckets = windowize(records, 60)
        assert set(w for _, w in buckets) == {0}

    def test_boundary(self):
        records = [
            classified("10.0.0.1", "10.0.0.2", timestamp=0),
            classified("10.0.0.1", "10.0.0.2", timestamp=60),
        ]
        buckets = windowize(records, 60)
        assert ("10.0.0.1", 0) in buckets and ("10.0.0.1", 1) in buckets

    def test_dual_attribution(self):
        records = [classified("10.0.0.1", "10.0.0.2", timestamp=5)]
        buckets = windowize(records, 60)
        assert ("10.0.0.1", 0) in buckets  # outbound
        assert ("10.0.0.2", 0) in buckets  # inbound
        assert buckets[("10.0.0.1", 0)][0][0] == "out"
        assert buckets[("10.0.0.2", 0)][0][0] == "in"

    def test_object_side_gets_no_bucket(self):
        records = [classified("10.0.0.1", "8.8.8.8", dst_is_member=False)]
        buckets = windowize(records, 60)
        assert list(buckets) == [("10.0.0.1", 0)]

    def test_bad_window_size(self):
        with pytest.raises(ValueError):
            windowize([], 0)


class TestEncode:
    def test_hand_accumulated_vector(self):
        # Three outbound TCP/443 flows to members, 1000 bytes each, against
        # vocabularies [TCP], [443], []: layout is
        # [outTCP,outOVF, inTCP,inOVF, out443,outOVF, in443,inOVF, member,
        #  uniq, flows, log1p(bytes)]
        records = [
            classified("10.0.0.1", "10.0.0.2", nbytes=1000) for _ in range(3)
        ]
        schema = build_schema(records, top_k_ports=4)
        contributions = [("out", r) for r in records]
        vec = encode("10.0.0.1", 0, contributions, schema)
        expected = [3, 0, 0, 0, 3, 0, 0, 0, 3, 1, 3, math.log1p(3000)]
        assert vec.values.tolist() == pytest.approx(expected)

    def test_empty_contributions_all_zero(self):
        schema = build_schema([classified("10.0.0.1", "10.0.0.2")], top_k_ports=4)
        vec = encode("10.0.0.1", 0, [], schema)
        assert vec.values.tolist() == [0.0] * schema.dimension

    def test_unique_tuples_distinguish_ports(self):
        records = [
            classified("10.0.0.1", "10.0.0.2", dst_port=443),
            classified("10.0.0.1", "10.0.0.2", dst_port=53, protocol="UDP"),
        ]
        schema = build_schema(records, top_k_ports=4)
        vec = encode("10.0.0.1", 0, [("out", r) for r in records], schema)
        uniq_index = schema.dimension - 3
        assert vec.values[uniq_index] == 2.0

    def test_permutation_invariant(self):
        records = [
            classified("10.0.0.1", "10.0.0.2", dst_port=p, nbytes=b)
            for p, b in [(443, 100), (53, 200), (443, 300), (22, 400)]
        ]
        schema = build_schema(records, top_k_ports=4)
        contributions = [("out", r) for r in records]
        vec1 = encode("10.0.0.1", 0, contributions, schema)
        vec2 = encode("10.0.0.1", 0, list(reversed(contributions)), schema)
        assert np.array_equal(vec1.values, vec2.values)

    def test_protocol_block_sums_equal_flow_counts(self):
        out = [classified("10.0.0.1", "10.0.0.2", dst_port=p) for p in (443, 80, 22)]
        inbound = [classified("10.0.0.9", "10.0.0.1", dst_port=53, protocol="UDP")]
        schema = build_schema(out + inbound, top_k_ports=8)
        contributions = [("out", r) for r in out] + [("in", r) for r in inbound]
        vec = encode("10.0.0.1", 0, contributions, schema)
        p = len(schema.protocol_vocab) + 1
        assert vec.values[:p].sum() == len(out)
        assert vec.values[p : 2 * p].sum() == len(inbound)

    def test_raw_values_non_negative(self):
        records = [classified("10.0.0.1", "10.0.0.2")]
        schema = build_schema(records, top_k_ports=2)
        vec = encode("10.0.0.1", 0, [("out", records[0])], schema)
        assert (vec.values >= 0).all()


class TestStandardize:
    def _matrix(self, columns):
        values = np.array(columns, dtype=float).T
        return SampleMatrix(
            endpoints=tuple(f"10.0.0.{i+1}" for i in range(values.shape[0])),
            windows=tuple(0 for _ in range(values.shape[0])),
            values=values,
        )

    def test_two_point_column(self):
        std = standardize(self._matrix([[0.0, 10.0]]))
        assert std.values[:, 0].tolist() == [-1.0, 1.0]
        assert std.mean.tolist() == [5.0]
        assert std.scale.tolist() == [5.0]

    def test_constant_column_guard(self):
        std = standardize(self._matrix([[7.0, 7.0, 7.0]]))
        assert std.values[:, 0].tolist() == [0.0, 0.0, 0.0]
        assert std.scale.tolist() == [1.0]

    def test_idempotent_on_standardized_data(self):
        std = standardize(self._matrix([[0.0, 10.0, 20.0], [3.0, 1.0, 2.0]]))
        again = standardize(std)
        assert np.allclose(std.values, again.values, atol=1e-12)

    def test_round_trip_within_tolerance(self):
        rng = np.random.default_rng(5)
        raw = self._matrix(rng.normal(size=(4, 30)) * 100)
        std = standardize(raw)
        assert np.allclose(destandardize(std), raw.values, atol=1e-12, rtol=0)

    def test_requires_two_rows(self):
        with pytest.raises(ValueError):
            standardize(self._matrix([[1.0]]))


class TestEncodeWindows:
    def test_matrix_row_per_endpoint_window(self):
        records = [
            classified("10.0.0.1", "10.0.0.2", timestamp=0),
            classified("10.0.0.2", "10.0.0.1", timestamp=70),
        ]
        matrix, schema = encode_windows(records, window_seconds=60, top_k_ports=4)
        assert matrix.n_rows == 4  # both endpoints in both windows
        assert matrix.dimension == schema.dimension

    def test_workers_do_not_change_output(self):
        records = [
            classified("10.0.0.1", "10.0.0.2", timestamp=t, dst_port=400 + t % 3)
            for t in range(0, 240, 10)
        ]
        m1, _ = encode_windows(records, 60, 4, workers=1)
        m2, _ = encode_windows(records, 60, 4, workers=4)
        assert np.array_equal(m1.values, m2.values)
        assert m1.endpoints == m2.endpoints

    def test_csv_export_shape(self):
        records = [classified("10.0.0.1", "10.0.0.2")]
        matrix, schema = encode_windows(records, 60, 4)
        text = matrix_to_csv(matrix)
        lines = text.strip().split("\n")
        assert lines[0].startswith("endpoint,window,f0")
        assert len(lines) == 1 + matrix.n_rows
