"""Canonical codec: roundtrips, key-order independence, strict decode."""

import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from computepool.encoding import EncodingError, decode, encode

scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-(10**30), max_value=10**30),
    st.floats(allow_nan=False),
    st.text(max_size=40),
    st.binary(max_size=40),
    st.builds(
        Fraction,
        st.integers(min_value=-(10**12), max_value=10**12),
        st.integers(min_value=1, max_value=10**12),
    ),
)

values = st.recursive(
    scalars,
    lambda inner: st.one_of(
        st.lists(inner, max_size=6),
        st.dictionaries(st.text(max_size=10), inner, max_size=6),
    ),
    max_leaves=20,
)


def canon(v):
    # decode() returns lists for both lists and tuples
    if isinstance(v, (list, tuple)):
        return [canon(x) for x in v]
    if isinstance(v, dict):
        return {k: canon(x) for k, x in v.items()}
    if isinstance(v, bytearray):
        return bytes(v)
    return v


@given(values)
@settings(max_examples=300, deadline=None)
def test_roundtrip(value):
    assert decode(encode(value)) == canon(value)


@given(values, values)
@settings(max_examples=300, deadline=None)
def test_distinct_values_encode_distinctly(a, b):
    if canon(a) != canon(b):
        assert encode(a) != encode(b)


def test_dict_key_order_never_leaks():
    assert encode({"b": 1, "a": 2}) == encode({"a": 2, "b": 1})
    assert decode(encode({"b": 1, "a": 2})) == {"a": 2, "b": 1}


def test_bool_is_not_int_on_the_wire():
    assert encode(True) != encode(1)
    assert encode(False) != encode(0)
    assert decode(encode(True)) is True


def test_float_is_byte_exact():
    for v in (0.0, -0.0, 1.5, math.inf, -math.inf, 2**-1074):
        raw = encode(v)
        assert len(raw) == 9
        out = decode(raw)
        assert out == v or (v == 0.0 and math.copysign(1, out) == math.copysign(1, v))
    # negative zero and positive zero are distinct byte strings
    assert encode(0.0) != encode(-0.0)


def test_fraction_roundtrip_normalized():
    assert decode(encode(Fraction(6, 4))) == Fraction(3, 2)
    assert decode(encode(Fraction(-7, 3))) == Fraction(-7, 3)


def test_tuple_encodes_like_list():
    assert encode((1, "x")) == encode([1, "x"])


def test_encode_rejects_unsupported():
    with pytest.raises(EncodingError):
        encode({1: "int key"})
    with pytest.raises(EncodingError):
        encode(object())
    with pytest.raises(EncodingError):
        encode({"a": set()})


def test_decode_rejects_trailing_bytes():
    with pytest.raises(EncodingError, match="trailing"):
        decode(encode(1) + b"x")


def test_decode_rejects_truncation():
    raw = encode("hello world")
    for cut in range(len(raw)):
        with pytest.raises(EncodingError):
            decode(raw[:cut])


def test_decode_rejects_unknown_tag():
    with pytest.raises(EncodingError):
        decode(b"Z\x00\x00\x00\x00")


def test_decode_rejects_garbled_int():
    bad = b"I" + (4).to_bytes(4, "big") + b"12x4"
    with pytest.raises(EncodingError):
        decode(bad)
