
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcpredict.contraction import (
    FULL,
    Bound,
    ContractionError,
    FirstLine,
    MemoryRegion,
    SizeModel,
    Tensor,
    format_contraction,
    join_all,
    join_region,
    parse_contraction,
    parse_sizes,
    region_offset_array,
    region_offsets,
    region_size,
)


def test_classifies_indices():
    c = parse_contraction("C[a,b,c] = A[a,i] * B[i,b,c]")
    assert c.contracted == ("i",)
    assert c.freeA == ("a",)
    assert c.freeB == ("b", "c")
    assert [t.role for t in c.tensors] == ["outputC", "inputA", "inputB"]


def test_star_is_optional_and_whitespace_free():
    a = parse_contraction("C[a]=A[i,a,j]B[j,i]")
    b = parse_contraction("C[a] = A[i,a,j] * B[j,i]")
    assert a == b
    assert a.contracted == ("i", "j")


@pytest.mark.parametrize("text, fragment", [
    ("C[a,b] = A[a,i] * B[i]", "unbound output index 'b'"),
    ("C[a,i] = A[a,i] * B[i]", "batch"),
    ("C[a] = A[a,i] * B[j]", "dangling"),
    ("C[a,a] = A[a,i] * B[i,a]", "trace unsupported"),
    ("C[a] = A[a,i] * A[i]", "distinct"),
])
def test_rejects_unsupported(text, fragment):
    with pytest.raises(ContractionError, match=fragment):
        parse_contraction(text)


def test_error_position_points_at_problem():
    with pytest.raises(ContractionError) as info:
        parse_contraction("C[a] = A[a,i] $ B[i]")
    assert info.value.position == 14
    with pytest.raises(ContractionError) as info:
        parse_contraction("C[a] = A[a,i")
    assert info.value.position == 12


def test_parse_sizes():
    assert parse_sizes("a=400, b=400,c=400,i=8") == {"a": 400, "b": 400, "c": 400, "i": 8}
    with pytest.raises(ValueError):
        parse_sizes("a400")
    with pytest.raises(ValueError):
        SizeModel({"a": 0})


def _tensor(name, dims, role):
    return Tensor(name, tuple(dims), role)


@st.composite
def contractions(draw):
    # disjoint index classes, then shuffled into tensor dimension orders
    pool = list("abcdefgh")
    k = draw(st.integers(1, 2))
    fa = draw(st.integers(1, 2))
    fb = draw(st.integers(0, 2))
    names = draw(st.permutations(pool))[: k + fa + fb]
    con, free_a, free_b = names[:k], names[k:k + fa], names[k + fa:]
    a = draw(st.permutations(con + free_a))
    b = draw(st.permutations(con + free_b)) if con + free_b else con
    c = draw(st.permutations(free_a + free_b))
    return f"C[{','.join(c)}] = A[{','.join(a)}] * B[{','.join(b)}]", set(con), set(free_a), set(free_b)


@given(contractions())
def test_format_round_trip_and_classes(case):
    text, con, free_a, free_b = case
    c = parse_contraction(text)
    assert parse_contraction(format_contraction(c)) == c
    assert set(c.contracted) == con
    assert set(c.freeA) == free_a
    assert set(c.freeB) == free_b


def test_region_size_and_join():
    B = Tensor("B", ("i", "b", "c"), "inputB")
    s = SizeModel({"i": 8, "b": 400, "c": 400})
    r = MemoryRegion(B, (FULL, FULL, Bound("c")))
    assert region_size(r, s) == 3200
    assert region_size(join_region(r, "c"), s) == 8 * 400 * 400
    assert join_region(r, "b") is r
    assert join_all(r, ["c"]) == B.full()
    line = MemoryRegion(B, (FirstLine("i"), Bound("b"), Bound("c")))
    assert region_size(line, s, 8) == 8
    with pytest.raises(ValueError):
        region_size(line, s)


@settings(max_examples=50)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.data())
def test_region_offsets_match_numpy_indexing(extents, data):
    dims = tuple("pqrs"[: len(extents)])
    t = Tensor("T", dims)
    s = SizeModel(dict(zip(dims, extents)))
    bound = data.draw(st.lists(st.booleans(), min_size=len(dims), max_size=len(dims)))
    env = {d: data.draw(st.integers(0, n - 1)) for d, n in zip(dims, extents)}
    sels = tuple(Bound(d) if b else FULL for d, b in zip(dims, bound))
    r = MemoryRegion(t, sels)
    flat = np.arange(int(np.prod(extents))).reshape(extents, order="F")
    view = flat[tuple(env[d] if b else slice(None) for d, b in zip(dims, bound))]
    expected = list(np.asarray(view).ravel(order="F"))
    assert region_offsets(r, s, env) == expected
    assert list(region_offset_array(r, s, env)) == expected
    assert region_size(r, s) == len(expected)
