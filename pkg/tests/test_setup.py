import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcpredict.analysis import CacheConfig, OperandAnalysis, analyze_call
from tcpredict.cachesim import LruCache, replay_keys
from tcpredict.contraction import SizeModel, parse_contraction, region_offsets
from tcpredict.generator import generate_algorithms
from tcpredict.setup import SetupError, SetupList, build_setup, setup_total, suffix_distances, truncation_limit

ABC = parse_contraction("C[a,b,c] = A[a,i] * B[i,b,c]")
LARGE = SizeModel(dict(a=400, b=400, c=400, i=8))
ALGS = {a.name: a for a in generate_algorithms(ABC)}
CACHE = CacheConfig()


def _untruncated_cache():
    return CacheConfig(capacity_bytes=64 * 2**20 * 8)


def test_untruncated_gemv_list():
    ops = analyze_call(ALGS["ca_gemv"], LARGE, prefetch=False)
    sl = build_setup(ops, _untruncated_cache(), LARGE)
    assert str(sl) == "C[a,:,c], [65116792], A[a,:], [163200], B[:,:,c]"
    assert not sl.truncated
    after = {str(act): d for act, d in suffix_distances(sl)}
    assert after == {"C[a,:,c]": 65_283_200, "A[a,:]": 166_400, "B[:,:,c]": 0}


def test_truncated_gemv_list():
    ops = analyze_call(ALGS["ca_gemv"], LARGE, prefetch=False)
    sl = build_setup(ops, CACHE, LARGE)
    assert truncation_limit(CACHE) == 983_040
    assert str(sl) == "[816632], A[a,:], [163200], B[:,:,c]"
    assert sl.truncated and setup_total(sl) == 983_040


def test_prefetch_list_is_omitted():
    ops = analyze_call(ALGS["ca_gemv"], LARGE)
    sl = build_setup(ops, CACHE, LARGE)
    assert str(sl) == "C[a,:,c], A[a,:], B[:,:,c]"
    assert sl.omitted
    assert setup_total(sl) == 400 + 8 + 3200


def test_empty_list_total():
    assert setup_total(SetupList(())) == 0


def test_negative_filler_is_an_error():
    ops = analyze_call(ALGS["ca_gemv"], LARGE, prefetch=False)
    c, a, b = ops
    # A claims a distance smaller than B's size, which cannot be laid out
    bad = [OperandAnalysis(a.operand, a.slot, 100), OperandAnalysis(b.operand, b.slot, 0)]
    with pytest.raises(SetupError):
        build_setup(bad, CACHE, LARGE)


@pytest.mark.parametrize("text", ["C[a,b,c] = A[a,i] * B[i,b,c]", "C[a,b,c] = A[i,j,a] * B[j,b,i,c]"])
@pytest.mark.parametrize("prefetch", [False, True])
def test_suffix_identity_everywhere(text, prefetch):
    c = parse_contraction(text)
    s = SizeModel({i: 40 if i not in "ij" else 8 for i in c.indices})
    for a in generate_algorithms(c):
        ops = analyze_call(a, s, prefetch=prefetch)
        sl = build_setup(ops, _untruncated_cache(), s)
        for act, after in suffix_distances(sl):
            assert after == act.distance


def test_ties_follow_signature_order():
    ops = analyze_call(ALGS["ca_gemv"], LARGE)
    sl = build_setup(ops, CACHE, LARGE)
    assert [a.region.tensor.name for a in sl.actions] == ["C", "A", "B"]


def _resident_fraction(sl, oa, s, cache, env):
    lru = LruCache(cache.capacity_lines)
    ids = {"C": 0, "A": 1, "B": 2}
    for key in replay_keys(sl, s, env, cache.line_elements, ids):
        lru.access(key)
    lines = {(ids[oa.operand.tensor.name], o // cache.line_elements)
             for o in region_offsets(oa.operand, s, env)}
    return sum(ln in lru for ln in lines) / len(lines)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.sampled_from([1, 2, 8]), st.sampled_from(sorted(ALGS)))
def test_replayed_residency_follows_distance(cap_lines_log, line_elems, name):
    cache = CacheConfig(capacity_bytes=(2**cap_lines_log) * line_elems * 8, line_bytes=line_elems * 8)
    s = SizeModel(dict(a=6, b=5, c=7, i=4))
    env = {i: 1 for i in "abci"}
    ops = analyze_call(ALGS[name], s, prefetch=False)
    sl = build_setup(ops, cache, s)
    for oa in ops:
        frac = _resident_fraction(sl, oa, s, cache, env)
        size = len(region_offsets(oa.operand, s, env))
        # later touches cover at most one line per element, so this is enough to stay cached
        if oa.access_distance + size <= cache.capacity_lines:
            assert frac == 1.0
        if oa.access_distance > truncation_limit(cache):
            assert frac == 0.0


def test_joined_region_may_contain_later_operand():
    # C's window joins B[:,:,i,:], which holds B's own operand; the two
    # distances overlap by up to |B| and the filler between them is empty
    c = parse_contraction("C[a,b,c] = A[i,j,a] * B[j,b,i,c]")
    s = SizeModel(dict(a=2, b=4, c=4, i=6, j=6))
    a = next(x for x in generate_algorithms(c) if x.name == "iac_gemv")
    ops = analyze_call(a, s, prefetch=False)
    assert sorted(o.access_distance for o in ops) == [0, 118, 140]
    sl = build_setup(ops, _untruncated_cache(), s)
    assert str(sl) == "C[a,:,c], B[:,:,i,c], [112], A[i,:,a]"
