from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalkv.storage import Store, Version, VersionChain, partition_of, vec_le, vec_max, vec_min


def ver(key, ts, dc=0, m=1, other=None, value=b""):
    dv = [0] * m
    dv[dc] = ts
    if other is not None:
        for i, e in enumerate(other):
            if i != dc:
                dv[i] = e
    return Version(key, value, tuple(dv), dc)


# -- oracles ---------------------------------------------------------------


def lww(v):
    return (v.dv[v.origin_dc], v.origin_dc)


def oracle_read_at(versions, sv):
    """Filter, then take the LWW maximum."""
    ok = [v for v in versions if all(a <= b for a, b in zip(v.dv, sv))]
    return max(ok, key=lww) if ok else None


def oracle_read_before(entries, t):
    """entries: (version, local_ts); newest version installed at or before t."""
    ok = [v for v, lt in entries if lt <= t]
    return max(ok, key=lww) if ok else None


def random_versions(rng, n, m, key="k", ts_range=200):
    seen = set()
    out = []
    while len(out) < n:
        dc = rng.randrange(m)
        ts = rng.randrange(1, ts_range)
        if (ts, dc) in seen:
            continue
        seen.add((ts, dc))
        other = [rng.randrange(0, ts + 1) for _ in range(m)]
        out.append(ver(key, ts, dc, m, other))
    return out


# -- Version ---------------------------------------------------------------


def test_version_invariants():
    v = Version("x", b"X", (101, 60), 0)
    assert v.creation_ts == 101
    assert v.vid == ("x", 101, 0)
    with pytest.raises(ValueError):
        Version("x", b"", (10, 60), 0)
    with pytest.raises(ValueError):
        Version("x", b"", (10,), 1)
    with pytest.raises(AttributeError):
        v.key = "y"


def test_vector_helpers():
    assert vec_le((1, 2), (1, 3)) and not vec_le((2, 2), (1, 3))
    assert vec_max((1, 5), (3, 2)) == (3, 5)
    assert vec_min([(10, 20), (15, 5)]) == (10, 5)


# -- install ---------------------------------------------------------------


def test_install_in_order():
    c = VersionChain("x")
    x1 = ver("x", 101)
    x0 = ver("x", 70)
    c.install(x1)
    c.install(x0)
    assert [v.creation_ts for v in c] == [70, 101]


def test_install_fresh_key():
    s = Store()
    s.install(ver("x", 5))
    assert len(s.chain("x")) == 1


def test_install_wrong_key_rejected():
    with pytest.raises(ValueError):
        VersionChain("x").install(ver("y", 1))


@given(st.lists(st.tuples(st.integers(1, 30), st.integers(0, 1)), max_size=60))
def test_redelivery_matches_set_oracle(seq):
    c = VersionChain("k")
    seen = set()
    for ts, dc in seq:
        added = c.install(ver("k", ts, dc, 2))
        assert added == ((ts, dc) not in seen)
        seen.add((ts, dc))
    assert [(v.creation_ts, v.origin_dc) for v in c] == sorted(seen)


# -- read_at -----------------------------------------------------------------


def test_read_at_walkthrough():
    c = VersionChain("y")
    y0, y1 = ver("y", 70), ver("y", 102)
    c.install(y0)
    c.install(y1)
    assert c.read_at((100,)) is y0


def test_read_at_empty_chain():
    assert VersionChain("y").read_at((100,)) is None
    assert Store().read_at("nothing", (100,)) is None


def test_read_at_exhaustive_single_dc():
    # every chain length up to 64 and every snapshot position, including
    # both sides of each version
    rng = random.Random(11)
    for n in range(65):
        versions = random_versions(rng, n, 1, ts_range=500)
        c = VersionChain("k")
        for v in versions:
            c.install(v)
        points = {0, 1, 10_000}
        for v in versions:
            points |= {v.creation_ts - 1, v.creation_ts, v.creation_ts + 1}
        for t in sorted(points):
            assert c.read_at((t,)) is oracle_read_at(versions, (t,))


def test_read_at_exhaustive_two_dcs():
    rng = random.Random(12)
    for n in range(65):
        versions = random_versions(rng, n, 2, ts_range=60)
        c = VersionChain("k")
        for v in rng.sample(versions, len(versions)):
            c.install(v)
        for a in range(0, 62, 3):
            for b in range(0, 62, 3):
                assert c.read_at((a, b)) is oracle_read_at(versions, (a, b))


@settings(max_examples=200)
@given(st.data())
def test_read_at_random_matches_oracle(data):
    m = data.draw(st.integers(1, 3))
    seed = data.draw(st.integers(0, 2**32))
    rng = random.Random(seed)
    versions = random_versions(rng, data.draw(st.integers(0, 40)), m, ts_range=100)
    c = VersionChain("k")
    for v in versions:
        c.install(v)
    sv = tuple(data.draw(st.integers(0, 110)) for _ in range(m))
    assert c.read_at(sv) is oracle_read_at(versions, sv)


def test_read_at_one_version():
    rng = random.Random(1)
    c = VersionChain("k")
    for v in random_versions(rng, 30, 2):
        c.install(v)
    r = c.read_at((1000, 1000))
    assert isinstance(r, Version)


# -- read_before -----------------------------------------------------------


def test_read_before_between_versions():
    c = VersionChain("y")
    y0, y1 = ver("y", 70), ver("y", 102)
    c.install(y0)
    c.install(y1)
    assert c.read_before(95) is y0
    assert c.read_before(102) is y1


def test_read_before_all():
    c = VersionChain("y")
    c.install(ver("y", 70))
    assert c.read_before(69) is None


def test_read_before_exhaustive():
    # remote versions get their own local install time
    rng = random.Random(13)
    for n in range(65):
        versions = random_versions(rng, n, 2, ts_range=300)
        entries = []
        c = VersionChain("k")
        t = 0
        for v in versions:
            t += rng.randrange(1, 5)
            c.install(v, t)
            entries.append((v, t))
        ordered = sorted(entries, key=lambda e: lww(e[0]))
        assert list(zip(c.versions, c.local_ts)) == ordered
        for q in range(0, t + 2):
            assert c.read_before(q) is oracle_read_before(entries, q)


def test_read_before_monotone_install_exhaustive():
    rng = random.Random(14)
    for n in range(65):
        c = VersionChain("k")
        entries = []
        ts = 0
        for _ in range(n):
            ts += rng.randrange(1, 4)
            v = ver("k", ts)
            lt = ts + rng.randrange(0, 2)
            lt = max(lt, entries[-1][1] if entries else 0)
            c.install(v, lt)
            entries.append((v, lt))
        for q in range(0, ts + 3):
            assert c.read_before(q) is oracle_read_before(entries, q)


# -- gc ----------------------------------------------------------------------


def test_gc_watermark_above_chain():
    c = VersionChain("k")
    for ts in (1, 5, 9):
        c.install(ver("k", ts))
    assert c.gc((100,)) == 2
    assert len(c) == 1 and c.latest().creation_ts == 9


def test_gc_watermark_below_chain():
    c = VersionChain("k")
    for ts in (10, 20):
        c.install(ver("k", ts))
    assert c.gc((5,)) == 0
    assert len(c) == 2


@given(st.integers(0, 2**32), st.integers(0, 40), st.integers(0, 100), st.integers(0, 100))
def test_gc_differential(seed, n, wa, wb):
    rng = random.Random(seed)
    versions = random_versions(rng, n, 2, ts_range=100)
    c = VersionChain("k")
    for v in versions:
        c.install(v)
    wm = (wa, wb)
    probes = [(a, b) for a in range(wa, 102, 7) for b in range(wb, 102, 7)]
    before = [c.read_at(sv) for sv in probes]
    c.gc(wm)
    assert [c.read_at(sv) for sv in probes] == before


# -- convergence and hashing ---------------------------------------------------


@given(st.integers(0, 2**32))
def test_lww_convergence_any_delivery_order(seed):
    rng = random.Random(seed)
    versions = random_versions(rng, 20, 2)
    a, b = VersionChain("k"), VersionChain("k")
    for v in versions:
        a.install(v)
    for v in rng.sample(versions, len(versions)) * 2:
        b.install(v)
    top = (10**9, 10**9)
    assert a.read_at(top) is b.read_at(top) is max(versions, key=lww)


def test_partition_hash_stable():
    # frozen values: the hash must not depend on the process
    assert [partition_of(k, 8) for k in ("x", "y", "k0", "k1", "x2")] == [7, 7, 7, 0, 4]
    assert (partition_of("x", 2), partition_of("y", 2), partition_of("x2", 2)) == (1, 1, 0)
    with pytest.raises(ValueError):
        partition_of("x", 0)


def test_store_helpers():
    s = Store()
    v = ver("a", 3)
    s.install(v, 7)
    assert s.has(v.vid) and not s.has(("a", 4, 0))
    assert s.local_ts_of(v.vid) == 7
    assert s.local_ts_of(("b", 1, 0)) is None
    assert s.winners() == {"a": ("a", 3, 0)}
    assert s.gc((100,)) == 0
