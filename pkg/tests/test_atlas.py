import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuselage.atlas import (
    Atlas,
    AtlasError,
    AtlasSet,
    entropy,
    label_table,
    load_manifest,
    mutual_information,
    select_by_age,
    select_by_mi,
)
from fuselage.volume import GridMeta, LabelVolume, ScalarVolume, write_volume


def _atlas(aid, age=0.0, dims=(3, 3, 3), seed=0, intensity=None, has_wm=True):
    rng = np.random.default_rng(seed)
    meta = GridMeta(dims)
    img = rng.random(dims) if intensity is None else intensity
    return Atlas(aid, ScalarVolume(meta, img), LabelVolume(meta, rng.integers(0, 3, dims)), age, has_wm)


def test_table_lookups():
    t = label_table()
    assert t.lookup("L/R Thalamus") == (9, 48)
    assert t.lookup("Vermis") == (172,)
    assert t.lookup("Medulla") == (175,)
    assert t.wm_cortex_ids == frozenset({2, 41, 3, 42})
    assert t.name(2) != t.name(41)


def test_table_unique_ids():
    ids = label_table().ids
    assert len(ids) == len(set(ids)) == 33
    assert 0 in ids and 0 not in label_table().structure_ids


def test_manifest_single(tmp_path):
    a = _atlas("a1", 30.0)
    write_volume(a.intensity, tmp_path / "i.nii.gz")
    write_volume(a.labels, tmp_path / "l.nii.gz")
    (tmp_path / "m.json").write_text(
        json.dumps({"atlases": [{"id": "a1", "intensity_path": "i.nii.gz", "labels_path": "l.nii.gz", "age_days": 30}]})
    )
    s = load_manifest(tmp_path / "m.json")
    assert len(s) == 1
    assert s[0].age_days == 30.0 and s[0].has_wm
    np.testing.assert_array_equal(s[0].labels.data, a.labels.data)


def test_mismatched_grids():
    with pytest.raises(AtlasError):
        AtlasSet((_atlas("a"), _atlas("b", dims=(3, 3, 4))))


def test_duplicate_ids():
    with pytest.raises(AtlasError):
        AtlasSet((_atlas("a"), _atlas("a", seed=1)))


def test_select_by_age_example():
    s = AtlasSet(tuple(_atlas(f"a{age:03d}", age) for age in (0, 60, 240, 330, 540)))
    chosen = select_by_age(s, 200, 2)
    assert [a.age_days for a in chosen] == [240, 330]
    assert len(select_by_age(s, 200, 5)) == 5
    with pytest.raises(AtlasError):
        select_by_age(s, 200, 6)
    with pytest.raises(AtlasError):
        select_by_age(s, 200, 0)


def test_select_by_age_tie_goes_to_smaller_id():
    s = AtlasSet((_atlas("zeta", 130), _atlas("alpha", 70)))
    assert select_by_age(s, 100, 1).ids == ["alpha"]


def _plugin_mi(a, b, bins):
    """Plug-in MI from the sampled histogram, written out longhand."""
    def bin_of(v):
        lo, hi = v.min(), v.max()
        return np.minimum(((v - lo) / (hi - lo) * bins).astype(int), bins - 1)

    ia, ib = bin_of(a), bin_of(b)
    n = len(a)
    ca, cb, cab = Counter(ia.tolist()), Counter(ib.tolist()), Counter(zip(ia.tolist(), ib.tolist()))
    h = lambda c: -sum(v / n * np.log(v / n) for v in c.values())
    return h(ca) + h(cb) - h(cab)


def test_mi_independent_noise_near_zero():
    rng = np.random.default_rng(3)
    a, b = rng.random(200_000), rng.random(200_000)
    mi = mutual_information(a, b, bins=2)
    assert mi == pytest.approx(_plugin_mi(a, b, 2), abs=1e-10)
    assert mi < 0.05


def test_mi_matches_plugin_oracle():
    rng = np.random.default_rng(4)
    a = rng.random(5000)
    b = a + 0.3 * rng.random(5000)
    assert mutual_information(a, b, 8) == pytest.approx(_plugin_mi(a, b, 8), abs=1e-10)


def test_mi_monotone_remap_equals_entropy():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 16, 4000).astype(float)
    b = 3.0 * a + 2.0
    assert mutual_information(a, b, 16) == pytest.approx(entropy(a, 16), abs=1e-12)


def test_mi_constant_is_zero():
    assert mutual_information(np.ones(10), np.arange(10.0)) == 0.0


def test_select_by_mi_self_ranks_first():
    rng = np.random.default_rng(6)
    meta = GridMeta((8, 8, 8))
    test = rng.random(meta.dims) + 0.1
    atlases = [_atlas(f"n{i}", dims=meta.dims, seed=10 + i) for i in range(4)]
    atlases.append(_atlas("self", dims=meta.dims, intensity=test))
    chosen = select_by_mi(AtlasSet(tuple(atlases)), ScalarVolume(meta, test), 2)
    assert chosen.ids[0] == "self"


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), bins=st.integers(2, 16))
def test_mi_bounded_by_entropies(seed, bins):
    rng = np.random.default_rng(seed)
    a = rng.random(300)
    b = np.where(rng.random(300) < 0.5, a, rng.random(300))
    mi = mutual_information(a, b, bins)
    assert -1e-12 <= mi <= min(entropy(a, bins), entropy(b, bins)) + 1e-9
    assert mi == pytest.approx(mutual_information(b, a, bins), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    ages=st.lists(st.integers(0, 730), min_size=1, max_size=8),
    test_age=st.integers(0, 730),
    data=st.data(),
)
def test_age_selection_is_order_independent(ages, test_age, data):
    atlases = [_atlas(f"a{i}", float(age)) for i, age in enumerate(ages)]
    k = data.draw(st.integers(1, len(ages)))
    perm = data.draw(st.permutations(atlases))
    first = select_by_age(AtlasSet(tuple(atlases)), test_age, k).ids
    assert select_by_age(AtlasSet(tuple(perm)), test_age, k).ids == first
    gaps = sorted(abs(a - test_age) for a in ages)
    chosen_gaps = sorted(abs(a.age_days - test_age) for a in atlases if a.id in first)
    assert chosen_gaps == gaps[:k]
