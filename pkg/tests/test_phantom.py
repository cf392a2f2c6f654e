import csv
import json

import numpy as np
import pytest

from fuselage.atlas import load_manifest
from fuselage.intensity import log_likelihood
from fuselage.phantom import (
    JACKKNIFE_COLUMNS,
    TISSUE_MEANS,
    PhantomConfig,
    PhantomError,
    brute_force_edt,
    generate,
    jackknife,
    write_instance,
)
from fuselage.vem import VemConfig
from fuselage.volume import LabelVolume, read_volume

from instances import tiny_instance


def test_same_seed_same_instance():
    cfg = PhantomConfig(seed=11, size=16, noise_sigma=0.1, bias=0.2, deformation=1.0, n_atlases=3)
    a, b = generate(cfg), generate(cfg)
    np.testing.assert_array_equal(a.image.data, b.image.data)
    for x, y in zip(a.atlases, b.atlases):
        np.testing.assert_array_equal(x.labels.data, y.labels.data)
        np.testing.assert_array_equal(x.intensity.data, y.intensity.data)
        assert x.age_days == y.age_days
    c = generate(PhantomConfig(seed=12, size=16, noise_sigma=0.1, bias=0.2, deformation=1.0, n_atlases=3))
    assert not np.array_equal(a.image.data, c.image.data)


def test_zero_deformation_atlases_equal_truth():
    inst = generate(PhantomConfig(seed=1, size=16, noise_sigma=0.0, deformation=0.0, n_atlases=4))
    for a in inst.atlases:
        np.testing.assert_array_equal(a.labels.data, inst.truth.data)


def test_truth_contains_table_labels():
    inst = generate(PhantomConfig(seed=0, size=24))
    assert set(inst.truth.labels()) == {0, 2, 3, 4, 9, 11, 41, 42, 43, 48, 50}
    assert np.all(inst.image.data[inst.mask.data == 0] == 0)


def test_loglik_record_matches_model():
    inst = generate(PhantomConfig(seed=2, size=16, noise_sigma=0.2, bias=0.2))
    m = inst.mask.data > 0
    values = inst.clean.data[m]
    truth = inst.truth.data[m]
    ll = log_likelihood(inst.params, values)
    rows = np.array([inst.params.row(l) for l in truth])
    ours = ll[rows, np.arange(values.size)]
    np.testing.assert_allclose(ours, inst.loglik_record[m], atol=1e-9)
    # the observed image is the clean one under the recorded bias
    np.testing.assert_allclose(inst.image.data * np.exp(inst.bias.log_field(inst.image.meta)), inst.clean.data, rtol=1e-12)


def test_label_means_converge():
    inst = generate(PhantomConfig(seed=3, size=32, noise_sigma=0.3))
    sigma = 0.3 * 0.4
    for l in inst.truth.labels():
        vals = inst.clean.data[(inst.truth.data == l) & (inst.mask.data > 0)]
        assert abs(vals.mean() - TISSUE_MEANS[l]) <= 3 * sigma / np.sqrt(vals.size)


def test_ages_span_two_years():
    inst = generate(PhantomConfig(seed=4, size=16, n_atlases=26))
    ages = sorted(a.age_days for a in inst.atlases)
    assert len(ages) == 26 and ages[0] >= 0 and ages[-1] <= 730
    assert ages[0] < 60 and ages[-1] > 670


def test_no_wm_fraction():
    inst = generate(PhantomConfig(seed=5, size=16, n_atlases=10, no_wm_fraction=0.3))
    assert sum(not a.has_wm for a in inst.atlases) == 3


def test_config_validation():
    with pytest.raises(PhantomError):
        PhantomConfig(size=8)
    with pytest.raises(PhantomError):
        PhantomConfig(noise_sigma=-1)
    with pytest.raises(PhantomError):
        PhantomConfig(age_growth=1.0)
    with pytest.raises(PhantomError):
        generate(PhantomConfig(bias_coeffs=(0.1, 0.2)))


def test_write_instance_manifest(tmp_path):
    inst = generate(PhantomConfig(seed=6, size=16, n_atlases=26))
    path = write_instance(inst, tmp_path)
    atl = load_manifest(path)
    assert len(atl) == 26
    doc = json.loads(path.read_text())
    assert doc["mask_path"] == "mask.nii.gz"
    np.testing.assert_array_equal(read_volume(tmp_path / "truth.nii.gz").data, inst.truth.data)
    np.testing.assert_array_equal(atl[3].labels.data, inst.atlases[3].labels.data)


def test_exact_posterior_sums_to_one():
    from fuselage.phantom import exact_membership_posterior

    for seed in range(5):
        ex = exact_membership_posterior(tiny_instance(seed, 0.8, dims=(2, 2, 2)))
        np.testing.assert_allclose(ex.membership.sum(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(ex.labels.sum(axis=0), 1.0, atol=1e-12)


def test_brute_force_empty_label():
    lab = LabelVolume(generate(PhantomConfig(size=16, n_atlases=1)).truth.meta, np.zeros((16, 16, 16), dtype=np.int32))
    assert np.all(brute_force_edt(lab, 9, d_max=4).data == 4)


def _family(seed=0, n=6, size=16, **kw):
    return generate(PhantomConfig(seed=seed, size=size, n_atlases=n, noise_sigma=0.05, **kw)).atlases


def test_jackknife_counts_and_schema(tmp_path):
    fam = _family()
    res = jackknife(fam, [1, 2, 3, 4, 5], VemConfig(max_outer_iters=3, bias_degree=None))
    assert len(res.runs) == 30
    assert all(len(r.selected) == r.k for r in res.runs)
    full = [r for r in res.runs if r.k == 5]
    assert all(sorted(r.selected) == sorted(set(fam.ids) - {r.subject_id}) for r in full)
    files = res.write(tmp_path / "jackknife.csv")
    with open(files["runs"]) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == JACKKNIFE_COLUMNS and len(rows) == 30
    assert sum(res.winning_histogram().values()) == 6


def test_jackknife_parallel_matches_serial():
    fam = _family(seed=1, n=4)
    cfg = VemConfig(max_outer_iters=2, bias_degree=None)
    a = jackknife(fam, [1, 3], cfg, workers=1)
    b = jackknife(fam, [1, 3], cfg, workers=2)
    assert [(r.subject_id, r.k, r.gen_dice) for r in a.runs] == [(r.subject_id, r.k, r.gen_dice) for r in b.runs]


def test_jackknife_family_too_small():
    with pytest.raises(PhantomError):
        jackknife(_family(n=3), [3])


@pytest.mark.slow
def test_winning_k_concentrates_small_when_anatomy_grows_with_age():
    fam = generate(
        PhantomConfig(seed=2, size=20, n_atlases=8, noise_sigma=0.1, deformation=0.5, age_growth=0.8)
    ).atlases
    res = jackknife(fam, range(1, 8), VemConfig(max_outer_iters=10, bias_degree=None), workers=4)
    hist = res.winning_histogram()
    small = sum(v for k, v in hist.items() if k <= 3)
    assert small > sum(hist.values()) / 2
