import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from fuselage.atlas import label_table
from fuselage.metrics import dice, generalized_dice, report, tenengrad
from fuselage.volume import GridMeta, LabelVolume, ScalarVolume, VolumeError


def _lv(values):
    a = np.asarray(values).reshape(-1, 1, 1)
    return LabelVolume(GridMeta(a.shape), a)


def test_dice_examples():
    a = _lv([1, 1, 1, 1, 0, 0, 0, 0])
    b = _lv([0, 0, 1, 1, 1, 1, 0, 0])
    assert dice(a, b, 1) == 0.5
    assert dice(a, a, 1) == 1.0
    assert dice(_lv([1, 0]), _lv([0, 1]), 1) == 0.0
    assert dice(a, b, 7) is None


def test_generalized_dice_example():
    a, b = _lv([1, 1, 2, 2]), _lv([1, 2, 2, 2])
    assert abs(generalized_dice(a, b, {1, 2}) - 0.75) <= 1e-15
    assert generalized_dice(a, a, {1, 2}) == 1.0
    assert generalized_dice(a, b, {9}) == 1.0
    with pytest.raises(ValueError):
        generalized_dice(a, b, [])


def test_grid_mismatch():
    with pytest.raises(VolumeError):
        dice(_lv([1, 1]), _lv([1, 1, 1]), 1)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 60), label=st.integers(0, 3))
def test_singleton_reduces_to_dice(seed, n, label):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, n), rng.integers(0, 4, n)
    d = dice(a, b, label)
    g = generalized_dice(a, b, [label])
    if d is None:
        if not ((a == label).any() or (b == label).any()):
            assert g == 1.0
    else:
        assert g == d


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 60))
def test_dice_symmetric_and_bounded(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, n), rng.integers(0, 3, n)
    g = generalized_dice(a, b, [1, 2])
    assert 0.0 <= g <= 1.0
    assert g == generalized_dice(b, a, [1, 2])
    for l in (1, 2):
        assert dice(a, b, l) == dice(b, a, l)


def test_report_absent_labels():
    a = _lv([2, 2, 41, 41, 9, 0])
    b = _lv([2, 41, 41, 41, 0, 0])
    rep = report(a, b, label_table())
    assert rep.labels == [2, 9, 41]
    assert rep.dice[9] is None and rep.absent() == [9]
    assert rep.used == [2, 41]
    assert rep.dice[2] == pytest.approx(2 * 1 / 3)
    assert rep.dice[41] == pytest.approx(2 * 2 / 5)
    assert rep.generalized == pytest.approx(2 * 3 / (4 + 4))
    assert rep.counts[41] == (2, 3, 2)
    assert rep.rows()[-1]["label_id"] == "GENERALIZED"


def test_report_identical_all_ones(tmp_path):
    a = _lv([3, 3, 42, 17, 53, 0])
    rep = report(a, a)
    assert all(v == 1.0 for v in rep.dice.values()) and rep.generalized == 1.0
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "label_id,label_name,dice,|A|,|B|,|A∩B|"
    assert len(lines) == 1 + 4 + 1


def test_report_counts_on_phantom_pair():
    from fuselage.phantom import PhantomConfig, generate

    inst = generate(PhantomConfig(seed=2, size=20, n_atlases=1, deformation=1.5))
    a, b = inst.truth.data, inst.atlases[0].labels.data
    rep = report(inst.truth, inst.atlases[0].labels)
    for l in rep.used:
        na, nb, ni = int((a == l).sum()), int((b == l).sum()), int(((a == l) & (b == l)).sum())
        assert rep.dice[l] == 2 * ni / (na + nb)


def test_tenengrad_constant_is_zero():
    assert tenengrad(ScalarVolume(GridMeta((5, 5, 5)), np.full((5, 5, 5), 4.0))) == 0.0


def _sobel_direct(img):
    """Sobel energy on interior pixels by explicit 3x3 correlation."""
    kx = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=float)  # derivative along axis 0
    ky = kx.T
    n0, n1 = img.shape
    out = np.zeros((n0 - 2, n1 - 2))
    for i in range(1, n0 - 1):
        for j in range(1, n1 - 1):
            patch = img[i - 1 : i + 2, j - 1 : j + 2]
            out[i - 1, j - 1] = (patch * kx).sum() ** 2 + (patch * ky).sum() ** 2
    return out


def test_tenengrad_step_oracle():
    sl = np.zeros((9, 9))
    sl[5:, :] = 1.0
    vol = np.repeat(sl[:, :, None], 3, axis=2)
    score = tenengrad(ScalarVolume(GridMeta((9, 9, 3)), vol))
    assert score == pytest.approx(_sobel_direct(sl).mean(), abs=1e-15)
    # a unit step gives |G| = 4 on the two rows straddling it, 7 of 9 interior columns each
    assert score == pytest.approx(2 * 7 * 16 / 49, abs=1e-15)


def test_tenengrad_sharp_beats_blurred():
    sl = np.zeros((32, 32))
    sl[:, 16:] = 1.0
    vol = np.repeat(sl[:, :, None], 5, axis=2)
    blurred = ndimage.gaussian_filter(vol, sigma=(2, 2, 0))
    sharp = tenengrad(ScalarVolume(GridMeta(vol.shape), vol))
    soft = tenengrad(ScalarVolume(GridMeta(vol.shape), blurred))
    assert sharp > soft > 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100))
def test_tenengrad_scale_invariant(seed, scale):
    data = np.random.default_rng(seed).random((6, 7, 4))
    a = tenengrad(ScalarVolume(GridMeta(data.shape), data))
    b = tenengrad(ScalarVolume(GridMeta(data.shape), data * scale))
    assert b == pytest.approx(a, rel=1e-9)
