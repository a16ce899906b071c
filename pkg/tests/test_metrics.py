import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pnr.config import TrainConfig
from pnr.errors import DimensionError
from pnr.metrics import EvalReport, SsimParams, evaluate, multishot_cases, recovery_error, ssim
from pnr.model import from_patches, init_params
from pnr.synth import gen_toy_dataset

C1, C2 = SsimParams().C1, SsimParams().C2


def test_ssim_identical_is_one(rng):
    img = rng.uniform(size=(16, 16, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    a, b = np.full((8, 8, 1), 0.2), np.full((8, 8, 1), 0.8)
    expected = (2 * 0.2 * 0.8 + C1) / (0.2**2 + 0.8**2 + C1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)
    assert ssim(a, b) == pytest.approx(0.3201 / 0.6801, abs=1e-12)


def test_ssim_single_window_against_direct_formula(rng):
    a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = np.mean((a - ma) * (b - mb))
    expected = (2 * ma * mb + C1) * (2 * cov + C2) / ((ma**2 + mb**2 + C1) * (va + vb + C2))
    assert ssim(a, b) == pytest.approx(expected, abs=1e-14)


def test_ssim_averages_windows_and_channels(rng):
    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    parts = [ssim(a[r : r + 8, c : c + 8, k], b[r : r + 8, c : c + 8, k])
             for r in (0, 8) for c in (0, 8) for k in range(3)]  # fmt: skip
    assert ssim(a, b) == pytest.approx(np.mean(parts), abs=1e-14)


def test_ssim_anticorrelated_is_negative():
    a = np.tile([0.0, 1.0], (8, 4))
    assert ssim(a, 1 - a) < 0


def test_ssim_shape_errors():
    with pytest.raises(DimensionError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(DimensionError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


unit_images = arrays(np.float64, (8, 16, 2), elements=st.floats(0, 1))


@settings(max_examples=60, deadline=None)
@given(unit_images, unit_images)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s == ssim(b, a)
    assert -1 - 1e-12 <= s <= 1 + 1e-12


def test_recovery_error():
    assert recovery_error(np.eye(2), np.eye(2)) == 0.0
    assert recovery_error([[3.0, 0.0]], [[0.0, 4.0]]) == 5.0
    with pytest.raises(DimensionError):
        recovery_error(np.eye(2), np.eye(3))


CFG = TrainConfig(identities=8, samples_per_id=4)


@pytest.fixture(scope="module")
def data():
    return gen_toy_dataset(CFG.identities, CFG.samples_per_id, CFG.seed)


def test_multishot_cases_use_other_views(data):
    cases = multishot_cases(data, 3)
    n_test = len(data.test)
    assert len(cases) == n_test
    for ex in cases:
        assert len(ex.shots) == 3
        assert all(not np.array_equal(img, ex.target_image) for img, _ in ex.shots)
    # same targets for every M
    one = multishot_cases(data, 1, max_M=3)
    assert [c.target_image.tobytes() for c in one] == [c.target_image.tobytes() for c in cases]


def test_oracle_generator_scores_perfectly(data):
    report = evaluate(None, CFG, data, Ms=(1, 3), generator=lambda ex: from_patches(ex.target_image))
    for M, n, l1, s_mean, s_med in report.rows:
        assert l1 == 0.0 and s_mean == pytest.approx(1.0, abs=1e-12) and s_med == pytest.approx(1.0, abs=1e-12)


def test_untrained_model_scores_poorly(data):
    report = evaluate(init_params(CFG), CFG, data, Ms=(1,))
    assert report.rows[0][3] < 0.9
    text = report.text()
    assert "mean_ssim" in text and text.splitlines()[0].startswith("M")


def test_report_dict_keys():
    report = EvalReport([(1, 4, 0.1, 0.5, 0.6), (3, 4, 0.08, 0.55, 0.62)])
    d = report.as_dict()
    assert d["mean_l1"] == 0.1 and d["M3.median_ssim"] == 0.62
