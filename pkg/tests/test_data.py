import numpy as np
import pytest

from esmoe.config import ConfigError
from esmoe.data import SynthSpec, generate, make_dataset, sharpness
from esmoe.estimator import ESMoEClassifier


def test_determinism():
    a, ya = make_dataset(7, 20)
    b, yb = make_dataset(7, 20)
    assert a.tobytes() == b.tobytes() and np.array_equal(ya, yb)
    c, _ = make_dataset(8, 20)
    assert not np.array_equal(a, c)


def test_sample_depends_only_on_index():
    full, _ = make_dataset(3, 12)
    tail, _ = make_dataset(3, 4, start=8)
    assert np.array_equal(full[8:], tail)


def test_balance_exact_for_multiple():
    _, y = make_dataset(0, 100)
    assert np.bincount(y).tolist() == [25, 25, 25, 25]


@pytest.mark.parametrize("n", [1, 7, 33, 102])
def test_balance_within_one(n):
    _, y = make_dataset(5, n)
    counts = np.bincount(y, minlength=4)
    assert counts.max() - counts.min() <= 1


def test_shapes_and_range():
    samples = generate(1, 8)
    for s in samples:
        assert s.image.shape == (1, 3, 32, 32) and s.image.dtype == np.float32
        assert s.image.min() >= -1 and s.image.max() <= 1
        assert s.scale_tag == SynthSpec().radii[s.label]


def test_range_with_heavy_noise():
    X, _ = make_dataset(0, 10, SynthSpec(noise=2.0))
    assert X.min() >= -1 and X.max() <= 1


def test_sharpness_ratio_small_vs_large_radius():
    spec = SynthSpec(noise=0.0)
    X, y = make_dataset(2, 80, spec)
    small = np.mean([sharpness(x) for x in X[y == 0]])
    large = np.mean([sharpness(x) for x in X[y == 3]])
    assert small > 2 * large


def test_sharpness_oracle():
    img = np.zeros((1, 2, 2))
    img[0, 0, 0] = 1.0
    # |diff| means: rows (1, 0)/2, cols (1, 0)/2; mean |img| = 0.25
    assert sharpness(img) == pytest.approx((0.5 + 0.5) / 0.25)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(radii=(1.0,)),
        dict(radii=(1.0, 1.0)),
        dict(radii=(0.0, 2.0)),
        dict(radii=(1.0, 20.0)),
        dict(noise=-0.1),
        dict(gain_range=(1.0, 0.5)),
        dict(channels=0),
    ],
)
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        SynthSpec(**kwargs)


def test_n_must_be_positive():
    with pytest.raises(ConfigError):
        generate(0, 0)


def test_single_expert_probe_learns_noise_free_task():
    spec = SynthSpec(noise=0.0)
    X, y = make_dataset(0, 256, spec)
    # 8 batches per epoch x 25 epochs = 200 SGD steps
    probe = ESMoEClassifier(n_experts=1, top_k=1, kernels=(5,), out_channels=8, epochs=25, random_state=0)
    probe.fit(X, y)
    assert probe.score(X, y) > 0.9
