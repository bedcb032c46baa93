import numpy as np
import pytest

from advpurify.data import DatasetSplit, ImageBatch
from advpurify.diffusion import (
    Denoiser,
    NoiseSchedule,
    PurifyConfig,
    build_denoiser,
    denoise_from,
    denoise_step,
    forward_noise,
    load_denoiser,
    make_schedule,
    purify,
    sample,
    save_denoiser,
    train_denoiser,
)

# running product of the desk schedule (T=200, beta 1e-4..0.02), computed
# once with numpy cumprod and frozen here
DESK_ALPHA_BAR_T = 0.13218275425061793


@pytest.fixture(scope="module")
def desk_schedule() -> NoiseSchedule:
    return make_schedule(200, 1e-4, 0.02)


class OracleEpsDenoiser:
    """Noise oracle that inverts the forward process exactly.

    Given the true clean image, eps_hat = (z_t - sqrt(ab_t) z0) / sqrt(1-ab_t)
    is by construction the prediction that makes the closed-form inversion
    recover z0; any reverse ladder ending at t=1 then returns z0 exactly.
    """

    def __init__(self, schedule: NoiseSchedule, z0: np.ndarray):
        self.schedule = schedule
        self.z0 = z0

    def predict_noise(self, zt: np.ndarray, t) -> np.ndarray:
        c_signal, c_noise = self.schedule.coeffs(t)
        return (zt - c_signal * self.z0) / c_noise


def test_schedule_closed_form_t2():
    b = 0.25
    schedule = make_schedule(2, b, b)
    np.testing.assert_allclose(schedule.beta, [b, b])
    np.testing.assert_allclose(schedule.alpha_bar, [(1 - b), (1 - b) ** 2], rtol=0, atol=1e-15)


def test_schedule_monotonicity(desk_schedule):
    assert np.all(desk_schedule.beta > 0)
    assert np.all(np.diff(desk_schedule.beta) >= 0)
    assert np.all(np.diff(desk_schedule.alpha_bar) < 0)
    assert desk_schedule.alpha_bar[0] < 1.0
    assert np.all((desk_schedule.alpha_bar > 0) & (desk_schedule.alpha_bar < 1))


def test_schedule_consistency(desk_schedule):
    recomputed = np.cumprod(1.0 - desk_schedule.beta)
    assert np.max(np.abs(recomputed - desk_schedule.alpha_bar)) <= 1e-12


def test_desk_schedule_pinned_terminal_value(desk_schedule):
    assert desk_schedule.alpha_bar[-1] == pytest.approx(DESK_ALPHA_BAR_T, rel=1e-12)


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(1, 1e-4, 0.02)
    with pytest.raises(ValueError):
        make_schedule(10, 0.0, 0.02)
    with pytest.raises(ValueError):
        make_schedule(10, 0.02, 1e-4)
    with pytest.raises(ValueError):
        make_schedule(10, 1e-4, 1.0)


def test_forward_noise_small_t_limit(desk_schedule):
    rng = np.random.default_rng(0)
    z0 = rng.random((4, 1, 8, 8))
    zt, eps = forward_noise(desk_schedule, z0, t=1, seed=1)
    bound = np.sqrt(1 - desk_schedule.alpha_bar[0]) * np.abs(eps).max() + 6e-5
    assert np.abs(zt - z0).max() <= bound


def test_forward_noise_terminal_decorrelation(dataset, desk_schedule):
    z0 = dataset.test.pixels[:16].astype(np.float64)  # > 10k pixels
    zt, _ = forward_noise(desk_schedule, z0, t=desk_schedule.T, seed=2)
    corr = np.corrcoef(zt.ravel(), z0.ravel())[0, 1]
    assert abs(corr) < 0.3


@pytest.mark.parametrize("t", [1, 60, 200])
def test_forward_noise_moments(desk_schedule, t):
    n = 100_000
    z0 = np.full((n, 1, 1, 1), 0.37, dtype=np.float64)
    zt, _ = forward_noise(desk_schedule, z0, t=t, seed=3 + t)
    ab = desk_schedule.alpha_bar[t - 1]
    assert np.var(zt) == pytest.approx(1.0 - ab, rel=0.05)
    assert np.mean(zt) == pytest.approx(np.sqrt(ab) * 0.37, abs=4 * np.sqrt((1 - ab) / n))


def test_forward_noise_per_item_t(desk_schedule):
    z0 = np.zeros((3, 1, 2, 2))
    t = np.array([1, 100, 200])
    zt, eps = forward_noise(desk_schedule, z0, t=t, seed=4)
    c_noise = np.sqrt(1 - desk_schedule.alpha_bar[t - 1])
    np.testing.assert_allclose(zt, c_noise.reshape(-1, 1, 1, 1) * eps, rtol=0, atol=1e-12)


def test_forward_noise_t_out_of_range(desk_schedule):
    z0 = np.zeros((1, 1, 2, 2))
    with pytest.raises(ValueError):
        forward_noise(desk_schedule, z0, t=0, seed=0)
    with pytest.raises(ValueError):
        forward_noise(desk_schedule, z0, t=desk_schedule.T + 1, seed=0)


def test_closed_form_inversion_every_t(dataset, desk_schedule):
    """(z_t, true eps) -> z0 exactly, exhaustively over t on a probe image."""
    z0 = dataset.test.pixels[:1].astype(np.float64)
    worst = 0.0
    for t in range(1, desk_schedule.T + 1):
        zt, eps = forward_noise(desk_schedule, z0, t=t, seed=t)
        c_signal, c_noise = desk_schedule.coeffs(t)
        z0_hat = (zt - c_noise * eps) / c_signal
        worst = max(worst, float(np.abs(z0_hat - z0).max()))
    assert worst < 1e-5


def test_denoise_step_oracle_final_step_exact(dataset, desk_schedule):
    z0 = dataset.test.pixels[:2].astype(np.float64)
    oracle = OracleEpsDenoiser(desk_schedule, z0)
    zt, _ = forward_noise(desk_schedule, z0, t=1, seed=5)
    out = denoise_step(oracle, desk_schedule, zt, t=1, seed=6)
    assert np.abs(out - z0).max() < 1e-5


def test_denoise_step_t1_has_no_stochastic_term(dataset, desk_schedule):
    z0 = dataset.test.pixels[:2].astype(np.float64)
    oracle = OracleEpsDenoiser(desk_schedule, z0)
    zt, _ = forward_noise(desk_schedule, z0, t=1, seed=7)
    one = denoise_step(oracle, desk_schedule, zt, t=1, seed=100)
    two = denoise_step(oracle, desk_schedule, zt, t=1, seed=200)
    np.testing.assert_array_equal(one, two)


def test_denoise_step_deterministic_given_seed(dataset, desk_schedule):
    z0 = dataset.test.pixels[:2].astype(np.float64)
    oracle = OracleEpsDenoiser(desk_schedule, z0)
    zt, _ = forward_noise(desk_schedule, z0, t=50, seed=8)
    one = denoise_step(oracle, desk_schedule, zt, t=50, seed=9)
    two = denoise_step(oracle, desk_schedule, zt, t=50, seed=9)
    np.testing.assert_array_equal(one, two)
    other = denoise_step(oracle, desk_schedule, zt, t=50, seed=10)
    assert not np.array_equal(one, other)


def test_denoise_step_t_out_of_range(dataset, desk_schedule):
    oracle = OracleEpsDenoiser(desk_schedule, dataset.test.pixels[:1].astype(np.float64))
    with pytest.raises(ValueError):
        denoise_step(oracle, desk_schedule, np.zeros((1, 1, 28, 28)), t=0, seed=0)


def test_purify_oracle_t1_identity(dataset, desk_schedule):
    z0 = dataset.test.pixels[:2].astype(np.float64)
    oracle = OracleEpsDenoiser(desk_schedule, z0)
    out = purify(oracle, desk_schedule, z0, PurifyConfig(t_star=1, seed=11))
    assert np.abs(out - z0).max() < 1e-5


def test_purify_oracle_full_ladder_recovers(dataset, desk_schedule):
    # the oracle's final step maps any z_1 back to z0 exactly, so a full
    # ladder from a deeper t_star recovers the input too
    z0 = dataset.test.pixels[:2].astype(np.float64)
    oracle = OracleEpsDenoiser(desk_schedule, z0)
    out = purify(oracle, desk_schedule, z0, PurifyConfig(t_star=20, seed=12))
    assert np.abs(out - z0).max() < 1e-8


def test_purify_oracle_early_exit_recovers(dataset, desk_schedule):
    z0 = dataset.test.pixels[:2].astype(np.float64)
    oracle = OracleEpsDenoiser(desk_schedule, z0)
    config = PurifyConfig(t_star=40, denoise_steps=10, seed=13)
    out = purify(oracle, desk_schedule, z0, config)
    assert np.abs(out - z0).max() < 1e-8


@pytest.fixture(scope="module")
def tiny_denoiser():
    return build_denoiser((1, 28, 28), T=50, seed=1)


@pytest.fixture(scope="module")
def tiny_schedule():
    return make_schedule(50, 1e-4, 0.02)


def test_purify_shape_and_range_untrained(dataset, tiny_denoiser, tiny_schedule):
    pixels = dataset.test.pixels[:8]
    for t_star in (1, 10, 50):
        out = purify(tiny_denoiser, tiny_schedule, pixels, PurifyConfig(t_star=t_star, seed=3))
        assert out.shape == pixels.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_purify_deterministic(dataset, tiny_denoiser, tiny_schedule):
    pixels = dataset.test.pixels[:4]
    config = PurifyConfig(t_star=12, seed=21)
    one = purify(tiny_denoiser, tiny_schedule, pixels, config)
    two = purify(tiny_denoiser, tiny_schedule, pixels, config)
    np.testing.assert_array_equal(one, two)


def test_purify_config_validation(tiny_schedule):
    with pytest.raises(ValueError):
        PurifyConfig(t_star=0).validate(tiny_schedule.T)
    with pytest.raises(ValueError):
        PurifyConfig(t_star=51).validate(tiny_schedule.T)
    with pytest.raises(ValueError):
        PurifyConfig(t_star=10, denoise_steps=11).validate(tiny_schedule.T)
    with pytest.raises(ValueError):
        PurifyConfig(t_star=10, denoise_steps=0).validate(tiny_schedule.T)


def test_sample_shape_range_determinism(tiny_denoiser, tiny_schedule):
    one = sample(tiny_denoiser, tiny_schedule, 3, seed=14)
    assert one.shape == (3, 1, 28, 28)
    assert one.min() >= 0.0 and one.max() <= 1.0
    two = sample(tiny_denoiser, tiny_schedule, 3, seed=14)
    np.testing.assert_array_equal(one, two)
    other = sample(tiny_denoiser, tiny_schedule, 3, seed=15)
    assert not np.array_equal(one, other)


def _tiny_split(dataset, n_train=512, n_test=128) -> DatasetSplit:
    return DatasetSplit(
        train=ImageBatch(dataset.train.pixels[:n_train], dataset.train.labels[:n_train]),
        test=ImageBatch(dataset.test.pixels[:n_test], dataset.test.labels[:n_test]),
        num_classes=dataset.num_classes,
        image_shape=dataset.image_shape,
    )


def test_train_denoiser_loss_decreases(dataset, tiny_schedule):
    model = build_denoiser((1, 28, 28), T=50, seed=2)
    report = train_denoiser(
        model, tiny_schedule, _tiny_split(dataset),
        epochs=2, learning_rate=2e-3, batch_size=128, seed=6,
    )
    assert report.epoch_mean_losses is not None
    assert report.epoch_mean_losses[-1] < report.epoch_mean_losses[0]
    assert report.test_mse is not None and report.test_mse >= 0.0


def test_train_denoiser_epochs_validated(dataset, tiny_denoiser, tiny_schedule):
    with pytest.raises(ValueError):
        train_denoiser(tiny_denoiser, tiny_schedule, _tiny_split(dataset),
                       epochs=0, learning_rate=1e-3, batch_size=64, seed=0)


def test_adversarial_augment_doubles_batch(dataset, tiny_schedule, trained_b):
    from advpurify.attacks import AttackConfig

    model = build_denoiser((1, 28, 28), T=50, seed=4)
    seen_sizes = []
    model.net.register_forward_hook(lambda mod, inp, out: seen_sizes.append(inp[0].shape[0]))

    split = _tiny_split(dataset, n_train=128, n_test=64)
    queries_before = trained_b.gradient_queries
    train_denoiser(
        model, tiny_schedule, split, epochs=1, learning_rate=1e-3, batch_size=64, seed=7,
        adversarial_augment=(trained_b, AttackConfig(kind="fgsm", epsilon=0.1)),
    )
    # two training batches of 64, each doubled; the trailing entry is the
    # held-out MSE pass
    assert seen_sizes[:2] == [128, 128]
    assert trained_b.gradient_queries > queries_before


def test_denoiser_checkpoint_round_trip(tiny_denoiser, dataset, tmp_path):
    path = tmp_path / "den.ckpt"
    save_denoiser(tiny_denoiser, path)
    restored = load_denoiser(path)
    zt = dataset.test.pixels[:2]
    np.testing.assert_array_equal(
        tiny_denoiser.predict_noise(zt, 5), restored.predict_noise(zt, 5)
    )
    assert restored.T == tiny_denoiser.T
    assert restored.base_channels == tiny_denoiser.base_channels


def test_denoise_from_steps_validation(dataset, desk_schedule):
    oracle = OracleEpsDenoiser(desk_schedule, dataset.test.pixels[:1].astype(np.float64))
    zt = np.zeros((1, 1, 28, 28))
    with pytest.raises(ValueError):
        denoise_from(oracle, desk_schedule, zt, t_start=10, seed=0, steps=11)
