import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_image, make_mask, textured_image
from imshield.attacks import (
    CounterAttackSpec,
    PerturbationBudget,
    PgdConfig,
    available_denoisers,
    counter_attack,
    jpeg_bytes,
    jpeg_roundtrip,
    parse_counter_attack,
    pgd_immunize,
    project,
    projected_gradient_descent,
    random_noise_immunize,
    robustness_protocol,
)
from imshield.backends import ConvEditor, MeanFillEditor
from imshield.backends.base import BackendCapabilities, EditBackend
from imshield.data import SampleTuple
from imshield.errors import CapabilityError, UnknownDenoiserError


def test_random_noise_kappa_zero_is_identity(rng):
    image = make_image(rng)
    out = random_noise_immunize(image, make_mask(), PerturbationBudget(kappa=0.0), seed=1)
    assert np.array_equal(out, image)


def test_random_noise_bounds_and_confinement(rng):
    image = make_image(rng, 32, 32, 0.3, 0.7)
    mask = make_mask()
    budget = PerturbationBudget(kappa=16 / 255)
    out = random_noise_immunize(image, mask, budget, seed=5)
    assert np.abs(out - image).max() <= budget.kappa + 1e-12
    outside = mask == 0
    assert np.array_equal(out[outside], image[outside])
    assert out.min() >= 0 and out.max() <= 1


def test_random_noise_seed_deterministic(rng):
    image = make_image(rng)
    mask = make_mask()
    budget = PerturbationBudget()
    a = random_noise_immunize(image, mask, budget, seed=7)
    b = random_noise_immunize(image, mask, budget, seed=7)
    c = random_noise_immunize(image, mask, budget, seed=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_projection_linf_exact(rng):
    budget = PerturbationBudget(kappa=0.05, norm="l_inf")
    delta = np.full((4, 4, 3), 0.1)  # magnitude 2 kappa
    out = project(delta, budget)
    assert np.all(out == 0.05)
    mixed = rng.uniform(-0.2, 0.2, (4, 4, 3))
    out = project(mixed, budget)
    assert np.abs(out).max() <= 0.05


def test_projection_l2(rng):
    budget = PerturbationBudget(kappa=0.1, norm="l_2")
    delta = rng.normal(size=(5, 5, 3))
    out = project(delta, budget)
    assert np.sqrt((out**2).sum()) <= 0.1 + 1e-12
    small = np.full((2,), 0.01)
    assert np.array_equal(project(small, PerturbationBudget(kappa=1.0, norm="l_2")), small)


def test_pgd_zero_gradient_leaves_delta_unchanged():
    budget = PerturbationBudget(kappa=0.1, norm="l_2")
    out = projected_gradient_descent(
        lambda d: np.zeros_like(d), np.zeros(4), budget, steps=25, step_size=0.05
    )
    assert np.array_equal(out, np.zeros(4))


def test_pgd_quadratic_toy_converges_to_budget_boundary():
    budget = PerturbationBudget(kappa=0.1, norm="l_2")
    out = projected_gradient_descent(
        lambda d: 2.0 * (d - 0.3), np.zeros(1), budget, steps=100, step_size=0.05
    )
    assert abs(out[0] - 0.1) < 1e-6


def test_pgd_quadratic_objective_monotone():
    budget = PerturbationBudget(kappa=0.1, norm="l_2")
    values = []

    def track(it, delta):
        values.append(float((delta[0] - 0.3) ** 2))

    projected_gradient_descent(
        lambda d: 2.0 * (d - 0.3), np.zeros(1), budget, steps=40, step_size=0.05,
        on_iteration=track,
    )
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["l_inf", "l_2"]))
def test_pgd_feasibility_invariant(seed, norm):
    r = np.random.default_rng(seed)
    budget = PerturbationBudget(kappa=0.06, norm=norm)
    mask = np.repeat((r.uniform(size=(6, 6, 1)) > 0.4).astype(np.float64), 3, axis=2)
    field = r.normal(size=(6, 6, 3))

    def grad_fn(d):
        return field + d

    feasible = []

    def check(it, delta):
        if norm == "l_inf":
            feasible.append(np.abs(delta).max() <= budget.kappa + 1e-12)
        else:
            feasible.append(np.sqrt((delta**2).sum()) <= budget.kappa + 1e-12)
        feasible.append(np.all(delta[mask == 0] == 0.0))

    projected_gradient_descent(
        grad_fn, np.zeros((6, 6, 3)), budget, steps=15, step_size=0.01,
        mask=mask, on_iteration=check,
    )
    assert all(feasible)


def test_pgd_immunize_encoder_target(rng):
    image = make_image(rng, 16, 16, 0.3, 0.5)
    mask = make_mask(16, 16)
    budget = PerturbationBudget(kappa=0.1)
    backend = MeanFillEditor()
    out = pgd_immunize(image, mask, backend, budget, PgdConfig(steps=30), seed=1)
    assert out.shape == image.shape
    outside = mask == 0
    assert np.array_equal(out[outside], image[outside])
    assert np.abs(out - image).max() <= budget.kappa + 1e-12
    # the encoder attack should actually shrink the latent norm
    before = np.linalg.norm(backend.encode_context(image, 1.0 - mask))
    after = np.linalg.norm(backend.encode_context(out, 1.0 - mask))
    assert after < before


def test_pgd_immunize_full_edit_target(rng):
    image = make_image(rng, 16, 16, 0.3, 0.45)
    mask = make_mask(16, 16)
    budget = PerturbationBudget(kappa=0.1)
    backend = ConvEditor()
    out = pgd_immunize(
        image, mask, backend, budget, PgdConfig(steps=10, target="full_edit"),
        prompt="p", edit_steps=1, seed=1,
    )
    assert np.abs(out - image).max() <= budget.kappa + 1e-12


class _NoSurfaces(EditBackend):
    backend_id = "opaque"
    capabilities = BackendCapabilities(differentiable=False)

    def raw_edit(self, request):
        return request.image


def test_pgd_capability_errors(rng):
    image = make_image(rng, 16, 16)
    mask = make_mask(16, 16)
    budget = PerturbationBudget(kappa=0.05)
    with pytest.raises(CapabilityError):
        pgd_immunize(image, mask, _NoSurfaces(), budget, PgdConfig(steps=2))
    with pytest.raises(CapabilityError):
        pgd_immunize(image, mask, _NoSurfaces(), budget,
                     PgdConfig(steps=2, target="full_edit"))


def test_jpeg_roundtrip_shape_range_determinism():
    image = textured_image(32, 32, seed=3)
    out = jpeg_roundtrip(image, 75)
    assert out.shape == image.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert jpeg_bytes(image, 75) == jpeg_bytes(image, 75)


def test_jpeg_quality_100_near_lossless_on_smooth_gradient():
    yy, xx = np.mgrid[0:32, 0:32]
    gradient = np.repeat(((xx + yy) / 124.0 + 0.25)[:, :, None], 3, axis=2)
    out = jpeg_roundtrip(gradient, 100)
    assert np.abs(out - gradient).max() <= 0.05


def test_jpeg_quality_monotonicity():
    image = textured_image(48, 48, seed=11)
    err50 = np.abs(jpeg_roundtrip(image, 50) - image).mean()
    err95 = np.abs(jpeg_roundtrip(image, 95) - image).mean()
    assert err50 >= err95


def test_counter_attack_denoisers(rng):
    image = textured_image(32, 32, seed=5)
    for denoiser_id in available_denoisers():
        out = counter_attack(image, CounterAttackSpec(kind="denoise", denoiser_id=denoiser_id))
        assert out.shape == image.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_counter_attack_unknown_denoiser(rng):
    with pytest.raises(UnknownDenoiserError) as exc:
        counter_attack(make_image(rng), CounterAttackSpec(kind="denoise", denoiser_id="dncnn"))
    assert "median3" in str(exc.value)


def test_counter_attack_spec_validation():
    with pytest.raises(ValueError):
        CounterAttackSpec(kind="blur")
    with pytest.raises(ValueError):
        CounterAttackSpec(kind="jpeg", jpeg_quality=0)


def test_parse_counter_attack():
    spec = parse_counter_attack("jpeg:60")
    assert spec.kind == "jpeg" and spec.jpeg_quality == 60
    spec = parse_counter_attack("denoise:median3")
    assert spec.kind == "denoise" and spec.denoiser_id == "median3"
    assert parse_counter_attack("jpeg").jpeg_quality == 75
    with pytest.raises(ValueError):
        parse_counter_attack("sharpen:2")


def _toy_dataset(rng, n=5):
    samples = []
    for i in range(n):
        samples.append(
            SampleTuple(
                id=f"s{i}",
                image=make_image(rng, 16, 16, 0.25, 0.5),
                mask=make_mask(16, 16),
                prompt=f"prompt {i}",
                split="seen" if i % 2 == 0 else "unseen",
            )
        )
    return samples


def test_robustness_protocol_full_schema(rng):
    samples = _toy_dataset(rng, 5)
    budget = PerturbationBudget(kappa=16 / 255)
    specs = [CounterAttackSpec(kind="jpeg", jpeg_quality=60),
             CounterAttackSpec(kind="denoise", denoiser_id="median3")]
    report = robustness_protocol(
        lambda image, mask: random_noise_immunize(image, mask, budget, seed=3),
        samples, MeanFillEditor(), specs, edit_steps=1,
    )
    assert report.arms == ["none", "jpeg:60", "denoise:median3"]
    assert len(report.rows) == len(samples) * 3
    assert not report.failures
    agg = report.aggregates()
    for arm in report.arms:
        for split in ("seen", "unseen"):
            assert "ssim_edit" in agg[arm][split]
            assert "ssim_noise" in agg[arm][split]


def test_robustness_protocol_empty_specs_gives_no_attack_arm(rng):
    samples = _toy_dataset(rng, 2)
    report = robustness_protocol(
        lambda image, mask: image, samples, MeanFillEditor(), [], edit_steps=1
    )
    assert report.arms == ["none"]
    assert len(report.rows) == 2


def test_robustness_protocol_continues_past_failures(rng):
    samples = _toy_dataset(rng, 3)

    calls = {"n": 0}

    def flaky_immunizer(image, mask):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("boom")
        return image

    report = robustness_protocol(flaky_immunizer, samples, MeanFillEditor(), [],
                                 edit_steps=1)
    assert len(report.failures) == 1
    assert len(report.rows) == 2
