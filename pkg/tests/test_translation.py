import math

import numpy as np
import pytest
import torch

from lesionforge.errors import DataError
from lesionforge.translation import (
    LESION,
    NON_LESION,
    TERMS,
    LossWeights,
    SharedLatentTranslator,
    TranslatorArch,
    TranslatorTrainConfig,
    cycle_loss,
    decode,
    encode,
    gan_loss,
    kl_diag_gaussian,
    load_translator,
    make_optimizers,
    reconstruction_error,
    save_translator,
    total_objective,
    train_step,
    train_translator,
    translate,
    translate_batch,
    vae_loss,
)

MICRO = TranslatorArch(side=8, channels=1, n_down=1, n_res=1, dis_channels=2, dis_layers=1)


def micro_model(seed=0, dtype=torch.float64):
    return SharedLatentTranslator(MICRO, seed=seed).to(dtype)


def unique_parameters(model):
    seen, out = set(), []
    for p in model.parameters():
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def test_micro_model_is_small():
    assert sum(p.numel() for p in unique_parameters(micro_model())) <= 1000


# -- KL -----------------------------------------------------------------------


def test_kl_closed_form_cases():
    assert float(kl_diag_gaussian(torch.zeros(5))) == 0.0
    assert float(kl_diag_gaussian(torch.ones(1), reduction="sum")) == 0.5
    # var = e: 0.5 * (e - 1 - 1)
    assert float(kl_diag_gaussian(torch.zeros(1), torch.ones(1), reduction="sum")) == pytest.approx(0.5 * (math.e - 2))


@pytest.mark.parametrize("dim", [1, 4, 16])
def test_kl_matches_monte_carlo(dim):
    g = torch.Generator().manual_seed(dim)
    mean = torch.randn(dim, generator=g, dtype=torch.float64)
    logvar = torch.randn(dim, generator=g, dtype=torch.float64) * 0.5
    std = torch.exp(0.5 * logvar)
    n = 100_000
    z = mean + std * torch.randn(n, dim, generator=g, dtype=torch.float64)
    log_q = -0.5 * (((z - mean) / std) ** 2 + logvar + math.log(2 * math.pi)).sum(1)
    log_p = -0.5 * (z**2 + math.log(2 * math.pi)).sum(1)
    samples = log_q - log_p
    estimate, se = float(samples.mean()), float(samples.std() / math.sqrt(n))
    exact = float(kl_diag_gaussian(mean, logvar, reduction="sum"))
    assert abs(estimate - exact) <= 3 * se


# -- gradients ------------------------------------------------------------------


def finite_difference_check(model, loss_fn, n_probe=40, h=1e-6, seed=0):
    """Compare autograd with central differences on randomly chosen parameter entries."""
    params = unique_parameters(model)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    probes = [(k, int(rng.integers(p.numel()))) for k, p in enumerate(params) for _ in range(2)]
    rng.shuffle(probes)
    checked = 0
    for k, idx in probes:
        p = params[k]
        g = grads[k]
        analytic = 0.0 if g is None else float(g.reshape(-1)[idx])
        flat = p.data.reshape(-1)
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + h
            up = float(loss_fn())
            flat[idx] = orig - h
            down = float(loss_fn())
            flat[idx] = orig
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, abs(analytic - numeric) / scale)
        checked += 1
        if checked >= n_probe:
            break
    return worst


def micro_batch(seed, n=3):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 1, 8, 8, generator=g, dtype=torch.float64) * 0.8 + 0.1


def seeded(seed):
    return torch.Generator().manual_seed(seed)


def test_vae_loss_gradients():
    model = micro_model(1)
    x = micro_batch(0)
    w = LossWeights()
    assert finite_difference_check(model, lambda: vae_loss(model, LESION, x, w, seeded(5))) < 1e-3


def test_gan_loss_gradients():
    model = micro_model(2)
    x_l, x_h = micro_batch(1), micro_batch(2)
    w = LossWeights()

    def value():
        return gan_loss(model, LESION, x_l, translate_batch(model, NON_LESION, LESION, x_h, seeded(6)), w).value

    def g_loss():
        return gan_loss(model, LESION, x_l, translate_batch(model, NON_LESION, LESION, x_h, seeded(6)), w).g_loss

    assert finite_difference_check(model, value) < 1e-3
    assert finite_difference_check(model, g_loss, seed=1) < 1e-3


def test_cycle_loss_gradients():
    model = micro_model(3)
    x = micro_batch(3)
    w = LossWeights()
    assert finite_difference_check(model, lambda: cycle_loss(model, NON_LESION, x, w, seeded(7))) < 1e-3


# -- loss structure ---------------------------------------------------------------


def test_gan_value_at_chance_discriminator():
    model = micro_model(4)
    with torch.no_grad():
        last = model.discriminator(LESION).net[-1]
        last.weight.zero_()
        last.bias.zero_()
    w = LossWeights(adversarial=7.0)
    x = micro_batch(4)
    terms = gan_loss(model, LESION, x, translate_batch(model, NON_LESION, LESION, x), w)
    assert terms.value.item() == pytest.approx(-2 * 7.0 * math.log(2), abs=1e-12)


def test_zero_weights_zero_terms():
    model = micro_model(5)
    w = LossWeights(0, 0, 0, 0, 0)
    terms = total_objective(model, micro_batch(5), micro_batch(6), w, seed=0)
    for k in TERMS:
        assert terms[k].item() == 0.0


def test_total_is_sum_of_terms():
    model = micro_model(6)
    terms = total_objective(model, micro_batch(7), micro_batch(8), LossWeights(), seed=3)
    assert terms["total"].item() == pytest.approx(sum(terms[k].item() for k in TERMS), rel=1e-12)


def test_terms_are_linear_in_weights():
    model = micro_model(7)
    x_l, x_h = micro_batch(9), micro_batch(10)
    a = total_objective(model, x_l, x_h, LossWeights(), seed=1)
    b = total_objective(model, x_l, x_h, LossWeights(20, 0.2, 200, 0.2, 200), seed=1)
    for k in TERMS:
        assert b[k].item() == pytest.approx(2 * a[k].item(), rel=1e-10)


# -- sharing -----------------------------------------------------------------------


def test_shared_blocks_are_single_storage():
    model = micro_model(8)
    assert model.encoder(LESION).shared is model.encoder(NON_LESION).shared
    assert model.generator(LESION).shared is model.generator(NON_LESION).shared
    x = micro_batch(11)
    before = encode(model, NON_LESION, x).mean.clone()
    with torch.no_grad():
        for p in model.encoder(LESION).shared.parameters():
            p.add_(0.5)
    after = encode(model, NON_LESION, x).mean
    assert not torch.allclose(before, after)

    z = encode(model, LESION, x).mean
    out_before = decode(model, NON_LESION, z).clone()
    with torch.no_grad():
        for p in model.generator(LESION).shared.parameters():
            p.mul_(1.5)
    assert not torch.allclose(out_before, decode(model, NON_LESION, z))


def test_domain_specific_layers_are_separate():
    model = micro_model(9)
    assert model.encoder(LESION).front is not model.encoder(NON_LESION).front
    names = {n for n, _ in model.named_parameters()}
    assert not any(n.startswith("encoders.nonlesion.shared") for n in names)


# -- training ----------------------------------------------------------------------


def test_one_step_moves_generator_down_and_discriminator_up():
    torch.manual_seed(0)
    model = micro_model(10, torch.float32)
    x_l, x_h = micro_batch(12, 8).float(), micro_batch(13, 8).float()
    w = LossWeights()
    cfg = TranslatorTrainConfig(lr=1e-3, weight_decay=0.0)
    opt_g, opt_d = make_optimizers(model, cfg)

    from lesionforge.translation import discriminator_objective, generator_objective

    before_g = generator_objective(model, x_l, x_h, w, seeded(0)).loss.item()
    before_d = discriminator_objective(model, x_l, x_h, w, seeded(1)).item()
    opt_g.zero_grad()
    generator_objective(model, x_l, x_h, w, seeded(0)).loss.backward()
    opt_g.step()
    after_g = generator_objective(model, x_l, x_h, w, seeded(0)).loss.item()
    assert after_g < before_g

    mid_d = discriminator_objective(model, x_l, x_h, w, seeded(1)).item()
    opt_d.zero_grad()
    (-discriminator_objective(model, x_l, x_h, w, seeded(1))).backward()
    opt_d.step()
    assert discriminator_objective(model, x_l, x_h, w, seeded(1)).item() > mid_d
    assert np.isfinite(before_d)


def test_train_step_rejects_non_finite():
    from lesionforge.errors import NumericalError

    model = micro_model(11, torch.float32)
    opt_g, opt_d = make_optimizers(model, TranslatorTrainConfig())
    x = micro_batch(14).float()
    bad = x.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError):
        train_step(model, bad, x, LossWeights(), opt_g, opt_d, seeded(0))


def smooth_patches(seed, n, side=16, bright=False):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    out = []
    for _ in range(n):
        a, b = rng.uniform(0.2, 0.5, 2)
        px = a + 0.2 * b * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 1.5) + rng.random()))
        if bright:
            r = np.hypot(xx - 0.5, yy - 0.5)
            px = px + 0.3 * (r < 0.2)
        out.append(np.clip(px, 0, 1))
    return np.stack(out)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_training_reduces_reconstruction_error(seed):
    arch = TranslatorArch(side=16, channels=4, n_down=1, n_res=1, dis_channels=4, dis_layers=2)
    lesion, normal = smooth_patches(seed, 24, bright=True), smooth_patches(seed + 10, 24)
    init, _ = train_translator(lesion, normal, arch, LossWeights(), TranslatorTrainConfig(epochs=0, seed=seed))
    model, history = train_translator(lesion, normal, arch, LossWeights(), TranslatorTrainConfig(epochs=8, lr=1e-3, seed=seed))
    for domain, x in ((LESION, lesion), (NON_LESION, normal)):
        assert reconstruction_error(model, domain, x) < reconstruction_error(init, domain, x)
    assert len(history.rows) == 8 * len(TERMS)


def test_zero_epochs_returns_initialization():
    arch = TranslatorArch(side=16, channels=4, n_down=1, n_res=1, dis_channels=4, dis_layers=2)
    x = smooth_patches(0, 4)
    model, history = train_translator(x, x, arch, LossWeights(), TranslatorTrainConfig(epochs=0, seed=3))
    fresh = SharedLatentTranslator(arch, seed=3)
    for (ka, a), (kb, b) in zip(model.state_dict().items(), fresh.state_dict().items()):
        assert ka == kb and torch.equal(a, b)
    assert history.rows == []


def test_loss_curve_csv(tmp_path):
    arch = TranslatorArch(side=16, channels=2, n_down=1, n_res=1, dis_channels=2, dis_layers=2)
    x = smooth_patches(0, 8)
    _, history = train_translator(x, x, arch, LossWeights(), TranslatorTrainConfig(epochs=3, batch_size=4))
    history.write_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,term,value"
    assert len(lines) == 1 + 3 * 6
    assert {line.split(",")[1] for line in lines[1:]} == set(TERMS)


def test_training_is_deterministic():
    arch = TranslatorArch(side=16, channels=2, n_down=1, n_res=1, dis_channels=2, dis_layers=2)
    x, y = smooth_patches(0, 8), smooth_patches(1, 8, bright=True)
    cfg = TranslatorTrainConfig(epochs=2, batch_size=4, seed=5)
    a, _ = train_translator(y, x, arch, LossWeights(), cfg)
    b, _ = train_translator(y, x, arch, LossWeights(), cfg)
    np.testing.assert_array_equal(translate(a, x), translate(b, x))


def test_translate_is_deterministic_and_shaped():
    model = micro_model(12, torch.float32)
    x = micro_batch(15).float().numpy()[:, 0]
    a, b = translate(model, x), translate(model, x)
    np.testing.assert_array_equal(a, b)
    assert a.shape == x.shape
    assert translate(model, x[0]).shape == (8, 8)
    assert np.all((a >= 0) & (a <= 1))


def test_shape_and_domain_errors():
    model = micro_model(13, torch.float32)
    with pytest.raises(DataError):
        translate(model, np.zeros((9, 9)))
    with pytest.raises(DataError):
        translate(model, np.zeros((8, 8)), "bone", LESION)
    with pytest.raises(DataError):
        decode(model, LESION, torch.zeros(1, 3, 4, 4))
    with pytest.raises(DataError):
        train_translator(np.zeros((0, 8, 8)), np.zeros((2, 8, 8)), MICRO, LossWeights(), TranslatorTrainConfig())


def test_checkpoint_round_trip(tmp_path):
    model = micro_model(14, torch.float32)
    save_translator(tmp_path / "t.pt", model, LossWeights(), extra={"s": 1})
    back, blob = load_translator(tmp_path / "t.pt")
    x = micro_batch(16).float().numpy()[:, 0]
    np.testing.assert_array_equal(translate(model, x), translate(back, x))
    assert blob["extra"]["s"] == 1
    assert back.encoder(LESION).shared is back.encoder(NON_LESION).shared
