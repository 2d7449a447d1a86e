import copy
import math

import pytest
import torch

from diffpad.baselines import (AutoencoderConfig, ae_reconstruct, init_autoencoder,
                               kl_divergence, load_autoencoder, save_autoencoder,
                               train_autoencoder, vae_loss)
from diffpad.data import SynthConfig, synth_bonafide
from diffpad.errors import InvalidConfig, ShapeMismatch, WrongVariant
from diffpad.pipeline import AutoencoderReconstructor, score_sample
from diffpad.unet import TrainConfig, check_directional_gradients


def config(variant):
    return AutoencoderConfig(variant, 1, 16, 32, latent_dim=16, channels=(8, 16, 16))


def images(n, seed=0):
    cfg = SynthConfig(image_height=16, image_width=32, images_per_subject=10, seed=seed)
    return torch.stack([torch.from_numpy(synth_bonafide(cfg, i)).float()[None] for i in range(n)])


@pytest.mark.parametrize("variant", ["cae", "vae"])
def test_reconstruct_shape_and_purity(variant):
    net = init_autoencoder(config(variant), 0)
    x = images(3)
    out = ae_reconstruct(net, x)
    assert out.shape == x.shape and torch.equal(out, ae_reconstruct(net, x))
    assert ae_reconstruct(net, x[0]).shape == x[0].shape
    with pytest.raises(ShapeMismatch):
        ae_reconstruct(net, torch.rand(1, 1, 8, 8))


def test_latent_shapes():
    cae, vae = init_autoencoder(config("cae"), 0), init_autoencoder(config("vae"), 0)
    x = images(2)
    # 16x32 input -> 2x4 bottleneck; 16 latents / 8 positions = 2 channels
    assert cae.encode(x).shape == (2, 2, 2, 4)
    mean, logvar = vae.encode(x)
    assert mean.shape == logvar.shape == (2, 2, 2, 4)
    with pytest.raises(InvalidConfig):
        AutoencoderConfig("gan").validate()
    with pytest.raises(InvalidConfig):
        AutoencoderConfig("vae", kl_weight=-1.0).validate()


def test_vae_uses_posterior_mean():
    net = init_autoencoder(config("vae"), 1)
    x = images(2)
    assert torch.equal(ae_reconstruct(net, x), net.decode(net.encode(x)[0]).detach())


# --- KL and the ELBO -----------------------------------------------------------

def test_kl_standard_normal_posterior_is_zero():
    net = init_autoencoder(config("vae"), 0)
    with torch.no_grad():
        for head in (net.to_mean, net.to_logvar):
            head.weight.zero_()
            head.bias.zero_()
    _, _, kl = vae_loss(net, images(4), 0)
    assert kl.item() == 0.0


def test_kl_one_dimensional_closed_form():
    kl = kl_divergence(torch.tensor([[1.0]], dtype=torch.float64), torch.tensor([[0.0]], dtype=torch.float64))
    assert kl.item() == 0.5


def test_kl_monte_carlo():
    gen = torch.Generator().manual_seed(0)
    mean = torch.randn(4, generator=gen, dtype=torch.float64)
    logvar = torch.randn(4, generator=gen, dtype=torch.float64) * 0.5
    std = torch.exp(0.5 * logvar)
    z = mean + std * torch.randn(10_000, 4, generator=gen, dtype=torch.float64)
    log_q = (-0.5 * ((z - mean) / std) ** 2 - torch.log(std) - 0.5 * math.log(2 * math.pi)).sum(1)
    log_p = (-0.5 * z ** 2 - 0.5 * math.log(2 * math.pi)).sum(1)
    ratio = log_q - log_p
    se = ratio.std().item() / math.sqrt(len(ratio))
    assert abs(ratio.mean().item() - kl_divergence(mean[None], logvar[None]).item()) < 3 * se


def test_vae_loss_parts_and_determinism():
    net = init_autoencoder(config("vae"), 0)
    x = images(4)
    total, rec, kl = vae_loss(net, x, 5, kl_weight=1.0)
    assert total.item() == pytest.approx(rec.item() + kl.item(), rel=1e-6)
    default, _, _ = vae_loss(net, x, 5)
    assert default.item() == pytest.approx(rec.item() + net.config.kl_weight * kl.item(), rel=1e-6)
    assert vae_loss(net, x, 5)[0].item() == default.item()
    with pytest.raises(WrongVariant):
        vae_loss(init_autoencoder(config("cae"), 0), x, 0)


# --- gradients -----------------------------------------------------------------

def test_gradient_checks_encoder_decoder_kl():
    net = init_autoencoder(config("vae"), 0).double()
    x = images(2).double()
    z = torch.randn(2, 2, 2, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    encoder = list(net.encoder.parameters()) + list(net.to_mean.parameters()) + list(net.to_logvar.parameters())
    decoder = list(net.from_latent.parameters()) + list(net.decoder.parameters())
    # larger steps straddle ReLU kinks; 1e-6 keeps the difference quotient on one linear piece
    step = 1e-6

    def check(loss_fn, params):
        return check_directional_gradients(loss_fn, params, 4, 0, step=step)

    assert check(lambda: sum((h ** 2).mean() for h in net.encode(x)), encoder) < 1e-3
    assert check(lambda: (net.decode(z) ** 2).mean(), decoder) < 1e-3
    assert check(lambda: vae_loss(net, x, 3)[2], encoder) < 1e-3
    assert check(lambda: vae_loss(net, x, 3)[0], list(net.parameters())) < 1e-3
    cae = init_autoencoder(config("cae"), 0).double()
    assert check(lambda: ((cae(x) - x) ** 2).mean(), list(cae.parameters())) < 1e-3


# --- training ------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["cae", "vae"])
def test_zero_learning_rate_and_determinism(variant):
    data = images(16)
    net = init_autoencoder(config(variant), 0)
    before = copy.deepcopy(net.state_dict())
    train_autoencoder(net, data, TrainConfig(epochs=1, batch_size=4, learning_rate=0.0))
    assert all(torch.equal(v, before[k]) for k, v in net.state_dict().items())
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=3)
    _, ta = train_autoencoder(init_autoencoder(config(variant), 0), data, cfg)
    _, tb = train_autoencoder(init_autoencoder(config(variant), 0), data, cfg)
    assert ta == tb


@pytest.fixture(scope="module", params=["cae", "vae"])
def trained(request):
    data = images(200)
    net, trace = train_autoencoder(init_autoencoder(config(request.param), 0), data,
                                   TrainConfig(epochs=30, batch_size=32, learning_rate=2e-3))
    return request.param, net, trace


def test_training_loss_decreases(trained):
    _, _, trace = trained
    assert len(trace) == 30 and trace[-1] < trace[0]


def test_trained_beats_untrained_on_held_out(trained):
    variant, net, _ = trained
    held_out = images(20, seed=99)

    def median_mse(model):
        return ((ae_reconstruct(model, held_out) - held_out) ** 2).flatten(1).mean(1).median().item()

    assert median_mse(net) < median_mse(init_autoencoder(config(variant), 0))


def test_reconstructions_depend_on_input(trained):
    # a collapsed posterior decodes every input to the same image
    _, net, _ = trained
    out = ae_reconstruct(net, images(20, seed=99))
    assert out.var(dim=0).mean().item() > 1e-4


def test_drop_in_reconstructor_and_checkpoint(tmp_path, trained):
    variant, net, _ = trained
    x = images(1, seed=7)[0]
    score = score_sample(x, AutoencoderReconstructor(net), "mse").score
    assert score == pytest.approx(((ae_reconstruct(net, x) - x) ** 2).mean().item(), rel=1e-6)
    save_autoencoder(tmp_path / "ae.ckpt", net)
    again, ckpt = load_autoencoder(tmp_path / "ae.ckpt")
    assert ckpt.kind == variant
    assert torch.equal(ae_reconstruct(again, x), ae_reconstruct(net, x))
