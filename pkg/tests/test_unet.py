import copy

import pytest
import torch
from torch import nn

from diffpad.data import SynthConfig, synth_bonafide
from diffpad.diffusion import default_schedule, forward_marginal, to_model_space
from diffpad.errors import EmptyDataset, InvalidConfig, NonFiniteLoss, ShapeMismatch
from diffpad.unet import (Downsample, NetConfig, ResBlock, TrainConfig, Upsample,
                          check_directional_gradients, fit, gradient_check, init_network,
                          parameter_count, predict_noise, timestep_embedding, train)

SMALL = NetConfig(in_channels=1, base_channels=8, depth=2, time_embed_dim=16,
                  image_height=16, image_width=32)


def test_init_deterministic():
    a, b = init_network(SMALL, 3), init_network(SMALL, 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = init_network(SMALL, 4)
    assert not torch.equal(next(a.parameters()), next(c.parameters()))


def test_fan_in_scale():
    net = init_network(NetConfig(), 0)
    w = net.down_blocks[0].conv1.weight
    bound = 1.0 / (w.shape[1] * 9) ** 0.5
    assert w.abs().max() <= bound and w.abs().max() > 0.9 * bound


def test_divisibility():
    NetConfig(depth=2, image_height=32, image_width=64).validate()
    with pytest.raises(InvalidConfig):
        init_network(NetConfig(depth=6, image_height=32, image_width=64), 0)


def test_parameter_count_matches_layer_arithmetic():
    def conv(ci, co, k):
        return ci * co * k * k + co

    def linear(a, b):
        return a * b + b

    def norm(c):
        return 2 * c

    def block(ci, co, d):
        return (norm(ci) + conv(ci, co, 3) + linear(d, co) + norm(co) + conv(co, co, 3)
                + (conv(ci, co, 1) if ci != co else 0))

    d = 16
    expected = (linear(d, d) * 2 + conv(1, 8, 3)
                + block(8, 8, d) + conv(8, 8, 3)        # level 0 and its downsample
                + block(8, 16, d) + conv(16, 16, 3)     # level 1 and its downsample
                + block(16, 16, d)                      # middle
                + conv(16, 16, 3) + block(32, 16, d)    # up level 1
                + conv(16, 16, 3) + block(24, 8, d)     # up level 0
                + norm(8) + conv(8, 1, 3))
    assert parameter_count(init_network(SMALL, 0)) == expected


def test_predict_noise_shape_and_purity():
    net = init_network(SMALL, 0)
    x = torch.randn(3, 1, 16, 32)
    out = predict_noise(net, x, 5)
    assert out.shape == x.shape
    assert torch.equal(out, predict_noise(net, x, 5))
    assert predict_noise(net, x[0], 5).shape == x[0].shape
    with pytest.raises(ShapeMismatch):
        predict_noise(net, torch.randn(1, 1, 16, 16), 5)


def test_timestep_embedding():
    emb = timestep_embedding(torch.tensor([0, 3]), 8)
    assert emb.shape == (2, 8)
    assert torch.equal(emb[0], torch.tensor([0.0] * 4 + [1.0] * 4))


# --- gradient checks -----------------------------------------------------------

def output_loss(module, *inputs):
    return lambda: (module(*inputs) ** 2).mean()


def per_layer_cases():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(2, 6, 8, 8, generator=gen, dtype=torch.float64)
    temb = torch.randn(2, 12, generator=gen, dtype=torch.float64)
    yield "conv", nn.Conv2d(6, 4, 3, padding=1), (x,)
    yield "linear", nn.Linear(12, 5), (temb,)
    yield "groupnorm", nn.GroupNorm(3, 6), (x,)
    yield "resblock", ResBlock(6, 8, 12), (x, temb)
    yield "downsample", Downsample(6), (x,)
    yield "upsample", Upsample(6), (x,)
    yield "silu", nn.Sequential(nn.Conv2d(6, 6, 1), nn.SiLU()), (x,)


@pytest.mark.parametrize("name,module,inputs", list(per_layer_cases()),
                         ids=[c[0] for c in per_layer_cases()])
def test_per_layer_gradients(name, module, inputs):
    torch.manual_seed(1)
    module = module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.1 * torch.randn_like(p))
    err = check_directional_gradients(output_loss(module, *inputs), list(module.parameters()),
                                      n_directions=5, seed=2)
    assert err < 1e-3


def test_time_embedding_gradient():
    net = init_network(SMALL, 0).double()
    t = torch.tensor([3, 40])

    def loss():
        return (net.time_mlp(timestep_embedding(t, 16, torch.float64)) ** 2).mean()

    assert check_directional_gradients(loss, list(net.time_mlp.parameters()), 5, 0) < 1e-3


def test_input_gradient_through_network():
    net = init_network(SMALL, 0).double()
    x = torch.randn(1, 1, 16, 32, dtype=torch.float64, requires_grad=True)
    t = torch.tensor([7])
    err = check_directional_gradients(output_loss(net, x, t), [x], 5, 0)
    assert err < 1e-3


def test_end_to_end_gradient_check():
    net = init_network(SMALL, 0)
    x0 = torch.rand(2, 1, 16, 32, generator=torch.Generator().manual_seed(0))
    err = gradient_check(net, x0, default_schedule(100), n_directions=4, seed=0)
    assert err < 1e-3
    assert err == gradient_check(net, x0, default_schedule(100), n_directions=4, seed=0)


class LinearToy(nn.Module):
    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(0.3))

    def forward(self, x, t):
        return self.scale * x


def test_linear_toy_gradient_is_exact():
    # The loss is quadratic in the single parameter, so central differences are exact.
    x0 = torch.rand(4, 1, 3, 3, generator=torch.Generator().manual_seed(0))
    assert gradient_check(LinearToy(), x0, default_schedule(20), 3, 0) < 1e-8


def test_gradient_check_reports_nan():
    p = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    err = check_directional_gradients(lambda: (p * float("nan")).sum(), [p], 2, 0)
    assert err != err


# --- training ------------------------------------------------------------------

def synth_tensor(n, seed=0):
    cfg = SynthConfig(image_height=16, image_width=32, images_per_subject=10, seed=seed)
    return torch.stack([torch.from_numpy(synth_bonafide(cfg, i)).float()[None] for i in range(n)])


def test_zero_learning_rate_keeps_parameters():
    net = init_network(SMALL, 0)
    before = copy.deepcopy(net.state_dict())
    train(net, synth_tensor(1), default_schedule(100),
          TrainConfig(epochs=1, batch_size=1, learning_rate=0.0))
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])


def test_training_errors():
    net = init_network(SMALL, 0)
    with pytest.raises(EmptyDataset):
        train(net, torch.zeros(0, 1, 16, 32), default_schedule(100), TrainConfig())
    with pytest.raises(ShapeMismatch):
        train(net, torch.zeros(2, 1, 8, 8), default_schedule(100), TrainConfig())

    def exploding(model, batch, gen):
        return model(batch, torch.ones(len(batch), dtype=torch.long)).sum() * float("inf")

    with pytest.raises(NonFiniteLoss):
        fit(net, torch.zeros(2, 1, 16, 32), exploding, TrainConfig(epochs=1))


@pytest.fixture(scope="module")
def trained():
    data = synth_tensor(200)
    cfg = TrainConfig(epochs=30, batch_size=32, learning_rate=2e-3, seed=0)
    net, trace = train(init_network(SMALL, 0), data, default_schedule(100), cfg)
    return net, trace, data


def test_training_loss_decreases(trained):
    net, trace, _ = trained
    assert len(trace) == 30
    assert trace[-1] < trace[0]
    assert all(torch.isfinite(p).all() for p in net.parameters())


def test_time_conditioning_matters(trained):
    net, _, _ = trained
    # A lightly noised held-out image, fed once with t=1 and once with t=T.
    x0 = to_model_space(synth_tensor(32, seed=9))
    noise = torch.randn(x0.shape, generator=torch.Generator().manual_seed(0))
    x_t = forward_marginal(x0, 1, noise, default_schedule(100))
    early = predict_noise(net, x_t, 1).abs().mean().item()
    late = predict_noise(net, x_t, 100).abs().mean().item()
    assert abs(early - late) / max(early, late) > 0.05


def test_training_deterministic():
    data = synth_tensor(24)
    cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=1e-3, seed=5)
    a, ta = train(init_network(SMALL, 1), data, default_schedule(50), cfg)
    b, tb = train(init_network(SMALL, 1), data, default_schedule(50), cfg)
    assert ta == tb
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(epochs=0).validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(learning_rate=-1.0).validate()
