import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from torch import nn

from conftest import central_difference
from splitmi import AuxClassifier, AuxGenerator, DefenseConfig, SplitModel, build_default_architecture
from splitmi.data import ArrayDataset, Batch, gaussian_classes
from splitmi.errors import ConfigurationError, DivergenceError, InputContractError
from splitmi.objectives import loss_da, loss_dr, loss_la, loss_lr, loss_prediction
from splitmi.trainer import (
    BaselineDefenseConfig,
    BoundaryDefense,
    GradientAmplifier,
    _session,
    apply_compression_defense,
    apply_noise_defense,
    defense_step,
    plain_train,
    plain_train_step,
    scheduled_lr,
    train,
)

D = torch.float64


class Scale(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([value], dtype=D))

    def forward(self, x):
        return self.w * x


class TwoLogits(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([value], dtype=D))

    def forward(self, z):
        return torch.cat([self.w * z, -self.w * z], dim=1)


def toy_setup():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(12, 1, generator=gen, dtype=D)
    y = (x[:, 0] > 0).long()
    ds = ArrayDataset(x, y)
    model = SplitModel(Scale(0.8), Scale(-0.6), TwoLogits(0.5), (1,), 2)
    g_net = nn.Linear(1, 1).double()
    a_net = nn.Linear(1, 2).double()
    with torch.no_grad():
        g_net.weight.fill_(0.3), g_net.bias.fill_(0.1)
        a_net.weight.copy_(torch.tensor([[0.4], [-0.2]])), a_net.bias.zero_()
    return ds, model, AuxGenerator(g_net), AuxClassifier(a_net)


def small_task(seed=0, n=96):
    x, y = gaussian_classes(n, (1, 4, 4), 3, separation=3.0, seed=seed)
    return ArrayDataset(x, y)


def desk_like(seed=0):
    model = build_default_architecture((1, 4, 4), 3, seed=seed, width=4)
    return model, AuxGenerator.for_model(model, seed + 1), AuxClassifier.for_model(model, hidden=8, seed=seed + 2)


def params(model):
    return [p.detach().clone() for p in model.parameters()]


# -- one step --------------------------------------------------------------------------


def test_one_step_matches_finite_differences_of_combined_loss():
    ds, model, gen, aux = toy_setup()
    cfg = DefenseConfig(lambda_d=0.3, lambda_l=0.2, learning_rate=0.1, batch_size=4, aux_learning_rate=0.05,
                        generator_learning_rate=0.05)
    device, link = _session(model, ds, cfg, gen, aux)
    sampler = copy.deepcopy(device.sampler)
    batch = ds.batch([0, 3, 5, 9])
    before = {k: copy.deepcopy(getattr(model, k)) for k in ("head", "encoder", "classifier")}
    defense_step(model, gen, aux, batch, ds, cfg, device, link)

    draw = sampler.draw(4)
    x_neg, y_neg = ds.inputs[draw.data_negatives], ds.labels[draw.label_negatives]
    h, e, c = before["head"], before["encoder"], before["classifier"]
    x, y = batch.inputs, batch.labels

    def combined():
        r = h(x)
        z = e(r)
        return (0.5 * loss_prediction(c(z), y) + 0.3 * (loss_da(gen, r, x) + loss_dr(gen, r, x_neg))
                + 0.2 * (loss_la(aux, z, y) + loss_lr(aux, z, y_neg)))

    gh, ge = central_difference(combined, [h.w, e.w])
    (gc,) = central_difference(lambda: loss_prediction(c(e(h(x))), y), [c.w])
    assert float((model.head.w - h.w).detach()) == pytest.approx(-0.1 * float(gh), rel=1e-6)
    assert float((model.encoder.w - e.w).detach()) == pytest.approx(-0.1 * float(ge), rel=1e-6)
    assert float((model.classifier.w - c.w).detach()) == pytest.approx(-0.1 * float(gc), rel=1e-6)


def test_zero_weights_reduce_to_plain_step():
    ds = small_task()
    m1, g1, a1 = desk_like()
    m2, _, _ = desk_like()
    cfg = DefenseConfig(learning_rate=0.05, batch_size=16, momentum=0.5, lr_schedule="cosine", epochs=2)
    d1, l1 = _session(m1, ds, cfg, g1, a1)
    d2, l2 = _session(m2, ds, cfg)
    perm = torch.randperm(len(ds), generator=torch.Generator().manual_seed(0))
    for i in range(0, 96, 16):
        b = ds.batch(perm[i : i + 16])
        defense_step(m1, g1, a1, b, ds, cfg, d1, l1)
        plain_train_step(m2, b, ds, cfg, d2, l2)
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p, q)


def test_out_of_range_batch_rejected():
    ds = small_task()
    model, gen, aux = desk_like()
    bad = Batch(torch.zeros(2, 1, 4, 4), torch.zeros(2, dtype=torch.long), torch.tensor([0, 500]))
    with pytest.raises(InputContractError):
        defense_step(model, gen, aux, bad, ds, DefenseConfig(lambda_d=0.1))


# -- training loops ---------------------------------------------------------------------


def test_same_seed_same_trace():
    ds = small_task()
    cfg = DefenseConfig(lambda_d=0.1, lambda_l=0.1, learning_rate=0.05, batch_size=16, epochs=2, seed=3)
    traces = []
    for _ in range(2):
        model, gen, aux = desk_like(3)
        traces.append(train(model, gen, aux, ds, cfg, test=ds).content())
    assert traces[0] == traces[1]
    model, _, _ = desk_like(3)
    plain = [plain_train(desk_like(3)[0], ds, cfg).content() for _ in range(2)]
    assert plain[0] == plain[1]


def test_zero_learning_rate_leaves_parameters():
    ds = small_task()
    model, _, _ = desk_like()
    before = params(model)
    plain_train(model, ds, DefenseConfig(learning_rate=0.0, epochs=1))
    for p, q in zip(before, model.parameters()):
        assert torch.equal(p, q)


def test_separable_toy_reaches_full_train_accuracy():
    x, y = gaussian_classes(200, (1, 4, 4), 2, separation=6.0, seed=1)
    model = build_default_architecture((1, 4, 4), 2, seed=1, width=4)
    trace = plain_train(model, ArrayDataset(x, y), DefenseConfig(learning_rate=0.05, batch_size=20, epochs=50))
    assert max(e["train_accuracy"] for e in trace.epochs) >= 0.99


def test_epochs_zero_is_an_input_error():
    model, gen, aux = desk_like()
    with pytest.raises(InputContractError):
        train(model, gen, aux, small_task(), DefenseConfig(epochs=0))


@pytest.mark.parametrize("ld,ll", [(0.6, 0.5), (-0.1, 0.0), (0.0, 1.0)])
def test_weight_precondition(ld, ll):
    with pytest.raises(ConfigurationError):
        DefenseConfig(lambda_d=ld, lambda_l=ll).validate()


def test_divergence_names_term_and_position():
    ds = small_task()
    model, gen, aux = desk_like()
    cfg = DefenseConfig(lambda_d=0.2, learning_rate=1e6, generator_learning_rate=1e6, batch_size=16, epochs=3)
    with pytest.raises(DivergenceError) as info:
        train(model, gen, aux, ds, cfg)
    assert info.value.term in ("l_c", "l_da", "l_dr", "l_la", "l_lr", "combined")
    assert info.value.epoch is not None and info.value.step is not None


def test_cosine_schedule():
    assert scheduled_lr(0.1, 0, 10, "cosine") == pytest.approx(0.1)
    assert scheduled_lr(0.1, 5, 10, "cosine") == pytest.approx(0.05)
    assert scheduled_lr(0.1, 10, 10, "cosine") == pytest.approx(0.0)
    assert scheduled_lr(0.1, 7, 10, "constant") == 0.1


def test_gamma_one_is_honest_training():
    ds = small_task()
    cfg = DefenseConfig(learning_rate=0.05, batch_size=16, epochs=1)
    a, b = desk_like()[0], desk_like()[0]
    plain_train(a, ds, cfg)
    plain_train(b, ds, cfg, server_hook=GradientAmplifier(1.0))
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    with pytest.raises(ConfigurationError):
        GradientAmplifier(0)


def test_amplifier_scales_encoder_update():
    ds = small_task()
    cfg = DefenseConfig(learning_rate=0.01, batch_size=96, epochs=1)
    base, amp = desk_like()[0], desk_like()[0]
    start = params(base.encoder)
    plain_train(base, ds, cfg)
    plain_train(amp, ds, cfg, server_hook=GradientAmplifier(8.0))
    for s, p, q in zip(start, base.encoder.parameters(), amp.encoder.parameters()):
        assert torch.allclose(q - s, 8 * (p - s), rtol=1e-3, atol=1e-6)


# -- baselines ---------------------------------------------------------------------------


def test_laplace_noise_statistics():
    t = torch.zeros(1_000_000, dtype=D)
    noisy = apply_noise_defense(t, 1.0, np.random.default_rng(0))
    assert abs(float(noisy.mean())) < 0.01
    assert float(noisy.var()) == pytest.approx(2.0, rel=0.02)
    small = apply_noise_defense(t[:200_000], 0.01, np.random.default_rng(1))
    assert float(small.abs().mean()) == pytest.approx(0.01, rel=0.02)


def test_noise_scale_zero_and_negative():
    t = torch.randn(10)
    assert apply_noise_defense(t, 0.0, np.random.default_rng(0)) is t
    with pytest.raises(ConfigurationError):
        apply_noise_defense(t, -1.0, np.random.default_rng(0))


def test_compression_examples():
    t = torch.tensor([3.0, -1.0, 0.5, -4.0])
    assert torch.equal(apply_compression_defense(t, 0.5), torch.tensor([3.0, 0.0, 0.0, -4.0]))
    assert apply_compression_defense(t, 0.0) is t
    assert torch.count_nonzero(apply_compression_defense(t, 1.0)) == 0
    with pytest.raises(ConfigurationError):
        apply_compression_defense(t, 1.5)


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-100, 100)), st.floats(0, 1))
def test_compression_keeps_the_largest_entries(values, rate):
    t = torch.from_numpy(values)
    out = apply_compression_defense(t, rate)
    k = int(math.floor(rate * t.numel() + 1e-9))
    dropped = torch.ones_like(t, dtype=torch.bool)
    dropped[torch.argsort(t.abs(), stable=True)[k:]] = False
    assert torch.equal(out[~dropped], t[~dropped])
    assert torch.count_nonzero(out[dropped]) == 0
    if 0 < k < t.numel():
        assert float(t[~dropped].abs().min()) >= float(t[dropped].abs().max())


def test_boundary_defense_streams_are_independent():
    bd = BoundaryDefense(BaselineDefenseConfig("add_noise", noise_scale=0.1), seed=4)
    other = BoundaryDefense(BaselineDefenseConfig("add_noise", noise_scale=0.1), seed=4)
    x = torch.zeros(5)
    other.on_repr_grad(x)  # consuming the down stream leaves the up stream alone
    assert torch.equal(bd.on_repr(x), other.on_repr(x))
    assert not BoundaryDefense(BaselineDefenseConfig("compress", compression_rate=0.0)).active
