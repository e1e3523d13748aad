"""Attacks a curious server can mount on a split model.

Each attack receives only the capability it is entitled to:

* KA (knowledge alignment): a black-box :class:`RepresentationOracle`.
* rMLE (regularized MLE inversion): a :class:`WhiteBoxHead` copy of theta^h.
* PMC (passive model completion): a :class:`FeatureOracle` for aux inputs.
* AMC (active model completion): control of the server optimizer during
  training, then PMC.
"""

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DivergenceError
from .metrics import accuracy, mean_ssim
from .model import init_parameters
from .trainer import GradientAmplifier

ATTACKS = ("KA", "rMLE", "PMC", "AMC")


class RepresentationOracle:
    """Query access to r = f^h(x); the head's weights stay hidden."""

    def __init__(self, head, boundary=None):
        self.__head = head
        self.__boundary = boundary

    def __call__(self, x):
        was = self.__head.training
        self.__head.eval()
        with torch.no_grad():
            r = self.__head(x)
        self.__head.train(was)
        if self.__boundary is not None:
            r = self.__boundary.on_repr(r)
        return r


class FeatureOracle:
    """z for attacker-chosen inputs: device representation oracle + the server's frozen encoder."""

    def __init__(self, representation_oracle, encoder):
        self.__oracle = representation_oracle
        self.encoder = copy.deepcopy(encoder).eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)

    def __call__(self, x, chunk=512):
        out = []
        for i in range(0, x.shape[0], chunk):
            with torch.no_grad():
                out.append(self.encoder(self.__oracle(x[i : i + chunk])))
        return torch.cat(out)


class WhiteBoxHead(nn.Module):
    """A frozen copy of the device head handed to a white-box attacker."""

    def __init__(self, head):
        super().__init__()
        self.net = copy.deepcopy(head).eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.net(x)


@dataclass
class AuxiliaryDataset:
    inputs: torch.Tensor
    labels: torch.Tensor

    @property
    def size(self):
        return int(self.inputs.shape[0])

    @classmethod
    def from_dataset(cls, ds):
        return cls(ds.inputs, ds.labels)


@dataclass
class AttackReport:
    attack: str
    ssim: float = None
    attack_accuracy: float = None
    clean_accuracy: float = None
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ConfigurationError(f"unknown attack {self.attack!r}")
        data_attack = self.attack in ("KA", "rMLE")
        if data_attack and (self.ssim is None or self.attack_accuracy is not None):
            raise ConfigurationError(f"{self.attack} reports SSIM only")
        if not data_attack and (self.attack_accuracy is None or self.ssim is not None):
            raise ConfigurationError(f"{self.attack} reports attack accuracy only")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def write_pnm(path, image):
    """Write a (C, H, W) image in [0, 1] as binary PGM (C=1) or PPM (C=3)."""
    img = image.detach().cpu().numpy() if torch.is_tensor(image) else np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    pix = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    if c == 1:
        header, body = f"P5\n{w} {h}\n255\n", pix[0].tobytes()
    elif c == 3:
        header, body = f"P6\n{w} {h}\n255\n", pix.transpose(1, 2, 0).tobytes()
    else:
        raise ConfigurationError("portable maps need 1 or 3 channels")
    Path(path).write_bytes(header.encode("ascii") + body)


def _check_aux(aux):
    if aux is None or aux.size == 0:
        raise ConfigurationError("attack needs a non-empty auxiliary dataset")


def inversion_decoder(repr_shape, input_shape, depth=1, hidden=32, seed=0):
    """Transposed-conv decoder mirroring a shape-preserving conv head.

    ``depth=1`` mirrors a single-conv head exactly; larger depths add
    hidden layers of width ``hidden``.
    """
    if depth < 1:
        raise ConfigurationError("decoder depth must be >= 1")
    if len(repr_shape) == 3 and tuple(repr_shape[1:]) == tuple(input_shape[1:]):
        widths = [repr_shape[0]] + [hidden] * (depth - 1) + [input_shape[0]]
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [nn.ConvTranspose2d(a, b, 3, padding=1), nn.ReLU()]
        net = nn.Sequential(*layers[:-1])
    else:
        flat_in, flat_out = math.prod(repr_shape), math.prod(input_shape)
        net = nn.Sequential(
            nn.Flatten(), nn.Linear(flat_in, 4 * hidden), nn.ReLU(), nn.Linear(4 * hidden, flat_out),
            nn.Unflatten(1, tuple(input_shape)),
        )
    return init_parameters(net, seed)


def ka_attack(oracle, aux, eval_inputs, steps=1500, lr=1e-2, seed=0, decoder=None, depth=1):
    """Train an inversion model r -> x on aux pairs, then invert eval representations."""
    _check_aux(aux)
    torch.manual_seed(seed)
    r_aux = oracle(aux.inputs).detach()
    r_eval = oracle(eval_inputs).detach()
    if decoder is None:
        decoder = inversion_decoder(tuple(r_aux.shape[1:]), tuple(aux.inputs.shape[1:]), depth=depth, seed=seed)
    decoder = decoder.to(r_aux.dtype)
    opt = torch.optim.Adam(decoder.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for step in range(steps):
        loss = F.mse_loss(decoder(r_aux), aux.inputs)
        if not torch.isfinite(loss):
            raise DivergenceError(f"KA inversion loss became {float(loss)}", term="mse", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        recon = decoder(r_eval).clamp(0.0, 1.0)
    report = AttackReport(
        "KA", ssim=mean_ssim(recon, eval_inputs), seed=seed,
        config={"steps": steps, "lr": lr, "depth": depth, "aux_size": aux.size, "eval_size": int(eval_inputs.shape[0])},
    )
    return recon, report


def total_variation(x):
    dh = (x[..., 1:, :] - x[..., :-1, :]).abs().sum(dim=(-3, -2, -1))
    dw = (x[..., :, 1:] - x[..., :, :-1]).abs().sum(dim=(-3, -2, -1))
    return dh + dw


def rmle_attack(head, target_r, input_shape, steps=1000, tv_weight=1e-2, lr=0.05, seed=0, ground_truth=None):
    """Optimize inputs so the white-box head reproduces the observed representations."""
    gen = torch.Generator().manual_seed(seed)
    target_r = target_r.detach()
    x_hat = torch.rand((target_r.shape[0],) + tuple(input_shape), generator=gen, dtype=target_r.dtype)
    x_hat.requires_grad_(True)
    if steps > 0:
        opt = torch.optim.Adam([x_hat], lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
        for step in range(steps):
            diff = (head(x_hat) - target_r).reshape(target_r.shape[0], -1)
            objective = (diff * diff).sum(1) + tv_weight * total_variation(x_hat)
            loss = objective.mean()
            if not torch.isfinite(loss):
                raise DivergenceError(f"rMLE objective became {float(loss)}", term="objective", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    x_hat = x_hat.detach()
    with torch.no_grad():
        match = float(((head(x_hat) - target_r) ** 2).reshape(target_r.shape[0], -1).sum(1).mean())
    cfg = {"steps": steps, "tv_weight": tv_weight, "lr": lr, "representation_match": match}
    score = mean_ssim(x_hat.clamp(0, 1), ground_truth) if ground_truth is not None else float("nan")
    return x_hat, AttackReport("rMLE", ssim=score, seed=seed, config=cfg)


def completion_head(in_features, num_classes, arch, hidden=64, seed=0):
    if arch == "mlp":
        net = nn.Sequential(
            nn.Linear(in_features, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, num_classes)
        )
    elif arch == "mlp_sim":
        net = nn.Linear(in_features, num_classes)
    else:
        raise ConfigurationError(f"unknown completion head {arch!r}")
    return init_parameters(net, seed)


def pmc_attack(feature_oracle, aux, test_inputs, test_labels, arch="mlp", num_classes=None, steps=500, lr=1e-2, weight_decay=1e-4, seed=0):
    """Fit a classifier head on the encoder's features of the labelled aux set."""
    _check_aux(aux)
    num_classes = num_classes or int(max(int(aux.labels.max()), int(test_labels.max()))) + 1
    torch.manual_seed(seed)
    z_aux = feature_oracle(aux.inputs).reshape(aux.size, -1)
    z_test = feature_oracle(test_inputs).reshape(test_inputs.shape[0], -1)
    mu = z_aux.mean(0)
    sd = z_aux.std(0) + 1e-6 if aux.size > 1 else torch.ones_like(mu)
    z_aux, z_test = (z_aux - mu) / sd, (z_test - mu) / sd
    head = completion_head(z_aux.shape[1], num_classes, arch, seed=seed).to(z_aux.dtype)
    opt = torch.optim.Adam(head.parameters(), lr=lr, weight_decay=weight_decay)
    for step in range(steps):
        loss = F.cross_entropy(head(z_aux), aux.labels)
        if not torch.isfinite(loss):
            raise DivergenceError(f"PMC head loss became {float(loss)}", term="cross_entropy", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        acc = accuracy(head(z_test), test_labels)
    cfg = {"arch": arch, "steps": steps, "lr": lr, "aux_size": aux.size}
    return AttackReport("PMC", attack_accuracy=acc, seed=seed, config=cfg)


def amc_attack(train_with_hook, gamma, aux, test_inputs, test_labels, arch="mlp", seed=0, **pmc_kwargs):
    """Malicious-optimizer model completion.

    ``train_with_hook(hook)`` runs the victim's training with ``hook``
    installed on the server optimizer and returns a :class:`FeatureOracle`.
    The hook multiplies the encoder gradient by ``gamma``.
    """
    hook = GradientAmplifier(gamma)
    oracle = train_with_hook(hook)
    rep = pmc_attack(oracle, aux, test_inputs, test_labels, arch=arch, seed=seed, **pmc_kwargs)
    cfg = dict(rep.config, gamma=float(gamma), realization="server gradient amplification")
    return AttackReport("AMC", attack_accuracy=rep.attack_accuracy, seed=seed, config=cfg)
