"""Split training with the mutual-information defense, plain training, and the
noise / compression baselines.

A training step is split between a :class:`DevicePart` (head, classifier and
the two variational models) and a :class:`ServerPart` (encoder).  They talk
only through four tensors per batch: representation up, feature down,
feature-gradient up, representation-gradient down.  :class:`LocalLink` wires
them together in-process; :mod:`splitmi.protocol` does the same over a wire.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, DivergenceError, InputContractError
from .objectives import (
    NegativeSampler,
    check_weights,
    combined_objective,
    loss_da,
    loss_dr,
    loss_la,
    loss_lr,
    loss_prediction,
)

log = logging.getLogger(__name__)


LR_SCHEDULES = ("constant", "cosine")


def scheduled_lr(base, step, total_steps, schedule="constant"):
    """Learning rate for the given 0-based step; cosine decays to zero at ``total_steps``."""
    if schedule == "constant" or not total_steps:
        return base
    return base * 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


@dataclass
class DefenseConfig:
    lambda_d: float = 0.0
    lambda_l: float = 0.0
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0
    aux_learning_rate: float = None  # phi; defaults to learning_rate
    generator_learning_rate: float = None  # psi; defaults to learning_rate
    aux_optimizer: str = "sgd"  # for psi and phi: "sgd" | "adam"
    lr_schedule: str = "constant"  # for theta^h, theta^e, theta^c: "constant" | "cosine"
    generator_steps: int = 1  # psi ascent steps per batch

    def validate(self):
        check_weights(self.lambda_d, self.lambda_l)
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.epochs < 1:
            raise InputContractError("epochs must be >= 1")
        if self.optimizer != "sgd":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if self.generator_steps < 1:
            raise ConfigurationError("generator_steps must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.aux_optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unsupported aux_optimizer {self.aux_optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        return self

    def total_steps(self, dataset_size):
        return self.epochs * math.ceil(dataset_size / self.batch_size)

    @property
    def aux_lr(self):
        return self.learning_rate if self.aux_learning_rate is None else self.aux_learning_rate

    @property
    def generator_lr(self):
        return self.learning_rate if self.generator_learning_rate is None else self.generator_learning_rate

    def to_dict(self):
        return asdict(self)


@dataclass
class BaselineDefenseConfig:
    kind: str = "none"  # none | add_noise | compress
    noise_scale: float = 0.0
    compression_rate: float = 0.0

    def validate(self):
        if self.kind not in ("none", "add_noise", "compress"):
            raise ConfigurationError(f"unknown baseline defense {self.kind!r}")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be >= 0")
        if not 0 <= self.compression_rate <= 1:
            raise ConfigurationError("compression_rate must be in [0, 1]")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingTrace:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    checkpoint: str = None

    def content(self):
        """Everything except wall-clock timings."""
        epochs = [{k: v for k, v in e.items() if k != "seconds"} for e in self.epochs]
        return {"steps": self.steps, "epochs": epochs, "seed": self.seed, "config": self.config}

    def to_jsonl(self):
        lines = [json.dumps({"type": "header", "seed": self.seed, "config": self.config, "checkpoint": self.checkpoint}, sort_keys=True)]
        lines += [json.dumps({"type": "step", **s}, sort_keys=True) for s in self.steps]
        lines += [json.dumps({"type": "epoch", **e}, sort_keys=True) for e in self.epochs]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        trace = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "header":
                trace.seed, trace.config, trace.checkpoint = rec["seed"], rec["config"], rec.get("checkpoint")
            elif kind == "step":
                trace.steps.append(rec)
            else:
                trace.epochs.append(rec)
        return trace


# -- baseline defenses ------------------------------------------------------------


def apply_noise_defense(tensor, noise_scale, rng):
    """Add i.i.d. zero-mean Laplace noise of scale ``noise_scale``.

    ``rng`` is a ``numpy.random.Generator``.
    """
    if noise_scale < 0:
        raise ConfigurationError("noise_scale must be >= 0")
    if noise_scale == 0:
        return tensor
    noise = rng.laplace(0.0, noise_scale, size=tuple(tensor.shape))
    return tensor + torch.as_tensor(noise, dtype=tensor.dtype)


def apply_compression_defense(tensor, compression_rate):
    """Zero the ``compression_rate`` fraction of smallest-magnitude entries.

    One threshold for the whole tensor; equal magnitudes are dropped in index
    order.
    """
    if not 0 <= compression_rate <= 1:
        raise ConfigurationError("compression_rate must be in [0, 1]")
    n = tensor.numel()
    k = int(math.floor(compression_rate * n + 1e-9))
    if k == 0:
        return tensor
    flat = tensor.reshape(-1)
    order = torch.argsort(flat.abs(), stable=True)
    out = flat.clone()
    out[order[:k]] = 0
    return out.reshape(tensor.shape)


class BoundaryDefense:
    """Perturbs what crosses the device/server boundary.

    Representations (device to server) and representation gradients (server
    to device) are both perturbed, each direction with its own noise stream so
    the two sides of a networked session can apply them independently.
    """

    def __init__(self, config=None, seed=0):
        self.config = (config or BaselineDefenseConfig()).validate()
        self.rng_up = np.random.default_rng([seed, 0])
        self.rng_down = np.random.default_rng([seed, 1])

    @property
    def active(self):
        c = self.config
        return (c.kind == "add_noise" and c.noise_scale > 0) or (c.kind == "compress" and c.compression_rate > 0)

    def _apply(self, t, rng):
        c = self.config
        if c.kind == "add_noise":
            return apply_noise_defense(t, c.noise_scale, rng)
        if c.kind == "compress":
            return apply_compression_defense(t, c.compression_rate)
        return t

    def on_repr(self, r):
        return self._apply(r, self.rng_up)

    def on_repr_grad(self, grad_r):
        return self._apply(grad_r, self.rng_down)


class GradientAmplifier:
    """Server-side hook that scales the encoder's gradient by ``gamma``.

    Installed by a malicious server to make the joint model lean on its encoder.
    """

    def __init__(self, gamma):
        if not gamma > 0:
            raise ConfigurationError("amplification factor must be > 0")
        self.gamma = float(gamma)

    def __call__(self, encoder):
        if self.gamma == 1.0:
            return
        for p in encoder.parameters():
            if p.grad is not None:
                p.grad.mul_(self.gamma)


# -- the two parties --------------------------------------------------------------


def _sgd(params, lr, momentum, maximize=False):
    return torch.optim.SGD(list(params), lr=lr, momentum=momentum, maximize=maximize)


def _aux_opt(cfg, params, lr):
    if cfg.aux_optimizer == "adam":
        return torch.optim.Adam(list(params), lr=lr, maximize=True)
    return _sgd(params, lr, cfg.momentum, maximize=True)


def _finite(value, term):
    value = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(value):
        raise DivergenceError(f"{term} became {float(value)}", term=term)


class DevicePart:
    """Device side of one training session.

    With ``generator`` and ``aux_classifier`` omitted the device trains on the
    prediction loss alone (undefended split training).
    """

    def __init__(self, head, classifier, dataset, cfg, generator=None, aux_classifier=None):
        self.cfg = cfg.validate()
        self.head = head
        self.classifier = classifier
        self.dataset = dataset
        self.generator = generator
        self.aux = aux_classifier
        self.defended = generator is not None and aux_classifier is not None
        lr, mom = cfg.learning_rate, cfg.momentum
        self.opt_head = _sgd(head.parameters(), lr, mom)
        self.opt_cls = _sgd(classifier.parameters(), lr, mom)
        if self.defended:
            self.opt_gen = _aux_opt(cfg, generator.parameters(), cfg.generator_lr)
            self.opt_aux = _aux_opt(cfg, aux_classifier.parameters(), cfg.aux_lr)
            self.sampler = NegativeSampler(len(dataset), cfg.seed * 1000003 + 17)
        self._pending = None
        self.steps_done = 0
        self.total_steps = cfg.total_steps(len(dataset))

    def _lr(self):
        return scheduled_lr(self.cfg.learning_rate, self.steps_done, self.total_steps, self.cfg.lr_schedule)

    def train(self, mode=True):
        for m in (self.head, self.classifier, self.generator, self.aux):
            if m is not None:
                m.train(mode)

    def upload(self, batch):
        """Compute r for the batch; with the defense on, also take the psi step."""
        if batch.dataset_size is not None and batch.dataset_size != len(self.dataset):
            raise InputContractError("batch was drawn from a different dataset")
        if int(batch.indices.min()) < 0 or int(batch.indices.max()) >= len(self.dataset):
            raise InputContractError(f"batch index out of dataset range [0, {len(self.dataset)})")
        x = batch.inputs
        r = self.head(x)
        if self.defended:
            for _ in range(self.cfg.generator_steps):
                l_da = loss_da(self.generator, r.detach(), x)
                _finite(l_da, "l_da")
                self.opt_gen.zero_grad()
                l_da.backward()
                self.opt_gen.step()
        self._pending = {"batch": batch, "r": r}
        return r.detach()

    def on_feature(self, z):
        """Update theta^c (and phi), then return the gradient w.r.t. z."""
        st = self._pending
        batch = st["batch"]
        y = batch.labels
        z = z.detach().requires_grad_(True)
        logits = self.classifier(z)
        l_c = loss_prediction(logits, y)
        _finite(l_c, "l_c")
        params = list(self.classifier.parameters())
        grads = torch.autograd.grad(l_c, params + [z])
        for p, g in zip(params, grads[:-1]):
            p.grad = g
        _set_lr(self.opt_cls, self._lr())
        self.opt_cls.step()
        grad_z = grads[-1]
        st["correct"] = int((logits.detach().argmax(1) == y).sum())
        if not self.defended:
            zero = torch.zeros((), dtype=l_c.dtype)
            st["breakdown"] = combined_objective(l_c.detach(), zero, zero, zero, zero, 0.0, 0.0)
            return grad_z

        cfg = self.cfg
        lam_d, lam_l = cfg.lambda_d, cfg.lambda_l
        zd = z.detach()
        l_la_pre = loss_la(self.aux, zd, y)
        _finite(l_la_pre, "l_la")
        self.opt_aux.zero_grad()
        l_la_pre.backward()
        self.opt_aux.step()

        draw = self.sampler.draw(len(batch))
        x_neg = self.dataset.inputs[draw.data_negatives]
        y_neg = self.dataset.labels[draw.label_negatives]

        l_la = loss_la(self.aux, z, y)
        l_lr = loss_lr(self.aux, z, y_neg)
        scale_c = 1 - lam_d - lam_l
        if lam_l > 0:
            (g_label,) = torch.autograd.grad(l_la + l_lr, z)
            grad_z = scale_c * grad_z + lam_l * g_label
        else:
            grad_z = scale_c * grad_z

        r_leaf = st["r"].detach().requires_grad_(True)
        l_da = loss_da(self.generator, r_leaf, batch.inputs)
        l_dr = loss_dr(self.generator, r_leaf, x_neg)
        st["grad_r_local"] = None
        if lam_d > 0:
            (g_data,) = torch.autograd.grad(l_da + l_dr, r_leaf)
            st["grad_r_local"] = lam_d * g_data
        bd = combined_objective(
            l_c.detach(), l_da.detach(), l_dr.detach(), l_la.detach(), l_lr.detach(), lam_d, lam_l
        )
        for term in bd.TERMS + ("combined",):
            _finite(getattr(bd, term), term)
        st["breakdown"] = bd
        return grad_z

    def on_repr_grad(self, grad_r):
        """Backpropagate the returned gradient (plus local data terms) into theta^h."""
        st = self._pending
        local = st.get("grad_r_local")
        if local is not None:
            grad_r = grad_r + local
        self.opt_head.zero_grad()
        st["r"].backward(grad_r)
        _set_lr(self.opt_head, self._lr())
        self.opt_head.step()
        self._pending = None
        self.steps_done += 1
        return st["breakdown"].as_floats(), st["correct"]

    def representations(self, x):
        with torch.no_grad():
            return self.head(x)

    def predict_from_features(self, z):
        with torch.no_grad():
            return self.classifier(z)


class ServerPart:
    """Server side: owns the encoder and its optimizer."""

    def __init__(self, encoder, learning_rate, momentum=0.0, update_hook=None, lr_schedule="constant", total_steps=None):
        self.encoder = encoder
        self.learning_rate = learning_rate
        self.opt = _sgd(encoder.parameters(), learning_rate, momentum)
        self.update_hook = update_hook
        self.lr_schedule = lr_schedule
        self.total_steps = total_steps
        self.steps_done = 0
        self._pending = None

    def forward(self, r):
        self.encoder.train()
        r_leaf = r.detach().clone().requires_grad_(True)
        z = self.encoder(r_leaf)
        self._pending = (r_leaf, z)
        return z.detach()

    def backward(self, grad_z):
        r_leaf, z = self._pending
        self.opt.zero_grad()
        z.backward(grad_z)
        if self.update_hook is not None:
            self.update_hook(self.encoder)
        _set_lr(self.opt, scheduled_lr(self.learning_rate, self.steps_done, self.total_steps, self.lr_schedule))
        self.opt.step()
        self.steps_done += 1
        self._pending = None
        return r_leaf.grad.detach()

    def infer(self, r):
        self.encoder.eval()
        with torch.no_grad():
            z = self.encoder(r)
        self.encoder.train()
        return z


class LocalLink:
    """In-process connection between a device and a server."""

    def __init__(self, server, boundary=None):
        self.server = server
        self.boundary = boundary or BoundaryDefense()

    def step(self, device, batch):
        r = self.boundary.on_repr(device.upload(batch))
        z = self.server.forward(r)
        grad_z = device.on_feature(z)
        grad_r = self.boundary.on_repr_grad(self.server.backward(grad_z))
        return device.on_repr_grad(grad_r)

    def features(self, r):
        return self.server.infer(self.boundary.on_repr(r))

    def close(self):
        pass


# -- loops --------------------------------------------------------------------------


def predict(device, link, inputs, chunk=512):
    was = device.head.training
    device.train(False)
    out = []
    for i in range(0, inputs.shape[0], chunk):
        r = device.representations(inputs[i : i + chunk])
        out.append(device.predict_from_features(link.features(r)))
    device.train(was)
    return torch.cat(out)


def run_epochs(device, link, cfg, test=None, trace_config=None, evaluate=True):
    """Shared epoch loop used by every trainer and by protocol sessions."""
    dataset = device.dataset
    n = len(dataset)
    if n == 0:
        raise InputContractError("dataset is empty")
    shuffle = torch.Generator().manual_seed(cfg.seed)
    trace = TrainingTrace(seed=cfg.seed, config=trace_config or cfg.to_dict())
    step = 0
    device.train(True)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=shuffle)
        correct = 0
        for start in range(0, n, cfg.batch_size):
            batch = dataset.batch(perm[start : start + cfg.batch_size])
            try:
                bd, c = link.step(device, batch)
            except DivergenceError as exc:
                exc.epoch, exc.step = epoch, step
                raise DivergenceError(f"epoch {epoch} step {step}: {exc}", term=exc.term, epoch=epoch, step=step) from exc
            correct += c
            trace.steps.append({"epoch": epoch, "step": step, **bd.to_dict()})
            step += 1
        rec = {"epoch": epoch, "train_accuracy": correct / n}
        if evaluate and test is not None and len(test):
            from .metrics import accuracy

            rec["test_accuracy"] = accuracy(predict(device, link, test.inputs), test.labels)
        rec["seconds"] = time.perf_counter() - t0
        trace.epochs.append(rec)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in rec.items() if k != "epoch"})
    return trace


def _session(model, dataset, cfg, generator=None, aux=None, baseline=None, server_hook=None):
    cfg.validate()
    if len(dataset) == 0:
        raise InputContractError("dataset is empty")
    device = DevicePart(model.head, model.classifier, dataset, cfg, generator, aux)
    server = ServerPart(
        model.encoder, cfg.learning_rate, cfg.momentum, server_hook, cfg.lr_schedule, cfg.total_steps(len(dataset))
    )
    link = LocalLink(server, BoundaryDefense(baseline, seed=cfg.seed + 104729))
    return device, link


def _trace_config(cfg, baseline, defended):
    conf = {"defense": cfg.to_dict(), "defended": defended}
    if baseline is not None:
        conf["baseline"] = baseline.to_dict()
    return conf


def train(model, generator, aux_classifier, dataset, cfg, test=None, baseline=None, server_hook=None, checkpoint=None, evaluate=True):
    """Defended training; models are updated in place and a trace returned."""
    device, link = _session(model, dataset, cfg, generator, aux_classifier, baseline, server_hook)
    trace = run_epochs(device, link, cfg, test, _trace_config(cfg, baseline, True), evaluate)
    if checkpoint is not None:
        from .model import save_checkpoint

        save_checkpoint(checkpoint, {"model": model, "generator": generator, "aux": aux_classifier})
        trace.checkpoint = str(checkpoint)
    return trace


def plain_train(model, dataset, cfg, test=None, baseline=None, server_hook=None, checkpoint=None, evaluate=True):
    """Undefended split training on the prediction loss only."""
    device, link = _session(model, dataset, cfg, baseline=baseline, server_hook=server_hook)
    trace = run_epochs(device, link, cfg, test, _trace_config(cfg, baseline, False), evaluate)
    if checkpoint is not None:
        from .model import save_checkpoint

        save_checkpoint(checkpoint, {"model": model})
        trace.checkpoint = str(checkpoint)
    return trace


def defense_step(model, generator, aux_classifier, batch, dataset, cfg, device=None, link=None):
    """One defended batch update.  Returns the loss breakdown.

    Pass ``device``/``link`` to keep optimizer and sampler state across calls;
    otherwise a fresh session is created for this single step.
    """
    if device is None:
        device, link = _session(model, dataset, cfg, generator, aux_classifier)
    bd, _ = link.step(device, batch)
    return bd


def plain_train_step(model, batch, dataset, cfg, device=None, link=None):
    if device is None:
        device, link = _session(model, dataset, cfg)
    bd, _ = link.step(device, batch)
    return bd
