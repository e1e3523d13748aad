"""Variational models, CLUB-style MI estimates and the five training loss terms."""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DivergenceError, InputContractError
from .model import init_parameters

# per-sample log-probability floor; keeps -log q(y_neg|z) finite
LOG_PROB_FLOOR = -30.0
LOG_2PI = math.log(2 * math.pi)


@dataclass
class MIEstimate:
    value: float
    estimator: str  # "vCLUB_full" | "vCLUB_S"
    pair_count: int


@dataclass
class LossBreakdown:
    """The five objective terms and their weighted combination.

    Fields hold tensors while training and plain floats once recorded.
    """

    l_c: object
    l_da: object
    l_dr: object
    l_la: object
    l_lr: object
    combined: object
    lambda_d: float = 0.0
    lambda_l: float = 0.0

    TERMS = ("l_c", "l_da", "l_dr", "l_la", "l_lr")

    def as_floats(self):
        vals = {k: float(getattr(self, k)) for k in self.TERMS + ("combined",)}
        return LossBreakdown(**vals, lambda_d=self.lambda_d, lambda_l=self.lambda_l)

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in self.TERMS + ("combined",)}


@dataclass
class NegativeIndexDraw:
    data_negatives: torch.Tensor
    label_negatives: torch.Tensor
    seed: int = None


class NegativeSampler:
    """Uniform index draws over the full dataset, independent per stream."""

    def __init__(self, dataset_size, seed):
        if dataset_size < 1:
            raise InputContractError("dataset must be non-empty")
        self.dataset_size = int(dataset_size)
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)

    def draw(self, batch_size):
        n = self.dataset_size
        data = torch.randint(0, n, (batch_size,), generator=self.generator)
        labels = torch.randint(0, n, (batch_size,), generator=self.generator)
        return NegativeIndexDraw(data, labels, self.seed)


# -- variational models ---------------------------------------------------------


class AuxGenerator(nn.Module):
    """Gaussian q_psi(x | r) = N(g_psi(r), variance * I) with a fixed variance.

    ``variance=1`` is the unit-variance family. Larger values shrink both data
    terms by the same factor, which tempers their pull on the head when the
    input has many pixels.
    """

    def __init__(self, net, output_shape=None, variance=1.0):
        super().__init__()
        if not variance > 0:
            raise ConfigurationError("variance must be positive")
        self.net = net
        self.output_shape = tuple(output_shape) if output_shape is not None else None
        self.variance = float(variance)

    def forward(self, r):
        out = self.net(r)
        if self.output_shape is not None:
            out = out.reshape((out.shape[0],) + self.output_shape)
        return out

    def log_prob(self, r, x):
        return gaussian_log_density(x, self(r), self.variance)

    @classmethod
    def for_model(cls, model, seed=0, variance=1.0):
        """One-layer decoder from the head's representation back to input space."""
        rc, rh, rw = model.repr_shape if len(model.repr_shape) == 3 else (None, None, None)
        c, h, w = model.input_shape
        if rc is not None and (rh, rw) == (h, w):
            net = nn.ConvTranspose2d(rc, c, 3, padding=1)
            out_shape = None
        else:
            net = nn.Sequential(nn.Flatten(), nn.Linear(math.prod(model.repr_shape), math.prod(model.input_shape)))
            out_shape = model.input_shape
        init_parameters(net, seed)
        dtype = next(model.parameters()).dtype
        return cls(net, out_shape, variance).to(dtype)


class AuxClassifier(nn.Module):
    """Categorical q_phi(y | z) returning log-probabilities."""

    def __init__(self, net):
        super().__init__()
        self.net = net

    def forward(self, z):
        return F.log_softmax(self.net(z), dim=-1)

    def log_prob(self, z, labels):
        logp = self(z)
        _check_labels(labels, logp.shape[-1])
        return logp.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1).clamp(min=LOG_PROB_FLOOR)

    @classmethod
    def mlp(cls, in_features, num_classes, hidden=64, layers=3, seed=0, dtype=torch.float32):
        mods = [nn.Flatten()]
        width = in_features
        for _ in range(layers - 1):
            mods += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        mods.append(nn.Linear(width, num_classes))
        net = nn.Sequential(*mods)
        init_parameters(net, seed)
        return cls(net).to(dtype)

    @classmethod
    def for_model(cls, model, hidden=64, seed=0, layers=3):
        dtype = next(model.parameters()).dtype
        return cls.mlp(math.prod(model.feature_shape), model.num_classes, hidden=hidden, layers=layers, seed=seed, dtype=dtype)


# -- densities and estimators ---------------------------------------------------


def _check_labels(labels, num_classes):
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise InputContractError(f"labels must lie in [0, {num_classes})")


def gaussian_log_density(x, mean, variance=1.0, include_constant=False):
    """Per-sample log N(x; mean, variance * I), flattening all but the batch dimension.

    The normalizing constant is dropped unless ``include_constant``.
    """
    if x.shape != mean.shape:
        raise InputContractError(f"shape mismatch: x {tuple(x.shape)} vs mean {tuple(mean.shape)}")
    diff = (x - mean).reshape(x.shape[0], -1)
    out = -0.5 * (diff * diff).sum(dim=1) / variance
    if include_constant:
        out = out - 0.5 * diff.shape[1] * (LOG_2PI + math.log(variance))
    return out


def vclub_s_estimate(pos_logprob, neg_logprob):
    """Sampled CLUB estimate: mean of log q(target_i|cond_i) - log q(target_k'|cond_i)."""
    pos = torch.as_tensor(pos_logprob)
    neg = torch.as_tensor(neg_logprob)
    if pos.numel() == 0 or pos.shape != neg.shape:
        raise InputContractError("need equal-length, non-empty log-probability vectors")
    return MIEstimate(float((pos - neg).mean()), "vCLUB_S", int(pos.numel()))


def vclub_full(pair_logprob):
    """All-pairs CLUB estimate from a matrix ``L[i, j] = log q(target_j | cond_i)``."""
    L = torch.as_tensor(pair_logprob)
    if L.dim() != 2 or L.shape[0] != L.shape[1] or L.shape[0] == 0:
        raise InputContractError("pair matrix must be square and non-empty")
    value = L.diagonal().mean() - L.mean()
    return MIEstimate(float(value), "vCLUB_full", int(L.numel()))


def pairwise_log_prob(aux, cond, targets):
    """``L[i, j] = log q(targets[j] | cond[i])`` for either variational model."""
    with torch.no_grad():
        if isinstance(aux, AuxClassifier):
            logp = aux(cond)
            _check_labels(targets, logp.shape[-1])
            return logp[:, targets.long()].clamp(min=LOG_PROB_FLOOR)
        mean = aux(cond).reshape(cond.shape[0], -1)
        x = targets.reshape(targets.shape[0], -1).to(mean.dtype)
        sq = (mean * mean).sum(1, keepdim=True) - 2 * mean @ x.T + (x * x).sum(1)
        return -0.5 * sq / aux.variance


# -- loss terms -----------------------------------------------------------------


def loss_prediction(logits, labels):
    if logits.dim() != 2 or labels.shape != (logits.shape[0],):
        raise InputContractError("logits must be (B, C) and labels (B,)")
    _check_labels(labels, logits.shape[1])
    return F.cross_entropy(logits, labels.long())


def loss_da(generator, r, x):
    return generator.log_prob(r, x).mean()


def loss_dr(generator, r, x_negatives):
    return -generator.log_prob(r, x_negatives).mean()


def loss_la(aux, z, labels):
    return aux.log_prob(z, labels).mean()


def loss_lr(aux, z, label_negatives):
    return -aux.log_prob(z, label_negatives).mean()


def check_weights(lambda_d, lambda_l):
    if lambda_d < 0 or lambda_l < 0 or lambda_d + lambda_l >= 1:
        raise ConfigurationError(
            f"need lambda_d >= 0, lambda_l >= 0 and lambda_d + lambda_l < 1; got {lambda_d}, {lambda_l}"
        )


def combined_objective(l_c, l_da, l_dr, l_la, l_lr, lambda_d, lambda_l):
    check_weights(lambda_d, lambda_l)
    combined = (1 - lambda_d - lambda_l) * l_c + lambda_d * (l_da + l_dr) + lambda_l * (l_la + l_lr)
    return LossBreakdown(l_c, l_da, l_dr, l_la, l_lr, combined, lambda_d, lambda_l)


# -- fitting --------------------------------------------------------------------


@dataclass
class FitHistory:
    log_likelihood: list = field(default_factory=list)

    def trailing_mean(self, window):
        tail = self.log_likelihood[-window:]
        return sum(tail) / len(tail)


def fit_variational(aux, cond, targets, steps, lr, optimizer="sgd", batch_size=None, seed=0, history=None):
    """Gradient ascent on mean log q(targets | cond).

    Inside the training loop this is called with ``steps=1``; bound
    computations call it with many steps and ``optimizer="adam"``.
    """
    if steps < 1:
        raise InputContractError("steps must be >= 1")
    cond = cond.detach()
    targets = targets.detach()
    params = [p for p in aux.parameters() if p.requires_grad]
    if optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=lr, maximize=True)
    elif optimizer == "adam":
        opt = torch.optim.Adam(params, lr=lr, maximize=True)
    else:
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")
    n = cond.shape[0]
    gen = torch.Generator().manual_seed(seed)
    hist = history if history is not None else FitHistory()
    for step in range(steps):
        if batch_size is None or batch_size >= n:
            c, t = cond, targets
        else:
            idx = torch.randint(0, n, (batch_size,), generator=gen)
            c, t = cond[idx], targets[idx]
        ll = aux.log_prob(c, t).mean()
        if not torch.isfinite(ll):
            raise DivergenceError(
                f"log-likelihood became {float(ll)} at fitting step {step} (lr={lr})", term="log_likelihood", step=step
            )
        opt.zero_grad()
        ll.backward()
        opt.step()
        hist.log_likelihood.append(float(ll.detach()))
    aux.fit_history = hist
    return aux
