"""Certified leakage bounds and their empirical verification on synthetic worlds.

Two bounds are computed here.

Prediction: an attacker h^m(y|z) cannot beat random guessing by more than
epsilon on average, i.e. ``mean log h^m(y|z) < mean log p(y) + epsilon``, with
``epsilon = I_vCLUB(z; y) + mean KL(p(y|z) || h_phi(y|z))``.

Data: an attacker regressing x from r has per-dimension mean squared error
above ``2 (kappa - epsilon) / Q``.  The default ``kappa`` is
``-mean log p(x_i) - (Q/2) log 2 pi``; see :func:`kappa_value` for the
other conventions this module can evaluate.

Both bounds need closed-form densities, so they are only asserted on the
worlds defined below.  :func:`pipeline_leakage` reports the vCLUB part on a
trained model where ``p`` is unknown.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from scipy import special, stats

from .errors import ConfigurationError, WorldContractError
from .model import init_parameters
from .objectives import LOG_2PI, AuxClassifier, AuxGenerator, fit_variational, pairwise_log_prob, vclub_full

KAPPA_CONVENTIONS = ("derived", "as_stated", "as_in_proof")
KL_UNAVAILABLE = "unavailable - p unknown"


# -- worlds ---------------------------------------------------------------------


class GaussianLabelWorld:
    """y ~ Categorical(prior), z | y ~ N(means[y], scale^2 I).

    ``p(y | z)`` follows from Bayes' rule in closed form.
    """

    kind = "prediction"

    def __init__(self, prior, means, scale, seed=0):
        self.prior = np.asarray(prior, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.scale = float(scale)
        self.seed = int(seed)
        if self.prior.ndim != 1 or self.prior.shape[0] != self.means.shape[0]:
            raise WorldContractError("prior and means disagree on the number of classes")
        if abs(self.prior.sum() - 1) > 1e-9 or (self.prior < 0).any():
            raise WorldContractError("class prior does not normalize")
        if not self.scale > 0:
            raise WorldContractError("scale must be positive (a zero scale has no density)")
        self.rng = np.random.default_rng(seed)

    @property
    def num_classes(self):
        return self.prior.shape[0]

    @property
    def z_dim(self):
        return self.means.shape[1]

    @classmethod
    def random(cls, seed, num_classes=None, z_dim=None):
        rng = np.random.default_rng(seed)
        c = num_classes or int(rng.integers(2, 11))
        d = z_dim or int(rng.integers(1, 5))
        prior = rng.dirichlet(np.full(c, 2.0)) if rng.random() < 0.5 else np.full(c, 1.0 / c)
        separation = rng.uniform(0.0, 3.0)
        return cls(prior, separation * rng.normal(size=(c, d)), rng.uniform(0.5, 1.5), seed)

    def sample(self, n):
        y = self.rng.choice(self.num_classes, size=n, p=self.prior)
        z = self.means[y] + self.scale * self.rng.normal(size=(n, self.z_dim))
        return z, y

    def log_prior(self, y):
        return np.log(self.prior[y])

    def posterior(self, z):
        """``p(y | z)`` as an (n, C) matrix."""
        d2 = ((z[:, None, :] - self.means[None]) ** 2).sum(-1)
        logits = np.log(self.prior)[None] - 0.5 * d2 / self.scale**2
        return special.softmax(logits, axis=1)

    def mutual_information(self, n=20000):
        """Monte Carlo I(z; y); exact only in the limit."""
        z, y = self.sample(n)
        post = self.posterior(z)
        return float(np.mean(np.log(post[np.arange(n), y]) - self.log_prior(y)))


class DeterministicLabelWorld:
    """z is the label itself, so I(z; y) = H(y)."""

    kind = "prediction"

    def __init__(self, num_classes=2, seed=0):
        self.prior = np.full(num_classes, 1.0 / num_classes)
        self.seed = int(seed)
        self.rng = np.random.default_rng(seed)

    num_classes = GaussianLabelWorld.num_classes
    log_prior = GaussianLabelWorld.log_prior

    @property
    def z_dim(self):
        return self.num_classes

    def sample(self, n):
        y = self.rng.integers(0, self.num_classes, size=n)
        return np.eye(self.num_classes)[y], y

    def posterior(self, z):
        return z.copy()

    def mutual_information(self, n=None):
        return math.log(self.num_classes)


class LinearGaussianDataWorld:
    """r ~ N(0, I_d), x | r ~ N(A r + b, I_Q).

    Hence ``p(x) = N(b, A A^T + I)`` and ``I(x; r) = 1/2 logdet(I + A A^T)``.
    """

    kind = "data"

    def __init__(self, A, b, seed=0):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.b = np.asarray(b, dtype=np.float64).reshape(-1)
        if self.A.shape[0] != self.b.shape[0]:
            raise WorldContractError("A and b disagree on the dimension of x")
        self.seed = int(seed)
        self.rng = np.random.default_rng(seed)
        self._px = stats.multivariate_normal(self.b, self.A @ self.A.T + np.eye(self.q_dim))

    @property
    def q_dim(self):
        return self.A.shape[0]

    @property
    def r_dim(self):
        return self.A.shape[1]

    @classmethod
    def random(cls, seed, q_dim=None, r_dim=None):
        rng = np.random.default_rng(seed)
        q = q_dim or int(rng.integers(1, 7))
        d = r_dim or int(rng.integers(1, 5))
        gain = rng.choice([0.0, rng.uniform(0.0, 2.0)], p=[0.1, 0.9])
        return cls(gain * rng.normal(size=(q, d)), rng.normal(size=q), seed)

    def sample(self, n):
        r = self.rng.normal(size=(n, self.r_dim))
        x = self.conditional_mean(r) + self.rng.normal(size=(n, self.q_dim))
        return r, x

    def conditional_mean(self, r):
        return r @ self.A.T + self.b

    def log_px(self, x):
        return np.atleast_1d(self._px.logpdf(x))

    def mutual_information(self):
        return 0.5 * float(np.linalg.slogdet(np.eye(self.q_dim) + self.A @ self.A.T)[1])


class CorrelatedGaussianWorld:
    """d independent standard-normal pairs (r_k, x_k) with correlation ``rho``.

    ``I(x; r) = -d/2 log(1 - rho^2)``.
    """

    kind = "data"

    def __init__(self, rho, dim=1, seed=0):
        if not -1 < rho < 1:
            raise WorldContractError("correlation must lie in (-1, 1)")
        self.rho, self.dim, self.seed = float(rho), int(dim), int(seed)
        self.rng = np.random.default_rng(seed)

    def sample(self, n):
        r = self.rng.normal(size=(n, self.dim))
        x = self.rho * r + math.sqrt(1 - self.rho**2) * self.rng.normal(size=(n, self.dim))
        return r, x

    def mutual_information(self):
        return -0.5 * self.dim * math.log(1 - self.rho**2)


class PointMassDataWorld:
    """x is a constant; p(x) is a Dirac mass with no finite density."""

    kind = "data"

    def __init__(self, value, r_dim=1, seed=0):
        self.value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        self.r_dim = r_dim
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    @property
    def q_dim(self):
        return self.value.shape[0]

    def sample(self, n):
        return self.rng.normal(size=(n, self.r_dim)), np.tile(self.value, (n, 1))


def check_normalization(world, n=200000, tol=0.01, seed=0):
    """Monte Carlo check that the world's densities integrate to one.

    Data worlds: importance-sample p(x) under a widened Gaussian fitted to
    world samples.  Prediction worlds: the prior and every posterior row
    must sum to one.
    """
    if getattr(world, "kind", None) == "data":
        if not hasattr(world, "log_px"):
            raise WorldContractError("world has no closed-form p(x)")
        probe = world.sample(5000)[1]
        cov = 2 * np.atleast_2d(np.cov(probe, rowvar=False)) + 1e-3 * np.eye(world.q_dim)
        proposal = stats.multivariate_normal(probe.mean(0), cov)
        u = proposal.rvs(size=n, random_state=np.random.default_rng(seed)).reshape(n, -1)
        mass = float(np.mean(np.exp(world.log_px(u) - np.atleast_1d(proposal.logpdf(u)))))
    else:
        z, _ = world.sample(2000)
        rows = world.posterior(z).sum(1)
        mass = float(world.prior.sum()) if np.allclose(rows, 1) else float(rows.mean())
    if abs(mass - 1) > tol:
        raise WorldContractError(f"density integrates to {mass:.4f}, not 1")
    return mass


# -- bounds -----------------------------------------------------------------------


@dataclass(frozen=True)
class RobustnessBound:
    """Bound quantities; derived fields are recomputed from the inputs on construction."""

    kind: str  # "prediction" | "data"
    i_vclub: float
    kl_term: float
    q_dim: int = 1
    ce_random: float = None
    kappa: float = None
    kappa_convention: str = None
    epsilon: float = field(init=False)
    ce_lower_bound: float = field(init=False, default=None)
    mse_lower_bound: float = field(init=False, default=None)

    def __post_init__(self):
        if self.q_dim < 1:
            raise ConfigurationError("q_dim must be positive")
        eps = self.i_vclub + self.kl_term
        object.__setattr__(self, "epsilon", eps)
        if self.ce_random is not None:
            object.__setattr__(self, "ce_lower_bound", self.ce_random - eps)
        if self.kappa is not None:
            object.__setattr__(self, "mse_lower_bound", 2 * (self.kappa - eps) / self.q_dim)

    def inflated(self, extra):
        """The same bound with ``extra`` added to epsilon (through the KL term)."""
        return replace(self, kl_term=self.kl_term + extra)

    def to_dict(self):
        return asdict(self)


@dataclass
class VerificationRecord:
    kind: str
    attacker: str
    holds: bool
    lhs: float
    rhs: float
    margin: float  # rhs - lhs for the log-likelihood form; positive when the bound holds
    world_seed: int
    details: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def fit_aux_classifier(z, y, num_classes, hidden=32, steps=400, lr=3e-2, seed=0):
    """h_phi: a small MLP fitted by maximum likelihood on (z, y)."""
    aux = AuxClassifier.mlp(z.shape[1], num_classes, hidden=hidden, seed=seed, dtype=torch.float64)
    return fit_variational(aux, _t(z), torch.as_tensor(y), steps, lr, optimizer="adam", seed=seed)


def fit_linear_generator(r, x):
    """g_psi(r) = W r + c by least squares, the exact maximizer of the Gaussian likelihood."""
    design = np.hstack([r, np.ones((r.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, x, rcond=None)
    lin = torch.nn.Linear(r.shape[1], x.shape[1]).to(torch.float64)
    with torch.no_grad():
        lin.weight.copy_(_t(coef[:-1].T))
        lin.bias.copy_(_t(coef[-1]))
    return AuxGenerator(lin)


def fitted_vclub(r, x):
    """All-pairs vCLUB of a least-squares unit-variance Gaussian q(x | r)."""
    return vclub_full(pairwise_log_prob(fit_linear_generator(r, x), _t(r), _t(x))).value


def compute_prediction_bound(world, aux, z, y):
    """epsilon from all-pairs vCLUB with ``aux`` plus the exact mean KL over classes."""
    if not hasattr(world, "posterior") or not hasattr(world, "log_prior"):
        raise WorldContractError("world must expose p(y) and p(y | z)")
    post = world.posterior(z)
    if not np.allclose(post.sum(1), 1.0, atol=1e-6) or abs(world.prior.sum() - 1) > 1e-9:
        raise WorldContractError("p(y | z) or p(y) does not normalize")
    zt = _t(z)
    i_vclub = vclub_full(pairwise_log_prob(aux, zt, torch.as_tensor(y))).value
    with torch.no_grad():
        log_h = aux(zt).numpy()
    kl = float(np.mean(np.sum(special.xlogy(post, post) - post * log_h, axis=1)))
    ce_random = -float(np.mean(world.log_prior(y)))
    return RobustnessBound("prediction", i_vclub, kl, ce_random=ce_random)


def kappa_value(log_px, q_dim, convention="derived"):
    """kappa from per-sample log p(x_i).

    * ``derived``: ``-mean log p(x_i) - (Q/2) log 2 pi``.  This is what the
      unit-variance Gaussian attacker's log-likelihood requires and it is
      tight: equality holds for the oracle attacker when r carries nothing.
    * ``as_stated``: ``mean log p(x_i) - 1/2 log 2 pi``.
    * ``as_in_proof``: ``1/2 log 2 pi - mean log p(x_i)``.

    The last two are kept so their behaviour can be checked against the
    brute-force verifier; neither is sound in general.
    """
    m = float(np.mean(log_px))
    if convention == "derived":
        return -m - 0.5 * q_dim * LOG_2PI
    if convention == "as_stated":
        return m - 0.5 * LOG_2PI
    if convention == "as_in_proof":
        return 0.5 * LOG_2PI - m
    raise ConfigurationError(f"unknown kappa convention {convention!r}")


def compute_data_bound(world, generator, r, x, kappa_convention="derived"):
    """epsilon from all-pairs vCLUB with ``generator`` plus the closed-form Gaussian KL."""
    if not hasattr(world, "log_px") or not hasattr(world, "conditional_mean"):
        raise WorldContractError("world lacks a closed-form p(x) or Gaussian p(x | r)")
    if getattr(generator, "variance", 1.0) != 1.0:
        raise ConfigurationError("the data bound assumes a unit-variance generator")
    rt, xt = _t(r), _t(x)
    i_vclub = vclub_full(pairwise_log_prob(generator, rt, xt)).value
    with torch.no_grad():
        g = generator(rt).numpy().reshape(x.shape)
    kl = float(np.mean(0.5 * ((world.conditional_mean(r) - g) ** 2).sum(1)))
    log_px = world.log_px(x)
    if not np.all(np.isfinite(log_px)):
        raise WorldContractError("p(x) is not finite on the samples")
    q = x.shape[1]
    kappa = kappa_value(log_px, q, kappa_convention)
    return RobustnessBound("data", i_vclub, kl, q_dim=q, kappa=kappa, kappa_convention=kappa_convention)


# -- attackers ------------------------------------------------------------------


def _mlp(d_in, d_out, hidden, seed):
    net = torch.nn.Sequential(
        torch.nn.Linear(d_in, hidden), torch.nn.ReLU(), torch.nn.Linear(hidden, hidden), torch.nn.ReLU(),
        torch.nn.Linear(hidden, d_out),
    )
    return init_parameters(net, seed).to(torch.float64)


def _train(net, loss_fn, steps, lr):
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(steps):
        loss = loss_fn()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net


@dataclass
class AttackerBudget:
    """Capacity and training budget for the strongest learned attacker."""

    train_samples: int = 2000
    hidden: int = 64
    steps: int = 400
    lr: float = 2e-2
    seed: int = 0


def verify_prediction_bound(world, bound, z, y, budget=None, oracle=True):
    """Check ``mean log h^m(y|z) < mean log p(y) + epsilon`` for a trained and an oracle attacker.

    The learned attacker trains on fresh world samples and is scored on ``(z, y)``.
    Returns one :class:`VerificationRecord` per attacker.
    """
    budget = budget or AttackerBudget()
    z_tr, y_tr = world.sample(budget.train_samples)
    net = _mlp(z.shape[1], world.num_classes, budget.hidden, budget.seed)
    zt_tr, yt_tr = _t(z_tr), torch.as_tensor(y_tr)
    _train(net, lambda: torch.nn.functional.cross_entropy(net(zt_tr), yt_tr), budget.steps, budget.lr)
    with torch.no_grad():
        log_h = torch.log_softmax(net(_t(z)), 1).numpy()
    attackers = {"mlp": log_h}
    if oracle:
        with np.errstate(divide="ignore"):
            attackers["oracle"] = np.log(world.posterior(z))
    records = []
    rhs = float(np.mean(world.log_prior(y))) + bound.epsilon
    for name, lh in attackers.items():
        lhs = float(np.mean(lh[np.arange(len(y)), y]))
        ce_ok = -lhs > bound.ce_lower_bound
        holds = bool(lhs < rhs and ce_ok)
        records.append(
            VerificationRecord(
                "prediction", name, holds, lhs, rhs, rhs - lhs, world.seed,
                {"epsilon": bound.epsilon, "attacker_ce": -lhs, "ce_lower_bound": bound.ce_lower_bound},
            )
        )
    return records


def verify_data_bound(world, bound, r, x, budget=None, oracle=True):
    """Check that per-dimension MSE exceeds ``2 (kappa - epsilon) / Q`` for trained and oracle regressors."""
    budget = budget or AttackerBudget()
    r_tr, x_tr = world.sample(budget.train_samples)
    net = _mlp(r.shape[1], x.shape[1], budget.hidden, budget.seed)
    rt_tr, xt_tr = _t(r_tr), _t(x_tr)
    _train(net, lambda: ((net(rt_tr) - xt_tr) ** 2).mean(), budget.steps, budget.lr)
    with torch.no_grad():
        preds = {"mlp": net(_t(r)).numpy()}
    if oracle and hasattr(world, "conditional_mean"):
        preds["oracle"] = world.conditional_mean(r)
    records = []
    q = x.shape[1]
    for name, g in preds.items():
        mse = float(np.mean(((x - g) ** 2).sum(1)) / q)
        holds = bool(mse > bound.mse_lower_bound)
        records.append(
            VerificationRecord(
                "data", name, holds, bound.mse_lower_bound, mse, mse - bound.mse_lower_bound, world.seed,
                {"epsilon": bound.epsilon, "kappa": bound.kappa, "kappa_convention": bound.kappa_convention},
            )
        )
    return records


# -- campaigns and trained pipelines --------------------------------------------


def prediction_campaign(seeds, n=1000, budget=None, aux_steps=400):
    """Compute and verify the prediction bound on one random world per seed."""
    out = []
    for s in seeds:
        world = GaussianLabelWorld.random(s)
        z, y = world.sample(n)
        aux = fit_aux_classifier(z, y, world.num_classes, seed=s, steps=aux_steps)
        bound = compute_prediction_bound(world, aux, z, y)
        out += verify_prediction_bound(world, bound, z, y, budget or AttackerBudget(seed=s))
    return out


def data_campaign(seeds, n=1000, budget=None, kappa_convention="derived"):
    """Compute and verify the data bound on one random linear-Gaussian world per seed."""
    out = []
    for s in seeds:
        world = LinearGaussianDataWorld.random(s)
        r, x = world.sample(n)
        bound = compute_data_bound(world, fit_linear_generator(r, x), r, x, kappa_convention)
        out += verify_data_bound(world, bound, r, x, budget or AttackerBudget(seed=s))
    return out


def pipeline_leakage(aux, cond, targets):
    """vCLUB leakage of a trained model; the KL part needs the unknown true density."""
    est = vclub_full(pairwise_log_prob(aux, cond, targets))
    return {"i_vclub": est.value, "pair_count": est.pair_count, "kl_term": KL_UNAVAILABLE, "bound_asserted": False}
