"""Decoupled conditional variational RNN.

Three GRU stacks with separate hidden states:

* prior    ``(phi_u(u_t), eps_t, h) -> N(mu_0, sigma_0)``
* encoder  ``(phi_x(x_t), phi_u(u_t), eps_t, h) -> N(mu_z, sigma_z)``
* decoder  ``(phi_z(z_t), h) -> N(mu_x, 1)``

with ``z_t = mu + eps_t * sigma``. Because no net reads another's hidden
state, each can run over the whole sequence on its own; training runs the
feature extractors once over all time steps and only the GRU recursions
step through time.

Time indexing: for a trajectory ``s_0 .. s_T`` with actions ``a_0 .. a_{T-1}``
the model emits ``x_t = s_{t+1}`` from the condition
``u_t = [s_0, a_t, s_hat_{t+1}]`` where ``s_hat`` is the open-loop physics
rollout. Network state encodings are ``(h, v)`` for the ball and
``(x, y, cos theta, sin theta)`` for pushing, standardized with statistics
fitted on the training split.

All arrays inside the model are time-major: ``(T, B, dim)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import diffengine as D
from . import nn
from .core import BALL, PUSH, Dataset, NormStats, ShapeError, TrajectoryDistribution, action_dim, fit_stats, wrap_angle


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"training diverged at iteration {iteration}{': ' + detail if detail else ''}")
        self.iteration = iteration


class NonFiniteLoss(FloatingPointError):
    def __init__(self, timestep: int):
        super().__init__(f"non-finite loss term at time step {timestep}")
        self.timestep = timestep


# ---------------------------------------------------------------------------
# state encodings


def encoded_dim(scenario: str) -> int:
    return {BALL: 2, PUSH: 4}[scenario]


def encode_states(scenario: str, states) -> np.ndarray:
    s = np.asarray(states, dtype=float)
    if scenario == BALL:
        return s.copy()
    return np.concatenate([s[..., :2], np.cos(s[..., 2:3]), np.sin(s[..., 2:3])], axis=-1)


def decode_states(scenario: str, enc) -> np.ndarray:
    e = np.asarray(enc, dtype=float)
    if scenario == BALL:
        return e.copy()
    return np.concatenate([e[..., :2], np.arctan2(e[..., 3:4], e[..., 2:3])], axis=-1)


def apply_residual(scenario: str, physics_states, residual_enc) -> np.ndarray:
    """Physics states corrected by a residual given in encoding units.

    A zero residual returns ``physics_states`` bit for bit.
    """
    p = np.asarray(physics_states, dtype=float)
    r = np.asarray(residual_enc, dtype=float)
    if scenario == BALL:
        return p + r
    th = p[..., 2]
    c, s = np.cos(th), np.sin(th)
    pc, ps = c + r[..., 2], s + r[..., 3]
    # angle from the physics heading to the corrected heading
    dth = np.arctan2(c * ps - s * pc, c * pc + s * ps)
    out = np.stack([p[..., 0] + r[..., 0], p[..., 1] + r[..., 1], th + dth], axis=-1)
    bad = ~((out[..., 2] > -math.pi) & (out[..., 2] <= math.pi))
    if np.any(bad):
        out[..., 2][bad] = wrap_angle(out[..., 2][bad])
    return out


# ---------------------------------------------------------------------------
# configuration and modules


@dataclass(frozen=True)
class DCVRNNConfig:
    scenario: str
    latent_size: int
    hidden_size: int = 16
    num_layers: int = 2
    extractors: str = "identity"  # "identity" or "bilinear"
    x_features: tuple[int, ...] = (32, 16)
    u_features: tuple[int, ...] = (32, 16)
    z_features: int = 16
    use_physics: bool = True  # False zeroes the physics slot of u_t (Neural baseline)
    delta: bool = False  # decoder mean is added to the standardized physics prediction

    @classmethod
    def ball(cls, **kw) -> "DCVRNNConfig":
        return cls(scenario=BALL, latent_size=4, extractors="identity", **kw)

    @classmethod
    def push(cls, **kw) -> "DCVRNNConfig":
        return cls(scenario=PUSH, latent_size=16, extractors="bilinear", **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d) -> "DCVRNNConfig":
        d = dict(d)
        for k in ("x_features", "u_features"):
            d[k] = tuple(d[k])
        return cls(**d)

    @property
    def x_dim(self) -> int:
        return encoded_dim(self.scenario)

    @property
    def cond_dim(self) -> int:
        return 2 * self.x_dim + action_dim(self.scenario)


class Extractor:
    """Identity, or a stack of (bilinear | linear) layers each followed by tanh."""

    def __init__(self, layers: Sequence = ()):
        self.layers = list(layers)

    def specs(self):
        return [s for layer in self.layers for s in layer.specs()]

    def __call__(self, P, x):
        for layer in self.layers:
            x = D.tanh(layer(P, x))
        return x


def _bilinear_stack(name, in_size, sizes):
    layers, n = [], in_size
    for k, m in enumerate(sizes):
        layers.append(nn.BilinearLayer(f"{name}.l{k}", n, None, m))
        n = m
    return Extractor(layers), n


class DCVRNN:
    """Parameters plus the normalization statistics the network was fitted with."""

    def __init__(self, config: DCVRNNConfig, state_stats: NormStats, action_stats: NormStats | None, params=None, seed=0):
        self.config = config
        self.state_stats = state_stats
        self.action_stats = action_stats
        c = config
        if c.extractors == "identity":
            self.phi_x, fx = Extractor(), c.x_dim
            self.phi_u, fu = Extractor(), c.cond_dim
            self.phi_z, fz = Extractor(), c.latent_size
        elif c.extractors == "bilinear":
            self.phi_x, fx = _bilinear_stack("phi_x", c.x_dim, c.x_features)
            self.phi_u, fu = _bilinear_stack("phi_u", c.cond_dim, c.u_features)
            self.phi_z, fz = Extractor([nn.LinearLayer("phi_z.l0", c.latent_size, c.z_features)]), c.z_features
        else:
            raise ValueError(f"unknown extractor kind {c.extractors!r}")
        H, L = c.hidden_size, c.num_layers
        self.prior_rnn = nn.GRUStack("prior", fu + c.latent_size, H, L)
        self.enc_rnn = nn.GRUStack("enc", fx + fu + c.latent_size, H, L)
        self.dec_rnn = nn.GRUStack("dec", fz, H, L)
        self.prior_head = nn.GaussianHead("prior_head", H, c.latent_size)
        self.enc_head = nn.GaussianHead("enc_head", H, c.latent_size)
        self.dec_head = nn.GaussianHead("dec_head", H, c.x_dim, fixed_std=1.0)
        self.modules = [
            self.phi_x,
            self.phi_u,
            self.phi_z,
            self.prior_rnn,
            self.enc_rnn,
            self.dec_rnn,
            self.prior_head,
            self.enc_head,
            self.dec_head,
        ]
        specs = nn.collect_specs(self.modules)
        if params is None:
            params = nn.init_params(specs, seed)
        missing = {s.name for s in specs} - set(params)
        if missing:
            raise ShapeError(f"parameters missing: {sorted(missing)}")
        for s in specs:
            if tuple(params[s.name].shape) != tuple(s.shape):
                raise ShapeError(f"parameter {s.name!r} has shape {params[s.name].shape}, expected {s.shape}")
        self.params = {s.name: np.asarray(params[s.name], dtype=float) for s in specs}

    @classmethod
    def from_dataset(cls, config: DCVRNNConfig, dataset: Dataset, seed: int = 0) -> "DCVRNN":
        if dataset.scenario != config.scenario:
            raise ValueError(f"dataset scenario {dataset.scenario!r} != model scenario {config.scenario!r}")
        enc = np.concatenate([encode_states(config.scenario, t.states) for t in dataset])
        state_stats, _ = fit_stats(enc)
        action_stats = None
        if action_dim(config.scenario):
            action_stats, _ = fit_stats(np.concatenate([t.actions for t in dataset]))
        return cls(config, state_stats, action_stats, seed=seed)

    def with_params(self, params) -> "DCVRNN":
        return DCVRNN(self.config, self.state_stats, self.action_stats, params)

    def param_names(self, *modules) -> set[str]:
        return {s.name for m in modules for s in m.specs()}

    # -- manifest --------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "model": "dcvrnn",
            "config": self.config.to_dict(),
            "state_stats": self.state_stats.to_dict(),
            "action_stats": self.action_stats.to_dict() if self.action_stats else None,
        }

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.params, self.manifest())

    @classmethod
    def load(cls, path) -> "DCVRNN":
        params, man = nn.load_checkpoint(path)
        if man.get("model") != "dcvrnn":
            raise ValueError(f"{path}: checkpoint does not hold a DCVRNN")
        astats = NormStats.from_dict(man["action_stats"]) if man["action_stats"] else None
        return cls(DCVRNNConfig.from_dict(man["config"]), NormStats.from_dict(man["state_stats"]), astats, params)


# ---------------------------------------------------------------------------
# conditions


def build_conditions(model: DCVRNN, s0, actions, engine=None, physics_states=None) -> np.ndarray:
    """Standardized condition sequence ``u_t = [s_0, a_t, s_hat_{t+1}]``, shape (T, cond_dim).

    The physics rollout is computed once, open loop from ``s0``; pass
    ``physics_states`` to reuse one. Models with ``use_physics=False`` get a
    zero physics slot.
    """
    cfg = model.config
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 1 and actions.size == 0:
        actions = actions.reshape(0, 0)
    T = len(actions)
    if T < 1:
        raise ValueError("need at least one action")
    s0n = model.state_stats.apply(encode_states(cfg.scenario, np.asarray(s0, dtype=float)))
    parts = [np.broadcast_to(s0n, (T, cfg.x_dim))]
    if action_dim(cfg.scenario):
        parts.append(model.action_stats.apply(actions))
    if cfg.use_physics:
        if physics_states is None:
            if engine is None:
                raise ValueError("a physics engine is needed to build hybrid conditions")
            if engine.scenario != cfg.scenario:
                raise ValueError(f"engine scenario {engine.scenario!r} != model scenario {cfg.scenario!r}")
            physics_states = engine.rollout(s0, actions)
        phys = np.asarray(physics_states, dtype=float)
        if len(phys) != T + 1:
            raise ShapeError(f"physics rollout has {len(phys)} states for {T} actions")
        parts.append(model.state_stats.apply(encode_states(cfg.scenario, phys[1:])))
    else:
        parts.append(np.zeros((T, cfg.x_dim)))
    return np.concatenate(parts, axis=-1)


def physics_slot(model: DCVRNN, u):
    """The standardized physics prediction columns of a condition array or node."""
    d = model.config.x_dim
    start = model.config.cond_dim - d
    if isinstance(u, D.Node):
        return D.slice_(u, start, start + d)
    return np.asarray(u)[..., start:]


def targets(model: DCVRNN, states) -> np.ndarray:
    """Standardized encodings of ``s_1 .. s_T``."""
    return model.state_stats.apply(encode_states(model.config.scenario, np.asarray(states)[1:]))


# ---------------------------------------------------------------------------
# single steps


def _lift(P, *xs):
    tape = next(iter(P.values())).tape
    return [x if isinstance(x, D.Node) else tape.const(x) for x in xs]


class StepOut(NamedTuple):
    mean: D.Node
    std: object
    sample: object
    hidden: list


def _check_width(name, x, n):
    w = x.shape[-1] if hasattr(x, "shape") else np.shape(x)[-1]
    if w != n:
        raise ShapeError(f"{name}: expected last dimension {n}, got {w}")


def encode_step(model: DCVRNN, P, x_t, u_t, eps_t, hidden) -> StepOut:
    cfg = model.config
    _check_width("encode_step x_t", x_t, cfg.x_dim)
    _check_width("encode_step u_t", u_t, cfg.cond_dim)
    _check_width("encode_step eps_t", eps_t, cfg.latent_size)
    x_t, u_t, eps_t = _lift(P, x_t, u_t, eps_t)
    inp = D.concat([model.phi_x(P, x_t), model.phi_u(P, u_t), eps_t])
    out, hidden = nn.gru_step(model.enc_rnn, P, inp, hidden)
    mu, sigma = model.enc_head(P, out)
    return StepOut(mu, sigma, D.add(mu, D.mul(eps_t, sigma)), hidden)


def prior_step(model: DCVRNN, P, u_t, eps_t, hidden) -> StepOut:
    cfg = model.config
    _check_width("prior_step u_t", u_t, cfg.cond_dim)
    _check_width("prior_step eps_t", eps_t, cfg.latent_size)
    u_t, eps_t = _lift(P, u_t, eps_t)
    inp = D.concat([model.phi_u(P, u_t), eps_t])
    out, hidden = nn.gru_step(model.prior_rnn, P, inp, hidden)
    mu, sigma = model.prior_head(P, out)
    return StepOut(mu, sigma, D.add(mu, D.mul(eps_t, sigma)), hidden)


def decode_step(model: DCVRNN, P, z_t, hidden) -> StepOut:
    """Decoder mean from ``z_t`` and the decoder's own hidden state; std is fixed to 1."""
    _check_width("decode_step z_t", z_t, model.config.latent_size)
    (z_t,) = _lift(P, z_t)
    out, hidden = nn.gru_step(model.dec_rnn, P, model.phi_z(P, z_t), hidden)
    mu, sigma = model.dec_head(P, out)
    return StepOut(mu, sigma, None, hidden)


# ---------------------------------------------------------------------------
# whole-sequence passes (time-major)


def _recur(stack: nn.GRUStack, P, inputs) -> D.Node:
    return nn.gru_sequence(stack, P, inputs)


def prior_pass(model: DCVRNN, P, U, E, phi_u=None):
    phi_u = model.phi_u(P, U) if phi_u is None else phi_u
    h = _recur(model.prior_rnn, P, D.concat([phi_u, E]))
    return model.prior_head(P, h)


def encoder_pass(model: DCVRNN, P, X, U, E, phi_u=None):
    phi_u = model.phi_u(P, U) if phi_u is None else phi_u
    h = _recur(model.enc_rnn, P, D.concat([model.phi_x(P, X), phi_u, E]))
    return model.enc_head(P, h)


def decoder_pass(model: DCVRNN, P, Z):
    h = _recur(model.dec_rnn, P, model.phi_z(P, Z))
    return model.dec_head(P, h)


class LossParts(NamedTuple):
    total: D.Node
    kl: D.Node
    nll: D.Node
    kl_per_step: np.ndarray  # (T, B)


def elbo_loss(model: DCVRNN, P, X, U, E, l2: float = 1e-5) -> LossParts:
    """Batch-mean of sum_t KL(post || prior) - sum_t log N(x_t; mu_x, 1), plus l2 * ||theta||^2.

    ``X`` (T, B, x_dim), ``U`` (T, B, cond_dim), ``E`` (T, B, latent) hold
    standardized targets, conditions and the reparameterization noise
    (one Monte-Carlo sample per step).
    """
    cfg = model.config
    for name, arr, n in (("X", X, cfg.x_dim), ("U", U, cfg.cond_dim), ("E", E, cfg.latent_size)):
        if len(arr.shape) != 3 or arr.shape[-1] != n:
            raise ShapeError(f"elbo_loss: {name} must be (T, B, {n}), got {arr.shape}")
    X, U, E = _lift(P, X, U, E)
    phi_u = model.phi_u(P, U)
    mu_z, sd_z = encoder_pass(model, P, X, U, E, phi_u)
    mu_0, sd_0 = prior_pass(model, P, U, E, phi_u)
    z = D.add(mu_z, D.mul(E, sd_z))
    mu_x, sd_x = decoder_pass(model, P, z)
    if cfg.delta:
        mu_x = D.add(mu_x, physics_slot(model, U))
    kl = D.gauss_kl(mu_z, sd_z, mu_0, sd_0)  # (T, B)
    logp = D.gauss_logpdf(X, mu_x, sd_x)  # (T, B)
    for name, node in (("kl", kl), ("log-density", logp)):
        bad = ~np.isfinite(node.value)
        if np.any(bad):
            raise NonFiniteLoss(int(np.argwhere(bad)[0][0]))
    batch = X.shape[1]
    kl_sum = D.mul(D.sum_(kl), 1.0 / batch)
    nll = D.mul(D.sum_(logp), -1.0 / batch)
    total = D.add(kl_sum, nll)
    if l2:
        total = D.add(total, D.mul(nn.l2_penalty(P), l2))
    return LossParts(total, kl_sum, nll, kl.value)


def elbo_grad_check(
    config: DCVRNNConfig, steps: int = 5, batch: int = 2, seed: int = 0, per_tensor: int = 4, l2: float = 1e-5
) -> float:
    """Worst grad_check error of the full ELBO loss over sampled entries of every parameter tensor.

    Runs on random standardized data; weights are drawn at a larger scale
    than the initializer so every term of the loss is exercised.
    """
    rng = np.random.default_rng(seed)
    d, a = config.x_dim, action_dim(config.scenario)
    unit = NormStats(np.zeros(d), np.ones(d))
    astats = NormStats(np.zeros(a), np.ones(a)) if a else None
    model = DCVRNN(config, unit, astats, seed=seed)
    params = {k: v + rng.normal(0.0, 0.2, size=v.shape) for k, v in model.params.items()}
    X = rng.standard_normal((steps, batch, config.x_dim))
    U = rng.standard_normal((steps, batch, config.cond_dim))
    E = rng.standard_normal((steps, batch, config.latent_size))
    worst = 0.0
    for name, value in params.items():

        def fn(tape, x, name=name):
            P = {k: (x if k == name else tape.const(v)) for k, v in params.items()}
            return elbo_loss(model, P, X, U, E, l2).total

        coords = rng.choice(value.size, size=min(per_tensor, value.size), replace=False)
        worst = max(worst, D.grad_check(fn, value, coords=coords))
    return worst


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSchedule:
    lr: float = 1e-3
    decay_every: int = 2500
    decay_factor: float = 0.5
    iterations: int = 10000
    batch_size: int = 100
    max_seq_len: int | None = None
    l2: float = 1e-5

    def lr_at(self, iteration: int) -> float:
        return nn.lr_schedule(self.lr, iteration, self.decay_every, self.decay_factor)

    def describe(self) -> str:
        mant, exp = f"{self.lr:e}".split("e")
        lr = f"{mant.rstrip('0').rstrip('.')}e{int(exp)}"
        return (
            f"lr {lr}, ×{self.decay_factor:g} @ {self.decay_every}, "
            f"{self.iterations} iters, batch {self.batch_size}"
        )


@dataclass
class TrainResult:
    model: DCVRNN
    losses: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    nll: list = field(default_factory=list)


def noise_stream(seed: int, iteration: int) -> np.random.Generator:
    """Counter-based generator: the draws for ``iteration`` do not depend on earlier ones."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)).jumped(iteration))


def prepare_training_arrays(model: DCVRNN, dataset: Dataset, engine=None, max_seq_len=None):
    """Time-major targets (T, N, x_dim) and conditions (T, N, cond_dim)."""
    xs, us = [], []
    T = min(t.horizon for t in dataset)
    if max_seq_len is not None:
        T = min(T, max_seq_len)
    for traj in dataset:
        tr = traj.truncated(T)
        phys = engine.rollout(tr.states[0], tr.actions) if model.config.use_physics else None
        us.append(build_conditions(model, tr.states[0], tr.actions, physics_states=phys))
        xs.append(targets(model, tr.states))
    return np.stack(xs, axis=1), np.stack(us, axis=1)


def train(
    model: DCVRNN,
    dataset: Dataset,
    schedule: TrainSchedule = TrainSchedule(),
    seed: int = 0,
    engine=None,
    arrays=None,
    log: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minibatch Adam on the ELBO loss; returns the trained model and per-iteration losses."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    X_all, U_all = arrays if arrays is not None else prepare_training_arrays(model, dataset, engine, schedule.max_seq_len)
    T, N = X_all.shape[:2]
    B = min(schedule.batch_size, N)
    params = dict(model.params)
    state = nn.AdamState()
    result = TrainResult(model)
    for it in range(schedule.iterations):
        rng = noise_stream(seed, it)
        idx = np.sort(rng.choice(N, size=B, replace=False)) if B < N else np.arange(N)
        E = rng.standard_normal((T, B, model.config.latent_size))
        tape = D.Tape()
        P = nn.bind(tape, params)
        try:
            parts = elbo_loss(model, P, X_all[:, idx], U_all[:, idx], E, schedule.l2)
        except NonFiniteLoss as exc:
            raise TrainingDiverged(it, str(exc)) from exc
        loss = float(parts.total.value)
        if not math.isfinite(loss):
            raise TrainingDiverged(it, "loss is not finite")
        if parts.kl_per_step.min() < -1e-9:
            raise AssertionError(f"negative KL {parts.kl_per_step.min()} at iteration {it}")
        tape.backward(parts.total)
        grads = {k: P[k].grad for k in params}
        tape.clear()
        try:
            params = nn.adam_step(params, grads, state, schedule.lr_at(it))
        except nn.NonFiniteGradient as exc:
            raise TrainingDiverged(it, str(exc)) from exc
        result.losses.append(loss)
        result.kl.append(float(parts.kl.value))
        result.nll.append(float(parts.nll.value))
        if log is not None:
            log(it, loss)
    result.model = model.with_params(params)
    return result


# ---------------------------------------------------------------------------
# sampling


def sample(
    model: DCVRNN,
    s0,
    actions,
    n_samples: int,
    seed: int,
    engine=None,
    physics_states=None,
    noise: np.ndarray | None = None,
) -> TrajectoryDistribution:
    """Sample trajectories from the prior and decoder; the encoder is never run.

    Returns ``n_samples`` trajectories of ``T+1`` states in physical units,
    each starting at ``s0``. ``noise`` (T, n, latent) overrides the seeded
    draws, e.g. all zeros for a deterministic rollout.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = model.config
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 1:
        actions = actions.reshape(len(actions), -1) if actions.size else actions.reshape(0, 0)
    if cfg.use_physics and physics_states is None:
        if engine is None:
            raise ValueError("hybrid sampling needs a physics engine")
        physics_states = engine.rollout(s0, actions)
    U = build_conditions(model, s0, actions, physics_states=physics_states if cfg.use_physics else None)
    T = len(U)
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal((T, n_samples, cfg.latent_size))
    elif noise.shape != (T, n_samples, cfg.latent_size):
        raise ShapeError(f"noise must be {(T, n_samples, cfg.latent_size)}, got {noise.shape}")
    tape = D.Tape()
    P = nn.bind(tape, model.params, trainable=False)
    Ub = np.broadcast_to(U[:, None, :], (T, n_samples, U.shape[-1]))
    Ub, noise = _lift(P, Ub, noise)
    mu_0, sd_0 = prior_pass(model, P, Ub, noise)
    z = D.add(mu_0, D.mul(noise, sd_0))
    mu_x, _ = decoder_pass(model, P, z)
    raw = mu_x.value  # (T, n, x_dim), standardized
    tape.clear()
    s0 = np.asarray(s0, dtype=float)
    if cfg.delta:
        base = np.asarray(physics_states, dtype=float)[1:] if cfg.use_physics else None
        if base is None:
            pred_enc = model.state_stats.invert(raw)
            states = decode_states(cfg.scenario, pred_enc)
        else:
            states = apply_residual(cfg.scenario, base[:, None, :], raw * model.state_stats.std)
    else:
        states = decode_states(cfg.scenario, model.state_stats.invert(raw))
    states = np.transpose(states, (1, 0, 2))
    first = np.broadcast_to(s0, (n_samples, 1, len(s0)))
    return TrajectoryDistribution(float(engine.dt if engine is not None else np.nan), np.concatenate([first, states], axis=1), cfg.scenario)
