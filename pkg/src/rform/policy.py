"""Flow policies over bounded noise, the noise-generator family, and their losses.

The action path is a composition: a noise generator maps a source draw w to a
latent z that stays inside the behavior policy's source support, and the one-step
policy (distilled from the multi-step flow) maps z to an action. Keeping z inside
the support is what keeps the final action inside the behavior distribution's
support; the generator variants below differ exactly in how (or whether) they
enforce that.

Losses follow the usual split: the flow is trained by velocity matching along the
straight interpolation path, the one-step net by regression onto the integrated
flow, the generator by pushing the critic value up through the frozen action path,
and gradient isolation is structural (frozen forwards detach parameters), not an
afterthought.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    as_tensor,
    concat,
    clip_vals,
    div,
    exp,
    grad_enabled,
    mean_all,
    mean_sumsq,
    mul,
    neg,
    no_grad,
    norm_rows,
    scale,
    sub,
    tanh,
    where_mask,
)
from .errors import ConfigError, DimensionError, PreconditionError
from .geometry import (
    BallDomain,
    IntegratorConfig,
    integrate,
    integrate_np,
    sample_ball,
    sample_cube,
)
from .nn import Mlp

SOURCES = ("ball", "gaussian", "cube")


def _source_draw(source: str, domain: BallDomain, rng: np.random.Generator, n: int) -> np.ndarray:
    if source == "ball":
        return sample_ball(domain, rng, n)
    if source == "gaussian":
        return rng.standard_normal((n, domain.dim))
    if source == "cube":
        return sample_cube(domain.dim, rng, n)
    raise ConfigError(f"unknown source distribution {source!r}; pick one of {SOURCES}")


def _check_source(source: str, domain: BallDomain, z: np.ndarray) -> None:
    if source == "ball" and not domain.contains(z, tol=1e-9).all():
        raise PreconditionError("latent outside the source ball")
    if source == "cube" and np.abs(z).max(initial=0.0) > 1.0 + 1e-9:
        raise PreconditionError("latent outside the source box")


def _time_column(t, n: int) -> Tensor:
    if isinstance(t, Tensor):
        return t
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return Tensor(np.full((n, 1), float(t)))
    if t.shape != (n, 1):
        raise DimensionError(f"time column must be scalar or ({n}, 1), got {t.shape}")
    return Tensor(t)


def squash_into_ball(z: Tensor, radius: float) -> Tensor:
    """Rescale a free vector into the open ball: direction kept, norm -> tanh(norm)*radius."""
    nrm = norm_rows(z)
    safe = where_mask(nrm.data > 1e-150, nrm, Tensor(np.float64(1.0)))
    return mul(z, scale(div(tanh(nrm), safe), radius))


def _squash_into_ball_np(z: np.ndarray, radius: float) -> np.ndarray:
    nrm = np.sqrt(np.einsum("ij,ij->i", z, z))[:, None]
    safe = np.where(nrm > 1e-150, nrm, 1.0)
    return z * ((np.tanh(nrm) / safe) * radius)


def _flow_velocity_np(net: Mlp, s: np.ndarray):
    """Plain-array velocity closure matching the Tensor feature layout [t, x, s]."""

    def vel(t: float, x: np.ndarray) -> np.ndarray:
        col = np.full((x.shape[0], 1), float(t))
        return net.forward_np(np.concatenate([col, x, s], axis=1))

    return vel


class BcFlowPolicy:
    """Behavior-cloning flow: integrate a learned velocity field from source noise to an action."""

    def __init__(
        self,
        net: Mlp,
        domain: BallDomain,
        state_dim: int,
        steps: int = 10,
        source: str = "ball",
    ):
        if source not in SOURCES:
            raise ConfigError(f"unknown source distribution {source!r}; pick one of {SOURCES}")
        self.net = net
        self.domain = domain
        self.state_dim = state_dim
        self.source = source
        self.cfg = IntegratorConfig(steps=steps, mode="plain")

    def sample_source(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return _source_draw(self.source, self.domain, rng, n)

    def velocity(self, t, x, s, frozen: bool = False) -> Tensor:
        x = as_tensor(x)
        feats = concat([_time_column(t, x.data.shape[0]), x, as_tensor(s)], axis=1)
        return self.net.forward(feats, frozen=frozen)

    def action(self, s, z, frozen: bool = False) -> Tensor:
        """Integrate the flow from latent z under state s (plain Euler, unbounded image)."""
        s = np.asarray(s, dtype=np.float64)
        zt = as_tensor(z)
        _check_source(self.source, self.domain, zt.data)
        if not grad_enabled():
            vel = _flow_velocity_np(self.net, s)
            return Tensor(integrate_np(vel, zt.data, self.domain, self.cfg))
        return integrate(
            lambda t, x: self.velocity(t, x, s, frozen=frozen), zt, self.domain, self.cfg
        )

    def parameters(self):
        return self.net.parameters()


class NoiseGenerator:
    """Flow-based latent generator; the reflecting mode keeps the latent in-domain."""

    def __init__(
        self,
        net: Mlp,
        domain: BallDomain,
        state_dim: int,
        steps: int = 10,
        mode: str = "reflect-project",
        source: str = "ball",
        squash: str | None = None,
        detach_reflection: bool = False,
    ):
        self.net = net
        self.domain = domain
        self.state_dim = state_dim
        self.source = source
        self.squash = squash
        self.cfg = IntegratorConfig(steps=steps, mode=mode, detach_reflection=detach_reflection)

    def sample_source(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return _source_draw(self.source, self.domain, rng, n)

    def velocity(self, t, z, s, frozen: bool = False) -> Tensor:
        z = as_tensor(z)
        feats = concat([_time_column(t, z.data.shape[0]), z, as_tensor(s)], axis=1)
        return self.net.forward(feats, frozen=frozen)

    def generate(self, s, w, frozen: bool = False) -> Tensor:
        s = np.asarray(s, dtype=np.float64)
        if not grad_enabled():
            vel = _flow_velocity_np(self.net, s)
            z = integrate_np(vel, as_tensor(w).data, self.domain, self.cfg)
            if self.squash == "tanh":
                z = _squash_into_ball_np(z, self.domain.radius)
            return Tensor(z)
        z = integrate(
            lambda t, x: self.velocity(t, x, s, frozen=frozen),
            as_tensor(w),
            self.domain,
            self.cfg,
        )
        if self.squash == "tanh":
            z = squash_into_ball(z, self.domain.radius)
        return z

    def parameters(self):
        return self.net.parameters()


class MlpNoiseGenerator:
    """Deterministic state-to-latent map, squashed into the ball. No source draw."""

    def __init__(self, net: Mlp, domain: BallDomain, state_dim: int):
        self.net = net
        self.domain = domain
        self.state_dim = state_dim

    def sample_source(self, rng: np.random.Generator, n: int):
        return None

    def generate(self, s, w=None, frozen: bool = False) -> Tensor:
        raw = self.net.forward(np.asarray(s, dtype=np.float64), frozen=frozen)
        return squash_into_ball(raw, self.domain.radius)

    def parameters(self):
        return self.net.parameters()


class SquashedGaussianNoiseGenerator:
    """State-conditioned Gaussian whose sample is norm-squashed into the ball.

    The net emits (mean, log-std) per latent coordinate; the reparameterized
    sample mean + std * eps is then squashed like the deterministic variant.
    """

    LOG_STD_RANGE = (-5.0, 2.0)

    def __init__(self, net: Mlp, domain: BallDomain, state_dim: int):
        self.net = net
        self.domain = domain
        self.state_dim = state_dim

    def sample_source(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.domain.dim))

    def generate(self, s, w, frozen: bool = False) -> Tensor:
        out = self.net.forward(np.asarray(s, dtype=np.float64), frozen=frozen)
        d = self.domain.dim
        if out.data.shape[1] != 2 * d:
            raise DimensionError(
                f"squashed-gaussian net must emit 2*{d} outputs, got {out.data.shape[1]}"
            )
        mean = _slice_cols(out, 0, d)
        log_std = _slice_cols(out, d, 2 * d)
        log_std = clip_vals(log_std, *self.LOG_STD_RANGE)
        g = add(mean, mul(exp(log_std), Tensor(np.asarray(w, dtype=np.float64))))
        return squash_into_ball(g, self.domain.radius)

    def parameters(self):
        return self.net.parameters()


def _slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Column slice as a tape op (used to split a net's mean/log-std heads)."""
    from .autodiff import _acc, _make

    data = x.data[:, lo:hi]

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        _acc(x, full, True)

    return _make(data.copy(), (x,), bw)


class OneStepPolicy:
    """Direct latent-to-action map distilled from the multi-step flow."""

    def __init__(self, net: Mlp, state_dim: int, action_dim: int):
        self.net = net
        self.state_dim = state_dim
        self.action_dim = action_dim

    def action(self, s, z, frozen: bool = False) -> Tensor:
        feats = concat([as_tensor(z), as_tensor(np.asarray(s, dtype=np.float64))], axis=1)
        return self.net.forward(feats, frozen=frozen)

    def parameters(self):
        return self.net.parameters()


# ---------------------------------------------------------------------------
# losses


def bc_loss(policy: BcFlowPolicy, s: np.ndarray, a: np.ndarray, z: np.ndarray, t: np.ndarray) -> Tensor:
    """Velocity matching along the straight path x_t = (1 - t) z + t a.

    The regression target is the path velocity a - z; z and t are presampled so the
    same loss is exactly re-evaluable (finite differencing, determinism tests).
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(len(a), 1)
    xt = (1.0 - t) * z + t * a
    v = policy.velocity(t, Tensor(xt), s)
    return mean_sumsq(sub(v, Tensor(a - z)))


def distill_loss(onestep: OneStepPolicy, policy: BcFlowPolicy, s: np.ndarray, z: np.ndarray) -> Tensor:
    """Regress the one-step action onto the integrated flow action (target held constant)."""
    with no_grad():
        target = policy.action(s, z).data
    ahat = onestep.action(s, Tensor(np.asarray(z, dtype=np.float64)))
    return mean_sumsq(sub(ahat, Tensor(target)))


def actor_loss(
    generator,
    onestep: OneStepPolicy,
    critic,
    s: np.ndarray,
    w,
    bc_policy: BcFlowPolicy | None = None,
) -> Tensor:
    """Negated critic value of the composed action; only the generator trains.

    The action head (one-step by default, the multi-step flow when bc_policy is
    passed) and the critic run frozen, so their parameters hold zero gradient
    after backward and the latent path alone carries the signal.
    """
    z = generator.generate(s, w)
    if bc_policy is not None:
        act = bc_policy.action(s, z, frozen=True)
    else:
        act = onestep.action(s, z, frozen=True)
    q = critic.value(s, act, frozen=True)
    return neg(mean_all(q))


def fql_onestep_loss(
    onestep: OneStepPolicy,
    policy: BcFlowPolicy,
    critic,
    s: np.ndarray,
    z: np.ndarray,
    alpha: float,
) -> Tensor:
    """One-step policy trained directly: -Q plus an alpha-weighted distillation pull."""
    a = onestep.action(s, Tensor(np.asarray(z, dtype=np.float64)))
    q = critic.value(s, a, frozen=True)
    with no_grad():
        target = policy.action(s, z).data
    return add(neg(mean_all(q)), scale(mean_sumsq(sub(a, Tensor(target))), alpha))


def compose_policy_action(generator, onestep: OneStepPolicy, s: np.ndarray, w, bc_policy=None):
    """Evaluation path: latent and action as plain arrays, no tape."""
    with no_grad():
        z = generator.generate(s, w)
        if bc_policy is not None:
            a = bc_policy.action(s, z.data)
        else:
            a = onestep.action(s, z.data)
    return z.data, a.data
