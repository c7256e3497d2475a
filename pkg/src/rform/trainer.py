"""Training loop: interleaved critic, BC-flow, distillation, and generator updates.

One training step touches one shared minibatch and runs, in order: critic TD
update (next actions composed through the current policy stack), BC flow update,
one-step distillation, noise-generator update, then a polyak pull on the critic
targets. Variant tags swap pieces of the stack, never the loop skeleton.

Randomness is one master seed fanned out into named sub-streams (net init, data,
bc, ng, critic, eval) so two runs with the same config are bit-identical and
toggling one component cannot shift another's draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.stats import chi2

from .autodiff import backward, no_grad
from .critic import AGGREGATIONS, CriticPair
from .envs import ENVS, TransitionBatch
from .errors import ConfigError, NumericError
from .geometry import BallDomain, row_norms, sample_ball
from .nn import Adam, Mlp, zero_grads
from .policy import (
    BcFlowPolicy,
    MlpNoiseGenerator,
    NoiseGenerator,
    OneStepPolicy,
    SquashedGaussianNoiseGenerator,
    actor_loss,
    bc_loss,
    distill_loss,
    fql_onestep_loss,
)

VARIANTS = (
    "reform",
    "nodistill",
    "unbounded",
    "gaussian-xi",
    "mlp-ng",
    "tanh-ng",
    "squashed-gaussian-ng",
    "cube",
    "billiard",
    "fql-alpha",
)

METRICS_HEADER = "step,loss_critic,loss_bc,loss_distill,loss_actor,eval_return,clip_rate"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    env: str = "two-corner-bandit"
    variant: str = "reform"
    learning_rate: float = 3e-4
    batch_size: int = 256
    discount: float = 0.995
    tau: float = 0.005
    max_grad_norm: float = 10.0
    flow_steps: int = 10
    hidden_widths: tuple = (64, 64)
    aggregation: str = "mean"
    total_steps: int = 30000
    eval_interval: int = 5000
    eval_episodes: int = 32
    log_interval: int = 500
    seed: int = 1
    radius_scale: float = 1.0
    gaussian_xi: float = 0.5
    fql_alpha: float = 10.0
    actor_through_flow: bool = False

    def __post_init__(self):
        if self.env not in ENVS:
            raise ConfigError(f"unknown env {self.env!r}; pick one of {sorted(ENVS)}")
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; pick one of {VARIANTS}"
            )
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(
                f"unknown aggregation {self.aggregation!r}; pick one of {AGGREGATIONS}"
            )
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        for name in ("learning_rate", "batch_size", "tau", "flow_steps",
                     "eval_episodes", "log_interval", "eval_interval", "radius_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigError("discount must lie in [0, 1]")
        if not 0.0 < self.gaussian_xi < 1.0:
            raise ConfigError("gaussian_xi must lie in (0, 1)")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be nonnegative")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        seen: dict = {}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {ln} is not key=value: {raw!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} on line {ln}")
            if key in seen:
                raise ConfigError(f"duplicate config key {key!r} on line {ln}")
            seen[key] = _coerce(key, val, known[key])
        for req in ("env", "variant", "seed", "total_steps"):
            if req not in seen:
                raise ConfigError(f"missing required config key {req!r}")
        return cls(**seen)


def _coerce(key: str, val: str, f) -> object:
    default = f.default
    try:
        if isinstance(default, bool):
            low = val.lower()
            if low not in ("true", "false"):
                raise ValueError(val)
            return low == "true"
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            return tuple(int(x) for x in val.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for config key {key!r}: {val!r}") from None
    return val


def latent_bound(cfg: TrainConfig, action_dim: int) -> float:
    """Radius of the latent support the run promises to stay inside."""
    if cfg.variant == "gaussian-xi":
        return float(np.sqrt(chi2.ppf(cfg.gaussian_xi, df=action_dim)))
    if cfg.variant == "cube":
        return math.sqrt(action_dim)  # the box's circumscribed ball
    return cfg.radius_scale * math.sqrt(action_dim)


# ---------------------------------------------------------------------------
# policy stack


class PolicyStack:
    """Every net of one run plus the routing decisions the variant implies."""

    def __init__(self, cfg: TrainConfig, state_dim: int, action_dim: int,
                 init_ss: np.random.SeedSequence):
        d, ds, hw = action_dim, state_dim, cfg.hidden_widths
        self.variant = cfg.variant
        self.action_dim = d
        self.state_dim = ds

        ball = BallDomain(d, cfg.radius_scale * math.sqrt(d))
        if cfg.variant == "cube":
            bc_domain = ng_domain = BallDomain(d, math.sqrt(d))
            bc_source = ng_source = "cube"
            ng_mode, ng_squash = "reflect-cube", None
        elif cfg.variant == "unbounded":
            bc_domain = ng_domain = ball
            bc_source = ng_source = "gaussian"
            ng_mode, ng_squash = "plain", None
        elif cfg.variant == "gaussian-xi":
            bc_domain, bc_source = ball, "gaussian"
            ng_domain = BallDomain(d, latent_bound(cfg, d))
            ng_source, ng_mode, ng_squash = "ball", "reflect-project", None
        elif cfg.variant == "tanh-ng":
            bc_domain = ng_domain = ball
            bc_source = ng_source = "ball"
            ng_mode, ng_squash = "plain", "tanh"
        elif cfg.variant == "billiard":
            bc_domain = ng_domain = ball
            bc_source = ng_source = "ball"
            ng_mode, ng_squash = "reflect-billiard", None
        else:
            bc_domain = ng_domain = ball
            bc_source = ng_source = "ball"
            ng_mode, ng_squash = "reflect-project", None

        self.bc_domain = bc_domain
        self.ng_domain = ng_domain

        # Fixed spawn order keeps net initializations aligned across variants.
        r_bc, r_ng, r_onestep, r_q1, r_q2 = (
            np.random.Generator(np.random.Philox(c)) for c in init_ss.spawn(5)
        )
        self.bc = BcFlowPolicy(
            Mlp((1 + d + ds, *hw, d), r_bc), bc_domain, ds,
            steps=cfg.flow_steps, source=bc_source,
        )
        if cfg.variant == "mlp-ng":
            self.gen = MlpNoiseGenerator(Mlp((ds, *hw, d), r_ng), ng_domain, ds)
        elif cfg.variant == "squashed-gaussian-ng":
            self.gen = SquashedGaussianNoiseGenerator(
                Mlp((ds, *hw, 2 * d), r_ng), ng_domain, ds
            )
        elif cfg.variant == "fql-alpha":
            self.gen = None
        else:
            self.gen = NoiseGenerator(
                Mlp((1 + d + ds, *hw, d), r_ng), ng_domain, ds,
                steps=cfg.flow_steps, mode=ng_mode, source=ng_source, squash=ng_squash,
            )
        self.onestep = OneStepPolicy(Mlp((d + ds, *hw, d), r_onestep), ds, d)
        self.critic = CriticPair(
            Mlp((ds + d, *hw, 1), r_q1, use_layer_norm=True),
            Mlp((ds + d, *hw, 1), r_q2, use_layer_norm=True),
            Mlp((ds + d, *hw, 1), r_q1, use_layer_norm=True),
            Mlp((ds + d, *hw, 1), r_q2, use_layer_norm=True),
            discount=cfg.discount,
            aggregation=cfg.aggregation,
        )
        self.action_through_flow = cfg.variant == "nodistill"
        self.actor_through_flow = cfg.actor_through_flow or cfg.variant == "nodistill"

    def draw_source(self, rng: np.random.Generator, n: int):
        """Source noise for the action path; None when the generator needs none."""
        if self.variant == "fql-alpha":
            return sample_ball(self.bc_domain, rng, n)
        return self.gen.sample_source(rng, n)

    def act(self, s: np.ndarray, rng: np.random.Generator):
        """(w, z, a) arrays for a state batch; w is zeros when nothing is drawn."""
        n = len(s)
        w = self.draw_source(rng, n)
        with no_grad():
            if self.variant == "fql-alpha":
                z = w
            else:
                z = self.gen.generate(s, w).data
            if self.action_through_flow:
                a = self.bc.action(s, z).data
            else:
                a = self.onestep.action(s, z).data
        if w is None:
            w = np.zeros((n, self.action_dim))
        return w, z, a

    def named_nets(self):
        nets = [("bc", self.bc.net)]
        if self.gen is not None:
            nets.append(("ng", self.gen.net))
        nets += [
            ("onestep", self.onestep.net),
            ("q1", self.critic.q1),
            ("q2", self.critic.q2),
            ("q1_target", self.critic.q1_target),
            ("q2_target", self.critic.q2_target),
        ]
        return nets

    def checkpoint_state(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in self.named_nets():
            for name, arr in net.state().items():
                out[f"{prefix}/{name}"] = arr
        return out

    def load_checkpoint_state(self, named: dict[str, np.ndarray]) -> None:
        for prefix, net in self.named_nets():
            sub = {
                name[len(prefix) + 1:]: arr
                for name, arr in named.items()
                if name.startswith(prefix + "/")
            }
            net.load_state(sub)


def build_stack(cfg: TrainConfig, state_dim: int, action_dim: int,
                init_ss: np.random.SeedSequence) -> PolicyStack:
    return PolicyStack(cfg, state_dim, action_dim, init_ss)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(stack: PolicyStack, env, episodes: int, rng: np.random.Generator):
    """Roll the stack for a fixed episode count, in lockstep across episodes.

    Actions are clipped into the box before the environment sees them and the
    clip events are counted; the returned dump holds one row per emitted action:
    source draw, latent, clipped action, latent norm.
    """
    states = np.stack([env.reset(rng) for _ in range(episodes)])
    active = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    dump_rows = []
    clipped = emitted = 0
    for _ in range(env.horizon):
        if not active.any():
            break
        w, z, a = stack.act(states, rng)
        a_clip = np.clip(a, -1.0, 1.0)
        over = (np.abs(a) > 1.0).any(axis=1)
        emitted += int(active.sum())
        clipped += int(over[active].sum())
        znorm = row_norms(z)
        dump_rows.append(
            np.concatenate([w, z, a_clip, znorm[:, None]], axis=1)[active]
        )
        for i in np.flatnonzero(active):
            s2, r, done = env.step(states[i], a_clip[i])
            returns[i] += r
            states[i] = s2
            if done:
                active[i] = False
    dump = np.concatenate(dump_rows, axis=0) if dump_rows else np.zeros((0, 3 * stack.action_dim + 1))
    return float(returns.mean()), returns, dump, clipped, emitted


def sample_header(action_dim: int) -> str:
    def axes(prefix):
        names = "xyz"
        return [
            f"{prefix}{names[i] if i < 3 else i}" for i in range(action_dim)
        ]

    return ",".join(axes("w") + axes("z") + axes("a") + ["znorm"])


# ---------------------------------------------------------------------------
# artifacts


@dataclass
class RunArtifacts:
    config: TrainConfig
    metrics: list
    samples: np.ndarray
    checkpoint: dict[str, np.ndarray]
    clipped: int
    emitted: int

    @property
    def final_eval(self) -> float:
        return self.metrics[-1]["eval_return"] if self.metrics else math.nan

    def metrics_csv(self) -> str:
        out = [METRICS_HEADER]
        for row in self.metrics:
            out.append(
                ",".join(
                    str(row["step"]) if k == "step" else repr(float(row[k]))
                    for k in METRICS_HEADER.split(",")
                )
            )
        return "\n".join(out) + "\n"

    def samples_csv(self) -> str:
        d = (self.samples.shape[1] - 1) // 3
        out = [sample_header(d)]
        for row in self.samples:
            out.append(",".join(repr(float(v)) for v in row))
        return "\n".join(out) + "\n"


def save_run(art: RunArtifacts, outdir) -> None:
    from pathlib import Path

    from .nn import save_checkpoint

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.txt").write_text(art.config.to_text())
    (outdir / "metrics.csv").write_text(art.metrics_csv())
    (outdir / "samples.csv").write_text(art.samples_csv())
    save_checkpoint(outdir / "checkpoint.rfck", art.checkpoint)


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: TransitionBatch, env):
        if dataset.s.shape[1] != env.state_dim:
            raise ConfigError(
                f"dataset state dim {dataset.s.shape[1]} does not match "
                f"env {env.name!r} state dim {env.state_dim}"
            )
        if dataset.a.shape[1] != env.action_dim:
            raise ConfigError(
                f"dataset action dim {dataset.a.shape[1]} does not match "
                f"env {env.name!r} action dim {env.action_dim}"
            )
        if len(dataset) == 0:
            raise ConfigError("dataset is empty")
        self.cfg = cfg
        self.dataset = dataset
        self.env = env

        init_ss, data_ss, bc_ss, ng_ss, critic_ss, eval_ss = (
            np.random.SeedSequence(cfg.seed).spawn(6)
        )
        self.stack = build_stack(cfg, env.state_dim, env.action_dim, init_ss)
        self.rng_data = np.random.Generator(np.random.Philox(data_ss))
        self.rng_bc = np.random.Generator(np.random.Philox(bc_ss))
        self.rng_ng = np.random.Generator(np.random.Philox(ng_ss))
        self.rng_critic = np.random.Generator(np.random.Philox(critic_ss))
        self.rng_eval = np.random.Generator(np.random.Philox(eval_ss))

        lr, mgn = cfg.learning_rate, cfg.max_grad_norm
        st = self.stack
        self.opt_critic = Adam(st.critic.parameters(), lr, max_grad_norm=mgn)
        self.opt_bc = Adam(st.bc.parameters(), lr, max_grad_norm=mgn)
        self.opt_onestep = (
            None if cfg.variant == "nodistill"
            else Adam(st.onestep.parameters(), lr, max_grad_norm=mgn)
        )
        self.opt_gen = (
            None if st.gen is None
            else Adam(st.gen.parameters(), lr, max_grad_norm=mgn)
        )

        self.metrics: list[dict] = []
        self.sample_blocks: list[np.ndarray] = []
        self.clipped = 0
        self.emitted = 0
        self.last_eval = math.nan

    # -- single updates; each zeroes exactly the group it trains ------------

    def update_critic(self, batch: TransitionBatch) -> float:
        _, _, a2 = self.stack.act(batch.s2, self.rng_critic)
        loss = self.stack.critic.td_loss(
            batch.s, batch.a, batch.r, batch.s2, batch.done, a2
        )
        zero_grads(self.stack.critic.parameters())
        backward(loss)
        self.opt_critic.step()
        return loss.item()

    def update_bc(self, batch: TransitionBatch) -> float:
        n = len(batch)
        z = self.stack.bc.sample_source(self.rng_bc, n)
        t = self.rng_bc.random(n)
        loss = bc_loss(self.stack.bc, batch.s, batch.a, z, t)
        zero_grads(self.stack.bc.parameters())
        backward(loss)
        self.opt_bc.step()
        return loss.item()

    def update_distill(self, batch: TransitionBatch) -> float:
        z = self.stack.bc.sample_source(self.rng_ng, len(batch))
        loss = distill_loss(self.stack.onestep, self.stack.bc, batch.s, z)
        zero_grads(self.stack.onestep.parameters())
        backward(loss)
        self.opt_onestep.step()
        return loss.item()

    def update_actor(self, batch: TransitionBatch) -> float:
        st = self.stack
        if self.cfg.variant == "fql-alpha":
            z = sample_ball(st.bc_domain, self.rng_ng, len(batch))
            loss = fql_onestep_loss(
                st.onestep, st.bc, st.critic, batch.s, z, self.cfg.fql_alpha
            )
            zero_grads(st.onestep.parameters())
            backward(loss)
            self.opt_onestep.step()
            return loss.item()
        w = st.gen.sample_source(self.rng_ng, len(batch))
        loss = actor_loss(
            st.gen, st.onestep, st.critic, batch.s, w,
            bc_policy=st.bc if st.actor_through_flow else None,
        )
        zero_grads(st.gen.parameters())
        backward(loss)
        self.opt_gen.step()
        return loss.item()

    def update_targets(self) -> None:
        self.stack.critic.polyak(self.cfg.tau)

    # -- loop ----------------------------------------------------------------

    def step(self, k: int) -> dict:
        idx = self.rng_data.integers(0, len(self.dataset), self.cfg.batch_size)
        batch = self.dataset.take(idx)
        losses = {"loss_critic": self.update_critic(batch),
                  "loss_bc": self.update_bc(batch)}
        if self.cfg.variant in ("nodistill", "fql-alpha"):
            losses["loss_distill"] = 0.0
        else:
            losses["loss_distill"] = self.update_distill(batch)
        losses["loss_actor"] = self.update_actor(batch)
        self.update_targets()
        for name, v in losses.items():
            if not math.isfinite(v):
                raise NumericError(f"non-finite {name} at step {k}")
        return losses

    def run_eval(self) -> float:
        mean_ret, _, dump, clipped, emitted = evaluate(
            self.stack, self.env, self.cfg.eval_episodes, self.rng_eval
        )
        self.sample_blocks.append(dump)
        self.clipped += clipped
        self.emitted += emitted
        self.last_eval = mean_ret
        return mean_ret

    def clip_rate(self) -> float:
        return self.clipped / self.emitted if self.emitted else 0.0

    def run(self) -> RunArtifacts:
        cfg = self.cfg
        if cfg.total_steps > 0:
            self.run_eval()  # baseline of the freshly initialized stack
        for k in range(1, cfg.total_steps + 1):
            losses = self.step(k)
            if k % cfg.eval_interval == 0 or k == cfg.total_steps:
                self.run_eval()
            if k % cfg.log_interval == 0 or k == cfg.total_steps:
                row = {"step": k, **losses,
                       "eval_return": self.last_eval,
                       "clip_rate": self.clip_rate()}
                self.metrics.append(row)
        samples = (
            np.concatenate(self.sample_blocks, axis=0)
            if self.sample_blocks
            else np.zeros((0, 3 * self.stack.action_dim + 1))
        )
        return RunArtifacts(cfg, self.metrics, samples,
                            self.stack.checkpoint_state(),
                            self.clipped, self.emitted)


def train(cfg: TrainConfig, dataset: TransitionBatch, env) -> RunArtifacts:
    return Trainer(cfg, dataset, env).run()
