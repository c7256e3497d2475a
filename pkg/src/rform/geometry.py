"""Bounded noise domains and Euler-style flow integrators.

The reflected integrator is the piece that keeps latents inside the ball: after a
plain Euler proposal, any row that left the ball is pulled back by projecting out
the boundary-normal component. The projected point equals <z_k, n> n with
n = zhat / ||zhat||, which is algebraically the same as zhat - <v dt, n> n but is
numerically non-expansive; a final per-row rescale (a factor within ~1e-16 of 1)
guards the ||z_{k+1}|| <= ||z_k|| invariant against last-ulp rounding. The branch
test is non-strict: a proposal exactly on the boundary is kept as is.

All integrators evaluate the velocity once per step at the current iterate, with
step size exactly 1/N. The Tensor-valued entry points stay on the autodiff tape
end to end; each also has a tape-free twin (`*_np`) used on sampling paths where
no gradient is wanted, with identical float64 arithmetic step for step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    Tensor,
    _acc,
    _make,
    add,
    as_tensor,
    cube_fold,
    div,
    dot_rows,
    mul,
    neg,
    norm_rows,
    scale,
    sqrt,
    sub,
    where_mask,
)
from .errors import NumericError, PreconditionError

VelocityField = Callable[[float, Tensor], Tensor]
# the tape-free twins call a plain-array velocity instead
VelocityFieldNp = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BallDomain:
    """Closed origin-centered ball in R^dim."""

    dim: int
    radius: float

    @classmethod
    def for_box(cls, dim: int, radius_scale: float = 1.0) -> "BallDomain":
        """Smallest ball containing the [-1, 1]^dim action box, optionally rescaled."""
        return cls(dim, radius_scale * float(np.sqrt(dim)))

    def contains(self, z: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Row-wise membership test with a relative tolerance on the radius."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return row_norms(z) <= self.radius * (1.0 + tol)


def row_norms(z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", z, z))


def sample_ball(domain: BallDomain, rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draws from the ball: normalized Gaussian direction times U^(1/d) radius."""
    g = rng.standard_normal((n, domain.dim))
    nrm = np.maximum(row_norms(g), 1e-300)[:, None]
    r = domain.radius * rng.random(n) ** (1.0 / domain.dim)
    return g * (r[:, None] / nrm)


def sample_cube(dim: int, rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draws from the [-1, 1]^dim box."""
    return rng.uniform(-1.0, 1.0, (n, dim))


@dataclass(frozen=True)
class IntegratorConfig:
    steps: int = 10
    mode: str = "plain"  # plain | reflect-project | reflect-cube | reflect-billiard
    detach_reflection: bool = False


def _check_finite(vdata: np.ndarray, k: int) -> None:
    if not np.isfinite(vdata).all():
        raise NumericError(f"non-finite velocity output at integration step {k}")


def euler_integrate(v: VelocityField, z0, cfg: IntegratorConfig) -> Tensor:
    """Plain Euler: z <- z + v(k/N, z) / N for k = 0..N-1."""
    z = as_tensor(z0)
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        vel = v(k * dt, z)
        _check_finite(vel.data, k)
        z = add(z, scale(vel, dt))
    return z


def _project_escapees(z: np.ndarray, vdt: np.ndarray, radius: float):
    """Forward arithmetic of the projection step on plain arrays.

    Returns (out, aux): aux is None when every proposal stayed inside (out is
    then the plain Euler result), else the intermediates the backward needs.
    """
    zhat = z + vdt
    nrm = row_norms(zhat)[:, None]
    outside = nrm > radius
    if not outside.any():
        return zhat, None
    # rows that stay inside get a constant denominator so their (discarded)
    # branch stays finite
    safe = np.where(outside, nrm, radius)
    n = zhat / safe
    alpha = np.einsum("ij,ij->i", z, n)[:, None]
    out = np.where(outside, alpha * n, zhat)
    # ulp guard: the projection is non-expansive in exact arithmetic; rescale the
    # handful of rows where rounding pushed ||out|| a last-place unit past ||z||.
    # The factor is within ~1e-16 of 1 and is left out of the backward.
    prev = row_norms(z)
    new = row_norms(out)
    fired = outside[:, 0] & (new > prev)
    if fired.any():
        out[fired] *= (prev[fired] / new[fired])[:, None]
    return out, (outside, safe, n, alpha)


def reflect_project_step(
    z: Tensor, vdt: Tensor, domain: BallDomain, detach_reflection: bool = False
) -> Tensor:
    """One bounded step: Euler proposal, then boundary-normal projection of escapees.

    A single tape node: the backward applies the projection Jacobian analytically
    on the rows that fired and is the identity on the rest. detach_reflection
    treats the pullback correction as constant, making the backward the identity
    everywhere (straight-through).
    """
    z, vdt = as_tensor(z), as_tensor(vdt)
    out, aux = _project_escapees(z.data, vdt.data, domain.radius)
    if aux is None:
        return add(z, vdt)
    outside, safe, n, alpha = aux
    zdat = z.data

    if detach_reflection:

        def bw(g):
            _acc(z, g, False)
            _acc(vdt, g, False)

    else:

        def bw(g):
            # projected rows: out = <z, n> n with n = zhat/||zhat||, zhat = z + vdt;
            # d out = n (n . dz) + (I - n n^T) q . d zhat, q = ((g.n) z + <z,n> g)/||zhat||
            gn = np.einsum("ij,ij->i", g, n)[:, None]
            q = (gn * zdat + alpha * g) / safe
            w = q - np.einsum("ij,ij->i", q, n)[:, None] * n
            _acc(z, np.where(outside, gn * n + w, g), True)
            _acc(vdt, np.where(outside, w, g), True)

    return _make(out, (z, vdt), bw)


def reflect_billiard_step(z: Tensor, vdt: Tensor, domain: BallDomain) -> Tensor:
    """One bounce step: advance to the boundary hit, reflect the remaining
    displacement about the tangent plane, and clip a second exit to the boundary."""
    l = domain.radius
    zhat = add(z, vdt)
    outside = (row_norms(zhat.data) > l)[:, None]
    if not outside.any():
        return zhat
    one = Tensor(np.float64(1.0))
    a = dot_rows(vdt, vdt)
    a_safe = where_mask(outside, a, one)  # escaping rows moved, so a > 0 there
    b = scale(dot_rows(z, vdt), 2.0)
    c = sub(dot_rows(z, z), Tensor(np.float64(l * l)))
    disc = sub(mul(b, b), scale(mul(a_safe, c), 4.0))
    disc = where_mask(disc.data >= 0.0, disc, Tensor(np.float64(0.0)))
    thit = div(add(neg(b), sqrt(disc)), scale(a_safe, 2.0))
    p = add(z, mul(thit, vdt))  # boundary point, so p / l is the unit normal
    n = scale(p, 1.0 / l)
    rem = mul(sub(one, thit), vdt)
    refl = sub(rem, scale(mul(dot_rows(rem, n), n), 2.0))
    out = add(p, refl)
    exits_again = (row_norms(out.data) > l)[:, None]
    if exits_again.any():
        nrm = norm_rows(out)
        safe = where_mask(exits_again, nrm, one)
        out = where_mask(exits_again, scale(div(out, safe), l), out)
    return where_mask(outside, out, zhat)


def reflect_cube_step(zhat: Tensor) -> Tensor:
    """Fold a plain Euler proposal back into the [-1, 1]^d box."""
    return cube_fold(zhat)


def _check_reflect_start(z: np.ndarray, domain: BallDomain, cfg: IntegratorConfig) -> None:
    if cfg.mode == "reflect-cube":
        if np.abs(z).max(initial=0.0) > 1.0 + 1e-12:
            raise PreconditionError("start point outside the [-1, 1]^d box")
    elif cfg.mode in ("reflect-project", "reflect-billiard"):
        if not domain.contains(z, tol=1e-12).all():
            raise PreconditionError(
                f"start point outside the radius-{domain.radius:g} ball"
            )
    else:
        raise PreconditionError(f"not a reflecting integrator mode: {cfg.mode!r}")


def reflected_euler_integrate(
    v: VelocityField, z0, domain: BallDomain, cfg: IntegratorConfig
) -> Tensor:
    """Euler with per-step reflection; same velocity evaluation count as plain Euler.

    Mode reflect-project keeps the iterate in the ball by tangential projection,
    reflect-billiard by a specular bounce, reflect-cube folds into the box.
    The start must lie inside the domain.
    """
    z = as_tensor(z0)
    _check_reflect_start(z.data, domain, cfg)
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        vel = v(k * dt, z)
        _check_finite(vel.data, k)
        vdt = scale(vel, dt)
        if cfg.mode == "reflect-project":
            z = reflect_project_step(z, vdt, domain, cfg.detach_reflection)
        elif cfg.mode == "reflect-billiard":
            z = reflect_billiard_step(z, vdt, domain)
        else:
            z = reflect_cube_step(add(z, vdt))
    return z


def integrate(v: VelocityField, z0, domain: BallDomain | None, cfg: IntegratorConfig) -> Tensor:
    """Dispatch on cfg.mode; plain Euler ignores the domain."""
    if cfg.mode == "plain":
        return euler_integrate(v, z0, cfg)
    return reflected_euler_integrate(v, z0, domain, cfg)


# ---------------------------------------------------------------------------
# tape-free twins: same arithmetic on plain arrays, for no-gradient sampling


def _reflect_billiard_np(z: np.ndarray, vdt: np.ndarray, l: float) -> np.ndarray:
    zhat = z + vdt
    outside = (row_norms(zhat) > l)[:, None]
    if not outside.any():
        return zhat
    a = np.einsum("ij,ij->i", vdt, vdt)[:, None]
    a_safe = np.where(outside, a, 1.0)
    b = np.einsum("ij,ij->i", z, vdt)[:, None] * 2.0
    c = np.einsum("ij,ij->i", z, z)[:, None] - np.float64(l * l)
    disc = b * b - (a_safe * c) * 4.0
    disc = np.where(disc >= 0.0, disc, 0.0)
    thit = ((-b) + np.sqrt(disc)) / (a_safe * 2.0)
    p = z + thit * vdt
    n = p * (1.0 / l)
    rem = (1.0 - thit) * vdt
    refl = rem - (np.einsum("ij,ij->i", rem, n)[:, None] * n) * 2.0
    out = p + refl
    exits_again = (row_norms(out) > l)[:, None]
    if exits_again.any():
        nrm = row_norms(out)[:, None]
        safe = np.where(exits_again, nrm, 1.0)
        out = np.where(exits_again, (out / safe) * l, out)
    return np.where(outside, out, zhat)


def euler_integrate_np(v: VelocityFieldNp, z0: np.ndarray, cfg: IntegratorConfig) -> np.ndarray:
    z = np.asarray(z0, dtype=np.float64)
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        vel = v(k * dt, z)
        _check_finite(vel, k)
        z = z + vel * dt
    return z


def reflected_euler_integrate_np(
    v: VelocityFieldNp, z0: np.ndarray, domain: BallDomain, cfg: IntegratorConfig
) -> np.ndarray:
    z = np.asarray(z0, dtype=np.float64)
    _check_reflect_start(z, domain, cfg)
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        vel = v(k * dt, z)
        _check_finite(vel, k)
        vdt = vel * dt
        if cfg.mode == "reflect-project":
            z, _ = _project_escapees(z, vdt, domain.radius)
        elif cfg.mode == "reflect-billiard":
            z = _reflect_billiard_np(z, vdt, domain.radius)
        else:
            m = np.mod((z + vdt) + 1.0, 4.0) - 2.0
            z = 1.0 - np.abs(m)
    return z


def integrate_np(
    v: VelocityFieldNp, z0: np.ndarray, domain: BallDomain | None, cfg: IntegratorConfig
) -> np.ndarray:
    if cfg.mode == "plain":
        return euler_integrate_np(v, z0, cfg)
    return reflected_euler_integrate_np(v, z0, domain, cfg)
