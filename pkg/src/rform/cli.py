"""Command-line surface: dataset generation, training, evaluation, audit, plots.

Every command is deterministic given its flags and seed, exits 0 on success,
and reports failures as one categorized line on stderr (exit 2). The audit
command exits 1 when a run violates its latent-norm or clip-rate bounds with
the run itself being well formed.

RFORM_LOG_LEVEL (error | info | debug) sets logging verbosity; default info.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields, replace
from io import StringIO
from pathlib import Path

import numpy as np

from .envs import BEHAVIORS, generate_dataset, make_env, read_dataset, write_dataset
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NumericError,
    PreconditionError,
)
from .nn import load_checkpoint
from .trainer import (
    METRICS_HEADER,
    TrainConfig,
    _coerce,
    build_stack,
    evaluate,
    latent_bound,
    save_run,
)
from .trainer import train as run_training

log = logging.getLogger("rform.cli")

CLIP_RATE_BOUND = 1e-3
NORM_SLACK = 1e-12

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("RFORM_LOG_LEVEL", "info")
    if name not in _LOG_LEVELS:
        raise ConfigError(
            f"RFORM_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {name!r}"
        )
    logging.basicConfig(
        level=_LOG_LEVELS[name],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


# ---------------------------------------------------------------------------
# run-directory readers


def _read_config(run: Path) -> TrainConfig:
    path = run / "config.txt"
    if not path.is_file():
        raise PreconditionError(f"no config.txt in run directory {run}")
    return TrainConfig.from_text(path.read_text())


def _read_samples(run: Path) -> tuple[str, np.ndarray]:
    """Sample dump as (raw text, float array); rows may be empty."""
    path = run / "samples.csv"
    if not path.is_file():
        raise PreconditionError(f"no samples.csv in run directory {run}")
    text = path.read_text()
    header, _, body = text.partition("\n")
    width = len(header.split(","))
    if body.strip():
        try:
            rows = np.loadtxt(StringIO(body), delimiter=",", ndmin=2)
        except ValueError:
            raise FormatError(f"malformed sample dump {path}") from None
    else:
        rows = np.zeros((0, width))
    if rows.shape[1] != width or (width - 1) % 3:
        raise FormatError(f"malformed sample dump {path}")
    return text, rows


def _read_final_clip_rate(run: Path) -> float:
    path = run / "metrics.csv"
    if not path.is_file():
        raise PreconditionError(f"no metrics.csv in run directory {run}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise FormatError(f"malformed metrics header in {path}")
    if len(lines) < 2:
        raise PreconditionError(f"metrics.csv in {run} has no logged steps")
    col = METRICS_HEADER.split(",").index("clip_rate")
    return float(lines[-1].split(",")[col])


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args) -> int:
    env = make_env(args.env)
    batch = generate_dataset(env, BEHAVIORS[env.name], args.episodes, args.seed)
    write_dataset(batch, args.out)
    log.info("rolled %d episodes of %s", args.episodes, env.name)
    print(
        f"wrote {len(batch)} transitions (state dim {env.state_dim}, "
        f"action dim {env.action_dim}) to {args.out}"
    )
    return 0


def _load_train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_text(Path(args.config).read_text())
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        overrides["variant"] = args.variant
    return replace(cfg, **overrides) if overrides else cfg


def _run_one(cfg: TrainConfig, data_path, outdir: Path):
    env = make_env(cfg.env)
    dataset = read_dataset(data_path)
    log.info(
        "training %s on %s: %d transitions, %d steps",
        cfg.variant, cfg.env, len(dataset), cfg.total_steps,
    )
    art = run_training(cfg, dataset, env)
    for row in art.metrics:
        log.debug("step %d: %s", row["step"], row)
    save_run(art, outdir)
    return art


def _cmd_train(args) -> int:
    cfg = _load_train_config(args)
    art = _run_one(cfg, args.data, Path(args.out))
    rate = art.clipped / art.emitted if art.emitted else 0.0
    print(
        f"run complete: final eval return {art.final_eval!r}, "
        f"clip rate {rate!r}, artifacts in {args.out}"
    )
    return 0


def _cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = _read_config(run)
    env = make_env(cfg.env)
    stack = build_stack(
        cfg, env.state_dim, env.action_dim, np.random.SeedSequence(cfg.seed).spawn(6)[0]
    )
    stack.load_checkpoint_state(load_checkpoint(run / "checkpoint.rfck"))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed)))
    mean_ret, _, _, clipped, emitted = evaluate(stack, env, args.episodes, rng)
    rate = clipped / emitted if emitted else 0.0
    print(
        f"eval return {mean_ret!r} over {args.episodes} episodes "
        f"(clip rate {rate!r})"
    )
    return 0


def _cmd_audit(args) -> int:
    """Check a run's dumped latents against the bound its config promises."""
    run = Path(args.run)
    cfg = _read_config(run)
    _, rows = _read_samples(run)
    if len(rows) == 0:
        raise PreconditionError(f"sample dump in {run} is empty")
    d = (rows.shape[1] - 1) // 3
    norms = rows[:, 3 * d]
    bound = latent_bound(cfg, d)
    limit = bound * (1.0 + NORM_SLACK)
    clip_rate = _read_final_clip_rate(run)

    print(f"samples audited: {len(rows)}")
    print(f"max latent norm: {float(norms.max())!r} (bound {limit!r})")
    print(f"clip rate: {clip_rate!r} (bound {CLIP_RATE_BOUND!r})")
    ok = True
    over = np.flatnonzero(norms > limit)
    if len(over):
        k = int(over[0])
        print(f"latent norm {float(norms[k])!r} at sample row {k + 1} exceeds the bound")
        ok = False
    if clip_rate >= CLIP_RATE_BOUND:
        print(f"clip rate {clip_rate!r} reaches the bound")
        ok = False
    print("audit: PASS" if ok else "audit: FAIL")
    return 0 if ok else 1


def _cmd_viz(args) -> int:
    run = Path(args.run)
    cfg = _read_config(run)
    text, rows = _read_samples(run)
    if len(rows) == 0:
        raise PreconditionError(f"sample dump in {run} is empty")
    d = (rows.shape[1] - 1) // 3
    if d != 2:
        raise PreconditionError(f"plotting needs 2-d actions, dump has {d}-d")
    out = Path(args.out)
    svg_path = out if out.suffix == ".svg" else out.with_suffix(".svg")
    csv_path = svg_path.with_suffix(".csv")
    svg_path.write_text(_svg_scatter(rows, latent_bound(cfg, d)))
    csv_path.write_text(text)
    print(f"wrote {svg_path} and {csv_path}")
    return 0


def _cmd_sweep(args) -> int:
    base = _load_train_config(args)
    known = {f.name: f for f in fields(TrainConfig)}
    if args.param not in known:
        raise ConfigError(f"unknown config key {args.param!r}")
    if isinstance(known[args.param].default, tuple):
        raise ConfigError(f"cannot sweep tuple-valued key {args.param!r}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(args.out)
    for raw in values:
        cfg = replace(base, **{args.param: _coerce(args.param, raw, known[args.param])})
        art = _run_one(cfg, args.data, out / f"{args.param}={raw}")
        print(f"{args.param}={raw}: final eval return {art.final_eval!r}")
    return 0


# ---------------------------------------------------------------------------
# SVG emission: actions and latents over the support boundary, fixed viewBox
# mapping [-1.1 max(l, 1), 1.1 max(l, 1)]^2 to pixels with y pointing up.

_SVG_SIZE = 480


def _svg_scatter(rows: np.ndarray, bound: float) -> str:
    half = 1.1 * max(bound, 1.0)
    scale = _SVG_SIZE / (2.0 * half)

    def px(x: float) -> str:
        return f"{(x + half) * scale:.3f}"

    def py(y: float) -> str:
        return f"{(half - y) * scale:.3f}"

    d = (rows.shape[1] - 1) // 3
    z, a = rows[:, d:2 * d], rows[:, 2 * d:3 * d]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {_SVG_SIZE} {_SVG_SIZE}">',
        "<style>"
        ".latent{fill:#c44e52;fill-opacity:.45}"
        ".action{fill:#4c72b0;fill-opacity:.45}"
        ".boundary{fill:none;stroke:#333;stroke-width:1.5}"
        ".box{fill:none;stroke:#999;stroke-width:1;stroke-dasharray:4 3}"
        "</style>",
        f'<rect class="box" x="{px(-1.0)}" y="{py(1.0)}" '
        f'width="{2.0 * scale:.3f}" height="{2.0 * scale:.3f}"/>',
        f'<circle class="boundary" cx="{px(0.0)}" cy="{py(0.0)}" r="{bound * scale:.3f}"/>',
    ]
    for x, y in z:
        parts.append(f'<circle class="latent" cx="{px(x)}" cy="{py(y)}" r="3"/>')
    for x, y in a:
        parts.append(f'<circle class="action" cx="{px(x)}" cy="{py(y)}" r="3"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rform",
        description="Train and inspect bounded-support flow policies on desk-scale tasks.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="roll a behavior policy into a dataset file")
    g.add_argument("--env", required=True)
    g.add_argument("--episodes", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="run the training loop and write artifacts")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--variant", default=None, help="override the config variant")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="roll a saved policy and report its return")
    e.add_argument("--run", required=True)
    e.add_argument("--episodes", type=_positive_int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("audit", help="verify a run's latent norms and clip rate")
    a.add_argument("--run", required=True)
    a.set_defaults(func=_cmd_audit)

    v = sub.add_parser("viz", help="plot a run's actions and latents as an SVG")
    v.add_argument("--run", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=_cmd_viz)

    s = sub.add_parser("sweep", help="train once per value of one config key")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True, help="comma-separated value list")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.set_defaults(func=_cmd_sweep)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (
        ConfigError,
        ContractError,
        DimensionError,
        FormatError,
        NumericError,
        PreconditionError,
    ) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"IOError: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
