"""``armkit`` command line.

Every command reads an optional TOML config, derives all randomness from
``--seed`` and writes JSON (sorted keys) and CSV payloads plus a
``<command>_manifest.json`` listing them. ``--no-timestamp`` drops the
wall-clock fields so re-runs are byte-identical.
"""

from __future__ import annotations

import datetime as _dt
import functools
import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, analytics, bench, config as cfgmod, mless, theory
from .arm import ArmHook, near_zero_threshold
from .model import Greedy, HookSpec, Sample, decode, forward, init_weights
from .tensor import RngStream
from .weights_io import WeightFileError, load_weights, save_weights


class Run:
    """Collects emitted files and writes the manifest."""

    def __init__(self, command: str, cfg: cfgmod.ExperimentConfig, no_timestamp: bool):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []
        self.volatile: set[Path] = set()  # wall-clock payloads, listed without a hash
        self.no_timestamp = no_timestamp
        self.started = None if no_timestamp else _now()

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(dumps(obj))
        return p

    def _entry(self, p: Path) -> dict:
        rel = p.relative_to(self.out).as_posix()
        if p in self.volatile:
            return {"path": rel, "volatile": True}
        return {"path": rel, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}

    def finish(self, status: str = "ok") -> None:
        man = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "tool_version": __version__,
            "seed": self.cfg.seed,
            "status": status,
            "files": [self._entry(p) for p in self.files],
        }
        if not self.no_timestamp:
            man["started_at"] = self.started
            man["finished_at"] = _now()
        (self.out / f"{self.command}_manifest.json").write_text(dumps(man))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_default) + "\n"


def common(fn):
    """Options shared by every command."""
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="TOML experiment config."),
        click.option("--seed", type=int, default=None, help="Top-level seed."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                     help="Output directory."),
        click.option("--preset", type=click.Choice(sorted(cfgmod.PRESETS)), default=None,
                     help="ARM hyperparameter preset."),
        click.option("--parallel", type=int, default=0,
                     help="Worker threads where results reduce in a fixed order."),
        click.option("--no-timestamp", is_flag=True, help="Omit wall-clock fields."),
    ]
    for o in reversed(opts):
        fn = o(fn)

    @functools.wraps(fn)
    def wrapper(config_path, seed, out_dir, preset, parallel, no_timestamp, **kw):
        try:
            cfg = cfgmod.load(config_path, seed=seed, preset=preset, output_dir=out_dir)
        except (cfgmod.ConfigError, OSError) as exc:
            raise click.UsageError(str(exc))
        run = Run(fn.__name__.removeprefix("cmd_").replace("_", "-"), cfg, no_timestamp)
        try:
            status = fn(run, parallel=parallel, **kw)
        except (ValueError, WeightFileError) as exc:
            click.echo(f"error: {exc}", err=True)
            run.finish("error")
            sys.exit(1)
        run.finish(status or "ok")
        if status == "fail":
            sys.exit(1)

    return wrapper


def _weights(cfg: cfgmod.ExperimentConfig):
    if cfg.weights is not None:
        weights, mcfg = load_weights(cfg.weights)
        return weights, mcfg
    return init_weights(cfg.model, cfgmod.subseed(cfg.seed, "weights")), cfg.model


def _prompt(cfg, mcfg):
    pieces, ids = analytics.tokenize(cfg.run.prompt, mcfg.vocab_size)
    if not ids:
        raise ValueError("prompt has no tokens")
    return pieces, ids


def _hook(cfg):
    if not cfg.arm.enabled:
        return None, None
    h = ArmHook(cfg.arm_config(), prompt_only=cfg.arm.prompt_only)
    return h, HookSpec(h, 0)


def _reports(h):
    return [] if h is None else [json.loads(r.to_json()) for r in h.reports]


@click.group()
@click.version_option(__version__)
def main():
    """ARM toolkit: tiny transformer, activation redistribution and checks."""


@main.command("init-model")
@common
def cmd_init_model(run: Run, parallel=0):
    """Write a seeded weight container."""
    weights = init_weights(run.cfg.model, cfgmod.subseed(run.cfg.seed, "weights"))
    for p in save_weights(run.out / "weights", weights, run.cfg.model):
        run.files.append(p)


@main.command("forward")
@common
def cmd_forward(run: Run, parallel=0):
    """One forward pass over the prompt, with the ARM hook if enabled."""
    weights, mcfg = _weights(run.cfg)
    pieces, ids = _prompt(run.cfg, mcfg)
    h, spec = _hook(run.cfg)
    logits, tr = forward(ids, weights, mcfg, hook=spec)
    l0 = tr.layers[0]
    run.json("forward.json", {
        "tokens": ids,
        "pieces": pieces,
        "argmax": np.argmax(logits, axis=1),
        "logits_l2": [float(v) for v in np.linalg.norm(logits.astype(np.float64), axis=1)],
        "layer0_metrics": json.loads(
            analytics.activation_metrics(l0.act_pre, l0.act_post,
                                         run.cfg.analysis.quantile,
                                         run.cfg.analysis.n_bins).to_json()),
        "arm_enabled": run.cfg.arm.enabled,
    })
    if h is not None:
        run.json("arm_reports.json", _reports(h))
    analytics.write_profile_csv(run.path("attention_profile.csv"),
                                analytics.column_mean_below_diag(l0.attn))


@main.command("decode")
@common
def cmd_decode(run: Run, parallel=0):
    """Generate a continuation of the prompt."""
    weights, mcfg = _weights(run.cfg)
    _, ids = _prompt(run.cfg, mcfg)
    h, spec = _hook(run.cfg)
    r = run.cfg.run
    if r.temperature > 0:
        policy = Sample(r.temperature, r.top_p, cfgmod.subseed(run.cfg.seed, "sample"))
    else:
        policy = Greedy()
    seq = decode(ids, weights, mcfg, hook=spec, policy=policy, max_new=r.max_new)
    run.json("decode.json", {
        "prompt_tokens": ids,
        "generated_tokens": seq[len(ids):],
        "policy": "greedy" if isinstance(policy, Greedy) else "sample",
        "arm_enabled": run.cfg.arm.enabled,
    })
    if h is not None:
        run.json("arm_reports.json", _reports(h))


@main.command("mless")
@common
def cmd_mless(run: Run, parallel=0):
    """Filler insertion: affine-model residuals, coherence and a length sweep."""
    weights, mcfg = _weights(run.cfg)
    _, ids = _prompt(run.cfg, mcfg)
    ins = run.cfg.insertion
    if ins.position == "between" and ins.boundary_index is None:
        raise click.UsageError("position 'between' needs insertion.boundary_index")
    spec = mless.InsertionSpec(token_id=ins.token_id, count=ins.count, position=ins.position,
                               boundary_index=ins.boundary_index,
                               seed=cfgmod.subseed(run.cfg.seed, "insertion"))
    res = mless.emulate_vs_actual(ids, spec, weights, mcfg, ins.layer)
    out = {"spec": {"token_id": ins.token_id, "count": ins.count, "position": ins.position,
                    "boundary_index": ins.boundary_index, "layer": ins.layer},
           "summary": res.summary(),
           "residual_per_token": [float(v) for v in res.residuals.mean(axis=0)]}
    if ins.count >= 2:
        # same slots filled with distinct random tokens
        u = RngStream(cfgmod.subseed(run.cfg.seed, "insertion")).random_array(ins.count)
        fill = tuple(int(t) for t in np.floor(u * mcfg.vocab_size))
        rand = mless.emulate_vs_actual(
            ids, mless.InsertionSpec(count=ins.count, position=ins.position,
                                     boundary_index=ins.boundary_index, seed=spec.seed,
                                     fillers=fill), weights, mcfg, ins.layer)
        out["contrast"] = {"repeated_coherence": res.coherence,
                           "random_coherence": rand.coherence,
                           "random_fillers": list(fill)}
    rows = mless.sweep_lengths(ids, ins.token_id, ins.counts, weights, mcfg,
                               ins.position, ins.boundary_index, ins.layer)
    mless.write_sweep_csv(run.path("sweep.csv"), rows)
    out["sweep_flags"] = mless.sweep_flags(rows)
    run.json("emulation.json", out)


@main.command("analyze")
@common
def cmd_analyze(run: Run, parallel=0):
    """Histograms, distribution metrics, attention profile, token classes, diversity."""
    cfg = run.cfg
    an = cfg.analysis
    weights, mcfg = _weights(cfg)
    pieces, ids = _prompt(cfg, mcfg)
    h, spec = _hook(cfg)
    _, tr = forward(ids, weights, mcfg, hook=spec)
    l0 = tr.layers[0]
    before, after = l0.act_pre, l0.act_post
    rng_ = analytics.symmetric_range(np.concatenate([before.ravel(), after.ravel()]))
    for name, acts in (("hist_before.csv", before), ("hist_after.csv", after)):
        edges, counts = analytics.histogram(acts, an.n_bins, rng_)
        analytics.write_histogram_csv(run.path(name), edges, counts)
    m_after = analytics.activation_metrics(before, after, an.quantile, an.n_bins)
    m_before = analytics.activation_metrics(before, before, an.quantile, an.n_bins)
    run.path("metrics.json").write_text(dumps(json.loads(m_after.to_json())))
    run.path("metrics_baseline.json").write_text(dumps(json.loads(m_before.to_json())))
    analytics.write_profile_csv(run.path("attention_profile.csv"),
                                analytics.column_mean_below_diag(l0.attn))
    eps = an.epsilon if an.epsilon is not None else near_zero_threshold(before, cfg.arm_config())
    _, tr0 = forward(ids, weights, mcfg)
    run.json("token_classes.json", {
        "epsilon": eps,
        "proportions": analytics.near_zero_proportion_by_class(tr0, pieces, eps),
        "counts": {c: sum(analytics.classify_token(p) == c for p in pieces)
                   for c in analytics.TOKEN_CLASSES},
    })
    div = {}
    for label, use_arm in (("baseline", False), ("arm", True)):
        if use_arm and not cfg.arm.enabled:
            continue
        gens = []
        for i in range(an.n_samples):
            hs = HookSpec(ArmHook(cfg.arm_config()), 0) if use_arm else None
            pol = Sample(1.0, 1.0, cfgmod.subseed(cfg.seed, "sample") ^ i)
            gens.append(decode(ids, weights, mcfg, hook=hs, policy=pol,
                               max_new=cfg.run.max_new)[len(ids):])
        d = analytics.ngram_diversity(gens, an.ngram_n)
        div[label] = {"distinct_n": d.distinct_n, "total_n": d.total_n, "ratio": d.ratio}
    run.json("diversity.json", {"n": an.ngram_n, **div})
    ex = theory.redistribution_experiment(
        weights, mcfg, ids, an.lam, an.bias_scale, max(an.n_samples, 1),
        cfgmod.subseed(cfg.seed, "experiment"), an.quantile, an.n_bins, parallel)
    run.json("affine_redistribution.json", {
        "lam": an.lam, "bias_scale": an.bias_scale,
        "before": json.loads(ex.before.to_json()),
        "after": json.loads(ex.after.to_json()),
    })


@main.command("verify-theory")
@common
@click.option("--tol", type=float, default=None, help="Override every check tolerance.")
def cmd_verify_theory(run: Run, parallel=0, tol=None):
    """Run every numeric check; exit 1 if any fails."""
    th = run.cfg.theory
    checks = theory.verify_all(run.cfg.seed, th.n_samples, tol, th.jacobian_points)
    run.path("theory.json").write_text(theory.checks_to_json(checks))
    failed = [c.check_name for c in checks if not c.passed]
    for c in checks:
        click.echo(f"{'PASS' if c.passed else 'FAIL'} {c.check_name} "
                   f"err={c.rel_error:.3g} tol={c.tol:g}")
    return "fail" if failed else "ok"


@main.command("bench-overhead")
@common
def cmd_bench_overhead(run: Run, parallel=0):
    """Median ARM time over median MLP-block time per model width."""
    b = run.cfg.bench
    arm_cfg = run.cfg.arm_config()
    rows = []
    for d in b.d_models:
        r = bench.measure(d, b.ff_mult * d, b.seq_len, arm_cfg, run.cfg.arm.enabled,
                          b.reps, b.warmup, cfgmod.subseed(run.cfg.seed, "weights"))
        rows.append(r)
        click.echo(f"d_model={d} mlp={r.mlp_median_s * 1e3:.2f}ms "
                   f"arm={r.arm_median_s * 1e3:.2f}ms ratio={r.ratio:.4f}")
    run.json("bench.json", {
        "config_hash": run.cfg.hash(),
        "arm_enabled": run.cfg.arm.enabled,
        "reps": b.reps,
        "warmup": b.warmup,
        "shapes": [{"d_model": r.d_model, "d_ff": r.d_ff, "seq_len": r.seq_len,
                    "cost_model_ratio": bench.cost_model_ratio(r.d_model)} for r in rows],
    })
    # wall-clock values: never byte-reproducible, so kept apart
    t = run.json("bench_timings.json", [
        {"d_model": r.d_model, "mlp_median_s": r.mlp_median_s,
         "arm_median_s": r.arm_median_s, "ratio": r.ratio} for r in rows])
    run.volatile.add(t)


if __name__ == "__main__":
    main()
