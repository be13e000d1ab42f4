"""``driftlab`` command-line runner.

Subcommands: ``sample``, ``train``, ``verify``, ``dlm-train``, ``dlm-infer`` and
``run`` (a whole pipeline from one JSON config). Every invocation writes
``manifest.json`` into ``--out-dir``, even when it fails. Exit status is 0 on
success, 1 when a requested check fails and 2 for malformed input.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, artifacts, embedlm, oracle, samplers, schedule, training, verify
from .errors import ConfigError, DriftlabError
from .fields import GuidanceSpec, analytic_classifier_grad, oracle_noise_model

SEED_ENV = "DRIFTLAB_SEED"
SEED_MASK = (1 << 64) - 1
SAMPLER_NAMES = ("em", "euler", "heun", "dpm1", "ddpm", "ddim")


class CheckFailure(Exception):
    def __init__(self, failing):
        super().__init__(", ".join(failing))
        self.failing = list(failing)


def resolve_seed(explicit=None, configured=None) -> int:
    """Explicit flag, then ``DRIFTLAB_SEED``, then the config value, then 0."""
    if explicit is not None:
        value = explicit
    elif os.environ.get(SEED_ENV, "").strip():
        raw = os.environ[SEED_ENV].strip()
        try:
            value = int(raw, 0)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None
    elif configured is not None:
        value = configured
    else:
        value = 0
    value = int(value)
    if not 0 <= value <= SEED_MASK:
        raise ConfigError(f"seed {value} is not a 64-bit unsigned value")
    return value


class Run:
    """Collects artifacts and check results for the manifest."""

    def __init__(self, out_dir, command: str, config: dict):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.seed = None
        self.artifacts: list[str] = []
        self.checks: list[dict] = []
        self.status = "error"
        self.message = ""

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.artifacts.append(name)
        return p

    def record_checks(self, rows):
        for r in rows:
            self.checks.append({"check": r.check, "statistic": artifacts.fmt(r.statistic),
                                "threshold": artifacts.fmt(r.threshold), "pass": r.passed})

    def write_manifest(self):
        manifest = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "status": self.status,
            "message": self.message,
            "artifacts": sorted(set(self.artifacts)),
            "failing_checks": [c["check"] for c in self.checks if not c["pass"]],
            "versions": {"driftlab": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version()},
        }
        (self.out_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


# Builders shared by the subcommands and the config runner.

def build_mixture(block) -> oracle.GaussianMixture:
    if block is None:
        return oracle.benchmark_mixture()
    if not isinstance(block, dict):
        raise ConfigError("mixture block must be an object")
    return oracle.GaussianMixture.from_dict(block)


def build_schedule(block) -> schedule.NoiseSchedule:
    if not isinstance(block, dict) or "kind" not in block:
        raise ConfigError("schedule block must be an object with a 'kind'")
    return schedule.from_config(block)


def build_model(mix, sched, model_path=None):
    if model_path is None:
        return oracle_noise_model(mix, sched)
    mlp, meta = artifacts.load_model(model_path)
    if meta.get("kind") != "denoiser":
        raise ConfigError(f"{model_path}: not a denoiser model")
    net = training.Denoiser(mlp, build_schedule(meta["schedule"]), int(meta["dim"]),
                            meta["parameterization"], int(meta.get("n_classes", 0)))
    return net.field_model()


def build_guidance(mix, sched, mode="none", gamma=0.0, scale=1.0):
    if mode == "classifier":
        return GuidanceSpec("classifier", gamma=gamma,
                            classifier_grad=analytic_classifier_grad(mix, sched))
    if mode == "cfg":
        return GuidanceSpec("cfg", s=scale)
    if mode == "none":
        return GuidanceSpec()
    raise ConfigError(f"unknown guidance mode {mode!r}")


def do_sample(run: Run, mix, sched, opts: dict, seed: int):
    name = opts.get("name", "euler")
    if name not in SAMPLER_NAMES:
        raise ConfigError(f"unknown sampler {name!r}; expected one of {SAMPLER_NAMES}")
    steps = int(opts.get("steps", 100))
    batch = int(opts.get("batch", 1000))
    model = build_model(mix, sched, opts.get("model"))
    guidance = build_guidance(mix, sched, opts.get("guidance", "none"),
                              float(opts.get("gamma", 0.0)), float(opts.get("cfg_scale", 1.0)))
    cond = opts.get("cond")
    if guidance.mode != "none" and cond is None:
        cond = 1
    if name in ("ddpm", "ddim"):
        ds = schedule.discretize(sched, steps)
        if name == "ddpm":
            traj = samplers.ddpm_ancestral(model, ds, batch, seed, guidance=guidance, cond=cond)
        else:
            traj = samplers.ddim(model, ds, batch, float(opts.get("eta", 0.0)), seed,
                                 guidance=guidance, cond=cond)
    else:
        grid = samplers.power_grid(steps, sched, float(opts.get("grid_power", 1.0)))
        traj = samplers.SAMPLERS[name](model, sched, grid, batch, seed,
                                       guidance=guidance, cond=cond)
    artifacts.write_trajectory_csv(run.path(opts.get("out", "trajectory.csv")), traj)
    if opts.get("histogram"):
        artifacts.plot_histogram(traj.terminal[:, 0], int(opts.get("bins", 50)),
                                 run.path(opts.get("histogram_out", "terminal.svg")),
                                 title=f"{name} terminal samples", xlabel="dim0")
    return traj


def do_train(run: Run, mix, sched_block: dict, opts: dict, seed: int):
    loss = opts.get("loss", "denoise")
    if loss not in training.LOSS_KINDS:
        raise ConfigError(f"unknown loss {loss!r}; expected one of {training.LOSS_KINDS}")
    if loss == "cfm":
        sched_block = {"kind": "flow-linear"}
    sched = build_schedule(sched_block)
    cfg = training.TrainConfig(
        weight=opts.get("weight", "constant"), batch=int(opts.get("batch", 256)),
        steps=int(opts.get("steps", 5000)), lr=float(opts.get("lr", 1e-2)),
        p_drop=float(opts.get("p_drop", 0.2)))
    hidden = tuple(int(h) for h in opts.get("hidden", (64, 64)))
    ds = None
    if loss == "classifier":
        model = training.Classifier.build(mix.dim, mix.n_classes, sched, hidden, rng=seed)
        meta = {"kind": "classifier", "n_classes": mix.n_classes}
        probe = None
    else:
        param = "velocity" if loss == "cfm" else opts.get("parameterization", "noise")
        n_classes = mix.n_classes if loss == "cfg" else 0
        model = training.Denoiser.build(mix.dim, sched, hidden, param, n_classes, rng=seed)
        meta = {"kind": "denoiser", "parameterization": param, "n_classes": n_classes}
        if loss == "cfm":
            probe = lambda m: training.velocity_probe_rmse(m, mix, sched)  # noqa: E731
        else:
            probe = lambda m: training.noise_probe_rmse(m, mix, sched)  # noqa: E731
        if loss == "ddpm-grid":
            ds = schedule.discretize(sched, int(opts.get("grid_steps", 100)))
    report = training.train(model, loss, cfg, seed, mix=mix, sched=sched, ds=ds, probe=probe)
    meta.update({"dim": mix.dim, "schedule": sched_block, "loss": loss, "seed": seed})
    artifacts.save_model(run.path(opts.get("out", "model.bin")), model.mlp, meta)
    artifacts.write_csv(run.path("losses.csv"), ["epoch", "loss"], enumerate(report.epoch_losses))
    print(f"final loss {report.final_loss:.6g}"
          + ("" if report.oracle_gap is None else f", probe rmse {report.oracle_gap:.6g}"))
    return report


def do_verify(run: Run, mix, sched, checks, seed: int):
    names = verify.CHECK_NAMES if "all" in checks else tuple(checks)
    rows = verify.run_suite(names, mix, sched, seed)
    artifacts.write_report_csv(run.path("verify.csv"),
                               [(r.check, r.statistic, r.threshold, r.passed) for r in rows])
    run.record_checks(rows)
    failing = [r.check for r in rows if not r.passed]
    if failing:
        raise CheckFailure(failing)
    return rows


def do_dlm_train(run: Run, opts: dict, seed: int):
    vocab_size, dim = int(opts.get("vocab_size", 16)), int(opts.get("dim", 8))
    length = int(opts.get("length", 8))
    task = opts.get("task", "copy")
    hidden = tuple(int(h) for h in opts.get("hidden", (256, 256)))
    table = embedlm.EmbeddingTable.random(vocab_size, dim, seed)
    corpus = embedlm.make_corpus(task, vocab_size, length, length,
                                 int(opts.get("corpus", 512)), seed + 1)
    model = embedlm.DlmDenoiser.build(dim, length, length, hidden, rng=seed)
    report = embedlm.dlm_train(model, table, corpus, int(opts.get("steps", 10000)),
                               int(opts.get("batch", 64)), float(opts.get("lr", 1e-2)),
                               rng=seed)
    meta = {"kind": "dlm", "vocab_size": vocab_size, "dim": dim, "prompt_len": length,
            "response_len": length, "task": task, "table_seed": seed,
            "table_digest": table.digest()}
    artifacts.save_model(run.path(opts.get("out", "dlm.bin")), model.mlp, meta)
    artifacts.write_csv(run.path("dlm_losses.csv"), ["chunk", "loss"], enumerate(report.losses))
    rollout = embedlm.dlm_infer(model, table, corpus.prompts[:64], length,
                                int(opts.get("infer_steps", 50)), 0.0, seed)
    acc = embedlm.token_accuracy(rollout.tokens, corpus.responses[:64])
    print(f"final loss {report.losses[-1]:.6g}, held-in token accuracy {acc:.4f}")
    return model, table


def load_dlm(path):
    mlp, meta = artifacts.load_model(path)
    if meta.get("kind") != "dlm":
        raise ConfigError(f"{path}: not a diffusion-LM model")
    table = embedlm.EmbeddingTable.random(meta["vocab_size"], meta["dim"], meta["table_seed"])
    if table.digest() != meta["table_digest"]:
        raise ConfigError(f"{path}: embedding table digest mismatch")
    model = embedlm.DlmDenoiser(mlp, meta["dim"], meta["prompt_len"], meta["response_len"])
    return model, table, meta


def do_dlm_infer(run: Run, opts: dict, seed: int) -> str:
    model, table, meta = load_dlm(opts["model"])
    vocab = embedlm.Vocab.default(meta["vocab_size"])
    prompt = opts.get("prompt", "")
    if len(prompt) != meta["prompt_len"]:
        raise ConfigError(f"prompt must have {meta['prompt_len']} symbols")
    ids = vocab.encode(prompt)
    rollout = embedlm.dlm_infer(model, table, ids[None], meta["response_len"],
                                int(opts.get("steps", 50)), float(opts.get("eta", 0.0)), seed,
                                record=bool(opts.get("trace")))
    text = vocab.decode(rollout.tokens[0])
    if opts.get("trace"):
        header = ["step", "t", "position"] + [f"dim{j}" for j in range(table.dim)]

        def rows():
            for i, (t, x) in enumerate(rollout.trace):
                for pos in range(x.shape[-1]):
                    yield [i, t, pos, *map(float, x[0, :, pos])]

        artifacts.write_csv(run.path(opts["trace"]), header, rows())
    return text


def run_config(run: Run, cfg: dict, seed_flag=None) -> None:
    if "schedule" not in cfg:
        raise ConfigError("config is missing the required 'schedule' block")
    known = {"seed", "out_dir", "schedule", "mixture", "sampler", "training", "verify", "dlm"}
    extra = set(cfg) - known
    if extra:
        raise ConfigError(f"unknown config blocks {sorted(extra)}")
    seed = resolve_seed(seed_flag, cfg.get("seed"))
    run.seed = seed
    sched = build_schedule(cfg["schedule"])
    mix = build_mixture(cfg.get("mixture"))
    for key in ("sampler", "training", "verify", "dlm"):
        if key in cfg and not isinstance(cfg[key], dict):
            raise ConfigError(f"'{key}' block must be an object")
    if "sampler" in cfg:
        do_sample(run, mix, sched, cfg["sampler"], seed)
    if "training" in cfg:
        do_train(run, mix, cfg["schedule"], cfg["training"], seed)
    if "dlm" in cfg:
        do_dlm_train(run, cfg["dlm"], seed)
    if "verify" in cfg:
        do_verify(run, mix, sched, cfg["verify"].get("checks", ["all"]), seed)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driftlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=".")

    s = sub.add_parser("sample", help="run a sampler on the benchmark mixture")
    common(s)
    s.add_argument("--sampler", choices=SAMPLER_NAMES, default="euler")
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--batch", type=int, default=1000)
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--guidance", choices=("none", "classifier", "cfg"), default="none")
    s.add_argument("--gamma", type=float, default=0.0)
    s.add_argument("--cfg-scale", type=float, default=1.0)
    s.add_argument("--cond", type=int, default=None)
    s.add_argument("--grid-power", type=float, default=1.0)
    s.add_argument("--schedule", default="vp-constant")
    s.add_argument("--beta", type=float, default=2.0)
    s.add_argument("--model", default=None)
    s.add_argument("--histogram", action="store_true")
    s.add_argument("--out", default="trajectory.csv")

    t = sub.add_parser("train", help="train a small network on the benchmark mixture")
    common(t)
    t.add_argument("--loss", choices=training.LOSS_KINDS, default="denoise")
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--batch", type=int, default=256)
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--p-drop", type=float, default=0.2)
    t.add_argument("--weight", choices=training.WEIGHTS, default="constant")
    t.add_argument("--out", default="model.bin")

    v = sub.add_parser("verify", help="run identity and PDE checks")
    common(v)
    v.add_argument("--check", action="append",
                   choices=(*verify.CHECK_NAMES, "all"), default=None)
    v.add_argument("--out", default="verify.csv")

    d = sub.add_parser("dlm-train", help="train the toy diffusion language model")
    common(d)
    d.add_argument("--vocab-size", type=int, default=16)
    d.add_argument("--dim", type=int, default=8)
    d.add_argument("--length", type=int, default=8)
    d.add_argument("--task", choices=embedlm.TASKS, default="copy")
    d.add_argument("--steps", type=int, default=10000)
    d.add_argument("--out", default="dlm.bin")

    i = sub.add_parser("dlm-infer", help="generate a response for a prompt")
    common(i)
    i.add_argument("--model", required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--eta", type=float, default=0.0)
    i.add_argument("--steps", type=int, default=50)
    i.add_argument("--trace", default=None)

    r = sub.add_parser("run", help="execute a JSON experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out-dir", default=None)
    return p


def _dispatch(args, run: Run):
    cmd = args.command
    if cmd == "run":
        run_config(run, run.config, args.seed)
        return
    run.seed = resolve_seed(args.seed)
    seed = run.seed
    if cmd == "sample":
        sched = build_schedule({"kind": args.schedule, "beta": args.beta})
        opts = {"name": args.sampler, "steps": args.steps, "batch": args.batch,
                "eta": args.eta, "guidance": args.guidance, "gamma": args.gamma,
                "cfg_scale": args.cfg_scale, "cond": args.cond, "grid_power": args.grid_power,
                "model": args.model, "histogram": args.histogram, "out": args.out}
        do_sample(run, oracle.benchmark_mixture(), sched, opts, seed)
    elif cmd == "train":
        opts = {"loss": args.loss, "steps": args.steps, "batch": args.batch, "lr": args.lr,
                "p_drop": args.p_drop, "weight": args.weight, "out": args.out}
        do_train(run, oracle.benchmark_mixture(), {"kind": "vp-constant", "beta": 2.0},
                 opts, seed)
    elif cmd == "verify":
        rows_path = args.out
        names = args.check or ["all"]
        try:
            do_verify(run, oracle.benchmark_mixture(), schedule.vp_constant(2.0), names, seed)
        finally:
            if rows_path != "verify.csv" and (run.out_dir / "verify.csv").exists():
                (run.out_dir / "verify.csv").replace(run.out_dir / rows_path)
                run.artifacts = [rows_path if a == "verify.csv" else a for a in run.artifacts]
    elif cmd == "dlm-train":
        do_dlm_train(run, {"vocab_size": args.vocab_size, "dim": args.dim,
                           "length": args.length, "task": args.task, "steps": args.steps,
                           "out": args.out}, seed)
    elif cmd == "dlm-infer":
        text = do_dlm_infer(run, {"model": args.model, "prompt": args.prompt,
                                  "eta": args.eta, "steps": args.steps,
                                  "trace": args.trace}, seed)
        print(text)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = {k: v for k, v in vars(args).items() if k not in ("command",)}
    out_dir = args.out_dir
    if args.command == "run":
        try:
            config = artifacts.load_config(args.config)
        except ConfigError as exc:
            out_dir = out_dir or "."
            run = Run(out_dir, "run", {"config_path": args.config})
            run.message = str(exc)
            run.write_manifest()
            print(f"driftlab: {exc}", file=sys.stderr)
            return 2
        out_dir = out_dir or config.get("out_dir", ".")
    run = Run(out_dir, args.command, config)
    try:
        _dispatch(args, run)
        run.status = "ok"
        return 0
    except CheckFailure as exc:
        run.status = "failed"
        run.message = f"failing checks: {exc}"
        print(f"driftlab: {run.message}", file=sys.stderr)
        return 1
    except (ConfigError, DriftlabError, KeyError) as exc:
        run.status = "error"
        run.message = str(exc)
        print(f"driftlab: {exc}", file=sys.stderr)
        return 2
    finally:
        run.write_manifest()


if __name__ == "__main__":
    sys.exit(main())
