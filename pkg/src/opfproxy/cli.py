"""Pipeline command line: case file to evaluation report, stage by stage.

Each subcommand reads the shared configuration, consumes the previous
stage's files out of the run directory, and writes its own artifact
tagged with the config hash.  Exit codes: 0 success, 2 configuration or
artifact error, 3 numerical failure.

Thread pinning happens before numpy is first imported, so the heavy
modules are imported inside the command bodies, not at module top.
"""
from __future__ import annotations

import os
import sys
from pathlib import Path

import click

EXIT_NUMERICAL = 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


class _Run:
    """Loaded configuration plus the artifact paths of one run directory."""

    def __init__(self, config_path, seed, mode, out_dir):
        from .config import RunConfig, load_config
        self.cfg = load_config(config_path) if config_path else RunConfig()
        if seed is not None:
            self.cfg.seed = seed
            self.cfg.train.seed = seed
        if mode is not None:
            self.cfg.train.mode = mode
        if out_dir is not None:
            self.cfg.out_dir = out_dir
        self.digest = self.cfg.digest()
        self.dir = Path(self.cfg.out_dir)
        self.net = None

    def load_net(self):
        from .cases import load_case
        if self.net is None:
            self.net = load_case(self.cfg.case)
        return self.net

    def path(self, name: str) -> Path:
        return self.dir / name

    def checkpoint(self, mode: str = None) -> Path:
        return self.dir / f"model_{mode or self.cfg.train.mode}.bin"

    def splits(self, demands):
        n_train, n_val, n_test = self.cfg.counts
        return (demands[:n_train], demands[n_train:n_train + n_val],
                demands[n_train + n_val:])


pass_run = click.make_pass_decorator(_Run)


def _stage(body):
    """Map stage failures onto the documented exit codes."""
    import functools

    @functools.wraps(body)
    def wrapper(*args, **kwargs):
        from .artifacts import ArtifactError
        from .config import ConfigError
        try:
            return body(*args, **kwargs)
        except (ArtifactError, ConfigError, FileNotFoundError) as exc:
            raise click.UsageError(str(exc)) from exc
        except Exception as exc:
            from .jacobians import SingularJacobianError
            from .powerflow import DivergedError
            from .trainer import TrainingError
            import numpy as np
            numerical = (TrainingError, DivergedError, SingularJacobianError,
                         np.linalg.LinAlgError, FloatingPointError)
            if isinstance(exc, numerical):
                _fail_numerical(str(exc))
            raise
    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run configuration file (INI); defaults apply without one.")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--mode", default=None,
              help="Override the training mode (EXACT, M0..M4).")
@click.option("--threads", type=int, default=None,
              help="BLAS/OpenMP thread count for this process.")
@click.option("--deterministic", is_flag=True,
              help="Force single-threaded numerics for bit reproducibility.")
@click.option("--out", "out_dir", default=None,
              help="Run directory for stage artifacts.")
@click.version_option(package_name="opfproxy")
@click.pass_context
def main(ctx, config_path, seed, mode, threads, deterministic, out_dir):
    """Train and evaluate power-flow-embedded AC-OPF proxies."""
    if deterministic:
        threads = 1
    if threads is not None:
        if threads < 1:
            raise click.UsageError("--threads must be at least 1")
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)
    if "numpy" in sys.modules and threads is not None:
        click.echo("note: numpy already loaded; thread pinning may not apply",
                   err=True)
    try:
        ctx.obj = _Run(config_path, seed, mode, out_dir)
    except Exception as exc:
        raise click.UsageError(str(exc)) from exc
    ctx.obj.dir.mkdir(parents=True, exist_ok=True)


def _fail_numerical(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_NUMERICAL)


@main.command("gen-demands")
@pass_run
@_stage
def cmd_gen_demands(run: _Run):
    """Sample demand vectors around the nominal operating point."""
    from . import artifacts, augment
    net = run.load_net()
    cfg = run.cfg
    ds = augment.sample_demands(net, cfg.n_samples,
                                (cfg.scale_lo, cfg.scale_hi), seed=cfg.seed)
    out = run.path("demands.csv")
    artifacts.write_demands(out, ds.demands, net.n_bus, run.digest, cfg.seed)
    click.echo(f"wrote {out} ({ds.n} samples, config {run.digest})")


@main.command("solve-ref")
@pass_run
@_stage
def cmd_solve_ref(run: _Run):
    """Label the ground-truth budget with the reference OPF solver."""
    import numpy as np
    from . import artifacts, augment
    from .powerflow import reconstruct, state_z1
    from .refopf import solve_opf

    net = run.load_net()
    demands, _ = artifacts.read_demands(run.path("demands.csv"), run.digest)
    train, _, _ = run.splits(demands)
    budget = run.cfg.labeled
    if budget > train.shape[0]:
        click.echo(f"warning: budget {budget} exceeds training split "
                   f"{train.shape[0]}; clamping", err=True)
        budget = train.shape[0]
    indices, ys, z1s, z2s, objs, failures = [], [], [], [], [], []
    for i in range(budget):
        sol = solve_opf(net, train[i])
        if sol.status != "optimal":
            failures.append(i)
            click.echo(f"sample {i}: {sol.status}", err=True)
            continue
        indices.append(i)
        ys.append(sol.setpoints(net))
        z1s.append(state_z1(net, sol.state))
        z2s.append(reconstruct(net, sol.state, train[i])[0])
        objs.append(sol.objective)
    if not indices:
        _fail_numerical("reference solver failed on every labeled sample")
    out = run.path("labels.json")
    artifacts.write_labels(out, indices, np.array(ys), np.array(z1s),
                           np.array(z2s), objs, failures, run.digest,
                           augment.GROUND_TRUTH)
    click.echo(f"wrote {out} ({len(indices)} solutions, "
               f"{len(failures)} failures)")


def _training_sets(run: "_Run"):
    """(ground truth dataset, unlabeled remainder of the training split).

    The remainder skips the whole labeled budget, so reference-solver
    failures inside it are burned rather than silently pseudo-labeled.
    """
    import numpy as np
    from . import artifacts, augment
    demands, _ = artifacts.read_demands(run.path("demands.csv"), run.digest)
    train, _, _ = run.splits(demands)
    labels = artifacts.read_labels(run.path("labels.json"), run.digest)
    idx = labels["indices"]
    gt = augment.Dataset(
        demands=train[idx], y=labels["y"], z1=labels["z1"], z2=labels["z2"],
        provenance=np.full(idx.size, augment.GROUND_TRUTH, dtype=object))
    budget = min(run.cfg.labeled, train.shape[0])
    rest = augment.Dataset(demands=train[budget:])
    return gt, rest


@main.command("pseudo-label")
@pass_run
@_stage
def cmd_pseudo_label(run: _Run):
    """Fit the ridge model on the labels and complete the training split."""
    import numpy as np
    from . import artifacts, augment
    net = run.load_net()
    gt, rest = _training_sets(run)
    model = augment.fit_ridge(gt, run.cfg.alpha_p, run.cfg.alpha_v)
    pseudo = augment.pseudo_label(model, rest, net)
    out = run.path("pseudo.json")
    artifacts.write_labels(out, pseudo.source_index, pseudo.y, pseudo.z1,
                           pseudo.z2, np.zeros(pseudo.n), [], run.digest,
                           augment.PSEUDO)
    click.echo(f"wrote {out} ({pseudo.n} pseudo labels, "
               f"{pseudo.failures} power-flow failures)")


def _hybrid(run: "_Run"):
    """Ground-truth plus pseudo labels, the set the trainer consumes."""
    import numpy as np
    from . import artifacts, augment
    gt, rest = _training_sets(run)
    pseudo = artifacts.read_labels(run.path("pseudo.json"), run.digest)
    idx = pseudo["indices"]
    ps = augment.Dataset(
        demands=rest.demands[idx], y=pseudo["y"], z1=pseudo["z1"],
        z2=pseudo["z2"],
        provenance=np.full(idx.size, augment.PSEUDO, dtype=object))
    return augment.concat(gt, ps)


@main.command("branch-set")
@pass_run
@_stage
def cmd_branch_set(run: _Run):
    """Score branch loading over the completed training set."""
    import numpy as np
    from . import artifacts, augment
    net = run.load_net()
    data = _hybrid(run)
    ng = net.partition.n_gen
    rset = augment.reduced_branch_set(data.z2[:, 2 + ng:],
                                     np.sqrt(net.branch_limits2()),
                                     run.cfg.train.beta)
    out = run.path("branch_set.json")
    artifacts.write_branch_set(out, rset.beta, rset.members, rset.scores,
                               net.n_branch, run.digest)
    click.echo(f"wrote {out} ({rset.size}/{net.n_branch} branches at "
               f"beta={rset.beta:g})")


@main.command("train")
@pass_run
@_stage
def cmd_train(run: _Run):
    """Train the proxy with the configured gradient mode."""
    from . import artifacts, trainer
    net = run.load_net()
    data = _hybrid(run)
    subset = None
    if run.cfg.train.mode not in ("EXACT", "M0"):
        subset = artifacts.read_branch_set(run.path("branch_set.json"),
                                           run.digest)["members"]
    def log(row):
        click.echo(f"epoch {row['epoch']:4d} [{row['phase']:6s}] "
                   f"loss {row['total']:.6g} ({row['seconds']:.2f}s)")
    result = trainer.train(net, data, run.cfg.train, run.cfg.weights,
                           log=log, subset=subset)
    out = run.checkpoint()
    artifacts.write_checkpoint(out, result.model, run.digest,
                               run.cfg.train.mode, run.cfg.train.n_total,
                               extra={"seconds": result.seconds,
                                      "fdpf_failures": result.fdpf_failures})
    artifacts.write_training_log(run.path(f"train_{run.cfg.train.mode}.csv"),
                                 result.history, run.digest)
    click.echo(f"wrote {out} ({result.seconds:.1f}s, "
               f"{result.fdpf_failures} power-flow failures)")


@main.command("eval")
@pass_run
@_stage
def cmd_eval(run: _Run):
    """Evaluate the trained proxy against the reference solver."""
    import json
    from . import artifacts, evalx
    net = run.load_net()
    demands, _ = artifacts.read_demands(run.path("demands.csv"), run.digest)
    _, _, test = run.splits(demands)
    if test.shape[0] == 0:
        _fail_numerical("test split is empty; nothing to evaluate")
    fcnn, header = artifacts.read_checkpoint(run.checkpoint(), run.digest)
    report, _ = evalx.evaluate(net, fcnn, test)
    mode = header.get("mode", run.cfg.train.mode)
    out = run.path(f"eval_{mode}.json")
    doc = json.loads(evalx.report_json(report))
    doc["config"] = run.digest
    doc["mode"] = mode
    out.write_text(json.dumps(doc, indent=2))
    click.echo(evalx.report_markdown(report))
    click.echo(f"wrote {out}")


@main.command("report")
@pass_run
def cmd_report(run: _Run):
    """Summarize every evaluation found in the run directory."""
    import json
    rows = []
    for path in sorted(run.dir.glob("eval_*.json")):
        doc = json.loads(path.read_text())
        if doc.get("config") != run.digest:
            click.echo(f"skipping {path.name}: config {doc.get('config')} "
                       f"differs from {run.digest}", err=True)
            continue
        rows.append(doc)
    if not rows:
        raise click.UsageError(
            f"no evaluation artifacts under {run.dir}; run the eval stage first")
    cols = ("mode", "l_cost", "l_v_max", "l_v_mean", "e_l", "t_infer",
            "speedup")
    head = "| " + " | ".join(cols) + " |"
    sep = "|" + "|".join(" --- " for _ in cols) + "|"
    lines = [head, sep]
    for doc in rows:
        cells = [str(doc.get("mode", "?"))]
        cells += [f"{doc[c]:.4g}" for c in cols[1:]]
        lines.append("| " + " | ".join(cells) + " |")
    text = "\n".join(lines)
    run.path("report.md").write_text(text + "\n")
    click.echo(text)
    click.echo(f"wrote {run.path('report.md')}")


if __name__ == "__main__":
    main()
