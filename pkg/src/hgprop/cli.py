"""Command line: ``hgprop [--config F] [--threads N] [--json] <subcommand> ...``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import stages
from .apm import ApmConfig, PropagationError
from .config import ConfigError, RunConfig, load_config
from .models import MODEL_KINDS, ModelError, TrainConfig, TrainingDiverged
from .ukgf import UkgfError

EXIT_DIVERGED = 3
_path = click.Path(path_type=Path)


class Ctx:
    def __init__(self, cfg: RunConfig, threads: int | None, as_json: bool):
        self.cfg = cfg
        self.threads = threads
        self.as_json = as_json

    def emit(self, payload: dict, text: str | None = None) -> None:
        if self.as_json or text is None:
            click.echo(json.dumps(payload, sort_keys=True))
        else:
            click.echo(text)


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except TrainingDiverged as exc:
        click.echo(f"error: training diverged at epoch {exc.epoch}; "
                   f"last finite loss {exc.last_finite_loss}", err=True)
        sys.exit(EXIT_DIVERGED)
    except (stages.StageError, ConfigError, PropagationError, ModelError, UkgfError,
            FileNotFoundError, ValueError) as exc:
        raise click.ClickException(str(exc)) from None


def _status_line(result: dict) -> str:
    if result.get("status") == "up to date":
        return f"{result['stage']}: up to date"
    extras = ", ".join(f"{k}={v}" for k, v in result.items() if k not in ("stage", "status", "hops", "report"))
    return f"{result['stage']}: done" + (f" ({extras})" if extras else "")


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="key=value run configuration.")
@click.option("--threads", type=int, default=None, help="Propagation worker threads.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output on stdout.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx: click.Context, config_path: Path | None, threads: int | None, as_json: bool,
         verbose: bool) -> None:
    """Heterograph construction, anisotropic propagation and decoupled training."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _run(load_config, config_path)
    ctx.obj = Ctx(cfg, threads, as_json)


@main.command()
@click.argument("dump", type=_path, required=False)
@click.option("--screen", type=_path, help="Screen set file (property ids / datatypes).")
@click.option("--out", "out_dir", type=_path, help="Output graph directory.")
@click.option("--force", is_flag=True)
@click.pass_obj
def build(obj: Ctx, dump: Path | None, screen: Path | None, out_dir: Path | None, force: bool) -> None:
    """Extract entities, texts and typed edges from a JSON dump."""
    dump = dump or obj.cfg.dump
    if dump is None:
        raise click.UsageError("no dump given (argument or config key 'dump')")
    out_dir = out_dir or obj.cfg.work_dir / "graph"
    result = _run(stages.run_build, dump.resolve(), out_dir.resolve(), screen or obj.cfg.screen, force)
    obj.emit(result, _status_line(result))


@main.command()
@click.argument("graph_dir", type=_path)
@click.option("--dim", type=int)
@click.option("--seed", type=int)
@click.option("--force", is_flag=True)
@click.pass_obj
def embed(obj: Ctx, graph_dir: Path, dim: int | None, seed: int | None, force: bool) -> None:
    """Hash feature descriptions and relation labels into UKGF matrices."""
    cfg = obj.cfg.replace(dim=dim, embed_seed=seed)
    result = _run(stages.run_embed, graph_dir, cfg.dim, cfg.embed_seed, force)
    obj.emit(result, _status_line(result))


@main.command()
@click.argument("graph_dir", type=_path)
@click.option("--classes", "class_count", type=int, help="Number of high-level classes.")
@click.option("--seed", type=int)
@click.option("--force", is_flag=True)
@click.pass_obj
def annotate(obj: Ctx, graph_dir: Path, class_count: int | None, seed: int | None, force: bool) -> None:
    """Harvest instance-of parents, cluster them and write labels.tsv."""
    cfg = obj.cfg.replace(class_count=class_count, seed=seed)
    result = _run(stages.run_annotate, graph_dir, cfg.class_count, cfg.seed, cfg.kmeans_iters,
                  cfg.instance_of, cfg.dim, cfg.embed_seed, force)
    obj.emit(result, _status_line(result))


@main.command()
@click.argument("graph_dir", type=_path)
@click.option("--size", type=int, help="Number of nodes to keep.")
@click.option("--out", "out_dir", type=_path, required=True)
@click.option("--high-degree-fraction", type=float)
@click.option("--seed", type=int)
@click.option("--force", is_flag=True)
@click.pass_obj
def sample(obj: Ctx, graph_dir: Path, size: int | None, out_dir: Path,
           high_degree_fraction: float | None, seed: int | None, force: bool) -> None:
    """Snowball-sample an induced subgraph with remapped ids."""
    cfg = obj.cfg.replace(sample_size=size, high_degree_fraction=high_degree_fraction, seed=seed)
    if cfg.sample_size < 1:
        raise click.UsageError("--size is required")
    result = _run(stages.run_sample, graph_dir, out_dir, cfg.sample_size, cfg.high_degree_fraction,
                  cfg.restart_prob, cfg.seed, force)
    obj.emit(result, _status_line(result))


@main.command()
@click.argument("graph_dir", type=_path)
@click.option("--out", "out_dir", type=_path, required=True)
@click.option("--hops", "num_hops", type=int)
@click.option("--isolated", "isolated_policy", type=click.Choice(["zero", "carry"]))
@click.option("--combine", "type_combine", type=click.Choice(["mean", "sum"]))
@click.option("--reverse/--no-reverse", "add_reverse", default=None)
@click.option("--block-size", type=int, help="Process destinations in blocks via disk (0: in memory).")
@click.option("--force", is_flag=True)
@click.pass_obj
def propagate(obj: Ctx, graph_dir: Path, out_dir: Path, num_hops: int | None,
              isolated_policy: str | None, type_combine: str | None, add_reverse: bool | None,
              block_size: int | None, force: bool) -> None:
    """Write hop_0..hop_K UKGF files plus manifest.json."""
    cfg = obj.cfg.replace(num_hops=num_hops, isolated_policy=isolated_policy,
                          type_combine=type_combine, add_reverse=add_reverse, block_size=block_size)
    apm_cfg = _run(ApmConfig, cfg.num_hops, cfg.isolated_policy, cfg.type_combine, cfg.add_reverse)
    result = _run(stages.run_propagate, graph_dir, out_dir, apm_cfg, cfg.block_size, obj.threads, force)
    obj.emit(result, _status_line(result))


def _report_text(kind: str, report: dict) -> str:
    from .metrics import EvalReport
    return EvalReport(**report).render(kind.upper().replace("_", "-"))


@main.command("train")
@click.argument("stack_dir", type=_path)
@click.option("--labels", "label_dir", type=_path, required=True,
              help="Directory holding labels.tsv and annotation.json.")
@click.option("--model", "kind", type=click.Choice(MODEL_KINDS))
@click.option("--out", "out_dir", type=_path, required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--epochs", type=int)
@click.option("--lr", type=float)
@click.option("--hidden", type=int)
@click.option("--seed", type=int)
@click.option("--force", is_flag=True)
@click.pass_obj
def train_cmd(obj: Ctx, stack_dir: Path, label_dir: Path, kind: str | None, out_dir: Path,
              split_path: Path | None, epochs: int | None, lr: float | None, hidden: int | None,
              seed: int | None, force: bool) -> None:
    """Train a post-classifier; report test-split metrics (Acc., Prec., Rec., F1.)."""
    cfg = obj.cfg.replace(model=kind, epochs=epochs, lr=lr, hidden=hidden, seed=seed)
    train_cfg = _run(TrainConfig, cfg.epochs, cfg.lr, cfg.batch_size or None, cfg.seed, cfg.threshold)
    result = _run(stages.run_train, stack_dir, label_dir, out_dir, cfg.model, cfg.hidden,
                  cfg.dropout, train_cfg, split_path, force)
    obj.emit(result["report"], _report_text(cfg.model, result["report"]))


@main.command("eval")
@click.argument("stack_dir", type=_path)
@click.option("--labels", "label_dir", type=_path, required=True)
@click.option("--checkpoint", type=_path, required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--part", type=click.Choice(["train", "val", "test"]), default="test")
@click.pass_obj
def eval_cmd(obj: Ctx, stack_dir: Path, label_dir: Path, checkpoint: Path, split_path: Path,
             part: str) -> None:
    """Evaluate a saved checkpoint on one split part."""
    report = _run(stages.run_eval, stack_dir, label_dir, checkpoint, split_path, part,
                  obj.cfg.threshold)
    kind = json.loads((checkpoint / "manifest.json").read_text())["spec"]["kind"]
    obj.emit(report.as_dict(), _report_text(kind, report.as_dict()))


@main.command()
@click.option("--dump", type=_path)
@click.option("--work-dir", type=_path)
@click.option("--model", type=click.Choice(MODEL_KINDS))
@click.option("--force", is_flag=True)
@click.pass_obj
def pipeline(obj: Ctx, dump: Path | None, work_dir: Path | None, model: str | None, force: bool) -> None:
    """Run every stage in order and print stats, hop checksums and the test report."""
    cfg = obj.cfg.replace(dump=dump.resolve() if dump else None,
                          work_dir=work_dir.resolve() if work_dir else None, model=model)
    result = _run(stages.run_pipeline, cfg, obj.threads, force)
    text = "\n".join(result["steps"]) + "\n" + _report_text(cfg.model, result["report"])
    obj.emit(result, text)


if __name__ == "__main__":
    main()
