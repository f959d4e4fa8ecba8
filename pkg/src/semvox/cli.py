"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; results go to files or stdout. All subcommands are deterministic for
fixed flags and seeds when the mock client is used.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from semvox.augment import (
    AugmentCache,
    augment_corpus,
    variants_from_record,
)
from semvox.corpus import (
    Corpus,
    build_index,
    ingest_jsonl,
    load_index,
    save_index,
    split_corpus,
    write_jsonl,
)
from semvox.corpus import StudyRecord, tokenize
from semvox.evaluate import EnvironmentConfig, evaluate_model
from semvox.llm import make_client
from semvox.nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from semvox.nn.model import encode, generate, load_external_latents
from semvox.nn.training import TrainConfig, gradient_check, train
from semvox.refine import T2SConfig, refine_query
from semvox.volgrid import GridSpec, load_volume, save_nifti, save_volume, synthesize_target


def _load_config_file(path: str) -> dict:
    """Flag-equivalent key-value config: lines of 'subcommand.flag = value'."""
    default_map: dict[str, dict[str, str]] = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line or "." not in line.split("=", 1)[0]:
            raise click.UsageError(
                f"config line {line_no}: expected 'subcommand.flag = value', got {raw!r}"
            )
        key, value = (part.strip() for part in line.split("=", 1))
        command, flag = key.split(".", 1)
        default_map.setdefault(command, {})[flag.replace("-", "_")] = value
    return default_map


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="Key-value config file with 'subcommand.flag = value' lines.",
)
@click.pass_context
def cli(ctx: click.Context, config_path):
    if config_path is not None:
        if not Path(config_path).is_file():
            raise click.UsageError(f"config file not found: {config_path}")
        ctx.default_map = _load_config_file(config_path)


def _echo_err(message: str):
    click.echo(message, err=True)


def _load_corpus(path) -> Corpus:
    result = ingest_jsonl(path)
    for diag in result.rejected:
        _echo_err(f"warning: {diag}")
    return result.corpus


def _split_samples(corpus: Corpus, split: str, split_seed: int) -> list[StudyRecord]:
    if split == "all":
        return list(corpus.records)
    assignment = split_corpus(corpus, seed=split_seed)
    chosen = set(assignment.ids_for(split))
    return [r for r in corpus.records if r.id in chosen]


@cli.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Write the normalized corpus as JSONL.")
@click.option("--index-out", type=click.Path(dir_okay=False), default=None,
              help="Write a binary TF-IDF index cache over the titles.")
def ingest(corpus_path, out_path, index_out):
    """Validate a JSONL corpus; report per-line diagnostics."""
    result = ingest_jsonl(corpus_path)
    for diag in result.rejected:
        _echo_err(f"rejected {diag}")
    if out_path:
        write_jsonl(result.corpus, out_path)
    if index_out:
        save_index(build_index(result.corpus), index_out)
    n_empty = sum(1 for r in result.corpus if not r.has_coordinates)
    click.echo(
        f"ingested {len(result.corpus)} records "
        f"({result.n_rejected} lines rejected, {n_empty} without coordinates)"
    )


@cli.command("synth-targets")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--fwhm", type=float, default=9.0, show_default=True,
              help="Gaussian sphere FWHM in mm.")
def synth_targets(corpus_path, out_dir, fwhm):
    """Synthesize per-study target volumes from peak coordinates."""
    corpus = _load_corpus(corpus_path)
    grid = GridSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in corpus:
        volume = synthesize_target(grid, rec.coordinates, fwhm)
        save_volume(volume, out / f"{rec.id}.c2bvol")
    click.echo(f"wrote {len(corpus)} target volumes to {out}")


@cli.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(dir_okay=False))
@click.option("--cache", "cache_path", type=click.Path(dir_okay=False),
              default="aug_cache.jsonl", show_default=True)
@click.option("--client", "client_kind", type=click.Choice(["mock", "http"]),
              default="mock", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False),
              help="Corpus JSONL with the five variants embedded per record.")
@click.option("--max-retries", type=int, default=2, show_default=True)
def augment(corpus_path, cache_path, client_kind, out_path, max_retries):
    """Generate the five text variants per study through the completion client."""
    corpus = _load_corpus(corpus_path)
    client = make_client(client_kind)
    cache = AugmentCache(cache_path)
    augmented = augment_corpus(client, cache, corpus.records, max_retries=max_retries)
    enriched = Corpus(
        StudyRecord(
            id=r.id,
            title=r.title,
            coordinates=r.coordinates,
            space=r.space,
            variants=augmented[r.id].as_str_map(),
        )
        for r in corpus
    )
    write_jsonl(enriched, out_path)
    click.echo(f"augmented {len(corpus)} studies -> {out_path}")


def _variants_from_file(path) -> dict:
    corpus = _load_corpus(path)
    variants = {}
    for rec in corpus:
        parsed = variants_from_record(rec)
        if parsed is not None:
            variants[rec.id] = parsed
    return variants


@cli.command("train")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(dir_okay=False))
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(dir_okay=False))
@click.option("--augmented", "augmented_path", type=click.Path(dir_okay=False),
              default=None, help="Augmented corpus JSONL providing text variants.")
@click.option("--external-latents", type=click.Path(dir_okay=False), default=None,
              help="JSONL of {id, vector} precomputed latents (external encoder).")
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]),
              default="train", show_default=True)
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--fwhm", type=float, default=9.0, show_default=True)
@click.option("--epochs", type=int, default=50, show_default=True)
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.option("--lr-encoder", type=float, default=1e-5, show_default=True)
@click.option("--lr-generator", type=float, default=3e-2, show_default=True)
@click.option("--weight-decay", type=float, default=1e-2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--log-dir", type=click.Path(file_okay=False), default=None,
              help="Write loss_log.csv and loss_curve.png here.")
def train_cmd(corpus_path, checkpoint_path, augmented_path, external_latents, split,
              split_seed, fwhm, epochs, batch_size, lr_encoder, lr_generator,
              weight_decay, seed, log_dir):
    """Train the text-to-volume model and write a checkpoint."""
    corpus = _load_corpus(corpus_path)
    records = _split_samples(corpus, split, split_seed)
    if not records:
        raise click.ClickException(f"split {split!r} selected no records")
    grid = GridSpec()
    samples = [(r, synthesize_target(grid, r.coordinates, fwhm)) for r in records]
    variants = _variants_from_file(augmented_path) if augmented_path else None
    latents = load_external_latents(external_latents) if external_latents else None
    config = TrainConfig(
        epochs=epochs,
        batch_size=batch_size,
        lr_encoder=lr_encoder,
        lr_generator=lr_generator,
        weight_decay=weight_decay,
        seed=seed,
    )
    result = train(config, samples, variants, external_latents=latents)
    ckpt = Checkpoint(
        grid=result.grid,
        params=result.params,
        opt_state=result.opt_state,
        train_config=config.to_dict(),
        log_summary=result.summary(),
    )
    save_checkpoint(ckpt, checkpoint_path)
    if log_dir:
        from semvox.reports import save_loss_curve

        out = Path(log_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["epoch,mean_mse"] + [
            f"{i + 1},{loss!r}" for i, loss in enumerate(result.epoch_losses)
        ]
        (out / "loss_log.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        save_loss_curve(result.epoch_losses, out / "loss_curve.png")
    click.echo(
        f"trained {result.steps_run} steps on {len(samples)} samples: "
        f"full-set MSE {result.initial_full_mse:.6g} -> {result.final_full_mse:.6g}; "
        f"checkpoint at {checkpoint_path}"
    )


@cli.command()
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(dir_okay=False))
@click.option("--text", required=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--nifti-out", type=click.Path(dir_okay=False), default=None)
def predict(checkpoint_path, text, out_path, nifti_out):
    """Encode a text and decode it into a volume file."""
    ckpt = load_checkpoint(checkpoint_path)
    latent = encode(ckpt.params.encoder, tokenize(text))
    volume = generate(ckpt.params, latent, grid=ckpt.grid)
    save_volume(volume, out_path)
    if nifti_out:
        save_nifti(volume, nifti_out)
    click.echo(str(out_path))


@cli.command()
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(dir_okay=False))
@click.option("--index", "index_path", required=True, type=click.Path(dir_okay=False))
@click.option("--text", required=True)
@click.option("--t2s/--no-t2s", default=True, show_default=True,
              help="Refine the query before prediction.")
@click.option("--client", "client_kind", type=click.Choice(["mock", "http"]),
              default="mock", show_default=True)
@click.option("--retrieve-k", type=int, default=5, show_default=True)
@click.option("--iterations", type=int, default=3, show_default=True)
@click.option("--keyword-count", type=int, default=8, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--transcript-out", type=click.Path(dir_okay=False), default=None)
def query(checkpoint_path, index_path, text, t2s, client_kind, retrieve_k, iterations,
          keyword_count, out_path, transcript_out):
    """Two-stage mapping: refine the text query, then predict a volume.

    Prints the full refinement transcript, then the volume path on the final
    line.
    """
    ckpt = load_checkpoint(checkpoint_path)
    final_text = text
    if t2s:
        index = load_index(index_path)
        config = T2SConfig(
            client=make_client(client_kind),
            retrieve_k=retrieve_k,
            iterations=iterations,
            keyword_count=keyword_count,
        )
        session = refine_query(index, config, text)
        transcript = session.to_json()
        click.echo(transcript)
        if transcript_out:
            Path(transcript_out).write_text(transcript + "\n", encoding="utf-8")
        final_text = session.best.candidate
    latent = encode(ckpt.params.encoder, tokenize(final_text))
    volume = generate(ckpt.params, latent, grid=ckpt.grid)
    save_volume(volume, out_path)
    click.echo(str(out_path))


def _parse_fractions(text: str) -> tuple[float, ...]:
    """Comma-separated retention percentages, e.g. '100,90,50,10'."""
    out = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        try:
            pct = float(piece)
        except ValueError:
            raise click.UsageError(f"bad retention percentage {piece!r}")
        k = pct / 100.0
        if not (0.0 < k <= 1.0):
            raise click.UsageError(f"retention {piece}% outside (0, 100]")
        out.append(k)
    if not out:
        raise click.UsageError("no retention fractions given")
    return tuple(out)


@cli.command()
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(dir_okay=False))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(dir_okay=False))
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]),
              default="test", show_default=True)
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--fwhm", type=float, default=9.0, show_default=True)
@click.option("--fractions", default="100,90,80,70,60,50,40,30,20,10",
              show_default=True, help="Retention percentages, comma separated.")
@click.option("--env", "env_kind", type=click.Choice(["standard", "masked"]),
              default="standard", show_default=True)
@click.option("--mask-rate", type=float, default=0.3, show_default=True,
              help="Token masking probability in the masked environment.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Environment seed for masking.")
@click.option("--chat/--no-chat", default=False, show_default=True,
              help="Also evaluate with refined queries and report the deltas.")
@click.option("--client", "client_kind", type=click.Choice(["mock", "http"]),
              default="mock", show_default=True)
@click.option("--index", "index_path", type=click.Path(dir_okay=False), default=None,
              help="Index cache for refinement; defaults to one built over the "
                   "train split titles.")
@click.option("--retrieve-k", type=int, default=5, show_default=True)
@click.option("--iterations", type=int, default=3, show_default=True)
@click.option("--keyword-count", type=int, default=8, show_default=True)
@click.option("--condition-label", default="non-aug", show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def evaluate(checkpoint_path, corpus_path, split, split_seed, fwhm, fractions,
             env_kind, mask_rate, seed, chat, client_kind, index_path, retrieve_k,
             iterations, keyword_count, condition_label, out_dir):
    """Score a checkpoint over a split; write table, CSV, JSON, and figures."""
    from semvox.reports import report_table, save_report_files

    ckpt = load_checkpoint(checkpoint_path)
    corpus = _load_corpus(corpus_path)
    records = _split_samples(corpus, split, split_seed)
    if not records:
        raise click.ClickException(f"split {split!r} selected no records")
    samples = [(r, synthesize_target(ckpt.grid, r.coordinates, fwhm)) for r in records]

    environment = EnvironmentConfig(
        mask_rate=mask_rate if env_kind == "masked" else 0.0, seed=seed
    )
    t2s_config = None
    index = None
    if chat:
        if index_path:
            index = load_index(index_path)
        else:
            train_records = _split_samples(corpus, "train", split_seed)
            index = build_index(Corpus(train_records))
        t2s_config = T2SConfig(
            client=make_client(client_kind),
            retrieve_k=retrieve_k,
            iterations=iterations,
            keyword_count=keyword_count,
        )
    report = evaluate_model(
        ckpt,
        samples,
        retentions=_parse_fractions(fractions),
        environment=environment,
        t2s=t2s_config,
        index=index,
        condition_base=condition_label,
    )
    paths = save_report_files(report, out_dir)
    click.echo(report_table(report), nl=False)
    click.echo(f"report files in {paths['json'].parent}")


@cli.command()
@click.option("--volume", "volume_path", required=True, type=click.Path(dir_okay=False))
@click.option("--axis", type=click.Choice(["x", "y", "z"]), default="z",
              show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def render(volume_path, axis, out_dir):
    """Render a volume as one PGM image per slice along an axis."""
    from semvox.reports import render_slices

    volume = load_volume(volume_path)
    paths = render_slices(volume, axis, out_dir)
    click.echo(f"wrote {len(paths)} slices to {out_dir}")


@cli.command()
@click.option("--dtype", type=click.Choice(["float64", "float32"]), default="float64",
              show_default=True)
@click.option("--samples", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--step", type=float, default=None, help="Finite-difference step.")
@click.option("--tolerance", type=float, default=None,
              help="Max relative error allowed (default 1e-6 / 1e-3 by dtype).")
def gradcheck(dtype, samples, seed, step, tolerance):
    """Check analytic gradients against central finite differences."""
    import numpy as np

    dt = np.float64 if dtype == "float64" else np.float32
    tol = tolerance if tolerance is not None else (1e-6 if dtype == "float64" else 1e-3)
    report = gradient_check(dtype=dt, n_samples=samples, seed=seed, fd_step=step)
    click.echo(str(report))
    if report.max_rel_err >= tol:
        raise click.ClickException(
            f"max relative error {report.max_rel_err:.3e} exceeds tolerance {tol:g}"
        )


def main(argv: list[str] | None = None) -> int:
    """Dispatch argv; returns 0 (ok), 1 (usage error), or 2 (runtime error)."""
    try:
        cli.main(args=argv, prog_name="semvox", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
