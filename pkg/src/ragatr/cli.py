"""Command-line interface binding ingestion, retrieval, evaluation,
projection, and the HTTP service into one ``ragatr`` entry point.

Exit codes: 0 on success, 1 for user/data errors, 2 for internal errors.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import ConfigError, RagatrError
from .evaluate import evaluate_corpus
from .index import (
    ExemplarIndex,
    FilterClause,
    MetadataFilter,
    NUMERIC_FILTER_FIELDS,
    load_snapshot,
)
from .ingest import (
    EmbeddingServiceClient,
    build_records,
    fetch_embeddings,
    load_embeddings,
    parse_manifest,
    parse_vehicle_specs,
)
from .metrics import render_report
from .pipeline import RemoteGeneratorClient, StubGeneratorClient


def parse_filter_clause(text: str) -> FilterClause:
    """Parse ``field=value``, ``field>=value``, or ``field<=value``."""
    for token, op in ((">=", "ge"), ("<=", "le"), ("=", "eq")):
        if token in text:
            field, raw = text.split(token, 1)
            field = field.strip()
            raw = raw.strip()
            if field in NUMERIC_FILTER_FIELDS:
                try:
                    value: str | float = float(raw)
                except ValueError:
                    raise ConfigError(f"filter {text!r}: {field} needs a numeric value")
            else:
                value = raw
            return FilterClause(field, op, value)
    raise ConfigError(f"cannot parse filter {text!r}; expected field=value, field>=value, or field<=value")


def _build_filter(clauses: tuple[str, ...]) -> MetadataFilter:
    return MetadataFilter(tuple(parse_filter_clause(c) for c in clauses))


def _parse_vec(text: str) -> np.ndarray:
    text = text.strip()
    if text.startswith("["):
        return np.asarray(json.loads(text), dtype=np.float64)
    return np.asarray([float(tok) for tok in text.replace(",", " ").split()], dtype=np.float64)


@click.group()
@click.version_option(__version__, prog_name="ragatr")
def cli():
    """Exemplar retrieval index, RAG pipeline, and evaluation harness."""


@cli.command("ingest")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--embeddings", "embeddings_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--embedding-endpoint", "embedding_endpoint", type=str)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_ingest(manifest_path, embeddings_path, embedding_endpoint, out_path):
    """Parse a manifest plus embeddings, build the index, write a snapshot."""
    if (embeddings_path is None) == (embedding_endpoint is None):
        raise ConfigError("configure exactly one of --embeddings or --embedding-endpoint")
    manifest = parse_manifest(manifest_path)
    if embeddings_path is not None:
        vectors = load_embeddings(embeddings_path, manifest.ids())
    else:
        with EmbeddingServiceClient(embedding_endpoint) as client:
            vectors = fetch_embeddings(client, manifest)
    index = ExemplarIndex(build_records(manifest, vectors))
    index.save_snapshot(out_path)
    click.echo(f"indexed {index.count} records (dim {index.dim}) -> {out_path}")
    for target_type, count in index.class_histogram().items():
        click.echo(f"  {target_type}: {count}")


@cli.command("query")
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--vec", "vec_text", type=str)
@click.option("--vec-file", "vec_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--id", "record_id", type=str)
@click.option("--k", default=5, show_default=True, type=int)
@click.option("--filter", "filters", multiple=True, help="field=value, field>=value, field<=value")
@click.option("--format", "output_format", type=click.Choice(["table", "lines"]), default="table")
def cmd_query(snapshot_path, vec_text, vec_file, record_id, k, filters, output_format):
    """Run a k-NN query against a snapshot."""
    sources = [s for s in (vec_text, vec_file, record_id) if s is not None]
    if len(sources) != 1:
        raise ConfigError("provide exactly one of --vec, --vec-file, or --id")
    index = load_snapshot(snapshot_path)
    if record_id is not None:
        query = index.record(record_id).embedding
    elif vec_file is not None:
        query = _parse_vec(Path(vec_file).read_text(encoding="utf-8"))
    else:
        query = _parse_vec(vec_text)
    metadata_filter = _build_filter(filters)
    hits = index.knn(query, k, metadata_filter)
    if len(hits) < k:
        click.echo(f"warning: only {len(hits)} candidates match the filter (k={k})", err=True)
    if output_format == "lines":
        for h in hits:
            click.echo(f"{h.rank}\t{h.record_id}\t{h.target_type}\t{h.score:.6f}")
    else:
        click.echo(f"{'rank':>4}  {'id':<24}  {'type':<12}  {'score':>10}")
        for h in hits:
            click.echo(f"{h.rank:>4}  {h.record_id:<24}  {h.target_type:<12}  {h.score:>10.6f}")


_EVAL_CONFIG_KEYS = {
    "manifest", "embeddings", "embedding_endpoint", "specs", "ratio",
    "seeds", "k", "generator", "filter", "out_dir",
}


@cli.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--embeddings", "embeddings_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--embedding-endpoint", type=str)
@click.option("--specs", "specs_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--ratio", type=float)
@click.option("--seeds", "seeds_text", type=str, help="comma-separated, e.g. 1,2,3,4,5")
@click.option("--k", type=int)
@click.option("--generator", "generator_cfg", type=str, help="'stub' or a remote endpoint URL")
@click.option("--filter", "filters", multiple=True)
@click.option("--out-dir", "out_dir", type=click.Path(file_okay=False))
def cmd_eval(config_path, manifest_path, embeddings_path, embedding_endpoint, specs_path,
             ratio, seeds_text, k, generator_cfg, filters, out_dir):
    """Repeated split/evaluate runs; writes report.txt and runs.json."""
    config: dict = {}
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
        unknown = set(config) - _EVAL_CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    # CLI flags override config-file fields of the same name.
    if manifest_path:
        config["manifest"] = manifest_path
    if embeddings_path:
        config["embeddings"] = embeddings_path
    if embedding_endpoint:
        config["embedding_endpoint"] = embedding_endpoint
    if specs_path:
        config["specs"] = specs_path
    if ratio is not None:
        config["ratio"] = ratio
    if seeds_text:
        config["seeds"] = [int(tok) for tok in seeds_text.split(",") if tok.strip()]
    if k is not None:
        config["k"] = k
    if generator_cfg:
        config["generator"] = generator_cfg
    if filters:
        config["filter"] = [vars(parse_filter_clause(c)) for c in filters]
    if out_dir:
        config["out_dir"] = out_dir

    for key in ("manifest", "specs", "out_dir"):
        if not config.get(key):
            raise ConfigError(f"eval config needs {key!r}")
    if ("embeddings" in config) == ("embedding_endpoint" in config):
        raise ConfigError("configure exactly one of embeddings or embedding_endpoint")

    manifest = parse_manifest(config["manifest"])
    if "embeddings" in config:
        vectors = load_embeddings(config["embeddings"], manifest.ids())
    else:
        with EmbeddingServiceClient(config["embedding_endpoint"]) as client:
            vectors = fetch_embeddings(client, manifest)
    records = build_records(manifest, vectors)
    specs = parse_vehicle_specs(config["specs"])

    seeds = [int(s) for s in config.get("seeds", [1, 2, 3, 4, 5])]
    eval_k = int(config.get("k", 5))
    eval_ratio = float(config.get("ratio", 0.5))
    clause_dicts = config.get("filter", [])
    metadata_filter = MetadataFilter(
        tuple(FilterClause(c["field"], c.get("op", "eq"), c["value"]) for c in clause_dicts)
    )
    generator = config.get("generator", "stub")
    if generator == "stub":
        client_factory = StubGeneratorClient
    else:
        client_factory = lambda specs_table: RemoteGeneratorClient(generator, specs_table)

    outcome = evaluate_corpus(
        records,
        specs,
        seeds=seeds,
        ratio=eval_ratio,
        k=eval_k,
        client_factory=client_factory,
        metadata_filter=metadata_filter,
    )
    header = [
        f"corpus: {manifest.class_counts()}",
        f"split ratio: {eval_ratio}  seeds: {','.join(str(s) for s in seeds)}  k: {eval_k}  "
        f"generator: {generator}",
    ]
    report_text = render_report(outcome.report, k=eval_k, header_lines=header)

    out = Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report_text, encoding="utf-8")
    detail = {
        "config": {kk: config[kk] for kk in sorted(config) if kk != "out_dir"},
        "seeds": seeds,
        "runs": [
            {"seed": seed, "metrics": dict(sorted(run.items()))}
            for seed, run in zip(seeds, outcome.per_run)
        ],
        "aggregate": {name: row.mean for name, row in sorted(outcome.report.rows.items())},
    }
    (out / "runs.json").write_text(
        json.dumps(detail, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    click.echo(report_text)
    click.echo(f"wrote {out / 'report.txt'} and {out / 'runs.json'}")


@cli.command("project")
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--method", type=click.Choice(["tsne", "pca"]), default="pca", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--perplexity", default=30.0, show_default=True, type=float)
@click.option("--iterations", default=1000, show_default=True, type=int)
@click.option("--learning-rate", default=200.0, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_project(snapshot_path, method, out_path, perplexity, iterations, learning_rate, seed):
    """Project a snapshot's embeddings to 2-D and write a points CSV."""
    from .projection import TsneConfig, export_points, pca_2d, tsne_2d

    index = load_snapshot(snapshot_path)
    if method == "pca":
        points = pca_2d(index.records)
    else:
        cfg = TsneConfig(
            perplexity=perplexity, iterations=iterations, learning_rate=learning_rate, seed=seed
        )
        points = tsne_2d(index.records, cfg)
    export_points(points, out_path)
    click.echo(f"wrote {len(points)} points -> {out_path}")


@cli.command("serve")
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--specs", "specs_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True, type=int)
@click.option("--generator", "generator_cfg", default="stub", show_default=True,
              help="'stub' or a remote endpoint URL")
def cmd_serve(snapshot_path, specs_path, host, port, generator_cfg):
    """Serve retrieval and answer endpoints over a snapshot."""
    import uvicorn

    from .service import create_app

    index = load_snapshot(snapshot_path)
    specs = parse_vehicle_specs(specs_path)
    if generator_cfg == "stub":
        client = StubGeneratorClient(specs)
    else:
        client = RemoteGeneratorClient(generator_cfg, specs)
    app = create_app(index, specs, client)
    click.echo(f"serving {index.count} records (dim {index.dim}) on {host}:{port}")
    uvicorn.run(app, host=host, port=port, timeout_graceful_shutdown=10)


def main(argv: list[str] | None = None) -> int:
    """Run the CLI and map errors to exit codes (0 ok, 1 user, 2 internal)."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except RagatrError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports anything else as internal
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
