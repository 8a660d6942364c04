"""Command-line entry points.

One subcommand per pipeline stage plus dataset generation, the full
pipeline, and the benchmark harness.  Every stage command accepts
``--config FILE`` (plain ``key=value`` lines) together with flags
mirroring the config fields; flags win over file values.

Exit codes: 0 success, 1 usage or configuration error, 2 stage
failure.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from .config import PipelineConfig, build_config, parse_config_file
from .exceptions import InvalidConfigError, StageError, UnknownMethodError, UvmatchError

_FLAG_HELP = {
    "input_dir": "directory of descriptor (.uvd) files",
    "output_dir": "directory for artifacts",
    "seed": "root seed; every stage derives its own stream",
    "threads": "worker cap for intra-stage parallelism",
    "codebook_k": "codebook size",
    "sample_p": "fraction of images sampled for training",
    "sample_h": "largest-scale features kept per sampled image",
    "kmeans_max_iters": "k-means iteration cap",
    "kmeans_tol": "k-means relative inertia tolerance",
    "hnsw_m": "HNSW out-degree M",
    "hnsw_m0": "HNSW layer-0 degree (default 2*M)",
    "ef_construction": "HNSW construction beam width",
    "ef_search": "HNSW query beam width (default: retrieval depth)",
    "sample_count": "retrieval sample size per query",
    "kappa": "adaptive threshold offset multiplier",
    "min_select": "minimum pairs kept per query",
    "max_select": "maximum pairs kept per query",
    "ratio": "nearest-neighbor ratio test",
    "max_error_px": "epipolar inlier gate in pixels",
    "ransac_confidence": "RANSAC stopping confidence",
    "ransac_max_iters": "RANSAC iteration cap",
    "min_inliers": "pairs kept only with more inliers than this",
    "r_ew": "edge weight mix between inlier and overlap terms",
    "max_cluster_size": "partition size cap",
}

_OPTIONAL_INT_FIELDS = ("hnsw_m0", "ef_search", "max_select")


def _config_options(fn):
    """Attach one flag per PipelineConfig field, defaulting to unset."""
    for f in reversed(dataclasses.fields(PipelineConfig)):
        if f.name in _OPTIONAL_INT_FIELDS:
            ftype = int
        else:
            ftype = {"int": int, "float": float, "str": str}[f.type]
        flag = "--" + f.name.replace("_", "-")
        fn = click.option(
            flag, f.name, type=ftype, default=None,
            help=_FLAG_HELP.get(f.name, ""),
        )(fn)
    return fn


def _make_config(config_path, overrides) -> PipelineConfig:
    file_values = parse_config_file(config_path) if config_path else {}
    return build_config(file_values, overrides)


@click.group()
def cli():
    """Match-pair retrieval toolkit: VLAD + HNSW with a BoW baseline."""


def _stage_command(name, stages, extra_help=""):
    @cli.command(
        name=name,
        help=f"Run the {' and '.join(stages)} stage(s). {extra_help}".strip(),
    )
    @click.option("--config", "config_path",
                  type=click.Path(exists=True, dir_okay=False), default=None,
                  help="key=value config file; flags override it")
    @_config_options
    def _cmd(config_path, **overrides):
        from .pipeline import run_stage

        cfg = _make_config(config_path, overrides)
        for stage in stages:
            entry = run_stage(stage, cfg)
            click.echo(
                f"{stage}: ok ({entry['seconds']:.2f}s) -> "
                + ", ".join(entry["artifacts"])
            )

    return _cmd


_stage_command("codebook", ("sample", "train"))
_stage_command("vlad", ("aggregate",))
_stage_command("index", ("index",))
_stage_command("retrieve", ("retrieve",))
_stage_command("verify", ("verify",))
_stage_command("graph", ("graph",))
_stage_command("partition", ("partition",))


@cli.command(help="Run all eight stages and write manifest.json.")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="key=value config file; flags override it")
@_config_options
def pipeline(config_path, **overrides):
    from .pipeline import run_pipeline

    cfg = _make_config(config_path, overrides)
    manifest = run_pipeline(cfg)
    total = sum(s["seconds"] for s in manifest["stages"])
    click.echo(f"pipeline: {len(manifest['stages'])} stages ok in {total:.2f}s")
    click.echo(f"manifest: {Path(cfg.output_dir) / 'manifest.json'}")


@cli.command(help="Generate a synthetic strip dataset with ground truth.")
@click.option("--output-dir", required=True, help="dataset directory")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-images", type=int, default=50, show_default=True)
@click.option("--features-per-image", type=int, default=300, show_default=True)
@click.option("--overlap-fraction", type=float, default=0.75, show_default=True)
@click.option("--image-width", type=int, default=1000, show_default=True)
@click.option("--image-height", type=int, default=1000, show_default=True)
@click.option("--noise-px", type=float, default=0.3, show_default=True)
@click.option("--noise-desc", type=int, default=2, show_default=True)
def gen(output_dir, seed, n_images, features_per_image, overlap_fraction,
        image_width, image_height, noise_px, noise_desc):
    from .descriptors import save_descriptor_set
    from .synthetic import SyntheticConfig, generate_synthetic_dataset

    cfg = SyntheticConfig(
        n_images=n_images, features_per_image=features_per_image,
        overlap_fraction=overlap_fraction, image_width=image_width,
        image_height=image_height, noise_px=noise_px, noise_desc=noise_desc,
    )
    sets, gt = generate_synthetic_dataset(cfg, seed)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for dset in sets:
        save_descriptor_set(dset, out / f"image_{dset.image_id:06d}.uvd")
    with open(out / "ground_truth.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "n_images": cfg.n_images,
                "window_segments": gt.window_segments,
                "seed": seed,
                "generator": dataclasses.asdict(cfg),
                "pairs": sorted([int(i), int(j)] for i, j in gt.pairs),
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    click.echo(f"gen: {len(sets)} images, {len(gt.pairs)} overlap pairs -> {out}")


@cli.command(help="Compare retrieval methods; writes bench_report.{json,csv}.")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="key=value config file; flags override it")
@click.option("--methods", default="vlad_hnsw,vlad_brute,bow",
              show_default=True, help="comma-separated method list")
@click.option("--depth", type=int, default=30, show_default=True,
              help="fixed retrieval depth per query")
@click.option("--bow-branching", type=int, default=10, show_default=True)
@click.option("--bow-depth", type=int, default=4, show_default=True)
@_config_options
def bench(config_path, methods, depth, bow_branching, bow_depth, **overrides):
    from .bench import run_benchmark, save_benchmark_report

    cfg = _make_config(config_path, overrides)
    names = [m.strip() for m in methods.split(",") if m.strip()]
    report = run_benchmark(
        cfg, names, depth=depth,
        bow_branching=bow_branching, bow_depth=bow_depth,
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_benchmark_report(
        report, out / "bench_report.json", out / "bench_report.csv"
    )
    for name in names:
        res = report.methods[name]
        click.echo(
            f"{name}: query {res.query_ms:.2f} ms/image"
            + (f", precision {res.precision:.3f}" if res.precision is not None else "")
        )
    click.echo(f"report: {out / 'bench_report.json'}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="uvmatch", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except (InvalidConfigError, UnknownMethodError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except StageError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except (UvmatchError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
