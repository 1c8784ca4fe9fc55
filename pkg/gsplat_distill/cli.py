import pathlib

import arrow
import click
import yaml
from rich import print

from .config import RunConfig
from .display import (
    ablation_table,
    consistency_view,
    format_timestamp,
    gradcheck_view,
    noise_stats_view,
    summary_table,
    training_progress,
)
from .harness import (
    ABLATION_COLUMNS,
    ABLATION_SCHEMA,
    CONSISTENCY_SCHEMA,
    PIXEL_COLUMNS,
    PIXEL_SCHEMA,
    consistency_report,
    pixel_rows,
    run_ablation,
    run_gradcheck,
    run_noise_stats,
    run_training,
)
from .io import load_cloud, save_cloud, write_csv, write_ppm
from .logging import logger, set_level
from .raster import render
from .scene import turntable
from .targets import synthetic_scene, synthetic_views, write_views

TURNTABLE_POSES = 36

# exit codes
VALIDATION_FAILURE = 1
RUNTIME_FAILURE = 2


class Main(click.Group):
    """Command group mapping failures to exit codes"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
            raise
        except ValueError as error:
            logger.error(error)
            ctx.exit(VALIDATION_FAILURE)
        except (RuntimeError, OSError) as error:
            logger.error(error)
            ctx.exit(RUNTIME_FAILURE)


@click.group(cls=Main)
@click.option("--verbose", is_flag=True, help="debug logging")
def main(verbose):
    """Score-distillation gaussian splatting"""
    if verbose:
        set_level("DEBUG")


def run_options(command):
    """--config, --set, --seed and --out, shared by every command"""
    for decorator in reversed(
        [
            click.option(
                "--config",
                "config_path",
                type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
                help="YAML configuration file",
            ),
            click.option(
                "--set",
                "overrides",
                multiple=True,
                metavar="KEY=VALUE",
                help="override one configuration key",
            ),
            click.option("--seed", type=click.INT, help="override the top-level seed"),
            click.option(
                "--out",
                type=click.Path(file_okay=False, path_type=pathlib.Path),
                default=pathlib.Path("out"),
                show_default=True,
                help="output directory",
            ),
        ]
    ):
        command = decorator(command)
    return command


def prepare(config_path, overrides, seed, out: pathlib.Path) -> RunConfig:
    run = RunConfig.load(config_path, overrides, seed)
    out.mkdir(parents=True, exist_ok=True)
    run.write_resolved(out)
    return run


def write_yaml(values: dict, path: pathlib.Path):
    path.write_text(yaml.safe_dump(values, sort_keys=False))


# ------------------------ commands ------------------------


@main.command
@run_options
def generate(config_path, overrides, seed, out):
    """Optimize a cloud by score distillation"""
    run = prepare(config_path, overrides, seed, out)
    started = arrow.utcnow()
    with training_progress() as progress:
        task = progress.add_task(
            "training",
            total=run.trainer.total_steps,
            sigma=run.guide.sigma_max,
            gaussians=run.scene.count,
        )

        def on_step(state, row):
            progress.update(task, advance=1, sigma=row["sigma"], gaussians=row["gaussians"])

        state, rows = run_training(run, out_dir=out, on_step=on_step)

    view = run.view
    for index, camera in enumerate(
        turntable(TURNTABLE_POSES, view.elevation, view.radius, view.fov_y, view.width, view.height)
    ):
        image = render(state.cloud, camera, run.render).color
        write_ppm(image, out / "turntable" / f"frame_{index:03d}.ppm")

    finished = arrow.utcnow()
    errors = [row["heldout_error"] for row in rows if row["heldout_error"] is not None]
    record = {
        "command": "generate",
        "started": started.isoformat(),
        "finished": finished.isoformat(),
        "steps": state.step,
        "gaussians": len(state.cloud),
        "final_heldout_error": errors[-1] if errors else None,
    }
    write_yaml(record, out / "run.yml")
    print(
        summary_table(
            record | {"started": format_timestamp(started), "finished": format_timestamp(finished)},
            title=str(out),
        )
    )


@main.command("render")
@click.argument("cloud_path", type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path))
@click.option("--image", default="render.ppm", show_default=True, help="file name inside --out")
@run_options
def render_command(cloud_path, image, config_path, overrides, seed, out):
    """Render a saved cloud from the camera of the view.* keys"""
    run = prepare(config_path, overrides, seed, out)
    cloud = load_cloud(cloud_path)
    output = render(cloud, run.view.camera, run.render)
    write_ppm(output.color, out / image)
    logger.info(f"{len(cloud)} gaussians rendered to {out / image}")


@main.command("noise-stats")
@run_options
def noise_stats(config_path, overrides, seed, out):
    """Monte-Carlo statistics of the structured noise"""
    run = prepare(config_path, overrides, seed, out)
    report = run_noise_stats(run.noise_stats, run.noise, run.render, run.seed)
    write_csv(pixel_rows(report.moments), out / "pixels.csv", PIXEL_SCHEMA, PIXEL_COLUMNS)
    write_yaml(report.summary(), out / "summary.yml")
    print(noise_stats_view(report))


@main.command
@run_options
@click.pass_context
def gradcheck(ctx, config_path, overrides, seed, out):
    """Analytic gradients against central finite differences"""
    run = prepare(config_path, overrides, seed, out)
    report = run_gradcheck(run.gradcheck, run.seed)
    write_yaml(
        {
            "passed": report.passed,
            "tolerance": report.tolerance,
            "scenes": report.scenes,
            "renderer": report.errors,
            "vgs": report.vgs_errors,
            "zero_cotangent": report.zero_cotangent,
        },
        out / "gradcheck.yml",
    )
    print(gradcheck_view(report))
    if not report.passed:
        logger.error("gradient check failed")
        ctx.exit(VALIDATION_FAILURE)


@main.command("eval-consistency")
@click.argument("cloud_path", type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path))
@run_options
def eval_consistency(cloud_path, config_path, overrides, seed, out):
    """Photometric error between neighbouring views on a circle"""
    run = prepare(config_path, overrides, seed, out)
    report = consistency_report(load_cloud(cloud_path), run.evaluation, run.render)
    columns = ["pair", "first", "second", "error"]
    write_csv(report.rows(), out / "consistency.csv", CONSISTENCY_SCHEMA, columns)
    write_yaml(
        {
            "poses": report.poses,
            "elevation": report.elevation,
            "radius": report.radius,
            "pairing": report.pairing,
            "mean": report.mean,
            "variance": report.variance,
        },
        out / "consistency.yml",
    )
    print(consistency_view(report))


@main.command
@click.option("--jobs", type=click.INT, default=1, show_default=True, help="parallel cells")
@run_options
def ablate(jobs, config_path, overrides, seed, out):
    """Structured noise x VGS ablation matrix"""
    run = prepare(config_path, overrides, seed, out)
    rows = run_ablation(run, out_dir=out, jobs=jobs)
    write_csv(rows, out / "ablation.csv", ABLATION_SCHEMA, ABLATION_COLUMNS)
    print(ablation_table(rows))


@main.command("make-targets")
@run_options
def make_targets(config_path, overrides, seed, out):
    """Render the bundled synthetic scene into target and held-out views"""
    run = prepare(config_path, overrides, seed, out)
    targets, heldout = synthetic_views(
        run.targets, run.camera.width, run.camera.height, run.render
    )
    save_cloud(synthetic_scene(run.targets.scene_seed), out / "scene.ply")
    manifest = write_views(targets, out, "targets")
    if heldout:
        write_views(heldout, out, "heldout")
    logger.info(f"{len(targets)} targets, {len(heldout)} held-out views in {manifest.parent}")
