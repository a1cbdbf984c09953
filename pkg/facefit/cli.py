import argparse
import hashlib
import json
import logging
import platform
import sys
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import replace
from importlib import metadata
from pathlib import Path
from typing import Any

import cv2
import numpy as np

from facefit.augment import SkinToneTarget, augment_albedo, mst_target, skin_mask
from facefit.camera import Lighting, inverse_softplus
from facefit.config import PRESET_ITERATIONS, Preset, RunConfig, load_config
from facefit.constants import FOREHEAD_RECT, LATENT_PCA_SAMPLES, MONK_SKIN_TONES
from facefit.errors import ConfigError, ExitCode, FaceFitError
from facefit.features import FilterBank
from facefit.fitting import FitState, Models, Target, fit, fit_multi, interpolate_fit, render_state, state_maps, write_loss_trace
from facefit.gradcheck import Scope, run_gradcheck
from facefit.imaging import load_image, load_landmarks, load_texture, psnr, save_image, save_maps, save_texture
from facefit.reflectance import PyramidGenerator, latent_pca, manipulate
from facefit.shape import PcaShapeModel, export_obj, reconstruct_shape, vertex_normals
from facefit.synthetic import build_fixture, save_fixture
from facefit.tensor import Tensor

logger = logging.getLogger(__name__)

MANIFEST: str = "manifest.json"
PACKAGES: tuple[str, ...] = ("facefit", "numpy", "opencv-python", "pydantic", "tqdm")


@contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except FaceFitError as error:
        error.add_note(f"stage: {name}")
        logger.error("Stage %r failed: %s", name, error)  # noqa: TRY400
        raise


def versions() -> dict[str, str]:
    found = {"python": platform.python_version()}
    for package in PACKAGES:
        try:
            found[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            found[package] = "unknown"
    return found


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(directory: Path, command: str, run: RunConfig, outputs: Sequence[Path], **extra: Any) -> Path:
    """Everything needed to rerun `command`: the full configuration, its hash, seed, versions and output digests."""
    manifest = {
        "command": command,
        "config": run.canonical(),
        "config_hash": run.config_hash(),
        "seed": run.seed,
        "versions": versions(),
        "outputs": {str(path.relative_to(directory)): sha256(path) for path in sorted(outputs)},
        **extra,
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Wrote manifest %s", path)
    return path


def report(line: str) -> None:
    sys.stdout.write(line + "\n")


def run_config(args: argparse.Namespace) -> RunConfig:
    """Configuration file (or defaults), then the preset flag, then explicit flags."""
    run = load_config(args.config) if args.config else RunConfig()
    fit_overrides: dict[str, Any] = {}
    if args.preset:
        run = run.with_overrides(preset=args.preset)
        iters_inv, iters_tune = PRESET_ITERATIONS[Preset(args.preset)]
        fit_overrides |= {"iters_inv": iters_inv, "iters_tune": iters_tune}
    fit_overrides |= {
        key: value for key, value in {"resolution": args.res, "iters_inv": args.iters_inv, "iters_tune": args.iters_tune}.items() if value is not None
    }
    if args.no_tuning:
        fit_overrides["enable_tuning"] = False
    if not args.progress:
        fit_overrides["progress"] = False
    return run.with_overrides(
        seed=args.seed,
        fit=fit_overrides or None,
        paths={"output_dir": str(args.out)} if args.out else None,
    )


def load_models(run: RunConfig) -> Models:
    if run.paths.shape_model is None or run.paths.generator is None:
        msg = "the configuration names no shape model or generator"
        raise ConfigError(msg)
    return Models(
        shape=PcaShapeModel.load(run.paths.shape_model),
        generator=PyramidGenerator.load(run.paths.generator),
        bank=FilterBank.seeded(run.fit.bank_seed),
    )


def load_targets(run: RunConfig, bank: FilterBank) -> list[Target]:
    """Targets scaled so their longer side matches the fit resolution, landmarks scaled alike."""
    targets = []
    for image_path, landmark_path in zip(run.paths.targets, run.paths.landmarks, strict=True):
        image, landmarks = load_image(image_path), load_landmarks(landmark_path)
        scale = run.fit.resolution / max(image.shape[:2])
        if scale != 1.0:
            size = (round(image.shape[1] * scale), round(image.shape[0] * scale))
            image = cv2.resize(image, size, interpolation=cv2.INTER_AREA if scale < 1.0 else cv2.INTER_LINEAR)
            landmarks = landmarks * scale
            logger.info("Resampled %s to %dx%d", image_path, *size)
        targets.append(Target.prepare(image, landmarks, bank))
    return targets


def cmd_fit(args: argparse.Namespace) -> int:
    with stage("configuration"):
        run = run_config(args)
        run.validate_paths()
    with stage("loading"):
        models = load_models(run)
        targets = load_targets(run, models.bank)
    with stage("fitting"):
        fitter = fit_multi if len(targets) > 1 else fit
        state = fitter(targets, models, run.fit, run.seed)
    out = run.paths.output_dir
    with stage("writing"):
        out.mkdir(parents=True, exist_ok=True)
        outputs = save_maps(out / "maps", state_maps(state, models))
        positions = reconstruct_shape(models.shape, state.coeffs(0))
        export_obj(out / "mesh.obj", positions.data, models.shape.uv, vertex_normals(positions, models.shape.triangles).data, models.shape.triangles)
        outputs.append(out / "mesh.obj")
        scores = []
        for index, target in enumerate(targets):
            image = render_state(state, models, run.fit, index).image.data
            save_image(out / f"render_{index}.png", image)
            save_image(out / f"render_{index}_linear.png", image, bit_depth=16)
            outputs += [out / f"render_{index}.png", out / f"render_{index}_linear.png"]
            scores.append(psnr(target.image, image))
            report(f"target {index}: PSNR {scores[-1]:.2f} dB")
        write_loss_trace(out / "loss.csv", state.loss_trace)
        state.save(out / "state.fmfs")
        outputs += [out / "loss.csv", out / "state.fmfs"]
        write_manifest(out, "fit", run, outputs, psnr=scores, stage=str(state.stage))
    return ExitCode.SUCCESS


def _relit(lighting: Lighting, direction: Sequence[float] | None, scale: float | None) -> Lighting:
    if direction is not None:
        lighting = replace(lighting, directions=Tensor(np.tile(np.asarray(direction, dtype=np.float64), (lighting.count, 1))))
    if scale is not None:
        lighting = replace(lighting, intensities=Tensor(inverse_softplus(lighting.colors().data * scale)))
    return lighting


def cmd_render(args: argparse.Namespace) -> int:
    with stage("configuration"):
        run = run_config(args)
    with stage("loading"):
        models = load_models(run)
        state = FitState.load(args.checkpoint)
        if not 0 <= args.index < state.image_count:
            msg = f"checkpoint holds {state.image_count} images, --index {args.index} is out of range"
            raise ConfigError(msg)
    with stage("rendering"):
        camera = state.cameras[args.index].turned(args.yaw) if args.yaw else state.cameras[args.index]
        lighting = _relit(state.lightings[args.index], args.light, args.intensity)
        image = render_state(state, models, run.fit, args.index, camera=camera, lighting=lighting).image.data
    out = run.paths.output_dir
    with stage("writing"):
        out.mkdir(parents=True, exist_ok=True)
        outputs = [out / "render.png", out / "render_linear.png"]
        save_image(outputs[0], image)
        save_image(outputs[1], image, bit_depth=16)
        write_manifest(out, "render", run, outputs, checkpoint=str(args.checkpoint))
    return ExitCode.SUCCESS


def cmd_augment(args: argparse.Namespace) -> int:
    with stage("configuration"):
        run = run_config(args)
        if (args.target is None) == (args.mst is None):
            msg = "augment needs exactly one of --target and --mst"
            raise ConfigError(msg)
    with stage("loading"):
        albedo = load_texture(args.albedo)
        if args.target is not None:
            target = SkinToneTarget(albedo=load_texture(args.target), mst_label=0)
        else:
            target = mst_target(args.mst, albedo.shape[-1], run.seed)
    with stage("augmenting"):
        rect = tuple(args.rect)
        mask = skin_mask(albedo, rect)
        augmented = augment_albedo(albedo, target, rect, mask=mask)
    out = run.paths.output_dir
    with stage("writing"):
        out.mkdir(parents=True, exist_ok=True)
        outputs = [out / "augmented.png", out / "mask.png"]
        save_texture(outputs[0], augmented)
        save_image(outputs[1], mask[0], bit_depth=16)
        write_manifest(out, "augment", run, outputs, albedo=str(args.albedo), rect=list(rect))
    return ExitCode.SUCCESS


def cmd_synth(args: argparse.Namespace) -> int:
    with stage("configuration"):
        run = run_config(args)
    with stage("synthesis"):
        fixture = build_fixture(
            run.seed,
            views=args.views,
            image_size=run.fit.resolution,
            resolution=args.texture_res,
            levels=args.levels,
            latent_dim=args.latent_dim,
            config=run.fit,
        )
    out = run.paths.output_dir
    with stage("writing"):
        fixture_run = save_fixture(fixture, out, seed=run.seed, config=run.fit)
        outputs = sorted(path for path in out.iterdir() if path.is_file() and path.name != MANIFEST)
        write_manifest(out, "synth", fixture_run, outputs, views=args.views)
    report(f"fixture written to {out}")
    return ExitCode.SUCCESS


def cmd_gradcheck(args: argparse.Namespace) -> int:
    with stage("gradcheck"):
        results = run_gradcheck(args.scope, seed=args.seed or 0)
    for result in results:
        report(f"{'ok  ' if result.passed else 'FAIL'} {result.error:10.3e}  {result.name}")
    worst = max((result.error for result in results), default=0.0)
    report(f"{len(results)} checks, max relative error {worst:.3e}")
    return ExitCode.SUCCESS if all(result.passed for result in results) else ExitCode.NUMERIC


def cmd_interpolate(args: argparse.Namespace) -> int:
    with stage("configuration"):
        run = run_config(args)
        if args.steps < 2:  # noqa: PLR2004
            msg = f"interpolation needs at least 2 steps, got {args.steps}"
            raise ConfigError(msg)
    with stage("loading"):
        models = load_models(run)
        first, second = FitState.load(args.a), FitState.load(args.b)
    with stage("interpolating"):
        frames = [
            render_state(interpolate_fit(first, second, step / (args.steps - 1)), models, run.fit, args.index).image.data for step in range(args.steps)
        ]
    out = run.paths.output_dir
    with stage("writing"):
        out.mkdir(parents=True, exist_ok=True)
        outputs = []
        for step, frame in enumerate(frames):
            outputs.append(out / f"interpolate_{step}.png")
            save_image(outputs[-1], frame)
        outputs.append(out / "strip.png")
        save_image(outputs[-1], np.concatenate(frames, axis=1))
        write_manifest(out, "interpolate", run, outputs, a=str(args.a), b=str(args.b), steps=args.steps)
    return ExitCode.SUCCESS


def cmd_latent_pca(args: argparse.Namespace) -> int:
    with stage("configuration"):
        run = run_config(args)
    with stage("loading"):
        models = load_models(run)
    with stage("analysis"):
        pca = latent_pca(models.generator, args.samples, run.seed)
    out = run.paths.output_dir
    with stage("writing"):
        out.mkdir(parents=True, exist_ok=True)
        outputs = [out / "components.txt", out / "explained_variance.txt"]
        np.savetxt(outputs[0], pca.components, fmt="%.17g")
        np.savetxt(outputs[1], pca.explained_variance, fmt="%.17g")
        if args.checkpoint is not None:
            state = FitState.load(args.checkpoint)
            for amount in (-args.amount, args.amount):
                edited = replace(state, w=manipulate(Tensor(state.w), pca, args.component, amount).data)
                outputs.append(out / f"component_{args.component}_{amount:+g}.png")
                save_image(outputs[-1], render_state(edited, models, run.fit).image.data)
        write_manifest(out, "latent-pca", run, outputs, samples=args.samples)
    for index, variance in enumerate(pca.explained_variance[:8]):
        report(f"component {index}: variance {variance:.4f}")
    return ExitCode.SUCCESS


def common_flags() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", type=Path, help="TOML or JSON run configuration, or a run manifest")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--preset", choices=[str(preset) for preset in Preset], help="iteration count preset")
    parser.add_argument("--res", type=int, help="render resolution in pixels")
    parser.add_argument("--iters-inv", type=int, help="inversion iterations")
    parser.add_argument("--iters-tune", type=int, help="tuning iterations")
    parser.add_argument("--no-tuning", action="store_true", help="skip generator tuning")
    parser.add_argument("--no-progress", dest="progress", action="store_false", help="hide progress bars")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facefit", description="Face reflectance fitting by differentiable rendering")
    commands = parser.add_subparsers(dest="command", required=True)
    common = [common_flags()]

    def command(name: str, handler: Callable[[argparse.Namespace], int], description: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=common, help=description, description=description)
        sub.set_defaults(handler=handler)
        return sub

    command("fit", cmd_fit, "fit reflectance, shape, cameras and lights to the configured targets")
    render = command("render", cmd_render, "re-render a fitted state under new camera or lighting")
    render.add_argument("--checkpoint", type=Path, required=True)
    render.add_argument("--index", type=int, default=0, help="which image's camera and lights to start from")
    render.add_argument("--yaw", type=float, help="extra head rotation in degrees")
    render.add_argument("--light", type=float, nargs=3, metavar=("X", "Y", "Z"), help="light direction in object space")
    render.add_argument("--intensity", type=float, help="light intensity scale")
    augment = command("augment", cmd_augment, "move an albedo towards a skin tone by masked histogram matching")
    augment.add_argument("--albedo", type=Path, required=True)
    augment.add_argument("--target", type=Path, help="reference albedo PNG")
    augment.add_argument("--mst", type=int, choices=range(1, len(MONK_SKIN_TONES) + 1), help="Monk skin tone bin")
    augment.add_argument("--rect", type=float, nargs=4, default=FOREHEAD_RECT, metavar=("U0", "V0", "U1", "V1"), help="forehead UV rectangle")
    synth = command("synth", cmd_synth, "write a synthetic fixture with ground truth")
    synth.add_argument("--views", type=int, choices=(1, 3), default=1)
    synth.add_argument("--texture-res", type=int, default=128)
    synth.add_argument("--levels", type=int, default=8)
    synth.add_argument("--latent-dim", type=int, default=64)
    gradcheck = command("gradcheck", cmd_gradcheck, "compare tape gradients with central differences")
    gradcheck.add_argument("--scope", choices=[str(scope) for scope in Scope], required=True)
    interpolate = command("interpolate", cmd_interpolate, "render a blend sequence between two fitted states")
    interpolate.add_argument("--a", type=Path, required=True)
    interpolate.add_argument("--b", type=Path, required=True)
    interpolate.add_argument("--steps", type=int, default=5)
    interpolate.add_argument("--index", type=int, default=0)
    pca = command("latent-pca", cmd_latent_pca, "principal directions of the latent prior, optionally applied to a fit")
    pca.add_argument("--samples", type=int, default=LATENT_PCA_SAMPLES)
    pca.add_argument("--checkpoint", type=Path)
    pca.add_argument("--component", type=int, default=0)
    pca.add_argument("--amount", type=float, default=2.0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return int(args.handler(args))
    except FaceFitError as error:
        return int(error.exit_code)
    except OSError as error:
        logger.error("I/O failure: %s", error)  # noqa: TRY400
        return int(ExitCode.IO)
