import json
import time
from pathlib import Path

import numpy as np
import pytest

from facefit.cli import main
from facefit.errors import ExitCode
from facefit.imaging import save_texture

QUIET = ["--no-progress"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("synth")
    args = ["synth", "--out", str(out), "--res", "48", "--texture-res", "16", "--levels", "4", "--latent-dim", "4", *QUIET]
    assert main(args) == ExitCode.SUCCESS
    return out


def run_fit(config: Path, out: Path) -> int:
    return main(["fit", "--config", str(config), "--out", str(out), "--iters-inv", "2", "--iters-tune", "1", *QUIET])


@pytest.fixture(scope="module")
def fitted(synth: Path, tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("fit")
    assert run_fit(synth / "config.json", out) == ExitCode.SUCCESS
    return out


def test_synth_writes_a_runnable_fixture(synth: Path) -> None:
    for name in ("shape_model.fmsm", "generator.fmgn", "truth.fmfs", "target_0.png", "landmarks_0.txt", "config.json", "manifest.json"):
        assert (synth / name).is_file()
    manifest = json.loads((synth / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "synth"
    assert "target_0.png" in manifest["outputs"]


class TestFit:
    def test_outputs(self, fitted: Path) -> None:
        expected = ["maps/diffuse.png", "maps/specular.png", "maps/normals.png", "mesh.obj", "render_0.png", "render_0_linear.png", "loss.csv", "state.fmfs"]
        for name in expected:
            assert (fitted / name).is_file()

    def test_manifest(self, fitted: Path) -> None:
        manifest = json.loads((fitted / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "fit"
        assert len(manifest["config_hash"]) == 64
        assert manifest["config"]["fit"]["iters_inv"] == 2
        assert set(manifest["outputs"]) >= {"state.fmfs", "render_0.png", "maps/diffuse.png"}
        assert len(manifest["psnr"]) == 1

    def test_reports_psnr(self, synth: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        assert run_fit(synth / "config.json", tmp_path) == ExitCode.SUCCESS
        assert "target 0: PSNR" in capsys.readouterr().out

    def test_same_inputs_give_identical_outputs(self, synth: Path, fitted: Path, tmp_path: Path) -> None:
        assert run_fit(synth / "config.json", tmp_path) == ExitCode.SUCCESS
        for name in ("state.fmfs", "render_0_linear.png", "loss.csv"):
            assert (tmp_path / name).read_bytes() == (fitted / name).read_bytes()

    def test_rerun_from_manifest(self, fitted: Path, tmp_path: Path) -> None:
        assert main(["fit", "--config", str(fitted / "manifest.json"), "--out", str(tmp_path), *QUIET]) == ExitCode.SUCCESS
        assert (tmp_path / "state.fmfs").read_bytes() == (fitted / "state.fmfs").read_bytes()


class TestRender:
    def test_matches_the_fit_render(self, synth: Path, fitted: Path, tmp_path: Path) -> None:
        args = ["render", "--config", str(synth / "config.json"), "--checkpoint", str(fitted / "state.fmfs"), "--out", str(tmp_path)]
        assert main(args) == ExitCode.SUCCESS
        assert (tmp_path / "render.png").read_bytes() == (fitted / "render_0.png").read_bytes()
        assert (tmp_path / "render_linear.png").is_file()

    def test_novel_view(self, synth: Path, fitted: Path, tmp_path: Path) -> None:
        args = ["render", "--config", str(synth / "config.json"), "--checkpoint", str(fitted / "state.fmfs"), "--out", str(tmp_path), "--yaw", "20"]
        assert main(args) == ExitCode.SUCCESS
        assert (tmp_path / "render.png").read_bytes() != (fitted / "render_0.png").read_bytes()

    def test_index_out_of_range(self, synth: Path, fitted: Path, tmp_path: Path) -> None:
        args = ["render", "--config", str(synth / "config.json"), "--checkpoint", str(fitted / "state.fmfs"), "--out", str(tmp_path), "--index", "3"]
        assert main(args) == ExitCode.CONFIG

    def test_corrupt_checkpoint(self, synth: Path, tmp_path: Path) -> None:
        checkpoint = tmp_path / "broken.fmfs"
        checkpoint.write_bytes(b"\x00garbage" * 8)
        args = ["render", "--config", str(synth / "config.json"), "--checkpoint", str(checkpoint), "--out", str(tmp_path)]
        assert main(args) == ExitCode.IO


def test_interpolate(synth: Path, fitted: Path, tmp_path: Path) -> None:
    state = str(fitted / "state.fmfs")
    args = ["interpolate", "--config", str(synth / "config.json"), "--a", state, "--b", state, "--steps", "3", "--out", str(tmp_path)]
    assert main(args) == ExitCode.SUCCESS
    frames = [(tmp_path / f"interpolate_{step}.png").read_bytes() for step in range(3)]
    assert frames[0] == frames[1] == frames[2] == (fitted / "render_0.png").read_bytes()
    assert (tmp_path / "strip.png").is_file()


def test_interpolate_needs_two_steps(synth: Path, fitted: Path, tmp_path: Path) -> None:
    state = str(fitted / "state.fmfs")
    args = ["interpolate", "--config", str(synth / "config.json"), "--a", state, "--b", state, "--steps", "1", "--out", str(tmp_path)]
    assert main(args) == ExitCode.CONFIG


def test_latent_pca(synth: Path, fitted: Path, tmp_path: Path) -> None:
    args = ["latent-pca", "--config", str(synth / "config.json"), "--samples", "100", "--checkpoint", str(fitted / "state.fmfs"), "--out", str(tmp_path)]
    assert main(args) == ExitCode.SUCCESS
    components = np.loadtxt(tmp_path / "components.txt")
    assert components.shape == (4, 4)
    np.testing.assert_allclose(components @ components.T, np.eye(4), atol=1e-9)
    variance = np.loadtxt(tmp_path / "explained_variance.txt")
    assert np.all(np.diff(variance) <= 0.0)
    assert (tmp_path / "component_0_+2.png").is_file()
    assert (tmp_path / "component_0_-2.png").is_file()


class TestAugment:
    def test_monk_target(self, fitted: Path, tmp_path: Path) -> None:
        assert main(["augment", "--albedo", str(fitted / "maps" / "diffuse.png"), "--mst", "5", "--out", str(tmp_path)]) == ExitCode.SUCCESS
        assert (tmp_path / "augmented.png").is_file()
        assert (tmp_path / "mask.png").is_file()

    def test_reference_albedo(self, fitted: Path, tmp_path: Path) -> None:
        albedo = str(fitted / "maps" / "diffuse.png")
        assert main(["augment", "--albedo", albedo, "--target", albedo, "--out", str(tmp_path)]) == ExitCode.SUCCESS

    def test_needs_exactly_one_target(self, fitted: Path, tmp_path: Path) -> None:
        albedo = str(fitted / "maps" / "diffuse.png")
        assert main(["augment", "--albedo", albedo, "--out", str(tmp_path)]) == ExitCode.CONFIG
        assert main(["augment", "--albedo", albedo, "--target", albedo, "--mst", "5", "--out", str(tmp_path)]) == ExitCode.CONFIG

    def test_missing_albedo(self, tmp_path: Path) -> None:
        assert main(["augment", "--albedo", str(tmp_path / "absent.png"), "--mst", "5", "--out", str(tmp_path)]) == ExitCode.IO


class TestErrors:
    def test_missing_inputs(self, tmp_path: Path) -> None:
        config = tmp_path / "run.toml"
        config.write_text(f'[paths]\nshape_model = "{tmp_path / "absent.fmsm"}"\n', encoding="utf-8")
        assert main(["fit", "--config", str(config), "--out", str(tmp_path), *QUIET]) == ExitCode.CONFIG

    def test_malformed_config(self, tmp_path: Path) -> None:
        config = tmp_path / "run.toml"
        config.write_text("seed = ", encoding="utf-8")
        assert main(["fit", "--config", str(config), *QUIET]) == ExitCode.CONFIG

    def test_unknown_scope(self) -> None:
        with pytest.raises(SystemExit) as info:
            main(["gradcheck", "--scope", "everything"])
        assert info.value.code == 2

    def test_unknown_command(self) -> None:
        with pytest.raises(SystemExit):
            main(["train"])


def test_gradcheck_command(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["gradcheck", "--scope", "losses"]) == ExitCode.SUCCESS
    assert "max relative error" in capsys.readouterr().out


@pytest.mark.slow
def test_augment_throughput(tmp_path: Path, rng: np.random.Generator) -> None:
    albedo = tmp_path / "albedo.png"
    save_texture(albedo, rng.uniform(0.2, 0.8, (3, 1024, 1024)))
    start = time.perf_counter()
    assert main(["augment", "--albedo", str(albedo), "--mst", "7", "--out", str(tmp_path / "out")]) == ExitCode.SUCCESS
    assert time.perf_counter() - start <= 2.5
