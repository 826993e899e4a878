"""Smoke test for the egodiff Python extension.

Builds the extension with cargo unless EGODIFF_LIB points at a built
library, then runs a tiny end-to-end pipeline in a temporary directory.
"""

import importlib.machinery
import importlib.util
import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_library() -> Path:
    subprocess.run(
        ["cargo", "build", "--release", "-p", "egodiff-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    return ROOT / "target" / "release" / "libegodiff_py.so"


def load(lib: Path, workdir: Path):
    target = workdir / "egodiff.so"
    shutil.copy(lib, target)
    loader = importlib.machinery.ExtensionFileLoader("egodiff", str(target))
    spec = importlib.util.spec_from_loader("egodiff", loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def check_geometry(ed):
    r = ed.axis_angle_to_matrix([0.0, 0.0, math.pi / 2])
    assert abs(r[0][1] + 1.0) < 1e-12 and abs(r[1][0] - 1.0) < 1e-12
    aa = ed.matrix_to_axis_angle(r)
    assert max(abs(a - b) for a, b in zip(aa, [0.0, 0.0, math.pi / 2])) < 1e-9

    joints = ed.forward_kinematics([0.0] * 75)
    assert len(joints) == 24 and joints[0] == [0.0, 0.0, 0.0]

    gt = [[[0.0, 0.0, 0.0]] * 2] * 3
    pred = [[[0.003, 0.0, 0.004]] * 2] * 3
    assert abs(ed.mpjpe(pred, gt) - 5.0) < 1e-9
    assert abs(ed.translation_error([[1.0, 1.0, 0.0]], [[0.0, 0.0, 0.0]]) - 1000 * math.sqrt(2)) < 1e-6

    sched = ed.NoiseSchedule(1000)
    ab = sched.alpha_bars
    assert len(ab) == 1000 and all(x > y for x, y in zip(ab, ab[1:]))
    z = sched.q_sample([1.0, 2.0], 1000, [0.0, 0.0])
    assert abs(z[1] - 2.0 * math.sqrt(ab[-1])) < 1e-5


def check_data(ed):
    eps = ed.generate_episodes("face-to-face", frames=12, kappa=1.0, count=2, seed=3, scene_points=64)
    assert len(eps) == 2
    seq = eps[0].wearer
    assert seq.frames == 12 and seq.joints == 24 and len(seq.to_list()) == 12 * 75
    assert len(eps[0].scene) == 64
    again = ed.generate_episodes("face-to-face", frames=12, kappa=1.0, count=2, seed=3, scene_points=64)
    assert again[1].wearer.to_list() == eps[1].wearer.to_list()
    m = ed.compare_sequences(seq, seq)
    assert m["mpjpe"] == 0.0


def check_pipeline(ed, workdir: Path):
    cfg = ed.ExperimentConfig({
        "frames": "8", "lookahead": "4", "scene_points": "64", "train_episodes": "6",
        "test_episodes": "2", "latent_dim": "16", "vae_layers": "1", "vae_heads": "2",
        "vae_ff_dim": "32", "vae_steps": "3", "vae_batch_size": "2", "denoiser_hidden": "16",
        "denoiser_layers": "1", "denoiser_heads": "2", "denoiser_ff_dim": "32",
        "denoiser_steps": "3", "denoiser_batch_size": "2", "scene_hidden": "8,16",
        "scene_encoder_points": "16", "scene_warmup_steps": "2", "diffusion_steps": "20",
        "inference_steps": "4", "samples": "2", "future_offset": "2",
    })
    cfg.validate()
    assert cfg.get("frames") == "8"

    data, vae, den = workdir / "data.bin", workdir / "vae.ckpt", workdir / "den.ckpt"
    assert ed.generate_data(cfg, data) == 8
    losses = ed.train_vae(cfg, data, vae)
    assert len(losses) == 3 and all(math.isfinite(x) for x in losses)
    losses, frozen = ed.train_denoiser(cfg, data, vae, den, workdir / "scene.ckpt")
    assert frozen and len(losses) == 3
    info = ed.inspect_checkpoint(vae)
    assert info["kind"] == "vae" and info["config.latent_dim"] == "16"

    report = ed.evaluate(cfg, data, vae, den, workdir / "eval", workdir / "scene.ckpt")
    assert all(math.isfinite(v) for v in report.values())
    assert report["best_mpjpe"] <= report["mean_mpjpe"] + 1e-9
    assert (workdir / "eval" / "metrics.csv").exists()

    rows = ed.ablate(cfg, "distance", data, vae, workdir / "dist.csv", den, workdir / "scene.ckpt")
    assert sum(count for _, count, _ in rows) == 2

    try:
        ed.train_vae(cfg, workdir / "nope.bin", vae)
    except FileNotFoundError:
        pass
    else:
        raise AssertionError("missing dataset was accepted")
    try:
        ed.ExperimentConfig({"latent_dim": "-1"})
    except ValueError:
        pass
    else:
        raise AssertionError("bad override was accepted")


def main() -> int:
    lib = Path(os.environ["EGODIFF_LIB"]) if "EGODIFF_LIB" in os.environ else build_library()
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        ed = load(lib, workdir)
        check_geometry(ed)
        check_data(ed)
        check_pipeline(ed, workdir)
    print(f"egodiff {ed.__version__}: smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
