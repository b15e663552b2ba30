"""Build the extension with cargo, import it and exercise the main calls."""

import json
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates" / "core" / "fixtures"


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "repose-python"],
        cwd=ROOT,
        check=True,
    )
    built = ROOT / "target" / "release" / "librepose_py.so"
    dest = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(built, dest / "repose_py.so")
    sys.path.insert(0, str(dest))


def main():
    build()
    import repose_py as rp

    k = rp.Intrinsics(260.0, 260.0, 63.5, 63.5, 128, 128)
    mesh = rp.Mesh.load(str(FIXTURES / "blob.obj")).randomized(seed=1)
    assert mesh.vertex_count == 266 and mesh.face_count == 528

    truth = rp.Pose([0.2, -0.1, 0.05], [0.0, 0.0, 0.45])
    px = k.project(truth, [0.0, 0.0, 0.0])
    assert abs(px[0] - 63.5) < 1e-9 and abs(px[1] - 63.5) < 1e-9

    target = rp.render(mesh, truth, k)
    assert target.feature.masked_count() > 0
    assert len(target.depth) == 128 * 128

    start = rp.Pose([0.21, -0.09, 0.06], [0.003, -0.002, 0.455])
    result = rp.refine(target.feature, mesh, start, k)
    d = mesh.diameter()
    before = rp.add(start, truth, mesh)
    after = rp.add(result.pose, truth, mesh)
    assert after < before, (before, after)
    assert rp.add_s(result.pose, truth, mesh) <= after + 1e-12
    assert len(result.residual_norms) == 5

    assert abs(rp.auc([0.0, 0.05], 0.1) - 75.0) < 1.0

    report = json.loads(rp.run_benchmark(str(FIXTURES / "easy.json"), trials=8))
    assert report["n_trials"] == 8
    print(f"ok: ADD {before / d:.4f}d -> {after / d:.2e}d, easy acc {report['summary']['acc_at_0p1d_after']}")


if __name__ == "__main__":
    main()
