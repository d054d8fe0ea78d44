"""Smoke test for the staticsplat Python bindings."""

import math
import tempfile
from pathlib import Path

import staticsplat_py as ss


def main():
    assert ss.build_graph(3) == [(0, 1), (1, 0), (1, 2), (2, 1)]
    assert ss.split_frames(20)[1] == [9, 19]

    intr = ss.Intrinsics(20.0, 16, 16)
    pose = ss.Pose()
    cloud = ss.GaussianCloud()
    cloud.add_isotropic([0.0, 0.0, 2.0], 0.3, [0.8, 0.2, 0.1], 0.9)
    cloud.add_isotropic([0.3, 0.0, 3.0], 0.3, [0.1, 0.2, 0.8], 0.9, staticness=0.0)
    assert len(cloud) == 2

    img = ss.render(cloud, pose, intr)
    assert len(img) == 16 and len(img[0]) == 16
    center = img[8][8]
    assert center[0] > 0.5, center

    plain = ss.render(cloud, pose, intr, mode="plain")
    static = ss.render(cloud.prune_dynamic(0.5), pose, intr, mode="plain")
    diff = max(abs(a - b) for ra, rb in zip(img, static) for pa, pb in zip(ra, rb) for a, b in zip(pa, pb))
    assert diff < 1e-7, diff
    assert plain != img

    mask = [[0.0] * 16 for _ in range(16)]
    assert ss.masked_psnr(img, img, mask) == 99.0
    assert abs(ss.ssim(img, img) - 1.0) < 1e-12
    assert ss.mask_iou(mask, mask) == 1.0

    traj = [ss.Pose.from_axis_angle([0.0, 0.01 * i, 0.0], [0.1 * i, 0.0, 0.02 * i * i]) for i in range(6)]
    m = ss.trajectory_metrics(traj, traj)
    assert m["ate"] < 1e-12 and m["rpe_rot"] < 1e-6

    scene = ss.SyntheticScene(width=16, height=12, frames=4, dynamic=1, seed=2, coverage=0.2)
    assert len(scene) == 4
    assert abs(scene.coverage - 0.2) < 0.05
    assert len(scene.frame(0)) == 12 and len(scene.mask(3)[0]) == 16
    assert scene.intrinsics.width == 16

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "cloud.ply"
        cloud.save(str(path))
        back = ss.GaussianCloud.load(str(path))
        assert back.positions() == cloud.positions()
        scene.write(str(Path(tmp) / "scene"))
        assert (Path(tmp) / "scene" / "manifest.json").exists()

    try:
        ss.Intrinsics(-1.0, 4, 4)
    except ValueError:
        pass
    else:
        raise AssertionError("negative focal accepted")
    assert math.isclose(pose.inverse().translation[0], 0.0)
    print("smoke test passed")


if __name__ == "__main__":
    main()
