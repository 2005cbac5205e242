"""Object identity behind a wall stays uncertain; in plain view it is not.

A dumbbell sits behind a wall. Seen from the wall's side, nothing in the
depth image distinguishes a dumbbell from a hammer, so the posterior over
the type stays near even. From the other side the object is in plain view
and the posterior commits to the right type.

    python3 demos/occlusion.py
"""

import math

import numpy as np

from depthscene import shapes
from depthscene.generative import CameraPrior, SceneModel, camera_from_params
from depthscene.geometry import CameraIntrinsics
from depthscene.inference import posterior_object_marginal, run_smc
from depthscene.likelihood import NoiseParams, sample_observation
from depthscene.render import render_depth
from depthscene.scene import ContactParams, ObjectModel, SceneGraph


def main():
    k = CameraIntrinsics.from_fov(48, 48, 40.0, 0.01, 5.0)
    lib = shapes.make_library(["dumbbell", "hammer"])
    model = SceneModel(lib, k, camera_prior=CameraPrior((0.6, 0.8)))
    wall = ObjectModel.from_grid(-2, shapes.box(40, 2, 25), "occluder")
    known = SceneGraph(model.table).add_child(wall, 1, ContactParams(0.05, 0.1, 0.0))
    scene = known.add_child(lib[0], 1, ContactParams(0.15, 0.25, 0.4))
    rng = np.random.default_rng(1)
    for view, az in (("behind the wall", -math.pi / 2), ("in plain view", math.pi / 2)):
        cam = camera_from_params(0.6, az, math.radians(35))
        hidden = render_depth(scene, cam, k) == render_depth(known, cam, k)
        obs = sample_observation(render_depth(scene, cam, k), k, NoiseParams(0.05, 0.005), rng)
        res = run_smc(obs, cam, 1, model, P=100, rng=rng, known=known)
        m = posterior_object_marginal(res.particles, [0, 1])
        print(f"{view:16s} fully hidden: {hidden!s:5s}  P(dumbbell) {m[0]:.3f}  P(hammer) {m[1]:.3f}")


if __name__ == "__main__":
    main()
