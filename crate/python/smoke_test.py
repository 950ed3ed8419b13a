"""Smoke test for the matchreg extension module.

Build first, e.g. `maturin develop -m crates/python/Cargo.toml --release`,
or copy target/release/libmatchreg.so next to this file as matchreg.so.
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np

import matchreg as mr


def rot_z(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]


def check_geometry():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(20, 3)).tolist()
    gt = mr.Pose(rot_z(30.0), [0.1, -0.2, 0.3])
    dst = gt.apply(src)
    est = mr.weighted_kabsch(src, dst, [(i, i, 1.0) for i in range(20)])
    assert mr.rotation_error(est.rotation, gt.rotation) < 1e-8
    assert mr.translation_error(est.translation, gt.translation) < 1e-8
    ident = gt.compose(gt.inverse())
    assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)

    refined, iters, converged, residuals = mr.icp_refine(src, dst, mr.Pose(rot_z(27.0), [0.1, -0.2, 0.3]))
    assert mr.rotation_error(refined.rotation, gt.rotation) < 0.5, (iters, converged)
    assert all(b <= a + 1e-12 for a, b in zip(residuals, residuals[1:]))

    score, ok = mr.add_score(src, gt, gt, 1.0)
    assert score == 0.0 and ok


def check_sinkhorn():
    scores = np.random.default_rng(1).normal(size=(6, 4)).tolist()
    p = np.asarray(mr.sinkhorn(scores, iters=200))
    assert p.shape == (7, 5)
    assert np.allclose(p[:-1].sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(p[:, :-1].sum(axis=0), 1.0, atol=1e-6)
    try:
        mr.sinkhorn(scores, lambda_=0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("lambda 0 accepted")


def check_pipeline():
    synth = json.dumps({"m": 64, "n": 32, "shapes": ["wedge", "l_block"]})
    pair = mr.generate_pair(synth, seed=3)
    assert len(pair.source) == 64 and len(pair.target) == 32
    with tempfile.TemporaryDirectory() as d:
        mr.write_dataset(d, 4, synth)
        pairs = mr.read_dataset(d)
        assert len(pairs) == 4
        net, losses = mr.train(d, json.dumps({"iterations": 3, "batch_size": 2, "checkpoint_every": 0}))
        assert len(losses) == 3 and all(math.isfinite(l) for l in losses)
        path = os.path.join(d, "model.json")
        net.save(path)
        again = mr.Network.load(path)
        assert again.parameter_count == net.parameter_count > 0
        reg = mr.register(net, pairs[0].source, pairs[0].target, tau=0.0)
        assert len(reg.pose.rotation) == 3
        report = mr.evaluate(None, d)
        assert report["rotation_map"]
        report = mr.evaluate(net, d)
        assert report["mean_pred_matches"] >= 0.0
    try:
        mr.read_dataset("/nonexistent/dataset")
    except OSError:
        pass
    else:
        raise AssertionError("missing dataset accepted")


def check_probe():
    small, _ = mr.svd_gradient_probe(1e-3)
    large, _ = mr.svd_gradient_probe(1.0)
    assert small >= 10.0 * large


if __name__ == "__main__":
    for check in (check_geometry, check_sinkhorn, check_pipeline, check_probe):
        check()
        print(f"ok  {check.__name__}")
