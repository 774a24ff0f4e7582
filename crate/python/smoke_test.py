"""Smoke test for the sonar_loop_py extension module.

Build the module first, e.g. `maturin develop -m crates/python/Cargo.toml`,
or build the cdylib with `--features extension-module` and put it on
PYTHONPATH as sonar_loop_py.so.
"""

import math
import random
import tempfile

import sonar_loop_py as sl


def patch(seed, angle=0.0):
    rng = random.Random(seed)
    c, s = math.cos(angle), math.sin(angle)
    pts = []
    for _ in range(400):
        x, y = rng.uniform(-10, 10), rng.uniform(-10, 10)
        z = 0.5 * math.sin(0.7 * x) * math.cos(0.4 * y) + 0.05 * x
        pts.append([c * x - s * y, s * x + c * y, z])
    return pts


def main():
    assert abs(sl.point_similarity(2.0, 4.0) - 0.5) < 1e-7
    assert abs(sl.map_similarity([1.0, 2.0], [1.0, 2.0]) - 0.75) < 1e-7

    a = sl.compute_features(patch(1))
    b = sl.compute_features(patch(1, angle=1.3))
    assert len(a) == 400 and len(sl.FeatureSet.names) == 6
    assert abs(a.similarity(b) - a.similarity(a)) < 1e-6
    assert len(a.map("g_mean")) == 400

    data = sl.simulate("pond", seed=1)
    assert data.d == 10.0 and data.has_truth and data.pings > 0
    with tempfile.TemporaryDirectory() as tmp:
        data.save(tmp)
        data = sl.Dataset.load(tmp)
    result = data.detect(stride=8, gamma=0.5)
    assert result["scores"] and "loops" in result
    summary = data.evaluate(result["scores"])
    assert 0.0 <= summary["ap"] <= 1.0 and summary["positives"] > 0
    print(f"ok: {data!r}, {len(result['scores'])} pairs, AP {summary['ap']:.4f}")


if __name__ == "__main__":
    main()
