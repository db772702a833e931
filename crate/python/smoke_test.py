"""Smoke test for the pointcot extension module.

Build and run from the repository root:

    cargo build --release -p pointcot-py
    cp target/release/libpointcot_py.so python/pointcot.so
    python3 python/smoke_test.py
"""

import math
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import pointcot  # noqa: E402


def main() -> None:
    rig = pointcot.CameraRig()
    assert len(rig) == 8
    for u, v, depth in rig.project([0.0, 0.0, 0.0]):
        assert abs(u - 0.5) < 1e-9 and abs(v - 0.5) < 1e-9 and depth > 0

    cloud = pointcot.PointCloud([[math.cos(t), math.sin(t), 0.1 * t] for t in range(40)], "spiral")
    unit = cloud.normalized()
    assert max(math.dist(p, (0, 0, 0)) for p in unit.points) <= 1 + 1e-9
    idx = unit.farthest_point_sample(8)
    assert len(set(idx)) == 8 and idx[0] == 0

    assert pointcot.exact_match(" Yes", "yes ")
    assert pointcot.bleu4("a b c d", "a b c d") == 1.0
    assert pointcot.assertions("count(leg)=3 and exists(handle)=false") == ["count(leg)=3", "exists(handle)=false"]

    with tempfile.TemporaryDirectory() as tmp:
        corpus = Path(tmp) / "corpus"
        summary = pointcot.generate(str(corpus), objects=12, seed=1, n_points=256)
        assert summary["records"] == 36
        assert summary["train"] + summary["val"] + summary["test"] == 12

        model = pointcot.Model(seed=1)
        log = model.train(str(corpus), mode="explicit", stage=1, steps=3)
        assert len(log) == 3 and log[0]["pred_detached"]
        report = model.evaluate(str(corpus), split="test", mode="explicit", max_len=8)
        assert report["split"] == "test"

        ckpt = Path(tmp) / "m.ckpt"
        model.save(str(ckpt))
        again = pointcot.Model.load(str(ckpt))
        assert again.num_parameters == model.num_parameters
        out = again.infer(cloud, "how many legs does the chair have ?", mode="explicit", max_len=8)
        assert set(out) >= {"rationale", "answer", "complete", "assertions"}

    groups = pointcot.gradcheck(1)
    assert all(g["passed"] for g in groups), groups
    print("python smoke test ok:", [g["group"] for g in groups])


if __name__ == "__main__":
    main()
