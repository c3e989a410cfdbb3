"""Smoke test for the bootseg_py extension.

Build and install first, e.g.
    maturin build --release -m crates/python/Cargo.toml -o dist && pip install dist/*.whl
then run `python crates/python/python/smoke_test.py`.
"""

import json
import math
import tempfile
from pathlib import Path

import bootseg_py as bs


def perfect_maps(sample, k):
    """One-hot scores and exact box codes at full resolution."""
    h, w = sample.height, sample.width
    plane = h * w
    probs = [0.0] * ((k + 1) * plane)
    codes = [0.0] * (4 * k * plane)
    boxes = {rid: (cat, b) for rid, cat, b in sample.records}
    for p, rid in enumerate(sample.instances):
        if rid == 0 or rid not in boxes:
            probs[p] = 1.0
            continue
        cat, b = boxes[rid]
        probs[cat * plane + p] = 1.0
        y, x = p // w + 0.5, p % w + 0.5
        code = [
            (b.y_min + b.y_max) / 2 - y,
            (b.x_min + b.x_max) / 2 - x,
            math.log(b.y_max - b.y_min),
            math.log(b.x_max - b.x_min),
        ]
        for j, v in enumerate(code):
            codes[(4 * (cat - 1) + j) * plane + p] = v
    return bs.Tensor([k + 1, h, w], probs), bs.Tensor([4 * k, h, w], codes)


def main():
    assert bs.compute_fov(8, 3, 12) == 200
    rows = bs.fov_table()
    assert rows and all(bs.compute_fov(r[2], r[3], r[4]) == r[5] for r in rows)

    a, b = bs.BBox(0, 0, 10, 10), bs.BBox(0, 5, 10, 15)
    assert abs(a.iou(b) - 1 / 3) < 1e-12
    assert bs.mask_iou([1, 2, 3], [2, 3, 4]) == 0.5
    try:
        bs.BBox(5, 0, 1, 1)
        raise AssertionError("inverted box accepted")
    except ValueError:
        pass

    scene = {
        "image_height": 32,
        "image_width": 32,
        "num_categories": 2,
        "instances_per_image": [1, 3],
        "size_range": [6, 14],
        "class_skew": [1.0, 1.0],
        "seed": 3,
    }
    s = bs.generate_sample(json.dumps(scene), 0)
    assert s.image.dims == [3, 32, 32]
    assert len(s.semantic) == 32 * 32 and s.records

    # uniform scores: every pixel is hard, loss is log(K+1)
    probs = bs.Tensor([3, 32, 32], [1 / 3] * (3 * 32 * 32))
    loss, kept, _ = bs.bootstrapped_cross_entropy(probs, s.semantic)
    assert kept == 32 * 32 and abs(loss - math.log(3)) < 1e-6

    # perfect maps recover the scene's instances
    p, t = perfect_maps(s, 2)
    hyps = bs.assemble(p, t, 1)
    assert len(hyps) >= 1
    gts = [(cat, [i for i, v in enumerate(s.instances) if v == rid]) for rid, cat, _ in s.records]
    preds = [(h.category, h.confidence, h.pixels) for h in hyps]
    print(f"{len(hyps)} hypotheses for {len(gts)} instances, "
          f"mAP^r@0.5 {bs.map_r([(preds, gts)], 2, 0.5):.3f}")
    assert bs.map_r([([(c, 1.0, px) for c, px in gts], gts)], 2, 0.5) == 1.0
    report = json.loads(bs.instance_report_json([(preds, gts)], 2))
    assert report["num_ground_truth"] == len(gts)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        assert bs.generate_dataset(json.dumps(scene), 4, tmp / "data") == 4
        net = {
            "num_categories": 2,
            "stem": {"kernel": 3, "stride": 2, "channels": 8},
            "stages": [{"blocks": 1, "channels": 8, "stride": 2}],
            "target_output_stride": 4,
            "classifier_kernel": 3,
            "classifier_dilation": 1,
            "head": "localization",
        }
        cfg = {
            "network": net,
            "batch_size": 2,
            "crop_size": 32,
            "iterations": 5,
            "seed": 1,
            "manifest": "data/manifest.json",
        }
        (tmp / "loc.json").write_text(json.dumps(cfg))
        losses = bs.train(tmp / "loc.json", tmp / "loc")
        assert len(losses) == 5 and all(math.isfinite(x) for x in losses)

        out = json.loads(bs.end_to_end(tmp / "loc", tmp / "data/manifest.json", oracle=True, out_dir=tmp / "e2e"))
        assert out["num_images"] == 4 and out["oracle_semantic"]
        assert (tmp / "e2e/report.json").exists()
        try:
            bs.end_to_end(tmp / "loc", tmp / "data/manifest.json")
            raise AssertionError("missing semantic source accepted")
        except ValueError:
            pass

    print("smoke test passed")


if __name__ == "__main__":
    main()
