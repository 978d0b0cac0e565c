"""Smoke test for the `opis` extension module.

Build with `cargo build -p opis-py`, then put the library on the path as `opis.so`
(see README), and run `python3 python/smoke_test.py`.
"""

import math

import opis


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    a = opis.BBox(0, 0, 10, 10)
    b = opis.BBox(5, 0, 15, 10)
    assert close(a.iou(b), 1 / 3)
    assert close(opis.iou((0, 0, 10, 10), (5, 0, 15, 10)), 1 / 3)
    try:
        opis.BBox(5, 5, 1, 1)
        raise AssertionError("degenerate box accepted")
    except ValueError:
        pass

    kept = opis.nms([((0, 0, 10, 10), 0.9, 0), ((1, 0, 11, 10), 0.8, 0), ((0, 0, 10, 10), 0.7, 1)], 0.3)
    assert [d[1] for d in kept] == [0.9, 0.7]

    sc = opis.softmax_over_classes([[1.0, 2.0], [0.0, 0.0]])
    assert all(close(sum(col), 1.0) for col in zip(*sc))
    sd = opis.softmax_over_instances([[1.0, 2.0], [0.0, 0.0]])
    assert all(close(sum(row), 1.0) for row in sd)
    x_r, y = opis.midn_scores([[1.0, 2.0], [0.0, 0.0]], [[1.0, 2.0], [0.0, 0.0]])
    assert all(0.0 <= v <= 1.0 for v in y)
    loss = opis.midn_loss(y, [True, False])
    grad = opis.midn_loss_grad(y, [True, False])
    assert loss > 0 and len(grad) == 2

    centers, targets = opis.assign_labels(
        [(0, 0, 10, 10), (1, 1, 11, 11), (30, 30, 40, 40)],
        [[0.9, 0.5, 0.1], [0.0, 0.0, 0.0]],
        [True],
    )
    assert centers[0][:2] == (0, 0)
    assert [t["status"] for t in targets] == ["positive", "positive", "ignored"]

    assert opis.progressive_t(3120, 3120, 3999) == 0.0
    assert opis.ratio_mu(20.0, 1.0) == 4.0
    assert close(opis.neglect_threshold(0.5, 0.5, 3999, 3999), 1.0)

    s = opis.sample_negatives([(i, 0.1 + 0.4 * i / 40) for i in range(40)], 2, 5.0, seed=3)
    assert s["target"] == 10 and len(s["selected"]) == 10

    assert close(opis.reweight_normal(0.5, 0.7, 1.0, 1.0), math.exp(0.5))
    assert opis.reweight_attenuated(0.5, 0.7, 0.5, 1.0, 0.9, 1.0) < opis.reweight_normal(0.5, 0.7, 0.5, 1.0)
    assert opis.refinement_loss([(0, 1.0), (1, 1.0)], [[0.5, 0.2], [0.5, 0.8]], 1.0) > 0

    assert opis.gradcheck(0) <= 1e-5

    cfg = opis.Config.from_toml("[data]\nnum_proposals = 40\n[train]\niterations = 30\ntrain_scenes = 6\neval_scenes = 4\n")
    try:
        opis.Config.from_toml("[train]\nbogus = 1\n")
        raise AssertionError("unknown key accepted")
    except ValueError as e:
        assert "bogus" in str(e)
    model = opis.train(cfg.with_train(seed=1, method="opis"))
    assert len(model.trainlog.splitlines()) == 31
    metrics = model.evaluate()
    assert 0.0 <= metrics["mAP"] <= 1.0 and 0.0 <= metrics["CorLoc"] <= 1.0
    try:
        opis.train(opis.Config.from_toml(cfg.to_toml().replace("base_lr = 0.1", "base_lr = 1e200")))
        raise AssertionError("divergence not reported")
    except ArithmeticError:
        pass

    print("smoke test passed: mAP %.3f, CorLoc %.3f" % (metrics["mAP"], metrics["CorLoc"]))


if __name__ == "__main__":
    main()
