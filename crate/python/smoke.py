"""Smoke test for the deepbow Python bindings.

Build and install first:  pip install --no-build-isolation -e crates/python
"""

import math
import random
import tempfile
from pathlib import Path

import deepbow


def check_codebook():
    rng = random.Random(0)
    blobs = [(-3.0, 0.0), (3.0, 1.0)]
    points = [[cx + rng.gauss(0, 0.3), cy + rng.gauss(0, 0.3)] for cx, cy in blobs for _ in range(200)]
    cb = deepbow.Codebook.fit(points, k=2, batch_size=64, epochs=10, seed=1)
    assert (cb.k, cb.dim) == (2, 2)
    centres = sorted(cb.centroids)
    assert abs(centres[0][0] + 3.0) < 0.2 and abs(centres[1][0] - 3.0) < 0.2, centres
    assert cb.objective(points) > 0.0

    tie = deepbow.Codebook([[-1.0, 0.0], [1.0, 0.0]])
    assert tie.assign([0.0, 0.0]) == 0

    # C=2, H=W=2: two locations on word 0, two on word 1
    hist = tie.histogram([-1.0, 1.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0], (2, 2, 2))
    assert hist == [0.5, 0.5], hist

    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "codebook.bin")
        digest = cb.save(path)
        assert len(digest) == 64
        assert deepbow.Codebook.load(path).centroids == cb.centroids


def check_images():
    n = 4
    pixels = bytes(range(n * n * 3))
    once = deepbow.rotate_image(pixels, n, 1)
    assert once != pixels
    four = pixels
    for _ in range(4):
        four = deepbow.rotate_image(four, n, 1)
    assert four == pixels
    assert deepbow.rotate_image(deepbow.rotate_image(pixels, n, 1), n, 2) == deepbow.rotate_image(pixels, n, 3)

    img = bytes(random.Random(1).randrange(256) for _ in range(32 * 32 * 3))
    a = deepbow.perturb_image(img, 32, 32, seed=7)
    assert a == deepbow.perturb_image(img, 32, 32, seed=7)
    assert len(deepbow.perturb_image(img, 32, 32, seed=7, classifier=True)) == len(img)


def check_losses():
    k = 2048
    uniform = [[1.0 / k] * k]
    assert abs(deepbow.soft_cross_entropy(uniform, uniform) - math.log(k)) < 1e-3

    logits = [[2.0, 0.5, -1.0], [0.0, 3.0, 1.0]]
    labels = [0, 2]
    probs = [[math.exp(v) / sum(math.exp(u) for u in row) for v in row] for row in logits]
    onehot = [[1.0 if j == l else 0.0 for j in range(3)] for l in labels]
    assert abs(deepbow.hard_cross_entropy(logits, labels) - deepbow.soft_cross_entropy(probs, onehot)) < 1e-5
    assert deepbow.top1_accuracy(logits, labels) == 0.5

    p = deepbow.bow_predict([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], 10.0)
    assert abs(sum(p[0]) - 1.0) < 1e-6 and p[0][0] > p[0][1]


def check_scheduler():
    sched = deepbow.PlateauScheduler(0.1)
    lrs = [sched.step(1.0) for _ in range(11)]
    assert lrs[:10] == [0.1] * 10 and abs(lrs[10] - 0.01) < 1e-12, lrs
    assert sched.reductions == 1


def check_cli():
    try:
        deepbow.run(["no-such-command"])
    except ValueError:
        pass
    else:
        raise AssertionError("unknown subcommand accepted")


def main():
    check_codebook()
    check_images()
    check_losses()
    check_scheduler()
    check_cli()
    print("python smoke test passed")


if __name__ == "__main__":
    main()
