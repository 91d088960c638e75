import math

import numpy as np
import pytest

from qualdiff.errors import InvalidInputError
from qualdiff.metrics import C1, C2, format_db, psnr, ssim


def brute_psnr(a, b):
    flat_a, flat_b = a.ravel().tolist(), b.ravel().tolist()
    mse = sum((x - y) ** 2 for x, y in zip(flat_a, flat_b)) / len(flat_a)
    return 10 * math.log10(1 / mse)


def brute_ssim(a, b, win=8):
    """Windowed SSIM written straight from the definition, one window at a time."""
    h, w, c = a.shape
    per_channel = []
    for ch in range(c):
        vals = []
        for i in range(h - win + 1):
            for j in range(w - win + 1):
                xs = [a[i + u, j + v, ch] for u in range(win) for v in range(win)]
                ys = [b[i + u, j + v, ch] for u in range(win) for v in range(win)]
                n = len(xs)
                mx, my = sum(xs) / n, sum(ys) / n
                vx = sum((x - mx) ** 2 for x in xs) / n
                vy = sum((y - my) ** 2 for y in ys) / n
                cxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
                vals.append(((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2)))
        per_channel.append(sum(vals) / len(vals))
    return sum(per_channel) / c


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (16, 16, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(psnr(a, b) - brute_psnr(a, b)) < 1e-9
    assert abs(ssim(a, b) - brute_ssim(a, b)) < 1e-9


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(0, 0.9, (8, 8, 3))
    assert psnr(a, a) == math.inf and format_db(psnr(a, a)) == "inf"
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    b = np.random.default_rng(1).uniform(0, 1, a.shape)
    assert psnr(a, b) == psnr(b, a)


def test_ssim_identity_and_grayscale():
    a = np.random.default_rng(0).uniform(0, 1, (12, 12, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-15)
    assert ssim(a[..., 0], a[..., 0]) == pytest.approx(1.0, abs=1e-15)


def test_ssim_of_negated_zero_mean_pattern_is_negative():
    yy, xx = np.mgrid[:16, :16]
    pattern = np.where((yy + xx) % 2 == 0, 0.25, -0.25)[..., None].repeat(3, axis=2)
    assert ssim(pattern, -pattern) < 0
    assert ssim(0.5 + pattern, 0.5 - pattern) < 0


def test_ssim_constant_shift_within_stabiliser_tolerance():
    yy, xx = np.mgrid[:16, :16]
    board = np.where((yy // 2 + xx // 2) % 2 == 0, 0.3, 0.5)[..., None].repeat(3, axis=2)
    other = board + np.random.default_rng(0).normal(0, 0.02, board.shape)
    base = ssim(board, other)
    assert abs(ssim(board + 0.2, other + 0.2) - base) <= 1e-3
    assert -1 <= base <= 1


def test_metric_errors():
    with pytest.raises(InvalidInputError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))
