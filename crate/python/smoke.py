"""Smoke test for the fcvsr_py extension.

Build first:  cargo build --release -p fcvsr-py
Then run:     python3 python/smoke.py
(or install with `maturin develop -m crates/py/Cargo.toml`).
"""

import importlib
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        return importlib.import_module("fcvsr_py")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libfcvsr_py.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "fcvsr_py.so"))
            sys.path.insert(0, tmp)
            return importlib.import_module("fcvsr_py")
    sys.exit("fcvsr_py not built; run `cargo build --release -p fcvsr-py`")


def frame(c, h, w, phase):
    data = [0.5 + 0.4 * math.sin(0.3 * i + phase) for i in range(c * h * w)]
    return ([c, h, w], data)


def main():
    m = load_module()

    breakdown = dict(m.parameter_breakdown("fcvsr"))
    print("FCVSR parameters:", breakdown["total"])
    assert breakdown["total"] == sum(v for k, v in breakdown.items() if k != "total")

    masks = m.bandpass_masks(16, 16, 4)
    total = [sum(vals) for vals in zip(*(v for _, v in masks))]
    centre = 8 * 16 + 8
    assert abs(total[centre] - 1.0) < 1e-9

    x = frame(3, 16, 16, 0.0)
    assert m.psnr(x, x) == 100.0
    assert abs(m.ssim(x, x) - 1.0) < 1e-12
    assert m.charbonnier(x, x) == 1e-4
    ll, lh, hl, hh = m.haar(x)
    energy = sum(v * v for v in x[1])
    bands = sum(v * v for b in (ll, lh, hl, hh) for v in b[1])
    assert abs(energy - bands) < 1e-9

    model = m.Model("fcvsr-s", channels=8, seed=1)
    window = [frame(3, 8, 8, 0.1 * t) for t in range(7)]
    shape, sr = model.infer(window)
    assert shape == [3, 32, 32], shape
    assert all(0.0 <= v <= 1.0 for v in sr)

    model.zero_residual()
    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        again = m.Model.load(d)
        assert again.infer(window) == model.infer(window)
    print("smoke ok")


if __name__ == "__main__":
    main()
