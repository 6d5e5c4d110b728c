"""Smoke test for the Python bindings.

Build the extension and run this script:

    cargo build --release -p fdi-py --features extension-module
    cp target/release/libfdi.so python/fdi.so
    python3 python/smoke_test.py
"""
import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import fdi  # noqa: E402

SMALL = [
    "cube.height=32",
    "cube.width=32",
    "cube.days_per_year=60",
    "cube.fire_window=[10,50]",
    "cube.target_fires_per_year=80",
    "sampling.patch_size=9",
    "train.epochs=2",
    "train.batch_size=32",
    "eval.nofire_days=2",
]


def main():
    cfg = fdi.RunConfig("", SMALL)
    assert cfg.hash() == fdi.RunConfig("", SMALL).hash()

    cube = fdi.DataCube.generate(cfg)
    h, w, days = cube.shape
    assert (h, w) == (32, 32) and days == 180, cube.shape
    assert len(cube.frame(0, 0)) == h * w
    fires, nofires = cube.sample_count(cfg)
    assert fires > 0 and nofires == 2 * fires, (fires, nofires)

    with tempfile.TemporaryDirectory() as tmp:
        cube.save(os.path.join(tmp, "cube"))
        again = fdi.DataCube.load(os.path.join(tmp, "cube"))
        assert again.frame(3, 17) == cube.frame(3, 17)

        [(model, f1)] = fdi.train_models(cfg, cube)
        assert model.architecture == "BasicCNN"
        assert model.param_count > 0
        assert 0.0 <= f1 <= 1.0
        assert len(model.history()) == 2

        model.save(os.path.join(tmp, "model"))
        loaded = fdi.Model.load(os.path.join(tmp, "model"))

        date = days - 20
        a = model.infer(cube, date)
        b = loaded.infer(cube, date)
        va, vb = a.values(), b.values()
        assert a.valid_count() > 0
        assert all((math.isnan(x) and math.isnan(y)) or x == y for x, y in zip(va, vb))
        assert all(math.isnan(v) or 0.0 <= v <= 1.0 for v in va)

        avg = fdi.average_maps([a, b])
        assert avg.valid_count() == a.valid_count()

    report = json.loads(fdi.evaluate_models(cfg, cube, [model]))
    assert len(report["daily_recall"]) > 0
    assert len(report["distributions"]) == 2

    try:
        fdi.RunConfig("", ["cube.no_such_key=1"])
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    print(f"ok: {fires} fire samples, test F1 {f1:.3f}, {a.valid_count()} valid pixels")


if __name__ == "__main__":
    main()
