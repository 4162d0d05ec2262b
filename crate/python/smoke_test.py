"""Exercise the abp_py extension end to end.

Build and copy the module next to this script first:

    cargo build --release -p abp-python --features extension-module
    cp target/release/libabp_py.so python/abp_py.so
    python3 python/smoke_test.py
"""

import math
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import abp_py  # noqa: E402

SPEC = """latent_shape = 2
layer = dense in=2 out=2x4x4 activation=leaky_relu:0.2 normalize=false bias=false
layer = deconv in=2 out=1 kernel=3x3 up=2 activation=tanh normalize=false bias=false
"""


def main():
    spec = abp_py.Spec.from_text(SPEC)
    assert spec.latent_shape == [2]
    assert spec.output_shape == [1, 8, 8]
    assert abp_py.Spec.from_text(spec.to_text()).to_text() == spec.to_text()

    rng = random.Random(3)
    signals = [[0.5 * math.sin(0.3 * p + rng.uniform(0, 3)) for p in range(64)] for _ in range(8)]

    model = abp_py.Model.train(spec, signals, iterations=40, seed=1)
    again = abp_py.Model.train(spec, signals, iterations=40, seed=1)
    assert model.latents == again.latents, "training is not deterministic"
    assert len(model.losses) == 40
    assert model.losses[-1] < model.losses[0], model.losses[::10]

    recon = model.generate(model.latents)
    train_err = sum(abp_py.recovery_error(s, r) for s, r in zip(signals, recon)) / len(signals)
    pca = abp_py.pca_reconstruction(signals, signals, 2)
    pca_err = sum(abp_py.recovery_error(s, r) for s, r in zip(signals, pca)) / len(signals)
    print(f"train reconstruction error {train_err:.4f} (pca-2 {pca_err:.4f})")

    z = model.infer(signals[:2], steps=50, seed=4)
    assert len(z) == 2 and len(z[0]) == 2

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.abpc")
        model.save(path)
        loaded = abp_py.Model.load(path)
        assert loaded.iteration == 40
        assert loaded.sample(3, seed=9) == model.sample(3, seed=9)
        try:
            abp_py.Model.load(os.path.join(tmp, "missing.abpc"))
        except FileNotFoundError:
            pass
        else:
            raise AssertionError("missing checkpoint was accepted")

    mid = abp_py.slerp([1.0, 0.0], [0.0, 1.0], 0.5)
    assert abs(mid[0] - mid[1]) < 1e-12

    try:
        model.generate([[1.0, 2.0, 3.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("wrong latent size was accepted")

    print(f"abp_py {abp_py.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
