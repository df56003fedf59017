"""Smoke test for the `lbvae` extension module.

Build and install first, e.g. `maturin develop --release -m crates/python/Cargo.toml`,
or put the compiled `liblbvae.so` on PYTHONPATH as `lbvae.so`.
"""

import json
import sys

import lbvae


def main() -> int:
    cfg = lbvae.sample_config(seed=1, n=20, m=5, s=3)
    assert json.loads(cfg)["n"] == 20

    collapsed = lbvae.fixed_point(cfg, beta=4.0, lam=0.0, seed=3)
    assert collapsed["converged"] and collapsed["collapsed"], collapsed
    assert collapsed["metrics"]["im"] <= 1e-8
    assert collapsed["max_sigma_w_spectral_norm"] <= 1.0 + 1e-12

    restored = lbvae.fixed_point(cfg, beta=4.0, lam=8.0, seed=3)
    assert not restored["collapsed"]
    assert restored["metrics"]["im"] > 0.1

    trivial = lbvae.fixed_point(cfg, beta=1.0, max_iter=1)
    assert trivial["trivial_distance"] == 0.0

    adam = lbvae.optimize(cfg, beta=2.0, lam=0.0, seed=0, steps=500)
    assert adam["steps"] == 500

    try:
        lbvae.fixed_point(cfg, beta=0.5, seed=1)
    except ArithmeticError:
        pass
    else:
        raise AssertionError("beta < 1 should fail numerically")

    sweep_cfg = json.dumps(
        {"n": 10, "m": 3, "s": 2, "beta_grid": [2.0, 8.0], "lambda_grid": [0.0, 8.0], "trials": 2}
    )
    csv_a = lbvae.sweep(sweep_cfg, seed=7, threads=1)
    csv_b = lbvae.sweep(sweep_cfg, seed=7, threads=2)
    assert csv_a == csv_b
    assert len(csv_a.splitlines()) == 1 + 2 * 2 * 2

    rows = lbvae.aggregate_records(csv_a)
    assert len(rows) == 4 and rows[0]["metrics"]["im"]["count"] == 2

    fidelity = lbvae.select(csv_a, w1=1.0)
    disentangle = lbvae.select(csv_a, w1=0.0)
    assert fidelity["beta"] <= disentangle["beta"]

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
