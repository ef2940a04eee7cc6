"""Smoke test for the irglab extension module.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import math

import irglab


def main():
    er = irglab.Model.erdos_renyi(10, 2.0)
    assert abs(er.critical_time() - 1.0) < 1e-12

    # singletons in Erdos-Renyi have density exp(-t)
    rows = er.densities([0.5, 1.0])
    for t, row in zip([0.5, 1.0], rows):
        assert abs(row[1] - math.exp(-t)) < 1e-8, (t, row[1])

    # isolated-vertex density matches the Borel law at k = 1
    assert abs(rows[0][1] - irglab.borel_pmf(0.5, 1)) < 1e-8

    curves = irglab.er_curves(2.0)
    assert abs(curves["rho"] - 0.7968121300200202) < 1e-9

    two = irglab.Model(
        [[2.0, 1.0], [1.0, 2.0]], [0.6, 0.4], 4, 0.5,
        lambda_=[[0.5, -0.2], [-0.2, 0.3]], psi=[0.3, -0.3],
    )
    cov = two.covariance(0.3)
    n = len(two.type_vectors())
    assert len(cov) == n and all(len(r) == n for r in cov)
    assert all(abs(cov[i][j] - cov[j][i]) < 1e-12 for i in range(n) for j in range(n))

    survival = two.survival(1.5)
    assert all(0.0 < s < 1.0 for s in survival)

    mst = er.mst_experiment(200, 8, seed=3)
    assert len(mst["weights"]) == 8
    assert mst["max_identity_residual"] < 1e-9

    ens = two.graph_ensemble(300, 4, [0.25, 0.5], seed=1)
    assert len(ens["macro_mean"]) == 2

    print("irglab smoke test passed")


if __name__ == "__main__":
    main()
