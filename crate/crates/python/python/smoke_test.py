"""Smoke test of the alkatomo extension: python python/smoke_test.py"""

import json
import math

import alkatomo as ak


def main():
    rho = ak.DensityMatrix.random(11)
    params = ak.SignalParams(eta=0.8, phi=0.4, offset=0.01)
    traces = ak.synthesize(rho, params, seed=3)
    assert len(traces) == 3
    assert len(traces.raw()) == 9 and len(traces.combined()) == 6

    cal = ak.calibrate_stretched(params)
    assert abs(cal["zeta"] - params.zeta) < 1e-6, cal

    rec = ak.reconstruct(traces, params.eta, cal["zeta"], phi=cal["phi"])
    f = ak.fidelity(rho, rec.rho)
    assert f >= 1 - 1e-8, f
    assert rec.converged
    assert json.loads(rec.fit_json())["per_trace"]

    noisy = ak.synthesize(rho, params, relative_sigma=0.01, seed=5)
    f_noisy = ak.reconstruct(noisy, params.eta, params.zeta, phi=params.phi).rho.fidelity(rho)
    assert f_noisy > 0.98, f_noisy

    assert abs(ak.kappa_of_zeta(0.29) - 2.25) < 1e-12
    opt = ak.minimize_kappa()
    assert abs(opt["kappa"] - 2.25) < 1e-9
    reps = ak.optimize_repetitions(9)
    assert reps["counts"] == [1] * 9

    v = ak.voigt(0.0)
    assert v.real > 0 and abs(v.imag) < 1e-30
    assert abs(ak.eta_from_absorption((1.0, 0.8), (1.0, 0.2)) - 27 / 16) < 1e-15

    bad = [[0.5, 0, 0], [0, 0.7, 0], [0, 0, -0.2]]
    proj = ak.project_to_physical(bad)
    assert min(proj.eigenvalues()) >= -1e-12
    assert abs(sum(proj.eigenvalues()) - 1) < 1e-12

    back = ak.DensityMatrix.from_json(rho.to_json())
    assert back.matrix() == rho.matrix()

    try:
        ak.DensityMatrix([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    except ak.AlkatomoError:
        pass
    else:
        raise AssertionError("trace-2 matrix accepted")

    print(f"smoke test passed: fidelity {f:.12f}, noisy {f_noisy:.5f}, kappa {rec.kappa:.4f}")


if __name__ == "__main__":
    main()
