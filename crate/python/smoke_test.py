"""Smoke test for the smom extension module.

Build and install first:  maturin develop -m crates/python/Cargo.toml --release
"""

import csv
import io
import math

import smom


def main():
    assert abs(smom.are_closed_form(1) - 1.0) < 1e-12
    assert 0.684 <= smom.are_closed_form(2) <= 0.687

    gn = smom.Model.generalized_normal(2)
    assert gn.dim == 1 and gn.domain == "R^1"
    data = gn.sample(500, seed=1)
    sm = gn.score_matching(data)
    assert abs(sm[0] - gn.reference_theta[0]) < 0.3, sm
    fit = gn.improved(data, k=4, seed=2)
    assert fit["name"] == "smom_plugin" and len(fit["theta"]) == 1
    assert all(math.isfinite(v) for v in fit["theta"])

    ws = smom.WassersteinScore(gn)
    assert abs(ws.pde_residual(0, [0.7])) < 1e-8
    assert ws.span_residual(m=1000, seed=3) > 0.1

    gg = smom.Model.generalized_gamma(2)
    assert smom.WassersteinScore(gg).span_residual(m=1000) < 1e-6

    ppi = smom.Model.ppi()
    pts = ppi.sample(200, seed=4)
    assert all(abs(sum(v * v for v in x) - 1.0) < 1e-12 and min(x) >= 0 for x in pts)
    assert len(ppi.score_matching(pts)) == ppi.dim == 5

    bingham = smom.Model.bingham(3, 2)
    assert len(bingham.sample(10, seed=5)[0]) == 6
    try:
        smom.WassersteinScore(bingham)
    except smom.SmomError:
        pass
    else:
        raise AssertionError("Bingham has no closed-form Wasserstein score")

    settings = [("n", "20"), ("reps", "4"), ("K", "1"), ("pairs", "1"), ("M", "100"), ("threads", "1")]
    text = smom.run("gnormal", settings)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert text.splitlines()[0] == (
        "experiment,parameter,n,K,pair,estimator,mse,ratio_vs_sm,are_estimate,failures"
    )
    assert {r["estimator"] for r in rows} == {"sm", "mle", "smom_plugin", "smom_oracle"}
    assert text == smom.run("gnormal", settings)
    summary = smom.summarize(text)
    assert summary.startswith("experiment,parameter,n,K,estimator,median")

    try:
        smom.run("gnormal", [("reps", "zero")])
    except ValueError:
        pass
    else:
        raise AssertionError("bad settings must raise ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
