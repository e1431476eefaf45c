"""Smoke test for the sgldfp extension module.

Build first, e.g. `maturin develop -m crates/python/Cargo.toml --release`.
"""
import json
import math

import sgldfp


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


ds = sgldfp.Dataset([[1.0], [1.0]], [0.0, 1.0])
model = sgldfp.Model.linear(ds, 1.0, 1.0)
check(len(ds) == 2 and model.dim == 1, "dataset shape")

sigma, star = model.linreg_posterior()
check(abs(sigma[0][0] - 3.0) < 1e-15 and abs(star[0] - 1 / 3) < 1e-15, "closed-form posterior")
check(abs(model.find_mode()[0] - 1 / 3) < 1e-12, "mode")
check(model.grad_datum(0, [2.0]) == [2.0], "prior gradient")
c = model.constants()
check(abs(c["m"] - 3.0) < 1e-12 and abs(c["L"] - 3.0) < 1e-12, "constants")

sgld = sgldfp.linreg_stationary_cov(model, "SGLD", 0.1)[0][0]
fp = sgldfp.linreg_stationary_cov(model, "SGLDFP", 0.1)[0][0]
check(abs(sgld - 2.1 / 5.1) < 1e-12 and abs(fp - 2 / 5.1) < 1e-12, "oracle covariances")
check(abs(sgldfp.sgld_1d_stationary_variance(model, "SGLD", 0.1) - sgld) < 1e-12, "1d recursion")

w2 = sgldfp.w2_gaussian([1 / 3], [[sgld]], [1 / 3], [[fp]])
check(abs(w2 - (math.sqrt(sgld) - math.sqrt(fp))) < 1e-15, "w2 1d")

out = sgldfp.run_chain(model, "SGLD", 0.1, star, n_iters=200_000, seed=3)
check(abs(out["cov"][0][0] - sgld) < 0.02 and out["n_kept"] == 180_000, "chain variance")

slope, _, _ = sgldfp.fit_loglog_slope([(n, 2.0 / n) for n in (10.0, 100.0, 1000.0)])
check(abs(slope + 1.0) < 1e-12, "log-log slope")

data, theta = sgldfp.simulate_logistic(500, 3, 7)
logit = sgldfp.Model.logistic(data)
exp = sgldfp.stationary_expansion(logit, "SGLDFP", 0.01 / data.n_data)
check(exp["eta"] < exp["eta0"] and len(exp["cov"]) == 3, "expansion")

cfg = json.loads(sgldfp.desk_config("oracle_linreg", 1))
cfg["n_iters"] = 20_000
rows = sgldfp.run_experiment(json.dumps(cfg))
closed = [r for r in rows if r["kind"] == "SGLD" and r["metric_name"] == "closed_form_var_0"]
check(closed and abs(closed[0]["metric_value"] - 2.1 / 5.1) < 1e-12, "experiment rows")
print("all smoke checks passed")
