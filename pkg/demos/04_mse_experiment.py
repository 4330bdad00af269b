# %% [markdown]
# # Paired relative-MSE comparison across dispersion criteria
#
# A reduced-scale version of the simulation grid: every method sees the
# identical datasets (paired design, counter-based per-replication seeds),
# and squared errors are reported relative to the unweighted estimator.

# %%
import numpy as np

import sandreg as sr
from sandreg.simulate import MethodSpec, paired_difference, run_mse_experiment

methods = [
    MethodSpec(
        "sandwich",
        sr.DispersionObjective("sandwich", target=np.ones(1)),
        sr.exchangeable(scale_mode="free"),
    ),
    MethodSpec("eqml", sr.DispersionObjective("eqml"), sr.exchangeable(scale_mode="free")),
    MethodSpec("gee", sr.DispersionObjective("gee"), sr.exchangeable(scale_mode="free")),
]

dgps = [
    sr.DgpSpec("linear_multilevel", I=100, lam=0.0),  # working model true
    sr.DgpSpec("linear_multilevel", I=100, lam=3.0),  # heteroscedastic
]

report = run_mse_experiment(dgps, methods, replications=120, root_seed=2024, workers=2)
print(report.to_table())

# %% [markdown]
# Paired differences come with Monte-Carlo standard errors, so method
# orderings can be read with uncertainty attached:

# %%
for dgp in dgps:
    for other in ("eqml", "gee"):
        mean, se = paired_difference(report, dgp.label(), dgp.I, "sandwich", other)
        print(
            f"{dgp.label():>26}: E[se_sandwich - se_{other}] = {mean:+.2e} "
            f"(MC se {se:.2e})"
        )

# %% [markdown]
# Under the correctly specified covariance all criteria are comparable;
# under misspecification the variance-targeted fit pulls ahead.  The same
# report is reproducible bit for bit from the root seed, whatever the
# worker count.
