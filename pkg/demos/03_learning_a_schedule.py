"""
Learning alpha with Bayesian optimization
=========================================

Uses the same run directory as the previous demo.  The objective is the
purified accuracy on FGSM examples crafted against the autoencoding model.
"""
# %%
import sys

import numpy as np

from latent_purify import analysis, cli, dataset, hpo, purifier
from latent_purify.rng import stream

run = sys.argv[1] if len(sys.argv) > 1 else "runs/default"
cfg = cli.load_config(None, run)
vae, clf = cli._load_models(cfg)
val = cli._load_split(cfg, "val")
sl = dataset.stratified_slice(val, 128, cfg.seed, "demo-bo")
objective = hpo.BOObjective.build(vae, clf, sl.images, sl.labels, cfg.fgsm_epsilon, cfg.seed)

# %%
print("alpha = 0      ", objective(np.zeros(3)))
print("cosine schedule", objective(purifier.make_schedule("cosine", 3, cfg.alpha_max).values))

# %% [markdown]
# Twenty rounds of GP fitting and expected-improvement search, started from
# the five fixed schedules.

# %%
state = hpo.run_bo(objective, steps=20, alpha_max=cfg.alpha_max, levels=3, rng=stream(cfg.seed, "demo-bo"))
alpha, best = state.incumbent
print("learned alpha", np.round(alpha, 3), "accuracy", best)
print("incumbent trace", np.round(state.incumbents, 3))

# %% [markdown]
# Do increasing schedules help?  Correlate each random schedule's
# monotonicity (Spearman rho against level index) with its accuracy.

# %%
study = analysis.random_combination_study(objective, 64, cfg.alpha_max, 3, stream(cfg.seed, "demo-combos"))
print("Pearson(rho, accuracy) =", round(study.pearson, 3))
