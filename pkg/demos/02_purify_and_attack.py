"""
Purification against a minimal-perturbation attack
==================================================

Needs a trained run directory::

    latent-purify gen-data  --output-dir runs/demo
    latent-purify train-vae --output-dir runs/demo
    latent-purify train-clf --output-dir runs/demo
    python demos/02_purify_and_attack.py runs/demo
"""
# %%
import sys

import numpy as np

from latent_purify import analysis, attacks, cli, purifier, svg
from latent_purify.attacks import DeepFoolConfig
from latent_purify.rng import stream

run = sys.argv[1] if len(sys.argv) > 1 else "runs/default"
cfg = cli.load_config(None, run)
vae, clf = cli._load_models(cfg)
sl, _ = cli._eval_slice(cfg)
images, labels = sl.images[:40], sl.labels[:40]

# %% [markdown]
# Purify a few clean images.  With alpha = 0 the pipeline is a plain
# autoencoder; the cosine schedule resamples the fine levels.

# %%
pipe = purifier.PurifierPipeline(vae, clf, purifier.make_schedule("cosine", 3, cfg.alpha_max))
base = purifier.base_pipeline(vae, clf)
print("clean accuracy      ", clf.accuracy(images, labels))
print("autoencoded accuracy", np.mean(purifier.purified_predict(images, base) == labels))
print("purified accuracy   ", np.mean(purifier.purified_predict(images, pipe, stream(0, "demo")) == labels))

# %% [markdown]
# Attack the bare classifier and the purified pipeline with DeepFool.  The
# purified target is randomized, so the attack averages 8 gradient samples.

# %%
df = DeepFoolConfig(eot=8)
none = attacks.minimal_perturbation_sweep(attacks.classifier_target(clf), images, labels, df, cfg.seed)
pure = attacks.minimal_perturbation_sweep(pipe.as_target(), images, labels, df, cfg.seed)
grid = analysis.log_eps_grid()
c_none = analysis.success_rate_curve(none, grid, "none")
c_pure = analysis.success_rate_curve(pure, grid, "purify")
for e in (0.25, 0.5, 1.0, 2.0):
    print(f"L2 <= {e:4}: undefended SR {c_none.at(e):.2f}, purified SR {c_pure.at(e):.2f}")

# %%
with open("demo_sr.svg", "w") as f:
    f.write(svg.line_chart([("none", grid, c_none.sr), ("purify", grid, c_pure.sr)], title="DeepFool"))
print("wrote demo_sr.svg")
