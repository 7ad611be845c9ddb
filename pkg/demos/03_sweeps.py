# %% [markdown]
# # Experiment sweeps
#
# The harness runs the full pipeline per seed (prune, decode, time) and
# aggregates over seeds.  The same sweeps are available as
# `specdeck sweep --axis ... --values ...`.

# %%
from specdeck.harness import ExperimentConfig, sweep

base = ExperimentConfig(seeds=(0, 1, 2), max_new=128, t_draft_prefill_per_token=0.002,
                        t_prune=0.01, t_prune_per_token=0.0002)

# %%
print(sweep(base, "keep_ratio", [0.05, 0.1, 0.2, 0.5]).to_csv())

# %%
print(sweep(base, "alpha", [0.0, 0.5, 0.8, 1.0], workers=4).to_csv())

# %%
print(sweep(base.replace(method="serial_sd", alpha=1.0), "gamma", [1, 3, 5, 7]).to_csv())
