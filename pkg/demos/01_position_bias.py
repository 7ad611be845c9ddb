# %% [markdown]
# # Where attention-only selection puts its budget
#
# Build a synthetic clip whose top and bottom rows carry inflated attention
# keys, keep 10% of the tokens, and count how many land in the edge band.

# %%
from specdeck.bias import bias_report
from specdeck.preserve import fuse_and_select, score_tokens
from specdeck.synthetic import make_synthetic_grid

grid, xattn = make_synthetic_grid(8, 10, 10, 16, "boundary_bias", seed=0)
raw = score_tokens(grid, xattn, crop_side=5)

# %%
for criteria in (("attn",), ("attn", "temp"), ("attn", "spa"), ("attn", "temp", "spa")):
    _, keep = fuse_and_select(raw, 0.1, criteria)
    report = bias_report(keep, band=0.1)
    print(f"{'+'.join(criteria):<14} edge share {report.overall_share:.3f}")

# %% [markdown]
# For reference, the edge band covers 20% of the grid.  On pure noise the
# selection lands there at about that rate.

# %%
noise, noise_x = make_synthetic_grid(64, 10, 30, 8, "uniform_noise", seed=0)
_, keep = fuse_and_select(score_tokens(noise, noise_x, 5), 0.1)
print(f"noise baseline  edge share {bias_report(keep, 0.1).overall_share:.3f}")
