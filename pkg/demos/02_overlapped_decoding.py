# %% [markdown]
# # Serial versus overlapped draft/verify
#
# The same draft/target pair is decoded serially and with the overlapped
# scheduler.  Both commit exactly the target's greedy output; only timing
# differs.

# %%
from specdeck.latency import LatencyProfile, serial_trace, simulate
from specdeck.models import make_pair
from specdeck.speculative import run_autoregressive, run_serial_sd
from specdeck.trace import render_timeline
from specdeck.vpsd import run_vpsd

profile = LatencyProfile(t_draft_prefill=0.2, t_target_prefill=0.8, t_draft_decode=0.05,
                         t_target_verify=0.15, t_prune=0.02)
pair = make_pair(16, 3, alpha=0.8, seed=1)
prompt = [3, 1, 4]

reference, _ = run_autoregressive(pair.target, prompt, 64)
serial, log = run_serial_sd(pair.draft, pair.target, prompt, 5, 64)
overlapped, trace = run_vpsd(pair.draft, pair.target, prompt, 5, 64, profile)
print("identical outputs:", serial == overlapped == reference)

# %%
for name, metrics in (("serial", simulate(log, profile)), ("overlapped", simulate(trace, profile))):
    print(f"{name:<10} total {metrics.total_time:6.2f}  speedup {metrics.speedup:4.2f}x  "
          f"decode speedup {metrics.decode_speedup:4.2f}x  MAT {metrics.mat:5.2f}")

# %% [markdown]
# Timelines: `d` drafting, `z` discarded drafting, `V` verification, `P`
# prefill, `x` pruning, `.` idle.

# %%
print(render_timeline(serial_trace(log, profile), 90))
print(render_timeline(trace, 90))

# %% [markdown]
# Speedup over target-only decoding as agreement grows.

# %%
for alpha in (0.0, 0.25, 0.5, 0.75, 0.9, 1.0):
    p = make_pair(16, 3, alpha, seed=2)
    _, lg = run_serial_sd(p.draft, p.target, prompt, 5, 128)
    _, tr = run_vpsd(p.draft, p.target, prompt, 5, 128, profile)
    print(f"alpha {alpha:4.2f}  serial {simulate(lg, profile).speedup:4.2f}x  "
          f"overlapped {simulate(tr, profile).speedup:4.2f}x")
