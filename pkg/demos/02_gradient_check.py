# %% [markdown]
# # Is the adjoint gradient right?
#
# The reconstruction relies on gradients with respect to all twelve parameter
# fields, computed by running the time-stepper backwards with transposed
# matrices.  Because the adjoint transposes the discrete scheme itself, it
# should agree with finite differences of the discrete objective to many
# digits.

# %%
from collections import defaultdict

from flowpet.recon import gradient_check

rows = gradient_check()
worst = defaultdict(float)
for r in rows:
    worst[r["block"]] = max(worst[r["block"]], r["rel_err"])
for block, err in worst.items():
    print(f"{block:5s} worst relative error {err:.2e}")

# %% [markdown]
# The finite-difference quotient carries truncation error at large steps and
# cancellation error at small ones; the check keeps the best step of the
# sweep.  Single-cell directions probe the stencil coefficients directly.

# %%
for r in rows[:6]:
    print(f"{r['block']:5s} {r['cell']:7s} adjoint {r['analytic']: .10e}  fd {r['fd']: .10e}")
