"""How the resource weight lambda trades accuracy for computation.

A short sweep (2 seeds) with the default dataset; the full 5-seed protocol is
`dynfuse sweep`. Also shows the noise-robustness comparison for one seed.

Run: python demos/04_lambda_sweep.py
"""

import numpy as np

from dynfuse.harness import config_from_dict, run_lambda_sweep, run_robustness

cfg = config_from_dict({"seeds": [0, 1]})
result = run_lambda_sweep(cfg)

print(f"{'run':>14} {'lambda':>7} {'acc':>7} {'MAdds':>8} {'saved':>7} {'cheap':>6}")
rows = {}
for r in result.records:
    rows.setdefault((r.kind, r.lam), []).append(r)
for (kind, lam), recs in sorted(rows.items()):
    acc = np.median([r.accuracy for r in recs])
    madds = np.median([r.mean_madds_per_sample for r in recs])
    saved = np.median([r.madds_reduction_vs_static for r in recs])
    cheap = np.median([r.selection_ratio.get("s0_b0", np.nan) for r in recs])
    print(f"{kind:>14} {lam:7g} {acc:7.4f} {madds:8.0f} {saved:7.1%} {cheap:6.2f}")

print("\nnoise in modality 2 (prob 1/3), seed 0:")
for r in run_robustness(config_from_dict({"seeds": [0]})):
    print(f"  sigma {r.sigma:3g}: accuracy drop dynamic {r.dyn_drop:+.4f}  static {r.static_drop:+.4f}")
