"""Masking policies and common/individual budget trades, on raw numbers.

Shows how the norm mask selects elements under each scoring policy and how
trading drop ratio between the common map and the individual maps keeps
the total symbol count invariant.
Run:  python demos/05_masking_policies_and_budget_trades.py
"""

import numpy as np

from mdvsc.entropy_model import EntropyMap
from mdvsc.model_division import FeatureSet
from mdvsc.transform_codec import FeatureMap
from mdvsc.vlc import Budget, apply_mask, build_mask, trade_budget

rng = np.random.default_rng(0)
shape = (2, 3, 1)  # 6 elements per map
n = 2  # GOP size

maps = [FeatureMap(rng.normal(size=shape).astype(np.float32)) for _ in range(n + 1)]
fset = FeatureSet(common=maps[-1], individuals=tuple(maps[:-1]))
bits = [EntropyMap(bits=rng.uniform(0, 4, size=shape)) for _ in range(n + 1)]
entropies = (bits[-1], bits[:-1])

print("per-element entropy (flattened, individuals then common):")
for i, b in enumerate([*bits[:-1], bits[-1]]):
    name = "common" if i == n else f"ind[{i}]"
    print(f"  {name}: {np.round(b.bits.ravel(), 2)}")

budget = Budget(target_cbr=0.5, mode="global_topk", source_dim=18)
for policy in ("entropy", "power", "random", "inv_entropy", "inv_power"):
    plan = build_mask(entropies, budget, policy, fset, np.random.default_rng(1))
    print(f"{policy:>12}: kept {plan.kept_indices} ({plan.total_kept} symbols)")

print("\nbudget trading at fixed total (Eq-style: dr_c moves n_gop times dr_i):")
base = Budget(mode="split", drop_common=0.5, drop_individual=0.5, gop_size=n)
for delta in (-0.2, 0.0, 0.2):
    traded = trade_budget(base, delta)
    plan = build_mask(entropies, traded, "entropy", fset)
    stream = apply_mask(fset, plan)
    print(f"  delta={delta:+.1f}: dr_c={float(traded.drop_common):.2f} "
          f"dr_i={float(traded.drop_individual):.2f} "
          f"kept per unit {stream.per_unit_counts} total {plan.total_kept}")
print("total kept is identical in every row: the trade is count-preserving")
