"""ROC analysis and transferring the equal-error-rate threshold to a test split."""

# %%
import numpy as np

from reportlabel import ScoredSet, evaluate, roc_and_eer, stratified_split

rng = np.random.default_rng(0)
n = 400
labels = rng.integers(0, 2, n)
scores = np.clip(rng.normal(np.where(labels == 1, 0.65, 0.4), 0.15), 0, 1)
data = ScoredSet([f"r{i}" for i in range(n)], scores, labels)

# %%
roc = roc_and_eer(data)
print(f"AUROC {roc.auroc:.3f}, EER {roc.eer:.3f} at threshold {roc.eer_threshold:.3f}")
print(f"{len(roc.points)} ROC points from (0, 0) to (1, 1)")

# %%
# Pick the cutoff on one half, report on the other. Each class is split
# separately so both halves keep the same prevalence.
split = stratified_split(data.ids, data.labels, fraction=0.5, seed=3)
cal = data.subset(split.ids("calibration"))
test = data.subset(split.ids("test"))
m = evaluate(test, cal)
for key, value in m.to_dict().items():
    print(f"{key:18s} {value}")
