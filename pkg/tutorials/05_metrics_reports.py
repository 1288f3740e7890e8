"""
Scoring, aggregating and comparing models
=========================================

AUC per label, mean and spread over re-samples, rank correlation between
models, and the operating point that balances sensitivity and specificity.
"""

# %%
import numpy as np

from cxrnet import aggregate_folds, label_aucs, roc_auc, spearman_matrix, youden_operating_point
from cxrnet.data import LABELS
from cxrnet.metrics import EvalRow
from cxrnet.reports import auc_grid, correlation_table

# %% [markdown]
# A small worked example: three of the four positive/negative pairs are ordered correctly.

# %%
print(roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))

# %% [markdown]
# Fake scores for two models over five folds. Model "b" is model "a" plus noise.

# %%
rng = np.random.default_rng(0)
folds_a, folds_b, rows_a, rows_b = [], [], [], []
for fold in range(5):
    truths = (rng.random((200, 15)) < 0.3).astype(int)
    a = truths * 0.6 + rng.random((200, 15))
    b = a + 0.5 * rng.random((200, 15))
    folds_a.append(a)
    folds_b.append(b)
    rows_a.append(EvalRow(fold, label_aucs(a, truths)))
    rows_b.append(EvalRow(fold, label_aucs(b, truths)))

report_a, report_b = aggregate_folds(rows_a), aggregate_folds(rows_b)
print(f"average AUC a {report_a.average.mean:.3f} ± {report_a.average.std:.3f}")
print(auc_grid({("Without", "a"): report_a, ("Without", "b"): report_b}).text)

# %% [markdown]
# Rank correlation on the pooled scores of each fold, averaged over folds.

# %%
rho = spearman_matrix([[fa, fb] for fa, fb in zip(folds_a, folds_b)])
print(correlation_table(rho, ["a", "b"]).text)

# %% [markdown]
# Operating point for one label on the last fold.

# %%
op = youden_operating_point(folds_a[-1][:, 0], truths[:, 0])
print(f"{LABELS[0]}: threshold {op.threshold:.3f} sensitivity {op.sensitivity:.2f} "
      f"specificity {op.specificity:.2f}")
