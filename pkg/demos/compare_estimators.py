"""Fit a handful of density estimators on synthetic AVL data and compare them.

Generates a small network, applies the outlier filter, splits it chronologically
and prints the metrics table next to the generator's own (oracle) NLL.

    python3 demos/compare_estimators.py
"""
import datetime as dt

from busdensity.data import SplitConfig, chronological_split, mad_filter
from busdensity.estimators import split_model_list
from busdensity.evaluation import compare_models, nll
from busdensity.synth import Oracle, SynthConfig, generate

SEED = 11

cfg = SynthConfig.from_dict({"n_routes": 10, "n_weeks": 6, "record_prob": 0.4, "family": "gamma"})
trips = generate(cfg, SEED)
kept = mad_filter(trips)
print(f"{len(trips)} trips generated, {len(kept.discarded)} removed by the MAD filter")

split = chronological_split(kept.kept, SplitConfig(train_end=dt.date(2017, 9, 22)))
print(f"training {len(split.training)}  validation {len(split.validation)}  test {len(split.test)}\n")

models = split_model_list("gamma:knn,normal:edtw,loglogistic:edtw,gmm:knn,kde:knn[h=2],lrpc[h=2],forest[n_trees=40]")
report = compare_models(split, models, seed=SEED)
print(report.to_text())

# the generator knows the true law, so its NLL is a floor no estimator should beat by much
oracle = Oracle(cfg, SEED)
print(f"\noracle test NLL: {nll([oracle.density(t) for t in split.test], split.test).mean:.3f}")
