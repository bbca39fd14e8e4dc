"""How the similarity settings change validation NLL.

Sweeps the departure-window width for eDTW and the neighbour count for kNN on
a network whose evening service is sparse, where narrow windows starve.

    python3 demos/window_and_k_sweeps.py
"""
import datetime as dt
from pathlib import Path

from busdensity.data import SplitConfig, chronological_split, mad_filter
from busdensity.evaluation import sweep_dtw, sweep_k
from busdensity.synth import SynthConfig, generate

fixtures = Path(__file__).resolve().parents[1] / "fixtures"
cfg = SynthConfig.load(fixtures / "sparse_evening.json")
trips = mad_filter(generate(cfg, 5)).kept
split = chronological_split(trips, SplitConfig(train_end=dt.date(2017, 9, 22)))
estimators = ["normal", "loglogistic", "gmm", "kde"]

dtw = sweep_dtw(split, estimators, seed=5, base={"kde": {"h": 2.0}})
print(dtw.to_text())
flags = dtw.overfitting()
if flags:
    print("train NLL fell while validation NLL rose:", flags)

ks = sweep_k(split, estimators, k_grid=(2, 4, 8, 13, 20, 30, 40), seed=5, base={"kde": {"h": 2.0}})
print()
print(ks.to_text())
print("plateau k per estimator:", ks.selected_k())
