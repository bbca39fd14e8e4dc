"""Propagate travel-time uncertainty along one vehicle's chain of trips.

Walks the deterministic recursion on a fixed set of travel times, then replaces
them with densities and estimates expected secondary delays by Monte Carlo.

    python3 demos/delay_propagation.py
"""
import json
from pathlib import Path

from busdensity.delay import (VehicleSchedule, expected_delay_single_predecessor, expected_secondary_delay_mc,
                              realized_departures, realized_secondary_delays, schedule_cost)
from busdensity.density import Parametric

raw = json.loads((Path(__file__).resolve().parents[1] / "fixtures" / "chain5.json").read_text())
sched = VehicleSchedule.from_dict(raw)

print("planned departures:", sched.departures.tolist())
tt = raw["manual_trace"]["travel_times"]
D, A = realized_departures(sched, tt)
print("with travel times", tt)
print("  realized departures:", D.tolist())
print("  arrivals:           ", A.tolist())
print("  secondary delays:   ", realized_secondary_delays(sched, tt).tolist())

# now the travel times are uncertain: gamma laws centred on the same values
dens = [Parametric("gamma", (25.0, t / 25.0)) for t in tt]
prof = expected_secondary_delay_mc(sched, dens, n_samples=50_000, seed=3)
print("\nexpected secondary delay per trip (Monte Carlo, 50k replicates)")
for tid, e, se in zip(prof.trip_ids, prof.expected, prof.stderr):
    print(f"  {tid}: {e:6.3f} +- {se:.3f}")
print(f"schedule cost q_s + beta * sum E(R) = {schedule_cost(sched, prof):.2f}")

# with one predecessor the expectation is a 1-D integral; the two routes should agree
exact = expected_delay_single_predecessor(sched.departures[0], sched.departures[1], sched.min_between[1], dens[0])
print(f"\ntrip 2 by quadrature {exact:.4f}  vs Monte Carlo {prof.expected[1]:.4f}")
