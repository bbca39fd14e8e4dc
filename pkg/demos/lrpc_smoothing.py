"""Class-probability model for one route and the effect of kernel smoothing.

Fits the softmax classifier over 1-minute travel-time classes, then shows how
the bandwidth trades a spiky p.m.f. for a smooth density.

    python3 demos/lrpc_smoothing.py
"""
import numpy as np

from busdensity.density import integrate
from busdensity.lrpc import fit_lrpc, smooth_pmf
from busdensity.synth import SynthConfig, generate

cfg = SynthConfig.from_dict({"n_routes": 1, "n_weeks": 8, "record_prob": 0.8})
trips = generate(cfg, 2)
route = trips[0].route_id
model = fit_lrpc([t for t in trips if t.route_id == route], seed=2)
print(f"route {route}: {model.grid.C} classes starting at {model.grid.t_min} min")
print(f"training loss {model.loss_trace[0]:.3f} -> {model.loss_trace[-1]:.3f}")

for dep in (150.0, 480.0, 780.0):
    pmf = model.predict_pmf_matrix([dep])[0]
    top = model.grid.centers[np.argmax(pmf)]
    print(f"\ndeparture {dep:.0f} min after 04:00: most likely class {top:.0f} min")
    for h in (0.5, 2.0, 5.0):
        d = smooth_pmf(pmf, model.grid, "gaussian", h)
        grid = np.linspace(d.centers[0] - 10, d.centers[-1] + 10, 2001)
        peak = d.pdf(grid).max()
        print(f"  h={h:3.1f}  mass {integrate(d):.4f}  peak density {peak:.4f}  mean {d.mean():.2f}")
