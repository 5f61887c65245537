"""Sampler machinery without any neural network.

DOPRI-5 integrates dx/dt = x to machine-level accuracy, and the reverse
diffusion SDE reproduces a Gaussian when fed the analytic score.
"""

import numpy as np

from vce.diffusion import NoiseSchedule, reverse_sample
from vce.flowmatch import OdeProblem, dopri5

# adaptive ODE integration: x' = x, x(0) = 1 -> x(1) = e
prob = OdeProblem(rhs=lambda t, x: x, t_span=(0.0, 1.0), y0=np.ones(1))
res = dopri5(prob)
print(f"dopri5: x(1) = {res.y[0]:.9f}  (e = {np.e:.9f}), "
      f"{res.accepted} accepted / {res.rejected} rejected steps")

# reverse SDE with the exact score of N(mu, sigma^2)
mu, sigma = 1.5, 0.7
schedule = NoiseSchedule.default()
abar_T = schedule.alpha_bar[-1]
print(f"schedule: alpha_bar at T = {abar_T:.2e} (forward process ends near N(0,1))")


def analytic_score(x, t_index):
    ab = schedule.alpha_bar[t_index - 1]
    m = np.sqrt(ab) * mu
    v = ab * sigma ** 2 + 1.0 - ab
    return (m - x) / v


rng = np.random.default_rng(0)
draws = reverse_sample(analytic_score, shape=(10_000, 1), rng=rng, schedule=schedule)
print(f"target  N({mu}, {sigma ** 2:.2f})")
print(f"samples mean {draws.mean():+.3f}  var {draws.var():.3f}")
