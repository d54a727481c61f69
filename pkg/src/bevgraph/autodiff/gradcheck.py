"""Finite-difference validation of tape gradients.

Central differences: d/dx f ~ (f(x + eps) - f(x - eps)) / (2 eps). The
relative error metric is |analytic - numeric| / max(1e-12, |analytic| +
|numeric|), so agreeing near-zero gradients score well and sign flips
score close to 0.5.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        return (
            f"max rel error {self.max_rel_error:.3e} at "
            f"{self.worst_param}{list(self.worst_index)} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, "
            f"{self.checked} coordinates)"
        )


def relative_error(analytic, numeric, denom_floor=1e-12):
    return abs(analytic - numeric) / max(denom_floor,
                                         abs(analytic) + abs(numeric))


def grad_check(f, store, eps=1e-6, max_coords_per_param=None, rng=None,
               denom_floor=1e-12, refine_threshold=None, refine_shrink=10.0,
               refine_attempts=2):
    """Compare tape gradients of scalar f() against central differences.

    f must rebuild its computation from the store's current parameter
    values on every call. With max_coords_per_param set, that many
    coordinates per parameter are sampled with rng instead of sweeping
    all of them.

    denom_floor turns the metric into a mixed absolute/relative error:
    coordinates whose combined magnitude falls below the floor are
    scored as |analytic - numeric| / denom_floor. Central differences
    carry rounding noise of order macheps * |f| / eps, so gradients far
    below that are unmeasurable by any finite difference; a floor around
    1e-3 still flags every deviation above 1e-7 at the default
    threshold while ignoring pure cancellation noise.

    With refine_threshold set, a coordinate scoring above it is
    re-measured at eps / refine_shrink (up to refine_attempts times) and
    keeps its best score. Piecewise-linear activations put kinks at
    finite distances from the base point; a difference that straddles
    one is wrong at the original eps but converges once eps drops below
    the kink distance, whereas a genuine gradient bug stays wrong at
    every scale.
    """
    store.zero_grad()
    loss = f()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in store.items()
    }

    if max_coords_per_param is not None and rng is None:
        rng = np.random.default_rng(0)

    worst = GradCheckResult(-1.0, "", (), 0.0, 0.0, 0)
    for name, p in store.items():
        base = p.values
        m, n = base.shape
        coords = [(i, j) for i in range(m) for j in range(n)]
        if max_coords_per_param is not None and len(coords) > max_coords_per_param:
            picks = rng.choice(len(coords), size=max_coords_per_param, replace=False)
            coords = [coords[int(k)] for k in picks]
        param_worst = 0.0
        for i, j in coords:
            def central(step):
                bumped = base.copy()
                bumped[i, j] = base[i, j] + step
                p.values = bumped
                f_plus = f().item()
                bumped = base.copy()
                bumped[i, j] = base[i, j] - step
                p.values = bumped
                f_minus = f().item()
                p.values = base
                return (f_plus - f_minus) / (2.0 * step)

            numeric = central(eps)
            err = float(relative_error(analytic[name][i, j], numeric,
                                       denom_floor))
            if refine_threshold is not None and err > refine_threshold:
                step = eps
                for _ in range(refine_attempts):
                    step /= refine_shrink
                    candidate = central(step)
                    refined = float(relative_error(analytic[name][i, j],
                                                   candidate, denom_floor))
                    if refined < err:
                        err, numeric = refined, candidate
                    if err <= refine_threshold:
                        break
            param_worst = max(param_worst, err)
            worst.checked += 1
            if err > worst.max_rel_error:
                worst.max_rel_error = err
                worst.worst_param = name
                worst.worst_index = (i, j)
                worst.analytic = float(analytic[name][i, j])
                worst.numeric = float(numeric)
        worst.per_param[name] = param_worst
    return worst
