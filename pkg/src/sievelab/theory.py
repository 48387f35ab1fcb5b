"""Monte-Carlo verification of sieving error bounds on exactly-known models.

The model here is a finite table of points with known class-conditional
probabilities, so the Bayes classifier, the noisy posterior under a label
transition matrix, and the margin structure are all exact. A classifier is
simulated as the noisy posterior plus bounded perturbation (approximation
error at most eps per coordinate), and the probabilities of three sieving
error events are estimated by simulation and compared against their
analytic bounds of the form beta * (eps / min_j tau_jj)^gamma.

The margin condition used throughout: for constants mu in (0, 1] and
beta, gamma > 0, Pr[best margin <= t] <= beta * t^gamma for all
t in (0, mu], with x uniform over the finite domain (the multi-class
Tsybakov noise condition).
"""

import math
from dataclasses import dataclass

import numpy as np

from .noise import TransitionMatrix

# Sieving error events whose probabilities the bounds control.
ACCEPT_NOISY = "accept_noisy"      # label is noisy per Bayes, sieve keeps it
REJECT_CLEAN = "reject_clean"      # label is clean per Bayes, sieve drops it
LOW_CONFIDENCE = "low_confidence"  # label is clean per Bayes, given-label confidence is low
EVENTS = (ACCEPT_NOISY, REJECT_CLEAN, LOW_CONFIDENCE)

_MAX_PERTURB_ROUNDS = 10_000
_MARGIN_TOL = 1e-9


class ConstructionError(ValueError):
    """Requested synthetic model is infeasible."""


def margin_condition_holds(margins, mu: float, beta: float, gamma: float) -> bool:
    """Exhaustive check of the margin condition on a finite sample.

    The empirical CDF is a step function, so it suffices to check the bound
    at every jump point at or below mu.
    """
    m = np.sort(np.asarray(margins, dtype=float))
    if m.size == 0 or m[0] <= 0:
        return False
    cdf = np.arange(1, m.size + 1) / m.size
    inside = m <= mu
    return bool(np.all(cdf[inside] <= beta * m[inside] ** gamma + _MARGIN_TOL))


@dataclass
class TsybakovModel:
    """Finite-domain generative model with exactly known conditionals.

    Points are identified by row index into ``conditionals`` ([n, k], each
    row a distribution). The stored (mu, beta, gamma) are validated against
    the table's best-vs-second-best margins at construction.
    """

    conditionals: np.ndarray
    mu: float
    beta: float
    gamma: float

    def __post_init__(self):
        p = np.array(self.conditionals, dtype=float)
        if p.ndim != 2 or p.shape[1] < 2:
            raise ValueError("conditionals must be [n_points, k] with k >= 2")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each conditional row must be a distribution")
        if not 0.0 < self.mu <= 1.0:
            raise ValueError("mu must be in (0, 1]")
        if self.beta <= 0 or self.gamma <= 0:
            raise ValueError("beta and gamma must be positive")
        p.setflags(write=False)
        object.__setattr__(self, "conditionals", p)
        if not margin_condition_holds(self.margins(), self.mu, self.beta, self.gamma):
            raise ConstructionError("margin condition fails for the stored constants")

    @property
    def k(self) -> int:
        return self.conditionals.shape[1]

    @property
    def n_points(self) -> int:
        return self.conditionals.shape[0]

    def margins(self) -> np.ndarray:
        part = np.partition(self.conditionals, self.k - 2, axis=1)
        return part[:, -1] - part[:, -2]


@dataclass
class OracleConfidences:
    """Per-point confidence table within a declared per-coordinate error."""

    table: np.ndarray
    eps: float

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2:
            raise ValueError("confidence table must be 2-D")
        if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each confidence row must be a distribution")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    def validate_against(self, model: TsybakovModel, tm: TransitionMatrix) -> None:
        target = noisy_posterior_table(model, tm)
        if np.max(np.abs(self.table - target)) > self.eps + 1e-12:
            raise ValueError("confidence table violates the declared error bound")


def fit_margin_constants(margins):
    """(beta, gamma) from the empirical margin CDF.

    gamma is the log-log least-squares slope through the CDF jump points;
    beta is then the smallest constant making the bound hold at every jump,
    so the fitted pair is exhaustively valid over the whole margin range.
    """
    m = np.sort(np.asarray(margins, dtype=float))
    if m.size < 2 or m[0] <= 0:
        raise ValueError("need at least 2 positive margins")
    cdf = np.arange(1, m.size + 1) / m.size
    slope = np.polyfit(np.log(m), np.log(cdf), 1)[0]
    gamma = max(float(slope), 1e-3)
    beta = float(np.max(cdf / m**gamma)) * (1.0 + 1e-12)
    return beta, gamma


def make_tsybakov_model(k: int, n_points: int, margin_floor: float,
                        rng: np.random.Generator, margin_width: float = 0.4) -> TsybakovModel:
    """Random finite model whose best-vs-second-best margins all lie in
    [margin_floor, margin_floor + margin_width].

    mu is set to the margin floor, and (beta, gamma) are fitted from the
    realized margins, so the margin condition holds exhaustively.
    """
    if k < 2 or n_points < 10:
        raise ValueError("need k >= 2 and n_points >= 10")
    if margin_floor <= 0 or margin_width <= 0:
        raise ConstructionError("margin floor and width must be positive")
    if margin_floor + margin_width >= 1.0:
        raise ConstructionError("margins must stay below 1")

    rows = np.zeros((n_points, k))
    margins = rng.uniform(margin_floor, margin_floor + margin_width, size=n_points)
    for i in range(n_points):
        m = margins[i]
        v = int(rng.integers(k))
        w = int((v + 1 + rng.integers(k - 1)) % k)
        p_w = (1.0 - m) / 2 if k == 2 else float(rng.uniform((1.0 - m) / k, (1.0 - m) / 2))
        p_v = p_w + m
        rest = max(1.0 - p_v - p_w, 0.0)
        others = np.zeros(0)
        if k > 2:
            for _ in range(200):
                cand = rng.dirichlet(np.ones(k - 2)) * rest
                if cand.max() < p_w - 1e-9:
                    others = cand
                    break
            else:
                others = np.full(k - 2, rest / (k - 2))  # always strictly below p_w
        row = np.zeros(k)
        row[v] = p_v
        row[w] = p_w
        row[np.setdiff1d(np.arange(k), [v, w])] = others
        rows[i] = row / row.sum()

    beta, gamma = fit_margin_constants(margins)
    return TsybakovModel(conditionals=rows, mu=margin_floor, beta=beta, gamma=gamma)


def _check_point(model: TsybakovModel, x: int) -> int:
    if int(x) != x or not 0 <= x < model.n_points:
        raise ValueError(f"point index {x} outside the domain [0, {model.n_points})")
    return int(x)


def bayes_predict(model: TsybakovModel, x: int):
    """(best, second-best) class under the true conditionals at x, with
    argmax ties broken toward lower class indices."""
    row = model.conditionals[_check_point(model, x)]
    v = int(np.argmax(row))
    masked = row.copy()
    masked[v] = -np.inf
    return v, int(np.argmax(masked))


def _check_compat(model: TsybakovModel, tm: TransitionMatrix) -> None:
    if tm.k != model.k:
        raise ValueError(f"transition matrix is {tm.k}-class, model is {model.k}-class")


def noisy_posterior_table(model: TsybakovModel, tm: TransitionMatrix) -> np.ndarray:
    _check_compat(model, tm)
    return model.conditionals @ tm.entries


def noisy_posterior(model: TsybakovModel, tm: TransitionMatrix, x: int) -> np.ndarray:
    """Law of the observed label at x: component j is sum_l tau_lj * P_l(x)."""
    return model.conditionals[_check_point(model, x)] @ tm.entries


def _perturb_rows(rows: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-eps, eps) noise per coordinate, clamped to [0, 1] and
    renormalized; rows whose renormalized deviation exceeds eps are redrawn
    so the per-coordinate error contract stays literal."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must be in [0, 1), got {eps}")
    if eps == 0.0:
        return rows.copy()
    out = np.empty_like(rows)
    pending = np.arange(rows.shape[0])
    for _ in range(_MAX_PERTURB_ROUNDS):
        base = rows[pending]
        cand = np.clip(base + rng.uniform(-eps, eps, size=base.shape), 0.0, 1.0)
        sums = cand.sum(axis=1)
        ok = sums > 1e-12
        cand[ok] /= sums[ok, None]
        ok &= np.max(np.abs(cand - base), axis=1) <= eps
        out[pending[ok]] = cand[ok]
        pending = pending[~ok]
        if pending.size == 0:
            return out
    raise RuntimeError("confidence perturbation resampling exceeded the round cap")


def perturbed_confidence(model: TsybakovModel, tm: TransitionMatrix, eps: float,
                         x: int, rng: np.random.Generator) -> np.ndarray:
    """One simulated classifier output at x: the noisy posterior with at most
    eps of per-coordinate deviation, still a valid distribution."""
    row = noisy_posterior(model, tm, x)
    return _perturb_rows(row[None, :], eps, rng)[0]


def sample_oracle_confidences(model: TsybakovModel, tm: TransitionMatrix, eps: float,
                              rng: np.random.Generator) -> OracleConfidences:
    table = _perturb_rows(noisy_posterior_table(model, tm), eps, rng)
    return OracleConfidences(table=table, eps=eps)


def _check_given_labels(model: TsybakovModel, given_labels) -> np.ndarray:
    y = np.asarray(given_labels, dtype=np.int64)
    if y.shape != (model.n_points,):
        raise ValueError("given_labels must assign one label per domain point")
    if y.min() < 0 or y.max() >= model.k:
        raise ValueError("given_labels out of range")
    return y


def error_event_threshold(model: TsybakovModel, tm: TransitionMatrix,
                          confidences: OracleConfidences, given_labels,
                          event: str) -> float:
    """Confidence-error threshold that bounds one sieving error event.

    Per domain point, with y' the class the confidence table predicts, w the
    Bayes second-best class, and ytilde the point's sampled observed label:

    - accept_noisy: the pointwise value
      -C[ytilde] + tau_{y'y'} P_w + sum_{l != y'} tau_{ly'} P_l
      and the threshold is its minimum over the domain, so every point
      satisfies the bound's substitution step.
    - reject_clean: the pointwise value
      C[y'] - tau_{yt,yt} P_w - sum_{l != yt} tau_{l,yt} P_l
      and the threshold is its maximum over the domain, for the same reason.
    """
    _check_compat(model, tm)
    if model.n_points == 0:
        raise ValueError("empty domain")
    y = _check_given_labels(model, given_labels)
    p = model.conditionals
    t = tm.entries
    c = confidences.table
    if c.shape != p.shape:
        raise ValueError("confidence table shape does not match the model")

    values = np.empty(model.n_points)
    for x in range(model.n_points):
        y_pred = int(np.argmax(c[x]))
        _, w = bayes_predict(model, x)
        yt = y[x]
        if event == ACCEPT_NOISY:
            mix = sum(t[l, y_pred] * p[x, l] for l in range(model.k) if l != y_pred)
            values[x] = -c[x, yt] + t[y_pred, y_pred] * p[x, w] + mix
        elif event == REJECT_CLEAN:
            mix = sum(t[l, yt] * p[x, l] for l in range(model.k) if l != yt)
            values[x] = c[x, y_pred] - t[yt, yt] * p[x, w] - mix
        else:
            raise ValueError(f"event must be {ACCEPT_NOISY!r} or {REJECT_CLEAN!r}")
    return float(values.min() if event == ACCEPT_NOISY else values.max())


def low_confidence_threshold(model: TsybakovModel, tm: TransitionMatrix,
                             given_labels) -> float:
    """min(1, min_x tau_{yt,yt} P_w + sum_{l != yt} tau_{l,yt} P_l)."""
    _check_compat(model, tm)
    y = _check_given_labels(model, given_labels)
    p = model.conditionals
    t = tm.entries
    values = np.empty(model.n_points)
    for x in range(model.n_points):
        _, w = bayes_predict(model, x)
        yt = y[x]
        mix = sum(t[l, yt] * p[x, l] for l in range(model.k) if l != yt)
        values[x] = t[yt, yt] * p[x, w] + mix
    return float(min(1.0, values.min()))


def sample_given_labels(model: TsybakovModel, tm: TransitionMatrix,
                        rng: np.random.Generator) -> np.ndarray:
    """One observed-label assignment per domain point, drawn from the noisy
    posterior."""
    table = noisy_posterior_table(model, tm)
    cum = np.cumsum(table, axis=1)
    u = rng.random(model.n_points)
    return np.minimum((cum < u[:, None]).sum(axis=1), model.k - 1)


@dataclass(frozen=True)
class BoundCheck:
    """One Monte-Carlo cell: estimated event probability vs analytic bound.

    ``bound`` already includes the empirical residual psi_hat for the
    accept_noisy event, so empirical_p <= bound + 3 * mc_stderr is the
    uniform pass condition.
    """

    event: str
    eps: float
    alpha: float
    empirical_p: float
    bound: float
    psi_hat: float | None
    mc_stderr: float
    n_draws: int


def estimate_error_probability(model: TsybakovModel, tm: TransitionMatrix,
                               eps: float, alpha: float, n_draws: int,
                               event: str, rng: np.random.Generator) -> BoundCheck:
    """Estimate one error-event probability by simulation.

    Each draw samples a domain point uniformly, an observed label from the
    noisy posterior, and a fresh perturbed confidence vector; the analytic
    bound is beta * (eps / min_j tau_jj)^gamma, plus the estimated
    probability of {label noisy, prediction not Bayes} for accept_noisy.
    """
    if event not in EVENTS:
        raise ValueError(f"event must be one of {EVENTS}, got {event!r}")
    if n_draws < 10_000:
        raise ValueError("need at least 10^4 draws for a meaningful estimate")
    _check_compat(model, tm)

    posterior = noisy_posterior_table(model, tm)
    bayes_best = np.argmax(model.conditionals, axis=1)

    xs = rng.integers(model.n_points, size=n_draws)
    rows = posterior[xs]
    cum = np.cumsum(rows, axis=1)
    u = rng.random(n_draws)
    ytilde = np.minimum((cum < u[:, None]).sum(axis=1), model.k - 1)
    conf = _perturb_rows(rows, eps, rng)

    pred = np.argmax(conf, axis=1)
    conf_err = conf.max(axis=1) - conf[np.arange(n_draws), ytilde]
    is_clean = ytilde == bayes_best[xs]

    if event == ACCEPT_NOISY:
        hits = ~is_clean & (conf_err <= alpha)
    elif event == REJECT_CLEAN:
        hits = is_clean & (conf_err > alpha)
    else:
        hits = is_clean & (conf[np.arange(n_draws), ytilde] < alpha)

    p_hat = float(np.mean(hits))
    min_diag = float(np.min(np.diag(tm.entries)))
    if min_diag <= 0:
        raise ValueError("transition matrix needs a positive diagonal")
    power = model.beta * (eps / min_diag) ** model.gamma
    psi_hat = None
    bound = power
    if event == ACCEPT_NOISY:
        psi_hat = float(np.mean(~is_clean & (bayes_best[xs] != pred)))
        bound = power + psi_hat
    stderr = math.sqrt(p_hat * (1.0 - p_hat) / n_draws)
    return BoundCheck(event=event, eps=float(eps), alpha=float(alpha),
                      empirical_p=p_hat, bound=float(bound), psi_hat=psi_hat,
                      mc_stderr=stderr, n_draws=n_draws)


_STREAM_THRESHOLD = 0x71
_STREAM_DRAWS = 0x72


def bound_sweep(model: TsybakovModel, tm: TransitionMatrix, epsilons,
                n_draws: int, seed: int):
    """Full verification sweep over eps values and all three events.

    Per eps, one observed-label assignment and one confidence table are
    sampled to fix the thresholds; the event probabilities are then
    estimated with fresh draws. Deterministic given the seed.
    """
    checks = []
    for i, eps in enumerate(epsilons):
        rng_t = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_THRESHOLD, i]))
        given = sample_given_labels(model, tm, rng_t)
        table = sample_oracle_confidences(model, tm, eps, rng_t)
        alphas = {
            ACCEPT_NOISY: error_event_threshold(model, tm, table, given, ACCEPT_NOISY),
            REJECT_CLEAN: error_event_threshold(model, tm, table, given, REJECT_CLEAN),
            LOW_CONFIDENCE: low_confidence_threshold(model, tm, given),
        }
        for j, event in enumerate(EVENTS):
            rng_mc = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_DRAWS, i, j]))
            checks.append(estimate_error_probability(
                model, tm, eps, alphas[event], n_draws, event, rng_mc))
    return checks
