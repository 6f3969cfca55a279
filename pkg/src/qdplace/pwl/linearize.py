"""
Piecewise linear (PWL) approximation of convex time in system curves.
"""
import logging
from dataclasses import dataclass, replace
from functools import lru_cache

import fsspec
import numpy as np
import pandas as pd
from scipy.optimize import brentq

from ..errors import DomainError
from ..utils import config_value, timing
from .curves import Curve, get_curve

logger = logging.getLogger('qdplace.pwl')

# dense scan resolution when the maximal error has no closed form
GRID_POINTS = 10000

PRESETS = {
    'default': {'curve': 'weighted_tis', 'm': 6, 'interval_end': 0.96},
}


@dataclass(frozen=True, eq=False)
class BasepointSet:
    """
    Ordered PWL basepoints (alpha_s, beta_s).

    Parameters
    ----------
    alpha: array-like
        strictly increasing abscissae. Utilization when `mu` is 1, arrival rate once rescaled.
    beta: array-like
        ordinates
    epsilon: float
        recorded maximal error against `curve`
    curve: str or None
        name of the approximated curve
    mu: float
        service rate the abscissae are scaled by
    """
    alpha: np.ndarray
    beta: np.ndarray
    epsilon: float = np.nan
    curve: str = None
    mu: float = 1.

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64).reshape(-1)
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        if alpha.size < 2:
            raise DomainError("at least 2 basepoints needed. Got %d" % alpha.size)
        if alpha.shape != beta.shape:
            raise DomainError("%d alpha for %d beta" % (alpha.size, beta.size))
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise DomainError("basepoints must be finite")
        if np.any(np.diff(alpha) <= 0):
            raise DomainError("alpha must be strictly increasing. Got %s" % alpha)
        for arr in (alpha, beta):
            arr.setflags(write=False)
        object.__setattr__(self, 'alpha', alpha)
        object.__setattr__(self, 'beta', beta)
        object.__setattr__(self, 'epsilon', float(self.epsilon))

    @property
    def m(self):
        return self.alpha.size

    @property
    def interval_end(self):
        return float(self.alpha[-1])

    def __eq__(self, other):
        if not isinstance(other, BasepointSet):
            return NotImplemented
        return (np.array_equal(self.alpha, other.alpha) and np.array_equal(self.beta, other.beta)
                and (self.epsilon == other.epsilon or (np.isnan(self.epsilon) and np.isnan(other.epsilon)))
                and self.curve == other.curve and self.mu == other.mu)

    __hash__ = None

    def __repr__(self):
        return "<BasepointSet m=%d interval_end=%g epsilon=%.6g curve=%s mu=%g>" % (
            self.m, self.interval_end, self.epsilon, self.curve, self.mu)


def eval_pwl(bp, x):
    """
    evaluate the PWL function of `bp` at `x`

    Parameters
    ----------
    bp: BasepointSet
    x: float or array-like
        in [alpha_0, alpha_(m-1)]

    Returns
    -------
    float or numpy.ndarray
    """
    xa = np.asarray(x, dtype=np.float64)
    if np.any(xa < bp.alpha[0]) or np.any(xa > bp.alpha[-1]) or np.any(np.isnan(xa)):
        raise DomainError("x=%r outside of the linearization interval [%r, %r]" % (x, bp.alpha[0], bp.alpha[-1]))
    res = np.interp(xa, bp.alpha, bp.beta)
    return float(res) if res.ndim == 0 else res


def _as_curve(f, f_prime=None):
    if isinstance(f, (Curve, str)):
        return get_curve(f)
    if f_prime is None:
        raise ValueError('f_prime is mandatory when f is not a registered curve')
    return Curve(getattr(f, '__name__', 'anonymous'), f, f_prime, register=False)


def _segment_max(curve, a, b, fa, fb):
    # returns (error, abscissa of the error) of the chord (a, fa) - (b, fb) against the curve
    slope = (fb - fa) / (b - a)

    def chord(x):
        # exact at both ends
        return (fa * (b - x) + fb * (x - a)) / (b - a)

    def err(x):
        return abs(chord(x) - curve(x))

    candidates = [a, b]
    closed = False
    if curve.convex:
        if curve.has_derivative_inverse:
            try:
                x_star = curve.derivative_inverse(slope)
                if a <= x_star <= b:
                    candidates.append(x_star)
                    closed = True
            except (ValueError, ZeroDivisionError):
                pass
        if not closed:
            ga, gb = curve.derivative(a) - slope, curve.derivative(b) - slope
            if ga < 0 < gb:
                candidates.append(brentq(lambda x: curve.derivative(x) - slope, a, b, xtol=1e-12,
                                         rtol=4 * np.finfo(float).eps))
                closed = True
            elif max(abs(ga), abs(gb)) <= 1e-12 * max(1., abs(slope)):
                # the curve is linear over [a, b]
                closed = True
    if not closed:
        grid = np.linspace(a, b, GRID_POINTS)
        errors = np.abs(chord(grid) - curve(grid))
        candidates.append(float(grid[int(np.argmax(errors))]))
    errors = [err(x) for x in candidates]
    best = int(np.argmax(errors))
    return errors[best], candidates[best]


def segment_errors(bp, f):
    """
    maximal error of each segment of `bp` against curve `f`

    Returns
    -------
    tuple of numpy.ndarray
        (errors, abscissae where the errors are reached)
    """
    curve = _as_curve(f)
    alpha, beta = bp.alpha / bp.mu, bp.beta
    res = [_segment_max(curve, alpha[s], alpha[s + 1], beta[s], beta[s + 1]) for s in range(bp.m - 1)]
    errors = np.array([r[0] for r in res])
    where = np.array([r[1] for r in res]) * bp.mu
    return errors, where


def max_error(bp, f):
    """
    maximal absolute difference between the PWL function of `bp` and the curve `f`

    For convex curves, the maximum of a segment is reached where the curve derivative equals the chord slope.
    It is computed in closed form when the curve has a derivative inverse, by root finding otherwise,
    and by a dense scan of each segment as a last resort.

    Parameters
    ----------
    bp: BasepointSet
        abscissae are divided by `bp.mu` before evaluating `f`
    f: Curve or str

    Returns
    -------
    float
    """
    return float(segment_errors(bp, f)[0].max())


def _make_set(curve, alpha):
    beta = curve(np.asarray(alpha, dtype=np.float64))
    bp = BasepointSet(alpha, beta, curve=curve.name)
    return replace(bp, epsilon=max_error(bp, curve))


def _check_interval(curve, m, interval_end, min_m):
    if m < min_m:
        raise DomainError("m must be >= %d. Got %d" % (min_m, m))
    if not (curve.domain[0] < interval_end < curve.domain[1]):
        raise DomainError("interval_end must be in (%g, %g). Got %r" % (curve.domain[0], curve.domain[1], interval_end))
    start = max(0., curve.domain[0])
    sample = np.linspace(start, interval_end, 1001)
    with np.errstate(all='ignore'):
        if not (np.all(np.isfinite(curve(sample))) and np.all(np.isfinite(curve.derivative(sample)))):
            raise DomainError("curve %s or its derivative is not finite on [%g, %g]" % (curve.name, start, interval_end))
    return start


def uniform_basepoints(f, m=None, interval_end=None):
    """
    evenly spaced basepoints, the baseline of :func:`imamoto_extended`

    Returns
    -------
    BasepointSet
    """
    curve = _as_curve(f)
    m = config_value('pwl.m', m)
    interval_end = config_value('pwl.interval_end', interval_end)
    start = _check_interval(curve, m, interval_end, 2)
    return _make_set(curve, np.linspace(start, interval_end, m))


def _error_derivatives(curve, a, b, x_star):
    # envelope derivatives of the chord error over [a, b] with respect to a and b
    slope = (curve(b) - curve(a)) / (b - a)
    d_a = (curve.derivative(a) - slope) * (b - x_star) / (b - a)
    d_b = (curve.derivative(b) - slope) * (x_star - a) / (b - a)
    return d_a, d_b


def _drop_duplicate_derivatives(curve, alpha):
    # removes interior basepoints whose derivative equals the previous kept one, then reinserts them
    # at the middle of the segments with the largest error
    fprime = curve.derivative(alpha)
    keep = [0]
    for s in range(1, alpha.size - 1):
        ref = fprime[keep[-1]]
        if abs(fprime[s] - ref) > 1e-12 * max(1., abs(ref)):
            keep.append(s)
    keep.append(alpha.size - 1)
    removed = alpha.size - len(keep)
    if not removed:
        return alpha
    alpha = alpha[keep]
    for _ in range(removed):
        errors, _where = segment_errors(BasepointSet(alpha, curve(alpha)), curve)
        s = int(np.argmax(errors))
        alpha = np.insert(alpha, s + 1, 0.5 * (alpha[s] + alpha[s + 1]))
    return alpha


@timing(logger.debug)
def imamoto_extended(f, f_prime=None, m=None, interval_end=None, max_iterations=None, min_move=None):
    """
    Refine `m` basepoints on [0, interval_end] until the maximal errors of all segments are equal.

    Every interior basepoint is moved by a Newton step that equalizes the errors of its two adjacent segments.
    Steps are kept below half the gap to the neighbour basepoint and damped by a weight that is halved each time
    a step would increase the maximal error. The loop stops when no basepoint moves any more, or after
    `max_iterations`.
    Before each step, basepoints whose derivative equals the one of their predecessor (linear stretches) are
    removed and reinserted in the middle of the segments with the largest error.

    Parameters
    ----------
    f: Curve, str or function
        convex curve, or its python function
    f_prime: function or None
        derivative of `f`, mandatory if `f` is a plain function
    m: int or None
        number of basepoints (>= 3). Default from config 'pwl.m'
    interval_end: float or None
        alpha_(m-1). Default from config 'pwl.interval_end'
    max_iterations: int or None
        Default from config 'pwl.max_iterations'
    min_move: float or None
        movement below which the basepoints are considered fixed. Default from config 'pwl.min_move'

    Returns
    -------
    BasepointSet
        with alpha_0 = 0 and alpha_(m-1) = interval_end
    """
    curve = _as_curve(f, f_prime)
    m = config_value('pwl.m', m)
    interval_end = config_value('pwl.interval_end', interval_end)
    max_iterations = config_value('pwl.max_iterations', max_iterations)
    min_move = config_value('pwl.min_move', min_move)
    start = _check_interval(curve, m, interval_end, 3)

    alpha = np.linspace(start, interval_end, m)
    weight = 1.
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        previous = alpha
        alpha = _drop_duplicate_derivatives(curve, alpha)
        bp = BasepointSet(alpha, curve(alpha))
        errors, where = segment_errors(bp, curve)
        current = errors.max()
        steps = np.zeros(m)
        for s in range(1, m - 1):
            _, d_left = _error_derivatives(curve, alpha[s - 1], alpha[s], where[s - 1])
            d_right, _ = _error_derivatives(curve, alpha[s], alpha[s + 1], where[s])
            denominator = d_left - d_right
            if not np.isfinite(denominator) or denominator == 0:
                continue
            step = (errors[s] - errors[s - 1]) / denominator
            if step > 0:
                step = min(step, 0.45 * (alpha[s + 1] - alpha[s]))
            else:
                step = max(step, -0.45 * (alpha[s] - alpha[s - 1]))
            steps[s] = step

        candidate = alpha + weight * steps
        candidate_error = segment_errors(BasepointSet(candidate, curve(candidate)), curve)[0].max()
        if candidate_error > current:
            weight *= 0.5
            moved = np.abs(alpha - previous).max()
        else:
            moved = np.abs(candidate - previous).max()
            alpha = candidate
            weight = min(1., 2 * weight)
        if moved < min_move and weight * np.abs(steps).max() < min_move:
            break
    else:
        logger.info('imamoto_extended: iteration cap %d reached' % max_iterations)

    result = _make_set(curve, alpha)
    logger.debug('imamoto_extended %s m=%d interval_end=%g: epsilon=%.6g after %d iterations' % (
        curve.name, m, interval_end, result.epsilon, iteration))
    return result


def rescale(bp, mu):
    """
    Rescale utilization basepoints to arrival rates of a facility with service rate `mu`:
    alpha' = mu * alpha, beta' = beta. The maximal error is unchanged.

    Returns
    -------
    BasepointSet
    """
    if not (np.isfinite(mu) and mu > 0):
        raise DomainError("mu must be > 0. Got %r" % mu)
    return replace(bp, alpha=bp.alpha * mu, mu=bp.mu * mu)


def get_preset(name='default'):
    """
    get a named linearization setting

    Returns
    -------
    dict
        keys 'curve', 'm', 'interval_end'
    """
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise KeyError('preset %s not found. Available: %s' % (name, list(PRESETS)))


@lru_cache
def linearize_preset(name='default'):
    """basepoints of a named preset (cached)"""
    preset = get_preset(name)
    return imamoto_extended(preset['curve'], m=preset['m'], interval_end=preset['interval_end'])


@lru_cache
def linearize(curve='weighted_tis', m=None, interval_end=None):
    """cached :func:`imamoto_extended` of a registered curve"""
    return imamoto_extended(curve, m=m, interval_end=interval_end)


def write_basepoints(bp, path):
    """
    write basepoints as csv with header `s,alpha,beta`, followed by a comment line
    recording m, interval_end, epsilon, curve and mu.
    """
    df = pd.DataFrame({'s': np.arange(bp.m), 'alpha': bp.alpha, 'beta': bp.beta})
    with fsspec.open(path, 'w', encoding='utf-8', newline='') as f:
        df.to_csv(f, index=False, lineterminator='\n')
        f.write('# m=%d,interval_end=%r,epsilon=%r,curve=%s,mu=%r\n' % (
            bp.m, bp.interval_end, bp.epsilon, bp.curve, bp.mu))


def read_basepoints(path):
    """read basepoints written by :func:`write_basepoints`"""
    meta = {}
    with fsspec.open(path, 'r', encoding='utf-8') as f:
        df = pd.read_csv(f, comment='#', float_precision='round_trip')
        f.seek(0)
        for line in f:
            if line.startswith('#'):
                meta = dict(item.split('=', 1) for item in line[1:].strip().split(','))
    curve = meta.get('curve')
    return BasepointSet(df['alpha'].to_numpy(), df['beta'].to_numpy(), epsilon=float(meta.get('epsilon', 'nan')),
                        curve=None if curve in (None, 'None') else curve, mu=float(meta.get('mu', 1.)))
