import math
import logging
from functools import lru_cache

import numpy as np
import pandas as pd
from numba import vectorize, float64


logger = logging.getLogger('qdplace.pwl')


class Curve:
    """
    A scalar function of the utilization, to be linearized.

    Curves are registered with :meth:`Curve.register`, and retrieved with :func:`get_curve`.
    All registered curves can be listed with :func:`available_curves`.
    """

    _available_curves = {}

    def __init__(self, name, func, fprime, fprime_inverse=None, domain=(0., 1.), convex=True, register=True):
        self.name = name
        self._func = func
        self._fprime = fprime
        self._fprime_inverse = fprime_inverse
        self.domain = tuple(float(v) for v in domain)
        self.convex = convex
        if register:
            self.__class__._available_curves[name] = self

    @classmethod
    def register(cls, name=None, fprime=None, fprime_inverse=None, domain=(0., 1.), convex=True):
        """
        | provide a decorator for registering a curve.
        | The decorated function must handle a float as input, and be compilable by `numba`.

        Parameters
        ----------
        name: str
            curve name. default to function name.
        fprime: function
            derivative of the curve (float -> float)
        fprime_inverse: function or None
            inverse of the derivative (slope -> abscissa). Gives closed form maximal errors.
        domain: tuple
            (low, high) open interval where the curve is defined
        convex: bool
            True if the curve is convex on its domain

        Examples
        --------
        >>> @Curve.register(fprime=lambda x: 2 * x, fprime_inverse=lambda s: s / 2, domain=(0., 10.))
        >>> def square(x):
        >>>     return x * x
        >>> square
        <Curve('square') convex>

        Returns
        -------
        Curve
        """
        if fprime is None:
            raise ValueError('fprime is mandatory')

        def inner(func):
            return cls(name or func.__name__, func, fprime, fprime_inverse=fprime_inverse, domain=domain,
                       convex=convex)

        return inner

    @lru_cache
    def _vectorized(self, which='func'):
        pyfunc = {'func': self._func, 'fprime': self._fprime}[which]
        try:
            return vectorize([float64(float64)], nopython=True)(pyfunc)
        except Exception as e:
            # not compilable (ie a closure over python objects)
            logger.debug('numba could not compile %s of curve %s: %s' % (which, self.name, e))
            return np.vectorize(pyfunc, otypes=[np.float64])

    def _apply(self, which, x):
        if np.isscalar(x):
            pyfunc = {'func': self._func, 'fprime': self._fprime}[which]
            return float(pyfunc(float(x)))
        return self._vectorized(which)(np.asarray(x, dtype=np.float64))

    def __call__(self, x):
        return self._apply('func', x)

    def derivative(self, x):
        return self._apply('fprime', x)

    @property
    def has_derivative_inverse(self):
        return self._fprime_inverse is not None

    def derivative_inverse(self, slope):
        """abscissa where the derivative equals `slope`"""
        if self._fprime_inverse is None:
            raise NotImplementedError('curve %s has no derivative inverse' % self.name)
        return float(self._fprime_inverse(float(slope)))

    def in_domain(self, x):
        return self.domain[0] <= x < self.domain[1]

    def __repr__(self):
        return "<%s('%s')%s>" % (self.__class__.__name__, self.name, ' convex' if self.convex else '')


def available_curves():
    """
    get available curves

    Returns
    -------
    pandas.DataFrame
        indexed by curve name
    """
    rows = {
        name: {'curve': curve, 'convex': curve.convex, 'closed_form': curve.has_derivative_inverse,
               'domain': curve.domain}
        for name, curve in Curve._available_curves.items()
    }
    return pd.DataFrame.from_dict(rows, orient='index', columns=['curve', 'convex', 'closed_form', 'domain'])


def get_curve(name):
    """
    get curve by name

    Parameters
    ----------
    name: str or Curve

    Returns
    -------
    Curve
    """
    if isinstance(name, Curve):
        return name
    try:
        return Curve._available_curves[name]
    except KeyError:
        raise KeyError('curve %s not found' % name)


def _tis_prime(rho):
    return 1. / (1. - rho) ** 2


def _tis_prime_inverse(slope):
    return 1. - 1. / math.sqrt(slope)


@Curve.register(fprime=_tis_prime, fprime_inverse=_tis_prime_inverse)
def tis(rho):
    # mu * T(lambda) = 1 / (1 - rho)
    return 1. / (1. - rho)


@Curve.register(fprime=_tis_prime, fprime_inverse=_tis_prime_inverse)
def weighted_tis(rho):
    # lambda * T(lambda) = rho / (1 - rho), independent of mu
    return rho / (1. - rho)


def weighted_tis_chord_error(a, b):
    """
    closed form maximal error of the chord of `weighted_tis` over [a, b]:
    (1 / sqrt(1 - b) - 1 / sqrt(1 - a)) ** 2
    """
    return (1. / math.sqrt(1. - b) - 1. / math.sqrt(1. - a)) ** 2


def weighted_tis_optimal_error(m, interval_end):
    """
    smallest maximal error reachable with `m` basepoints on [0, interval_end] for `weighted_tis`.

    Equal errors on every segment put 1 / sqrt(1 - alpha) on an arithmetic progression.
    """
    return ((1. / math.sqrt(1. - interval_end) - 1.) / (m - 1)) ** 2
