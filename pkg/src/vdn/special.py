"""Digamma and log-Gamma for positive real arguments (float64, vectorised).

Both shift small arguments upward with the recurrences
psi(x) = psi(x + 1) - 1/x and lgamma(x) = lgamma(x + 1) - log x until x >= 10,
then evaluate the asymptotic (Stirling) series. Near the zeros (the positive root
of psi, and x = 1, 2 for lgamma) Taylor series are used instead so that relative
accuracy holds there too.
"""

import numpy as np

_SHIFT_TO = 10.0

# Bernoulli numbers B_2k for k = 1..8
_B2K = np.array([
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
])
_K = np.arange(1, len(_B2K) + 1)
# psi(x) ~ log x - 1/(2x) - sum B_2k / (2k x^2k)
_PSI_COEF = _B2K / (2 * _K)
# lgamma(x) ~ (x - 1/2) log x - x + log(2 pi)/2 + sum B_2k / (2k (2k - 1) x^(2k-1))
_LGAMMA_COEF = _B2K / (2 * _K * (2 * _K - 1))
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# positive root of psi as a double-double pair, and psi^(k)(root) / k! for k = 1..30
_PSI_ROOT_HI = 1.4616321449683622
_PSI_ROOT_LO = 9.549995429965697e-17
_PSI_ROOT_RADIUS = 0.3
_PSI_ROOT_COEF = np.array([
    0.9676722454476212, -0.4427631689835921, 0.258499760955651, -0.16394270544240652,
    0.10782405069126237, -0.07219956125645471, 0.04880428816414311, -0.03316112647484736,
    0.022597648232218104, -0.01542476590494896, 0.010538791616612175, -0.007204534386356869,
    0.004926781395729853, -0.003369801655439328, 0.002305126326734928, -0.0015769367714301972,
    0.0010788252019162967, -0.0007380709389960052, 0.000504953265834602, -0.0003454680251063077,
    0.00023635601564027053, -0.00016170622091974803, 0.0001106337276874741, -7.569179582195066e-05,
    5.178575795222081e-05, -3.5430070947659604e-05, 2.424006611860132e-05, -1.6584242271854135e-05,
    1.134638458466385e-05, -7.762817668462094e-06,
])

# lgamma(2 + t) = (1 - gamma) t + sum_{k>=2} (-1)^k (zeta(k) - 1) / k * t^k
_ONE_MINUS_EULER = 0.42278433509846713
_LGAMMA2_COEF = np.array([
    0.3224670334241132, -0.0673523010531981, 0.020580808427784546, -0.007385551028673986,
    0.0028905103307415234, -0.001192753911703261, 0.0005096695247430425, -0.00022315475845357939,
    9.945751278180853e-05, -4.492623673813314e-05, 2.050721277567069e-05, -9.439488275268397e-06,
    4.374866789907488e-06, -2.039215753801366e-06, 9.55141213040742e-07, -4.492469198764566e-07,
    2.1207184805554665e-07, -1.0043224823968099e-07, 4.7698101693639804e-08, -2.2711094608943164e-08,
    1.0838659214896955e-08, -5.183475041970047e-09, 2.4836745438024785e-09, -1.1921401405860912e-09,
    5.731367241678862e-10, -2.7595228851242334e-10, 1.330476437424449e-10, -6.4229645638381e-11,
    3.1044247747322276e-11, -1.5021384080754142e-11, 7.275974480239079e-12, -3.527742476575915e-12,
    1.711991790559618e-12, -8.315385841420285e-13, 4.04220052528944e-13, -1.9664756310966165e-13,
])


def _check_positive(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("argument must be finite")
    if np.any(x <= 0):
        raise ValueError("argument must be positive")
    return x


def _shift(x):
    """Smallest integer n >= 0 per element with x + n >= _SHIFT_TO."""
    return np.maximum(np.ceil(_SHIFT_TO - x), 0.0).astype(np.int64)


def _poly(coef, t):
    # Horner in t for sum_k coef[k] * t^(k+1)
    acc = np.zeros_like(t)
    for c in coef[::-1]:
        acc = (acc + c) * t
    return acc


def digamma(x):
    x = _check_positive(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    n = _shift(x)
    correction = np.zeros_like(x)
    for k in range(int(n.max(initial=0))):
        active = n > k
        correction[active] += 1.0 / (x[active] + k)
    z = x + n
    inv2 = 1.0 / (z * z)
    out = np.log(z) - 0.5 / z - _poly(_PSI_COEF, inv2) - correction
    t = (x - _PSI_ROOT_HI) - _PSI_ROOT_LO
    near = np.abs(t) <= _PSI_ROOT_RADIUS
    if near.any():
        out[near] = _poly(_PSI_ROOT_COEF, t[near])
    return out[0] if scalar else out


def log_gamma(x):
    x = _check_positive(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    n = _shift(x)
    # product x (x+1) ... (x+n-1), accumulated as a sum of logs for range safety
    log_prod = np.zeros_like(x)
    for k in range(int(n.max(initial=0))):
        active = n > k
        log_prod[active] += np.log(x[active] + k)
    z = x + n
    inv = 1.0 / z
    series = z * _poly(_LGAMMA_COEF, inv * inv)
    out = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + series - log_prod
    near2 = (x >= 1.5) & (x <= 2.5)
    if near2.any():
        out[near2] = _lgamma_near_two(x[near2] - 2.0)
    near1 = (x >= 0.5) & (x < 1.5)
    if near1.any():
        xs = x[near1]
        out[near1] = _lgamma_near_two(xs - 1.0) - np.log1p(xs - 1.0)
    return out[0] if scalar else out


def _lgamma_near_two(t):
    return _ONE_MINUS_EULER * t + t * _poly(_LGAMMA2_COEF, t)


def trigamma(x):
    """psi'(x), same shifting scheme (used by the closed-form loss gradients)."""
    x = _check_positive(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    n = _shift(x)
    correction = np.zeros_like(x)
    for k in range(int(n.max(initial=0))):
        active = n > k
        correction[active] += 1.0 / (x[active] + k) ** 2
    z = x + n
    inv = 1.0 / z
    inv2 = inv * inv
    # psi'(x) ~ 1/x + 1/(2x^2) + sum B_2k / x^(2k+1)
    out = inv + 0.5 * inv2 + inv * _poly(_B2K, inv2) + correction
    return out[0] if scalar else out
