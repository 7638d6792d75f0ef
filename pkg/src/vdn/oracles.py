"""Independent numerical oracles for the closed-form objective.

These are deliberately written against scipy.stats densities and raw sampling, sharing
no code with the analytic terms in ``objective``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats


@dataclass
class MCEstimate:
    mean: float
    stderr: float

    def z_score(self, value):
        return (value - self.mean) / self.stderr


def _sample_q(rng, mu, m_sq, alpha, beta, n):
    z = rng.normal(mu, np.sqrt(m_sq), size=(n,) + mu.shape)
    # sigma^2 ~ IG(alpha, beta)  <=>  1/sigma^2 ~ Gamma(alpha, rate=beta)
    s = beta / rng.gamma(alpha, 1.0, size=(n,) + mu.shape)
    return z, s


def _chunks(n, size):
    while n > 0:
        k = min(n, size)
        yield k
        n -= k


def mc_lower_bound(mu, m_sq, alpha, beta, y, x, epsilon0_sq, alpha0, beta0,
                   n_samples=100_000, seed=0, chunk=10_000):
    """Monte-Carlo estimate of E_q[log p(y|z,s) p(z) p(s) - log q(z, s)], summed over pixels."""
    arrs = [np.asarray(a, dtype=np.float64) for a in (mu, m_sq, alpha, beta, y, x)]
    mu, m_sq, alpha, beta, y, x = arrs
    beta0 = np.broadcast_to(np.asarray(beta0, dtype=np.float64), mu.shape)
    rng = np.random.default_rng(seed)
    sd_q = np.sqrt(m_sq)
    sd_0 = np.sqrt(epsilon0_sq)
    totals = []
    for k in _chunks(n_samples, chunk):
        z, s = _sample_q(rng, mu, m_sq, alpha, beta, k)
        log_joint = (
            stats.norm.logpdf(y, loc=z, scale=np.sqrt(s))
            + stats.norm.logpdf(z, loc=x, scale=sd_0)
            + stats.invgamma.logpdf(s, alpha0, scale=beta0)
        )
        log_q = stats.norm.logpdf(z, loc=mu, scale=sd_q) + stats.invgamma.logpdf(s, alpha, scale=beta)
        totals.append((log_joint - log_q).reshape(k, -1).sum(axis=1))
    t = np.concatenate(totals)
    return MCEstimate(float(t.mean()), float(t.std(ddof=1) / np.sqrt(t.size)))


def mc_likelihood(mu, m_sq, alpha, beta, y, n_samples=100_000, seed=0, chunk=10_000):
    """Monte-Carlo estimate of E_q[log N(y | z, s)], summed over pixels."""
    mu, m_sq, alpha, beta, y = (np.asarray(a, dtype=np.float64) for a in (mu, m_sq, alpha, beta, y))
    rng = np.random.default_rng(seed)
    totals = []
    for k in _chunks(n_samples, chunk):
        z, s = _sample_q(rng, mu, m_sq, alpha, beta, k)
        ll = stats.norm.logpdf(y, loc=z, scale=np.sqrt(s))
        totals.append(ll.reshape(k, -1).sum(axis=1))
    t = np.concatenate(totals)
    return MCEstimate(float(t.mean()), float(t.std(ddof=1) / np.sqrt(t.size)))


def _kl_quad(logq, logp, lo, hi):
    def integrand(u):
        lq = logq(u)
        return np.exp(lq) * (lq - logp(u))

    val, _ = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-12, limit=500)
    return val


def quad_kl_gaussian(mu, m_sq, x, epsilon0_sq):
    """KL(N(mu, m_sq) || N(x, eps0^2)) for scalars by adaptive quadrature over z."""
    sd = np.sqrt(m_sq)
    q = stats.norm(mu, sd)
    p = stats.norm(x, np.sqrt(epsilon0_sq))
    return _kl_quad(q.logpdf, p.logpdf, mu - 40 * sd, mu + 40 * sd)


def quad_kl_inverse_gamma(alpha, beta, alpha0, beta0):
    """KL(IG(alpha, beta) || IG(alpha0, beta0)) for scalars by adaptive quadrature.

    Integrates over t = log sigma^2, covering (0, inf) in sigma^2.
    """
    q = stats.invgamma(alpha, scale=beta)
    p = stats.invgamma(alpha0, scale=beta0)

    # density of t = log s under q is q(e^t) e^t; the Jacobian cancels inside the log ratio
    def logq_t(t):
        return q.logpdf(np.exp(t)) + t

    def logp_t(t):
        return p.logpdf(np.exp(t)) + t

    lo = np.log(q.ppf(1e-30)) - 5.0
    hi = np.log(q.isf(1e-30)) + 5.0
    return _kl_quad(logq_t, logp_t, lo, hi)


def random_elbo_setting(rng, shape=(1, 8, 8)):
    """A random posterior / prior / data configuration for oracle audits."""
    mu = rng.uniform(0.0, 1.0, shape)
    y = np.clip(mu + rng.normal(0.0, 0.1, shape), 0.0, 1.0)
    x = np.clip(mu + rng.normal(0.0, 0.05, shape), 0.0, 1.0)
    return {
        "mu": mu, "y": y, "x": x,
        "m_sq": np.exp(rng.uniform(np.log(1e-4), np.log(1e-2), shape)),
        "alpha": rng.uniform(2.0, 40.0, shape),
        "beta": np.exp(rng.uniform(np.log(1e-3), np.log(1.0), shape)),
        "epsilon0_sq": float(np.exp(rng.uniform(np.log(1e-4), np.log(1e-2)))),
        "p": int(rng.choice([3, 5, 7, 11])),
        "xi": np.exp(rng.uniform(np.log(1e-4), np.log(1e-1), shape)),
    }


def elbo_audit(trials=20, n_samples=100_000, seed=0, shape=(1, 8, 8)):
    """Closed-form lower bound vs its Monte-Carlo estimate on random settings.

    Returns one dict per trial with keys trial, analytic, mc_mean, mc_stderr, z_score.
    """
    from .objective import VariationalPosterior, negative_elbo
    from .prior import PriorSpec, prior_sigma_params

    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(trials):
        s = random_elbo_setting(rng, shape)
        prior = PriorSpec(s["epsilon0_sq"], s["p"], xi=s["xi"])
        q = VariationalPosterior(s["mu"], s["m_sq"], s["alpha"], s["beta"])
        analytic = -float(negative_elbo(q, s["y"], s["x"], prior).total)
        alpha0, beta0 = prior_sigma_params(prior)
        est = mc_lower_bound(
            s["mu"], s["m_sq"], s["alpha"], s["beta"], s["y"], s["x"], s["epsilon0_sq"],
            alpha0, beta0, n_samples=n_samples, seed=int(rng.integers(2**32)),
        )
        rows.append({
            "trial": trial, "analytic": analytic, "mc_mean": est.mean,
            "mc_stderr": est.stderr, "z_score": est.z_score(analytic),
        })
    return rows
