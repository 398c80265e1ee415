"""
The marginal likelihood
=======================

Amplitude and noise level are integrated out analytically.  Check the
closed form against brute-force quadrature for one voxel, then look at its
profile along f.
"""
import numpy as np
from scipy import integrate

from placivim import ivim

b = np.asarray(ivim.DEFAULT_BVALUES)
rng = np.random.default_rng(0)
y = 100 * ivim.shape(b, 0.18, 0.0019, 0.068) + rng.normal(0, 5, b.size)
t = ivim.TransformedParams(ivim.logit(0.18), np.log(0.0019), np.log(0.068))

###############################################################################
# Quadrature: flat prior on the amplitude, Jeffreys prior on the variance,
# integrated in u = log(sigma^2).
g = ivim.shape(b, 0.18, 0.0019, 0.068)
n = b.size


def integrand(s0, u):
    r = y - s0 * g
    return np.exp(-0.5 * n * np.log(2 * np.pi) - 0.5 * n * u - (r @ r) / (2 * np.exp(u)) + 30.0)


s_hat = (y @ g) / (g @ g)
num, _ = integrate.dblquad(integrand, 0.0, 10.0, s_hat - 30, s_hat + 30, epsrel=1e-10)
closed = ivim.log_marginal_likelihood(y, b, t) + ivim.marginal_loglik_constant(n)
print(f"closed form {closed:.8f}   quadrature {np.log(num) - 30.0:.8f}")

###############################################################################
# Profile in f with d and ds held at their true values.
for f in (0.05, 0.1, 0.18, 0.3, 0.5):
    tf = ivim.TransformedParams(ivim.logit(f), t.D, t.Ds)
    print(f"f={f:4.2f}  log L = {ivim.log_marginal_likelihood(y, b, tf):9.3f}")
