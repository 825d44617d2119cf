"""bbmlab: a Monte Carlo laboratory for critical branching Brownian motion.

Particle engine with killing barriers and stopping lines, martingale and
Gibbs-measure functionals, quadrature of the stable-law limit constants, and
a statistical harness that checks the simulated ensembles against the
predicted identities and fluctuation laws.
"""

__version__ = "0.1.0"
