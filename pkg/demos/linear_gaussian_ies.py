"""Iterative ensemble smoother on a linear-Gaussian problem.

The exact posterior is known in closed form, so the ensemble mean and
covariance can be compared against it directly.

    python demos/linear_gaussian_ies.py
"""
import numpy as np

from geoclo.ies import Ensemble, IesConfig, ObservationSet, assimilate

rng = np.random.default_rng(7)
n_par, n_obs, n_e = 4, 6, 2000
G = rng.standard_normal((n_obs, n_par))
C_m = np.eye(n_par)
C_d = 0.1 * np.eye(n_obs)
m_true = rng.standard_normal(n_par)
d_obs = G @ m_true + rng.multivariate_normal(np.zeros(n_obs), C_d)

K = C_m @ G.T @ np.linalg.inv(G @ C_m @ G.T + C_d)
post_mean = K @ d_obs
post_cov = C_m - K @ G @ C_m

prior = Ensemble(rng.standard_normal((n_e, n_par)))
obs = ObservationSet(d_obs, np.sqrt(np.diag(C_d)))
post, diag = assimilate(prior, obs, lambda M: M @ G.T,
                        IesConfig(max_iter=20, lambda_init=1e-6), rng=rng)

print("status:", diag.status)
print("exact mean   ", np.round(post_mean, 3))
print("ensemble mean", np.round(post.members.mean(0), 3))
err = np.linalg.norm(np.cov(post.members.T) - post_cov) / np.linalg.norm(post_cov)
print(f"covariance relative error (Frobenius): {err:.3f}")
