"""Forward noising and deterministic DDIM, checked against a noise predictor that knows the answer.

    python demos/02_diffusion_algebra.py
"""
import numpy as np

from cife.diffusion import SamplerConfig, add_noise, ddim_sample, default_schedule, timestep_subsequence

sched = default_schedule()
print(f"T={sched.T}  beta {sched.betas[0]:.1e}..{sched.betas[-1]:.1e}  alpha_bar[T-1]={sched.alpha_bars[-1]:.2e}")

g = np.random.default_rng(0)
x0, eps = g.standard_normal((1, 4, 8, 8)), g.standard_normal((1, 4, 8, 8))
for t in (0, 50, 199):
    x_t = add_noise(x0, eps, t, sched)
    ab = sched.alpha_bars[t]
    back = (x_t - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    print(f"t={t:3d}  corr(x_t, x0)={np.corrcoef(x_t.ravel(), x0.ravel())[0, 1]:+.3f}  "
          f"round trip error {np.abs(back - x0).max():.1e}")


def oracle(x_t, t):
    ab = sched.alpha_bars[t]
    return (x_t - np.sqrt(ab) * x0) / np.sqrt(1 - ab)


x_T = g.standard_normal(x0.shape)
for steps in (1, 5, 20):
    out = ddim_sample(None, SamplerConfig(steps=steps), None, sched, eps_model=oracle, x_T=x_T)
    print(f"DDIM {steps:2d} steps {[int(t) for t in timestep_subsequence(sched.T, steps)][:4]}...  "
          f"error {np.abs(out - x0).max():.1e}")
