"""Fit every method on one synthetic benchmark and compare how well each separates outliers.

The benchmark draws ten cluster covariances from an inverse-Wishart with few
degrees of freedom, so the classes really do differ in shape.  Per-class
covariances show up most clearly in classification accuracy; a single seed
of AUROC is noisy, and ``03_heterogeneity_sweep.py`` averages over seeds.

Run with ``python3 demos/01_compare_methods.py``.
"""

import warnings

from bnp_ood.numerics import ConvergenceWarning
from bnp_ood.evaluation import accuracy, auroc
from bnp_ood.models import METHODS, fit_pipeline
from bnp_ood.synthetic import SynthConfig, generate_split

cfg = SynthConfig(D=2, K=10, N_k=20, nu0=4.0, seed=3)
split = generate_split(cfg)
print(f"{split.train.N} training points in {split.train.K} classes, "
      f"{split.test_in.N} held-out inliers, {len(split.test_out)} outliers\n")

print(f"{'method':8s}  {'AUROC':>6s}  {'accuracy':>8s}")
for name in METHODS:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        pipe = fit_pipeline(name, split.train)
    t_in = pipe.score_table(split.test_in.X)
    t_out = pipe.score_table(split.test_out)
    print(f"{name:8s}  {auroc(t_in.score, t_out.score):6.3f}  {accuracy(t_in.predicted_class, split.test_in.y):8.3f}")

# The DPMM variants also give a calibrated-looking probability that a point
# belongs to an existing class rather than a new one.
pipe = fit_pipeline("full", split.train)
p_in = pipe.score_table(split.test_in.X, alpha=1.0).inlier_probability
p_out = pipe.score_table(split.test_out, alpha=1.0).inlier_probability
print(f"\nfull model, alpha=1: mean inlier probability {p_in.mean():.3f} on inliers, {p_out.mean():.3f} on outliers")
