"""tempex: saliency for time-series classifiers via jointly learned masks
and perturbation generators, with fixed-perturbation and gradient/occlusion
baselines, synthetic benchmarks with known ground truth, and the metric
suite to compare them."""

from . import autodiff, data, explainers, metrics, nets, perturbation

__version__ = "0.1.0"
