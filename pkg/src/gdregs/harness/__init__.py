"""Monte-Carlo measurement, toy experiment and desk-scale training."""
from .measure import estimator_draws, gradient_stats
from .stats import GradStats, ZTest, stream, summarize, unbiasedness_test

__all__ = ["GradStats", "ZTest", "estimator_draws", "gradient_stats", "stream", "summarize",
           "unbiasedness_test"]
