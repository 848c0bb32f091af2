"""Budget-constrained multi-period discount allocation for usage-based insurance."""

from .dynamics import DiscountSchedule, DriverParams, DriverState, rollout, stage_cost, step

__version__ = "0.1.0"

__all__ = ["DiscountSchedule", "DriverParams", "DriverState", "rollout", "stage_cost", "step"]
