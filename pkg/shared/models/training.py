"""Optimizer hyperparameters for the toy training harness."""

import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class SgdHyper(BaseModel):
    """SGD with momentum and weight decay (batch-norm affine parameters exempt)."""

    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.937, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    schedule: Literal["constant", "flat_cosine"] = "constant"
    min_lr_ratio: float = Field(default=0.01, ge=0, le=1)

    def lr_at(self, step: int, total_steps: int) -> float:
        """Learning rate for a 0-based step.

        flat_cosine holds `lr` for the first half of training, then follows a
        cosine from `lr` down to `lr * min_lr_ratio` at the last step.
        """
        if self.schedule == "constant" or total_steps <= 1:
            return self.lr
        flat = total_steps // 2
        if step < flat:
            return self.lr
        span = max(total_steps - 1 - flat, 1)
        progress = min((step - flat) / span, 1.0)
        floor = self.lr * self.min_lr_ratio
        return floor + (self.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
