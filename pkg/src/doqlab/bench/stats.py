"""Box-and-whisker summaries.

Quartiles use linear interpolation between closest ranks (numpy's default,
``statistics.quantiles(method="inclusive")``).  Outliers are samples beyond
the 1.5 x IQR Tukey fences; whiskers stop at the most extreme inliers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class EmptySamples(ValueError):
    pass


@dataclass(frozen=True)
class BoxStats:
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    mean: float
    whisker_low: float
    whisker_high: float
    outliers: tuple = field(default_factory=tuple)

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def fences(self) -> tuple[float, float]:
        return self.q1 - 1.5 * self.iqr, self.q3 + 1.5 * self.iqr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outliers"] = list(self.outliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoxStats":
        return cls(**{**d, "outliers": tuple(d["outliers"])})


def summarize(samples) -> BoxStats:
    data = np.asarray(list(samples), dtype=float)
    if data.size == 0:
        raise EmptySamples("cannot summarize an empty sample")
    q1, median, q3 = (float(v) for v in np.percentile(data, [25, 50, 75]))
    iqr = q3 - q1
    low, high = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inliers = data[(data >= low) & (data <= high)]
    outliers = tuple(float(v) for v in np.sort(data[(data < low) | (data > high)]))
    return BoxStats(
        count=int(data.size),
        minimum=float(data.min()),
        q1=q1,
        median=median,
        q3=q3,
        maximum=float(data.max()),
        mean=float(data.mean()),
        whisker_low=float(inliers.min()),
        whisker_high=float(inliers.max()),
        outliers=outliers,
    )
