"""Stream a recorded sweep sample by sample at a fixed rate.

Replay only affects timing: the collected record equals the recording, so
everything computed from it matches the offline path.
"""

from __future__ import annotations

import time

import numpy as np

from spinefuse.errors import ParameterError
from spinefuse.phantom import ScanRecord


def stream_samples(record: ScanRecord, rate_hz: float, sleep=time.sleep):
    """Yield ``(t_s, pos_mm, fy_n, fz_n, us_prob, label)`` one sample per ``1/rate_hz``."""
    if not rate_hz > 0:
        raise ParameterError(f"replay rate must be positive, got {rate_hz}")
    period = 1.0 / rate_hz
    for i in range(len(record)):
        if i:
            sleep(period)
        yield (record.timestamps[i], record.positions[i], record.fy[i], record.fz[i],
               record.us_prob[i], record.ground_truth[i])


def collect(samples) -> ScanRecord:
    rows = list(samples)
    if not rows:
        raise ParameterError("stream produced no samples")
    cols = list(zip(*rows))
    return ScanRecord(*(np.array(c, dtype=float) for c in cols[:5]),
                      np.array(cols[5], dtype=np.int64))


def replay(record: ScanRecord, rate_hz: float, sleep=time.sleep) -> ScanRecord:
    return collect(stream_samples(record, rate_hz, sleep))
