"""Single-chamber rate-zone discriminator and a plain R-peak detector.

The discriminator votes on a 2 s cadence from the mean of the 10 most recent
R-R intervals and confirms over four consecutive in-zone votes, matching the
8 s confirmation horizon of the segment-based detector it is compared
against. Sensed-beat silence longer than the staleness timeout forces a
VF-zone vote, a minimal model of device undersensing during fibrillation.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .detect import EventDecision
from .rhythm import Label, ValidationError

VT_LO_BPM = 160.0
VF_LO_BPM = 200.0
RR_WINDOW = 10
CONFIRM_VOTES = 4
VOTE_PERIOD_S = 2.0
STALE_TIMEOUT_S = 3.0


class RateZone(Enum):
    NONE = "None"
    VT = "VT"
    VF = "VF"


def classify_zone(rr_intervals, vt_lo=VT_LO_BPM, vf_lo=VF_LO_BPM) -> RateZone:
    """Zone of the mean rate over the up-to-10 most recent intervals (seconds)."""
    window = list(rr_intervals)[-RR_WINDOW:]
    if not window:
        return RateZone.NONE
    if min(window) <= 0:
        raise ValidationError("R-R intervals must be positive")
    bpm = 60.0 / (sum(window) / len(window))
    if bpm > vf_lo:
        return RateZone.VF
    if bpm >= vt_lo:
        return RateZone.VT
    return RateZone.NONE


def classic_detect(beats, start_s, end_s, truth: Label,
                   vt_lo=VT_LO_BPM, vf_lo=VF_LO_BPM) -> EventDecision:
    """Score one event with the rate-zone discriminator.

    Walks 2 s vote checkpoints across [start_s, end_s]; each vote is the zone
    of the current interval window, or VF when no beat has been sensed for
    more than the staleness timeout. Four consecutive in-zone votes shock.
    Fewer than two beats is flagged insufficient (rate votes impossible),
    though the staleness pathway may still shock a long silent event.
    """
    beats = sorted(float(b) for b in beats)
    insufficient = len(beats) < 2
    intervals = [b2 - b1 for b1, b2 in zip(beats, beats[1:])]

    shock_at = None
    consecutive = 0
    vote_index = 0
    t = start_s + VOTE_PERIOD_S
    while t <= end_s + 1e-9:
        seen = [iv for b, iv in zip(beats[1:], intervals) if b <= t]
        last_sense = max((b for b in beats if b <= t), default=start_s)
        if t - last_sense > STALE_TIMEOUT_S:
            zone = RateZone.VF
        else:
            zone = classify_zone(seen, vt_lo, vf_lo)
        if zone is RateZone.NONE:
            consecutive = 0
        else:
            consecutive += 1
            if consecutive >= CONFIRM_VOTES and shock_at is None:
                shock_at = vote_index
        vote_index += 1
        t += VOTE_PERIOD_S

    return EventDecision(
        shocked=shock_at is not None,
        truth=truth,
        shock_segment_index=shock_at,
        insufficient=insufficient,
    )


def detect_r_peaks(w) -> np.ndarray:
    """R-peak timestamps of a 125 Hz waveform.

    A peak is a strict local maximum exceeding 0.6 of the rolling 2 s
    maximum, separated from the previous accepted peak by a 200 ms
    refractory period.
    """
    if w.rate != 125.0:
        raise ValidationError(f"peak detection expects 125 Hz input, got {w.rate:g}")
    x = np.asarray(w.samples, dtype=np.float64)
    n = len(x)
    if n < 3:
        return np.array([], dtype=np.float64)

    half = int(1.0 * w.rate)
    padded = np.pad(x, half, mode="edge")
    rolling_max = sliding_window_view(padded, 2 * half + 1).max(axis=1)
    threshold = 0.6 * rolling_max

    is_peak = np.zeros(n, dtype=bool)
    is_peak[1:-1] = (x[1:-1] > x[:-2]) & (x[1:-1] > x[2:]) & (x[1:-1] > threshold[1:-1])

    refractory = int(0.2 * w.rate)
    peaks = []
    last = -refractory - 1
    for i in np.flatnonzero(is_peak):
        if i - last >= refractory:
            peaks.append(i)
            last = i
    return np.asarray(peaks, dtype=np.float64) / w.rate
