"""Detector architecture, confidence-scored inference, and the
consecutive-segment shock evaluator.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tinynn
from .rhythm import Label, SEGMENT_SAMPLES
from .tinynn import LayerSpec, Model, NON_VTVF_INDEX, VTVF_INDEX

# Consecutive shockable segments required before therapy: 4 x 2 s = 8 s of
# evidence.
SHOCK_RUN_LENGTH = 4


def build_detector_arch():
    """Default budgeted stack for 250-sample inputs.

    Feature lengths after the five convs: 122, 59, 28, 13, 6; 6,444
    parameters (25,776 bytes) and a 4,312-byte activation peak, inside the
    26.5 KB / 4.54 KB storage envelope of the implantable target.
    """
    return [
        LayerSpec.conv(1, 4, 7, 2),
        LayerSpec.conv(4, 10, 5, 2),
        LayerSpec.conv(10, 16, 5, 2),
        LayerSpec.conv(16, 20, 3, 2),
        LayerSpec.conv(20, 24, 3, 2),
        LayerSpec.fc(144, 20, relu=True),
        LayerSpec.fc(20, 2),
    ]


def init_detector(seed, dtype=np.float32) -> Model:
    return tinynn.init_model(build_detector_arch(), seed, dtype)


@dataclass(frozen=True)
class Prediction:
    """A classified segment with its confidence score.

    The confidence score is the absolute gap between the two class
    probabilities; 0 means maximally uncertain, 1 maximally certain.
    """

    klass: Label
    cs: float
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


def prediction_from_probs(probs) -> Prediction:
    p_non, p_vtvf = float(probs[NON_VTVF_INDEX]), float(probs[VTVF_INDEX])
    cs = abs(p_vtvf - p_non)
    # Exact tie classifies as shockable: fail toward sensitivity.
    klass = Label.VTVF if p_vtvf >= p_non else Label.NON_VTVF
    return Prediction(klass=klass, cs=cs, probs=np.array([p_non, p_vtvf]))


def infer_with_confidence(model: Model, segment) -> Prediction:
    """Classify one segment and score the confidence of the call."""
    samples = segment.samples if hasattr(segment, "samples") else segment
    samples = np.asarray(samples, dtype=np.float32)
    if samples.shape != (SEGMENT_SAMPLES,):
        raise tinynn.DimensionError(
            f"expected a {SEGMENT_SAMPLES}-sample segment, got {samples.shape}"
        )
    logits, _ = tinynn.forward(model, samples)
    return prediction_from_probs(tinynn.softmax_probs(logits))


def predict_batch(model: Model, x2d: np.ndarray):
    """Vectorized inference: (probs (N, 2), cs (N,), klass indices (N,))."""
    logits, _ = tinynn.forward_batch(model, tinynn.prepare_input(model, x2d))
    probs = tinynn.softmax_probs(logits)
    cs = np.abs(probs[:, VTVF_INDEX] - probs[:, NON_VTVF_INDEX])
    klass = np.where(probs[:, VTVF_INDEX] >= probs[:, NON_VTVF_INDEX],
                     VTVF_INDEX, NON_VTVF_INDEX)
    return probs, cs, klass


@dataclass
class ShockEvaluator:
    """Counts consecutive shockable calls; fires at four in a row.

    A non-shockable call resets the run; firing also resets it, so one
    evaluator can score an ongoing rhythm stream event by event.
    """

    run_length: int = 0
    required: int = SHOCK_RUN_LENGTH

    def push(self, klass: Label) -> bool:
        if klass is Label.VTVF:
            self.run_length += 1
            if self.run_length >= self.required:
                self.run_length = 0
                return True
        else:
            self.run_length = 0
        return False

    def reset(self):
        self.run_length = 0


def evaluator_push(state: ShockEvaluator, klass: Label) -> bool:
    return state.push(klass)


@dataclass(frozen=True)
class EventDecision:
    """Outcome of scoring one event: was a shock delivered, and when."""

    shocked: bool
    truth: Label
    shock_segment_index: int | None = None
    insufficient: bool = False

    def __post_init__(self):
        if self.shocked != (self.shock_segment_index is not None):
            raise ValueError("shock_segment_index must be present iff shocked")


def decide_event(classes, truth: Label) -> EventDecision:
    """Feed per-segment classes through a fresh evaluator; record first firing."""
    ev = ShockEvaluator()
    shock_at = None
    for i, klass in enumerate(classes):
        if ev.push(klass) and shock_at is None:
            shock_at = i
    return EventDecision(shocked=shock_at is not None, truth=truth,
                         shock_segment_index=shock_at)


def detect_event(model: Model, segments, truth: Label | None = None) -> EventDecision:
    """Run single-model inference over an event's segments and score it."""
    segments = list(segments)
    if not segments:
        raise tinynn.DataError("event has no segments")
    if truth is None:
        truth = segments[0].label
    if truth is None:
        raise tinynn.DataError("event truth label unavailable")
    classes = [infer_with_confidence(model, s).klass for s in segments]
    return decide_event(classes, truth)
