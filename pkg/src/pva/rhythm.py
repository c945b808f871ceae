"""Rhythm data model: paired ECG/IEGM recordings, a seeded synthetic generator,
CSV ingestion, integer-factor downsampling, 2 s segmentation, and the
per-event three-way partition used for personalization experiments.
"""

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

SEGMENT_SECONDS = 2.0
SEGMENT_SAMPLES = 250
TARGET_RATE_HZ = 125.0

# Minimum duration for generated shockable spans: four consecutive 2 s
# segments must fit, otherwise no detector can reach a shock decision.
MIN_VTVF_SPAN_S = 8.0


class RhythmError(ValueError):
    pass


class ValidationError(RhythmError):
    pass


class UnsupportedRateError(RhythmError):
    pass


class ParseError(RhythmError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class Label(Enum):
    VTVF = "VTVF"
    NON_VTVF = "NONVTVF"


class Domain(Enum):
    ECG = "ECG"
    IEGM = "IEGM"


class RhythmClass(Enum):
    NSR = "NSR"
    SVT = "SVT"
    VT = "VT"
    VF = "VF"


# Allowed heart-rate range per rhythm class (bpm). VF carries no rate.
CLASS_RATE_BPM = {
    RhythmClass.NSR: (60.0, 100.0),
    RhythmClass.SVT: (150.0, 190.0),
    RhythmClass.VT: (160.0, 220.0),
}

SHOCKABLE_CLASSES = (RhythmClass.VT, RhythmClass.VF)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Waveform:
    """A uniformly sampled signal in mV."""

    samples: np.ndarray
    rate: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if self.rate <= 0:
            raise ValidationError(f"rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", _readonly(samples))

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate


@dataclass(frozen=True)
class EventSpan:
    """A contiguous labeled stretch of rhythm; the unit of detection scoring."""

    start_s: float
    end_s: float
    label: Label

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValidationError(
                f"event span must have end > start, got [{self.start_s}, {self.end_s}]"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def contains(self, t: float) -> bool:
        return self.start_s <= t < self.end_s


@dataclass(frozen=True)
class Recording:
    """Time-aligned ECG and IEGM channels with beat times and labeled events."""

    ecg: Waveform
    iegm: Waveform
    beats: np.ndarray
    events: tuple
    id: str = "rec"

    def __post_init__(self):
        if self.ecg.rate != self.iegm.rate:
            raise ValidationError("ecg and iegm rates differ")
        if len(self.ecg.samples) != len(self.iegm.samples):
            raise ValidationError("ecg and iegm lengths differ")
        beats = np.asarray(self.beats, dtype=np.float64)
        if beats.ndim != 1:
            raise ValidationError("beats must be a 1-D time list")
        if len(beats) > 1 and not np.all(np.diff(beats) > 0):
            raise ValidationError("beat timestamps must be strictly increasing")
        events = tuple(self.events)
        dur = self.ecg.duration_s
        prev_end = 0.0
        for ev in events:
            if ev.start_s < prev_end - 1e-9:
                raise ValidationError("events must be ordered and non-overlapping")
            if ev.end_s > dur + 1e-9:
                raise ValidationError("event extends past end of recording")
            prev_end = ev.end_s
        object.__setattr__(self, "beats", _readonly(beats))
        object.__setattr__(self, "events", events)

    @property
    def rate(self) -> float:
        return self.ecg.rate

    @property
    def duration_s(self) -> float:
        return self.ecg.duration_s


@dataclass(frozen=True)
class Segment:
    """One 2 s, 250-sample window of a single channel."""

    samples: np.ndarray
    domain: Domain
    t_start: float
    label: Label | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.shape != (SEGMENT_SAMPLES,):
            raise ValidationError(
                f"segment must hold exactly {SEGMENT_SAMPLES} samples, got {samples.shape}"
            )
        if not np.all(np.isfinite(samples)):
            raise ValidationError("segment contains non-finite samples")
        object.__setattr__(self, "samples", _readonly(samples))


@dataclass(frozen=True)
class Morphology:
    """Pointwise transform deriving the IEGM channel from the ECG channel.

    y = amplitude_scale * sign(x) * |x|**sharpness + baseline_offset
    """

    amplitude_scale: float = 1.0
    sharpness: float = 1.0
    baseline_offset: float = 0.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        y = np.sign(x) * np.abs(x) ** self.sharpness
        return (self.amplitude_scale * y + self.baseline_offset).astype(np.float32)

    @classmethod
    def identity(cls) -> "Morphology":
        return cls()


@dataclass(frozen=True)
class RhythmSpec:
    """One span of synthetic rhythm to generate."""

    klass: RhythmClass
    duration_s: float
    rate_bpm: float = 0.0  # unused for VF
    noise_level: float = 0.0
    morphology: Morphology = field(default_factory=Morphology)

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValidationError(f"duration_s must be positive, got {self.duration_s}")
        if self.noise_level < 0:
            raise ValidationError("noise_level must be >= 0")
        if self.klass in CLASS_RATE_BPM:
            lo, hi = CLASS_RATE_BPM[self.klass]
            if not lo <= self.rate_bpm <= hi:
                raise ValidationError(
                    f"{self.klass.value} rate must lie in [{lo}, {hi}] bpm, got {self.rate_bpm}"
                )
        if self.klass in SHOCKABLE_CLASSES and self.duration_s < MIN_VTVF_SPAN_S:
            raise ValidationError(
                f"shockable spans must last at least {MIN_VTVF_SPAN_S} s "
                f"so a shock decision is reachable, got {self.duration_s} s"
            )

    @property
    def label(self) -> Label:
        return Label.VTVF if self.klass in SHOCKABLE_CLASSES else Label.NON_VTVF


# Beat morphologies as (amplitude, width sigma in s, offset from R in s).
_BEAT_BUMPS = {
    RhythmClass.NSR: (
        (0.15, 0.025, -0.16),   # P
        (-0.10, 0.008, -0.028),  # Q
        (1.00, 0.010, 0.0),      # R
        (-0.25, 0.009, 0.026),   # S
        (0.35, 0.045, 0.18),     # T
    ),
    RhythmClass.SVT: (
        (-0.10, 0.008, -0.028),
        (1.00, 0.010, 0.0),
        (-0.25, 0.009, 0.026),
        (0.25, 0.040, 0.15),
    ),
}


def _beat_bumps(klass: RhythmClass, rate_bpm: float):
    if klass is not RhythmClass.VT:
        return _BEAT_BUMPS[klass]
    # Two ventricular morphologies: fast VT is the classic wide slurred
    # complex; slow VT sits between the narrow supraventricular complex and
    # the wide fast-VT one, with a small inverted T. A detector tuned on
    # clean wide-vs-narrow examples is uncertain in the intermediate band.
    if rate_bpm >= 190.0:
        return (
            (1.10, 0.045, 0.0),
            (-0.90, 0.055, 0.09),
        )
    return (
        (1.02, 0.018, 0.0),
        (-0.38, 0.020, 0.040),
        (-0.18, 0.040, 0.15),
    )


def _add_bumps(sig, t, beat_times, bumps, amp_scales):
    rate = 1.0 / (t[1] - t[0]) if len(t) > 1 else 1.0
    for tb, scale in zip(beat_times, amp_scales):
        for amp, sigma, dt in bumps:
            center = tb + dt
            lo = max(0, int((center - 4 * sigma) * rate))
            hi = min(len(sig), int((center + 4 * sigma) * rate) + 1)
            if hi <= lo:
                continue
            tt = t[lo:hi] - center
            sig[lo:hi] += scale * amp * np.exp(-0.5 * (tt / sigma) ** 2)


def _vf_oscillation(t_local, rng):
    """Irregular oscillation with dominant 4-7 Hz content, amplitude modulated."""
    sig = np.zeros_like(t_local)
    for _ in range(6):
        f = rng.uniform(4.0, 7.0)
        a = rng.uniform(0.20, 0.50)
        phi = rng.uniform(0.0, 2 * np.pi)
        sig += a * np.sin(2 * np.pi * f * t_local + phi)
    f_mod = rng.uniform(0.25, 0.6)
    phi_mod = rng.uniform(0.0, 2 * np.pi)
    return sig * (1.0 + 0.45 * np.sin(2 * np.pi * f_mod * t_local + phi_mod))


def generate_recording(specs, seed, rate=250.0, rec_id="rec"):
    """Generate a paired ECG/IEGM recording from an ordered list of RhythmSpec.

    Deterministic for a fixed (specs, seed, rate). Beats are emitted for
    periodic classes only; VF spans carry no beat annotations. The IEGM
    channel is the per-span morphology transform of the ECG channel plus an
    independent noise stream.
    """
    if not specs:
        raise ValidationError("specs must be non-empty")
    specs = [s if isinstance(s, RhythmSpec) else RhythmSpec(**s) for s in specs]

    ss = np.random.SeedSequence(entropy=seed)
    rng_wave, rng_ecg_noise, rng_iegm_noise = (
        np.random.default_rng(c) for c in ss.spawn(3)
    )

    total_s = sum(s.duration_s for s in specs)
    n = int(round(total_s * rate))
    t = np.arange(n) / rate
    ecg = np.zeros(n)

    # Slow baseline wander shared by the whole recording.
    ecg += 0.04 * np.sin(2 * np.pi * 0.28 * t + rng_wave.uniform(0, 2 * np.pi))

    beats = []
    events = []
    noise_std = np.zeros(n)
    morph_of_span = []
    t0 = 0.0
    for spec in specs:
        t1 = t0 + spec.duration_s
        i0, i1 = int(round(t0 * rate)), int(round(t1 * rate))
        if spec.klass is RhythmClass.VF:
            ecg[i0:i1] += _vf_oscillation(t[i0:i1] - t0, rng_wave)
        else:
            rr = 60.0 / spec.rate_bpm
            tb = t0 + 0.3 * rr
            span_beats = []
            while tb < t1 - 1e-9:
                span_beats.append(tb)
                tb += rr * (1.0 + rng_wave.uniform(-0.02, 0.02))
            scales = 1.0 + rng_wave.uniform(-0.05, 0.05, size=len(span_beats))
            _add_bumps(ecg, t, span_beats, _beat_bumps(spec.klass, spec.rate_bpm), scales)
            beats.extend(span_beats)
        noise_std[i0:i1] = spec.noise_level
        morph_of_span.append((i0, i1, spec.morphology))
        events.append(EventSpan(t0, t1, spec.label))
        t0 = t1

    ecg = ecg + noise_std * rng_ecg_noise.standard_normal(n)
    ecg32 = ecg.astype(np.float32)

    iegm = np.empty(n, dtype=np.float32)
    for i0, i1, morph in morph_of_span:
        iegm[i0:i1] = morph.apply(ecg32[i0:i1])
    iegm = iegm + (noise_std * rng_iegm_noise.standard_normal(n)).astype(np.float32)

    return Recording(
        ecg=Waveform(ecg32, rate),
        iegm=Waveform(iegm.astype(np.float32), rate),
        beats=np.asarray(beats, dtype=np.float64),
        events=tuple(events),
        id=rec_id,
    )


def downsample(w: Waveform, target_rate: float) -> Waveform:
    """Decimate by an integer factor, anti-aliasing with a boxcar mean."""
    factor = w.rate / target_rate
    if abs(factor - round(factor)) > 1e-9 or factor < 1:
        raise UnsupportedRateError(
            f"rate {w.rate} Hz is not an integer multiple of {target_rate} Hz"
        )
    factor = int(round(factor))
    if factor == 1:
        return w
    n_out = len(w.samples) // factor
    blocks = w.samples[: n_out * factor].astype(np.float64).reshape(n_out, factor)
    return Waveform(blocks.mean(axis=1).astype(np.float32), target_rate)


def downsample_recording(rec: Recording, target_rate: float = TARGET_RATE_HZ) -> Recording:
    """Downsample both channels; beat times and event spans are unchanged."""
    if rec.rate == target_rate:
        return rec
    return Recording(
        ecg=downsample(rec.ecg, target_rate),
        iegm=downsample(rec.iegm, target_rate),
        beats=rec.beats,
        events=rec.events,
        id=rec.id,
    )


def segment_recording(rec: Recording, domain: Domain) -> list:
    """Cut one channel into non-overlapping 2 s segments.

    Each segment is labeled by the event span containing its midpoint; a
    trailing partial window is dropped.
    """
    if rec.rate != TARGET_RATE_HZ:
        raise ValidationError(
            f"segmentation requires {TARGET_RATE_HZ:g} Hz input, got {rec.rate:g} Hz"
        )
    wf = rec.ecg if domain is Domain.ECG else rec.iegm
    n_seg = len(wf.samples) // SEGMENT_SAMPLES
    out = []
    for i in range(n_seg):
        t_start = i * SEGMENT_SECONDS
        mid = t_start + SEGMENT_SECONDS / 2
        label = None
        for ev in rec.events:
            if ev.contains(mid):
                label = ev.label
                break
        out.append(
            Segment(
                samples=wf.samples[i * SEGMENT_SAMPLES : (i + 1) * SEGMENT_SAMPLES],
                domain=domain,
                t_start=t_start,
                label=label,
            )
        )
    return out


@dataclass(frozen=True)
class EventSegments:
    """All aligned segment pairs of one labeled event, in time order."""

    recording_id: str
    event_index: int
    label: Label
    start_s: float
    end_s: float
    ecg: tuple
    iegm: tuple

    def __len__(self):
        return len(self.ecg)


def collect_event_segments(rec: Recording) -> list:
    """Group a 125 Hz recording's aligned segment pairs by containing event."""
    ecg_segs = segment_recording(rec, Domain.ECG)
    iegm_segs = segment_recording(rec, Domain.IEGM)
    out = []
    for idx, ev in enumerate(rec.events):
        pairs = [
            (e, g)
            for e, g in zip(ecg_segs, iegm_segs)
            if ev.contains(e.t_start + SEGMENT_SECONDS / 2)
        ]
        if not pairs:
            continue
        out.append(
            EventSegments(
                recording_id=rec.id,
                event_index=idx,
                label=ev.label,
                start_s=pairs[0][0].t_start,
                end_s=pairs[-1][0].t_start + SEGMENT_SECONDS,
                ecg=tuple(p[0] for p in pairs),
                iegm=tuple(p[1] for p in pairs),
            )
        )
    return out


@dataclass(frozen=True)
class SplitResult:
    g1: tuple
    g2: tuple
    g3: tuple
    skipped: tuple  # (recording_id, event_index) of events too short to split

    def groups(self):
        return (self.g1, self.g2, self.g3)


def split_personalization(events) -> SplitResult:
    """Cut every event's time-ordered segments into three contiguous thirds.

    Group i collects the i-th third of every event; any remainder goes to the
    earlier groups. Events shorter than three segments are excluded and
    reported in the skip list.
    """
    groups = ([], [], [])
    skipped = []
    for ev in events:
        n = len(ev)
        if n < 3:
            skipped.append((ev.recording_id, ev.event_index))
            continue
        q, r = divmod(n, 3)
        sizes = (q + (r >= 1), q + (r >= 2), q)
        lo = 0
        for gi, size in enumerate(sizes):
            ecg = ev.ecg[lo : lo + size]
            iegm = ev.iegm[lo : lo + size]
            groups[gi].append(
                EventSegments(
                    recording_id=ev.recording_id,
                    event_index=ev.event_index,
                    label=ev.label,
                    start_s=ecg[0].t_start,
                    end_s=ecg[-1].t_start + SEGMENT_SECONDS,
                    ecg=ecg,
                    iegm=iegm,
                )
            )
            lo += size
    return SplitResult(tuple(groups[0]), tuple(groups[1]), tuple(groups[2]), tuple(skipped))


# ---------------------------------------------------------------------------
# CSV interchange
#
# Layout:
#   # pva-recording v1, rate=<Hz>, id=<text>
#   t,ecg,iegm
#   <t>,<ecg>,<iegm>          (t printed to 6 decimals)
#   # beats                   (optional, one timestamp per line)
#   # events                  (optional, start,end,label rows)
# ---------------------------------------------------------------------------

_HEADER_PREFIX = "# pva-recording v1"


def write_recording_csv(rec: Recording, path):
    """Write a recording; samples keep full 32-bit precision."""
    rate = rec.rate
    rate_txt = f"{int(rate)}" if float(rate).is_integer() else f"{rate:g}"
    lines = [f"{_HEADER_PREFIX}, rate={rate_txt}, id={rec.id}", "t,ecg,iegm"]
    inv_rate = 1.0 / rate
    for i, (e, g) in enumerate(zip(rec.ecg.samples, rec.iegm.samples)):
        lines.append(f"{i * inv_rate:.6f},{e:.9g},{g:.9g}")
    if len(rec.beats):
        lines.append("# beats")
        lines.extend(repr(float(b)) for b in rec.beats)
    if rec.events:
        lines.append("# events")
        lines.extend(
            f"{repr(float(ev.start_s))},{repr(float(ev.end_s))},{ev.label.value}"
            for ev in rec.events
        )
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _parse_float(text, row, what):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"malformed {what} value {text!r}", row=row) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite {what} value {text!r}", row=row)
    return v


def load_recording_csv(path) -> Recording:
    """Parse a recording CSV, enforcing the invariants of the data model."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith(_HEADER_PREFIX):
        raise ParseError("missing recording header line", row=1)
    header = lines[0]
    fields = {}
    for part in header[len(_HEADER_PREFIX) :].split(","):
        part = part.strip()
        if "=" in part:
            k, v = part.split("=", 1)
            fields[k.strip()] = v.strip()
    if "rate" not in fields:
        raise ParseError("header lacks rate field", row=1)
    rate = _parse_float(fields["rate"], 1, "rate")
    rec_id = fields.get("id", "rec")

    if len(lines) < 2 or lines[1].strip() != "t,ecg,iegm":
        raise ParseError("expected column header 't,ecg,iegm'", row=2)

    ecg, iegm, beats, events = [], [], [], []
    section = "samples"
    for row, line in enumerate(lines[2:], start=3):
        line = line.strip()
        if not line:
            continue
        if line == "# beats":
            section = "beats"
            continue
        if line == "# events":
            section = "events"
            continue
        if section == "samples":
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"expected 3 columns, got {len(parts)}", row=row)
            _parse_float(parts[0], row, "t")
            ecg.append(np.float32(_parse_float(parts[1], row, "ecg")))
            iegm.append(np.float32(_parse_float(parts[2], row, "iegm")))
        elif section == "beats":
            beats.append(_parse_float(line, row, "beat"))
        else:
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError("event rows need start,end,label", row=row)
            start = _parse_float(parts[0], row, "event start")
            end = _parse_float(parts[1], row, "event end")
            try:
                label = Label(parts[2].strip().upper())
            except ValueError:
                raise ParseError(f"unknown event label {parts[2]!r}", row=row) from None
            events.append(EventSpan(start, end, label))

    if not events:
        warnings.warn(f"{path}: no events section; recording loaded with empty events")
    try:
        return Recording(
            ecg=Waveform(np.asarray(ecg, dtype=np.float32), rate),
            iegm=Waveform(np.asarray(iegm, dtype=np.float32), rate),
            beats=np.asarray(beats, dtype=np.float64),
            events=tuple(events),
            id=rec_id,
        )
    except ValidationError as exc:
        raise ParseError(str(exc)) from exc
