"""Experiment pipeline glue: demo cohorts, dataset assembly, personalization
at varying label depths, policy training, implant-candidate selection, and
mode evaluation on held-out event thirds.

Modes follow the personalization ladder: `cnn-0g` deploys the generalized
model on both nodes with no candidate pool; `cnn-1g` and `cnn-2g` fine-tune
on one or two labeled groups and add the adapted pool plus the selection
policy; `no-policy` reuses the two-group artifacts with the wearable running
only its surface model; `classic` is the rate-zone discriminator.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapt, baseline, coopsim, detect, evalkit, policy as policy_mod, rhythm, tinynn
from .adapt import AdaptConfig, CandidatePool
from .coopsim import CostModel, NodeModels
from .policy import PolicyNet, PolicyTrainConfig
from .rhythm import Domain, Morphology, Recording, RhythmClass, RhythmSpec, SplitResult
from .tinynn import Model, TrainConfig

MODES = ("cnn-0g", "cnn-1g", "cnn-2g", "no-policy", "classic")
DEFAULT_THRESHOLD = 0.5

# Seed offsets keep every stage on an independent, reproducible stream.
_SEED_INIT = 0
_SEED_BASE = 1
_SEED_FINETUNE = 2
_SEED_ADAPT = 3
_SEED_POLICY_INIT = 4
_SEED_POLICY_TRAIN = 5


@dataclass(frozen=True)
class StageConfigs:
    """Hyperparameters for every training stage of the pipeline."""

    base_train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    policy: PolicyTrainConfig = field(default_factory=PolicyTrainConfig)


def demo_stage_configs(seed=0) -> StageConfigs:
    """Desk-scale hyperparameters: minutes, not GPU-hours."""
    return StageConfigs(
        base_train=TrainConfig(learning_rate=0.02, batch_size=64, momentum=0.9,
                               epochs=40, seed=seed + _SEED_BASE),
        finetune=TrainConfig(learning_rate=0.01, batch_size=32, momentum=0.9,
                             epochs=30, seed=seed + _SEED_FINETUNE),
        adapt=AdaptConfig(
            lambda_mmd=1.0,
            train=TrainConfig(learning_rate=0.01, batch_size=32, momentum=0.9,
                              epochs=8, seed=seed + _SEED_ADAPT),
        ),
        policy=PolicyTrainConfig(
            beta=1.0,
            train=TrainConfig(learning_rate=0.05, batch_size=8, momentum=0.9,
                              epochs=6, seed=seed + _SEED_POLICY_TRAIN),
        ),
    )


# ---------------------------------------------------------------------------
# Demo cohorts
# ---------------------------------------------------------------------------

_DB_TEMPLATES = (
    (("NSR", 20), ("VT", 26), ("NSR", 18), ("SVT", 24), ("VF", 24)),
    (("NSR", 22), ("SVT", 26), ("NSR", 18), ("VT", 30)),
    (("SVT", 24), ("NSR", 20), ("VF", 28), ("NSR", 18)),
    (("NSR", 20), ("VT", 28), ("NSR", 18), ("VF", 26), ("NSR", 16)),
)

_PATIENT_TEMPLATES = (
    (("NSR", 20), ("SVT", 24), ("NSR", 18), ("VT", 30), ("NSR", 18)),
    (("NSR", 20), ("VT", 28), ("NSR", 18), ("VF", 28), ("NSR", 16)),
    (("SVT", 26), ("NSR", 20), ("VT", 30), ("NSR", 18)),
    (("NSR", 22), ("VF", 30), ("NSR", 18), ("SVT", 24)),
)

# Database recordings: clean signals, fast wide-complex VT, class rates well
# separated.
_DB_RATES = {"NSR": (62.0, 95.0), "SVT": (150.0, 168.0), "VT": (192.0, 218.0)}
_DB_NOISE = (0.04, 0.08)

# Patient recordings: noisier, slow narrow-complex VT overlapping the SVT
# rate band (rate alone cannot separate them), and a fixed patient-specific
# lead morphology.
_PATIENT_RATES = {"NSR": (64.0, 92.0), "SVT": (162.0, 186.0), "VT": (163.0, 189.0)}
_PATIENT_NOISE = (0.10, 0.16)
_PATIENT_MORPHOLOGY = Morphology(amplitude_scale=1.12, sharpness=1.06,
                                 baseline_offset=0.06)


def _spans_from_template(template, rates, noise_range, morphology, rng):
    specs = []
    for name, duration in template:
        klass = RhythmClass(name)
        rate = 0.0
        if klass is not RhythmClass.VF:
            lo, hi = rates[name]
            rate = round(float(rng.uniform(lo, hi)), 1)
        specs.append(RhythmSpec(
            klass=klass,
            duration_s=float(duration),
            rate_bpm=rate,
            noise_level=round(float(rng.uniform(*noise_range)), 3),
            morphology=morphology,
        ))
    return specs


def make_demo_cohort(kind: str, n_recordings: int, seed: int) -> dict:
    """Deterministic cohort description, JSON-serializable."""
    if kind == "database":
        templates, rates, noise, morph = (_DB_TEMPLATES, _DB_RATES, _DB_NOISE, None)
    elif kind == "patient":
        templates, rates, noise = (_PATIENT_TEMPLATES, _PATIENT_RATES, _PATIENT_NOISE)
        morph = _PATIENT_MORPHOLOGY
    else:
        raise ValueError(f"unknown demo cohort kind {kind!r}")
    recordings = []
    for i in range(n_recordings):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), i]))
        if morph is None:
            m = Morphology(
                amplitude_scale=round(float(rng.uniform(1.1, 1.5)), 3),
                sharpness=round(float(rng.uniform(1.1, 1.35)), 3),
                baseline_offset=round(float(rng.uniform(0.0, 0.1)), 3),
            )
        else:
            m = morph
        specs = _spans_from_template(templates[i % len(templates)], rates, noise, m, rng)
        recordings.append({
            "id": f"{kind}-{i:02d}",
            "specs": [spec_to_dict(s) for s in specs],
        })
    return {"kind": kind, "rate": 250.0, "seed": int(seed), "recordings": recordings}


def spec_to_dict(spec: RhythmSpec) -> dict:
    return {
        "class": spec.klass.value,
        "rate_bpm": spec.rate_bpm,
        "duration_s": spec.duration_s,
        "noise_level": spec.noise_level,
        "morphology": dataclasses.asdict(spec.morphology),
    }


def spec_from_dict(d: dict) -> RhythmSpec:
    return RhythmSpec(
        klass=RhythmClass(d["class"]),
        rate_bpm=float(d.get("rate_bpm", 0.0)),
        duration_s=float(d["duration_s"]),
        noise_level=float(d.get("noise_level", 0.0)),
        morphology=Morphology(**d.get("morphology", {})),
    )


def generate_cohort(cohort: dict, seed: int | None = None) -> list:
    """Materialize the recordings of a cohort description."""
    seed = cohort.get("seed", 0) if seed is None else seed
    rate = float(cohort.get("rate", 250.0))
    out = []
    for i, entry in enumerate(cohort["recordings"]):
        child = int(np.random.SeedSequence(
            entropy=[int(seed), 1000 + i]).generate_state(1, dtype=np.uint64)[0])
        specs = [spec_from_dict(d) for d in entry["specs"]]
        out.append(rhythm.generate_recording(specs, seed=child, rate=rate,
                                             rec_id=entry["id"]))
    return out


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


def to_analysis_rate(recordings) -> list:
    return [rhythm.downsample_recording(r) for r in recordings]


def labeled_segments(recordings, domain: Domain) -> list:
    """All labeled 2 s segments of one channel across 125 Hz recordings."""
    segs = []
    for rec in recordings:
        segs.extend(s for s in rhythm.segment_recording(rec, domain)
                    if s.label is not None)
    return segs


def patient_split(recordings) -> SplitResult:
    events = []
    for rec in recordings:
        events.extend(rhythm.collect_event_segments(rec))
    return rhythm.split_personalization(events)


def group_segments(groups, domain: Domain) -> list:
    """Flatten event thirds into one segment list for a channel."""
    segs = []
    for ev in groups:
        segs.extend(ev.ecg if domain is Domain.ECG else ev.iegm)
    return segs


# ---------------------------------------------------------------------------
# Training stages
# ---------------------------------------------------------------------------


def train_base_model(db_recordings, cfgs: StageConfigs, seed: int) -> Model:
    """Generalized surface-lead detector trained on the database cohort."""
    segs = labeled_segments(db_recordings, Domain.ECG)
    model = detect.init_detector(seed + _SEED_INIT)
    return tinynn.train_supervised(model, segs, cfgs.base_train).model


def finetune_ecg(base: Model, ecg_segments, cfg: TrainConfig) -> Model:
    return tinynn.train_supervised(base, ecg_segments, cfg).model


def candidate_accuracies(pool, segments) -> np.ndarray:
    """Accuracy of every pool candidate on a labeled segment set."""
    x, y = tinynn.dataset_to_arrays(segments)
    accs = np.empty(len(pool))
    for i in range(len(pool)):
        _, _, klass = detect.predict_batch(pool[i], x)
        accs[i] = float(np.mean(klass == y))
    return accs


def choose_implant_candidate(pool, segments):
    """Index of the highest-accuracy candidate (ties to the lowest index)."""
    accs = candidate_accuracies(pool, segments)
    return int(np.argmax(accs)), accs


@dataclass
class PersonalizationArtifacts:
    base: Model
    ecg: Model
    pool: CandidatePool | None
    pnet: PolicyNet | None
    implant_index: int | None

    def node_models(self, use_policy=True) -> NodeModels:
        implant = self.base if self.implant_index is None else self.pool[self.implant_index]
        return NodeModels(
            ecg=self.ecg,
            implant=implant,
            pool=self.pool if use_policy else None,
            pnet=self.pnet if use_policy else None,
        )


def personalize(base: Model, split: SplitResult, n_groups: int,
                cfgs: StageConfigs, seed: int) -> PersonalizationArtifacts:
    """Run the personalization ladder at depth 0, 1, or 2 labeled groups."""
    if n_groups == 0:
        return PersonalizationArtifacts(base=base, ecg=base, pool=None,
                                        pnet=None, implant_index=None)
    groups = split.g1 if n_groups == 1 else tuple(split.g1) + tuple(split.g2)
    ecg_segs = group_segments(groups, Domain.ECG)
    iegm_segs = group_segments(groups, Domain.IEGM)

    ecg_model = finetune_ecg(base, ecg_segs, cfgs.finetune)
    pool = adapt.build_pool(ecg_model, ecg_segs, iegm_segs, cfgs.adapt)

    pnet0 = policy_mod.init_policy(seed + _SEED_POLICY_INIT)
    pnet = policy_mod.train_policy(pnet0, pool, iegm_segs, cfgs.policy).pnet
    implant_index, _ = choose_implant_candidate(pool, iegm_segs)
    return PersonalizationArtifacts(base=base, ecg=ecg_model, pool=pool,
                                    pnet=pnet, implant_index=implant_index)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def classic_decisions(recordings, event_groups) -> list:
    """Rate-zone decisions over event spans, using each recording's beats."""
    by_id = {rec.id: rec for rec in recordings}
    decisions = []
    for ev in event_groups:
        rec = by_id[ev.recording_id]
        beats = [b for b in rec.beats if ev.start_s <= b < ev.end_s]
        decisions.append(baseline.classic_detect(beats, ev.start_s, ev.end_s,
                                                 truth=ev.label))
    return decisions


@dataclass
class ModeEvaluation:
    mode: str
    report: evalkit.MetricsReport
    decisions: tuple
    trace: coopsim.SimTrace | None


def evaluate_mode(mode: str, artifacts, recordings, event_groups,
                  t: float = DEFAULT_THRESHOLD,
                  costs: CostModel | None = None) -> ModeEvaluation:
    """Score one mode on held-out event groups."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "classic":
        decisions = tuple(classic_decisions(recordings, event_groups))
        trace = None
    else:
        models = artifacts.node_models(use_policy=mode.startswith("cnn-")
                                       and artifacts.pool is not None)
        trace = coopsim.evaluate_event_groups(event_groups, models, t, costs)
        decisions = trace.decisions
    report = evalkit.metrics(evalkit.event_confusion(decisions))
    return ModeEvaluation(mode=mode, report=report, decisions=decisions, trace=trace)


def run_mode_comparison(db_recordings, patient_recordings, seed: int,
                        cfgs: StageConfigs | None = None,
                        t: float = DEFAULT_THRESHOLD,
                        costs: CostModel | None = None) -> dict:
    """Train every mode's artifacts once and score them all on G3."""
    cfgs = cfgs or demo_stage_configs(seed)
    db = to_analysis_rate(db_recordings)
    patient = to_analysis_rate(patient_recordings)
    base = train_base_model(db, cfgs, seed)
    split = patient_split(patient)
    g3 = split.g3

    art = {
        "cnn-0g": personalize(base, split, 0, cfgs, seed),
        "cnn-1g": personalize(base, split, 1, cfgs, seed),
        "cnn-2g": personalize(base, split, 2, cfgs, seed),
    }
    results = {}
    for mode in MODES:
        if mode == "classic":
            results[mode] = evaluate_mode(mode, None, patient, g3, t, costs)
        elif mode == "no-policy":
            models_art = dataclasses.replace(art["cnn-2g"])
            results[mode] = ModeEvaluation(
                mode=mode,
                **_eval_fields(models_art, g3, t, costs, use_policy=False),
            )
        else:
            results[mode] = evaluate_mode(mode, art[mode], patient, g3, t, costs)
    return results


def _eval_fields(artifacts: PersonalizationArtifacts, event_groups, t, costs,
                 use_policy: bool) -> dict:
    models = artifacts.node_models(use_policy=use_policy)
    trace = coopsim.evaluate_event_groups(event_groups, models, t, costs)
    report = evalkit.metrics(evalkit.event_confusion(trace.decisions))
    return {"report": report, "decisions": trace.decisions, "trace": trace}
