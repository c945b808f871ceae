"""Command-line driver for the detection pipeline.

Subcommands mirror the experiment stages: generate a synthetic cohort, train
the generalized model, personalize it for one patient (fine-tune plus the
32-candidate pool), train the selection policy, then simulate or sweep the
cooperative protocol and render reports. Every artifact-producing run writes
its resolved configuration next to its outputs and is byte-reproducible from
the same seed.
"""

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import adapt, coopsim, detect, evalkit, pipeline, policy as policy_mod, rhythm, tinynn
from .adapt import AdaptConfig, MmdConfig
from .coopsim import CostModel, NodeModels
from .policy import PolicyTrainConfig
from .rhythm import Domain
from .tinynn import TrainConfig

_MODE_NEEDS = {
    "cnn-0g": ("base",),
    "cnn-1g": ("ecg", "implant", "pool", "pnet"),
    "cnn-2g": ("ecg", "implant", "pool", "pnet"),
    "no-policy": ("ecg", "implant"),
    "classic": (),
}


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _train_config(section: dict | None, seed: int, **defaults) -> TrainConfig:
    merged = dict(defaults)
    merged.update(section or {})
    merged["seed"] = seed
    return TrainConfig(**merged)


def _config_sections(args) -> dict:
    return _load_json(args.config) if getattr(args, "config", None) else {}


def _costs_from(args, cfg: dict) -> CostModel:
    if getattr(args, "costs", None):
        return CostModel.from_json(args.costs)
    if "costs" in cfg:
        return CostModel(**cfg["costs"])
    return CostModel()


def _write_run_config(outdir: Path, command: str, args, resolved: dict):
    payload = {
        "command": command,
        "seed": args.seed,
        "arguments": {
            k: (str(v) if isinstance(v, Path) else v)
            for k, v in sorted(vars(args).items())
            if k != "func" and v is not None
        },
        "resolved": resolved,
    }
    with open(outdir / "run_config.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cohort_dir(path) -> list:
    files = sorted(Path(path).glob("*.csv"))
    if not files:
        raise rhythm.ValidationError(f"no recording CSVs found in {path}")
    return [rhythm.load_recording_csv(p) for p in files]


def _parse_ts(text: str) -> list:
    try:
        lo, step, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise ValueError(f"--ts expects lo:step:hi, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise ValueError(f"bad threshold grid {text!r}")
    count = int(round((hi - lo) / step)) + 1
    return [round(lo + i * step, 10) for i in range(count)]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _outdir(args)
    if args.spec:
        cohort = _load_json(args.spec)
    else:
        cohort = pipeline.make_demo_cohort(args.demo, args.n, args.seed)
    if args.rate:
        cohort["rate"] = args.rate
    recordings = pipeline.generate_cohort(cohort, seed=args.seed)
    with open(out / "cohort.json", "w") as f:
        json.dump(cohort, f, indent=2, sort_keys=True)
        f.write("\n")
    for rec in recordings:
        rhythm.write_recording_csv(rec, out / f"{rec.id}.csv")
    _write_run_config(out, "gen-data", args,
                      {"recordings": len(recordings), "rate": cohort.get("rate")})
    print(f"wrote {len(recordings)} recordings to {out}")
    return 0


def cmd_train_base(args) -> int:
    out = _outdir(args)
    cfg = _config_sections(args)
    train_cfg = _train_config(cfg.get("train"), args.seed + 1, learning_rate=0.02,
                              batch_size=64, momentum=0.9, epochs=40)
    recordings = pipeline.to_analysis_rate(_load_cohort_dir(args.data))
    segments = pipeline.labeled_segments(recordings, Domain.ECG)
    model = detect.init_detector(args.seed)
    result = tinynn.train_supervised(model, segments, train_cfg)
    tinynn.save_model(result.model, out / "model.pva1")
    with open(out / "losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss"])
        for i, loss in enumerate(result.epoch_losses):
            writer.writerow([i, f"{loss:.6f}"])
    _write_run_config(out, "train-base", args,
                      {"train": dataclasses.asdict(train_cfg),
                       "segments": len(segments)})
    print(f"trained on {len(segments)} segments; final loss "
          f"{result.epoch_losses[-1]:.4f}; model at {out / 'model.pva1'}")
    return 0


def _resolve_groups(split, n_groups: int):
    if n_groups == 1:
        return split.g1
    return tuple(split.g1) + tuple(split.g2)


def cmd_personalize(args) -> int:
    out = _outdir(args)
    cfg = _config_sections(args)
    finetune_cfg = _train_config(cfg.get("train"), args.seed + 2, learning_rate=0.01,
                                 batch_size=32, momentum=0.9, epochs=30)
    adapt_section = cfg.get("adapt", {})
    adapt_cfg = AdaptConfig(
        lambda_mmd=adapt_section.get("lambda_mmd", 1.0),
        train=_train_config(adapt_section.get("train"), args.seed + 3,
                            learning_rate=0.01, batch_size=32, momentum=0.9, epochs=8),
        mmd=MmdConfig(**adapt_section.get("mmd", {})),
    )
    base = tinynn.load_model(args.base)
    recordings = pipeline.to_analysis_rate(_load_cohort_dir(args.data))
    split = pipeline.patient_split(recordings)
    groups = _resolve_groups(split, args.groups)
    ecg_segs = pipeline.group_segments(groups, Domain.ECG)
    iegm_segs = pipeline.group_segments(groups, Domain.IEGM)

    ecg_model = pipeline.finetune_ecg(base, ecg_segs, finetune_cfg)
    pool = adapt.build_pool(ecg_model, ecg_segs, iegm_segs, adapt_cfg)
    tinynn.save_model(ecg_model, out / "ecg.pva1")
    manifest = [adapt.evaluate_candidate(pool[i], ecg_segs, iegm_segs, adapt_cfg)
                for i in range(len(pool))]
    adapt.save_pool(pool, out / "pool", manifest_rows=manifest)
    _write_run_config(out, "personalize", args, {
        "train": dataclasses.asdict(finetune_cfg),
        "adapt": dataclasses.asdict(adapt_cfg),
        "groups": args.groups,
        "ecg_segments": len(ecg_segs),
        "iegm_segments": len(iegm_segs),
        "skipped_events": list(split.skipped),
    })
    print(f"personalized model and 32-candidate pool written to {out}")
    return 0


def cmd_train_policy(args) -> int:
    out = _outdir(args)
    cfg = _config_sections(args)
    policy_section = cfg.get("policy", {})
    policy_cfg = PolicyTrainConfig(
        beta=policy_section.get("beta", 1.0),
        train=_train_config(policy_section.get("train"), args.seed + 5,
                            learning_rate=0.05, batch_size=8, momentum=0.9, epochs=6),
    )
    pool = adapt.load_pool(args.pool)
    recordings = pipeline.to_analysis_rate(_load_cohort_dir(args.data))
    split = pipeline.patient_split(recordings)
    iegm_segs = pipeline.group_segments(_resolve_groups(split, args.groups), Domain.IEGM)

    pnet = policy_mod.init_policy(args.seed + 4)
    result = policy_mod.train_policy(pnet, pool, iegm_segs, policy_cfg)
    policy_mod.save_policy(result.pnet, out / "pnet.pva1")
    best, accs = pipeline.choose_implant_candidate(pool, iegm_segs)
    with open(out / "selection.json", "w") as f:
        json.dump({
            "best_candidate": best,
            "candidate_accuracy": [round(float(a), 6) for a in accs],
            "epoch_mean_reward": [round(r, 6) for r in result.epoch_rewards],
        }, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_run_config(out, "train-policy", args, {
        "policy": dataclasses.asdict(policy_cfg),
        "segments": len(iegm_segs),
        "best_candidate": best,
    })
    print(f"policy written to {out / 'pnet.pva1'}; best candidate {best} "
          f"(accuracy {accs[best]:.3f})")
    return 0


def _node_models_for(args) -> NodeModels:
    needed = _MODE_NEEDS[args.mode]
    missing = [f"--{n}" for n in needed if getattr(args, n, None) is None]
    if missing:
        raise ValueError(f"mode {args.mode} requires {', '.join(missing)}")
    if args.mode == "cnn-0g":
        base = tinynn.load_model(args.base)
        return NodeModels(ecg=base, implant=base)
    ecg = tinynn.load_model(args.ecg)
    implant = tinynn.load_model(args.implant)
    if args.mode == "no-policy":
        return NodeModels(ecg=ecg, implant=implant)
    return NodeModels(ecg=ecg, implant=implant,
                      pool=adapt.load_pool(args.pool),
                      pnet=policy_mod.load_policy(args.pnet))


def _write_decisions_csv(decisions, keys, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["event", "truth", "shocked", "shock_segment_index",
                         "insufficient"])
        for key, d in zip(keys, decisions):
            writer.writerow([
                key, d.truth.value, int(d.shocked),
                "" if d.shock_segment_index is None else d.shock_segment_index,
                int(d.insufficient),
            ])


def _write_trace_csv(trace, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "t_start", "event", "cs_in", "uploaded",
                         "resolved_by", "klass", "latency_ms", "energy_mj"])
        for i, o in enumerate(trace.outcomes):
            writer.writerow([
                i, f"{o.t_start:.1f}",
                "" if o.event_index is None else str(o.event_index),
                f"{o.cs_in:.6f}", int(o.uploaded), o.resolved_by.value,
                o.prediction.klass.value, f"{o.latency_ms:.6f}",
                f"{o.energy_mj:.6f}",
            ])


def _metrics_payload(report, counts):
    payload = {k: (None if v is None else round(v, 6))
               for k, v in report.as_dict().items()}
    payload["counts"] = dataclasses.asdict(counts)
    return payload


def cmd_simulate(args) -> int:
    out = _outdir(args)
    cfg = _config_sections(args)
    costs = _costs_from(args, cfg)
    if not 0.0 <= args.t <= 1.0:
        raise ValueError(f"--t must lie in [0, 1], got {args.t}")
    recordings = pipeline.to_analysis_rate(_load_cohort_dir(args.data))

    if args.eval == "g3":
        groups = pipeline.patient_split(recordings).g3
    else:
        groups = [ev for rec in recordings for ev in rhythm.collect_event_segments(rec)]

    if args.mode == "classic":
        decisions = pipeline.classic_decisions(recordings, groups)
        keys = [f"{g.recording_id}:{g.event_index}" for g in groups]
        counts = evalkit.event_confusion(decisions)
        report = evalkit.metrics(counts)
        _write_decisions_csv(decisions, keys, out / "decisions.csv")
        payload = _metrics_payload(report, counts)
    else:
        models = _node_models_for(args)
        trace = coopsim.evaluate_event_groups(groups, models, args.t, costs)
        counts = evalkit.event_confusion(trace.decisions)
        report = evalkit.metrics(counts)
        _write_trace_csv(trace, out / "trace.csv")
        keys = [f"{g.recording_id}:{g.event_index}" for g in groups]
        _write_decisions_csv(trace.decisions, keys, out / "decisions.csv")
        payload = _metrics_payload(report, counts)
        payload.update({
            "threshold": args.t,
            "upload_frac": round(trace.upload_fraction, 6),
            "mean_latency_ms": round(trace.mean_latency_ms, 6),
            "total_energy_mj": round(trace.total_energy_mj, 6),
        })
    with open(out / "metrics.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_run_config(out, "simulate", args,
                      {"costs": dataclasses.asdict(costs), "events": len(groups)})
    f1 = payload.get("f1")
    print(f"mode {args.mode}: events={len(groups)} f1={f1}")
    return 0


def cmd_sweep(args) -> int:
    out = _outdir(args)
    cfg = _config_sections(args)
    costs = _costs_from(args, cfg)
    ts = _parse_ts(args.ts)
    models = _node_models_for(args)
    recordings = pipeline.to_analysis_rate(_load_cohort_dir(args.data))
    rows, plateau = coopsim.sweep_threshold(recordings, models, ts, costs,
                                            max_workers=args.jobs)
    evalkit.write_sweep_csv(rows, out / "sweep.csv")
    with open(out / "summary.json", "w") as f:
        json.dump({"plateau_t": plateau, "thresholds": ts}, f, indent=2,
                  sort_keys=True)
        f.write("\n")
    _write_run_config(out, "sweep", args,
                      {"costs": dataclasses.asdict(costs), "thresholds": ts})
    print(f"{len(rows)}-row sweep written to {out / 'sweep.csv'}; "
          f"accuracy plateau from T={plateau}")
    return 0


def cmd_report(args) -> int:
    out = _outdir(args)
    rows = evalkit.read_sweep_csv(args.sweep)
    charts = {
        "accuracy": ("acc", "se", "sp", "f1"),
        "upload": ("upload_frac",),
        "latency": ("mean_latency_ms",),
        "energy": ("total_energy_mj",),
    }
    if args.series:
        charts["custom"] = tuple(args.series.split(","))
    for name, series in charts.items():
        evalkit.write_sweep_svg(rows, out / f"sweep_{name}.svg", series=series,
                                y_label=name)
    figures = evalkit.render_figures(rows, out)
    _write_run_config(out, "report", args, {"charts": sorted(charts)})
    print(f"wrote {len(charts)} SVG charts and {len(figures)} PNG figures to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pva",
        description="Two-node arrhythmia detection: synthetic cohorts, "
                    "personalization, cooperative-inference simulation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="run seed (u64)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("gen-data", help="generate a synthetic cohort")
    common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="cohort description JSON")
    src.add_argument("--demo", choices=("database", "patient"),
                     help="built-in demo cohort")
    p.add_argument("--n", type=int, default=10, help="demo cohort size")
    p.add_argument("--rate", type=float, help="sampling rate override (Hz)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-base", help="train the generalized surface model")
    common(p)
    p.add_argument("--data", required=True, help="directory of recording CSVs")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("personalize",
                       help="fine-tune the surface model and build the candidate pool")
    common(p)
    p.add_argument("--data", required=True, help="patient recording directory")
    p.add_argument("--base", required=True, help="generalized model file")
    p.add_argument("--groups", type=int, choices=(1, 2), default=2,
                   help="labeled groups to use")
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("train-policy", help="train the candidate-selection policy")
    common(p)
    p.add_argument("--data", required=True, help="patient recording directory")
    p.add_argument("--pool", required=True, help="candidate pool directory")
    p.add_argument("--groups", type=int, choices=(1, 2), default=2)
    p.set_defaults(func=cmd_train_policy)

    def sim_common(p):
        common(p)
        p.add_argument("--data", required=True, help="recording directory")
        p.add_argument("--mode", choices=pipeline.MODES, default="cnn-2g")
        p.add_argument("--base", help="generalized model (cnn-0g)")
        p.add_argument("--ecg", help="wearable surface model")
        p.add_argument("--implant", help="implantable model")
        p.add_argument("--pool", help="candidate pool directory")
        p.add_argument("--pnet", help="policy model file")
        p.add_argument("--costs", help="cost model JSON")

    p = sub.add_parser("simulate", help="run the protocol at one threshold")
    sim_common(p)
    p.add_argument("--t", type=float, default=0.5, help="confidence threshold")
    p.add_argument("--eval", choices=("recordings", "g3"), default="recordings",
                   help="score whole-recording events or held-out thirds")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="sweep the confidence threshold grid")
    sim_common(p)
    p.add_argument("--ts", default="0:0.1:1", help="threshold grid lo:step:hi")
    p.add_argument("--jobs", type=int, default=4,
                   help="concurrent threshold evaluations")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render sweep charts and figures")
    common(p)
    p.add_argument("--sweep", required=True, help="sweep.csv to render")
    p.add_argument("--series", help="comma-separated extra chart series")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
