"""Experiment plans: preprocessing, training, evaluation, ablation sweeps and benchmarks.

On-disk layout under an output directory::

    <out>/<subject>/<trial>.rpct          synthetic trials (``synth``)
    <out>/<subject>/<trial>.rpcp          processed trials (``preprocess``)
    <out>/checkpoints/<subject>/<tag>_seed<k>.rpcc
    <out>/curves/<subject>/<tag>_seed<k>.csv
    <out>/scores_<tag>_seed<k>.csv/.json  per-subject tables
    <out>/manifest_<command>.json

Every manifest records the config hash and code version next to the hash of
each artifact it lists.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import PROCESSED_SUFFIX, TRIAL_SUFFIX, load_processed, load_trial, save_processed, save_trial
from .errors import ConfigError, InputError, RpcNetError, UndefinedStatisticError
from .inference import infer_recursive, smooth_and_project
from .kinematics import KinematicModel, forward_kinematics_array
from .metrics import (TrialScores, measure_inference_time, score_trial, tertiles_and_median, umd_series,
                      wfd_series, write_table)
from .network import RpcNet, TrainingConfig, train, write_loss_curve
from .signals import (DEFAULT_PIPELINE, ProcessedAngles, ProcessedEmg, denormalize_angles, emg_postprocess,
                      make_training_windows, position_postprocess)
from .stats import linreg_slope_test, paired_t_one_sided, sign_test_one_sided, wilcoxon_signed_rank_one_sided
from .synthetic import generate_synthetic_trial, subject_specs
from .variants import ELECTRODE_CODES, INPUT_LENGTHS_S, WIDTH_CODES, VariantSpec, make_variant

log = logging.getLogger(__name__)

SWEEPS = ("state", "length", "width", "electrodes", "monolithic")


# -- configuration ---------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, artifacts: list[Path], extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    entries = [{"path": str(Path(p).relative_to(out_dir)) if Path(p).is_relative_to(out_dir) else str(p),
                "sha256": file_hash(p)} for p in artifacts]
    doc = {"command": command, "config_hash": config_hash(config), "code_version": __version__,
           "config": config, "artifacts": entries}
    if extra:
        doc.update(extra)
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def training_config(overrides: dict | None, seed: int) -> TrainingConfig:
    """Quoted defaults unless a key is set explicitly; ``seed`` always comes from the plan."""
    overrides = dict(overrides or {})
    known = {f.name for f in fields(TrainingConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown training options: {sorted(unknown)}")
    overrides["seed"] = seed
    return TrainingConfig(**overrides)


@dataclass
class ExperimentPlan:
    data_dir: Path
    out_dir: Path
    subjects: list[str] | None = None  # None: every subject directory under data_dir
    test_trials: dict[str, str] = field(default_factory=dict)  # explicit test trial per subject
    variants: list[str] = field(default_factory=lambda: ["full"])
    seeds: list[int] = field(default_factory=lambda: [0])
    split_seed: int = 0
    training: dict = field(default_factory=dict)  # TrainingConfig overrides

    @classmethod
    def from_config(cls, config: dict, data_dir, out_dir, seed: int | None = None) -> "ExperimentPlan":
        known = {f.name for f in fields(cls)} - {"data_dir", "out_dir"}
        unknown = set(config) - known - {"synthetic"}
        if unknown:
            raise ConfigError(f"unknown plan options: {sorted(unknown)}")
        kw = {k: v for k, v in config.items() if k in known}
        plan = cls(Path(data_dir), Path(out_dir), **kw)
        if seed is not None:
            plan.seeds = [seed]
            plan.split_seed = seed
        for v in plan.variants:
            VariantSpec.parse(v)  # fail early on bad codes
        training_config(plan.training, 0)
        return plan

    def as_config(self) -> dict:
        d = asdict(self)
        d["data_dir"] = str(self.data_dir)
        d.pop("out_dir")
        return d


# -- synthetic data and preprocessing ---------------------------------------------

def synthesize(out_dir: Path, model: KinematicModel, n_subjects: int, n_trials: int, duration_s: float,
               first_subject: int = 0, **spec_kw) -> list[Path]:
    paths = []
    for s in range(first_subject, first_subject + n_subjects):
        sid = f"S{s}"
        d = Path(out_dir) / sid
        d.mkdir(parents=True, exist_ok=True)
        for i, spec in enumerate(subject_specs(s, n_trials, duration_s, **spec_kw)):
            rec = generate_synthetic_trial(spec, model, sid, f"T{i}")
            p = d / f"T{i}{TRIAL_SUFFIX}"
            save_trial(p, rec)
            paths.append(p)
    return paths


def _trial_files(inputs: list[Path]) -> list[Path]:
    files = []
    for p in map(Path, inputs):
        if p.is_dir():
            files.extend(sorted(p.rglob(f"*{TRIAL_SUFFIX}")))
        elif p.exists():
            files.append(p)
        else:
            raise InputError(f"trial file not found: {p}")
    if not files:
        raise InputError(f"no {TRIAL_SUFFIX} trial files under {', '.join(map(str, inputs))}")
    return files


def preprocess_trial(trial, model: KinematicModel) -> tuple[ProcessedEmg, ProcessedAngles]:
    emg = emg_postprocess(trial.emg)
    ang = position_postprocess(trial.markers, model, len(emg.envelope), validity=trial.validity,
                               keep_markers=True)
    return emg, ang


def preprocess(inputs: list[Path], out_dir: Path, model: KinematicModel, config: dict | None = None) -> Path:
    """Process every trial under ``inputs`` into ``<out>/<subject>/<trial>.rpcp`` and write a manifest."""
    out_dir = Path(out_dir)
    entries, outputs = [], []
    for f in _trial_files(inputs):
        try:
            trial = load_trial(f)
            emg, ang = preprocess_trial(trial, model)
        except RpcNetError as exc:
            raise type(exc)(f"{f}: {exc}") from exc
        dest = out_dir / trial.subject_id / f"{trial.trial_id}{PROCESSED_SUFFIX}"
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_processed(dest, emg, ang, {"subject_id": trial.subject_id, "trial_id": trial.trial_id,
                                        "role": trial.role})
        outputs.append(dest)
        entries.append({
            "subject_id": trial.subject_id, "trial_id": trial.trial_id, "source": str(f),
            "emg_samples": int(trial.emg.samples.shape[0]), "duration_s": trial.duration,
            "length": int(len(emg.envelope)), "angle_length": int(len(ang.trajectories)),
            "aligned": len(emg.envelope) == len(ang.trajectories),
            "flagged_frames": int(ang.flagged_frames), "ik_error_mm": float(ang.ik_error_mm),
            "envelope_above_one": int(emg.n_above_one),
        })
    return write_manifest(out_dir, "preprocess", dict(config or {}), outputs, {"trials": entries})


# -- subjects and splits -----------------------------------------------------------

@dataclass
class ProcessedTrial:
    subject_id: str
    trial_id: str
    role: str
    emg: ProcessedEmg
    angles: ProcessedAngles


def load_subjects(data_dir: Path, subjects: list[str] | None = None) -> dict[str, dict[str, ProcessedTrial]]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise InputError(f"processed data directory not found: {data_dir}")
    out: dict[str, dict[str, ProcessedTrial]] = {}
    for f in sorted(data_dir.rglob(f"*{PROCESSED_SUFFIX}")):
        emg, ang, meta = load_processed(f)
        sid = meta.get("subject_id", f.parent.name)
        if subjects is not None and sid not in subjects:
            continue
        tid = meta.get("trial_id", f.stem)
        out.setdefault(sid, {})[tid] = ProcessedTrial(sid, tid, meta.get("role", "train"), emg, ang)
    missing = set(subjects or []) - set(out)
    if missing:
        raise InputError(f"no processed trials for subjects {sorted(missing)} under {data_dir}")
    if not out:
        raise InputError(f"no {PROCESSED_SUFFIX} files under {data_dir}")
    return out


def choose_test_trial(subject: str, trials: dict[str, ProcessedTrial], explicit: dict[str, str], seed: int) -> str:
    """Explicit choice, else the single trial recorded as ``test``, else a seeded random pick."""
    if subject in explicit:
        if explicit[subject] not in trials:
            raise ConfigError(f"test trial {explicit[subject]!r} not found for subject {subject}")
        return explicit[subject]
    ids = sorted(trials)
    marked = [t for t in ids if trials[t].role == "test"]
    if len(marked) == 1:
        return marked[0]
    if len(ids) < 2:
        raise InputError(f"subject {subject} needs at least 2 trials for a train/test split")
    # subject name enters the draw so subjects do not share an index pattern
    rng = np.random.default_rng([seed, int(hashlib.sha256(subject.encode()).hexdigest()[:8], 16)])
    return ids[int(rng.integers(len(ids)))]


def split_subjects(plan: ExperimentPlan, data=None):
    data = data if data is not None else load_subjects(plan.data_dir, plan.subjects)
    splits = {}
    for sid in sorted(data):
        test = choose_test_trial(sid, data[sid], plan.test_trials, plan.split_seed)
        train_ids = [t for t in sorted(data[sid]) if t != test]
        splits[sid] = ([data[sid][t] for t in train_ids], data[sid][test])
    return splits


# -- train / evaluate --------------------------------------------------------------

def train_variant(variant: str | VariantSpec, train_trials: list[ProcessedTrial], cfg: TrainingConfig):
    net = make_variant(variant, seed=cfg.seed)
    windows = [make_training_windows(t.emg, t.angles, net.layout, net.channels) for t in train_trials]
    return net, train(net, windows, cfg)


def actual_streams(test: ProcessedTrial, model: KinematicModel, start: int = DEFAULT_PIPELINE.history):
    """Ground-truth angles (deg) and markers for the evaluated span (the first ``start`` samples excluded)."""
    deg = denormalize_angles(test.angles.trajectories[start:], model.rest_angles)
    if test.angles.markers is not None:
        markers = test.angles.markers[start:]
    else:
        markers = forward_kinematics_array(model, deg)
    return deg, markers


def evaluate_net(net: RpcNet, test: ProcessedTrial, model: KinematicModel, seed_history=None) -> TrialScores:
    raw = infer_recursive(net, test.emg, seed_history)
    est = smooth_and_project(raw, model)
    deg, markers = actual_streams(test, model, net.layout.start)
    return score_trial(deg, est.angles_deg, markers, est.markers)


def evaluate_oracle(test: ProcessedTrial, model: KinematicModel) -> TrialScores:
    """Score the ground truth against itself (sanity check of the scoring path)."""
    deg, markers = actual_streams(test, model)
    return score_trial(deg, deg, markers, markers)


def rest_baseline(test: ProcessedTrial, model: KinematicModel) -> TrialScores:
    """Scores of a constant rest-pose estimate; PCC is undefined for it, so only distances are meaningful."""
    deg, markers = actual_streams(test, model)
    rest_mk = np.broadcast_to(forward_kinematics_array(model, model.rest_angles[None])[0], markers.shape)
    w, nw = wfd_series(markers, rest_mk)
    u, _ = umd_series(markers, rest_mk)
    nan = np.full(deg.shape[1], np.nan)
    return TrialScores(nan, float("nan"), w, float(np.nanmean(w)), u, float(np.nanmean(u)),
                       tertiles_and_median(w), (np.nan,) * 3, tertiles_and_median(u), nw)


def _path_tag(tag: str) -> str:
    return tag.replace("+", "_").replace("=", "").replace("/", "_")


def run_train(plan: ExperimentPlan, model: KinematicModel, evaluate: bool = True, data=None) -> dict:
    """Train every (variant, seed) per subject; write checkpoints, loss curves and score tables.

    Returns ``{(tag, seed): [(subject, TrialScores), ...]}`` (empty lists when
    ``evaluate`` is False).
    """
    out = Path(plan.out_dir)
    splits = split_subjects(plan, data)
    artifacts, results, split_record = [], {}, {}
    for sid, (train_trials, test) in splits.items():
        split_record[sid] = {"train": [t.trial_id for t in train_trials], "test": test.trial_id}
    for variant in plan.variants:
        tag = VariantSpec.parse(variant).tag
        for seed in plan.seeds:
            cfg = training_config(plan.training, seed)
            rows = []
            for sid, (train_trials, test) in splits.items():
                log.info("training %s seed %d on %s", tag, seed, sid)
                net, res = train_variant(variant, train_trials, cfg)
                ck = out / "checkpoints" / sid / f"{_path_tag(tag)}_seed{seed}.rpcc"
                cv = out / "curves" / sid / f"{_path_tag(tag)}_seed{seed}.csv"
                ck.parent.mkdir(parents=True, exist_ok=True)
                cv.parent.mkdir(parents=True, exist_ok=True)
                net.save(ck, {"subject_id": sid, "seed": seed, "training": asdict(cfg),
                              "train_trials": split_record[sid]["train"]})
                write_loss_curve(cv, res)
                artifacts += [ck, cv]
                if evaluate:
                    rows.append((sid, evaluate_net(net, test, model)))
            if evaluate:
                base = out / f"scores_{_path_tag(tag)}_seed{seed}"
                write_table(rows, base.with_suffix(".csv"), base.with_suffix(".json"))
                artifacts += [base.with_suffix(".csv"), base.with_suffix(".json")]
            results[(tag, seed)] = rows
    write_manifest(out, "train", plan.as_config(), artifacts, {"splits": split_record})
    return results


def run_evaluate(plan: ExperimentPlan, model: KinematicModel, checkpoint_dir: Path | None = None,
                 oracle: bool = False, data=None) -> dict:
    """Score saved checkpoints (or the ground truth itself with ``oracle``) on each subject's test trial."""
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_dir = Path(checkpoint_dir) if checkpoint_dir else out / "checkpoints"
    splits = split_subjects(plan, data)
    artifacts, results = [], {}
    jobs = [("oracle", None)] if oracle else [(VariantSpec.parse(v).tag, s) for v in plan.variants for s in plan.seeds]
    for tag, seed in jobs:
        rows = []
        for sid, (_, test) in splits.items():
            if oracle:
                rows.append((sid, evaluate_oracle(test, model)))
                continue
            ck = ck_dir / sid / f"{_path_tag(tag)}_seed{seed}.rpcc"
            if not ck.exists():
                raise InputError(f"checkpoint not found: {ck}")
            rows.append((sid, evaluate_net(RpcNet.load(ck), test, model)))
        name = "oracle" if oracle else f"{_path_tag(tag)}_seed{seed}"
        base = out / f"scores_{name}"
        write_table(rows, base.with_suffix(".csv"), base.with_suffix(".json"))
        artifacts += [base.with_suffix(".csv"), base.with_suffix(".json")]
        results[(tag, seed)] = rows
    write_manifest(out, "evaluate", plan.as_config(), artifacts)
    return results


# -- ablation sweeps ---------------------------------------------------------------

@dataclass(frozen=True)
class Condition:
    label: str  # condition name in the tidy table
    variant: str
    x: float | None = None  # numeric abscissa (input length in s) when the sweep has one


def sweep_conditions(sweep: str) -> list[Condition]:
    if sweep == "state":
        return [Condition("full", "full"), Condition("B", "B")] + [
            Condition(f"full angle={L}", f"full+angle={L}", L) for L in INPUT_LENGTHS_S[1:]]
    if sweep == "length":
        return [Condition(f"{b} emg={L}", f"{b}+emg={L}+angle={L}" if b == "full" else f"B+emg={L}", L)
                for b in ("full", "B") for L in INPUT_LENGTHS_S]
    if sweep == "width":
        codes = ["original"] + list(WIDTH_CODES)
        return [Condition(f"{b} {c}", b if c == "original" else f"{b}+{c}") for b in ("full", "B") for c in codes]
    if sweep == "electrodes":
        return [Condition("original", "full")] + [Condition(c, f"full+{c}") for c in ELECTRODE_CODES]
    if sweep == "monolithic":
        return [Condition(v, v) for v in ("full", "I", "W", "B", "I-B", "W-B")]
    raise ConfigError(f"unknown sweep {sweep!r}; choose from {SWEEPS}")


def _caption(label: str, fn, x, y, alternative: str) -> str:
    try:
        return f"{label}: {fn(x, y, alternative).caption()}"
    except (UndefinedStatisticError, InputError) as exc:
        return f"{label}: undefined ({exc})"


def _regression_caption(label: str, x, y) -> str:
    try:
        return f"{label}: {linreg_slope_test(x, y).caption()}"
    except (UndefinedStatisticError, InputError) as exc:
        return f"{label}: undefined ({exc})"


def ablation_statistics(sweep: str, table: list[dict]) -> list[str]:
    """Caption-style statistic lines for one sweep's tidy table.

    Distances test "lower is better" and correlations "higher is better";
    pairs are matched by subject (and condition where both variants share it).
    """
    by = {(r["subject"], r["condition"]): r for r in table}
    subjects = sorted({r["subject"] for r in table})

    def col(cond, key):
        return np.array([by[(s, cond)][key] for s in subjects])

    lines = []
    if sweep == "state":
        for key, alt in (("MD", "less"), ("MPCC", "greater")):
            lines.append(_caption(f"{key} full vs B (paired t)", paired_t_one_sided, col("full", key), col("B", key), alt))
            lines.append(_caption(f"{key} full vs B (Wilcoxon)", wilcoxon_signed_rank_one_sided,
                                  col("full", key), col("B", key), alt))
        rows = [r for r in table if r["condition"] == "full" or r["condition"].startswith("full angle=")]
        for key in ("MD", "MPCC"):
            xs = [r["x"] if r["x"] is not None else INPUT_LENGTHS_S[0] for r in rows]
            lines.append(_regression_caption(f"{key} vs angle input length", xs, [r[key] for r in rows]))
    elif sweep == "length":
        for base in ("full", "B"):
            rows = [r for r in table if r["condition"].startswith(f"{base} ")]
            for key in ("MD", "MPCC"):
                lines.append(_regression_caption(f"{key} vs input length ({base})", [r["x"] for r in rows],
                                                 [r[key] for r in rows]))
        _paired_bases(lines, table, "full ", "B ")
    elif sweep == "width":
        _paired_bases(lines, table, "full ", "B ")
    elif sweep == "monolithic":
        for key, alt in (("MD", "less"), ("MPCC", "greater")):
            for a, b in (("full", "I"), ("full", "W"), ("B", "I-B"), ("B", "W-B")):
                lines.append(_caption(f"{key} {a} vs {b} (paired t)", paired_t_one_sided, col(a, key), col(b, key), alt))
            x = np.concatenate([col(v, key) for v in ("full", "I", "W")])
            y = np.concatenate([col(v, key) for v in ("B", "I-B", "W-B")])
            lines.append(_caption(f"{key} with vs without angle branch (sign test)", sign_test_one_sided, x, y, alt))
            lines.append(_caption(f"{key} with vs without angle branch (Wilcoxon)", wilcoxon_signed_rank_one_sided,
                                  x, y, alt))
    elif sweep == "electrodes":
        for key, alt in (("MD", "less"), ("MPCC", "greater")):
            for c in ELECTRODE_CODES:
                lines.append(_caption(f"{key} original vs {c} (paired t)", paired_t_one_sided,
                                      col("original", key), col(c, key), alt))
    return lines


def _paired_bases(lines, table, prefix_a, prefix_b):
    """Wilcoxon over all (subject, condition) couples of two base variants."""
    by = {(r["subject"], r["condition"]): r for r in table}
    pairs = [(r, by[(r["subject"], prefix_b + r["condition"][len(prefix_a):])]) for r in table
             if r["condition"].startswith(prefix_a) and (r["subject"], prefix_b + r["condition"][len(prefix_a):]) in by]
    for key, alt in (("MD", "less"), ("MPCC", "greater")):
        x = [a[key] for a, _ in pairs]
        y = [b[key] for _, b in pairs]
        lines.append(_caption(f"{key} {prefix_a.strip()} vs {prefix_b.strip()} (Wilcoxon)",
                              wilcoxon_signed_rank_one_sided, x, y, alt))


def run_ablation(plan: ExperimentPlan, model: KinematicModel, sweep: str, data=None,
                 conditions: list[Condition] | None = None) -> tuple[list[dict], list[str]]:
    """Train and score every condition of a sweep for every subject and seed; write a tidy CSV and stats."""
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    conditions = conditions or sweep_conditions(sweep)
    splits = split_subjects(plan, data)
    table = []
    for seed in plan.seeds:
        cfg = training_config(plan.training, seed)
        for cond in conditions:
            for sid, (train_trials, test) in splits.items():
                log.info("ablation %s: %s seed %d on %s", sweep, cond.label, seed, sid)
                net, _ = train_variant(cond.variant, train_trials, cfg)
                s = evaluate_net(net, test, model)
                table.append({"subject": sid, "seed": seed, "condition": cond.label, "variant": net.tag,
                              "x": cond.x, "MD": s.md, "MPCC": s.mpcc, "UMD": s.umd,
                              "multiplies": net.multiply_count()})
    csv_path = out / f"ablation_{sweep}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        for r in table:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else ("" if v is None else v)) for k, v in r.items()})
    lines = []
    for seed in plan.seeds:
        rows = [r for r in table if r["seed"] == seed]
        lines += [f"seed {seed}: {ln}" for ln in ablation_statistics(sweep, rows)]
    stats_path = out / f"ablation_{sweep}_stats.txt"
    stats_path.write_text("\n".join(lines) + "\n")
    write_manifest(out, f"ablate_{sweep}", plan.as_config(), [csv_path, stats_path])
    return table, lines


# -- benchmark ---------------------------------------------------------------------

def run_bench(checkpoint: Path, out_dir: Path, iterations: int = 100_000, threads: int = 1, seed: int = 0):
    ck = Path(checkpoint)
    if not ck.exists():
        raise InputError(f"checkpoint not found: {ck}")
    net = RpcNet.load(ck)
    rep = measure_inference_time(net, iterations=iterations, seed=seed, threads=threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"bench_{ck.stem}.json"
    doc = rep.to_dict() | {"checkpoint": str(ck), "variant": net.tag, "multiplies": net.multiply_count()}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return rep, path
