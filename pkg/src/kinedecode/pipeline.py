# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Pipeline stages behind the command-line interface.

Every stage reads a validated :class:`~kinedecode.config.RunConfig`, loads the
artifacts of earlier stages from the output directory, writes its own and
returns a one-line summary.
"""

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from kinedecode.config import DELAY_GRID_MS, WINDOW_GRID, RunConfig
from kinedecode.copilot import REAL_STATES
from kinedecode.copilot.critic import Critic, calibration, local_jerk, point_errors
from kinedecode.copilot.filter import (PointInput, filter_trajectories, threshold_sweep,
                                       write_sweep)
from kinedecode.copilot.rules import TransitionRules
from kinedecode.dataset import (EVENT_CHANNELS, PreparedTrial, ingest, load_prepared,
                                prepare_trials, save_prepared)
from kinedecode.kinematics.arm import ArmModel, solve_trajectory, write_joint_csv
from kinedecode.kinematics.metrics import (AXES, DegenerateCorrelationError, Trajectory3D,
                                           map_to_workspace, metrics_table, midpoint)
from kinedecode.model import ConfigError, ModelConfig
from kinedecode.model.decoder import HybridDecoder
from kinedecode.signals import NormalizationParams, SignalKind, WindowSpec, fit_minmax
from kinedecode.store import load_arrays, save_arrays
from kinedecode.synthetic import SyntheticTrialSpec, generate_dataset
from kinedecode.tables import write_table
from kinedecode.train import SplitPlan, WindowSet, make_split, make_windows, train_loop

log = logging.getLogger("kinedecode.pipeline")

PREPROCESSED = "preprocessed.kda"
DECODER = "decoder.kda"
CLASSIFIER = "classifier.kda"
CRITIC = "critic.kda"
DECODED = "decoded.kda"


class StageError(Exception):
    """Raised when a stage runs before the one producing its input."""

    def __init__(self, message: str, artifact=None):
        super().__init__(message)
        self.artifact = artifact


def _require(config: RunConfig, name: str, producer: str) -> Path:
    path = config.output(name)
    if not path.is_file():
        raise StageError("%s not found; run 'kinedecode %s' first" % (path, producer), path)
    return path


def _output_dir(config: RunConfig) -> Path:
    config.output_dir.mkdir(parents=True, exist_ok=True)
    return config.output_dir


def _spec_arrays(spec: WindowSpec) -> Dict[str, np.ndarray]:
    return {"window.spec": np.array([spec.window_samples, spec.step_samples, spec.delay_ms,
                                     spec.rate_hz], dtype=np.float64)}


def _spec_from(arrays) -> WindowSpec:
    w, step, delay, rate = arrays["window.spec"].tolist()
    return WindowSpec(int(w), int(step), int(delay), rate)


def _plan_arrays(plan: SplitPlan) -> Dict[str, np.ndarray]:
    return {"split.%s" % part: np.array(getattr(plan, part), dtype=np.int64)
            for part in ("train", "val", "test")}


def _plan_from(arrays) -> SplitPlan:
    return SplitPlan.from_ids(*(arrays["split.%s" % p].tolist() for p in ("train", "val", "test")))


def _select(trials: Sequence[PreparedTrial], ids: Sequence[int]) -> List[PreparedTrial]:
    wanted = set(ids)
    return [t for t in trials if t.trial_id in wanted]


def plan_split(config: RunConfig, trials: Sequence[PreparedTrial]) -> SplitPlan:
    """Random split, or one with every trial of ``train.test_subjects`` held out."""
    ids = [t.trial_id for t in trials]
    test_ids = None
    if config.test_subjects:
        test_ids = [t.trial_id for t in trials if t.subject in config.test_subjects]
        if not test_ids:
            raise ConfigError("no trials belong to subjects %s" % ", ".join(config.test_subjects),
                              "train.test_subjects")
    return make_split(ids, config.seed, config.n_val, config.n_test, test_ids=test_ids)


def jerk_by_trial(pred: np.ndarray, trial_ids: np.ndarray) -> np.ndarray:
    """:func:`local_jerk` computed separately along each trial's points."""
    jerk = np.zeros(pred.shape[0])
    for trial_id in np.unique(trial_ids):
        rows = np.flatnonzero(trial_ids == trial_id)
        jerk[rows] = local_jerk(pred[rows])
    return jerk


def _posteriors(classifier: Optional[HybridDecoder], data: WindowSet) -> np.ndarray:
    if classifier is None:
        return np.full((len(data), len(REAL_STATES)), 1.0 / len(REAL_STATES))
    return classifier.predict_proba(data.eeg, data.emg)


def _load_classifier(config: RunConfig) -> Optional[HybridDecoder]:
    path = config.output(CLASSIFIER)
    if not path.is_file():
        log.warning("No state classifier in %s; using a uniform posterior", config.output_dir)
        return None
    return HybridDecoder.load(path)[0]


# Stages

def run_generate(config: RunConfig, n_trials: int, seed: Optional[int] = None,
                 n_subjects: int = 1) -> str:
    seed = config.seed if seed is None else seed
    paths = generate_dataset(config.data_dir, n_trials, seed, SyntheticTrialSpec(), n_subjects)
    return "generate: wrote %d synthetic trials to %s (seed %d)" % (len(paths), config.data_dir,
                                                                     seed)


def run_preprocess(config: RunConfig) -> str:
    bundles = ingest(config.data_dir)
    trials = prepare_trials(bundles, config.preprocess, config.workers)
    path = _output_dir(config) / PREPROCESSED
    save_prepared(path, trials)
    samples = sum(t.n_samples for t in trials)
    return "preprocess: %d trials, %d samples at %g Hz -> %s" % (
        len(trials), samples, trials[0].rate_hz, path)


def _fit_decoder(model: ModelConfig, config: RunConfig, train_set: WindowSet,
                 val_set: WindowSet, objective: str, seed: int, history=None):
    decoder = HybridDecoder(model, seed=seed)
    result = train_loop(decoder, train_set, val_set, config.train, objective, history)
    return decoder, result


def run_train(config: RunConfig) -> str:
    trials = load_prepared(_require(config, PREPROCESSED, "preprocess"))
    out = _output_dir(config)
    plan = plan_split(config, trials)
    write_table(out / "split.csv", ["trial", "part", "subject"],
                ([t.trial_id, plan.part_of(t.trial_id), t.subject or ""] for t in trials))
    log.info("Split: %d train, %d validation, %d test trials", *plan.sizes)

    train_trials = _select(trials, plan.train)
    norm = fit_minmax([t.block(SignalKind.KIN) for t in train_trials])
    spec = config.window
    fusion = config.model.is_fusion
    train_set = make_windows(train_trials, spec, norm, fusion)
    val_set = make_windows(_select(trials, plan.val), spec, norm, fusion)
    plan.check_windows(train_set.trial_ids, "train")
    plan.check_windows(val_set.trial_ids, "val")
    if len(train_set) == 0:
        raise StageError("no training windows; trials are shorter than window plus delay")

    extra = dict(norm.as_arrays())
    extra.update(_plan_arrays(plan))
    extra.update(_spec_arrays(spec))
    decoder, result = _fit_decoder(config.model, config, train_set, val_set, "mse", config.seed,
                                   out / "history.csv")
    decoder.save(out / DECODER, extra)

    classifier = None
    if train_set.labels is not None:
        classifier, _ = _fit_decoder(config.model.classifier(), config, train_set, val_set, "ce",
                                     config.seed + 1, out / "classifier_history.csv")
        classifier.save(out / CLASSIFIER, extra)
    else:
        log.warning("Trials carry no state labels; skipping the state classifier")

    pred, latent = decoder.predict(train_set.eeg, train_set.emg)
    posterior = _posteriors(classifier, train_set)
    jerk = jerk_by_trial(pred, train_set.trial_ids)
    critic = Critic(latent.shape[1] + posterior.shape[1] + 1, config.critic.hidden,
                    config.critic.seed)
    critic.fit(Critic.features(latent, posterior, jerk), point_errors(pred, train_set.targets),
               config.critic)
    critic.save(out / CRITIC)

    return "train: %d windows, best validation loss %.4g at epoch %d of %d%s" % (
        len(train_set), result.best_loss, result.best_epoch, len(result.history),
        " (stopped early)" if result.stopped_early else "")


def run_decode(config: RunConfig) -> str:
    trials = load_prepared(_require(config, PREPROCESSED, "preprocess"))
    decoder, extra = HybridDecoder.load(_require(config, DECODER, "train"))
    plan, spec = _plan_from(extra), _spec_from(extra)
    norm = NormalizationParams.from_arrays(extra)
    test_set = make_windows(_select(trials, plan.test), spec, norm, decoder.config.is_fusion)
    plan.check_windows(test_set.trial_ids, "test")
    if len(test_set) == 0:
        raise StageError("no test windows to decode")

    pred, latent = decoder.predict(test_set.eeg, test_set.emg)
    posterior = _posteriors(_load_classifier(config), test_set)
    rate = spec.rate_hz
    arrays = {
        "decoded.trial_ids": test_set.trial_ids,
        "decoded.target_index": test_set.target_index,
        "decoded.pred": pred,
        "decoded.truth": test_set.targets,
        "decoded.latent": latent,
        "decoded.posterior": posterior,
        "decoded.rate": np.array([rate]),
    }
    accuracy = float("nan")
    if test_set.labels is not None:
        arrays["decoded.labels"] = test_set.labels
        accuracy = float(np.mean(np.argmax(posterior, axis=1) == test_set.labels))
    out = _output_dir(config)
    save_arrays(out / DECODED, arrays)

    header = (["trial", "index", "t"] + ["pred_%s" % a for a in AXES]
              + ["true_%s" % a for a in AXES])
    write_table(out / "predictions.csv", header,
                ([int(i), int(k), k / rate] + list(p) + list(y) for i, k, p, y in
                 zip(test_set.trial_ids, test_set.target_index, pred, test_set.targets)))
    write_table(out / "decode_summary.csv", ["quantity", "value"],
                [["windows", len(test_set)], ["trials", len(plan.test)],
                 ["classifier_accuracy", accuracy]])
    return "decode: %d points from %d test trials, state accuracy %.3f" % (
        len(test_set), len(plan.test), accuracy)


def _load_decoded(config: RunConfig) -> Dict[str, np.ndarray]:
    return load_arrays(_require(config, DECODED, "decode"))


def run_evaluate(config: RunConfig) -> str:
    decoded = _load_decoded(config)
    rows = metrics_table(decoded["decoded.pred"], decoded["decoded.truth"])
    write_table(_output_dir(config) / "metrics.csv", ["quantity", "pcc", "rmse"], rows)
    for name, p, r in rows:
        log.info("%-12s PCC %.4f  RMSE %.4f", name, p, r)
    overall = dict((name, (p, r)) for name, p, r in rows)
    axes = " ".join("%s=%.3f" % (name, overall[name][0]) for name in AXES)
    return "evaluate: overall PCC %.4f, RMSE %.4f; midpoint PCC %.4f; %s" % (
        overall["overall"][0], overall["overall"][1], overall["midpoint"][0], axes)


def _load_rules(config: RunConfig) -> TransitionRules:
    if config.rules_path is None:
        return TransitionRules.default()
    return TransitionRules.load(config.rules_path, EVENT_CHANNELS)


def point_inputs(decoded: Dict[str, np.ndarray], confidence: np.ndarray,
                 trials: Sequence[PreparedTrial]) -> List[List[PointInput]]:
    """Per-trial point sequences, sensors read at each point's target sample."""
    events = {t.trial_id: t.events for t in trials}
    trial_ids = decoded["decoded.trial_ids"]
    out = []
    for trial_id in np.unique(trial_ids):
        points = []
        for row in np.flatnonzero(trial_ids == trial_id):
            index = int(decoded["decoded.target_index"][row])
            sensors = {k: float(v[index]) for k, v in events.get(int(trial_id), {}).items()
                       if index < len(v)}
            points.append(PointInput(index, decoded["decoded.pred"][row],
                                     decoded["decoded.posterior"][row], float(confidence[row]),
                                     sensors, decoded["decoded.truth"][row]))
        out.append(points)
    return out


def run_filter(config: RunConfig) -> str:
    decoded = _load_decoded(config)
    trials = load_prepared(_require(config, PREPROCESSED, "preprocess"))
    critic = Critic.load(_require(config, CRITIC, "train"))
    rules = _load_rules(config)

    pred = decoded["decoded.pred"]
    jerk = jerk_by_trial(pred, decoded["decoded.trial_ids"])
    confidence = critic.score(decoded["decoded.latent"], decoded["decoded.posterior"], jerk)
    trajectories = point_inputs(decoded, confidence, trials)

    kept, report = filter_trajectories(trajectories, config.thresholds, rules)
    out = _output_dir(config)
    report.write(out / "retention.csv")
    curve = threshold_sweep(trajectories, rules, config.thresholds, config.sweep_scales)
    write_sweep(out / "copilot_sweep.csv", curve)
    rho = calibration(confidence, point_errors(pred, decoded["decoded.truth"]))
    log.info("Critic rank correlation with point accuracy: %.3f", rho)
    return "filter: retained %d of %d points (ratio %.3f) over %d trials, critic rank %.3f" % (
        report.retained, report.total, report.ratio or 0.0, len(trajectories), rho)


def run_export_arm(config: RunConfig, trial: Optional[int] = None) -> str:
    decoded = _load_decoded(config)
    trial_ids = decoded["decoded.trial_ids"]
    if trial is None:
        trial = config.kinematics["trial"]
    if trial is None:
        trial = int(trial_ids.min())
    rows = np.flatnonzero(trial_ids == trial)
    if rows.size == 0:
        raise StageError("trial %d has no decoded points" % trial)
    rows = rows[np.argsort(decoded["decoded.target_index"][rows], kind="stable")]

    times = decoded["decoded.target_index"][rows] / float(decoded["decoded.rate"][0])
    index, thumb = Trajectory3D.fingertips(times, decoded["decoded.pred"][rows])
    target = map_to_workspace(midpoint(index, thumb), config.workspace)
    arm = ArmModel.load() if config.arm_path is None else ArmModel.load(config.arm_path)
    kin = config.kinematics
    joints = solve_trajectory(arm, target, None, kin["out_rate_hz"], kin["ik_tol"],
                              int(kin["ik_max_iters"]), kin["damping"])
    path = _output_dir(config) / ("joints_trial_%d.csv" % trial)
    n = write_joint_csv(path, joints)
    return "export-arm: %d joint samples over %.2f s for trial %d -> %s" % (
        n, joints.duration, trial, path)


# Window and delay sweep

def sweep_model(model: ModelConfig, window_samples: int) -> ModelConfig:
    """*model* resized for *window_samples*, shrinking the large kernel if it no longer fits."""
    kernel = model.large_kernel
    if kernel > window_samples:
        kernel = window_samples if window_samples % 2 else window_samples - 1
        log.debug("Large kernel reduced to %d for a %d-sample window", kernel, window_samples)
    return dataclasses.replace(model, window_samples=window_samples, large_kernel=kernel)


def _sweep_point(args) -> Tuple[float, float, float, int]:
    config, trials, plan, norm, grid_window, grid_delay = args
    spec = WindowSpec.sweep_default(grid_window, grid_delay, config.window.rate_hz)
    model = sweep_model(config.model, grid_window).validate()
    fusion = model.is_fusion
    train_set = make_windows(_select(trials, plan.train), spec, norm, fusion)
    val_set = make_windows(_select(trials, plan.val), spec, norm, fusion)
    test_set = make_windows(_select(trials, plan.test), spec, norm, fusion)
    if len(train_set) == 0 or len(test_set) == 0:
        log.warning("No windows for window %d, delay %d ms", grid_window, grid_delay)
        return float("nan"), float("nan"), float("nan"), len(train_set)
    decoder, _ = _fit_decoder(model, config, train_set, val_set, "mse", config.seed)
    pred, _ = decoder.predict(test_set.eeg, test_set.emg)
    try:
        rows = dict((name, (p, r)) for name, p, r in metrics_table(pred, test_set.targets))
    except DegenerateCorrelationError as e:
        log.warning("Window %d, delay %d ms: %s", grid_window, grid_delay, e)
        return float("nan"), float("nan"), float("nan"), len(train_set)
    return rows["overall"][0], rows["overall"][1], rows["midpoint"][0], len(train_set)


def sweep_grid(config: RunConfig) -> List[Tuple[str, int, int]]:
    """``(grid, window, delay)``: the window grid at the configured delay, then the delay grid."""
    w, d = config.window.window_samples, config.window.delay_ms
    return ([("window", win, d) for win in WINDOW_GRID]
            + [("delay", w, delay) for delay in DELAY_GRID_MS])


def run_sweep(config: RunConfig) -> str:
    trials = load_prepared(_require(config, PREPROCESSED, "preprocess"))
    plan = plan_split(config, trials)
    norm = fit_minmax([t.block(SignalKind.KIN) for t in _select(trials, plan.train)])
    grid = sweep_grid(config)
    jobs = [(config, trials, plan, norm, w, d) for _, w, d in grid]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(job) for job in jobs]

    rows = [[name, w, d, p, r, mp, n] for (name, w, d), (p, r, mp, n) in zip(grid, results)]
    path = _output_dir(config) / "sweep.csv"
    write_table(path, ["grid", "window_samples", "delay_ms", "pcc", "rmse", "midpoint_pcc",
                       "train_windows"], rows)
    best = max(rows, key=lambda r: -np.inf if np.isnan(r[5]) else r[5])
    return "sweep: %d settings, best midpoint PCC %.4f at window %d, delay %d ms -> %s" % (
        len(rows), best[5], best[1], best[2], path)
