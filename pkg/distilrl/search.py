"""
Two-Stage Compression Search
============================

Runs the compression procedure end to end:

1. **Layer removal.** For `n1` iterations, sample `m` keep/remove masks
   from the removal policy, score the resulting architectures, and update
   the policy with one policy-gradient step per iteration. The best
   architecture seen becomes the stage-1 candidate.

2. **Layer shrinkage.** Starting from that candidate, do the same for `n2`
   iterations with the shrink policy, which picks a factor for every
   kernel size, padding and width.

3. **Final distillation.** Train the winner to convergence with the
   combined hard-label and distillation loss and report how it compares
   to the teacher.

Only terminal architectures are scored; there is no intermediate reward,
so a rollout's return is exactly its terminal reward.

Randomness is derived from one master seed with `numpy.random.SeedSequence`
(spawn keys `(stage,)` for the policy initialization and
`(stage, iteration, rollout)` for each rollout), so a run is reproduced
exactly by its seed, whatever the number of evaluation workers.

A run directory (`out_dir`) receives:

* `config.yaml`: the configuration snapshot;
* `stage1.csv`, `stage2.csv`: one row per rollout;
* `stage{n}_policy_iter{k}.json`: policy checkpoints every
  `checkpoint_every` iterations, and `stage{n}_policy.json` at the end;
* `stage1_best.arch`, `stage2_best.arch`, `student.arch`;
* `report.yaml`: the final report.
"""

import os
import csv
import sys
import dataclasses
import concurrent.futures

import numpy as np
import yaml

try: # optional dependency on tqdm
    import tqdm
except ImportError:
    import distilrl.notqdm as tqdm

from distilrl import architectures
from distilrl.architectures import (
    DegeneracyClass,
    apply_removal,
    apply_shrinkage,
    classifier_index,
    encode_layer_features,
    param_count,
    shrink_features,
)
from distilrl.config import save_config
from distilrl.evaluation import (
    CandidateEvaluator,
    RewardCache,
    SurrogateEvaluator,
    SurrogateModel,
)
from distilrl.networks import (
    LossMode,
    LossSpec,
    build_network,
    evaluate_accuracy,
    save_network,
    train,
)
from distilrl.optimizers import PolicyTrainer, RolloutBatch
from distilrl.policies import (
    PolicyKind,
    RecurrentPolicy,
    sample_removal,
    sample_shrink,
    save_checkpoint,
    transfer_weights,
)
from distilrl.rewards import ConstraintMode, compression_ratio
from distilrl.teachers import get_teacher


CSV_COLUMNS = (
    'stage',
    'iteration',
    'rollout',
    'reward',
    'accuracy',
    'compression',
    'params',
    'degenerate',
    'baseline',
)

# written to the degenerate column for Valid candidates whose training diverged
DIVERGED = "Diverged"


class StageAborted(RuntimeError):
    """A stage stopped producing usable architectures."""


# # Seeds


def rollout_seed(master_seed, stage, iteration, rollout):
    sequence = np.random.SeedSequence(master_seed,
                                      spawn_key=(stage, iteration, rollout))
    return int(sequence.generate_state(1)[0])


def policy_seed(master_seed, stage):
    sequence = np.random.SeedSequence(master_seed, spawn_key=(stage,))
    return int(sequence.generate_state(1)[0])


# # Logs


@dataclasses.dataclass(frozen=True)
class RolloutLog:
    """One CSV row: a scored rollout and the baseline of its update."""
    stage: int
    iteration: int
    rollout: int
    reward: float
    accuracy: float
    compression: float
    params: int
    degenerate: DegeneracyClass
    baseline: float
    diverged: bool = False

    def row(self):
        return [
            self.stage,
            self.iteration,
            self.rollout,
            repr(self.reward),
            repr(self.accuracy),
            repr(self.compression),
            self.params,
            DIVERGED if self.diverged else self.degenerate.value,
            repr(self.baseline),
        ]


@dataclasses.dataclass(frozen=True)
class IterationLog:
    """
    One policy iteration: its rollouts, the baseline used by its update,
    the best eligible reward so far in the stage, and the mean entropy of
    the sampling distributions.
    """
    stage: int
    iteration: int
    rollouts: tuple
    baseline: float
    best_so_far: float
    entropy: float

    @property
    def rewards(self):
        return [r.reward for r in self.rollouts]

    def mean_reward(self):
        return float(np.mean(self.rewards))

    def mean_compression(self):
        return float(np.mean([r.compression for r in self.rollouts]))


def write_csv(path, logs):
    """Write the rollout rows of `logs`, floats in shortest repr form."""
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(CSV_COLUMNS)
        for log in logs:
            for rollout in log.rollouts:
                writer.writerow(rollout.row())


def read_csv(path):
    """Read rows written by `write_csv` back as dicts of strings."""
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


# # Stage results


@dataclasses.dataclass(eq=False)
class StageResult:
    """
    Fields:

    * `stage` (int): 1 or 2.
    * `best_arch` (`Architecture`): the selected architecture.
    * `best_report` (`EvalReport`)
    * `policy` (`RecurrentPolicy`) and `trainer` (`PolicyTrainer` or
      `None` when the stage had nothing to learn).
    * `logs` (list of `IterationLog`)
    """
    stage: int
    best_arch: architectures.Architecture
    best_report: object
    policy: object
    trainer: object
    logs: list


class _BestTracker:
    """
    Highest-reward Valid architecture, restricted to constraint-satisfying
    ones when the reward has constraints.
    """


    def __init__(self, constrained):
        self.constrained = constrained
        self.eligible = None
        self.fallback = None


    def offer(self, arch, report):
        if report.degenerate is not DegeneracyClass.VALID or report.diverged:
            return
        if self.fallback is None or report.reward > self.fallback[1].reward:
            self.fallback = (arch, report)
        if self.constrained and not report.constraint_satisfied:
            return
        if self.eligible is None or report.reward > self.eligible[1].reward:
            self.eligible = (arch, report)


    @property
    def best_reward(self):
        return -1.0 if self.eligible is None else self.eligible[1].reward


    def result(self, stage):
        if self.eligible is not None:
            return self.eligible
        if self.fallback is not None:
            _warn(stage, "no architecture satisfied the constraints; "
                         "selecting the best Valid one")
            return self.fallback
        raise StageAborted(f"stage {stage} found no Valid architecture")


def _warn(stage, message):
    tqdm.tqdm.write(f"[distilrl.search] stage {stage}: warning: {message}",
                    file=sys.stderr)


def _log(stage, message, verbose):
    if verbose:
        tqdm.tqdm.write(f"[distilrl.search] stage {stage}: {message}",
                        file=sys.stderr)


# # The search loop


def make_policy(kind, cfg, stage, value_head=None):
    """A freshly initialized policy for `stage`, sized by `cfg.policy`."""
    kind = PolicyKind(kind)
    hidden = (cfg.policy.hidden_remove if kind is PolicyKind.REMOVAL
              else cfg.policy.hidden_shrink)
    return RecurrentPolicy(
        kind,
        hidden_size=hidden,
        n_layers=cfg.policy.n_layers,
        value_head=cfg.policy.actor_critic if value_head is None
        else value_head,
        seed=policy_seed(cfg.run.seed, stage),
    )


def _run_stage(stage, features, sample, build, evaluator, policy, lr, cfg,
               out_dir, verbose):
    trainer = PolicyTrainer(policy, lr, baseline_beta=cfg.policy.baseline_beta,
                            actor_critic=cfg.policy.actor_critic)
    constrained = (bool(evaluator.reward_cfg.constraints)
                   and evaluator.reward_cfg.mode is not ConstraintMode.NONE)
    best = _BestTracker(constrained)
    iterations = cfg.run.n1 if stage == 1 else cfg.run.n2
    logs = []
    all_degenerate_streak = 0
    with concurrent.futures.ThreadPoolExecutor(cfg.run.workers) as pool:
        progress = tqdm.tqdm(range(iterations), disable=not verbose,
                             dynamic_ncols=True)
        for iteration in progress:
            trajectories = [
                sample(rollout_seed(cfg.run.seed, stage, iteration, k))
                for k in range(cfg.run.m)
            ]
            archs = [build(trajectory) for trajectory in trajectories]
            reports = list(pool.map(
                lambda arch: evaluator.evaluate(arch, iteration), archs,
            ))
            rewards = [report.reward for report in reports]
            batch = RolloutBatch(features, trajectories, rewards)
            baseline = trainer.update(batch)
            for arch, report in zip(archs, reports):
                best.offer(arch, report)
            logs.append(IterationLog(
                stage=stage,
                iteration=iteration,
                rollouts=tuple(
                    RolloutLog(stage, iteration, k, report.reward,
                               report.accuracy, report.compression,
                               report.params, report.degenerate, baseline,
                               report.diverged)
                    for k, report in enumerate(reports)
                ),
                baseline=baseline,
                best_so_far=best.best_reward,
                entropy=float(np.mean([t.entropy for t in trajectories])),
            ))
            if verbose:
                progress.set_postfix(reward=logs[-1].mean_reward(),
                                     best=best.best_reward)
            if all(r.degenerate is not DegeneracyClass.VALID or r.diverged
                   for r in reports):
                all_degenerate_streak += 1
            else:
                all_degenerate_streak = 0
            if all_degenerate_streak >= cfg.run.abort_after:
                raise StageAborted(
                    f"stage {stage}: every rollout was degenerate for "
                    f"{all_degenerate_streak} consecutive iterations "
                    f"(last iteration {iteration})"
                )
            if out_dir is not None and cfg.run.checkpoint_every and \
                    (iteration + 1) % cfg.run.checkpoint_every == 0:
                save_checkpoint(policy, os.path.join(
                    out_dir, f"stage{stage}_policy_iter{iteration + 1:04d}.json"
                ), trainer.baseline)
    arch, report = best.result(stage)
    _log(stage, f"best reward {report.reward:.4f} with {report.params} "
                f"params (C = {report.compression:.4f})", verbose)
    if out_dir is not None:
        save_checkpoint(policy, os.path.join(out_dir,
                                             f"stage{stage}_policy.json"),
                        trainer.baseline)
        architectures.save(arch, os.path.join(out_dir,
                                              f"stage{stage}_best.arch"))
        write_csv(os.path.join(out_dir, f"stage{stage}.csv"), logs)
    return StageResult(stage, arch, report, policy, trainer, logs)


def run_stage1(teacher, evaluator, cfg, out_dir=None, policy=None,
               verbose=False):
    """
    Layer removal on `teacher` (an `Architecture`).

    Parameters:

    * `evaluator`: a `CandidateEvaluator` or `SurrogateEvaluator`.
    * `cfg` (`RunConfig`)
    * `out_dir` (str, optional): where to write CSV, checkpoints and the
      best architecture.
    * `policy` (`RecurrentPolicy`, optional): start from this policy (e.g.
      transferred weights) instead of a fresh one.
    * `verbose` (bool)

    Returns a `StageResult`. Raises `StageAborted`.
    """
    if policy is None:
        policy = make_policy(PolicyKind.REMOVAL, cfg, stage=1)
    features = encode_layer_features(teacher)
    index = classifier_index(teacher)
    locked = (index,) if cfg.policy.lock_classifier and index is not None \
        else ()
    return _run_stage(
        1,
        features,
        lambda seed: sample_removal(policy, features, seed, locked),
        lambda trajectory: apply_removal(teacher, trajectory.actions),
        evaluator,
        policy,
        cfg.policy.lr_remove,
        cfg,
        out_dir,
        verbose,
    )


def run_stage2(candidate, teacher, evaluator, cfg, out_dir=None, policy=None,
               verbose=False):
    """
    Layer shrinkage on `candidate`, the stage-1 result. `teacher` sets the
    feature scales. `evaluator` should already be the stage-2 evaluator
    (see `for_stage2`).

    If the candidate has no configuration variables, it is returned as is
    (with a warning).

    Returns a `StageResult`. Raises `StageAborted`.
    """
    features = shrink_features(candidate, teacher)
    if features.shape[0] == 0:
        _warn(2, "candidate has no configurable variables; returning it "
                 "unchanged")
        report = evaluator.evaluate(candidate, 0)
        if out_dir is not None:
            architectures.save(candidate, os.path.join(out_dir,
                                                       "stage2_best.arch"))
            write_csv(os.path.join(out_dir, "stage2.csv"), [])
        return StageResult(2, candidate, report, policy, None, [])
    if policy is None:
        policy = make_policy(PolicyKind.SHRINK, cfg, stage=2)
    return _run_stage(
        2,
        features,
        lambda seed: sample_shrink(policy, features, seed),
        lambda trajectory: apply_shrinkage(candidate, trajectory.actions),
        evaluator,
        policy,
        cfg.policy.lr_shrink,
        cfg,
        out_dir,
        verbose,
    )


def transfer_policy(checkpoint, kind, cfg, stage):
    """
    A policy for `stage` initialized from `checkpoint` rather than at
    random. Raises `PolicyShapeError` unless the checkpoint has the same
    kind and dimensions; pass the result to `run_stage1` / `run_stage2`.
    """
    policy = make_policy(kind, cfg, stage)
    return transfer_weights(policy, checkpoint)


# # Final student


@dataclasses.dataclass(frozen=True)
class FinalReport:
    """
    The distilled winner against its teacher. `compression` is recomputed
    from the two parameter counts, and `delta_accuracy` is
    `accuracy - a_teacher`.
    """
    params: int
    params_teacher: int
    compression: float
    accuracy: float
    a_teacher: float
    delta_accuracy: float
    fingerprint: str
    surrogate: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)


def _final_report(arch, params_teacher, accuracy, a_teacher, surrogate):
    params = param_count(arch)
    return FinalReport(
        params=params,
        params_teacher=params_teacher,
        compression=compression_ratio(params, params_teacher),
        accuracy=float(accuracy),
        a_teacher=float(a_teacher),
        delta_accuracy=float(accuracy) - float(a_teacher),
        fingerprint=architectures.architecture_fingerprint(arch),
        surrogate=surrogate,
    )


def finalize_student(best_arch, teacher, cfg, seed=None, verbose=False):
    """
    Train `best_arch` from scratch with the combined loss
    (cross-entropy + `cfg.eval.lam` times the distillation loss) for
    `cfg.eval.final_epochs` epochs and compare it with the teacher.

    Returns `(net, FinalReport)`.
    """
    seed = policy_seed(cfg.run.seed, 3) if seed is None else seed
    net = build_network(best_arch, seed, cfg.eval.max_flatten)
    train(net, teacher.train, LossSpec(LossMode.COMBINED, cfg.eval.lam),
          cfg.eval.final_epochs, lr=cfg.eval.lr,
          batch_size=cfg.eval.batch_size, seed=seed, verbose=verbose)
    accuracy = evaluate_accuracy(net, teacher.validation)
    return net, _final_report(best_arch, teacher.params_teacher, accuracy,
                              teacher.a_teacher, surrogate=False)


# # Whole runs


def make_evaluator(cfg, teacher_ctx=None, cache=None, verbose=False):
    """
    The stage-1 evaluator for `cfg`: a `SurrogateEvaluator` when the
    surrogate is enabled, else a `CandidateEvaluator` on `teacher_ctx`.

    Returns `(teacher_arch, evaluator)`.
    """
    if cfg.surrogate.enabled:
        teacher = get_teacher(cfg.surrogate.teacher)
        model = SurrogateModel(teacher, cfg.surrogate.a_teacher,
                               cfg.surrogate.alpha, cfg.surrogate.beta)
        reward_cfg = cfg.reward_config(model.a_teacher, cfg.run.n1)
        return teacher, SurrogateEvaluator(model, reward_cfg,
                                           cfg.eval.max_flatten,
                                           verbose=verbose)
    if teacher_ctx is None:
        raise ValueError("a teacher context is needed unless the surrogate "
                         "is enabled")
    reward_cfg = cfg.reward_config(teacher_ctx.a_teacher, cfg.run.n1)
    return teacher_ctx.arch, CandidateEvaluator(
        teacher_ctx,
        reward_cfg,
        eval_epochs=cfg.eval.epochs,
        lr=cfg.eval.lr,
        batch_size=cfg.eval.batch_size,
        seed=cfg.run.seed,
        max_flatten=cfg.eval.max_flatten,
        cache=cache,
        verbose=verbose,
    )


def run_search(cfg, out_dir, teacher_ctx=None, candidate=None, verbose=False):
    """
    Run the stages selected by `cfg.run.stages` and, after stage 2, the
    final distillation (or, under the surrogate, the surrogate's verdict
    on the winner).

    Parameters:

    * `cfg` (`RunConfig`)
    * `out_dir` (str): the run directory, created if needed.
    * `teacher_ctx` (`TeacherContext`): required unless the surrogate is
      enabled.
    * `candidate` (`Architecture`, optional): the stage-2 starting point
      when only stage 2 runs (defaults to the teacher).
    * `verbose` (bool)

    Returns a dict with the stage results under `'stage1'` / `'stage2'`
    and the `FinalReport` under `'report'` (when stage 2 ran).
    """
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.yaml"))
    cache = None if cfg.surrogate.enabled else RewardCache(
        os.path.join(out_dir, "reward_cache.json"))
    teacher, evaluator = make_evaluator(cfg, teacher_ctx, cache, verbose)
    results = {}

    transfer = cfg.policy.transfer_checkpoint
    if cfg.run.stages in ("1", "both"):
        policy = None
        if transfer:
            policy = transfer_policy(transfer, PolicyKind.REMOVAL, cfg,
                                     stage=1)
        results['stage1'] = run_stage1(teacher, evaluator, cfg, out_dir,
                                       policy, verbose)
        candidate = results['stage1'].best_arch
    if cfg.run.stages == "1":
        _save_cache(cache)
        return results

    candidate = candidate or teacher
    stage2_cfg = cfg.reward_config(evaluator.reward_cfg.a_teacher, cfg.run.n2)
    policy = None
    if transfer and cfg.run.stages == "2":
        policy = transfer_policy(transfer, PolicyKind.SHRINK, cfg, stage=2)
    stage2 = run_stage2(candidate, teacher,
                        evaluator.for_stage2(candidate, stage2_cfg), cfg,
                        out_dir, policy, verbose)
    results['stage2'] = stage2
    _save_cache(cache)

    if cfg.surrogate.enabled:
        report = _final_report(stage2.best_arch, param_count(teacher),
                               stage2.best_report.accuracy,
                               cfg.surrogate.a_teacher, surrogate=True)
    else:
        net, report = finalize_student(stage2.best_arch, teacher_ctx, cfg,
                                       verbose=verbose)
        save_network(net, os.path.join(out_dir, "student.bin"))
    architectures.save(stage2.best_arch, os.path.join(out_dir,
                                                      "student.arch"))
    with open(os.path.join(out_dir, "report.yaml"), 'w') as fp:
        yaml.safe_dump(report.to_dict(), fp, sort_keys=False)
    results['report'] = report
    _log(2, f"student: {report.params} params (C = {report.compression:.4f}), "
            f"accuracy {report.accuracy:.4f} "
            f"({report.delta_accuracy:+.4f} vs teacher)", verbose)
    return results


def _save_cache(cache):
    if cache is not None:
        cache.save()


# # Plot data


def export_plot_data(run_dir, path):
    """
    Gather the rollout rows of every stage found in `run_dir` into one CSV
    shaped for reward, accuracy and compression against iteration plots:
    the stage CSV columns plus `best_so_far`, the best Valid reward seen in
    the stage up to and including that row's iteration.

    Returns the number of rows written (iterations times `m`, per stage).
    """
    rows = []
    for stage in (1, 2):
        stage_path = os.path.join(run_dir, f"stage{stage}.csv")
        if not os.path.exists(stage_path):
            continue
        stage_rows = read_csv(stage_path)
        best = -1.0
        by_iteration = {}
        for row in stage_rows:
            by_iteration.setdefault(int(row['iteration']), []).append(row)
        for iteration in sorted(by_iteration):
            group = by_iteration[iteration]
            best = max([best] + [
                float(row['reward']) for row in group
                if row['degenerate'] == DegeneracyClass.VALID.value
            ])
            rows.extend([row[column] for column in CSV_COLUMNS] + [repr(best)]
                        for row in group)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(CSV_COLUMNS + ('best_so_far',))
        writer.writerows(rows)
    return len(rows)
