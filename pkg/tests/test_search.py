import os

import numpy as np
import pytest
import yaml

from conftest import surrogate_config

from distilrl import architectures
from distilrl.architectures import DegeneracyClass, apply_removal, param_count
from distilrl.config import RunConfig, with_overrides
from distilrl.evaluation import SurrogateEvaluator, exhaustive_best
from distilrl.networks import (
    LossMode,
    LossSpec,
    build_network,
    evaluate_accuracy,
    train,
)
from distilrl.policies import PolicyKind, sample_removal, save_checkpoint
from distilrl.rewards import compression_ratio
from distilrl.search import (
    CSV_COLUMNS,
    DIVERGED,
    StageAborted,
    export_plot_data,
    finalize_student,
    make_evaluator,
    make_policy,
    read_csv,
    rollout_seed,
    run_search,
    run_stage1,
    run_stage2,
    transfer_policy,
)
from distilrl.teachers import get_teacher


def keep_everything(cfg):
    policy = make_policy(PolicyKind.REMOVAL, cfg, stage=1)
    policy.params()['head_b'][:] = 50.0
    return policy


# # Seeds


def test_rollout_seeds_are_distinct_and_stable():
    seeds = {rollout_seed(0, s, t, k)
             for s in (1, 2) for t in range(5) for k in range(5)}
    assert len(seeds) == 50
    assert rollout_seed(0, 1, 2, 3) == rollout_seed(0, 1, 2, 3)
    assert rollout_seed(0, 1, 2, 3) != rollout_seed(1, 1, 2, 3)


# # Stage 1


def test_keep_everything_selects_the_teacher():
    cfg = surrogate_config(run__n1=3, run__m=2)
    teacher, evaluator = make_evaluator(cfg)
    result = run_stage1(teacher, evaluator, cfg, policy=keep_everything(cfg))
    assert result.best_arch == teacher
    assert result.best_report.reward == 0.0
    assert all(r.reward == 0.0 for log in result.logs for r in log.rollouts)
    assert len(result.logs) == 3
    assert all(len(log.rollouts) == 2 for log in result.logs)


def test_stage1_is_independent_of_worker_count(tmp_path):
    outputs = []
    for workers in (1, 3):
        cfg = surrogate_config(run__n1=4, run__m=4, run__workers=workers,
                               run__seed=5)
        teacher, evaluator = make_evaluator(cfg)
        out_dir = tmp_path / f"workers{workers}"
        out_dir.mkdir()
        result = run_stage1(teacher, evaluator, cfg, out_dir=str(out_dir))
        outputs.append(((out_dir / "stage1.csv").read_bytes(),
                        result.policy.weights))
    assert outputs[0][0] == outputs[1][0]
    np.testing.assert_array_equal(outputs[0][1], outputs[1][1])


def test_best_so_far_never_decreases():
    cfg = surrogate_config(run__n1=8, run__m=3, policy__lr_remove=0.05)
    teacher, evaluator = make_evaluator(cfg)
    result = run_stage1(teacher, evaluator, cfg)
    best = [log.best_so_far for log in result.logs]
    assert best == sorted(best)
    assert best[-1] == result.best_report.reward
    valid = [r.reward for log in result.logs for r in log.rollouts
             if r.degenerate is DegeneracyClass.VALID]
    assert result.best_report.reward == max(valid)


def test_stage1_outputs(tmp_path):
    cfg = surrogate_config(run__n1=4, run__m=2, run__checkpoint_every=2)
    teacher, evaluator = make_evaluator(cfg)
    result = run_stage1(teacher, evaluator, cfg, out_dir=str(tmp_path))
    for name in ("stage1.csv", "stage1_policy.json", "stage1_best.arch",
                 "stage1_policy_iter0002.json", "stage1_policy_iter0004.json"):
        assert (tmp_path / name).exists(), name
    assert architectures.load(tmp_path / "stage1_best.arch") == \
        result.best_arch
    rows = read_csv(tmp_path / "stage1.csv")
    assert len(rows) == 4 * 2
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [int(row['rollout']) for row in rows[:2]] == [0, 1]


def test_hard_constraint_is_honoured():
    cfg = surrogate_config(run__n1=10, run__m=5,
                           reward__constraints=['params<=3000'],
                           reward__mode='Hard')
    teacher, evaluator = make_evaluator(cfg)
    result = run_stage1(teacher, evaluator, cfg)
    for log in result.logs:
        for rollout in log.rollouts:
            if rollout.reward != -1.0:
                assert rollout.params <= 3000
    assert result.best_report.params <= 3000
    assert result.best_report.constraint_satisfied


def test_annealed_constraint_selects_a_feasible_architecture():
    cfg = surrogate_config(run__n1=10, run__m=5,
                           reward__constraints=['params<=3000'],
                           reward__mode='Annealed')
    teacher, evaluator = make_evaluator(cfg)
    assert evaluator.reward_cfg.t_anneal == 10
    result = run_stage1(teacher, evaluator, cfg)
    assert result.best_report.params <= 3000


def test_all_degenerate_stage_aborts():
    cfg = surrogate_config(run__n1=10, run__m=2, run__abort_after=3,
                           policy__lock_classifier=False)
    teacher, evaluator = make_evaluator(cfg)
    policy = make_policy(PolicyKind.REMOVAL, cfg, stage=1)
    policy.params()['head_b'][:] = -50.0
    with pytest.raises(StageAborted, match="3 consecutive"):
        run_stage1(teacher, evaluator, cfg, policy=policy)


def test_actor_critic_stage_runs():
    cfg = surrogate_config(run__n1=3, run__m=3, policy__actor_critic=True)
    teacher, evaluator = make_evaluator(cfg)
    result = run_stage1(teacher, evaluator, cfg)
    assert result.policy.value_head
    assert result.best_report.degenerate is DegeneracyClass.VALID


def test_diverged_rollouts_are_marked_in_the_log(tmp_path, monkeypatch):
    accuracy = SurrogateEvaluator._accuracy

    def diverge_even_lengths(self, arch):
        if len(arch) % 2 == 0:
            return 0.0, True, False
        return accuracy(self, arch)

    monkeypatch.setattr(SurrogateEvaluator, '_accuracy', diverge_even_lengths)
    cfg = surrogate_config(run__n1=4, run__m=4)
    teacher, evaluator = make_evaluator(cfg)
    result = run_stage1(teacher, evaluator, cfg, out_dir=str(tmp_path))
    rows = read_csv(tmp_path / "stage1.csv")
    diverged = [row for row in rows if row['degenerate'] == DIVERGED]
    valid = [row for row in rows
             if row['degenerate'] == DegeneracyClass.VALID.value]
    assert diverged and valid
    assert all(float(row['reward']) == -1.0 for row in diverged)
    assert all(float(row['accuracy']) == 0.0 for row in diverged)
    # without constraints a Valid candidate never scores -1
    assert all(float(row['reward']) >= 0.0 for row in valid)
    assert not result.best_report.diverged
    assert len(result.best_arch) % 2 == 1


# # Stage 2


def test_keep_all_factors_returns_the_candidate():
    cfg = surrogate_config(run__n2=2, run__m=2)
    teacher, evaluator = make_evaluator(cfg)
    policy = make_policy(PolicyKind.SHRINK, cfg, stage=2)
    policy.params()['head_b'][9] = 50.0
    result = run_stage2(teacher, teacher,
                        evaluator.for_stage2(teacher), cfg, policy=policy)
    assert result.best_arch == teacher
    assert result.best_report.reward == 0.0
    assert len(result.logs) == 2


def test_stage2_shrinks_from_the_candidate():
    cfg = surrogate_config(run__n2=3, run__m=3)
    teacher, evaluator = make_evaluator(cfg)
    candidate = apply_removal(teacher, [True] * 5 + [False, False, True])
    result = run_stage2(candidate, teacher, evaluator.for_stage2(candidate),
                        cfg)
    assert len(result.best_arch) == len(candidate)
    assert result.best_report.degenerate is DegeneracyClass.VALID
    assert result.best_report.reward == max(
        r.reward for log in result.logs for r in log.rollouts)


def test_surrogate_search_shrinks_the_stage1_winner(tmp_path):
    cfg = surrogate_config(run__n1=30, run__n2=3, run__m=5)
    results = run_search(cfg, str(tmp_path))
    candidate = results['stage1'].best_arch
    assert "Conv2d" in [l.layer_type.value for l in candidate.layers]
    assert len(results['stage2'].logs) == 3
    assert results['stage2'].trainer is not None
    assert len(read_csv(tmp_path / "stage2.csv")) == 3 * 5
    assert len(results['stage2'].best_arch) == len(candidate)


def test_candidate_without_variables_is_returned(tmp_path):
    cfg = surrogate_config()
    teacher, evaluator = make_evaluator(cfg)
    candidate = apply_removal(teacher, [False] * 7 + [True])
    result = run_stage2(candidate, teacher, evaluator.for_stage2(candidate),
                        cfg, out_dir=str(tmp_path))
    assert result.best_arch == candidate
    assert result.logs == [] and result.trainer is None
    assert param_count(candidate) == 1450
    assert read_csv(tmp_path / "stage2.csv") == []
    assert (tmp_path / "stage2_best.arch").exists()


# # Transfer


def test_transfer_policy_reproduces_the_distribution(tmp_path):
    cfg = surrogate_config(run__n1=3, run__m=3, policy__lr_remove=0.05)
    teacher, evaluator = make_evaluator(cfg)
    trained = run_stage1(teacher, evaluator, cfg).policy
    path = tmp_path / "policy.json"
    save_checkpoint(trained, path)
    policy = transfer_policy(path, PolicyKind.REMOVAL, cfg, stage=1)
    np.testing.assert_array_equal(policy.weights, trained.weights)
    features = architectures.encode_layer_features(teacher)
    for seed in range(5):
        a = sample_removal(policy, features, seed, locked=(7,))
        b = sample_removal(trained, features, seed, locked=(7,))
        assert a.actions == b.actions


# # Final student


def final_config(**overrides):
    return with_overrides(RunConfig(), {'eval.final_epochs': 2},
                          **{k.replace('__', '.'): v
                             for k, v in overrides.items()})


def test_final_student_without_distillation_is_hard_label_training(
        tiny_teacher):
    cfg = final_config(eval__lam=0.0)
    arch = apply_removal(tiny_teacher.arch,
                         [True, True, True, False, False, True])
    net, _ = finalize_student(arch, tiny_teacher, cfg, seed=3)
    plain = build_network(arch, 3, cfg.eval.max_flatten)
    train(plain, tiny_teacher.train, LossSpec(LossMode.HARD_ONLY), 2,
          lr=cfg.eval.lr, batch_size=cfg.eval.batch_size, seed=3)
    np.testing.assert_array_equal(net.weights, plain.weights)


def test_final_report_is_recomputed(tiny_teacher):
    cfg = final_config()
    arch = apply_removal(tiny_teacher.arch,
                         [True, True, True, False, False, True])
    net, report = finalize_student(arch, tiny_teacher, cfg, seed=3)
    assert report.params == param_count(arch) == 151
    assert report.params_teacher == 299
    assert report.compression == compression_ratio(151, 299) == 1 - 151 / 299
    assert report.accuracy == evaluate_accuracy(net, tiny_teacher.validation)
    assert report.delta_accuracy == report.accuracy - 0.9
    assert report.fingerprint == architectures.architecture_fingerprint(arch)
    assert not report.surrogate


# # Whole runs


def test_run_search_writes_the_run_directory(tmp_path):
    cfg = surrogate_config(run__n1=2, run__n2=2, run__m=2)
    results = run_search(cfg, str(tmp_path))
    for name in ("config.yaml", "stage1.csv", "stage2.csv", "stage1_best.arch",
                 "stage2_best.arch", "student.arch", "report.yaml"):
        assert (tmp_path / name).exists(), name
    assert not (tmp_path / "reward_cache.json").exists()
    assert not (tmp_path / "student.bin").exists()
    with open(tmp_path / "report.yaml") as fp:
        report = yaml.safe_load(fp)
    assert report == results['report'].to_dict()
    assert report['surrogate'] is True
    assert report['params_teacher'] == 8722
    assert report['params'] == param_count(results['stage2'].best_arch)
    assert architectures.load(tmp_path / "student.arch") == \
        results['stage2'].best_arch


def test_stage_one_only(tmp_path):
    cfg = surrogate_config(run__n1=2, run__m=2, run__stages='1')
    results = run_search(cfg, str(tmp_path))
    assert set(results) == {'stage1'}
    assert not (tmp_path / "stage2.csv").exists()


def test_stage_two_only_starts_from_the_given_candidate(tmp_path):
    cfg = surrogate_config(run__n2=2, run__m=2, run__stages='2')
    teacher = get_teacher('surrogate8')
    candidate = apply_removal(teacher, [True] * 5 + [False, False, True])
    results = run_search(cfg, str(tmp_path), candidate=candidate)
    assert 'stage1' not in results
    assert len(results['stage2'].best_arch) == len(candidate)


def test_export_plot_data(tmp_path):
    cfg = surrogate_config(run__n1=3, run__n2=2, run__m=2)
    results = run_search(cfg, str(tmp_path / "run"))
    n_rollouts = sum(len(log.rollouts) for key in ('stage1', 'stage2')
                     for log in results[key].logs)
    path = tmp_path / "plots.csv"
    assert export_plot_data(str(tmp_path / "run"), str(path)) == n_rollouts
    rows = read_csv(path)
    assert len(rows) == n_rollouts
    assert tuple(rows[0]) == CSV_COLUMNS + ('best_so_far',)
    stage1 = [float(row['best_so_far']) for row in rows if row['stage'] == '1']
    assert stage1 == sorted(stage1)
    assert stage1[-1] == results['stage1'].best_report.reward


# # Search quality


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_search_is_near_the_exhaustive_optimum(seed):
    cfg = surrogate_config(run__n1=200, run__m=5, run__seed=seed)
    teacher, evaluator = make_evaluator(cfg)
    _, optimum = exhaustive_best(teacher, evaluator)
    result = run_stage1(teacher, evaluator, cfg)
    assert result.best_report.reward >= 0.95 * optimum.reward


def mean_compression(logs):
    return np.mean([r.compression for log in logs for r in log.rollouts])


@pytest.mark.slow
def test_stage2_compression_rises_over_the_run():
    gains = []
    for seed in range(5):
        cfg = surrogate_config(run__n2=30, run__m=5, run__seed=seed)
        teacher, evaluator = make_evaluator(cfg)
        # stem conv, one wide conv and the pool: most of the teacher's
        # parameters, so narrowing pays for its width penalty
        candidate = apply_removal(teacher, [True] * 5 + [False, False, True])
        assert param_count(candidate) == 6402
        result = run_stage2(candidate, teacher,
                            evaluator.for_stage2(candidate), cfg)
        gains.append(mean_compression(result.logs[-5:])
                     - mean_compression(result.logs[:5]))
    assert sum(gain > 0 for gain in gains) >= 4
    assert np.mean(gains) > 0


@pytest.mark.slow
def test_pretrained_policy_transfers_to_a_wider_teacher(tmp_path):
    wins = 0
    gaps = []
    for seed in range(5):
        source = surrogate_config(run__n1=100, run__m=5, run__seed=seed,
                                  policy__lr_remove=0.03)
        teacher, evaluator = make_evaluator(source)
        pretrained = run_stage1(teacher, evaluator, source).policy
        path = os.path.join(tmp_path, f"policy{seed}.json")
        save_checkpoint(pretrained, path)

        target = surrogate_config(run__n1=10, run__m=5, run__seed=seed + 100,
                                  surrogate__teacher='surrogate8_wide')
        wide, wide_evaluator = make_evaluator(target)
        scratch = run_stage1(wide, wide_evaluator, target)
        warm = run_stage1(wide, wide_evaluator, target,
                          policy=transfer_policy(path, PolicyKind.REMOVAL,
                                                 target, stage=1))
        gap = (np.mean([log.mean_reward() for log in warm.logs])
               - np.mean([log.mean_reward() for log in scratch.logs]))
        gaps.append(gap)
        wins += gap > 0
    assert wins >= 4
    assert np.mean(gaps) > 0
