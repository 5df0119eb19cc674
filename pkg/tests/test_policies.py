import numpy as np
import pytest

from conftest import finite_difference

from distilrl.architectures import (
    SHRINK_FACTORS,
    RemovalMask,
    ShrinkVector,
    encode_layer_features,
    shrink_features,
)
from distilrl.optimizers import BaselineState
from distilrl.policies import (
    PolicyKind,
    PolicyShapeError,
    RecurrentPolicy,
    load_checkpoint,
    log_prob_of,
    sample_removal,
    sample_shrink,
    save_checkpoint,
    transfer_weights,
)
from distilrl.teachers import get_teacher


def random_features(rows, seed=0):
    return np.random.default_rng(seed).random((rows, 12))


def small_policy(kind, value_head=False, seed=3):
    return RecurrentPolicy(kind, hidden_size=4, n_layers=2,
                           value_head=value_head, seed=seed)


# # Layout


def test_layout_names_and_defaults():
    removal = RecurrentPolicy(PolicyKind.REMOVAL)
    shrink = RecurrentPolicy("Shrink", value_head=True)
    assert removal.dimensions() == {
        'kind': "Removal", 'input_size': 12, 'hidden_size': 30,
        'n_layers': 2, 'value_head': False,
    }
    assert shrink.dimensions()['input_size'] == 13
    assert shrink.dimensions()['hidden_size'] == 50
    p = removal.params()
    assert p['lstm0_fwd_W'].shape == (4 * 30, 12)
    assert p['lstm1_bwd_W'].shape == (4 * 30, 60)
    assert p['head_W'].shape == (1, 60)
    assert 'value_W' not in p
    assert 'lstm0_bwd_W' not in shrink.params()
    assert shrink.params()['head_W'].shape == (10, 50)


def test_initialization_is_seeded():
    a = RecurrentPolicy("Removal", seed=5)
    b = RecurrentPolicy("Removal", seed=5)
    c = RecurrentPolicy("Removal", seed=6)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert not np.array_equal(a.weights, c.weights)
    assert np.abs(a.params()['head_W']).max() <= 0.08


def test_params_are_views():
    policy = small_policy("Removal")
    policy.params()['head_b'][:] = 7.0
    assert policy.weights[-1] == 7.0


def test_set_weights_checks_shape():
    policy = small_policy("Removal")
    with pytest.raises(PolicyShapeError):
        policy.set_weights(np.zeros(3))


# # Gradients


@pytest.mark.parametrize("kind,value_head", [
    ("Removal", False),
    ("Removal", True),
    ("Shrink", False),
    ("Shrink", True),
])
def test_gradient_matches_finite_differences(kind, value_head):
    policy = small_policy(kind, value_head)
    features = random_features(5)
    rng = np.random.default_rng(1)
    n_actions = 2 if kind == "Removal" else 10
    actions = tuple(int(a) for a in rng.integers(0, n_actions, size=5))
    inputs = policy.inputs_for(features, actions)
    step_weights = rng.standard_normal(5)
    value_weights = rng.standard_normal(5) if value_head else None

    def objective(theta):
        other = small_policy(kind, value_head)
        other.set_weights(theta)
        total = float(step_weights @ other.log_probs(inputs, actions))
        if value_head:
            values = other.value_of(other.hidden_states(inputs))
            total += float(value_weights @ values)
        return total

    analytic = policy.gradient(inputs, actions, step_weights, value_weights)
    numeric = finite_difference(objective, policy.weights.copy())
    np.testing.assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-7)


def test_locked_steps_carry_no_gradient():
    policy = small_policy("Removal")
    features = random_features(4)
    actions = (1, 0, 1, 1)
    weights = np.array([0.0, 0.0, 0.0, 1.0])
    grad = policy.gradient(features, actions, weights, locked=(3,))
    np.testing.assert_array_equal(grad, 0.0)
    assert policy.log_probs(features, actions, locked=(3,))[3] == 0.0


# # Sampling


def test_removal_sampling_frequencies():
    policy = small_policy("Removal")
    policy.params()['head_b'][:] = 0.4
    features = random_features(3)
    logits, _, _ = policy._forward(features)
    p_keep = 1 / (1 + np.exp(-logits[:, 0]))
    n = 10_000
    keeps = np.array([sample_removal(policy, features, seed).actions.keep
                      for seed in range(n)])
    standard_error = np.sqrt(p_keep * (1 - p_keep) / n)
    assert np.all(np.abs(keeps.mean(axis=0) - p_keep) < 4 * standard_error)


def test_shrink_first_step_frequencies():
    policy = small_policy("Shrink")
    features = random_features(2)
    n = 10_000
    firsts = np.array([sample_shrink(policy, features, seed).action_indices[0]
                       for seed in range(n)])
    logits, _, _ = policy._forward(policy.inputs_for(features, (0, 0)))
    probs = np.exp(logits[0] - logits[0].max())
    probs /= probs.sum()
    counts = np.bincount(firsts, minlength=10) / n
    standard_error = np.sqrt(probs * (1 - probs) / n)
    assert np.all(np.abs(counts - probs) < 4 * standard_error)


def test_shrink_sampling_follows_a_skewed_head():
    policy = small_policy("Shrink")
    p = policy.params()
    p['head_W'][:] = 0.0
    p['head_b'][:] = np.linspace(2.0, -2.0, 10)
    p['head_b'][9] = -40.0
    probs = np.exp(p['head_b'] - p['head_b'].max())
    probs /= probs.sum()
    features = random_features(3)
    indices = np.array([sample_shrink(policy, features, seed).action_indices
                        for seed in range(5000)]).ravel()
    counts = np.bincount(indices, minlength=10) / indices.size
    # the last factor is never drawn when its probability is negligible
    assert counts[9] == 0.0
    standard_error = np.sqrt(probs * (1 - probs) / indices.size)
    assert np.all(np.abs(counts - probs) <= 4 * standard_error)


def test_sampling_is_deterministic_per_seed():
    features = encode_layer_features(get_teacher('surrogate8'))
    policy = RecurrentPolicy("Removal", seed=2)
    a = sample_removal(policy, features, 11)
    b = sample_removal(policy, features, 11)
    assert a.actions == b.actions
    np.testing.assert_array_equal(a.log_probs, b.log_probs)
    shrink = RecurrentPolicy("Shrink", seed=2)
    features = shrink_features(get_teacher('surrogate8'))
    assert sample_shrink(shrink, features, 4).actions == \
        sample_shrink(shrink, features, 4).actions


def test_recorded_log_probs_match_recomputation():
    teacher = get_teacher('surrogate8')
    removal = RecurrentPolicy("Removal", seed=1)
    features = encode_layer_features(teacher)
    trajectory = sample_removal(removal, features, 5, locked=(7,))
    np.testing.assert_array_equal(trajectory.log_probs,
                                  log_prob_of(removal, features, trajectory))
    assert np.all(trajectory.log_probs <= 0)
    assert trajectory.hidden_states.shape == (8, 60)

    shrink = RecurrentPolicy("Shrink", seed=1)
    features = shrink_features(teacher)
    trajectory = sample_shrink(shrink, features, 5)
    assert isinstance(trajectory.actions, ShrinkVector)
    assert set(trajectory.actions.factors) <= set(SHRINK_FACTORS)
    np.testing.assert_allclose(
        trajectory.log_probs,
        log_prob_of(shrink, features, trajectory.actions),
    )
    assert trajectory.entropy > 0


def test_locked_layers_are_always_kept():
    policy = small_policy("Removal")
    policy.params()['head_b'][:] = -50.0
    features = random_features(4)
    trajectory = sample_removal(policy, features, 0, locked=(3,))
    assert trajectory.actions == RemovalMask((False, False, False, True))
    assert trajectory.log_probs[3] == 0.0
    assert trajectory.locked == (3,)


def test_log_probs_are_floored():
    policy = small_policy("Removal")
    policy.params()['head_b'][:] = 500.0
    features = random_features(2)
    log_probs = log_prob_of(policy, features, RemovalMask((False, True)))
    assert log_probs[0] == -30.0
    assert log_probs[1] == pytest.approx(0.0)


def test_shrink_inputs_carry_the_previous_factor():
    policy = small_policy("Shrink")
    inputs = policy.inputs_for(random_features(3), (4, 9, 0))
    np.testing.assert_allclose(inputs[:, -1], [1.0, 0.5, 1.0])


def test_shrink_steps_share_weights_across_time():
    policy = small_policy("Shrink")
    rows = random_features(4)
    full = log_prob_of(policy, rows, [0.5, 0.3, 0.8, 1.0])
    np.testing.assert_allclose(full[:2],
                               log_prob_of(policy, rows[:2], [0.5, 0.3]))
    # any row placed first is scored like a one-step sequence
    for t in range(4):
        alone = log_prob_of(policy, rows[t:t + 1], [0.5])
        reordered = log_prob_of(policy, rows[[t, 0, 1]], [0.5, 0.3, 0.8])
        np.testing.assert_allclose(reordered[0], alone[0])
    # exchanging two identical rows leaves every step unchanged
    twin = rows[[0, 1, 0, 2]]
    swapped = rows[[0, 1, 0, 2]][[2, 1, 0, 3]]
    np.testing.assert_array_equal(
        log_prob_of(policy, twin, [0.5, 0.5, 0.5, 0.2]),
        log_prob_of(policy, swapped, [0.5, 0.5, 0.5, 0.2]))


def test_empty_shrink_trajectory():
    policy = small_policy("Shrink")
    trajectory = sample_shrink(policy, np.zeros((0, 12)), 0)
    assert len(trajectory) == 0
    assert trajectory.actions == ShrinkVector(())


def test_shape_errors():
    removal = small_policy("Removal")
    with pytest.raises(PolicyShapeError):
        sample_removal(removal, np.zeros((3, 11)), 0)
    with pytest.raises(PolicyShapeError):
        log_prob_of(removal, random_features(3), RemovalMask((True, False)))
    with pytest.raises(PolicyShapeError):
        sample_shrink(removal, random_features(3), 0)
    with pytest.raises(PolicyShapeError):
        removal.value_of(np.zeros((3, 8)))


# # Checkpoints


def test_checkpoint_round_trip(tmp_path):
    policy = RecurrentPolicy("Removal", value_head=True, seed=9)
    path = tmp_path / "policy.json"
    save_checkpoint(policy, path, BaselineState(0.25, 0.9, True))
    loaded, baseline = load_checkpoint(path)
    assert loaded.dimensions() == policy.dimensions()
    np.testing.assert_array_equal(loaded.weights, policy.weights)
    assert baseline == BaselineState(0.25, 0.9, True)

    features = encode_layer_features(get_teacher('surrogate8'))
    mask = RemovalMask((True, False) * 4)
    np.testing.assert_array_equal(log_prob_of(policy, features, mask),
                                  log_prob_of(loaded, features, mask))


def test_checkpoint_without_baseline(tmp_path):
    path = tmp_path / "policy.json"
    save_checkpoint(small_policy("Shrink"), path)
    _, baseline = load_checkpoint(path)
    assert baseline is None


def test_transfer_weights(tmp_path):
    path = tmp_path / "policy.json"
    source = RecurrentPolicy("Removal", seed=4)
    save_checkpoint(source, path)
    target = transfer_weights(RecurrentPolicy("Removal", seed=0), path)
    np.testing.assert_array_equal(target.weights, source.weights)


@pytest.mark.parametrize("target", [
    RecurrentPolicy("Removal", hidden_size=20),
    RecurrentPolicy("Removal", n_layers=1),
    RecurrentPolicy("Removal", value_head=True),
    RecurrentPolicy("Shrink"),
])
def test_transfer_rejects_other_dimensions(target, tmp_path):
    path = tmp_path / "policy.json"
    save_checkpoint(RecurrentPolicy("Removal"), path)
    with pytest.raises(PolicyShapeError):
        transfer_weights(target, path)


def test_foreign_json_is_not_a_checkpoint(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(PolicyShapeError):
        load_checkpoint(path)
