"""
Policy-Gradient Optimization
============================

REINFORCE with an exponential-moving-average baseline, the Actor-Critic
variant that swaps the baseline for a learned per-step value, and the Adam
optimizer that applies the resulting updates.

Every estimator here is expressed through one primitive of the policy
objects (see the `policies` module):

    policy.gradient(inputs, action_indices, step_weights, value_weights)

which returns the gradient, with respect to the flat weight vector, of
`sum_t step_weights[t] * log P(a_t) + sum_t value_weights[t] * V_t`.
The estimators differ only in how they choose the weights.

`adam_step` is also used (with `maximize=False`) by the network engine to
train students and teachers.
"""

import dataclasses

import numpy as np


class NonFiniteError(FloatingPointError):
    """A gradient, loss or update contained NaN or infinity."""


def check_finite(array, what):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {what}")


# # Baseline


@dataclasses.dataclass(frozen=True)
class BaselineState:
    """
    The moving-average reward baseline `b`.

    Fields:

    * `value` (float): current `b`.
    * `decay` (float): `beta` in `b <- beta * b + (1 - beta) * mean(R)`.
    * `initialized` (bool): false until the first batch has been seen.
    """
    value: float = 0.0
    decay: float = 0.9
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"baseline decay must be in [0, 1), got "
                             f"{self.decay}")


def update_baseline(baseline, batch_mean_reward):
    """
    Fold a batch-mean reward into the baseline. The first call sets
    `b` to the batch mean; later calls apply the moving average.
    """
    r = float(batch_mean_reward)
    if not baseline.initialized:
        return dataclasses.replace(baseline, value=r, initialized=True)
    value = baseline.decay * baseline.value + (1.0 - baseline.decay) * r
    return dataclasses.replace(baseline, value=value)


# # Rollouts


@dataclasses.dataclass(frozen=True, eq=False)
class RolloutBatch:
    """
    `m` sampled trajectories from one policy on one feature sequence,
    together with their terminal rewards.
    """
    features: np.ndarray
    trajectories: tuple
    rewards: tuple

    def __post_init__(self):
        object.__setattr__(self, 'trajectories', tuple(self.trajectories))
        object.__setattr__(self, 'rewards',
                           tuple(float(r) for r in self.rewards))
        if len(self.trajectories) == 0:
            raise ValueError("a rollout batch needs at least one trajectory")
        if len(self.trajectories) != len(self.rewards):
            raise ValueError(f"{len(self.trajectories)} trajectories but "
                             f"{len(self.rewards)} rewards")
        for r in self.rewards:
            if not np.isfinite(r) or r < -1.0:
                raise ValueError(f"reward {r!r} outside [-1, inf)")

    def __len__(self):
        return len(self.trajectories)

    def mean_reward(self):
        return float(np.mean(self.rewards))


def reinforce_gradient(batch, baseline, policy):
    """
    The REINFORCE ascent direction

        (1/m) sum_k sum_t grad log P(a_t | h_t) * (R_k - b)

    for the rollouts in `batch`, with `b` taken from `baseline` (or the
    batch-mean reward if the baseline has not been initialized yet).

    The per-rollout gradients are reduced in rollout order.

    Raises `NonFiniteError` if any log-probability gradient is not finite.
    """
    m = len(batch)
    b = baseline.value if baseline.initialized else batch.mean_reward()
    total = np.zeros_like(policy.weights)
    for trajectory, reward in zip(batch.trajectories, batch.rewards):
        steps = len(trajectory)
        weights = np.full(steps, (reward - b) / m)
        total += policy.gradient(
            policy.inputs_for(batch.features, trajectory.action_indices),
            trajectory.action_indices,
            weights,
            locked=trajectory.locked,
        )
    check_finite(total, "policy gradient")
    return total


def critic_loss(batch, policy):
    """
    Mean squared error between the per-step values and the rollout rewards,
    `(1/m) sum_k (1/T) sum_t (V_kt - R_k)^2`, under the current weights.
    """
    total = 0.0
    for trajectory, reward in zip(batch.trajectories, batch.rewards):
        if len(trajectory) == 0:
            continue
        inputs = policy.inputs_for(batch.features, trajectory.action_indices)
        values = policy.value_of(policy.hidden_states(inputs))
        total += float(np.mean((values - reward) ** 2))
    return total / len(batch)


def actor_critic_gradient(batch, policy):
    """
    The Actor-Critic variant of `reinforce_gradient`.

    Returns a pair:

    * the policy ascent direction, using the per-step advantage
      `R_k - V_kt` (held constant with respect to the weights);

    * the gradient of `critic_loss` (a descent direction for the value head
      and the shared recurrent trunk).

    The value estimates come from each trajectory's recorded hidden states,
    which match the current weights as long as no update happened since the
    batch was sampled.

    Raises `PolicyShapeError` (from the policy) if there is no value head.
    """
    m = len(batch)
    policy_total = np.zeros_like(policy.weights)
    critic_total = np.zeros_like(policy.weights)
    for trajectory, reward in zip(batch.trajectories, batch.rewards):
        steps = len(trajectory)
        values = policy.value_of(trajectory.hidden_states)
        if steps == 0:
            continue
        inputs = policy.inputs_for(batch.features, trajectory.action_indices)
        policy_total += policy.gradient(
            inputs,
            trajectory.action_indices,
            (reward - values) / m,
            locked=trajectory.locked,
        )
        critic_total += policy.gradient(
            inputs,
            trajectory.action_indices,
            np.zeros(steps),
            value_weights=2.0 * (values - reward) / (m * steps),
            locked=trajectory.locked,
        )
    check_finite(policy_total, "policy gradient")
    check_finite(critic_total, "critic gradient")
    return policy_total, critic_total


# # Adam


@dataclasses.dataclass(frozen=True, eq=False)
class AdamState:
    """
    Adam moments and hyperparameters for a flat parameter vector.
    Use `AdamState.create(size, lr)` for zero-initialized moments.
    """
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def create(cls, size, lr=0.001, beta1=0.9, beta2=0.999, eps_hat=1e-8):
        return cls(
            first_moment=np.zeros(size),
            second_moment=np.zeros(size),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps_hat=eps_hat,
        )


def adam_step(state, theta, gradient, maximize=True):
    """
    One bias-corrected Adam update.

    Parameters:

    * `state` (`AdamState`)
    * `theta` (1-d array): current parameters. Not modified.
    * `gradient` (1-d array, same shape): the objective's gradient.
    * `maximize` (bool, default `True`): step along the gradient (policy
      objectives). Pass `False` to descend (losses).

    Returns `(new_theta, new_state)`.

    Raises `NonFiniteError` for non-finite gradient entries and
    `ValueError` for mismatched shapes.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != theta.shape or theta.shape != state.first_moment.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, gradient "
                         f"{gradient.shape}, state {state.first_moment.shape}")
    check_finite(gradient, "optimizer gradient")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * gradient ** 2
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    new_theta = theta + step if maximize else theta - step
    new_state = dataclasses.replace(
        state,
        first_moment=m,
        second_moment=v,
        step_count=t,
    )
    return new_theta, new_state


# # Policy training


class PolicyTrainer:
    """
    Owns everything that changes while a policy learns: the policy weights,
    the Adam state and the reward baseline. One `update` per rollout batch.

    Parameters:

    * `policy` (`RecurrentPolicy`)
    * `lr` (float): Adam learning rate.
    * `baseline_beta` (float, default 0.9): moving-average decay.
    * `actor_critic` (bool, default `False`): use the value head instead of
      the moving-average baseline. The policy must have a value head.
    """


    def __init__(self, policy, lr, baseline_beta=0.9, actor_critic=False):
        self.policy = policy
        self.adam = AdamState.create(policy.weights.size, lr=lr)
        self.baseline = BaselineState(decay=baseline_beta)
        self.actor_critic = actor_critic
        if actor_critic and not policy.value_head:
            raise ValueError("actor-critic training needs a policy with a "
                             "value head")


    def update(self, batch):
        """
        Apply one policy-gradient step for `batch`.

        The first batch initializes the baseline to its own mean reward
        before the gradient is taken (so that first update is zero-mean);
        afterwards the gradient uses the baseline accumulated from earlier
        batches and the baseline is updated after the step.

        Returns the baseline value used in the gradient.
        """
        mean_reward = batch.mean_reward()
        first = not self.baseline.initialized
        if first:
            self.baseline = update_baseline(self.baseline, mean_reward)
        used = self.baseline.value
        if self.actor_critic:
            policy_grad, critic_grad = actor_critic_gradient(batch,
                                                             self.policy)
            direction = policy_grad - critic_grad
        else:
            direction = reinforce_gradient(batch, self.baseline, self.policy)
        theta, self.adam = adam_step(self.adam, self.policy.weights,
                                     direction, maximize=True)
        self.policy.set_weights(theta)
        if not first:
            self.baseline = update_baseline(self.baseline, mean_reward)
        return used
