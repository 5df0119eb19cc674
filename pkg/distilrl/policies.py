"""
Recurrent Compression Policies
==============================

The two stochastic policies that drive compression, both built from
LSTM stacks written directly in numpy (forward pass and backpropagation
through time):

* The removal policy is a bidirectional two-layer LSTM (30 hidden units per
  direction by default). It reads the feature sequence of the teacher's
  layers in both directions and emits, per layer, the probability of
  keeping that layer. Actions do not feed back into the network, so both
  directions are computed first and all keep/remove decisions sampled
  afterwards.

* The shrink policy is a unidirectional two-layer LSTM (50 hidden units by
  default). It walks the configuration variables of the stage-1 candidate
  and emits, per variable, a 10-way categorical distribution over the
  shrink factors {0.1, ..., 1.0}. It is autoregressive: the input at step
  `t` is the variable's layer features with the previous factor appended
  (1.0 before the first step).

Either policy can carry a value head (an affine map from the per-step hidden
state to a scalar) for Actor-Critic training.

All parameters live in one flat float64 vector, `policy.weights`; see the
`params` module.

Module-level functions follow the operations of the compression procedure:
`sample_removal`, `sample_shrink`, `log_prob_of`, `value_of`, and the
checkpoint helpers `save_checkpoint` / `load_checkpoint` /
`transfer_weights`.
"""

import enum
import json
import dataclasses

import numpy as np

from distilrl.architectures import (
    FEATURE_SIZE,
    SHRINK_FACTORS,
    RemovalMask,
    ShrinkVector,
)
from distilrl.optimizers import BaselineState, check_finite
from distilrl.params import ParamLayout


CHECKPOINT_FORMAT = "distilrl-policy"
CHECKPOINT_VERSION = 1

LOG_PROB_FLOOR = -30.0
INIT_SCALE = 0.08
N_SHRINK_ACTIONS = len(SHRINK_FACTORS)


class PolicyShapeError(ValueError):
    """Inputs, actions or a checkpoint do not fit the policy's dimensions."""


class PolicyKind(str, enum.Enum):
    REMOVAL = "Removal"
    SHRINK = "Shrink"


DEFAULT_HIDDEN_SIZE = {PolicyKind.REMOVAL: 30, PolicyKind.SHRINK: 50}
DEFAULT_INPUT_SIZE = {
    PolicyKind.REMOVAL: FEATURE_SIZE,
    PolicyKind.SHRINK: FEATURE_SIZE + 1,
}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log_softmax(z):
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


# # LSTM primitives (gate order: input, forget, output, candidate)


def _lstm_step(x, h_prev, c_prev, W, U, b):
    H = h_prev.shape[0]
    z = W @ x + U @ h_prev + b
    i = _sigmoid(z[:H])
    f = _sigmoid(z[H:2 * H])
    o = _sigmoid(z[2 * H:3 * H])
    g = np.tanh(z[3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def _lstm_sequence(xs, W, U, b, reverse=False):
    T = xs.shape[0]
    H = U.shape[1]
    h = np.zeros(H)
    c = np.zeros(H)
    hs = np.zeros((T, H))
    steps = []
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h, c, cache = _lstm_step(xs[t], h, c, W, U, b)
        hs[t] = h
        steps.append((t, cache))
    return hs, steps


def _lstm_sequence_backward(dhs, steps, W, U):
    H = U.shape[1]
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(4 * H)
    dxs = np.zeros((dhs.shape[0], W.shape[1]))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t, (x, h_prev, c_prev, i, f, o, g, tc) in reversed(steps):
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc ** 2)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc * i * (1.0 - g ** 2),
        ])
        dW += np.outer(dz, x)
        dU += np.outer(dz, h_prev)
        db += dz
        dxs[t] = W.T @ dz
        dh_next = U.T @ dz
        dc_next = dc * f
    return dxs, dW, dU, db


# # Trajectories


@dataclasses.dataclass(frozen=True, eq=False)
class Trajectory:
    """
    One sampled action sequence.

    Fields:

    * `actions` (`RemovalMask` or `ShrinkVector`)
    * `action_indices` (tuple of int): the actions as head indices (0/1 for
      remove/keep, 0..9 for the shrink factors 0.1..1.0).
    * `log_probs` (array `(T,)`): per-step log-probabilities, each <= 0.
    * `hidden_states` (array `(T, hidden width)`): the per-step top-layer
      hidden vectors, for the value head.
    * `entropy` (float): summed per-step entropy of the sampling
      distributions.
    * `locked` (tuple of int): steps whose action was forced (keep) rather
      than sampled; they carry log-probability 0 and no gradient.
    """
    actions: object
    action_indices: tuple
    log_probs: np.ndarray
    hidden_states: np.ndarray
    entropy: float
    locked: tuple = ()

    def __len__(self):
        return len(self.action_indices)

    def total_log_prob(self):
        return float(np.sum(self.log_probs))


# # The policy network


class RecurrentPolicy:
    """
    A stacked LSTM policy with a per-step output head.

    Parameters:

    * `kind` (`PolicyKind` or str `"Removal"` / `"Shrink"`)
    * `input_size` (int, optional): defaults to 12 for removal and 13 for
      shrink (the layer features, plus the previous factor for shrink).
    * `hidden_size` (int, optional): per-direction hidden units; defaults
      to 30 for removal and 50 for shrink.
    * `n_layers` (int, default 2): stacked LSTM layers.
    * `value_head` (bool, default `False`): add the Actor-Critic value head.
    * `seed` (int, default 0): initialization seed. LSTM forget-gate biases
      start at 1, every other weight uniform in [-0.08, 0.08].
    """


    def __init__(
        self,
        kind,
        input_size=None,
        hidden_size=None,
        n_layers=2,
        value_head=False,
        seed=0,
    ):
        self.kind = PolicyKind(kind)
        self.input_size = int(input_size or DEFAULT_INPUT_SIZE[self.kind])
        self.hidden_size = int(hidden_size or DEFAULT_HIDDEN_SIZE[self.kind])
        self.n_layers = int(n_layers)
        self.value_head = bool(value_head)
        self.bidirectional = self.kind is PolicyKind.REMOVAL
        self.n_outputs = (1 if self.kind is PolicyKind.REMOVAL
                          else N_SHRINK_ACTIONS)
        if self.kind is PolicyKind.SHRINK and self.input_size < 2:
            raise PolicyShapeError("shrink policy input needs at least one "
                                   "feature plus the previous action")
        self.layout = self._make_layout()
        self.weights = self._initial_weights(seed)


    @property
    def directions(self):
        return ('fwd', 'bwd') if self.bidirectional else ('fwd',)


    @property
    def output_width(self):
        """Width of the per-step hidden state seen by the heads."""
        return self.hidden_size * len(self.directions)


    @property
    def feature_size(self):
        """Width of the feature rows the caller provides."""
        if self.kind is PolicyKind.SHRINK:
            return self.input_size - 1
        return self.input_size


    def _make_layout(self):
        layout = ParamLayout()
        H = self.hidden_size
        for layer in range(self.n_layers):
            width = self.input_size if layer == 0 else self.output_width
            for d in self.directions:
                layout.add(f"lstm{layer}_{d}_W", (4 * H, width))
                layout.add(f"lstm{layer}_{d}_U", (4 * H, H))
                layout.add(f"lstm{layer}_{d}_b", (4 * H,))
        layout.add('head_W', (self.n_outputs, self.output_width))
        layout.add('head_b', (self.n_outputs,))
        if self.value_head:
            layout.add('value_W', (1, self.output_width))
            layout.add('value_b', (1,))
        return layout


    def _initial_weights(self, seed):
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-INIT_SCALE, INIT_SCALE, size=self.layout.size)
        p = self.layout.views(theta)
        H = self.hidden_size
        for name in self.layout.names():
            if name.startswith('lstm') and name.endswith('_b'):
                p[name][H:2 * H] = 1.0
        return theta


    def params(self):
        return self.layout.views(self.weights)


    def set_weights(self, weights):
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != (self.layout.size,):
            raise PolicyShapeError(f"weight vector has shape "
                                   f"{weights.shape}, policy needs "
                                   f"({self.layout.size},)")
        check_finite(weights, "policy weights")
        self.weights = weights


    def dimensions(self):
        return {
            'kind': self.kind.value,
            'input_size': self.input_size,
            'hidden_size': self.hidden_size,
            'n_layers': self.n_layers,
            'value_head': self.value_head,
        }


    # # Inputs


    def check_features(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_size:
            raise PolicyShapeError(
                f"{self.kind.value} policy expects feature rows of width "
                f"{self.feature_size}, got array of shape {features.shape}"
            )
        return features


    def inputs_for(self, features, action_indices):
        """
        The network input sequence for `features` under the given actions.
        For the removal policy that is just the features; for the shrink
        policy the previous factor (1.0 at the first step) is appended to
        every row.
        """
        features = self.check_features(features)
        if len(action_indices) != features.shape[0]:
            raise PolicyShapeError(f"{len(action_indices)} actions for "
                                   f"{features.shape[0]} feature rows")
        if self.kind is PolicyKind.REMOVAL:
            return features
        previous = np.ones((features.shape[0], 1))
        for t in range(1, features.shape[0]):
            previous[t, 0] = SHRINK_FACTORS[action_indices[t - 1]]
        return np.hstack([features, previous])


    # # Forward and backward passes


    def _forward(self, inputs):
        p = self.params()
        layer_in = inputs
        caches = []
        for layer in range(self.n_layers):
            outputs = []
            for d in self.directions:
                hs, steps = _lstm_sequence(
                    layer_in,
                    p[f"lstm{layer}_{d}_W"],
                    p[f"lstm{layer}_{d}_U"],
                    p[f"lstm{layer}_{d}_b"],
                    reverse=(d == 'bwd'),
                )
                outputs.append(hs)
                caches.append(steps)
            layer_in = np.concatenate(outputs, axis=1)
        hidden = layer_in
        logits = np.zeros((inputs.shape[0], self.n_outputs))
        for t in range(inputs.shape[0]):
            logits[t] = p['head_W'] @ hidden[t] + p['head_b']
        return logits, hidden, caches


    def hidden_states(self, inputs):
        return self._forward(inputs)[1]


    def _log_probs(self, logits, action_indices, locked=()):
        """Per-step floored log-probabilities and the unfloored values."""
        actions = np.asarray(action_indices, dtype=np.int64)
        if self.kind is PolicyKind.REMOVAL:
            z = logits[:, 0]
            raw = np.where(
                actions == 1,
                -np.logaddexp(0.0, -z),
                -np.logaddexp(0.0, z),
            )
        else:
            raw = _log_softmax(logits)[np.arange(len(actions)), actions]
        raw = np.array(raw, dtype=np.float64)
        if len(locked):
            raw[list(locked)] = 0.0
        return np.maximum(raw, LOG_PROB_FLOOR), raw


    def _dlogp_dlogits(self, logits, action_indices, locked=()):
        actions = np.asarray(action_indices, dtype=np.int64)
        _, raw = self._log_probs(logits, actions, locked)
        if self.kind is PolicyKind.REMOVAL:
            d = (actions - _sigmoid(logits[:, 0]))[:, None]
        else:
            d = -np.exp(_log_softmax(logits))
            d[np.arange(len(actions)), actions] += 1.0
        active = raw > LOG_PROB_FLOOR
        if len(locked):
            active[list(locked)] = False
        return d * active[:, None]


    def log_probs(self, inputs, action_indices, locked=()):
        logits, _, _ = self._forward(inputs)
        return self._log_probs(logits, action_indices, locked)[0]


    def value_of(self, hidden_states):
        """Per-step values `V_t` for the given hidden states."""
        if not self.value_head:
            raise PolicyShapeError(f"{self.kind.value} policy has no value "
                                   f"head")
        p = self.params()
        hidden_states = np.asarray(hidden_states, dtype=np.float64)
        values = np.zeros(hidden_states.shape[0])
        for t in range(hidden_states.shape[0]):
            values[t] = (p['value_W'] @ hidden_states[t] + p['value_b'])[0]
        return values


    def gradient(
        self,
        inputs,
        action_indices,
        step_weights,
        value_weights=None,
        locked=(),
    ):
        """
        Gradient with respect to `self.weights` of

            sum_t step_weights[t] * log P(a_t) + sum_t value_weights[t] * V_t

        computed by backpropagation through time. Locked and floored steps
        contribute nothing to the first sum.

        Raises `NonFiniteError` if the result is not finite.
        """
        step_weights = np.asarray(step_weights, dtype=np.float64)
        logits, hidden, caches = self._forward(inputs)
        p = self.params()
        grad = self.layout.zeros()
        g = self.layout.views(grad)

        dlogits = (self._dlogp_dlogits(logits, action_indices, locked)
                   * step_weights[:, None])
        g['head_W'] += dlogits.T @ hidden
        g['head_b'] += dlogits.sum(axis=0)
        dhidden = dlogits @ p['head_W']

        if value_weights is not None:
            if not self.value_head:
                raise PolicyShapeError(f"{self.kind.value} policy has no "
                                       f"value head")
            value_weights = np.asarray(value_weights, dtype=np.float64)
            g['value_W'] += value_weights[None, :] @ hidden
            g['value_b'] += value_weights.sum()
            dhidden = dhidden + np.outer(value_weights, p['value_W'][0])

        H = self.hidden_size
        n_dirs = len(self.directions)
        for layer in reversed(range(self.n_layers)):
            dlayer_in = 0.0
            for j, d in enumerate(self.directions):
                name = f"lstm{layer}_{d}"
                dxs, dW, dU, db = _lstm_sequence_backward(
                    dhidden[:, j * H:(j + 1) * H],
                    caches[layer * n_dirs + j],
                    p[name + "_W"],
                    p[name + "_U"],
                )
                g[name + "_W"] += dW
                g[name + "_U"] += dU
                g[name + "_b"] += db
                dlayer_in = dlayer_in + dxs
            dhidden = dlayer_in
        check_finite(grad, "log-probability gradient")
        return grad


# # Sampling


def _bernoulli_entropy(z):
    p = _sigmoid(z)
    return float(np.sum(
        p * np.logaddexp(0.0, -z) + (1.0 - p) * np.logaddexp(0.0, z)
    ))


def _require(policy, kind):
    if policy.kind is not kind:
        raise PolicyShapeError(f"expected a {kind.value} policy, got "
                               f"{policy.kind.value}")


def sample_removal(policy, features, rng_seed, locked=()):
    """
    Sample keep/remove decisions for every layer.

    Parameters:

    * `policy` (`RecurrentPolicy` of kind Removal)
    * `features` (array `(L, 12)`): from
      `architectures.encode_layer_features`.
    * `rng_seed` (int): the only source of randomness; equal
      `(weights, features, rng_seed)` give equal trajectories.
    * `locked` (iterable of int, optional): layer indices that are always
      kept (used for the classifier), with log-probability 0.

    Returns a `Trajectory` whose actions are a `RemovalMask`.
    """
    _require(policy, PolicyKind.REMOVAL)
    features = policy.check_features(features)
    locked = tuple(sorted(int(i) for i in locked))
    logits, hidden, _ = policy._forward(features)
    z = logits[:, 0]
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(len(z)) < _sigmoid(z)
    keep[list(locked)] = True
    indices = tuple(int(k) for k in keep)
    log_probs, _ = policy._log_probs(logits, indices, locked)
    free = [t for t in range(len(z)) if t not in locked]
    return Trajectory(
        actions=RemovalMask(tuple(bool(k) for k in keep)),
        action_indices=indices,
        log_probs=log_probs,
        hidden_states=hidden,
        entropy=_bernoulli_entropy(z[free]),
        locked=locked,
    )


def sample_shrink(policy, features, rng_seed):
    """
    Sample one shrink factor per configuration variable, autoregressively.

    Parameters:

    * `policy` (`RecurrentPolicy` of kind Shrink)
    * `features` (array `(T, 12)`): from `architectures.shrink_features`.
      `T` may be 0, giving an empty trajectory.
    * `rng_seed` (int)

    Returns a `Trajectory` whose actions are a `ShrinkVector`.
    """
    _require(policy, PolicyKind.SHRINK)
    features = policy.check_features(features)
    p = policy.params()
    rng = np.random.default_rng(rng_seed)
    H = policy.hidden_size
    state = [(np.zeros(H), np.zeros(H)) for _ in range(policy.n_layers)]
    previous = 1.0
    indices = []
    entropy = 0.0
    for t in range(features.shape[0]):
        x = np.concatenate([features[t], [previous]])
        for layer in range(policy.n_layers):
            h, c, _ = _lstm_step(
                x,
                *state[layer],
                p[f"lstm{layer}_fwd_W"],
                p[f"lstm{layer}_fwd_U"],
                p[f"lstm{layer}_fwd_b"],
            )
            state[layer] = (h, c)
            x = h
        log_p = _log_softmax(p['head_W'] @ x + p['head_b'])
        probs = np.exp(log_p)
        index = int(rng.choice(N_SHRINK_ACTIONS, p=probs / probs.sum()))
        entropy -= float(np.sum(probs * log_p))
        indices.append(index)
        previous = SHRINK_FACTORS[index]
    indices = tuple(indices)
    # the recorded log-probabilities come from the same teacher-forced pass
    # that `log_prob_of` and the gradient use
    inputs = policy.inputs_for(features, indices)
    logits, hidden, _ = policy._forward(inputs)
    log_probs, _ = policy._log_probs(logits, indices)
    return Trajectory(
        actions=ShrinkVector(tuple(SHRINK_FACTORS[i] for i in indices)),
        action_indices=indices,
        log_probs=log_probs,
        hidden_states=hidden,
        entropy=entropy,
    )


def action_indices_of(policy, actions):
    """Convert a mask, factor vector or plain sequence to head indices."""
    if policy.kind is PolicyKind.REMOVAL:
        return tuple(int(bool(k)) for k in getattr(actions, 'keep', actions))
    factors = getattr(actions, 'factors', actions)
    return tuple(int(round(float(a) * 10)) - 1 for a in factors)


def log_prob_of(policy, features, actions, locked=()):
    """
    Recompute the per-step log-probabilities of `actions` (a mask, a factor
    vector, or a `Trajectory`) under the policy's current weights. Each value
    is floored at -30.

    Raises `PolicyShapeError` if the number of actions does not match the
    number of feature rows.
    """
    if isinstance(actions, Trajectory):
        locked = actions.locked
        indices = actions.action_indices
    else:
        indices = action_indices_of(policy, actions)
    inputs = policy.inputs_for(features, indices)
    return policy.log_probs(inputs, indices, locked)


def value_of(policy, hidden_states):
    """Per-step value estimates; raises `PolicyShapeError` without a head."""
    return policy.value_of(hidden_states)


# # Checkpoints


def save_checkpoint(policy, path, baseline=None):
    """
    Write the policy's kind, dimensions and weights (plus, optionally, a
    `BaselineState`) to `path` as JSON. Floats are written in their shortest
    round-trip form, so loading restores the weights exactly.
    """
    data = {
        'format': CHECKPOINT_FORMAT,
        'format_version': CHECKPOINT_VERSION,
        **policy.dimensions(),
        'weights': policy.weights.tolist(),
        'baseline': None if baseline is None else dataclasses.asdict(baseline),
    }
    with open(path, 'w') as fp:
        json.dump(data, fp)


def load_checkpoint(path):
    """
    Read a checkpoint written by `save_checkpoint`.

    Returns `(policy, baseline)` where `baseline` is a `BaselineState` or
    `None`.
    """
    with open(path) as fp:
        data = json.load(fp)
    if (data.get('format') != CHECKPOINT_FORMAT
            or data.get('format_version') != CHECKPOINT_VERSION):
        raise PolicyShapeError(f"{path} is not a version "
                               f"{CHECKPOINT_VERSION} policy checkpoint")
    policy = RecurrentPolicy(
        kind=data['kind'],
        input_size=data['input_size'],
        hidden_size=data['hidden_size'],
        n_layers=data['n_layers'],
        value_head=data['value_head'],
    )
    policy.set_weights(data['weights'])
    baseline = data.get('baseline')
    if baseline is not None:
        baseline = BaselineState(**baseline)
    return policy, baseline


def transfer_weights(policy, path):
    """
    Initialize `policy` from the checkpoint at `path` instead of its random
    weights. The checkpoint must have been written by a policy of the same
    kind and dimensions.

    Raises `PolicyShapeError` on any mismatch.
    """
    source, _ = load_checkpoint(path)
    if source.dimensions() != policy.dimensions():
        raise PolicyShapeError(
            f"checkpoint {path} has dimensions {source.dimensions()}, "
            f"policy needs {policy.dimensions()}"
        )
    policy.set_weights(source.weights)
    return policy
