"""
Rewards
=======

Scores a terminal architecture. The reward combines the compression ratio
and the student's accuracy relative to the teacher,

    R = C (2 - C) * A / A_teacher,   C = 1 - params(student) / params(teacher)

which grows with both quantities but punishes high-compression,
low-accuracy students harder than the reverse. Degenerate architectures
get a fixed reward of -1. Optional linear resource constraints `A x <= b`
are folded in, either as a hard -1 penalty or annealed with a factor
`epsilon_t` that decays from 1 to 0 over the policy iterations.

Intermediate (non-terminal) states of a trajectory are never scored; only
the architecture produced by a complete action sequence reaches this module.
"""

import re
import enum
import dataclasses

import numpy as np

from distilrl.architectures import DegeneracyClass


DEGENERATE_REWARD = -1.0


class ConstraintParseError(ValueError):
    """A constraint string could not be understood."""


class ConstraintMode(str, enum.Enum):
    HARD = "Hard"
    ANNEALED = "Annealed"
    NONE = "None"


@dataclasses.dataclass(frozen=True)
class Constraint:
    """One row `coeffs . x <= bound` of a linear constraint system."""
    coeffs: tuple
    bound: float

    def __post_init__(self):
        object.__setattr__(self, 'coeffs',
                           tuple(float(c) for c in self.coeffs))
        object.__setattr__(self, 'bound', float(self.bound))
        if not self.coeffs:
            raise ConstraintParseError("a constraint needs coefficients")


@dataclasses.dataclass(frozen=True)
class RewardConfig:
    """
    Fields:

    * `a_teacher` (float in (0, 1]): teacher validation accuracy.
    * `constraints` (tuple of `Constraint`): rows of `A x <= b`, over the
      variable vector from `constraint_variables`.
    * `mode` (`ConstraintMode`): how violations are scored.
    * `t_anneal` (int >= 1): policy iterations for `epsilon_t` to reach 0
      in annealed mode.
    """
    a_teacher: float
    constraints: tuple = ()
    mode: ConstraintMode = ConstraintMode.NONE
    t_anneal: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'mode', ConstraintMode(self.mode))
        object.__setattr__(self, 'constraints', tuple(self.constraints))
        if not 0.0 < self.a_teacher <= 1.0:
            raise ValueError(f"a_teacher must be in (0, 1], got "
                             f"{self.a_teacher}")
        if self.mode is ConstraintMode.ANNEALED and self.t_anneal < 1:
            raise ValueError(f"t_anneal must be >= 1, got {self.t_anneal}")


@dataclasses.dataclass(frozen=True)
class RewardRecord:
    """
    The scored outcome of one rollout.

    `degenerate != Valid` implies `reward == -1`.
    """
    compression: float
    accuracy: float
    reward: float
    degenerate: DegeneracyClass
    constraint_satisfied: bool
    params: int = 0
    epsilon: float = 1.0


# # Reward pieces


def compression_ratio(params_student, params_teacher):
    """
    `C = 1 - params_student / params_teacher`, clamped at 0 for students
    larger than the teacher.

    Raises `ValueError` if `params_teacher` is not positive.
    """
    if params_teacher <= 0:
        raise ValueError(f"teacher parameter count must be positive, got "
                         f"{params_teacher}")
    return max(0.0, 1.0 - params_student / params_teacher)


def base_reward(compression, accuracy, a_teacher):
    """`C (2 - C) * A / a_teacher`."""
    return compression * (2.0 - compression) * accuracy / a_teacher


def naive_reward(compression, relative_accuracy):
    """
    The symmetric product `A * C`, kept for comparison with
    `base_reward`: it cannot tell (A=1, C=0.25) from (A=0.25, C=1).
    """
    return relative_accuracy * compression


def degenerate_reward(degenerate):
    """-1 for any non-Valid class, `None` (defer to the full reward) else."""
    if DegeneracyClass(degenerate) is DegeneracyClass.VALID:
        return None
    return DEGENERATE_REWARD


def epsilon_schedule(iteration, t_anneal):
    """`epsilon_t = max(0, 1 - t / t_anneal)`: 1 at t = 0, 0 from t_anneal."""
    return max(0.0, 1.0 - iteration / t_anneal)


def constraint_variables(params):
    """The built-in constrained variable vector: `x = (params,)`."""
    return np.array([float(params)])


def constraints_satisfied(x, constraints):
    """
    True when every row holds. Raises `ValueError` if a row's coefficient
    count differs from the length of `x`.
    """
    x = np.asarray(x, dtype=np.float64)
    for row in constraints:
        if len(row.coeffs) != len(x):
            raise ValueError(f"constraint has {len(row.coeffs)} coefficients "
                             f"but there are {len(x)} variables")
        if float(np.dot(row.coeffs, x)) > row.bound:
            return False
    return True


def constrained_reward(base, x, cfg, iteration):
    """
    Apply the constraint handling of `cfg` to a Valid rollout's base reward.

    * Hard: `base` if `A x <= b`, else -1.
    * Annealed: `base` if satisfied, else `eps_t (base + 1) - 1`.
    * None: `base`.

    `iteration` counts policy iterations from 0.
    """
    if cfg.mode is ConstraintMode.NONE or constraints_satisfied(
            x, cfg.constraints):
        return base
    if cfg.mode is ConstraintMode.HARD:
        return DEGENERATE_REWARD
    epsilon = epsilon_schedule(iteration, cfg.t_anneal)
    return epsilon * (base + 1.0) - 1.0


def score(params_student, params_teacher, accuracy, degenerate, cfg,
          iteration):
    """
    Build the full `RewardRecord` for one terminal architecture: degenerate
    override first, then the base reward, then the constraints.
    """
    degenerate = DegeneracyClass(degenerate)
    x = constraint_variables(params_student)
    satisfied = (degenerate is DegeneracyClass.VALID
                 and constraints_satisfied(x, cfg.constraints))
    epsilon = (epsilon_schedule(iteration, cfg.t_anneal)
               if cfg.mode is ConstraintMode.ANNEALED else 1.0)
    compression = (compression_ratio(params_student, params_teacher)
                   if params_student > 0 else 0.0)
    override = degenerate_reward(degenerate)
    if override is not None:
        return RewardRecord(compression, 0.0, override, degenerate, False,
                            int(params_student), epsilon)
    base = base_reward(compression, accuracy, cfg.a_teacher)
    reward = constrained_reward(base, x, cfg, iteration)
    return RewardRecord(compression, float(accuracy), reward, degenerate,
                        satisfied, int(params_student), epsilon)


# # Constraint text


_NUMBER = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_EXPRESSION = re.compile(
    rf"^\s*(?:(?P<coeff>{_NUMBER})\s*\*\s*)?params\s*<=\s*"
    rf"(?P<bound>{_NUMBER})\s*(?P<suffix>[kKmM]?)\s*$"
)
_SUFFIXES = {'': 1.0, 'k': 1e3, 'm': 1e6}


def parse_constraint(text):
    """
    Parse one constraint row. Two forms are accepted:

    * an expression over the parameter count: `"params<=20000"`,
      `"params <= 20K"`, `"2*params<=1e6"`;

    * a row `"c1, ..., cn, bound"` of coefficients followed by the bound.

    Raises `ConstraintParseError`.
    """
    match = _EXPRESSION.match(text)
    if match:
        coeff = float(match['coeff']) if match['coeff'] else 1.0
        bound = float(match['bound']) * _SUFFIXES[match['suffix'].lower()]
        return Constraint((coeff,), bound)
    parts = [part.strip() for part in text.split(',')]
    if len(parts) >= 2:
        try:
            numbers = [float(part) for part in parts]
        except ValueError:
            pass
        else:
            return Constraint(tuple(numbers[:-1]), numbers[-1])
    raise ConstraintParseError(f"cannot parse constraint {text!r}; expected "
                               f"e.g. 'params<=20000' or '1, 20000'")


def format_constraint(constraint):
    """The row form accepted by `parse_constraint`."""
    numbers = list(constraint.coeffs) + [constraint.bound]
    return ", ".join(repr(n) for n in numbers)
