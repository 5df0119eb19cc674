"""
Candidate Evaluation
====================

Turns a candidate architecture into a scored `EvalReport`. Two evaluators
share one interface (`evaluate(arch, iteration)`, `counters`,
`for_stage2(candidate)`), so the search loops never care which one they
hold:

* `CandidateEvaluator` trains the candidate for a few epochs on cached
  teacher logits (knowledge distillation) and measures its validation
  accuracy. This is the real thing, and the slow part of every search.

* `SurrogateEvaluator` replaces training with an analytic accuracy proxy
  (`SurrogateModel`) that is monotone in depth and width. It is a test
  instrument: small teachers can be searched exhaustively under it, giving
  exact optima to compare the policies against.

Degenerate candidates are always scored -1 before any training happens.

The module also trains teachers (`train_teacher`) and bundles everything a
search needs about its teacher into a `TeacherContext`, which can be saved
to and loaded from a directory.
"""

import os
import sys
import copy
import json
import time
import hashlib
import itertools
import threading
import dataclasses

import numpy as np

try: # optional dependency on tqdm
    import tqdm
except ImportError:
    import distilrl.notqdm as tqdm

from distilrl import architectures
from distilrl.architectures import (
    DegeneracyClass,
    DEFAULT_MAX_FLATTEN,
    ShapeError,
    apply_removal,
    architecture_fingerprint,
    classifier_index,
    classify_degenerate,
    param_count,
    weight_layer_indices,
)
from distilrl.containers import save_tensors, load_tensors
from distilrl.networks import (
    LossMode,
    LossSpec,
    build_network,
    evaluate_accuracy,
    forward,
    load_network,
    save_network,
    train,
)
from distilrl.optimizers import NonFiniteError
from distilrl.rewards import DEGENERATE_REWARD, RewardRecord, score


TEACHER_META_FORMAT = "distilrl-teacher"


class TeacherContextError(ValueError):
    """A saved teacher context is unreadable or belongs to other data."""


# # Reports and bookkeeping


@dataclasses.dataclass(frozen=True)
class EvalReport:
    """
    The outcome of evaluating one candidate.

    Fields:

    * `accuracy` (float): validation accuracy (0 for degenerate or diverged
      candidates).
    * `params` (int): parameter count (0 if it cannot be inferred).
    * `degenerate` (`DegeneracyClass`)
    * `wall_seconds` (float)
    * `reward` (float)
    * `record` (`RewardRecord`): the full scoring record.
    * `diverged` (bool): training produced a non-finite loss; the reward is
      then -1 regardless of accuracy.
    * `cached` (bool): the accuracy came from the reward cache.
    """
    accuracy: float
    params: int
    degenerate: DegeneracyClass
    wall_seconds: float
    reward: float
    record: RewardRecord
    diverged: bool = False
    cached: bool = False

    @property
    def compression(self):
        return self.record.compression

    @property
    def constraint_satisfied(self):
        return self.record.constraint_satisfied


@dataclasses.dataclass
class EvalCounters:
    """How much work an evaluator has done; shared across stages."""
    evaluations: int = 0
    trainings: int = 0
    degenerate: int = 0
    cache_hits: int = 0
    diverged: int = 0


class RewardCache:
    """
    Measured accuracies, so a candidate that is sampled again is not
    retrained. `CandidateEvaluator` keys entries as
    `"<context>/<architecture fingerprint>"`, where the context
    (`evaluation_context`) covers the teacher and the training settings, so
    a file reused by a run with another teacher, seed or epoch budget
    misses instead of serving stale accuracies. Rewards themselves are not
    cached, because annealed constraints make them depend on the iteration.

    Parameters:

    * `path` (str, optional): a JSON file to load from (if it exists) and
      to `save` to.
    """


    def __init__(self, path=None):
        self.path = path
        self._accuracies = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            with open(path) as fp:
                self._accuracies = {k: float(v)
                                    for k, v in json.load(fp).items()}


    def __len__(self):
        return len(self._accuracies)


    def __contains__(self, fingerprint):
        return fingerprint in self._accuracies


    def get(self, fingerprint):
        with self._lock:
            return self._accuracies.get(fingerprint)


    def put(self, fingerprint, accuracy):
        with self._lock:
            self._accuracies.setdefault(fingerprint, float(accuracy))


    def save(self, path=None):
        path = path or self.path
        if path is None:
            raise ValueError("reward cache has no path to save to")
        with self._lock:
            data = dict(sorted(self._accuracies.items()))
        with open(path, 'w') as fp:
            json.dump(data, fp, indent=1)


def _safe_param_count(arch):
    try:
        return param_count(arch)
    except ShapeError:
        return 0


def dataset_fingerprint(data):
    """sha256 over a dataset's inputs and labels."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(data.inputs, dtype=np.float64).tobytes())
    digest.update(np.ascontiguousarray(data.hard_labels, dtype=np.int64)
                  .tobytes())
    return digest.hexdigest()


def evaluation_context(teacher, eval_epochs, lr, batch_size, seed,
                       max_flatten=DEFAULT_MAX_FLATTEN):
    """
    Short digest of everything other than the architecture that a
    distilled student's accuracy depends on: both data splits, the teacher
    logits and accuracy, and the student training settings.
    """
    digest = hashlib.sha256()
    digest.update(dataset_fingerprint(teacher.train).encode())
    digest.update(dataset_fingerprint(teacher.validation).encode())
    if teacher.train.teacher_logits is not None:
        digest.update(np.ascontiguousarray(teacher.train.teacher_logits,
                                           dtype=np.float64).tobytes())
    settings = [float(teacher.a_teacher), int(eval_epochs), float(lr),
                int(batch_size), int(seed), int(max_flatten)]
    digest.update(json.dumps(settings).encode())
    return digest.hexdigest()[:16]


def _log(message, verbose):
    if verbose:
        tqdm.tqdm.write(f"[distilrl.evaluation] {message}", file=sys.stderr)


# # Teachers


@dataclasses.dataclass(eq=False)
class TeacherContext:
    """
    Everything the search needs to know about its teacher.

    Fields:

    * `arch` (`Architecture`)
    * `net` (`TrainableNet`)
    * `a_teacher` (float): validation accuracy of the teacher.
    * `params_teacher` (int)
    * `train` (`Dataset`): training split, carrying the cached teacher
      logits `z`.
    * `validation` (`Dataset`): held-out split for measuring accuracy.
    * `seed` (int): the teacher's training seed.
    """
    arch: architectures.Architecture
    net: object
    a_teacher: float
    params_teacher: int
    train: object
    validation: object
    seed: int = 0


    def save(self, directory):
        """
        Write `teacher.arch`, `weights.bin`, `logits.bin` and `meta.json`
        into `directory` (created if needed). The datasets themselves are
        not written, only the logits.
        """
        os.makedirs(directory, exist_ok=True)
        architectures.save(self.arch, os.path.join(directory, "teacher.arch"))
        save_network(self.net, os.path.join(directory, "weights.bin"))
        save_tensors(os.path.join(directory, "logits.bin"),
                     {"logits": self.train.teacher_logits})
        meta = {
            'format': TEACHER_META_FORMAT,
            'a_teacher': self.a_teacher,
            'params_teacher': self.params_teacher,
            'seed': self.seed,
            'n_train': len(self.train),
            'n_validation': len(self.validation),
            'train_fingerprint': dataset_fingerprint(self.train),
        }
        with open(os.path.join(directory, "meta.json"), 'w') as fp:
            json.dump(meta, fp, indent=2)


    @classmethod
    def load(cls, directory, train_data, validation_data):
        """
        Read a context saved with `save`, attaching the cached logits to
        `train_data`. The datasets must be the same splits the teacher was
        trained with (sizes and a fingerprint of the training split are
        checked).

        Raises `TeacherContextError` if the metadata is unreadable or the
        splits differ from the ones the teacher was trained on.
        """
        meta = read_teacher_meta(directory)
        if (meta['n_train'] != len(train_data)
                or meta['n_validation'] != len(validation_data)):
            raise TeacherContextError(
                f"teacher in {directory} was trained on "
                f"{meta['n_train']}/{meta['n_validation']} samples, got "
                f"{len(train_data)}/{len(validation_data)}"
            )
        if meta['train_fingerprint'] != dataset_fingerprint(train_data):
            raise TeacherContextError(
                f"training split differs from the one the teacher in "
                f"{directory} was trained on (check seed and train limit)"
            )
        arch = architectures.load(os.path.join(directory, "teacher.arch"))
        net = load_network(arch, os.path.join(directory, "weights.bin"))
        logits = load_tensors(os.path.join(directory, "logits.bin"))["logits"]
        return cls(
            arch=arch,
            net=net,
            a_teacher=float(meta['a_teacher']),
            params_teacher=int(meta['params_teacher']),
            train=train_data.with_logits(logits.astype(np.float64)),
            validation=validation_data,
            seed=int(meta['seed']),
        )


def read_teacher_meta(directory):
    """The `meta.json` of a saved teacher context, as a dict."""
    try:
        with open(os.path.join(directory, "meta.json")) as fp:
            meta = json.load(fp)
    except (OSError, json.JSONDecodeError) as err:
        raise TeacherContextError(f"cannot read teacher metadata in "
                                  f"{directory}: {err}") from err
    if not isinstance(meta, dict) or meta.get('format') != TEACHER_META_FORMAT:
        raise TeacherContextError(f"{directory} does not hold a teacher "
                                  f"context")
    return meta


def train_teacher(
    arch,
    train_data,
    validation_data,
    epochs=10,
    seed=0,
    lr=1e-3,
    batch_size=64,
    verbose=False,
):
    """
    Train a teacher with hard labels, measure its validation accuracy and
    cache its logits over the whole training split.

    Returns a `TeacherContext`. Errors from `build_network` and `train`
    propagate.
    """
    net = build_network(arch, seed)
    train(net, train_data, LossSpec(LossMode.HARD_ONLY), epochs, lr=lr,
          batch_size=batch_size, seed=seed, verbose=verbose)
    a_teacher = evaluate_accuracy(net, validation_data)
    if a_teacher <= 0:
        raise ValueError("teacher reached zero validation accuracy")
    logits = forward(net, train_data.inputs)
    _log(f"teacher: {param_count(arch)} params, validation accuracy "
         f"{a_teacher:.4f}", verbose)
    return TeacherContext(
        arch=arch,
        net=net,
        a_teacher=a_teacher,
        params_teacher=param_count(arch),
        train=train_data.with_logits(logits),
        validation=validation_data,
        seed=seed,
    )


# # Evaluators


class _Evaluator:
    """
    Shared scoring pipeline. Subclasses provide `_accuracy(arch)` returning
    `(accuracy, diverged, cached)` for a Valid architecture.
    """


    def __init__(self, reward_cfg, params_teacher, max_flatten, counters,
                 verbose):
        self.reward_cfg = reward_cfg
        self.params_teacher = params_teacher
        self.max_flatten = max_flatten
        self.counters = counters if counters is not None else EvalCounters()
        self.verbose = verbose
        self._lock = threading.Lock()


    def _count(self, **increments):
        with self._lock:
            for name, k in increments.items():
                setattr(self.counters, name, getattr(self.counters, name) + k)


    def evaluate(self, arch, iteration):
        """
        Score `arch` at policy iteration `iteration` (counted from 0).
        Degenerate architectures are scored -1 without any training.
        """
        start = time.perf_counter()
        degenerate = classify_degenerate(arch, self.max_flatten)
        params = _safe_param_count(arch)
        self._count(evaluations=1)
        if degenerate is not DegeneracyClass.VALID:
            self._count(degenerate=1)
            accuracy, diverged, cached = 0.0, False, False
        else:
            accuracy, diverged, cached = self._accuracy(arch)
        record = score(params, self.params_teacher, accuracy, degenerate,
                       self.reward_cfg, iteration)
        if diverged:
            record = dataclasses.replace(record, accuracy=0.0,
                                         reward=DEGENERATE_REWARD,
                                         constraint_satisfied=False)
        return EvalReport(
            accuracy=record.accuracy,
            params=params,
            degenerate=degenerate,
            wall_seconds=time.perf_counter() - start,
            reward=record.reward,
            record=record,
            diverged=diverged,
            cached=cached,
        )


class CandidateEvaluator(_Evaluator):
    """
    Scores candidates by distilling them from the teacher.

    Parameters:

    * `teacher` (`TeacherContext`)
    * `reward_cfg` (`RewardConfig`)
    * `eval_epochs` (int, default 5): KD training epochs per candidate.
    * `lr`, `batch_size`: student training settings.
    * `seed` (int, default 0): students are initialized and shuffled from a
      seed derived from this and the candidate's fingerprint, so equal
      architectures get equal accuracies regardless of which rollout
      trained them.
    * `max_flatten` (int): LargeFC threshold.
    * `cache` (`RewardCache`, optional)
    * `counters` (`EvalCounters`, optional): share counters with another
      evaluator.
    * `verbose` (bool)
    """


    def __init__(
        self,
        teacher,
        reward_cfg,
        eval_epochs=5,
        lr=1e-3,
        batch_size=64,
        seed=0,
        max_flatten=DEFAULT_MAX_FLATTEN,
        cache=None,
        counters=None,
        verbose=False,
    ):
        super().__init__(reward_cfg, teacher.params_teacher, max_flatten,
                         counters, verbose)
        self.teacher = teacher
        self.eval_epochs = eval_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.cache = cache if cache is not None else RewardCache()
        self.context = evaluation_context(teacher, eval_epochs, lr,
                                          batch_size, seed, max_flatten)


    def cache_key(self, fingerprint):
        return f"{self.context}/{fingerprint}"


    def student_seed(self, fingerprint):
        digest = int(hashlib.sha256(fingerprint.encode()).hexdigest()[:8], 16)
        return int(np.random.SeedSequence([self.seed, digest])
                   .generate_state(1)[0])


    def _accuracy(self, arch):
        fingerprint = architecture_fingerprint(arch)
        key = self.cache_key(fingerprint)
        cached = self.cache.get(key)
        if cached is not None:
            self._count(cache_hits=1)
            return cached, False, True
        self._count(trainings=1)
        seed = self.student_seed(fingerprint)
        try:
            net = build_network(arch, seed, self.max_flatten)
            train(net, self.teacher.train, LossSpec(LossMode.KD_ONLY),
                  self.eval_epochs, lr=self.lr, batch_size=self.batch_size,
                  seed=seed)
        except NonFiniteError as err:
            self._count(diverged=1)
            _log(f"student {fingerprint[:12]} diverged ({err}); scoring -1",
                 True)
            return 0.0, True, False
        accuracy = evaluate_accuracy(net, self.teacher.validation)
        self.cache.put(key, accuracy)
        _log(f"student {fingerprint[:12]}: {param_count(arch)} params, "
             f"accuracy {accuracy:.4f}", self.verbose)
        return accuracy, False, False


    def for_stage2(self, candidate, reward_cfg=None):
        """
        The evaluator for the shrinkage stage. Accuracies do not depend on
        the stage, so the copy shares the cache and counters; only the
        reward configuration may change.
        """
        stage2 = copy.copy(self)
        if reward_cfg is not None:
            stage2.reward_cfg = reward_cfg
        return stage2


def evaluate_candidate(arch, teacher, reward_cfg, iteration, **options):
    """
    Score one candidate with a fresh `CandidateEvaluator` (`options` are
    passed to its constructor).
    """
    return CandidateEvaluator(teacher, reward_cfg, **options).evaluate(
        arch, iteration)


# # Surrogate


@dataclasses.dataclass(frozen=True)
class SurrogateModel:
    """
    An analytic stand-in for distillation accuracy:

        A(s) = a_teacher * (1 - alpha * depth_deficit - beta * width_deficit)

    clamped to [0, 1], where `depth_deficit` is the fraction of the
    teacher's Conv2d/Linear layers that `s` lacks and `width_deficit` is
    `1 - params(s) / params(reference)` (clamped at 0) when a reference
    (the stage-1 candidate) is set, else 0.

    Removing layers or shrinking widths never increases `A`, and
    `A(teacher) = a_teacher`.
    """
    teacher: architectures.Architecture
    a_teacher: float
    alpha: float = 0.3
    beta: float = 0.4
    reference: architectures.Architecture = None

    def depth_deficit(self, arch):
        total = len(weight_layer_indices(self.teacher))
        return 1.0 - len(weight_layer_indices(arch)) / total

    def width_deficit(self, arch):
        if self.reference is None:
            return 0.0
        return max(0.0, 1.0 - _safe_param_count(arch)
                   / param_count(self.reference))

    def accuracy(self, arch):
        value = self.a_teacher * (1.0 - self.alpha * self.depth_deficit(arch)
                                  - self.beta * self.width_deficit(arch))
        return float(np.clip(value, 0.0, 1.0))

    def with_reference(self, reference):
        return dataclasses.replace(self, reference=reference)


class SurrogateEvaluator(_Evaluator):
    """
    Scores candidates with a `SurrogateModel` instead of training.

    Parameters:

    * `model` (`SurrogateModel`)
    * `reward_cfg` (`RewardConfig`): its `a_teacher` should equal the
      model's.
    * `max_flatten` (int)
    * `counters` (`EvalCounters`, optional)
    * `verbose` (bool)
    """


    def __init__(
        self,
        model,
        reward_cfg,
        max_flatten=DEFAULT_MAX_FLATTEN,
        counters=None,
        verbose=False,
    ):
        super().__init__(reward_cfg, param_count(model.teacher), max_flatten,
                         counters, verbose)
        self.model = model


    def _accuracy(self, arch):
        return self.model.accuracy(arch), False, False


    def for_stage2(self, candidate, reward_cfg=None):
        """A copy measuring width loss against `candidate`, same counters."""
        return SurrogateEvaluator(
            self.model.with_reference(candidate),
            reward_cfg or self.reward_cfg,
            self.max_flatten,
            counters=self.counters,
            verbose=self.verbose,
        )


def surrogate_evaluate(arch, model, reward_cfg, iteration):
    """Score one candidate under `model`."""
    return SurrogateEvaluator(model, reward_cfg).evaluate(arch, iteration)


# # Search baselines


def _locked(teacher, lock_classifier):
    index = classifier_index(teacher)
    return {index} if lock_classifier and index is not None else set()


def exhaustive_best(teacher, evaluator, iteration=0, lock_classifier=True,
                    verbose=False):
    """
    Score every removal mask of `teacher` (with the classifier always kept
    when `lock_classifier`) and return `(mask, report)` for the best one.
    Ties go to the first mask in enumeration order, which visits masks
    keeping more layers first.
    """
    locked = _locked(teacher, lock_classifier)
    free = [i for i in range(len(teacher)) if i not in locked]
    best = None
    choices = itertools.product((True, False), repeat=len(free))
    for choice in tqdm.tqdm(choices, total=2 ** len(free), disable=not verbose,
                            dynamic_ncols=True):
        keep = [True] * len(teacher)
        for i, k in zip(free, choice):
            keep[i] = k
        report = evaluator.evaluate(apply_removal(teacher, keep), iteration)
        if best is None or report.reward > best[1].reward:
            best = (architectures.RemovalMask(keep), report)
    return best


def greedy_removal(teacher, evaluator, iteration=0, lock_classifier=True):
    """
    Hill-climb from the teacher: repeatedly remove the single layer whose
    removal raises the reward most, until no removal helps. Returns
    `(mask, report)`.
    """
    locked = _locked(teacher, lock_classifier)
    keep = [True] * len(teacher)
    current = evaluator.evaluate(teacher, iteration)
    while True:
        best = None
        for i in range(len(teacher)):
            if not keep[i] or i in locked:
                continue
            trial = list(keep)
            trial[i] = False
            report = evaluator.evaluate(apply_removal(teacher, trial),
                                        iteration)
            if report.reward > current.reward and (
                    best is None or report.reward > best[1].reward):
                best = (trial, report)
        if best is None:
            return architectures.RemovalMask(keep), current
        keep, current = best
