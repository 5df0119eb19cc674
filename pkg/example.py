"""
Example of a compression search. Compresses the small `surrogate8` teacher:

* stage 1 learns which layers to remove,
* stage 2 learns how far to shrink what is left,

scoring candidates with the surrogate accuracy model, so the whole run takes
seconds. For real distillation, train a teacher first (see
`python -m distilrl train-teacher --help`) and drop the surrogate.
"""

import distilrl as dr

# STAGE 1: configure the run (the 'desk' preset runs 30 iterations per stage)
cfg = dr.with_overrides(dr.preset('desk'), {
    'run.seed': 1,
    'surrogate.enabled': True,
    'reward.constraints': ['params<=2000'],
    'reward.mode': 'Annealed',
})


# STAGE 2: compare with exhaustive search over all removal masks
teacher, evaluator = dr.make_evaluator(cfg)
mask, best = dr.exhaustive_best(teacher, evaluator)
print(f"exhaustive stage-1 optimum: reward {best.reward:.4f} "
      f"({best.params} of {dr.param_count(teacher)} params)")


# STAGE 3: run both stages; logs, checkpoints and the report go to OUT_DIR
OUT_DIR = "runs/example"
results = dr.run_search(cfg, OUT_DIR, verbose=True)

print(f"stage 1 best reward: {results['stage1'].best_report.reward:.4f}")
print(f"stage 2 best reward: {results['stage2'].best_report.reward:.4f}")
report = results['report']
print(f"student: {report.params} params, compression {report.compression:.4f}")
