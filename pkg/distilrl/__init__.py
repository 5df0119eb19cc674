"""
Reinforcement-Learned Network Compression
=========================================

**distilrl** compresses a trained "teacher" network into a smaller
"student" in two stages. A recurrent removal policy decides which layers to
drop; a recurrent shrinkage policy then scales the kernel sizes, paddings
and widths of what is left. Both are trained with policy gradients against
a reward that trades compression against the accuracy the student reaches
when distilled from the teacher, with optional linear budgets on the
student's size.

Everything (the policies, the network engine, the optimizers) is written
in numpy. See `example.py` for a quick tour, or run `python -m distilrl
--help`.
"""

# # # Export everything

from distilrl.params        import *
from distilrl.architectures import *
from distilrl.teachers      import *
from distilrl.optimizers    import *
from distilrl.policies      import *
from distilrl.rewards       import *
from distilrl.containers    import *
from distilrl.networks      import *
from distilrl.evaluation    import *
from distilrl.datasets      import *
from distilrl.config        import *
from distilrl.search        import *
