"""
Flat Parameter Layouts
======================

Both the recurrent policies and the student networks keep all of their
trainable parameters in a single flat float vector. That makes the optimizer
(see the `optimizers` module), checkpointing and finite-difference testing
trivial: they only ever see one vector.

A `ParamLayout` remembers the name, shape and offset of each named tensor
inside that vector, and hands out reshaped *views* so that model code can
still say `p['W']` instead of slicing by hand.
"""

import numpy as np


class ParamLayout:
    """
    An ordered mapping from tensor names to shapes, with offsets into a flat
    vector.

    Example:

    ```python
    layout = ParamLayout()
    layout.add('W', (4, 3))
    layout.add('b', (4,))
    theta = layout.zeros()          # shape (16,)
    p = layout.views(theta)
    p['W'][...] = 1.0               # writes through to theta
    ```
    """


    def __init__(self):
        self.shapes = {}
        self.offsets = {}
        self.size = 0


    def add(self, name, shape):
        """
        Register a tensor `name` with the given `shape` at the end of the
        layout. Names must be unique.
        """
        if name in self.shapes:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(d) for d in shape)
        self.shapes[name] = shape
        self.offsets[name] = self.size
        self.size += int(np.prod(shape, dtype=np.int64))


    def __contains__(self, name):
        return name in self.shapes


    def names(self):
        return list(self.shapes)


    def zeros(self):
        return np.zeros(self.size, dtype=np.float64)


    def views(self, flat):
        """
        Return a dict of named views into `flat` (a 1-d array of length
        `self.size`). Writing into a view writes into `flat`.
        """
        if flat.shape != (self.size,):
            raise ValueError(
                f"flat vector has shape {flat.shape}, layout needs "
                f"({self.size},)"
            )
        views = {}
        for name, shape in self.shapes.items():
            start = self.offsets[name]
            stop = start + int(np.prod(shape, dtype=np.int64))
            views[name] = flat[start:stop].reshape(shape)
        return views
