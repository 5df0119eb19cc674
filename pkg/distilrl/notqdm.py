"""
No TQDM
=======

Stand-in for `tqdm.tqdm` when tqdm is not installed. Covers what the search
loop, the training loop and the exhaustive enumeration ask of a progress
bar: wrapping an iterable, `set_postfix`, `update`, `close` and `write`.
"""

import sys

class tqdm:
    """
    Progress bar that draws nothing. Keyword options such as `total`,
    `dynamic_ncols` or `desc` are accepted and ignored.
    """
    def __init__(self, iterable=None, disable=False, **kwargs):
        self.iterable = iterable
        self.disable = disable

    def __iter__(self):
        if not self.disable:
            print("[distilrl.notqdm] install tqdm for live progress bars",
                  file=sys.stderr)
        return iter(() if self.iterable is None else self.iterable)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False

    def update(self, n=1):
        pass

    def set_postfix(self, ordered_dict=None, **kwargs):
        pass

    def close(self):
        pass

    @staticmethod
    def write(message, file=None, end="\n"):
        """Print `message` (to stdout unless `file` is given)."""
        print(message, file=file or sys.stdout, end=end)
