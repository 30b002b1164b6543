"""Analytic FLOP accounting for forward passes.

A counter is installed for the duration of a ``counting`` block; tensor
ops then report their cost into the active scope.  Scopes let routing
code separate expert-FFN work (which sparse dispatch keeps constant in
the expert count) from attention and everything else.  Gathers/scatters
and other pure data movement count as zero.
"""

import contextlib

_ACTIVE = None


class FlopCounter:
    def __init__(self):
        self.total = 0
        self.by_scope = {}
        self._stack = []

    def _add(self, n):
        self.total += n
        scope = self._stack[-1] if self._stack else "other"
        self.by_scope[scope] = self.by_scope.get(scope, 0) + n

    def scoped(self, name):
        return self.by_scope.get(name, 0)

    def report(self):
        out = {"total": self.total}
        out.update(sorted(self.by_scope.items()))
        return out


def add(n):
    if _ACTIVE is not None:
        _ACTIVE._add(n)


@contextlib.contextmanager
def counting(counter):
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = counter
    try:
        yield counter
    finally:
        _ACTIVE = prev


@contextlib.contextmanager
def scope(name):
    if _ACTIVE is None:
        yield
        return
    _ACTIVE._stack.append(name)
    try:
        yield
    finally:
        _ACTIVE._stack.pop()
