"""Analytic FLOP accounting for the tensor ops.

Counts are exact functions of operand shapes, so they can back assertions
like "doubling T exactly doubles the convolution cost". Scopes nest: an op
executed inside `scope("attn")` is charged to "attn", to any enclosing
scopes, and to the global total.
"""

from contextlib import contextmanager

_totals = {"": 0}
_stack = [""]
enabled = False


def add(n):
    if not enabled:
        return
    for name in _stack:
        _totals[name] = _totals.get(name, 0) + n


@contextmanager
def scope(name):
    _stack.append(name)
    try:
        yield
    finally:
        _stack.pop()


def total(name=""):
    return _totals.get(name, 0)


def reset():
    _totals.clear()
    _totals[""] = 0


@contextmanager
def counting():
    """Enable counting within the block, restoring the prior state after."""
    global enabled
    prev = enabled
    enabled = True
    try:
        yield
    finally:
        enabled = prev
