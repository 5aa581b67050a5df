"""Shared test helpers."""


def swapped_param(owner, attr):
    """Build f-wrappers that substitute a candidate tensor for one parameter.

    Returns a function mapping (loss_fn) -> (x -> loss with x in place of the
    parameter), restoring the original tensor afterwards.
    """

    def wrap(loss_fn):
        def f(x):
            original = getattr(owner, attr)
            setattr(owner, attr, x)
            try:
                return loss_fn()
            finally:
                setattr(owner, attr, original)

        return f

    return wrap
