"""Undo records shared by the layers that apply driver commands."""

from dataclasses import dataclass, field

from .errors import LabError, TeardownErrors, TeardownStatus


@dataclass(frozen=True)
class Step:
    """One applied command and the driver call that undoes it.

    ``inverse`` is a tuple of ``(driver key, method name, *args)`` calls,
    run in order.
    """
    command: tuple
    inverse: tuple


@dataclass
class LayerHandle:
    layer: str
    steps: list = field(default_factory=list)
    torn_down: bool = False

    @property
    def commands(self):
        return [s.command for s in self.steps]


def unwind(handle, drivers, error_cls=TeardownErrors):
    """Run every inverse in reverse order, continuing past failures."""
    if handle.torn_down:
        return TeardownStatus.ALREADY_TORN_DOWN
    errors = []
    for step in reversed(handle.steps):
        for key, method, *args in step.inverse:
            try:
                getattr(drivers[key], method)(*args)
            except LabError as exc:
                errors.append(exc)
    handle.torn_down = True
    if errors:
        raise error_cls(errors)
    return TeardownStatus.DONE
