import dataclasses
import typing as t
from dataclasses import dataclass

from .errors import ConfigError

model = dataclass(frozen=True)

DAYS_PER_MONTH = 30
DAYS_PER_YEAR = 365

# A sentinel to note that a lazy property hasn't been calculated yet.
# Allows returning `None` as a valid property value.
EMPTY_PROP = object()


def lazy_prop(method):
    def _inner(self):
        attr_name = f"_{method.__name__}"

        if getattr(self, attr_name) is EMPTY_PROP:
            object.__setattr__(self, attr_name, method(self))

        return getattr(self, attr_name)

    return _inner


C = t.TypeVar("C", bound="ConfigMixin")


class ConfigMixin:
    """JSON-friendly (de)serialization for frozen config dataclasses."""

    def to_dict(self) -> t.Dict[str, t.Any]:
        out = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, ConfigMixin):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = [v.to_dict() if isinstance(v, ConfigMixin) else v for v in value]
            out[field.name] = value
        return out

    @classmethod
    def from_dict(cls: t.Type[C], data: t.Mapping[str, t.Any]) -> C:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
        return cls(**cls._coerce(dict(data)))

    @classmethod
    def _coerce(cls, data: t.Dict[str, t.Any]) -> t.Dict[str, t.Any]:
        """Hook for nested configs and tuple fields."""
        return data

    def replace(self: C, **changes) -> C:
        return dataclasses.replace(self, **changes)
