from __future__ import annotations

import json
import math
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Mapping

import numpy as np
from diot import Diot

# Caps worker threads for every parallel section of the package
THREADS_ENV = "TAIHRI_KIT_THREADS"


class KitError(Exception):
    """Base class of the domain errors raised by taihri_kit"""


class ConfigError(KitError):
    """Raised when a config file or mapping is malformatted"""


def check_fields(
    data: Mapping[str, Any],
    allowed: Iterable[str],
    required: Iterable[str] = (),
    where: str = "config",
) -> None:
    """Check the keys of a config mapping, fail-closed.

    Args:
        data: The mapping to check.
        allowed: The field names that may appear.
        required: The field names that must appear.
        where: What the mapping is, used in the error message.

    Raises:
        ConfigError: When unknown fields are present or required ones
            are missing.
    """
    if not isinstance(data, Mapping):
        raise ConfigError(
            f"\nInvalid {where}: {data!r}"
            "\nExpecting: a JSON object"
        )

    allowed = list(allowed)
    unknown = [key for key in data if key not in allowed]
    if unknown:
        raise ConfigError(
            f"\nUnknown field(s) in {where}: {', '.join(map(str, unknown))}"
            f"\nExpecting only: {', '.join(allowed)}"
        )

    missing = [key for key in required if key not in data]
    if missing:
        raise ConfigError(
            f"\nMissing field(s) in {where}: {', '.join(missing)}"
        )


FIELD_KINDS = {
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "string": lambda v: isinstance(v, str),
    "boolean": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, (list, tuple)),
    "object": lambda v: isinstance(v, Mapping),
    "null": lambda v: v is None,
}


def check_types(
    data: Mapping[str, Any],
    kinds: Mapping[str, str],
    where: str = "config",
) -> None:
    """Check the JSON kind of the fields present in a mapping.

    Args:
        data: The mapping to check.
        kinds: Field name to a kind from `FIELD_KINDS`, alternatives
            joined by `|`, e.g. `"number|null"`.
        where: What the mapping is, used in the error message.

    Raises:
        ConfigError: When a field holds a value of another kind.
    """
    for key, kind in kinds.items():
        if key not in data:
            continue
        if not any(FIELD_KINDS[k](data[key]) for k in kind.split("|")):
            raise ConfigError(
                f"\nInvalid {key} in {where}: {data[key]!r}"
                f"\nExpecting: {kind.replace('|', ' or ')}"
            )


def load_json_config(
    source: str | Path | Mapping[str, Any],
    allowed: Iterable[str],
    required: Iterable[str] = (),
    where: str | None = None,
) -> Diot:
    """Load a JSON config file (or take a mapping) and check its fields.

    Args:
        source: Path to the JSON file, or an already loaded mapping.
        allowed: The field names that may appear.
        required: The field names that must appear.
        where: Name used in error messages, defaults to the file name.

    Returns:
        The config as a Diot.
    """
    if isinstance(source, Mapping):
        data = source
        where = where or "config"
    else:
        where = where or str(source)
        try:
            data = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"\nInvalid JSON in {where}: {exc}") from None

    check_fields(data, allowed, required, where)
    return Diot(data, diot_nest=False)


def derive_seed(seed: int, *index: int) -> int:
    """Derive an independent 64-bit seed from a master seed and an index path.
    """
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *index])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def derive_rng(seed: int, *index: int) -> np.random.Generator:
    """A random stream that depends only on (seed, *index), never on
    scheduling order."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *index])
    )


def max_workers() -> int:
    """Number of worker threads allowed, from TAIHRI_KIT_THREADS"""
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            workers = int(value)
        except ValueError:
            raise ConfigError(
                f"\nInvalid {THREADS_ENV}: {value!r}"
                "\nExpecting: a positive integer"
            ) from None
        if workers < 1:
            raise ConfigError(
                f"\nInvalid {THREADS_ENV}: {value!r}"
                "\nExpecting: a positive integer"
            )
        return workers
    return os.cpu_count() or 1


def exact_mean(values: Iterable[float]) -> float:
    """Mean with a correctly rounded sum, independent of value order."""
    values = list(values)
    return math.fsum(values) / len(values)


def parse_triple(text: str, cast: type = float) -> tuple:
    """Parse `a,b,c` into a 3-tuple.

    Raises:
        ValueError: When the text does not hold exactly three numbers.
    """
    parts = [part.strip() for part in text.split(",")]
    if len(parts) != 3:
        raise ValueError(
            f"Invalid triple: {text!r}, expecting three comma-separated values"
        )
    return tuple(cast(part) for part in parts)


@contextmanager
def atomic_writer(path: str | Path) -> Iterator[IO[str]]:
    """Write a file through a temporary sibling, renamed on success.

    The target is either absent, its previous version, or complete.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(
        prefix=f".{path.name}.",
        suffix=".tmp",
        dir=path.parent,
    )
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path: str | Path, text: str) -> None:
    with atomic_writer(path) as fh:
        fh.write(text)


def write_json(path: str | Path, data: Any) -> None:
    write_text(path, json.dumps(data, indent=2) + "\n")


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> None:
    with atomic_writer(path) as fh:
        for record in records:
            fh.write(json.dumps(record, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list:
    """Read a JSONL file, skipping empty lines.

    Raises:
        ConfigError: When a line is not valid JSON.
    """
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(
                    f"\nInvalid JSON at {path}:{lineno}: {exc}"
                ) from None
    return out
