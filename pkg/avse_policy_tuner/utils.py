import json
import os
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional

import numpy as np

from avse_policy_tuner.logging.log_types import LogType
from avse_policy_tuner.logging.tuner_error import NumericalFailureError, TunerIOError

LOCK_FILE_NAME = ".avse-tuner.lock"

# Stage keys for hierarchical seeding: master -> stage -> scene.
SEED_STAGES = {
    "scenes": 0,
    "noise": 1,
    "visual": 2,
    "init": 3,
    "pretrain": 4,
    "finetune": 5,
    "evaluate": 6,
}


def derive_seed(master_seed: int, stage: str, *counter: int) -> int:
    """
    Derive a child seed from the master seed, a named stage and an optional counter.

    Seeds are splittable: the value for a given (stage, counter) never depends on how many
    other seeds were drawn before it, so any single scene can be regenerated in isolation.

    Example
    -------
    >>> derive_seed(1234, "scenes", 7) == derive_seed(1234, "scenes", 7)
    True
    """
    if stage not in SEED_STAGES:
        raise KeyError(f"Unknown seed stage '{stage}', expected one of {sorted(SEED_STAGES)}.")
    sequence = np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=(SEED_STAGES[stage], *(int(c) for c in counter))
    )
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def write_json(path: Path, payload: Any) -> Path:
    """
    Write `payload` as a pretty-printed JSON document with sorted keys.

    Sorted keys and a trailing newline keep repeated runs byte-identical.
    """
    path = Path(path)
    try:
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise TunerIOError(f"Could not write {path}: {e}") from e
    return path


def write_json_lines(path: Path, records: Iterable[Dict[str, Any]], append: bool = False) -> Path:
    """
    Write one compact JSON object per line.
    """
    path = Path(path)
    try:
        with open(path, "a" if append else "w") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise TunerIOError(f"Could not write {path}: {e}") from e
    return path


def read_json_lines(path: Path) -> list:
    """Read a file written by `write_json_lines`."""
    path = Path(path)
    try:
        with open(path, "r") as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise TunerIOError(f"Could not read {path}: {e}") from e


def provide_lock_file(
    out_dir_arg: str = "out_dir",
    lock_name: str = LOCK_FILE_NAME,
    create_dir: bool = True,
) -> Callable[[Callable[..., Any]], Callable[..., Any]]:
    """
    Wraps the execution of a function with the creation and tear-down of a lock file
    inside the output directory that the function writes to.

    The lock is created atomically, so two commands pointed at the same output directory
    cannot run at the same time. The lock is always removed once the wrapped function
    returns or raises.

    :param out_dir_arg: Name of the keyword argument of the wrapped function that holds the
        output directory.
    :param lock_name: Name of the lock file to create inside the output directory.
    :param create_dir: If True, the output directory is created if it does not exist.
    """

    def decorator(func: Callable[..., Any]) -> Callable[..., Any]:
        @wraps(func)
        def _inner(*args, **kwargs) -> Any:
            if out_dir_arg not in kwargs:
                raise TypeError(f"{func.__name__} must be called with {out_dir_arg}=<path>.")
            out_dir = Path(kwargs[out_dir_arg])
            try:
                if create_dir:
                    out_dir.mkdir(parents=True, exist_ok=True)
                lock = out_dir / lock_name
                fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError as e:
                raise TunerIOError(
                    f"{out_dir} is locked by another command (remove {lock} if stale).",
                    log_as=LogType.FATAL_OUT_DIR_LOCKED,
                ) from e
            except OSError as e:
                raise TunerIOError(f"Could not prepare output directory {out_dir}: {e}") from e

            try:
                os.write(fd, str(os.getpid()).encode())
                os.close(fd)
                return func(*args, **kwargs)
            finally:
                lock.unlink(missing_ok=True)

        return _inner

    return decorator


def held_out(index: int) -> bool:
    """
    Scene index `index` belongs to the held-out split (every fifth scene, 80/20).

    The split keys on the scene index, not on the scene seed, so it is fixed whatever
    the master seed.
    """
    return index % 5 == 4


def ensure_finite(name: str, value: float, where: Optional[Path] = None) -> float:
    """
    Return `value` if finite, otherwise raise a `NumericalFailureError` naming it.
    """
    if not np.isfinite(value):
        raise NumericalFailureError(
            f"{name} is not finite ({value})" + (f" at {where}" if where else "")
        )
    return float(value)
