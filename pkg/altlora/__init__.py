import hashlib
import json
from dataclasses import fields
from io import TextIOWrapper
from os import path

import numpy as np
import pyarrow.fs as fs

from .config import VERSION as __version__

# Exception


class AltloraException(Exception):
    """General AltloraException"""

    pass


class ContractError(AltloraException):
    """A precondition of an operation isn't met"""

    pass


class DimensionError(ContractError):
    """Operand shapes don't agree"""

    pass


class TokenIndexError(AltloraException, IndexError):
    """Token id or target outside the vocabulary"""

    pass


class AlphabetError(AltloraException, ValueError):
    """Text contains a character outside the toy alphabet"""

    pass


class NonFiniteError(AltloraException):
    """NaN or Inf found in a loss or gradient"""

    pass


class MissingInputError(AltloraException):
    """A prerequisite file doesn't exist"""

    pass


# Utils


def from_dict(cls, data: dict, section: str):
    """Build a config dataclass, rejecting fields it doesn't declare"""

    if not isinstance(data, dict):
        raise AltloraException(f"Error, {section} must be a mapping")

    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise AltloraException(f"Error, unknown field(s) in {section}: {', '.join(unknown)}")

    return cls(**data)


def arrays_digest(arrays: dict) -> str:
    """SHA-256 over named arrays, independent of dict insertion order"""

    digest = hashlib.sha256()
    for name in sorted(arrays):
        values = np.ascontiguousarray(arrays[name], dtype=np.float64)
        digest.update(name.encode())
        digest.update(str(values.shape).encode())
        digest.update(values.tobytes())

    return digest.hexdigest()


def file_exists(file_path: str, input_fs: fs.FileSystem = fs.LocalFileSystem()) -> bool:
    return input_fs.get_file_info(file_path).type != fs.FileType.NotFound


def write_jsonl(
    file_path: str, records: list, output_fs: fs.FileSystem = fs.LocalFileSystem()
) -> str:
    """Serialize records, one JSON object per line, keys in record order"""

    file_path = output_fs.normalize_path(file_path)
    output_fs.create_dir(path.dirname(file_path), recursive=True)
    with output_fs.open_output_stream(file_path, compression=None) as out:
        with TextIOWrapper(out, encoding="utf-8", newline="\n") as tout:
            for record in records:
                tout.write(json.dumps(record, ensure_ascii=False))
                tout.write("\n")

    return file_path
