import hashlib
import json
from pathlib import Path

import pytest

import tiedlora
from tiedlora.labcli import commands
from tiedlora.labcli.config import parse_config

_VERDICTS = pytest.StashKey[list]()

# Default geometry: d=64, L=4, 4 heads, vocab 32; copy task over all 16 letters.
DESK_CONFIG = {"train": {"batch_size": 16, "max_val_examples": 128}}


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one ``(criterion, passed, detail)`` line per acceptance criterion."""
    return request.config.stash[_VERDICTS]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)


def _source_digest() -> str:
    root = Path(tiedlora.__file__).parent
    h = hashlib.sha256()
    for name in ("numkit.py", "adapter.py", "nanoformer.py", "taskgen.py", "trainkit.py"):
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_config():
    return parse_config(DESK_CONFIG)


@pytest.fixture(scope="session")
def pretrained_base(request, desk_config):
    """Base checkpoint pretrained on the task mixture, cached across sessions.

    The cache key covers the model/pretrain/task config and the library
    sources, so a code change retrains.
    """
    spec = desk_config.model_dump(include={"model", "pretrain", "task"})
    key = hashlib.sha256(json.dumps(spec, sort_keys=True).encode() + _source_digest().encode()).hexdigest()[:16]
    path = Path(request.config.cache.mkdir("tiedlora")) / f"base-{key}.ckpt"
    if not path.exists():
        commands.cmd_pretrain(desk_config, path)
    return path
