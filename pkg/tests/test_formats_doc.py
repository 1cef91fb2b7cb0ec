"""The worked hex examples in docs/formats.md must match what the encoders write."""
import json
import re
from pathlib import Path

import numpy as np
import pytest

from pointdistill.model import ModelConfig
from pointdistill.persistence import Checkpoint, checkpoint_size, encode_checkpoint, encode_dataset
from pointdistill.teacher import TeacherFixtureSet, encode_fixtures

DOC = Path(__file__).resolve().parents[1] / "docs" / "formats.md"


def doc_example(name: str) -> list:
    """Byte strings and ``("skip", n)`` placeholders from one fenced example block."""
    text = DOC.read_text()
    m = re.search(rf"```hex example={name}\n(.*?)```", text, re.S)
    assert m, name
    parts = []
    for line in m.group(1).splitlines():
        skip = re.match(r"<(\d+) bytes", line)
        if skip:
            parts.append(("skip", int(skip.group(1))))
            continue
        hexes = line.split("#", 1)[0].split()
        parts.append(bytes(int(h, 16) for h in hexes))
    return parts


def matches(parts, raw: bytes) -> bool:
    pos = 0
    for part in parts:
        if isinstance(part, tuple):
            pos += part[1]
            continue
        if raw[pos:pos + len(part)] != part:
            return False
        pos += len(part)
    return pos == len(raw)


def test_dataset_example():
    clouds = np.array([[[1, 0, 0], [0, 0.5, -1]], [[0, 0, 0], [2, 2, 2]]], np.float32)
    raw = encode_dataset([b"s000000000000000", b"s000000000000001"], clouds, labels=[0, 1],
                         class_names=["sphere", "box"])
    assert matches(doc_example("dataset"), raw)


def test_fixtures_example():
    fx = TeacherFixtureSet(2, 2)
    fx.add(b"s000000000000000", [[1, -1], [0.5, 0]])
    assert matches(doc_example("fixtures"), encode_fixtures(fx))


def test_checkpoint_example():
    cfg = ModelConfig.tiny()
    tensors = {"encoder.norm.gain": np.array([1.0, 2.0], np.float32), "head.fc.bias": np.zeros(1, np.float32)}
    raw = encode_checkpoint(Checkpoint(cfg, tensors, seed=7, step=3, meta={}))
    parts = doc_example("checkpoint")
    assert matches(parts, raw)
    meta_len = len(json.dumps({"config": cfg.to_dict(), "meta": {}}, sort_keys=True).encode())
    assert ("skip", meta_len) in parts
    assert len(raw) == checkpoint_size(tensors, meta_len)


@pytest.mark.parametrize("name", ["dataset", "fixtures", "checkpoint"])
def test_mutated_bytes_do_not_match(name):
    parts = doc_example(name)
    first = parts[0]
    assert not matches([bytes([first[0] ^ 1]) + first[1:]] + parts[1:], b"".join(
        p for p in parts if isinstance(p, bytes)))
