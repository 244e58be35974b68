"""On-disk interchange formats for pipeline artifacts.

Caption TSV: ``image_id \\t caption`` per line. N-best TSV: ``image_id \\t
rank \\t caption \\t name=value;name=value`` with feature names sorted and
values in shortest round-trip float notation. JSON artifacts are written
with sorted keys so byte-level comparisons are meaningful. All writers go
through an atomic temp-file rename.
"""

from __future__ import annotations

import hashlib
import json

from ._binio import atomic_write_bytes
from .decoding import DecodedHypothesis, NBestList
from .errors import MalformedInput


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedInput(f"cannot read JSON file {path}: {exc}") from exc


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_captions_tsv(path, captions) -> None:
    """``captions`` maps image ids to token sequences; rows sorted by id."""
    lines = []
    for image_id in sorted(captions):
        lines.append(f"{int(image_id)}\t{' '.join(captions[image_id])}")
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_captions_tsv(path) -> dict[int, tuple[str, ...]]:
    captions: dict[int, tuple[str, ...]] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise MalformedInput(f"cannot read captions TSV {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedInput(f"{path}:{lineno}: expected image_id<TAB>caption")
        try:
            image_id = int(parts[0])
        except ValueError as exc:
            raise MalformedInput(f"{path}:{lineno}: bad image id {parts[0]!r}") from exc
        if image_id in captions:
            raise MalformedInput(f"{path}:{lineno}: duplicate image id {image_id}")
        captions[image_id] = tuple(parts[1].split())
    return captions


def _format_features(features: dict[str, float]) -> str:
    return ";".join(f"{name}={repr(float(features[name]))}" for name in sorted(features))


def _parse_features(text: str, where: str) -> dict[str, float]:
    features: dict[str, float] = {}
    for part in text.split(";"):
        if not part:
            continue
        name, sep, value = part.partition("=")
        if not sep or not name:
            raise MalformedInput(f"{where}: bad feature entry {part!r}")
        try:
            features[name] = float(value)
        except ValueError as exc:
            raise MalformedInput(f"{where}: bad feature value {part!r}") from exc
    return features


def write_nbest_tsv(path, nbests) -> None:
    """N-best lists sorted by image id; ranks start at 1."""
    lines = []
    for nb in sorted(nbests, key=lambda n: n.image_id):
        for rank, hyp in enumerate(nb.hypotheses, start=1):
            lines.append(
                f"{nb.image_id}\t{rank}\t{' '.join(hyp.tokens)}"
                f"\t{_format_features(hyp.features)}"
            )
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_nbest_tsv(path) -> list[NBestList]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise MalformedInput(f"cannot read n-best TSV {path}: {exc}") from exc
    lists: dict[int, NBestList] = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise MalformedInput(
                f"{path}:{lineno}: expected image_id<TAB>rank<TAB>caption<TAB>features"
            )
        where = f"{path}:{lineno}"
        try:
            image_id = int(parts[0])
            rank = int(parts[1])
        except ValueError as exc:
            raise MalformedInput(f"{where}: bad image id or rank") from exc
        features = _parse_features(parts[3], where)
        nb = lists.setdefault(image_id, NBestList(image_id, []))
        if rank != len(nb.hypotheses) + 1:
            raise MalformedInput(f"{where}: rank {rank} out of order for image {image_id}")
        logprob = features.get("logprob", 0.0)
        nb.hypotheses.append(
            DecodedHypothesis(tuple(parts[2].split()), logprob, features)
        )
    return [lists[i] for i in sorted(lists)]
