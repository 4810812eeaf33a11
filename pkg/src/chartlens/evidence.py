"""Hash-chained evidence packages with canonical serialization and replay."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from chartlens.image import ChartImage

GENESIS = "0" * 64
HASH_ALG = "sha256"
FORMAT_VERSION = 1
INLINE_CAP = 64 * 1024
ARTIFACT_KINDS = (
    "bbox_set",
    "mask_ref",
    "overlay_image_ref",
    "text_items",
    "table",
    "vote_log",
    "calibration",
    "reading",
)


class ChainBroken(ValueError):
    pass


class SchemaViolation(ValueError):
    pass


class ImageMismatch(ValueError):
    pass


class MissingTool(KeyError):
    pass


# ---------------------------------------------------------------- canonical JSON


def _canon_value(x: Any) -> Any:
    if isinstance(x, bool) or x is None or isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        if not math.isfinite(v):
            raise SchemaViolation("non-finite numbers are not representable")
        v = float(f"{v:.9g}")
        return 0.0 if v == 0 else v
    if isinstance(x, dict):
        out = {}
        for k, v in x.items():
            if not isinstance(k, str):
                raise SchemaViolation(f"non-string key {k!r}")
            out[k] = _canon_value(v)
        return out
    if isinstance(x, (list, tuple)):
        return [_canon_value(v) for v in x]
    if isinstance(x, np.ndarray):
        return _canon_value(x.tolist())
    if hasattr(x, "to_dict"):
        return _canon_value(x.to_dict())
    raise SchemaViolation(f"cannot serialize {type(x).__name__}")


def canonical(obj: Any) -> Any:
    """Plain-JSON form with floats rounded to nine significant digits."""
    return _canon_value(obj)


def canonical_bytes(obj: Any) -> bytes:
    return json.dumps(
        _canon_value(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------- items


@dataclass
class Artifact:
    """One archived output. Either an inline JSON ``payload`` or a file ``ref``.

    File artifacts keep their bytes in ``data`` until the package is saved;
    ``ref`` is always relative to the package root.
    """

    kind: str
    payload: Any = None
    ref: str | None = None
    digest: str = ""
    data: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in ARTIFACT_KINDS:
            raise SchemaViolation(f"unknown artifact kind {self.kind!r}")

    @classmethod
    def inline(cls, kind: str, payload: Any) -> "Artifact":
        payload = canonical(payload)
        raw = canonical_bytes(payload)
        if len(raw) > INLINE_CAP:
            return cls(kind, None, f"artifacts/{digest(raw)}.json", digest(raw), raw)
        return cls(kind, payload, None, digest(raw))

    @classmethod
    def file(cls, kind: str, data: bytes, ext: str) -> "Artifact":
        d = digest(data)
        return cls(kind, None, f"artifacts/{d}.{ext}", d, data)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": self.payload, "ref": self.ref, "digest": self.digest}


_ITEM_KEYS = {"id", "step", "tool", "status", "params", "summary", "artifacts", "prev_hash", "hash", "timestamp"}
_ART_KEYS = {"kind", "payload", "ref", "digest"}


@dataclass
class EvidenceItem:
    id: int
    step: int
    tool: str
    params: dict
    summary: str
    artifacts: list[Artifact] = field(default_factory=list)
    status: str = "ok"  # ok | error | rejected | vote | arbitration | finish
    prev_hash: str = GENESIS
    hash: str = ""
    timestamp: str | None = None  # recorded but outside the hash

    def hashed_fields(self) -> dict:
        return {
            "id": self.id,
            "step": self.step,
            "tool": self.tool,
            "status": self.status,
            "params": self.params,
            "summary": self.summary,
            "artifacts": [a.to_dict() for a in self.artifacts],
            "prev_hash": self.prev_hash,
        }

    def compute_hash(self) -> str:
        return digest(self.prev_hash.encode("ascii") + canonical_bytes(self.hashed_fields()))

    def to_dict(self) -> dict:
        d = self.hashed_fields()
        d["hash"] = self.hash
        d["timestamp"] = self.timestamp
        return d

    def reading(self) -> dict | None:
        for a in self.artifacts:
            if a.kind == "reading" and isinstance(a.payload, dict):
                return a.payload
        return None


@dataclass
class EvidencePackage:
    meta: dict = field(default_factory=dict)
    items: list[EvidenceItem] = field(default_factory=list)
    final: dict | None = None
    incomplete: bool = False

    def __post_init__(self) -> None:
        self.meta.setdefault("hash_alg", HASH_ALG)
        self.meta.setdefault("format_version", FORMAT_VERSION)

    @property
    def index(self) -> dict[str, list[int]]:
        idx: dict[str, list[int]] = {}
        for it in self.items:
            idx.setdefault(it.tool, []).append(it.id)
        return idx

    @property
    def head(self) -> str:
        return self.items[-1].hash if self.items else GENESIS

    def get(self, item_id: int) -> EvidenceItem:
        if not 1 <= item_id <= len(self.items):
            raise KeyError(item_id)
        return self.items[item_id - 1]

    def ids(self) -> set[int]:
        return {it.id for it in self.items}

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "items": [it.to_dict() for it in self.items],
            "index": self.index,
            "final": self.final,
            "incomplete": self.incomplete,
        }


def verify_chain(items: Iterable[EvidenceItem]) -> int | None:
    """Id of the first item whose link or digest fails, or None if intact."""
    prev = GENESIS
    for n, it in enumerate(items, start=1):
        if it.id != n or it.prev_hash != prev or it.compute_hash() != it.hash:
            return it.id if isinstance(it.id, int) else n
        prev = it.hash
    return None


def append(
    package: EvidencePackage,
    *,
    step: int,
    tool: str,
    params: dict | None = None,
    summary: str = "",
    artifacts: Iterable[Artifact] = (),
    status: str = "ok",
    timestamp: str | None = None,
) -> EvidenceItem:
    """Extend the chain by one item; refuses if the existing chain is broken."""
    bad = verify_chain(package.items)
    if bad is not None:
        raise ChainBroken(f"evidence item {bad} fails verification")
    item = EvidenceItem(
        id=len(package.items) + 1,
        step=int(step),
        tool=tool,
        params=canonical(params or {}),
        summary=summary,
        artifacts=list(artifacts),
        status=status,
        prev_hash=package.head,
        timestamp=timestamp,
    )
    item.hash = item.compute_hash()
    package.items.append(item)
    return item


# ---------------------------------------------------------------- (de)serialization


def serialize(package: EvidencePackage) -> bytes:
    return canonical_bytes(package.to_dict())


def _need(d: Any, keys: set[str], what: str) -> dict:
    if not isinstance(d, dict) or set(d) != keys:
        raise SchemaViolation(f"{what} has wrong fields")
    return d


def deserialize(data: bytes) -> EvidencePackage:
    """Parse canonical bytes; anything non-canonical or malformed is rejected."""
    try:
        raw = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise SchemaViolation(f"not valid JSON: {exc}") from exc
    _need(raw, {"meta", "items", "index", "final", "incomplete"}, "package")
    if not isinstance(raw["meta"], dict) or not isinstance(raw["items"], list) or not isinstance(raw["incomplete"], bool):
        raise SchemaViolation("package fields have wrong types")
    items = []
    try:
        for d in raw["items"]:
            _need(d, _ITEM_KEYS, "item")
            arts = []
            for a in d["artifacts"]:
                _need(a, _ART_KEYS, "artifact")
                arts.append(Artifact(a["kind"], a["payload"], a["ref"], a["digest"]))
            items.append(
                EvidenceItem(
                    id=d["id"],
                    step=d["step"],
                    tool=d["tool"],
                    params=d["params"],
                    summary=d["summary"],
                    artifacts=arts,
                    status=d["status"],
                    prev_hash=d["prev_hash"],
                    hash=d["hash"],
                    timestamp=d["timestamp"],
                )
            )
    except (TypeError, KeyError) as exc:
        raise SchemaViolation(f"malformed item: {exc}") from exc
    pkg = EvidencePackage(raw["meta"], items, raw["final"], raw["incomplete"])
    if raw["index"] != pkg.index:
        raise SchemaViolation("index disagrees with items")
    if serialize(pkg) != data:
        raise SchemaViolation("package bytes are not in canonical form")
    return pkg


def load_bytes_verified(data: bytes) -> EvidencePackage:
    pkg = deserialize(data)
    bad = verify_chain(pkg.items)
    if bad is not None:
        raise ChainBroken(f"evidence item {bad} fails verification")
    return pkg


def save(package: EvidencePackage, directory: str | Path) -> Path:
    """Write ``package.json`` plus file artifacts under ``artifacts/``."""
    root = Path(directory)
    (root / "artifacts").mkdir(parents=True, exist_ok=True)
    for it in package.items:
        for a in it.artifacts:
            if a.ref is not None and a.data is not None:
                (root / a.ref).write_bytes(a.data)
    path = root / "package.json"
    path.write_bytes(serialize(package))
    return path


def load(directory: str | Path, verify: bool = True) -> EvidencePackage:
    root = Path(directory)
    path = root / "package.json" if root.is_dir() else root
    root = path.parent
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise SchemaViolation(f"cannot read {path}: {exc}") from exc
    pkg = load_bytes_verified(data) if verify else deserialize(data)
    for it in pkg.items:
        for a in it.artifacts:
            if a.ref is None:
                continue
            f = root / a.ref
            if not f.is_file():
                raise SchemaViolation(f"artifact {a.ref} of item {it.id} is missing")
            a.data = f.read_bytes()
            if verify and digest(a.data) != a.digest:
                raise ChainBroken(f"artifact {a.ref} of item {it.id} does not match its digest")
    return pkg


# ---------------------------------------------------------------- replay


@dataclass
class ItemCheck:
    item_id: int
    tool: str
    match: bool
    diffs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "tool": self.tool, "match": self.match, "diffs": self.diffs}


@dataclass
class ReplayReport:
    checks: list[ItemCheck]
    chain_ok: bool = True
    broken_at: int | None = None

    @property
    def all_match(self) -> bool:
        return self.chain_ok and all(c.match for c in self.checks)

    @property
    def mismatched(self) -> list[int]:
        return [c.item_id for c in self.checks if not c.match]

    def to_dict(self) -> dict:
        return {
            "all_match": self.all_match,
            "chain_ok": self.chain_ok,
            "broken_at": self.broken_at,
            "checks": [c.to_dict() for c in self.checks],
        }


REPLAYABLE = ("ok", "error")


def content_digest(a: Artifact) -> str:
    """Digest of what the artifact actually holds, not what it claims."""
    if a.payload is not None or a.ref is None:
        return digest(canonical_bytes(a.payload))
    return digest(a.data) if a.data is not None else a.digest


def replay_verify(package: EvidencePackage, image: ChartImage, registry: Any) -> ReplayReport:
    """Re-run every recorded tool call in order and compare outputs.

    ``registry`` must offer ``names()``, ``new_context(image, meta)`` and
    ``replay_call(name, params, context, item_id) -> (status, summary, artifacts)``.
    Calls run against one fresh context in their original order so later
    tools see the same upstream state they saw live, independent of what
    the package claims earlier tools returned.
    """
    if image.digest() != package.meta.get("image_digest"):
        raise ImageMismatch("image digest mismatch")
    names = set(registry.names())
    for it in package.items:
        if it.status in REPLAYABLE and it.tool not in names:
            raise MissingTool(it.tool)
    broken = verify_chain(package.items)
    ctx = registry.new_context(image, package.meta)
    checks = []
    for it in package.items:
        if it.status not in REPLAYABLE:
            continue
        status, summary, artifacts = registry.replay_call(it.tool, it.params, ctx, it.id)
        diffs = []
        if status != it.status:
            diffs.append(f"status {it.status!r} != replayed {status!r}")
        if summary != it.summary:
            diffs.append(f"summary {it.summary!r} != replayed {summary!r}")
        want = [(a.kind, content_digest(a)) for a in it.artifacts]
        got = [(a.kind, a.digest) for a in artifacts]
        if want != got:
            diffs.append("artifact digests differ")
        checks.append(ItemCheck(it.id, it.tool, not diffs, diffs))
    return ReplayReport(checks, broken is None, broken)
