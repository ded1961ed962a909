"""Run manifests: the replay record attached to every artifact."""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

from . import __version__

__all__ = ["RunManifest", "canonical_json", "digest"]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunManifest:
    """Seed, configuration and provenance of one run.

    ``hash`` covers everything except the wall-clock timestamp, so two runs
    of the same configuration carry the same hash.  Replaying a manifest
    keeps its original timestamp, which makes the manifest file itself
    byte-identical across replays.
    """

    master_seed: int
    subcommand: str
    config: dict = field(default_factory=dict)
    approximation_notes: list = field(default_factory=list)
    tool_version: str = __version__
    timestamp: str = field(default_factory=_now)

    @property
    def config_hash(self) -> str:
        return digest(self.config)

    @property
    def hash(self) -> str:
        body = self.to_dict()
        body.pop("timestamp")
        return digest(body)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config_hash"] = self.config_hash
        return d

    def to_json(self) -> str:
        d = self.to_dict()
        d["manifest_hash"] = self.hash
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            master_seed=int(d["master_seed"]),
            subcommand=d["subcommand"],
            config=dict(d.get("config", {})),
            approximation_notes=list(d.get("approximation_notes", [])),
            tool_version=d.get("tool_version", __version__),
            timestamp=d.get("timestamp") or _now(),
        )

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
