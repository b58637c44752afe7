"""Dataset file format: line-delimited JSON, versioned.

Line 1 is a header carrying the format tag, the generation spec, and the
seed; every following line is one utterance with its id, label tokens, and
feature rows. Serialization is canonical (sorted keys, fixed separators),
so regenerating with the same seed reproduces the file byte for byte.
Features round-trip exactly: float32 values survive the JSON float
representation unchanged.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Tuple

import numpy as np

from dynlat.errors import ConfigError
from dynlat.training import SyntheticTaskSpec, Utterance

FORMAT_TAG = "dynlat-dataset"
FORMAT_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_dataset(path, utterances: List[Utterance], spec: SyntheticTaskSpec, seed: int) -> None:
    path = Path(path)
    header = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "seed": seed,
        "n": len(utterances),
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(_dumps(header) + "\n")
        for utt in utterances:
            record = {
                "id": utt.uid,
                "labels": list(utt.labels),
                "features": [[float(v) for v in row] for row in np.asarray(utt.features)],
            }
            fh.write(_dumps(record) + "\n")


def read_dataset(path) -> Tuple[List[Utterance], dict]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT_TAG:
            raise ConfigError(f"{path}: not a {FORMAT_TAG} file")
        if header.get("version") != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported dataset version {header.get('version')}")
        utts = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            utts.append(
                Utterance(
                    uid=rec["id"],
                    features=np.asarray(rec["features"], dtype=np.float32),
                    labels=[int(x) for x in rec["labels"]],
                )
            )
    if len(utts) != header["n"]:
        raise ConfigError(f"{path}: header claims {header['n']} utterances, found {len(utts)}")
    return utts, header
