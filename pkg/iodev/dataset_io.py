# iodev/dataset_io.py
# On-disk split format:
#   manifest.json          counts, skeleton reference, generator config hash, severity histogram
#   annotations.jsonl      one record per sample (joints only when labels are inline)
#   eval_labels.jsonl      joints of label-withheld splits; read by evaluation only
#   images/<id>.png        RGB
#   silhouettes/<id>.png   single channel, 0/255
import json
import logging
import os
from collections import Counter
from typing import Optional

import numpy as np
from PIL import Image

from control.errors import DatasetError
from skeleton.skeleton import Pose, SkeletonSpec
from synth.generator import Sample

log = logging.getLogger("data")

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
ANNOTATIONS = "annotations.jsonl"
EVAL_LABELS = "eval_labels.jsonl"


# ---------- Small file helpers ----------

def _read_json(path: str):
    """Read and parse a JSON file; any failure names the file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"missing dataset file: {path}")
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DatasetError(f"corrupt dataset file {path}: {e}")


def _read_jsonl(path: str) -> list:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except FileNotFoundError:
        raise DatasetError(f"missing dataset file: {path}")
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DatasetError(f"corrupt dataset file {path}: {e}")


def _write_jsonl(path: str, records: list):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _read_png(path: str, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode)).copy()
    except FileNotFoundError:
        raise DatasetError(f"missing dataset file: {path}")
    except OSError as e:
        raise DatasetError(f"corrupt dataset file {path}: {e}")


# ---------- Writing ----------

def write_dataset(samples: list, out_dir: str, split: str, skel: SkeletonSpec,
                  labels: str = "inline", generator: Optional[dict] = None,
                  config_hash: str = "") -> dict:
    """
    Write one split. labels: "inline" (in annotations.jsonl), "eval_only" (eval_labels.jsonl,
    which the adaptation loader never opens) or "none" (joints not written at all).
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "silhouettes"), exist_ok=True)

    if labels not in ("inline", "eval_only", "none"):
        raise DatasetError(f"labels must be inline|eval_only|none, got {labels}")
    records, withheld = [], []
    for s in samples:
        Image.fromarray(s.image).save(os.path.join(out_dir, "images", f"{s.id}.png"))
        Image.fromarray(s.silhouette.astype(np.uint8) * 255).save(
            os.path.join(out_dir, "silhouettes", f"{s.id}.png"))
        rec = {"id": s.id, "domain": s.domain, "severity": s.severity, "seed": s.seed,
               "fill": s.fill, "meta": s.meta}
        if s.pose is not None and labels != "none":
            joints = {"id": s.id, "joints": s.pose.coords.tolist(), "valid": s.pose.valid_mask.tolist()}
            if labels == "eval_only":
                withheld.append(joints)
            else:
                rec.update(joints)
        records.append(rec)

    _write_jsonl(os.path.join(out_dir, ANNOTATIONS), records)
    if labels == "eval_only":
        _write_jsonl(os.path.join(out_dir, EVAL_LABELS), withheld)

    hist = Counter(str(s.severity) for s in samples)
    manifest = {
        "format_version": FORMAT_VERSION,
        "split": split,
        "count": len(samples),
        "labels": labels,
        "skeleton": {"name": skel.name, "hash": skel.skeleton_hash(), "definition": skel.to_dict()},
        "config_hash": config_hash,
        "generator": generator or {},
        "severity_histogram": dict(sorted(hist.items())),
    }
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    log.info(f"wrote {split}: {len(samples)} samples -> {out_dir}")
    return manifest


# ---------- Reading ----------

class SplitReader:
    """
    Lazy access to a split directory.
    - labels=False: adaptation-facing; never opens eval_labels.jsonl, poses are None
    - labels=True: evaluation-facing; fails clearly if the labels are missing
    """

    def __init__(self, split_dir: str, labels: bool):
        self.dir = split_dir
        self.manifest = _read_json(os.path.join(split_dir, MANIFEST))
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported format_version in {os.path.join(split_dir, MANIFEST)}")
        self.records = _read_jsonl(os.path.join(split_dir, ANNOTATIONS))
        if len(self.records) != self.manifest["count"]:
            raise DatasetError(
                f"{os.path.join(split_dir, ANNOTATIONS)} has {len(self.records)} records, "
                f"manifest says {self.manifest['count']}")
        self.with_labels = labels
        self._labels = {}
        if labels:
            if self.manifest["labels"] == "none":
                raise DatasetError(f"split {split_dir} was written without labels")
            if self.manifest["labels"] == "eval_only":
                path = os.path.join(split_dir, EVAL_LABELS)
                if not os.path.exists(path):
                    raise DatasetError(f"evaluation labels not found: {path}")
                self._labels = {r["id"]: r for r in _read_jsonl(path)}
            else:
                self._labels = {r["id"]: r for r in self.records if "joints" in r}
            missing = [r["id"] for r in self.records if r["id"] not in self._labels]
            if missing:
                raise DatasetError(f"no joints for {len(missing)} samples in {split_dir} (first: {missing[0]})")

    @property
    def skeleton_hash(self) -> str:
        return self.manifest["skeleton"]["hash"]

    def skeleton(self) -> SkeletonSpec:
        return SkeletonSpec.from_dict(self.manifest["skeleton"]["definition"])

    def __len__(self) -> int:
        return len(self.records)

    def severities(self) -> np.ndarray:
        return np.array([r["severity"] for r in self.records])

    def load(self, i: int) -> Sample:
        r = self.records[i]
        image = _read_png(os.path.join(self.dir, "images", f"{r['id']}.png"), "RGB")
        sil = _read_png(os.path.join(self.dir, "silhouettes", f"{r['id']}.png"), "L") > 0
        pose = None
        if self.with_labels:
            lab = self._labels[r["id"]]
            pose = Pose(np.array(lab["joints"]), np.array(lab["valid"]))
        return Sample(image=image, pose=pose, silhouette=sil, domain=r["domain"],
                      severity=r["severity"], seed=r["seed"], id=r["id"],
                      fill=r.get("fill", "solid"), meta=r.get("meta", {}))


def read_dataset(split_dir: str) -> list:
    """Evaluation loader: every sample with its pose."""
    reader = SplitReader(split_dir, labels=True)
    return [reader.load(i) for i in range(len(reader))]


def read_unlabeled(split_dir: str) -> list:
    """Adaptation loader: images, silhouettes and metadata, poses left as None."""
    reader = SplitReader(split_dir, labels=False)
    return [reader.load(i) for i in range(len(reader))]


class MemorySplit:
    """SplitReader stand-in over samples already in memory."""

    def __init__(self, samples: list):
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def severities(self) -> np.ndarray:
        return np.array([s.severity for s in self.samples])

    def load(self, i: int) -> Sample:
        return self.samples[i]
