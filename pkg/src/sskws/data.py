"""Dataset manifests: ingestion, label-deficient splitting, deterministic batches.

A manifest is a list of (id, path, label, duration) rows plus the keyword ->
index class map. Manifests serialize to UTF-8 CSV with header
``id,path,label,duration`` (LF line endings, label empty for unlabelled rows)
and the class map to a sibling text file of one keyword per line.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import CLIP_SAMPLES, IngestionError, MfccConfig, compute_mfcc, load_clip, wav_duration
from .seeding import substream

log = logging.getLogger(__name__)

LIST_FILES = ("validation_list.txt", "testing_list.txt")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    path: str
    label: int | None
    duration: float


@dataclass
class Manifest:
    rows: list[ManifestRow]
    class_map: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        n_classes = len(self.class_map)
        for row in self.rows:
            if row.id in seen:
                raise ValueError(f"duplicate manifest id {row.id!r}")
            seen.add(row.id)
            if row.label is not None and (row.label < 0 or (n_classes and row.label >= n_classes)):
                raise ValueError(f"row {row.id!r} has label {row.label} outside [0, {n_classes})")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def ids(self) -> set[str]:
        return {r.id for r in self.rows}

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("id,path,label,duration\n")
            writer = csv.writer(fh, lineterminator="\n")
            for r in self.rows:
                writer.writerow([r.id, r.path, "" if r.label is None else r.label, repr(r.duration)])

    @classmethod
    def load(cls, path: str | Path, class_map: dict[str, int] | None = None) -> "Manifest":
        rows = []
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["id", "path", "label", "duration"]:
                raise ValueError(f"{path}: unexpected manifest header {header}")
            for rec in reader:
                rid, rpath, label, duration = rec
                rows.append(ManifestRow(rid, rpath, int(label) if label else None, float(duration)))
        return cls(rows=rows, class_map=dict(class_map or {}))


def save_classes(class_map: dict[str, int], path: str | Path) -> None:
    ordered = sorted(class_map, key=class_map.get)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(ordered) + "\n")


def load_classes(path: str | Path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8") as fh:
        return {line.strip(): i for i, line in enumerate(fh) if line.strip()}


def ingest_speech_commands(root: str | Path) -> dict[str, Manifest]:
    """Build train/validation/test manifests from a Speech Commands style tree.

    Expects one folder per keyword (folders starting with "_" such as
    ``_background_noise_`` are ignored) and the two split list files naming
    validation and test clips as ``keyword/filename.wav``. Every remaining
    labelled file lands in train. The class map is the lexicographically
    sorted keyword list. Audio files are not opened here; durations are
    recorded as 1.0 s (the corpus convention) and actual length is enforced
    at load time.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")

    lists = {}
    for name in LIST_FILES:
        list_path = root / name
        if not list_path.is_file():
            raise IngestionError(f"missing split list {list_path}")
        with open(list_path, "r", encoding="utf-8") as fh:
            lists[name] = {line.strip() for line in fh if line.strip()}
    overlap = lists[LIST_FILES[0]] & lists[LIST_FILES[1]]
    if overlap:
        sample = sorted(overlap)[:3]
        raise IngestionError(f"{len(overlap)} file(s) appear in both split lists, e.g. {sample}")

    keywords = sorted(d.name for d in root.iterdir() if d.is_dir() and not d.name.startswith("_"))
    if not keywords:
        raise IngestionError(f"no keyword folders under {root}")
    class_map = {kw: i for i, kw in enumerate(keywords)}

    val_set, test_set = lists[LIST_FILES[0]], lists[LIST_FILES[1]]
    splits: dict[str, list[ManifestRow]] = {"train": [], "validation": [], "test": []}
    seen = set()
    for kw in keywords:
        files = sorted(p.name for p in (root / kw).iterdir() if p.suffix == ".wav")
        if not files:
            raise IngestionError(f"keyword folder {root / kw} contains no wav files")
        for fname in files:
            rel = f"{kw}/{fname}"
            seen.add(rel)
            row = ManifestRow(id=rel, path=rel, label=class_map[kw], duration=1.0)
            if rel in val_set:
                splits["validation"].append(row)
            elif rel in test_set:
                splits["test"].append(row)
            else:
                splits["train"].append(row)

    missing = (val_set | test_set) - seen
    if missing:
        log.warning("%d split-list entries have no file on disk (e.g. %s)", len(missing), sorted(missing)[:3])
    return {name: Manifest(rows=rows, class_map=class_map) for name, rows in splits.items()}


@dataclass(frozen=True)
class SplitSpec:
    """Label-deficient split: fraction of train set aside as unlabelled pretraining data."""

    fraction_pretrain: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 <= self.fraction_pretrain <= 1.0:
            raise ValueError("fraction_pretrain must be in [0, 1]")


def split_label_deficient(train: Manifest, spec: SplitSpec) -> tuple[Manifest, Manifest]:
    """Partition the train manifest into (pretrain, labelled), disjoint and exhaustive.

    The pretrain side gets round(fraction * N) rows with labels stripped.
    Stratified mode (default) splits each keyword at the same ratio, using
    largest-remainder allocation so the global count is met exactly;
    non-stratified shuffles globally. Deterministic per seed and independent
    of the input row order (rows are id-sorted before shuffling).
    """
    if not train.rows:
        raise ValueError("cannot split an empty manifest")
    n_total = len(train.rows)
    target = round(spec.fraction_pretrain * n_total)

    if spec.stratified:
        by_label: dict[int | None, list[ManifestRow]] = {}
        for row in train.rows:
            by_label.setdefault(row.label, []).append(row)
        groups = [sorted(v, key=lambda r: r.id) for _, v in sorted(by_label.items(), key=lambda kv: (kv[0] is None, kv[0]))]
        base = [int(spec.fraction_pretrain * len(g)) for g in groups]
        remainders = sorted(
            range(len(groups)),
            key=lambda i: (-(spec.fraction_pretrain * len(groups[i]) - base[i]), i),
        )
        take = list(base)
        shortfall = target - sum(base)
        for i in remainders * 2:  # second lap only if some groups hit capacity
            if shortfall <= 0:
                break
            if take[i] < len(groups[i]):
                take[i] += 1
                shortfall -= 1
        pretrain_rows, labelled_rows = [], []
        for gi, group in enumerate(groups):
            perm = substream(spec.seed, "split", gi).permutation(len(group))
            chosen = set(perm[: take[gi]].tolist())
            for j, row in enumerate(group):
                (pretrain_rows if j in chosen else labelled_rows).append(row)
    else:
        ordered = sorted(train.rows, key=lambda r: r.id)
        perm = substream(spec.seed, "split").permutation(n_total)
        chosen = set(perm[:target].tolist())
        pretrain_rows = [ordered[j] for j in range(n_total) if j in chosen]
        labelled_rows = [ordered[j] for j in range(n_total) if j not in chosen]

    pretrain_rows = sorted((replace(r, label=None) for r in pretrain_rows), key=lambda r: r.id)
    labelled_rows = sorted(labelled_rows, key=lambda r: r.id)
    return (
        Manifest(rows=pretrain_rows, class_map=dict(train.class_map)),
        Manifest(rows=labelled_rows, class_map=dict(train.class_map)),
    )


def segment_corpus(root: str | Path, clip_len: float = 1.0) -> Manifest:
    """Cut every WAV under root into consecutive non-overlapping clip_len segments.

    Rows carry no label; the segment index is encoded in the row id as
    ``relative/path.wav#k`` and resolved back to a sample offset at load time.
    Trailing audio shorter than clip_len is dropped. Unreadable files are
    skipped with one summary warning reporting the count.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"corpus root {root} is not a directory")
    rows = []
    skipped = 0
    for path in sorted(root.rglob("*.wav")):
        rel = path.relative_to(root).as_posix()
        try:
            duration = wav_duration(path)
        except IngestionError as exc:
            log.warning("skipping %s: %s", rel, exc)
            skipped += 1
            continue
        for k in range(int(duration / clip_len)):
            rows.append(ManifestRow(id=f"{rel}#{k}", path=rel, label=None, duration=clip_len))
    if skipped:
        log.warning("segment_corpus: skipped %d unreadable file(s) under %s", skipped, root)
    return Manifest(rows=rows, class_map={})


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of range(n), a pure function of (seed, epoch)."""
    return substream(seed, "data", epoch).permutation(n)


@dataclass
class Batch:
    features: np.ndarray  # (B, T, F) float32
    labels: np.ndarray | None
    ids: list[str]


class MfccFeatureProvider:
    """Loads a manifest row's clip and returns its (T, F) MFCC matrix.

    Features are memoized in memory; an optional on-disk cache file (see
    write_feature_cache) can preseed the memo. Row ids of the form
    ``path#k`` read the k-th clip-length window of the file.
    """

    def __init__(self, root: str | Path, mfcc: MfccConfig = MfccConfig(), cache_path: str | Path | None = None):
        self.root = Path(root)
        self.mfcc = mfcc
        self._memo: dict[str, np.ndarray] = {}
        if cache_path is not None and Path(cache_path).is_file():
            self._memo.update(read_feature_cache(cache_path))

    def __call__(self, row: ManifestRow) -> np.ndarray:
        feats = self._memo.get(row.id)
        if feats is None:
            offset = 0
            if "#" in row.id:
                offset = int(row.id.rsplit("#", 1)[1]) * CLIP_SAMPLES
            try:
                clip = load_clip(self.root / row.path, CLIP_SAMPLES, offset=offset)
            except IngestionError as exc:
                raise IngestionError(f"row {row.id!r}: {exc}") from exc
            feats = compute_mfcc(clip, self.mfcc)
            self._memo[row.id] = feats
        return feats

    def warm(self, manifest: Manifest) -> None:
        for row in manifest.rows:
            self(row)

    def snapshot(self, manifest: Manifest) -> dict[str, np.ndarray]:
        self.warm(manifest)
        return {row.id: self._memo[row.id] for row in manifest.rows}


def batches(manifest: Manifest, batch_size: int, seed: int, epoch: int, features, shuffle: bool = True):
    """Yield Batch objects covering the manifest exactly once.

    The order is a pure function of (seed, epoch); the final batch may be
    smaller. ``features`` maps a ManifestRow to a (T, F) matrix. Labels are
    stacked when every row is labelled, else None.
    """
    if not manifest.rows:
        raise ValueError("cannot iterate an empty manifest")
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = epoch_order(len(manifest.rows), seed, epoch) if shuffle else np.arange(len(manifest.rows))
    labelled = all(r.label is not None for r in manifest.rows)
    for lo in range(0, len(order), batch_size):
        rows = [manifest.rows[i] for i in order[lo : lo + batch_size]]
        feats = np.stack([features(r) for r in rows]).astype(np.float32, copy=False)
        labels = np.array([r.label for r in rows], dtype=np.int64) if labelled else None
        yield Batch(features=feats, labels=labels, ids=[r.id for r in rows])


_FEAT_MAGIC = b"SSKWFEAT"
_FEAT_VERSION = 1


def write_feature_cache(path: str | Path, items: dict[str, np.ndarray]) -> None:
    """Binary feature cache: float32 row-major (T, F) matrices keyed by row id."""
    payload = io.BytesIO()
    payload.write(struct.pack("<I", len(items)))
    for rid in sorted(items):
        arr = np.ascontiguousarray(items[rid], dtype="<f4")
        if arr.ndim != 2:
            raise ValueError(f"feature matrix for {rid!r} must be 2-D, got {arr.shape}")
        rid_b = rid.encode("utf-8")
        payload.write(struct.pack("<H", len(rid_b)))
        payload.write(rid_b)
        payload.write(struct.pack("<II", *arr.shape))
        payload.write(arr.tobytes())
    blob = payload.getvalue()
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<I", _FEAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob)))


def read_feature_cache(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != _FEAT_VERSION:
        raise ValueError(f"{path}: unsupported feature cache version {version}")
    (blob_len,) = struct.unpack_from("<Q", data, 12)
    blob = data[20 : 20 + blob_len]
    (crc,) = struct.unpack_from("<I", data, 20 + blob_len)
    if zlib.crc32(blob) != crc:
        raise ValueError(f"{path}: feature cache checksum mismatch")
    out = {}
    off = 0
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    for _ in range(count):
        (rid_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        rid = blob[off : off + rid_len].decode("utf-8")
        off += rid_len
        t, f = struct.unpack_from("<II", blob, off)
        off += 8
        n = t * f * 4
        out[rid] = np.frombuffer(blob[off : off + n], dtype="<f4").reshape(t, f).copy()
        off += n
    return out
