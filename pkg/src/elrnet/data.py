"""Dataset manifests, the preprocessed-video cache, and batch assembly.

A manifest is a CSV with header ``path,label,subject,split`` (the split
column may be omitted under leave-person-out).  Video paths may point to a
``.npy`` array [T,H,W,C] or [T,H,W], an ``.elrv`` tensor file, or a
directory of per-frame image files in filename order; container formats
are out of scope.

Cache format ``ELRV`` (version 1, little-endian): magic ``ELRV``, uint32
version, uint32 T, uint32 R (square spatial size), uint32 channels, uint32
dtype code (0 = float32), then T*R*R*C raw float32 values, frames-major
(row-major [T,R,R,C]).  Per video the cache holds one RGB file (normalized
frames, C = 3) and one flow file (raw displacement fields, C = 2,
T-1 frames), per rendition, keyed by manifest row index.  Writers create a
temp file and atomically rename it, so concurrent workers are safe.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .video import PreprocessedVideo, STACK_SIZE, preprocess_video, stack_indices

__all__ = [
    "ManifestEntry",
    "DatasetManifest",
    "Fold",
    "load_manifest",
    "make_folds",
    "save_elrv",
    "load_elrv",
    "load_video",
    "preprocess_manifest",
    "SampleBank",
    "make_moving_square_dataset",
    "write_synthetic_dataset",
    "PROTOCOLS",
]

PROTOCOLS = ("leave-person-out", "fixed-splits")

ELRV_MAGIC = b"ELRV"
ELRV_VERSION = 1
ELRV_FLOAT32 = 0
_ELRV_HEADER = struct.Struct("<4sIIIII")


# ---------------------------------------------------------------------------
# manifests and folds

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    subject: str
    split: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_names: tuple[str, ...]
    protocol: str

    @property
    def num_classes(self):
        return len(self.class_names)

    def labels(self):
        return np.array([e.label for e in self.entries], dtype=np.int64)


def _validate_manifest(entries, protocol):
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if not entries:
        raise ValueError("manifest is empty")
    labels = sorted({e.label for e in entries})
    if labels != list(range(len(labels))):
        raise ValueError(f"labels must be dense in [0, C), got {labels}")
    if protocol == "leave-person-out" and any(not e.subject for e in entries):
        raise ValueError("leave-person-out requires a subject id on every row")
    if protocol == "fixed-splits" and any(e.split is None for e in entries):
        raise ValueError("fixed-splits requires a split id on every row")
    return len(labels)


def load_manifest(path, protocol) -> DatasetManifest:
    """Read a manifest CSV; relative video paths resolve against the CSV's directory."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"path", "label", "subject"}
        have = set(reader.fieldnames or ())
        if not required <= have:
            raise ValueError(f"manifest header must contain {sorted(required)}, got {sorted(have)}")
        for row in reader:
            video = row["path"]
            if not os.path.isabs(video):
                video = os.path.join(base, video)
            split = row.get("split")
            entries.append(ManifestEntry(video, int(row["label"]), row["subject"],
                                         split if split else None))
    n_classes = _validate_manifest(entries, protocol)
    return DatasetManifest(tuple(entries), tuple(str(i) for i in range(n_classes)), protocol)


@dataclass(frozen=True)
class Fold:
    fold_id: str
    train: tuple[int, ...]
    test: tuple[int, ...]


def make_folds(manifest: DatasetManifest):
    """Cross-validation folds: one per subject (LOPO) or one per split id.

    Under leave-person-out, fold k holds out exactly subject k's videos;
    the test sets are disjoint and cover every video.  Under fixed splits,
    a video is tested in the fold named by its split id and trains in all
    the others.
    """
    if manifest.protocol == "leave-person-out":
        keys = [e.subject for e in manifest.entries]
        kind = "subject"
    else:
        keys = [e.split for e in manifest.entries]
        kind = "split id"
    distinct = sorted(set(keys))
    if len(distinct) < 2:
        raise ValueError(f"need at least 2 distinct {kind}s for cross-validation, "
                         f"got {distinct}")
    folds = []
    for key in distinct:
        test = tuple(i for i, k in enumerate(keys) if k == key)
        train = tuple(i for i, k in enumerate(keys) if k != key)
        folds.append(Fold(str(key), train, test))
    return folds


# ---------------------------------------------------------------------------
# elrv tensor files

def save_elrv(path, array):
    """Write [T,R,R,C] float32 data atomically (temp file + rename)."""
    array = np.asarray(array, dtype="<f4")
    if array.ndim != 4 or array.shape[1] != array.shape[2]:
        raise ValueError(f"elrv arrays must be [T,R,R,C] with square frames, got {array.shape}")
    t, r, _, c = array.shape
    header = _ELRV_HEADER.pack(ELRV_MAGIC, ELRV_VERSION, t, r, c, ELRV_FLOAT32)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(array.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_elrv(path, mmap=False):
    with open(path, "rb") as f:
        header = f.read(_ELRV_HEADER.size)
    magic, version, t, r, c, dtype_code = _ELRV_HEADER.unpack(header)
    if magic != ELRV_MAGIC:
        raise ValueError(f"{path}: not an elrv file (bad magic)")
    if version != ELRV_VERSION or dtype_code != ELRV_FLOAT32:
        raise ValueError(f"{path}: unsupported elrv version/dtype ({version}, {dtype_code})")
    shape = (t, r, r, c)
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=_ELRV_HEADER.size, shape=shape)
    with open(path, "rb") as f:
        f.seek(_ELRV_HEADER.size)
        data = np.fromfile(f, dtype="<f4", count=t * r * r * c)
    return data.reshape(shape)


# ---------------------------------------------------------------------------
# raw video loading

def _load_image_dir(path):
    from PIL import Image

    names = sorted(n for n in os.listdir(path)
                   if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")))
    if not names:
        raise ValueError(f"{path}: no image frames found")
    frames = []
    for name in names:
        with Image.open(os.path.join(path, name)) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        frames.append(arr)
    return np.stack(frames)


def load_video(path):
    """Load frames as float32 [T,H,W,C] with values in [0,1]."""
    if os.path.isdir(path):
        frames = _load_image_dir(path)
    elif path.endswith(".npy"):
        frames = np.load(path)
        if frames.dtype == np.uint8:
            frames = frames.astype(np.float32) / 255.0
        frames = frames.astype(np.float32)
    elif path.endswith(".elrv"):
        frames = np.asarray(load_elrv(path), dtype=np.float32)
    else:
        raise ValueError(f"{path}: unsupported video source (use .npy, .elrv or an image dir)")
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4:
        raise ValueError(f"{path}: expected [T,H,W,C] or [T,H,W] frames, got {frames.shape}")
    return frames


# ---------------------------------------------------------------------------
# preprocessing cache + batch assembly

def _cache_paths(cache_dir, resolution, index):
    d = os.path.join(cache_dir, resolution)
    return (os.path.join(d, f"{index:05d}.rgb.elrv"),
            os.path.join(d, f"{index:05d}.flow.elrv"))


def preprocess_manifest(manifest: DatasetManifest, cache_dir, resolution,
                        elr_shape=None, temporal_length=None, force=False):
    """Preprocess every manifest video into the cache; skips existing files."""
    os.makedirs(os.path.join(cache_dir, resolution), exist_ok=True)
    done = 0
    for i, entry in enumerate(manifest.entries):
        rgb_path, flow_path = _cache_paths(cache_dir, resolution, i)
        if not force and os.path.exists(rgb_path) and os.path.exists(flow_path):
            continue
        pre = preprocess_video(load_video(entry.path), resolution,
                               elr_shape=elr_shape, temporal_length=temporal_length)
        save_elrv(rgb_path, pre.rgb)
        save_elrv(flow_path, pre.flows)
        done += 1
    return done


class SampleBank:
    """Lazy access to one rendition's preprocessed videos and raw sample parts."""

    def __init__(self, manifest: DatasetManifest, cache_dir, resolution):
        self.manifest = manifest
        self.cache_dir = cache_dir
        self.resolution = resolution
        self.labels = manifest.labels()
        self._videos: dict[int, PreprocessedVideo] = {}

    def video(self, index) -> PreprocessedVideo:
        if index not in self._videos:
            rgb_path, flow_path = _cache_paths(self.cache_dir, self.resolution, index)
            if not (os.path.exists(rgb_path) and os.path.exists(flow_path)):
                raise FileNotFoundError(
                    f"no cached rendition for video {index} under {self.cache_dir}/"
                    f"{self.resolution}; run preprocessing first")
            self._videos[index] = PreprocessedVideo(
                load_elrv(rgb_path, mmap=True), load_elrv(flow_path, mmap=True))
        return self._videos[index]

    def n_frames(self, index):
        return self.video(index).n_frames

    def gather(self, video_indices, centers):
        """Raw (rgb [N,R,R,3], flow fields [N,11,R,R,2], labels) for given centers."""
        rgb, fields, labels = [], [], []
        for vid, center in zip(video_indices, centers):
            pre = self.video(vid)
            if not 0 <= center < pre.n_frames:
                raise ValueError(f"center {center} out of range for video {vid}")
            rgb.append(np.asarray(pre.rgb[center]))
            idx = stack_indices(min(center, pre.flows.shape[0] - 1), pre.flows.shape[0])
            fields.append(np.asarray(pre.flows[list(idx)]))
            labels.append(self.labels[vid])
        return (np.stack(rgb), np.stack(fields).reshape(len(rgb), STACK_SIZE, *rgb[0].shape[:2], 2),
                np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# synthetic motion dataset (bright square moving left or right)

def _render_square(size, x, y, side, fg, background):
    cols = np.arange(size)
    cov_x = np.clip(np.minimum(x + side, cols + 1) - np.maximum(x, cols), 0.0, 1.0)
    cov_y = np.clip(np.minimum(y + side, cols + 1) - np.maximum(y, cols), 0.0, 1.0)
    cov = np.outer(cov_y, cov_x)
    return background + cov * (fg - background)


def make_moving_square_dataset(n_videos=40, size=32, n_frames=12, n_subjects=10, seed=7):
    """Two-class videos: a bright square drifting left (label 0) or right (label 1).

    Appearance is identical across classes; only the motion carries the
    label, so the temporal stream is the informative one.  Subjects are
    assigned round-robin for leave-person-out protocols.
    """
    rng = np.random.default_rng(seed)
    side, speed, fg = 8.0, 1.5, 0.95
    travel = speed * (n_frames - 1)
    videos = []
    for i in range(n_videos):
        label = i % 2
        texture = 0.1 + 0.05 * rng.random((size, size))
        y = rng.uniform(4, size - side - 4)
        if label == 1:
            x0 = rng.uniform(1.0, size - side - travel - 1.0)
            vx = speed
        else:
            x0 = rng.uniform(travel + 1.0, size - side - 1.0)
            vx = -speed
        frames = np.empty((n_frames, size, size, 1), dtype=np.float32)
        for t in range(n_frames):
            frames[t, :, :, 0] = _render_square(size, x0 + vx * t, y, side, fg, texture)
        videos.append((frames, label, f"s{i % n_subjects:02d}"))
    return videos


def write_synthetic_dataset(root, n_videos=40, size=32, n_frames=12, n_subjects=10,
                            seed=7, test_subjects=("s08", "s09")):
    """Write the synthetic dataset as .npy files plus a manifest CSV.

    The split column marks videos of ``test_subjects`` with split id "1"
    and the rest with "0", so fixed-splits fold "1" is the held-out set.
    Returns the manifest path.
    """
    os.makedirs(root, exist_ok=True)
    rows = []
    for i, (frames, label, subject) in enumerate(
            make_moving_square_dataset(n_videos, size, n_frames, n_subjects, seed)):
        name = f"video_{i:03d}.npy"
        np.save(os.path.join(root, name), frames)
        split = "1" if subject in test_subjects else "0"
        rows.append((name, label, subject, split))
    manifest_path = os.path.join(root, "manifest.csv")
    with open(manifest_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label", "subject", "split"])
        writer.writerows(rows)
    return manifest_path
