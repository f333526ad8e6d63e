"""Dataset discovery, video decoding and ground-truth label loading.

A dataset lives under a root directory with one subtree per split. Clips are
either directories of image frames (e.g. UCSD ships .tif folders) or single
video files. Test clips must come with a per-frame 0/1 label file; training
clips are normal-only and carry no labels.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .errors import LabelError, ManifestError, VideoDecodeError

# Native frame rates of the benchmark datasets; extraction uses the same rate.
DATASET_FPS = {
    "umn": 25.0,
    "ucsdpeds": 10.0,
    "avenue": 15.0,
    "subway": 20.0,
}

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
VIDEO_EXTENSIONS = {".avi", ".mp4", ".mov", ".mkv", ".webm"}

MANIFEST_HEADER = ["clip_id", "split", "path", "fps", "label_path"]


@dataclass
class ClipEntry:
    clip_id: str
    split: str  # "train" | "test"
    path: Path  # frames directory or video file
    fps: float
    label_path: Optional[Path] = None

    @property
    def is_video(self) -> bool:
        return self.path.suffix.lower() in VIDEO_EXTENSIONS

    def frame_paths(self) -> list:
        """Sorted image paths for a frames-directory clip."""
        if self.is_video:
            raise ManifestError(f"clip {self.clip_id} is a video, not a frame directory")
        return sorted(
            p for p in self.path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )

    def frame_count(self) -> int:
        if self.is_video:
            cap = cv2.VideoCapture(str(self.path))
            try:
                if not cap.isOpened():
                    raise VideoDecodeError(f"cannot open video {self.path}")
                return int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
            finally:
                cap.release()
        return len(self.frame_paths())


@dataclass
class LabelTrack:
    clip_id: str
    labels: np.ndarray  # uint8, 1 = abnormal

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 1:
            raise LabelError(f"labels for {self.clip_id} must be a flat sequence")
        if not np.isin(self.labels, (0, 1)).all():
            raise LabelError(f"labels for {self.clip_id} contain values outside {{0,1}}")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class DatasetManifest:
    dataset_name: str
    clips: list = field(default_factory=list)

    def validate(self):
        ids = [c.clip_id for c in self.clips]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate clip ids: {dupes}")
        for clip in self.clips:
            if clip.split not in ("train", "test"):
                raise ManifestError(f"clip {clip.clip_id}: unknown split {clip.split!r}")
            if clip.fps <= 0:
                raise ManifestError(f"clip {clip.clip_id}: fps must be > 0, got {clip.fps}")
            if clip.split == "test" and clip.label_path is None:
                raise ManifestError(f"test clip {clip.clip_id} has no label file")
            if clip.split == "train" and clip.label_path is not None:
                raise ManifestError(
                    f"train clip {clip.clip_id} carries labels; training is normal-only"
                )
        return self

    def split_clips(self, split: str) -> list:
        return [c for c in self.clips if c.split == split]


def build_manifest(root, dataset_spec: dict) -> DatasetManifest:
    """Discover clips under ``root`` according to ``dataset_spec``.

    The spec is a mapping with keys ``name`` (required), ``fps`` (defaults to
    the known rate for the dataset name), ``train_dir``/``test_dir``
    (defaults ``train``/``test``) and ``labels_dir`` (defaults ``labels``).
    A clip is any subdirectory of a split dir containing image files, or any
    video file directly inside it. Test labels are looked up as
    ``<labels_dir>/<clip_name>.txt``.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"dataset root {root} does not exist")
    name = dataset_spec.get("name")
    if not name:
        raise ManifestError("dataset_spec requires a 'name'")
    fps = dataset_spec.get("fps")
    if fps is None:
        fps = DATASET_FPS.get(name.lower())
    if fps is None:
        raise ManifestError(f"no fps given and dataset {name!r} has no known rate")
    fps = float(fps)
    if fps <= 0:
        raise ManifestError(f"fps must be > 0, got {fps}")

    labels_dir = root / dataset_spec.get("labels_dir", "labels")
    clips = []
    for split, key, default in (("train", "train_dir", "train"), ("test", "test_dir", "test")):
        split_dir = root / dataset_spec.get(key, default)
        if not split_dir.is_dir():
            continue
        for entry in sorted(split_dir.iterdir()):
            if entry.is_dir():
                has_images = any(
                    p.suffix.lower() in IMAGE_EXTENSIONS for p in entry.iterdir()
                )
                if not has_images:
                    continue
                path = entry
            elif entry.suffix.lower() in VIDEO_EXTENSIONS:
                path = entry
            else:
                continue
            clip_name = entry.stem if entry.is_file() else entry.name
            label_path = None
            if split == "test":
                for candidate in (labels_dir / f"{clip_name}.txt", entry.parent / f"{clip_name}.txt"):
                    if candidate.is_file():
                        label_path = candidate
                        break
                if label_path is None:
                    raise ManifestError(f"test clip {clip_name} has no label file")
            clips.append(
                ClipEntry(
                    clip_id=f"{split}_{clip_name}",
                    split=split,
                    path=path,
                    fps=fps,
                    label_path=label_path,
                )
            )
    if not clips:
        raise ManifestError(f"no clips found under {root}")
    return DatasetManifest(dataset_name=name, clips=clips).validate()


def save_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for clip in manifest.clips:
            writer.writerow(
                [
                    clip.clip_id,
                    clip.split,
                    str(clip.path),
                    repr(clip.fps),
                    str(clip.label_path) if clip.label_path else "",
                ]
            )


def load_manifest(path, dataset_name: Optional[str] = None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    clips = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"bad manifest header {header!r}, expected {MANIFEST_HEADER}")
        for row in reader:
            if not row:
                continue
            clip_id, split, clip_path, fps, label_path = row
            clips.append(
                ClipEntry(
                    clip_id=clip_id,
                    split=split,
                    path=Path(clip_path),
                    fps=float(fps),
                    label_path=Path(label_path) if label_path else None,
                )
            )
    name = dataset_name or path.stem
    return DatasetManifest(dataset_name=name, clips=clips).validate()


def extract_frames(video_path, fps: float) -> list:
    """Decode ``video_path`` and return RGB frames resampled to ``fps``.

    Frames are picked by timestamp so the output rate matches the request
    regardless of the container's native rate. Decoding is deterministic.
    """
    if fps <= 0:
        raise ValueError(f"fps must be > 0, got {fps}")
    video_path = Path(video_path)
    if not video_path.is_file():
        raise VideoDecodeError(f"video {video_path} does not exist")
    cap = cv2.VideoCapture(str(video_path))
    try:
        if not cap.isOpened():
            raise VideoDecodeError(f"cannot open video {video_path}")
        native_fps = cap.get(cv2.CAP_PROP_FPS)
        if native_fps <= 0:
            native_fps = fps  # container reports no rate: pass frames through
        frames = []
        index = 0
        emitted = 0
        while True:
            grabbed = cap.grab()
            if not grabbed:
                break
            t = index / native_fps
            if t + 1e-9 >= emitted / fps:
                ok, frame = cap.retrieve()
                if not ok:
                    raise VideoDecodeError(f"failed to decode frame {index} of {video_path}")
                frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
                emitted += 1
            index += 1
        if index == 0 and cap.get(cv2.CAP_PROP_FRAME_COUNT) > 0:
            raise VideoDecodeError(f"no frames decodable from {video_path}")
        return frames
    finally:
        cap.release()


def load_labels(label_path, expected_len: int) -> LabelTrack:
    """Parse a whitespace-separated 0/1 label file of exactly ``expected_len`` bits."""
    label_path = Path(label_path)
    if not label_path.is_file():
        raise LabelError(f"label file {label_path} does not exist")
    tokens = label_path.read_text().split()
    bits = []
    for tok in tokens:
        if tok not in ("0", "1"):
            raise LabelError(f"{label_path}: token {tok!r} is not 0/1")
        bits.append(int(tok))
    if len(bits) != expected_len:
        raise LabelError(
            f"{label_path}: {len(bits)} labels but clip has {expected_len} frames"
        )
    return LabelTrack(clip_id=label_path.stem, labels=np.asarray(bits, dtype=np.uint8))


def save_labels(labels: Sequence[int], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(" ".join(str(int(b)) for b in labels) + "\n")
