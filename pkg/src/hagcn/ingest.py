"""Parsing, stream derivation, batch assembly and the dataset cache.

Sequences are float64 arrays shaped [persons][frames][joints][channels].
Two source formats are supported: the line-oriented 25-joint skeleton text
format and per-frame keypoint JSON (18 keypoints, x/y plus confidence). The
cache format (magic ``HAGD``) stores a sequence count then, per sequence, a
signed 64-bit label, the four dims as u64 and the coordinates as HAGT-style
little-endian float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .graph import GraphSpec
from .tensor import Tensor

CACHE_MAGIC = b"HAGD"
STREAMS = ("joint", "bone", "joint_motion", "bone_motion")


@dataclass
class SkeletonSequence:
    coords: np.ndarray  # (M, T, V, C)
    label: int = -1
    valid_frames: int = -1  # defaults to T
    source_id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 4:
            raise ValueError("coords must be (persons, frames, joints, channels)")
        if self.valid_frames < 0:
            self.valid_frames = self.coords.shape[1]
        if self.valid_frames > self.coords.shape[1]:
            raise ValueError("valid_frames exceeds stored frames")

    def replace_coords(self, coords) -> "SkeletonSequence":
        return SkeletonSequence(coords, label=self.label,
                                valid_frames=self.valid_frames,
                                source_id=self.source_id)


# ---------------------------------------------------------------------------
# parsers


def parse_ntu_skeleton(text: str, source_id: str = "",
                       label: int = -1) -> SkeletonSequence:
    """Parse the line-oriented 25-joint skeleton text format.

    Layout: frame count; then per frame a body count and, per body, one
    metadata line, the joint count (must be 25) and 25 joint lines whose
    first three fields are x y z. At most two bodies per frame.
    """
    lines = iter(text.splitlines())

    def next_line(what):
        for raw in lines:
            if raw.strip():
                return raw.strip()
        raise FormatError(f"truncated skeleton file ({source_id or 'input'}): "
                          f"expected {what}")

    def next_int(what):
        raw = next_line(what)
        try:
            return int(raw)
        except ValueError:
            raise FormatError(f"expected {what}, got {raw!r}") from None

    num_frames = next_int("frame count")
    if num_frames < 0:
        raise FormatError("negative frame count")
    frames = []  # per frame: list of (25, 3) arrays
    max_bodies = 1
    for f in range(num_frames):
        num_bodies = next_int(f"body count for frame {f}")
        if num_bodies < 0:
            raise FormatError(f"negative body count in frame {f}")
        if num_bodies > 2:
            raise FormatError(f"too many bodies in frame {f}: {num_bodies}")
        max_bodies = max(max_bodies, num_bodies)
        bodies = []
        for b in range(num_bodies):
            next_line(f"body metadata for frame {f}")  # tracking fields, unused
            num_joints = next_int(f"joint count for frame {f}")
            if num_joints != 25:
                raise FormatError(f"expected 25 joints, got {num_joints} "
                                  f"in frame {f}")
            joints = np.zeros((25, 3), dtype=np.float64)
            for j in range(25):
                fields = next_line(f"joint {j} of frame {f}").split()
                if len(fields) < 3:
                    raise FormatError(f"joint line too short in frame {f}")
                try:
                    joints[j] = [float(fields[0]), float(fields[1]), float(fields[2])]
                except ValueError:
                    raise FormatError(f"unparseable joint coordinates in "
                                      f"frame {f}") from None
            bodies.append(joints)
        frames.append(bodies)

    coords = np.zeros((max_bodies, num_frames, 25, 3), dtype=np.float64)
    for t, bodies in enumerate(frames):
        for m, joints in enumerate(bodies):
            coords[m, t] = joints
    return SkeletonSequence(coords, label=label, valid_frames=num_frames,
                            source_id=source_id)


def parse_openpose_json(text: str, source_id: str = "",
                        label: int = -1) -> SkeletonSequence:
    """Parse per-frame keypoint JSON.

    The object holds ``data``: a list of frames, each with an optional
    ``skeleton`` list of people carrying ``pose`` (36 reals, x/y interleaved)
    and ``score`` (18 reals). Confidence becomes channel 2. Frames follow
    list order; a missing ``skeleton`` key leaves the frame zero. When a
    frame has more than two people, the two with the highest mean confidence
    are kept, most confident in slot 0. ``label_index`` overrides the label
    argument when present.
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"bad keypoint JSON ({source_id or 'input'}): {e}") from e
    if not isinstance(obj, dict) or not isinstance(obj.get("data", []), list):
        raise FormatError("keypoint JSON must be an object with a 'data' list")
    data = obj.get("data", [])
    if "label_index" in obj:
        label = int(obj["label_index"])

    num_frames = len(data)
    frames = []
    max_people = 1
    for t, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise FormatError(f"frame {t} is not an object")
        people = []
        for person in entry.get("skeleton", []):
            pose = person.get("pose", [])
            score = person.get("score", [])
            if len(pose) != 36 or len(score) != 18:
                raise FormatError(f"frame {t}: pose must hold 36 reals and "
                                  f"score 18")
            joints = np.zeros((18, 3), dtype=np.float64)
            joints[:, 0] = pose[0::2]
            joints[:, 1] = pose[1::2]
            joints[:, 2] = score
            people.append(joints)
        people.sort(key=lambda j: -float(j[:, 2].mean()))
        people = people[:2]
        max_people = max(max_people, len(people))
        frames.append(people)

    coords = np.zeros((max_people, num_frames, 18, 3), dtype=np.float64)
    for t, people in enumerate(frames):
        for m, joints in enumerate(people):
            coords[m, t] = joints
    return SkeletonSequence(coords, label=label, valid_frames=num_frames,
                            source_id=source_id)


# ---------------------------------------------------------------------------
# stream derivation


def to_bone(seq: SkeletonSequence, graph: GraphSpec) -> SkeletonSequence:
    """Bone stream: each joint minus its tree parent, roots zero.

    Only the natural tree defines parents (hub links would give joints two).
    The difference applies to every channel, confidence included.
    """
    if seq.coords.shape[2] != graph.num_joints:
        raise ValueError(f"sequence has {seq.coords.shape[2]} joints, "
                         f"graph {graph.num_joints}")
    parents = graph.parents()
    has_parent = parents >= 0
    bones = np.zeros_like(seq.coords)
    bones[:, :, has_parent] = (seq.coords[:, :, has_parent]
                               - seq.coords[:, :, parents[has_parent]])
    return seq.replace_coords(bones)


def to_motion(seq: SkeletonSequence) -> SkeletonSequence:
    """Frame-difference stream; the final valid frame's motion is zero."""
    motion = np.zeros_like(seq.coords)
    n = seq.valid_frames
    if n > 1:
        motion[:, :n - 1] = seq.coords[:, 1:n] - seq.coords[:, :n - 1]
    return seq.replace_coords(motion)


def derive_stream(seq: SkeletonSequence, stream: str,
                  graph: GraphSpec) -> SkeletonSequence:
    if stream == "joint":
        return seq
    if stream == "bone":
        return to_bone(seq, graph)
    if stream == "joint_motion":
        return to_motion(seq)
    if stream == "bone_motion":
        return to_motion(to_bone(seq, graph))
    raise ValueError(f"unknown stream {stream!r}; choose from {STREAMS}")


def augment_sequence(seq: SkeletonSequence, rng: np.random.Generator,
                     angle_deg: float = 10.0,
                     shift: float = 0.1) -> SkeletonSequence:
    """In-plane rotation and translation of the first two channels.

    One rotation angle and independent x/y offsets are drawn per sequence.
    Persons whose coordinates are entirely zero (absent) are left untouched
    so padding stays zero; remaining channels (depth or confidence) are
    never modified.
    """
    theta = np.deg2rad(rng.uniform(-angle_deg, angle_deg))
    dx = rng.uniform(-shift, shift)
    dy = rng.uniform(-shift, shift)
    cos, sin = np.cos(theta), np.sin(theta)
    out = seq.coords.copy()
    present = np.any(seq.coords != 0, axis=(1, 2, 3))
    x = seq.coords[present, :, :, 0]
    y = seq.coords[present, :, :, 1]
    out[present, :, :, 0] = cos * x - sin * y + dx
    out[present, :, :, 1] = sin * x + cos * y + dy
    return seq.replace_coords(out)


# ---------------------------------------------------------------------------
# batch assembly


def assemble_batch(seqs, graph: GraphSpec, stream: str = "joint",
                   max_frames: int = 300, max_persons: int = 2,
                   augment: str = "none", rng: np.random.Generator = None):
    """Stack sequences into a (N, M, C, T, V) Tensor plus a label vector.

    Valid frames loop-repeat to fill max_frames (and truncate beyond it);
    missing persons stay zero. Augmentation (kind 'rotate_shift') runs on the
    raw joints before stream derivation so derived streams inherit it. With
    augment='none' the result is a pure deterministic function of the inputs.
    """
    if not seqs:
        raise ValueError("assemble_batch needs at least one sequence")
    if augment not in ("none", "rotate_shift"):
        raise ValueError(f"unknown augment kind {augment!r}")
    if augment != "none" and rng is None:
        raise ValueError("augmentation needs an rng")
    channels = seqs[0].coords.shape[3]
    batch = np.zeros((len(seqs), max_persons, channels, max_frames,
                      graph.num_joints), dtype=np.float64)
    labels = np.empty(len(seqs), dtype=np.int64)
    for n, seq in enumerate(seqs):
        if seq.coords.shape[3] != channels:
            raise ValueError("mixed channel counts in one batch")
        labels[n] = seq.label
        if augment == "rotate_shift":
            seq = augment_sequence(seq, rng)
        seq = derive_stream(seq, stream, graph)
        valid = min(seq.valid_frames, seq.coords.shape[1])
        if valid == 0:
            continue
        m = min(seq.coords.shape[0], max_persons)
        idx = np.arange(max_frames) % valid
        # (M, T, V, C) gathered over frames -> (M, C, T, V)
        batch[n, :m] = seq.coords[:m, idx].transpose(0, 3, 1, 2)
    return Tensor(batch), labels


# ---------------------------------------------------------------------------
# dataset cache


def save_cache(path, seqs) -> None:
    """Write sequences (trimmed to their valid frames) as a HAGD cache."""
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<Q", len(seqs)))
        for seq in seqs:
            m, t, v, c = seq.coords.shape
            t = min(t, seq.valid_frames)
            f.write(struct.pack("<qQQQQ", int(seq.label), m, t, v, c))
            f.write(seq.coords[:, :t].astype("<f8").tobytes())


def load_cache(path):
    def read_exact(f, n):
        buf = f.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated cache {path}")
        return buf

    seqs = []
    with open(path, "rb") as f:
        if read_exact(f, 4) != CACHE_MAGIC:
            raise FormatError(f"bad cache magic in {path}")
        (count,) = struct.unpack("<Q", read_exact(f, 8))
        for i in range(count):
            label, m, t, v, c = struct.unpack("<qQQQQ", read_exact(f, 40))
            if m * v * c == 0 or m > 16 or v > 1024 or c > 64:
                raise FormatError(f"implausible sequence header in {path}")
            raw = read_exact(f, 8 * m * t * v * c)
            coords = np.frombuffer(raw, dtype="<f8").reshape(m, t, v, c)
            seqs.append(SkeletonSequence(np.array(coords), label=int(label),
                                         valid_frames=int(t),
                                         source_id=f"{path}[{i}]"))
        if f.read(1):
            raise FormatError(f"trailing bytes in cache {path}")
    return seqs


def prepare_from_manifest(manifest_path, out_path) -> int:
    """Parse every file named in a manifest into one cache; returns count.

    Manifest lines: ``relative/path label``, '#' comments allowed. Extension
    picks the parser: .skeleton for the text format, .json for keypoints.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    seqs = []
    for lineno, raw in enumerate(manifest_path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise FormatError(f"manifest line {lineno} needs 'path label'")
        rel, label_text = parts
        try:
            label = int(label_text)
        except ValueError:
            raise FormatError(f"manifest line {lineno}: bad label "
                              f"{label_text!r}") from None
        path = base / rel
        text = path.read_text()
        if path.suffix == ".skeleton":
            seq = parse_ntu_skeleton(text, source_id=rel, label=label)
        elif path.suffix == ".json":
            seq = parse_openpose_json(text, source_id=rel, label=label)
        else:
            raise FormatError(f"manifest line {lineno}: unknown extension "
                              f"{path.suffix!r}")
        seqs.append(seq)
    save_cache(out_path, seqs)
    return len(seqs)
