"""Pose-annotated sequences: loading, synthetic generation, metrics and reports.

Dataset layout::

    root/<scene>/<sequence>/poses.txt
    root/<scene>/<sequence>/images/<timestamp_ns>.png

Each line of ``poses.txt`` is ``timestamp tx ty tz qw qx qy qz`` (seconds,
meters, real part of the quaternion FIRST). Blank lines and lines starting
with ``#`` are ignored.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from thermoloc.errors import (
    DataIntegrityError,
    EmptySequenceError,
    InvalidParameterError,
    MissingAssetError,
    ParseError,
)
from thermoloc.preproc import load_png
from thermoloc.quaternion import (
    Pose,
    angular_error_deg,
    position_error_m,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_matrix,
)

POSE_FILE = "poses.txt"
IMAGE_DIR = "images"
QUAT_TOL = 1e-3
REPORT_HEADER = ["sequence", "median_pos_m", "mean_pos_m", "median_rot_deg", "mean_rot_deg"]


@dataclass
class TrajectoryRecord:
    timestamp: float
    image_ref: Path
    pose: Pose

    def load_image(self):
        return load_png(self.image_ref)


@dataclass
class Sequence:
    scene: str
    name: str
    records: list

    @property
    def key(self):
        return f"{self.scene}/{self.name}"

    def __len__(self):
        return len(self.records)


@dataclass
class DatasetSplit:
    train_sequences: list
    test_sequences: list

    def __post_init__(self):
        train = {s.key for s in self.train_sequences}
        test = {s.key for s in self.test_sequences}
        if train & test:
            raise InvalidParameterError(f"sequences in both splits: {sorted(train & test)}")


def image_name(timestamp):
    return f"{int(round(timestamp * 1e9))}.png"


def parse_pose_file(path):
    """Parse ``poses.txt`` into ``[(timestamp, Pose), ...]``."""
    path = Path(path)
    rows = []
    last_t = -math.inf
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 8:
            raise ParseError(f"expected 8 fields, got {len(parts)}", path, lineno)
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite value", path, lineno)
        t, q = values[0], np.array(values[4:])
        if t <= last_t:
            raise DataIntegrityError(f"{path}:{lineno}: timestamps must be strictly increasing")
        if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
            raise DataIntegrityError(
                f"{path}:{lineno}: quaternion norm {np.linalg.norm(q):.6f} is not unit"
            )
        rows.append((t, Pose(values[1:4], q)))
        last_t = t
    if not rows:
        raise EmptySequenceError(f"{path}: no pose records")
    return rows


def load_sequence(seq_dir, scene=None):
    seq_dir = Path(seq_dir)
    records = []
    for t, pose in parse_pose_file(seq_dir / POSE_FILE):
        ref = seq_dir / IMAGE_DIR / image_name(t)
        if not ref.is_file():
            raise MissingAssetError(f"missing image for t={t}: {ref}")
        records.append(TrajectoryRecord(t, ref, pose))
    return Sequence(scene or seq_dir.parent.name, seq_dir.name, records)


def load_dataset(root):
    """Load every ``root/<scene>/<sequence>`` directory, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise MissingAssetError(f"dataset root does not exist: {root}")
    seq_dirs = sorted(p.parent for p in root.glob(f"*/*/{POSE_FILE}"))
    if not seq_dirs:
        raise EmptySequenceError(f"no <scene>/<sequence>/{POSE_FILE} found under {root}")
    return [load_sequence(d) for d in seq_dirs]


def split_dataset(sequences, test_names=None):
    """Default split: within each scene the last sequence (by name) is the test set.

    A scene with a single sequence contributes only training data. With
    ``test_names`` (sequence names or ``scene/sequence`` keys), exactly those
    are held out.
    """
    if test_names is not None:
        wanted = set(test_names)
        test = [s for s in sequences if s.name in wanted or s.key in wanted]
        train = [s for s in sequences if s not in test]
        return DatasetSplit(train, test)
    by_scene = {}
    for seq in sequences:
        by_scene.setdefault(seq.scene, []).append(seq)
    train, test = [], []
    for scene in sorted(by_scene):
        seqs = sorted(by_scene[scene], key=lambda s: s.name)
        if len(seqs) == 1:
            train.extend(seqs)
        else:
            train.extend(seqs[:-1])
            test.append(seqs[-1])
    return DatasetSplit(train, test)


def write_sequence(seq_dir, timestamps, images, poses):
    """Write images (uint8 arrays) and ``poses.txt`` for one sequence."""
    seq_dir = Path(seq_dir)
    (seq_dir / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    lines = []
    for t, img, pose in zip(timestamps, images, poses):
        Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(
            seq_dir / IMAGE_DIR / image_name(t))
        lines.append(" ".join(repr(float(v)) for v in [t, *pose.l, *pose.q]))
    (seq_dir / POSE_FILE).write_text("\n".join(lines) + "\n")


# -- synthetic scenes --------------------------------------------------------

WALL_DEPTH = 4.0


@dataclass
class SyntheticScene:
    """Textured wall at ``z = WALL_DEPTH`` with warm landmark blobs."""

    gratings: np.ndarray   # (K, 4): direction x, direction y, wavelength, phase
    amplitudes: np.ndarray  # (K,)
    landmarks: np.ndarray   # (M, 4): x, y, radius, intensity

    @classmethod
    def random(cls, rng, n_gratings=6, n_landmarks=12):
        theta = rng.uniform(0, np.pi, n_gratings)
        gratings = np.stack([
            np.cos(theta), np.sin(theta),
            rng.uniform(0.4, 2.0, n_gratings),
            rng.uniform(0, 2 * np.pi, n_gratings),
        ], axis=1)
        amplitudes = rng.uniform(10.0, 25.0, n_gratings)
        landmarks = np.stack([
            rng.uniform(-3.0, 3.0, n_landmarks),
            rng.uniform(-3.0, 3.0, n_landmarks),
            rng.uniform(0.1, 0.35, n_landmarks),
            rng.uniform(-60.0, 60.0, n_landmarks),
        ], axis=1)
        return cls(gratings, amplitudes, landmarks)

    def render(self, pose, image_size):
        """Pinhole view of the wall from ``pose`` (camera-to-world), uint8 image."""
        h, w = image_size
        f = float(max(h, w))
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        rays = np.stack([(xs - (w - 1) / 2) / f, (ys - (h - 1) / 2) / f, np.ones_like(xs)], -1)
        rays = rays @ quat_to_matrix(pose.q).T
        dz = rays[..., 2]
        hit = dz > 1e-6
        depth = np.where(hit, (WALL_DEPTH - pose.l[2]) / np.where(hit, dz, 1.0), 0.0)
        px = pose.l[0] + depth * rays[..., 0]
        py = pose.l[1] + depth * rays[..., 1]
        value = np.full((h, w), 110.0) + 8.0 * py
        for (dx, dy, wavelength, phase), amp in zip(self.gratings, self.amplitudes):
            value += amp * np.sin(2 * np.pi * (dx * px + dy * py) / wavelength + phase)
        for lx, ly, radius, heat in self.landmarks:
            value += heat * np.exp(-((px - lx) ** 2 + (py - ly) ** 2) / (2 * radius**2))
        value = np.where(hit, value, 20.0)
        return np.clip(np.rint(value), 0, 255).astype(np.uint8)


def _smooth_signal(rng, t, amplitude, n_terms=3):
    out = np.zeros_like(t)
    for k in range(1, n_terms + 1):
        a = rng.uniform(-amplitude, amplitude) / k
        phase = rng.uniform(0, 2 * np.pi)
        out += a * np.sin(2 * np.pi * k * 0.5 * t + phase)
    return out


def synth_trajectory(rng, n_frames):
    """Smooth poses along ``t = i / n_frames``; rotations stay within ~25 deg."""
    t = np.arange(n_frames, dtype=np.float64) / n_frames
    pos = np.stack([_smooth_signal(rng, t, 1.2), _smooth_signal(rng, t, 0.8),
                    _smooth_signal(rng, t, 0.5)], axis=1)
    yaw = _smooth_signal(rng, t, np.radians(15))
    pitch = _smooth_signal(rng, t, np.radians(10))
    roll = _smooth_signal(rng, t, np.radians(8))
    poses = []
    for i in range(n_frames):
        q = quat_multiply(quat_from_axis_angle([0, 1, 0], yaw[i]),
                          quat_multiply(quat_from_axis_angle([1, 0, 0], pitch[i]),
                                        quat_from_axis_angle([0, 0, 1], roll[i])))
        poses.append(Pose(pos[i], q))
    return poses


def synth_scene_generate(seed, n_frames, image_size=(64, 64)):
    """Deterministic ``[(uint8 image, Pose), ...]`` along a smooth random trajectory."""
    if n_frames < 1:
        raise InvalidParameterError(f"n_frames must be >= 1, got {n_frames}")
    rng = np.random.default_rng(seed)
    scene = SyntheticScene.random(rng)
    poses = synth_trajectory(rng, n_frames)
    return [(scene.render(p, image_size), p) for p in poses]


def write_synthetic_dataset(root, seed, n_frames, image_size=(64, 64), holdout_every=None,
                            scene="synth", frame_period=0.1):
    """Write a synthetic scene to ``root/<scene>/...``.

    Without ``holdout_every`` a single sequence ``seq1`` is written. With it,
    every ``holdout_every``-th frame goes to ``seq2`` (test) and the rest to
    ``seq1`` (train); both share one trajectory and texture.
    """
    frames = synth_scene_generate(seed, n_frames, image_size)
    groups = {"seq1": []}
    for i, (img, pose) in enumerate(frames):
        name = "seq2" if holdout_every and i % holdout_every == holdout_every - 1 else "seq1"
        groups.setdefault(name, []).append((i * frame_period, img, pose))
    for name, items in groups.items():
        if items:
            ts, imgs, poses = zip(*items)
            write_sequence(Path(root) / scene / name, ts, imgs, poses)
    return Path(root)


# -- metrics -----------------------------------------------------------------


@dataclass
class SequenceMetrics:
    median_pos_m: float
    mean_pos_m: float
    median_rot_deg: float
    mean_rot_deg: float
    pos_errors: np.ndarray = field(default=None, repr=False, compare=False)
    rot_errors: np.ndarray = field(default=None, repr=False, compare=False)

    def row(self):
        return [self.median_pos_m, self.mean_pos_m, self.median_rot_deg, self.mean_rot_deg]


@dataclass
class MetricsReport:
    sequences: dict  # name -> SequenceMetrics

    @property
    def average(self):
        rows = np.array([m.row() for m in self.sequences.values()])
        return SequenceMetrics(*(float(v) for v in rows.mean(axis=0)))

    def __eq__(self, other):
        if not isinstance(other, MetricsReport) or list(self.sequences) != list(other.sequences):
            return False
        return all(self.sequences[k].row() == other.sequences[k].row() for k in self.sequences)


def compute_metrics(preds, gts):
    """Per-frame position/rotation errors summarized by median and mean."""
    if len(preds) != len(gts):
        raise InvalidParameterError(f"{len(preds)} predictions for {len(gts)} ground-truth poses")
    if not preds:
        raise InvalidParameterError("at least one pose is required")
    pos = np.array([float(position_error_m(p.l, g.l)) for p, g in zip(preds, gts)])
    rot = np.array([float(angular_error_deg(p.q, g.q)) for p, g in zip(preds, gts)])
    return SequenceMetrics(float(np.median(pos)), float(np.mean(pos)),
                           float(np.median(rot)), float(np.mean(rot)), pos, rot)


def write_metrics_report(report, path, trajectories=None):
    """Write the CSV report; with ``trajectories`` also one overlay plot per sequence.

    ``trajectories`` maps sequence name to ``(gt_positions, pred_positions)``
    arrays of shape ``(N, 3)``. Returns the list of written paths.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for name, m in report.sequences.items():
            writer.writerow([name, *(repr(float(v)) for v in m.row())])
        writer.writerow(["average", *(repr(float(v)) for v in report.average.row())])
    written = [path]
    for name, (gt, pred) in (trajectories or {}).items():
        plot_path = path.with_name(f"{path.stem}_{name.replace('/', '_')}_trajectory.png")
        plot_trajectory(gt, pred, plot_path, title=name)
        written.append(plot_path)
    return written


def read_metrics_report(path):
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_HEADER:
            raise ParseError(f"unexpected header {header}", path, 1)
        sequences = {}
        for row in reader:
            if row[0] == "average":
                continue
            sequences[row[0]] = SequenceMetrics(*(float(v) for v in row[1:5]))
    return MetricsReport(sequences)


def plot_trajectory(gt, pred, path, title=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    gt, pred = np.asarray(gt), np.asarray(pred)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt[:, 0], gt[:, 1], "k-", label="ground truth")
    ax.plot(pred[:, 0], pred[:, 1], "r-", label="prediction")
    ax.plot(gt[[0, -1], 0], gt[[0, -1], 1], "k*", markersize=10)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)
