"""Training loop, evaluation, checkpoints and ablation grids."""

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from thermoloc.config import TrainConfig, train_config_from_dict, with_overrides
from thermoloc.data import MetricsReport, compute_metrics, write_metrics_report
from thermoloc.errors import (
    InvalidParameterError,
    ShapeError,
    ThermoLocError,
    TrainingDivergenceError,
)
from thermoloc.head import PoseLoss, check_finite_grads
from thermoloc.model import ThermalLocNet, import_weights
from thermoloc.preproc import preprocess
from thermoloc.quaternion import Pose

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "thermoloc-checkpoint"
CHECKPOINT_VERSION = 1

# ablation presets, (row label, config overrides)
DEPTH_GRID = [(f"Depth={d}", {"model.depth": d}) for d in range(1, 7)] + [
    ("Mask-based", {"model.depth": 6, "model.use_mask": True}),
]
BRIDGE_GRID = [
    ("Patch-First", {"model.bridge_mode": "patch_first"}),
    ("Shape-First", {"model.bridge_mode": "shape_first"}),
    ("Vint-Like", {"model.bridge_mode": "vint_like"}),
]
GRIDS = {"depth": DEPTH_GRID, "bridge": BRIDGE_GRID}


@dataclass
class FrameSet:
    """All frames of some sequences, preprocessed and stacked in memory."""

    images: torch.Tensor  # (N, 1, H, W), values in [0, 255]
    positions: torch.Tensor  # (N, 3)
    quaternions: torch.Tensor  # (N, 4), canonical
    owners: list = field(default_factory=list)  # sequence key per frame

    def __len__(self):
        return self.images.shape[0]


def build_frames(sequences, preprocess_cfg=None, dtype=torch.float32):
    images, positions, quats, owners = [], [], [], []
    for seq in sequences:
        for rec in seq.records:
            img = rec.load_image()
            if preprocess_cfg is not None:
                img = preprocess(img, preprocess_cfg)
            images.append(img)
            positions.append(rec.pose.l)
            quats.append(rec.pose.q)
            owners.append(seq.key)
    if not images:
        raise InvalidParameterError("dataset contains no frames")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"frames have differing sizes: {sorted(shapes)}")
    return FrameSet(
        torch.tensor(np.stack(images)[:, None], dtype=dtype),
        torch.tensor(np.stack(positions), dtype=dtype),
        torch.tensor(np.stack(quats), dtype=dtype),
        owners,
    )


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_model(cfg, dtype=torch.float32):
    model = ThermalLocNet(cfg.model, dropout=cfg.dropout).to(dtype)
    loss_fn = PoseLoss(cfg.beta0, cfg.gamma0).to(dtype)
    return model, loss_fn


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model, loss_fn, cfg, epoch=None):
    params = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "epoch": epoch,
        "params": params,
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "beta": float(loss_fn.beta.item()),
        "gamma": float(loss_fn.gamma.item()),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Return ``(model, loss_fn, cfg)`` rebuilt from a checkpoint file."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise InvalidParameterError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidParameterError(f"{path} is not a thermoloc checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise InvalidParameterError(f"unsupported checkpoint version {payload['version']}")
    cfg = train_config_from_dict(payload["config"])
    params = payload["params"]
    dtype = next(iter(params.values())).dtype
    model, loss_fn = build_model(cfg, dtype)
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    if expected != payload["shapes"]:
        raise ShapeError(f"checkpoint {path} does not match its own config")
    model.load_state_dict(params)
    with torch.no_grad():
        loss_fn.beta.fill_(payload["beta"])
        loss_fn.gamma.fill_(payload["gamma"])
    return model, loss_fn, cfg


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ThermalLocNet
    loss_fn: PoseLoss
    config: TrainConfig
    loss_curve: list  # epoch-mean loss per epoch
    checkpoint: Path | None = None


def _check_size(frames, cfg):
    size = tuple(frames.images.shape[-2:])
    if size != cfg.model.input_size:
        raise ShapeError(
            f"images are {size} but the model is configured for {cfg.model.input_size}"
        )


def train(cfg, sequences, out_dir=None, init_weights=None, apply_preprocess=True,
          dtype=torch.float32, epoch_callback=None):
    """Minimize the pose loss with Adam over ``cfg.epochs`` epochs.

    Writes ``checkpoint.pt`` and ``loss_curve.csv`` into ``out_dir`` when given.
    On a non-finite loss or gradient the last good state (end of the previous
    epoch) is written to ``checkpoint_last_good.pt`` and
    :class:`TrainingDivergenceError` is raised.
    """
    cfg.validate()
    frames = build_frames(sequences, cfg.preproc if apply_preprocess else None, dtype)
    _check_size(frames, cfg)
    seed_everything(cfg.seed)
    model, loss_fn = build_model(cfg, dtype)
    if init_weights is not None:
        imported = import_weights(model, init_weights)
        logger.info("imported %d tensors into the local extractor", len(imported))
    params = list(model.parameters()) + list(loss_fn.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    shuffle = torch.Generator().manual_seed(cfg.seed)
    named = list(model.named_parameters()) + list(loss_fn.named_parameters())

    out_dir = Path(out_dir) if out_dir is not None else None
    last_good = copy.deepcopy((model.state_dict(), loss_fn.state_dict()))
    curve = []
    n = len(frames)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=shuffle)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                pred = model(frames.images[idx])
                loss = loss_fn(pred, frames.positions[idx], frames.quaternions[idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergenceError(f"loss became {loss.item()}")
                optimizer.zero_grad()
                loss.backward()
                check_finite_grads(named)
            except (TrainingDivergenceError, ThermoLocError) as exc:
                ckpt = None
                if out_dir is not None:
                    model.load_state_dict(last_good[0])
                    loss_fn.load_state_dict(last_good[1])
                    ckpt = save_checkpoint(out_dir / "checkpoint_last_good.pt", model, loss_fn,
                                           cfg, epoch - 1)
                raise TrainingDivergenceError(
                    f"training diverged at epoch {epoch}: {exc}", epoch=epoch, checkpoint=ckpt
                ) from exc
            optimizer.step()
            total += loss.item() * len(idx)
        curve.append(total / n)
        last_good = copy.deepcopy((model.state_dict(), loss_fn.state_dict()))
        if epoch_callback is not None:
            epoch_callback(epoch, curve[-1], model, loss_fn)
        logger.debug("epoch %d loss %.6f", epoch, curve[-1])

    result = TrainResult(model, loss_fn, cfg, curve)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(out_dir / "checkpoint.pt", model, loss_fn, cfg,
                                            cfg.epochs)
        write_loss_curve(out_dir / "loss_curve.csv", curve)
    return result


def write_loss_curve(path, curve):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, value in enumerate(curve, start=1):
            writer.writerow([i, repr(float(value))])


# -- evaluation ----------------------------------------------------------------


@dataclass
class Evaluation:
    report: MetricsReport
    trajectories: dict  # sequence key -> (gt positions, predicted positions)


@torch.no_grad()
def predict(model, images, batch_size=16):
    model.eval()
    ls, qs = [], []
    for start in range(0, images.shape[0], batch_size):
        est = model(images[start:start + batch_size])
        ls.append(est.l)
        qs.append(est.q)
    return torch.cat(ls).double().numpy(), torch.cat(qs).double().numpy()


def evaluate(model, cfg, sequences, apply_preprocess=True):
    """Per-sequence median/mean position and rotation errors, dropout disabled."""
    if not sequences:
        raise InvalidParameterError("no sequences to evaluate")
    dtype = next(model.parameters()).dtype
    frames = build_frames(sequences, cfg.preproc if apply_preprocess else None, dtype)
    _check_size(frames, cfg)
    l_pred, q_pred = predict(model, frames.images)
    report, trajectories = {}, {}
    i = 0
    for seq in sequences:
        n = len(seq.records)
        preds = [Pose(l_pred[j], q_pred[j]) for j in range(i, i + n)]
        gts = [r.pose for r in seq.records]
        report[seq.key] = compute_metrics(preds, gts)
        trajectories[seq.key] = (np.stack([g.l for g in gts]), l_pred[i:i + n])
        i += n
    return Evaluation(MetricsReport(report), trajectories)


def evaluate_checkpoint(path, sequences, apply_preprocess=True):
    model, _, cfg = load_checkpoint(path)
    return evaluate(model, cfg, sequences, apply_preprocess)


# -- ablation ------------------------------------------------------------------


@dataclass
class AblationRow:
    name: str
    mean_pos_m: float = math.nan
    mean_rot_deg: float = math.nan
    error: str | None = None


def load_grid(spec):
    """Grid from a preset name (``depth``/``bridge``) or a list of dicts/pairs."""
    if isinstance(spec, str):
        if spec not in GRIDS:
            raise InvalidParameterError(f"unknown grid preset {spec!r}; choose from {sorted(GRIDS)}")
        return list(GRIDS[spec])
    grid = []
    for entry in spec:
        if isinstance(entry, dict):
            grid.append((entry["name"], dict(entry.get("overrides", {}))))
        else:
            name, overrides = entry
            grid.append((name, dict(overrides)))
    return grid


def ablate(base_cfg, grid, train_sequences, test_sequences, out_dir=None, apply_preprocess=True):
    """Train and evaluate each variant with the same seed and data.

    A failing variant is recorded in its row and the grid continues.
    """
    rows = []
    for name, overrides in load_grid(grid):
        try:
            cfg = with_overrides(base_cfg, overrides)
            result = train(cfg, train_sequences, apply_preprocess=apply_preprocess)
            avg = evaluate(result.model, cfg, test_sequences, apply_preprocess).report.average
            rows.append(AblationRow(name, avg.mean_pos_m, avg.mean_rot_deg))
        except Exception as exc:  # noqa: BLE001 - recorded per row
            logger.warning("variant %s failed: %s", name, exc)
            rows.append(AblationRow(name, error=f"{type(exc).__name__}: {exc}"))
    if out_dir is not None:
        write_ablation(rows, out_dir, scene=", ".join(sorted({s.scene for s in test_sequences})))
    return rows


def format_cell(row):
    if row.error is not None:
        return "failed"
    return f"{row.mean_pos_m:.2f}m,{row.mean_rot_deg:.2f}°"


def ablation_table(rows, scene="test"):
    """Markdown table with one column per variant, mean errors as ``Xm,Y°``."""
    header = "| Model | " + " | ".join(r.name for r in rows) + " |"
    rule = "|---" * (len(rows) + 1) + "|"
    body = f"| {scene} | " + " | ".join(format_cell(r) for r in rows) + " |"
    return "\n".join([header, rule, body]) + "\n"


def write_ablation(rows, out_dir, scene="test"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "mean_pos_m", "mean_rot_deg", "error"])
        for r in rows:
            writer.writerow([r.name, repr(r.mean_pos_m), repr(r.mean_rot_deg), r.error or ""])
    (out_dir / "ablation.md").write_text(ablation_table(rows, scene))
    return out_dir / "ablation.csv", out_dir / "ablation.md"


def write_evaluation(evaluation, out_dir):
    return write_metrics_report(evaluation.report, Path(out_dir) / "metrics.csv",
                                evaluation.trajectories)
