"""Cascade model, training step, NMS-free inference and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, pad_to_stride
from .box_decoder import BoxStage
from .config import LossConfig, ModelConfig, OptimConfig, RunConfig, dump_config, parse_config_text
from .errors import CheckpointError, ConfigConflictError, NumericError
from .geometry import denormalize_keypoints
from .keypoint_decoder import KeypointStage, part_division
from .matching import Target, stage_loss
from .rle_flow import CouplingFlow

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class StagePrediction:
    boxes: torch.Tensor           # (B, N, 4) image pixels
    logits: torch.Tensor          # (B, N)
    mu: torch.Tensor              # (B, N, K, 2) box-normalised
    sigma: torch.Tensor           # (B, N, K, 2)
    pose_boxes: torch.Tensor      # boxes the keypoints are expressed in
    attention_maps: torch.Tensor  # (B, N, M, 28, 28)
    instance_attention: torch.Tensor
    part_attention: torch.Tensor


class PoseModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.groups = part_division(cfg.scheme, cfg.part_groups, cfg.num_keypoints)
        M = len(self.groups)
        self.backbone = Backbone(cfg.hidden_dim)
        # proposals as image-relative corners, all starting as the whole image
        self.proposal_boxes = nn.Parameter(torch.tensor([[0.0, 0.0, 1.0, 1.0]]).repeat(cfg.num_queries, 1))
        self.instance_queries = nn.Parameter(torch.randn(cfg.num_queries, cfg.hidden_dim) * 0.02)
        self.part_queries = nn.Parameter(torch.randn(M, cfg.part_dim) * 0.02)
        self.box_stages = nn.ModuleList(
            BoxStage(cfg.hidden_dim, cfg.num_heads, cfg.dynamic_dim, cfg.box_pool_size, cfg.prior_prob,
                     cfg.box_sampling_ratio)
            for _ in range(cfg.num_stages)
        )
        self.pose_stages = nn.ModuleList(
            KeypointStage(self.groups, cfg.hidden_dim, cfg.part_conv_dim, cfg.part_dim, cfg.part_heads,
                          cfg.pose_pool_size, cfg.part_update, cfg.hidden_dim, cfg.pose_sampling_ratio)
            for _ in range(cfg.num_stages)
        )
        self.flow = CouplingFlow(cfg.flow_layers, cfg.flow_hidden, cfg.flow_base)
        self.register_buffer("pixel_mean", torch.tensor(cfg.pixel_mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(cfg.pixel_std).view(1, 3, 1, 1), persistent=False)

    @property
    def num_parts(self) -> int:
        return len(self.groups)

    def preprocess(self, images: torch.Tensor) -> torch.Tensor:
        """Raw ``(B, 3, H, W)`` pixel values in [0, 255] -> normalized, padded to a multiple of 32."""
        return pad_to_stride((images - self.pixel_mean) / self.pixel_std)

    def forward(self, images: torch.Tensor, image_sizes: torch.Tensor) -> list[StagePrediction]:
        """Returns one prediction per cascade stage; the last is the final output."""
        cfg = self.cfg
        x = self.preprocess(images.to(self.pixel_mean.dtype))
        pyramid = self.backbone(x)
        B = images.shape[0]
        sizes = image_sizes.to(x.dtype)
        whwh = torch.stack([sizes[:, 1], sizes[:, 0], sizes[:, 1], sizes[:, 0]], -1)
        boxes = self.proposal_boxes[None] * whwh[:, None]
        q_inst = self.instance_queries[None].expand(B, -1, -1)
        q_part = self.part_queries[None, None].expand(B, cfg.num_queries, -1, -1)
        serial = cfg.iteration == "serial"
        outputs = []
        for box_stage, pose_stage in zip(self.box_stages, self.pose_stages):
            box_out = box_stage(pyramid, boxes, q_inst, image_sizes)
            q_inst = box_out.queries
            pose_boxes = box_out.boxes.detach() if cfg.detach_pose_boxes else box_out.boxes
            pose_out = pose_stage(pyramid[0], pose_boxes, q_part, q_inst if serial else None)
            q_part = pose_out.part_queries
            if serial:
                q_inst = pose_out.instance_queries
            outputs.append(StagePrediction(
                box_out.boxes, box_out.logits, pose_out.mu, pose_out.sigma, pose_boxes,
                pose_out.attention_maps, box_out.attention, pose_out.part_attention,
            ))
            boxes = box_out.boxes.detach()
        return outputs


# ---------------------------------------------------------------------------
# batching

def collate(samples: Sequence, dtype=torch.float32):
    """Samples with ``.image`` (H, W, 3 uint8) and ``.annotation`` -> (images, sizes, targets).

    Images of different sizes are zero-padded to the largest one.
    """
    H = max(s.image.shape[0] for s in samples)
    W = max(s.image.shape[1] for s in samples)
    images = torch.zeros(len(samples), 3, H, W, dtype=dtype)
    sizes, targets = [], []
    for i, s in enumerate(samples):
        h, w = s.image.shape[:2]
        images[i, :, :h, :w] = torch.from_numpy(np.ascontiguousarray(s.image)).permute(2, 0, 1).to(dtype)
        sizes.append((h, w))
        ann = s.annotation
        n, k = len(ann.boxes), np.shape(ann.keypoints)[-2]
        targets.append(Target(
            torch.as_tensor(ann.boxes, dtype=dtype).reshape(n, 4),
            torch.as_tensor(ann.keypoints, dtype=dtype).reshape(n, k, 2),
            torch.as_tensor(ann.visibility).reshape(n, k),
            (h, w),
        ))
    return images, torch.tensor(sizes), targets


# ---------------------------------------------------------------------------
# training

def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        # NaN-filling every fresh allocation costs ~4% of a step and adds nothing to reproducibility
        torch.utils.deterministic.fill_uninitialized_memory = False


def build_optimizer(model: PoseModel, cfg: OptimConfig) -> torch.optim.Optimizer:
    flow_params = list(model.flow.parameters())
    flow_ids = {id(p) for p in flow_params}
    rest = [p for p in model.parameters() if id(p) not in flow_ids]
    return torch.optim.AdamW(
        [
            {"params": rest, "lr": cfg.lr},
            {"params": flow_params, "lr": cfg.lr * cfg.flow_lr_mult},
        ],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        fused=True,
    )


def compute_loss(model: PoseModel, outputs: list[StagePrediction], targets: list[Target],
                 weights: LossConfig) -> tuple[torch.Tensor, dict]:
    """Sum of matched stage losses. The breakdown holds weighted terms keyed
    ``stage{i}/{cls,l1,giou,keypoint}`` that add up to the total."""
    total = None
    terms = {}
    for i, out in enumerate(outputs):
        res = stage_loss(out.logits, out.boxes, out.mu, out.sigma, targets, model.flow, weights,
                         model.cfg.flow_mode, pose_boxes=out.pose_boxes)
        weighted = {
            "cls": weights.cls_weight * res["cls"],
            "l1": weights.l1_weight * res["l1"],
            "giou": weights.giou_weight * res["giou"],
            "keypoint": weights.keypoint_weight * res["keypoint"],
        }
        for name, value in weighted.items():
            if not torch.isfinite(value):
                raise NumericError(f"non-finite loss term stage{i}/{name}", term=f"stage{i}/{name}")
            terms[f"stage{i}/{name}"] = value
            total = value if total is None else total + value
    return total, terms


class Trainer:
    def __init__(self, model: PoseModel, cfg: RunConfig):
        self.model = model
        self.cfg = cfg
        self.optimizer = build_optimizer(model, cfg.optim)
        self.step = 0

    def train_step(self, images, image_sizes, targets) -> dict:
        """One optimizer step. Returns ``{"total": float, "terms": {name: float}}``.

        A non-finite term raises NumericError before any parameter is touched.
        """
        self.model.train()
        outputs = self.model(images, image_sizes)
        total, terms = compute_loss(self.model, outputs, targets, self.cfg.loss)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.optim.clip_grad_norm:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.optim.clip_grad_norm, foreach=True)
        self.optimizer.step()
        self.step += 1
        return {
            "step": self.step,
            "total": float(total.detach()),
            "terms": {k: float(v.detach()) for k, v in terms.items()},
            "lr": self.optimizer.param_groups[0]["lr"],
        }


def batch_order(num_samples: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Indices for the batch at ``step``: epochs are Philox-seeded permutations."""
    per_epoch = max(num_samples // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    rng = np.random.Generator(np.random.Philox(key=[seed, epoch]))
    perm = rng.permutation(num_samples)
    start = pos * batch_size
    idx = perm[start:start + batch_size]
    if len(idx) < batch_size:
        idx = np.concatenate([idx, perm[: batch_size - len(idx)]])
    return idx.tolist()


def fit(trainer: Trainer, dataset: Sequence, steps: int,
        on_step: Optional[Callable[[dict], None]] = None,
        on_checkpoint: Optional[Callable[[int], None]] = None,
        checkpoint_every: int = 0) -> list[float]:
    """Run ``steps`` optimizer steps from ``trainer.step``; returns the total losses."""
    cfg = trainer.cfg
    losses = []
    while trainer.step < steps:
        idx = batch_order(len(dataset), cfg.train.batch_size, cfg.seed, trainer.step)
        images, sizes, targets = collate([dataset[i] for i in idx])
        record = trainer.train_step(images, sizes, targets)
        losses.append(record["total"])
        if on_step is not None:
            on_step(record)
        if on_checkpoint is not None and checkpoint_every and trainer.step % checkpoint_every == 0:
            on_checkpoint(trainer.step)
    return losses


# ---------------------------------------------------------------------------
# inference

@dataclass
class ScoredPose:
    keypoints: np.ndarray      # (K, 2) image pixels
    score: float               # pose score
    box: np.ndarray            # (4,)
    instance_score: float
    sigma: np.ndarray = field(repr=False, default=None)  # (K, 2)
    query: int = -1

    def to_coco(self, image_id, category_id: int = 1) -> dict:
        kps = np.concatenate([self.keypoints, np.full((len(self.keypoints), 1), self.score)], 1)
        return {
            "image_id": image_id,
            "category_id": category_id,
            "keypoints": [float(v) for v in kps.reshape(-1)],
            "score": float(self.score),
        }


def pose_score(sigma, instance_score):
    """``mean_k (1 - sigma_k) * instance_score`` with ``sigma_k`` the mean of the two axis scales."""
    if isinstance(sigma, torch.Tensor):
        return (1 - sigma.mean(-1)).mean(-1) * instance_score
    sigma = np.asarray(sigma, dtype=np.float64)
    return (1 - sigma.mean(-1)).mean(-1) * np.asarray(instance_score)


def select_poses(prediction: StagePrediction, score_threshold: float = 0.3, top_k: int = 20
                 ) -> list[list[ScoredPose]]:
    """Threshold and rank the final-stage candidates. No suppression of any kind."""
    results = []
    inst = torch.sigmoid(prediction.logits)
    scores = pose_score(prediction.sigma, inst)
    keypoints = denormalize_keypoints(prediction.mu, prediction.pose_boxes)
    for b in range(inst.shape[0]):
        s = scores[b]
        keep = torch.nonzero(s > score_threshold, as_tuple=True)[0]
        # stable sort keeps query order among equal scores
        order = keep[torch.sort(s[keep], descending=True, stable=True).indices][:top_k]
        results.append([
            ScoredPose(
                keypoints=keypoints[b, i].double().numpy(),
                score=float(s[i]),
                box=prediction.pose_boxes[b, i].double().numpy(),
                instance_score=float(inst[b, i]),
                sigma=prediction.sigma[b, i].double().numpy(),
                query=int(i),
            )
            for i in order.tolist()
        ])
    return results


@torch.no_grad()
def infer(model: PoseModel, images: torch.Tensor, image_sizes: torch.Tensor,
          score_threshold: float = 0.3, top_k: int = 20) -> list[list[ScoredPose]]:
    model.eval()
    return select_poses(model(images, image_sizes)[-1], score_threshold, top_k)


def predict_dataset(model: PoseModel, dataset: Sequence, score_threshold=0.0, top_k=20, batch_size=4):
    preds = []
    for start in range(0, len(dataset), batch_size):
        images, sizes, _ = collate([dataset[i] for i in range(start, min(start + batch_size, len(dataset)))])
        preds.extend(infer(model, images, sizes, score_threshold, top_k))
    return preds


# ---------------------------------------------------------------------------
# checkpoints

# fields that change parameter shapes or wiring; a mismatch makes weights unusable
ARCHITECTURE_FIELDS = (
    "num_stages", "num_queries", "hidden_dim", "part_dim", "num_heads", "part_heads", "dynamic_dim",
    "part_conv_dim", "box_pool_size", "pose_pool_size", "box_sampling_ratio", "pose_sampling_ratio",
    "num_keypoints", "scheme", "part_groups", "flow_layers", "flow_hidden",
)


def save_checkpoint(path, model: PoseModel, cfg: RunConfig, optimizer=None, step: int = 0) -> None:
    """Zip archive: ``meta.json`` (format version, step), ``config.yaml``, ``state.pt``."""
    buf = io.BytesIO()
    state = {"model": model.state_dict()}
    if optimizer is not None:
        state["optimizer"] = optimizer.state_dict()
    torch.save(state, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr("meta.json", json.dumps({"format_version": CHECKPOINT_VERSION, "step": step}))
        zf.writestr("config.yaml", dump_config(cfg))
        zf.writestr("state.pt", buf.getvalue())
    tmp.replace(path)


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    model_state: dict
    optimizer_state: Optional[dict]


def read_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            config_text = zf.read("config.yaml").decode()
            state = torch.load(io.BytesIO(zf.read("state.pt")), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {version}, expected {CHECKPOINT_VERSION}")
    cfg = parse_config_text(config_text)
    return Checkpoint(cfg, int(meta.get("step", 0)), state["model"], state.get("optimizer"))


def check_compatible(saved: ModelConfig, expected: ModelConfig) -> None:
    conflicts = []
    for name in ARCHITECTURE_FIELDS:
        a, b = getattr(saved, name), getattr(expected, name)
        if a != b:
            conflicts.append(f"model.{name}: checkpoint={a!r} requested={b!r}")
    saved_m = len(part_division(saved.scheme, saved.part_groups, saved.num_keypoints))
    expected_m = len(part_division(expected.scheme, expected.part_groups, expected.num_keypoints))
    if saved_m != expected_m:
        conflicts.append(f"number of parts: checkpoint={saved_m} requested={expected_m}")
    if conflicts:
        raise ConfigConflictError("checkpoint conflicts with configuration: " + "; ".join(conflicts))


def load_checkpoint(path, expected: Optional[ModelConfig] = None):
    """Rebuild the model from a checkpoint. Returns ``(model, checkpoint)``."""
    ckpt = read_checkpoint(path)
    if expected is not None:
        check_compatible(ckpt.config.model, expected)
    model = PoseModel(ckpt.config.model)
    model.load_state_dict(ckpt.model_state)
    return model, ckpt
