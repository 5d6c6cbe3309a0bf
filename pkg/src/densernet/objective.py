"""Detection-weighted repeatability term, triplet hinge loss, training loop and
finite-difference gradient verification."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

from .data import AugmentConfig, ManifestEntry, PairRecord, Triplet, augment
from .decoder import DecodedImage
from .errors import NumericalError, ShapeError, ValidationError
from .evaluation import build_index, recall_at_n
from .model import images_to_batch

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# correspondences

@dataclass
class CorrespondenceSet:
    pairs: np.ndarray  # (K, 4) int rows (i1, j1, i2, j2)
    mode: str

    def __len__(self) -> int:
        return len(self.pairs)


def homography_correspondences(grid1: tuple[int, int], grid2: tuple[int, int], stride: int,
                               H: np.ndarray) -> CorrespondenceSet:
    """Map each image-1 cell centre through H; keep it if it lands within half a cell of an image-2 cell centre."""
    h1, w1 = grid1
    h2, w2 = grid2
    ii, jj = np.mgrid[0:h1, 0:w1]
    pts = np.stack([(jj.ravel() + 0.5) * stride, (ii.ravel() + 0.5) * stride, np.ones(h1 * w1)], axis=1)
    mapped = pts @ np.asarray(H, dtype=np.float64).T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = mapped[:, 0] / mapped[:, 2] / stride - 0.5  # column in grid 2
        v = mapped[:, 1] / mapped[:, 2] / stride - 0.5
    ok = np.isfinite(u) & np.isfinite(v) & (mapped[:, 2] > 0)
    cu, cv = np.floor(u + 0.5), np.floor(v + 0.5)
    ok &= (cu >= 0) & (cu < w2) & (cv >= 0) & (cv < h2)
    ok &= (u - cu) ** 2 + (v - cv) ** 2 <= 0.25
    pairs = np.stack([ii.ravel(), jj.ravel(), cv, cu], axis=1)[ok].astype(np.int64)
    return CorrespondenceSet(pairs, "homography")


def mutual_nn_correspondences(desc1: torch.Tensor, desc2: torch.Tensor) -> CorrespondenceSet:
    """Cells that are each other's nearest neighbour in descriptor space (ties to the lower flat index)."""
    h1, w1, n = desc1.shape
    h2, w2, _ = desc2.shape
    with torch.no_grad():
        a = desc1.reshape(-1, n)
        b = desc2.reshape(-1, n)
        dist = torch.cdist(a.double(), b.double())
        nn12 = torch.argmin(dist, dim=1)
        nn21 = torch.argmin(dist, dim=0)
        idx = torch.arange(a.shape[0])
        keep = nn21[nn12] == idx
        left, right = idx[keep].numpy(), nn12[keep].numpy()
    pairs = np.stack([left // w1, left % w1, right // w2, right % w2], axis=1).astype(np.int64)
    return CorrespondenceSet(pairs.reshape(-1, 4), "mutual-nn")


def build_correspondences(img1: DecodedImage, img2: DecodedImage,
                          gt_homography: np.ndarray | None = None) -> CorrespondenceSet:
    if img1.stride != img2.stride:
        raise ShapeError(f"images decoded at different strides ({img1.stride} vs {img2.stride})")
    if gt_homography is not None:
        return homography_correspondences(img1.grid_shape, img2.grid_shape, img1.stride, gt_homography)
    return mutual_nn_correspondences(img1.descriptors.descriptors, img2.descriptors.descriptors)


# --------------------------------------------------------------------------
# loss

class Term(NamedTuple):
    value: torch.Tensor
    degenerate: bool


def _gather(P: CorrespondenceSet, img1: DecodedImage, img2: DecodedImage):
    p = torch.as_tensor(P.pairs)
    s1 = img1.detection.scores[p[:, 0], p[:, 1]]
    s2 = img2.detection.scores[p[:, 2], p[:, 3]]
    f1 = img1.descriptors.descriptors[p[:, 0], p[:, 1]]
    f2 = img2.descriptors.descriptors[p[:, 2], p[:, 3]]
    return s1, s2, f1, f2


def repeatability_weights(P: CorrespondenceSet, img1: DecodedImage, img2: DecodedImage) -> torch.Tensor:
    s1, s2, _, _ = _gather(P, img1, img2)
    prod = s1 * s2
    return prod / prod.sum()


def repeatability_term(P: CorrespondenceSet, img1: DecodedImage, img2: DecodedImage) -> Term:
    """Score-weighted mean descriptor distance over the correspondences.

    Empty sets and all-zero weights give 0 with the degenerate flag set.
    """
    zero = img1.detection.scores.sum() * 0
    if len(P) == 0:
        return Term(zero, True)
    s1, s2, f1, f2 = _gather(P, img1, img2)
    prod = s1 * s2
    denom = prod.sum()
    if not denom > 0:
        return Term(zero, True)
    dist = torch.linalg.vector_norm(f1 - f2, dim=-1)
    return Term((prod * dist).sum() / denom, False)


@dataclass
class TripletLoss:
    loss: torch.Tensor
    r_pos: torch.Tensor
    r_neg: torch.Tensor
    degenerate: int  # number of degenerate R terms (0-2)

    @property
    def active(self) -> bool:
        return bool(self.loss > 0)


def hinge(margin: float, r_pos, r_neg):
    return torch.clamp(margin + r_pos - r_neg, min=0.0)


def triplet_loss(query: DecodedImage, pos: DecodedImage, neg: DecodedImage, margin: float = 0.1,
                 pos_homography: np.ndarray | None = None,
                 correspondences: tuple[CorrespondenceSet, CorrespondenceSet] | None = None) -> TripletLoss:
    """max(M + R(q, pos) - R(q, neg), 0).

    Query/positive correspondences come from ``pos_homography`` when known,
    otherwise from mutual nearest neighbours; query/negative always use mutual NN.
    Passing ``correspondences`` freezes both sets.
    """
    if margin < 0:
        raise ValidationError("margin must be non-negative")
    if correspondences is None:
        correspondences = (build_correspondences(query, pos, pos_homography),
                           build_correspondences(query, neg))
    p_pos, p_neg = correspondences
    rp = repeatability_term(p_pos, query, pos)
    rn = repeatability_term(p_neg, query, neg)
    return TripletLoss(hinge(margin, rp.value, rn.value), rp.value, rn.value, int(rp.degenerate) + int(rn.degenerate))


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.1
    epochs: int = 30
    batch_triplets: int = 4
    learning_rate: float = 1e-3
    lr_halving_period: int = 6
    adam_beta1: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.margin < 0:
            raise ValidationError("margin must be >= 0")
        if self.epochs < 0 or self.batch_triplets < 1 or self.lr_halving_period < 1:
            raise ValidationError("epochs >= 0, batch_triplets >= 1 and lr_halving_period >= 1 required")
        if self.learning_rate <= 0 or self.weight_decay < 0 or not 0 <= self.adam_beta1 < 1:
            raise ValidationError("learning rate must be positive, weight decay non-negative, beta1 in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * 2.0 ** (-(epoch // self.lr_halving_period))

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    learning_rate: float
    val_recall_at_5: float | None
    active_fraction: float
    degenerate_terms: int
    checkpoint: str | None = None
    selected: bool = False


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def selected_epoch(self) -> int | None:
        for r in self.epochs:
            if r.selected:
                return r.epoch
        return None

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"schema_version": 1, **asdict(r)}, sort_keys=True) + "\n" for r in self.epochs)


@dataclass
class TrainingData:
    images: Mapping[str, np.ndarray]  # float32 (h, w, 3) in [0, 1]
    triplets: Sequence[Triplet]
    homographies: Mapping[tuple[str, str], np.ndarray] = field(default_factory=dict)
    val_queries: Sequence[ManifestEntry] = ()
    database: Sequence[ManifestEntry] = ()

    @classmethod
    def build(cls, images, triplets, pairs: Iterable[PairRecord] = (), manifest: Sequence[ManifestEntry] = ()):
        homs = {}
        for p in pairs:
            homs[(p.image1, p.image2)] = np.asarray(p.homography, dtype=np.float64)
        return cls(images, list(triplets), homs,
                   [e for e in manifest if e.split == "val"], [e for e in manifest if e.split == "db"])

    def homography(self, a: str, b: str) -> np.ndarray | None:
        if (a, b) in self.homographies:
            return self.homographies[(a, b)]
        if (b, a) in self.homographies:
            H = np.linalg.inv(self.homographies[(b, a)])
            return H / H[2, 2]
        return None


def decode_images(model, images: Mapping[str, np.ndarray], ids: Sequence[str], batch_size: int = 16,
                  max_keypoints: int = 0, nms_radius: int = 1) -> list[DecodedImage]:
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for k in range(0, len(ids), batch_size):
            chunk = list(ids[k:k + batch_size])
            x = images_to_batch([images[i] for i in chunk], dtype)
            out += model.decode(x, chunk, max_keypoints=max_keypoints, nms_radius=nms_radius)
    return out


def global_descriptors(model, images: Mapping[str, np.ndarray], ids: Sequence[str]) -> dict[str, np.ndarray]:
    return {d.image_id: d.global_descriptor.vector.double().numpy() for d in decode_images(model, images, ids)}


def validation_recall(model, data: TrainingData, n: int = 5) -> float | None:
    if not data.val_queries or not data.database:
        return None
    ids = [e.id for e in data.database] + [e.id for e in data.val_queries]
    g = global_descriptors(model, data.images, ids)
    index = build_index([(e.id, g[e.id], e.latlon) for e in data.database])
    report = recall_at_n(index, [(e.id, g[e.id], e.latlon) for e in data.val_queries], ns=(n,))
    return report.recall_at[n]


def train(model, data: TrainingData, config: TrainConfig, checkpoint_dir=None,
          on_epoch: Callable[[EpochRecord], None] | None = None):
    """Adam with decoupled weight decay on the mean triplet loss of each batch.

    The learning rate halves every ``lr_halving_period`` epochs. The epoch with
    the best validation recall@5 (latest on ties) is marked selected and its
    weights are loaded back into ``model`` before returning.
    """
    from .io import save_checkpoint

    log_ = TrainLog()
    if config.epochs == 0:
        return model, log_
    torch.manual_seed(config.seed)
    dtype = next(model.parameters()).dtype
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.learning_rate, betas=(config.adam_beta1, 0.999), eps=1e-8,
                            weight_decay=config.weight_decay)
    pos_cache: dict[tuple[str, str], CorrespondenceSet] = {}
    aug_cfg = AugmentConfig()
    best_state, best_score = None, -math.inf
    triplets = list(data.triplets)
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(triplets))
        model.train()
        losses, active, degenerate = [], 0, 0
        for start in range(0, len(order), config.batch_triplets):
            batch = [triplets[i] for i in order[start:start + config.batch_triplets]]
            ids = list(dict.fromkeys(x for t in batch for x in (t.query_id, t.positive_id, t.negative_id)))
            arrays = [augment(data.images[i], rng, aug_cfg) if config.augment else data.images[i] for i in ids]
            decoded = dict(zip(ids, model.decode(images_to_batch(arrays, dtype), ids)))
            terms = []
            for t in batch:
                q, p, n = decoded[t.query_id], decoded[t.positive_id], decoded[t.negative_id]
                key = (t.query_id, t.positive_id)
                if key not in pos_cache:
                    H = data.homography(*key)
                    pos_cache[key] = build_correspondences(q, p, H) if H is not None else None
                p_pos = pos_cache[key] if pos_cache[key] is not None else build_correspondences(q, p)
                res = triplet_loss(q, p, n, config.margin, correspondences=(p_pos, build_correspondences(q, n)))
                if not torch.isfinite(res.loss):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} on triplet "
                        f"({t.query_id}, {t.positive_id}, {t.negative_id})")
                terms.append(res.loss)
                active += res.active
                degenerate += res.degenerate
            loss = torch.stack(terms).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.eval()
        val = validation_recall(model, data)
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else 0.0, lr, val,
                          active / max(1, len(triplets)), degenerate)
        if checkpoint_dir is not None:
            path = checkpoint_dir / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(model, path, meta={"epoch": epoch})
            rec.checkpoint = path.name
        score = val if val is not None else float(epoch)
        if score >= best_score:
            best_score = score
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
        log_.epochs.append(rec)
        log.info("epoch %d loss %.4f lr %.2e val r@5 %s", epoch, rec.mean_loss, lr, val)
        if on_epoch is not None:
            on_epoch(rec)

    log_.epochs[best_epoch].selected = True
    model.load_state_dict(best_state)
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir / "selected.ckpt", meta={"epoch": best_epoch, "selected": True})
    return model, log_


# --------------------------------------------------------------------------
# gradient check

class _KinkRecorder(TorchFunctionMode):
    """Records the discrete state of every non-smooth op: ReLU masks, ReLU6 bands, argmax picks."""

    def __init__(self):
        super().__init__()
        self.state: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        name = getattr(func, "__name__", "")
        if name == "relu":
            self.state.append(args[0] > 0)
        elif name == "relu6":
            self.state.append(torch.stack([args[0] > 0, args[0] < 6]))
        elif name == "argmax":
            self.state.append(out)
        return out


def _same_state(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


@dataclass
class GradcheckResult:
    max_rel_error: float
    n_checked: int
    resamples: int
    loss: float
    straddling: int = 0  # coordinates swapped out because a perturbation crossed a kink


def gradcheck(model, candidates: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]],
              epsilon: float = 1e-5, n_params: int = 200, margin: float = 0.1, seed: int = 0,
              max_resamples: int = 10) -> GradcheckResult:
    """Compare autograd against central differences on a random parameter subset.

    ``candidates`` yields (query, positive, negative, query->positive homography)
    image triplets; triplets where the hinge is inactive are skipped, up to
    ``max_resamples`` times. Correspondences are frozen at the probe point so
    both gradients differentiate the same function.

    The loss is only piecewise smooth (ReLUs, the argmax detector). A coordinate
    whose +/- epsilon probe changes any of that discrete state is replaced by a
    fresh one, since a central difference across a kink measures the jump rather
    than the derivative.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise ValidationError("gradcheck needs a float64 model")
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    pool = rng.permutation(int(offsets[-1]))

    resamples = 0
    for cand in candidates:
        q, p, n, H = cand
        x = images_to_batch([q, p, n], torch.float64)
        dq, dp, dn = model.decode(x)
        frozen = (build_correspondences(dq, dp, H), build_correspondences(dq, dn))

        def loss_fn() -> tuple[torch.Tensor, list[torch.Tensor]]:
            with _KinkRecorder() as rec:
                a, b, c = model.decode(x)
                loss = triplet_loss(a, b, c, margin, correspondences=frozen).loss
            return loss, rec.state

        base, base_state = loss_fn()
        if not base > 0:
            resamples += 1
            if resamples > max_resamples:
                break
            continue
        model.zero_grad(set_to_none=True)
        base.backward()
        grads = [p_.grad.reshape(-1).numpy() if p_.grad is not None else np.zeros(p_.numel()) for p_ in params]
        analytic, numeric = [], []
        straddling = 0
        with torch.no_grad():
            for flat in pool:
                if len(numeric) == n_params:
                    break
                t = int(np.searchsorted(offsets, flat, side="right") - 1)
                view = params[t].view(-1)
                i = int(flat - offsets[t])
                orig = view[i].item()
                view[i] = orig + epsilon
                up, s_up = loss_fn()
                view[i] = orig - epsilon
                down, s_down = loss_fn()
                view[i] = orig
                if not (_same_state(base_state, s_up) and _same_state(base_state, s_down)):
                    straddling += 1
                    continue
                analytic.append(grads[t][i])
                numeric.append((up.item() - down.item()) / (2 * epsilon))
        analytic, numeric = np.array(analytic), np.array(numeric)
        rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        return GradcheckResult(float(rel.max()), len(rel), resamples, base.item(), straddling)
    raise NumericalError(f"hinge inactive on {resamples} sampled triplets; no probe point found")
