"""Training loop, checkpoints, inference and case-level evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .config import TrainConfig
from .losses import total_loss
from .metrics import (
    UndefinedMetricError,
    confusion,
    dice_score,
    hausdorff95,
    sensitivity,
    specificity,
)
from .optim import Adam, AdamState
from .postprocess import postprocess
from .tensor import Tensor, no_grad
from .topology import Network, build_network

log = logging.getLogger(__name__)

LOG_NAME = "loss_log.tsv"
LOG_FIELDS = ("step", "epoch", "batch_size", "dice_et", "dice_tc", "dice_wt", "dice_mean", "l2", "total")


class DataError(RuntimeError):
    pass


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    network_state: dict[str, np.ndarray]
    adam: AdamState
    epoch: int  # epochs fully completed
    step: int
    batch_in_epoch: int = 0  # batches of the current epoch already taken
    rng_state: dict = field(default_factory=dict)  # shuffle RNG at the start of the current epoch


def save_checkpoint(path, ckpt: Checkpoint):
    arrays = {f"net/{k}": v for k, v in ckpt.network_state.items()}
    for i, (m, v) in enumerate(zip(ckpt.adam.m, ckpt.adam.v)):
        arrays[f"adam/m{i}"] = m
        arrays[f"adam/v{i}"] = v
    meta = {
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "batch_in_epoch": ckpt.batch_in_epoch,
        "adam_t": ckpt.adam.t,
        "n_params": len(ckpt.adam.m),
        "rng_state": ckpt.rng_state,
    }
    arrays["meta"] = np.array(json.dumps(meta))
    arrays["config"] = np.array(ckpt.config.to_text())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        config = TrainConfig.from_text(str(z["config"]))
        net = {k[4:]: z[k] for k in z.files if k.startswith("net/")}
        n = meta["n_params"]
        adam = AdamState([z[f"adam/m{i}"] for i in range(n)], [z[f"adam/v{i}"] for i in range(n)], meta["adam_t"])
    return Checkpoint(config, net, adam, meta["epoch"], meta["step"], meta["batch_in_epoch"], meta["rng_state"])


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = build_network(ckpt.config.topology, seed=ckpt.config.seed)
    net.load_state_dict(ckpt.network_state)
    return net


# -- training ----------------------------------------------------------------


def validate_geometry(config: TrainConfig):
    div = config.topology.divisor
    d0, d1, depth = config.crop_shape
    if d0 % div or d1 % div or config.patch_depth % div:
        raise ValueError(
            f"crop {config.crop_shape} / patch depth {config.patch_depth} must be divisible by "
            f"2^(stages-1) = {div}"
        )
    if config.patch_depth > depth:
        raise ValueError(f"patch depth {config.patch_depth} exceeds crop depth {depth}")


def load_training_patches(config: TrainConfig) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    paths = D.list_cases(config.data_dir)
    if not paths:
        raise DataError(f"no MVOL cases under {config.data_dir}")
    per_case = []
    for p in paths:
        case = D.read_case(p)
        if case.labels is None:
            raise DataError(f"{p}: training case has no labels")
        ps = D.extract_patches(case, config.crop_shape, config.patch_depth, config.patch_stride)
        per_case.append([(img, tgt) for (_, img), tgt in zip(ps.patches, ps.targets)])
    return per_case


def init_head_bias(net: Network, per_case, clip: float = 1e-3) -> np.ndarray:
    """Set the output bias to the logit of each channel's training-set foreground rate.

    Starting the sigmoid at the class prior removes the early phase in which
    the network only learns to predict background everywhere.
    """
    targets = [tgt for items in per_case for _, tgt in items]
    axes = tuple(range(1, targets[0].ndim))
    rate = np.clip(np.mean([t.mean(axis=axes) for t in targets], axis=0), clip, 1 - clip)
    bias = np.log(rate / (1 - rate)).astype(net.dtype)
    net.params["head.bias"].data[:] = bias
    return bias


def _format_record(rec: dict) -> str:
    return "\t".join(repr(rec[k]) if isinstance(rec[k], float) else str(rec[k]) for k in LOG_FIELDS)


def train(config: TrainConfig, resume=None, patches=None) -> Path:
    """Run (or resume) training; returns the path of the final checkpoint.

    Writes ``ckpt_epochNNNN.npz`` after every epoch and ``latest.npz`` when
    training stops, and appends one tab-separated record per optimizer
    step to ``loss_log.tsv`` in ``checkpoint_dir``.
    """
    validate_geometry(config)
    per_case = patches if patches is not None else load_training_patches(config)
    out = Path(config.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME

    net = build_network(config.topology, seed=config.seed)
    if config.head_bias_prior:
        init_head_bias(net, per_case)
    opt = Adam(net.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    epoch = step = skip = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        net.load_state_dict(ckpt.network_state)
        opt.state = ckpt.adam
        epoch, step, skip = ckpt.epoch, ckpt.step, ckpt.batch_in_epoch
        rng.bit_generator.state = ckpt.rng_state
        kept = log_path.read_text().splitlines()[: step + 1] if log_path.exists() else ["\t".join(LOG_FIELDS)]
        log_path.write_text("\n".join(kept) + "\n")
    else:
        log_path.write_text("\t".join(LOG_FIELDS) + "\n")

    def snapshot(batch_in_epoch: int, rng_state) -> Checkpoint:
        adam = AdamState([m.copy() for m in opt.state.m], [v.copy() for v in opt.state.v], opt.state.t)
        return Checkpoint(config, net.state_dict(), adam, epoch, step, batch_in_epoch, rng_state)

    bs = config.batch_size
    ckpt = snapshot(skip, rng.bit_generator.state)
    with log_path.open("a") as logf:
        while epoch < config.epochs and (config.max_steps is None or step < config.max_steps):
            epoch_state = rng.bit_generator.state
            order = rng.permutation(len(per_case))
            items = [item for ci in order for item in per_case[ci]]
            n_batches = math.ceil(len(items) / bs)
            b = skip
            skip = 0
            while b < n_batches:
                if config.max_steps is not None and step >= config.max_steps:
                    break
                chunk = items[b * bs : (b + 1) * bs]
                x = Tensor(np.stack([c[0] for c in chunk]).astype(net.dtype))
                y = np.stack([c[1] for c in chunk]).astype(net.dtype)
                pred = net.forward(x, "train")
                lb = total_loss(pred, y, config.l2_weight, l2_mode=config.l2_mode, params=net.parameters())
                net.zero_grad()
                lb.total.backward()
                opt.step()
                step += 1
                b += 1
                rec = {"step": step, "epoch": epoch + 1, "batch_size": len(chunk), **lb.as_floats()}
                logf.write(_format_record(rec) + "\n")
            if b < n_batches:
                ckpt = snapshot(b, epoch_state)
                break
            epoch += 1
            ckpt = snapshot(0, rng.bit_generator.state)
            logf.flush()
            save_checkpoint(out / f"ckpt_epoch{epoch:04d}.npz", ckpt)
            log.info("epoch %d done, step %d, loss %.5f", epoch, step, lb.total.item())
    save_checkpoint(out / "latest.npz", ckpt)
    return out / "latest.npz"


def read_loss_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        vals = line.split("\t")
        out.append({k: (int(v) if k in ("step", "epoch", "batch_size") else float(v)) for k, v in zip(keys, vals)})
    return out


# -- inference ----------------------------------------------------------------


def predict_probs(net: Network, config: TrainConfig, case: D.VolumeCase) -> tuple[np.ndarray, D.CropBox]:
    """Eval-mode ET/TC/WT probabilities in the cropped frame."""
    image, _, box = D.prepare_case(case, config.crop_shape)
    offsets, _ = D.patch_offsets(image.shape[-1], config.patch_depth, config.patch_stride)
    preds = []
    with no_grad():
        for o, patch in zip(offsets, D.split_patches(image, offsets, config.patch_depth)):
            p = net.forward(Tensor(patch[None].astype(net.dtype)), "eval")
            preds.append((o, p.data[0]))
    return D.reconstruct(preds, image.shape[1:]), box


def predict(ckpt: Checkpoint | str | Path, case: D.VolumeCase) -> tuple[np.ndarray, np.ndarray]:
    """Label map and probability volume in the original case geometry."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    config = ckpt.config
    validate_geometry(config)
    if case.modalities.shape[0] != config.topology.in_channels:
        raise ValueError("case modality count does not match the checkpoint topology")
    net = network_from_checkpoint(ckpt)
    probs, box = predict_probs(net, config, case)
    labels = postprocess(probs, **config.postprocess_kwargs())
    return D.undo_crop(labels, box), D.undo_crop(probs, box)


# -- evaluation -----------------------------------------------------------------

REGIONS = ("ET", "WT", "TC")
_CHANNEL = {"ET": 0, "TC": 1, "WT": 2}
METRICS = ("Dice", "Sensitivity", "Specificity", "HD95")
STATS = ("Mean", "StdDev", "Median", "25quantile", "75quantile")


def case_metrics(pred_labels, gt_labels, spacing=(1.0, 1.0, 1.0)) -> dict[str, float]:
    pm, gm = D.remap_labels(pred_labels), D.remap_labels(gt_labels)
    row = {}
    for r in REGIONS:
        p, g = pm[_CHANNEL[r]].astype(bool), gm[_CHANNEL[r]].astype(bool)
        c = confusion(p, g)
        row[f"Dice_{r}"] = dice_score(c)
        row[f"Sensitivity_{r}"] = sensitivity(c)
        row[f"Specificity_{r}"] = specificity(c)
        try:
            row[f"HD95_{r}"] = hausdorff95(p, g, spacing)
        except UndefinedMetricError:
            row[f"HD95_{r}"] = math.nan
    return row


@dataclass
class MetricsReport:
    cases: dict[str, dict[str, float]]
    missing_pred: list[str] = field(default_factory=list)
    missing_gt: list[str] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return [f"{m}_{r}" for m in METRICS for r in REGIONS]

    def undefined_hd95(self) -> dict[str, int]:
        return {r: sum(math.isnan(row[f"HD95_{r}"]) for row in self.cases.values()) for r in REGIONS}

    def summary(self) -> dict[str, dict[str, float]]:
        out = {s: {} for s in STATS}
        for col in self.columns:
            vals = np.array([row[col] for row in self.cases.values()], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            if vals.size == 0:
                for s in STATS:
                    out[s][col] = math.nan
                continue
            out["Mean"][col] = float(vals.mean())
            out["StdDev"][col] = float(vals.std())
            out["Median"][col] = float(np.median(vals))
            out["25quantile"][col] = float(np.quantile(vals, 0.25))
            out["75quantile"][col] = float(np.quantile(vals, 0.75))
        return out

    def to_tsv(self) -> str:
        cols = self.columns
        lines = ["\t".join(["case"] + cols)]
        for cid, row in self.cases.items():
            lines.append("\t".join([cid] + [_num(row[c]) for c in cols]))
        for stat, row in self.summary().items():
            lines.append("\t".join([stat] + [_num(row[c]) for c in cols]))
        und = self.undefined_hd95()
        lines.append("# hd95_undefined\t" + "\t".join(f"{r}={und[r]}" for r in REGIONS))
        if self.missing_pred:
            lines.append("# missing_pred\t" + ",".join(self.missing_pred))
        if self.missing_gt:
            lines.append("# missing_gt\t" + ",".join(self.missing_gt))
        return "\n".join(lines) + "\n"


def _num(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def evaluate(pred_dir, gt_dir) -> MetricsReport:
    preds = {p.name: p for p in D.list_cases(pred_dir)}
    gts = {p.name: p for p in D.list_cases(gt_dir)}
    report = MetricsReport({})
    report.missing_pred = sorted(set(gts) - set(preds))
    report.missing_gt = sorted(set(preds) - set(gts))
    for name in sorted(set(preds) & set(gts)):
        pl, _ = D.read_labels(preds[name])
        gl, gh = D.read_labels(gts[name])
        if pl.shape != gl.shape:
            raise D.ShapeMismatch(f"{name}: prediction shape {pl.shape} != ground truth {gl.shape}")
        report.cases[name] = case_metrics(pl, gl, gh["spacing"])
    for name in report.missing_pred + report.missing_gt:
        log.warning("case %s present in only one directory", name)
    return report
