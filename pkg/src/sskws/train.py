"""Training workflows: supervised baseline, masked pretraining, fine-tuning, evaluation.

The baseline and fine-tuning share one code path (run_supervised),
parameterized only by the initial encoder weights; pretraining maintains the
EMA teacher and serializes it with the student so runs resume exactly.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data2vec, optim
from .audio import spec_augment
from .checkpoint import (
    CheckpointError,
    check_shapes,
    load_checkpoint,
    save_checkpoint,
    strip_prefix,
    with_prefix,
)
from .config import MfccSection, RunConfig, resolve_deterministic
from .data import Manifest, MfccFeatureProvider, batches, load_classes, write_feature_cache
from .model import (
    KwtConfig,
    classify,
    encoder_forward,
    init_params,
    masked_prediction_loss_grads,
    param_shapes,
    supervised_loss_grads,
)
from .seeding import substream

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,phase,loss,accuracy,lr,tau,target_variance,wall_seconds"


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; the last good epoch's checkpoint stays on disk."""


class MetricsWriter:
    """Append-only metrics.csv writer, one row per (epoch, phase).

    Floats are written with repr (exact round-trip); absent fields are empty.
    In deterministic mode wall_seconds is recorded as 0.0 so that same-seed
    runs produce byte-identical files.
    """

    def __init__(self, path: str | Path, deterministic: bool, append: bool = False):
        self.path = Path(path)
        self.deterministic = deterministic
        mode = "a" if append and self.path.exists() else "w"
        self._fh = open(self.path, mode, encoding="utf-8", newline="")
        if mode == "w":
            self._fh.write(METRICS_HEADER + "\n")
            self._fh.flush()

    def row(self, epoch, phase, loss=None, accuracy=None, lr=None, tau=None, target_variance=None, wall=None):
        wall = 0.0 if self.deterministic else (wall if wall is not None else 0.0)
        cells = [str(epoch), phase] + [
            "" if v is None else repr(float(v)) for v in (loss, accuracy, lr, tau, target_variance)
        ] + [repr(float(wall))]
        self._fh.write(",".join(cells) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def feature_stats(features: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-coefficient mean and std over every frame of a feature table (float32)."""
    total = 0
    s = None
    sq = None
    for arr in features.values():
        a = arr.astype(np.float64)
        total += a.shape[0]
        s = a.sum(axis=0) if s is None else s + a.sum(axis=0)
        sq = (a * a).sum(axis=0) if sq is None else sq + (a * a).sum(axis=0)
    mean = s / total
    var = np.maximum(sq / total - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean) / std


def _prepare_features(cfg: RunConfig, manifests: list[Manifest]) -> MfccFeatureProvider:
    provider = MfccFeatureProvider(
        cfg.data.data_root, cfg.mfcc.to_mfcc_config(), cache_path=cfg.data.feature_cache or None
    )
    for m in manifests:
        provider.warm(m)
    if cfg.data.feature_cache and not Path(cfg.data.feature_cache).exists():
        cache = {}
        for m in manifests:
            cache.update(provider.snapshot(m))
        write_feature_cache(cfg.data.feature_cache, cache)
        log.info("wrote feature cache with %d entries to %s", len(cache), cfg.data.feature_cache)
    return provider


def _write_config_snapshot(cfg: RunConfig, out_dir: Path, init_source: str, deterministic: bool) -> None:
    doc = cfg.to_dict()
    doc["init_source"] = init_source
    doc["resolved_deterministic"] = deterministic
    with open(out_dir / "config.json", "w", encoding="utf-8", newline="") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _augment_batch(x: np.ndarray, cfg: RunConfig, epoch: int, batch_idx: int) -> np.ndarray:
    rng = substream(cfg.seed, "augment", epoch, batch_idx)
    params = cfg.augment.to_params()
    return np.stack([spec_augment(xi, params, rng) for xi in x])


def _eval_pass(params, cfgm: KwtConfig, manifest: Manifest, provider, mean, std, batch_size, smoothing):
    """Deterministic full pass: mean loss, accuracy, and per-class (count, correct)."""
    total_loss = 0.0
    n_correct = 0
    n_seen = 0
    per_class = np.zeros((cfgm.n_classes, 2), dtype=np.int64)
    for batch in batches(manifest, batch_size, seed=0, epoch=0, features=provider, shuffle=False):
        x = standardize(batch.features, mean, std)
        out, _ = encoder_forward(params, cfgm, x)
        logits = classify(out, params)
        loss, _ = optim.smoothed_cross_entropy_batch(logits, batch.labels, smoothing)
        b = len(batch.ids)
        total_loss += loss * b
        pred = logits.argmax(axis=-1)
        hits = pred == batch.labels
        n_correct += int(hits.sum())
        n_seen += b
        for lbl, hit in zip(batch.labels, hits):
            per_class[lbl, 0] += 1
            per_class[lbl, 1] += int(hit)
    return total_loss / n_seen, n_correct / n_seen, per_class


def _supervised_header(cfg, cfgm, class_map, mean, std, epoch, step, best_val, init_source):
    return {
        "kind": "supervised",
        "variant": cfg.model.variant,
        "model": asdict_kwt(cfgm),
        "config": cfg.to_dict(),
        "class_map": class_map,
        "epoch": epoch,
        "global_step": step,
        "seed": cfg.seed,
        "feat_mean": [float(v) for v in mean],
        "feat_std": [float(v) for v in std],
        "best_val_accuracy": best_val,
        "init_source": init_source,
    }


def asdict_kwt(cfgm: KwtConfig) -> dict:
    return {
        "n_blocks": cfgm.n_blocks,
        "encoder_dim": cfgm.encoder_dim,
        "n_heads": cfgm.n_heads,
        "mlp_dim": cfgm.mlp_dim,
        "n_classes": cfgm.n_classes,
        "seq_len": cfgm.seq_len,
        "feature_dim": cfgm.feature_dim,
        "head_hidden": cfgm.head_hidden,
    }


def kwt_from_dict(d: dict) -> KwtConfig:
    return KwtConfig(**d)


def assemble_supervised_params(
    cfgm: KwtConfig, seed: int, init_encoder: dict[str, np.ndarray] | None = None
) -> dict[str, np.ndarray]:
    """Fresh supervised parameters; encoder tensors overwritten from init_encoder if given.

    The classification head is always freshly initialized, so a fine-tuning
    run differs from a baseline only in where the encoder weights came from.
    Aborts (listing offending tensors) when the donor encoder's shapes do not
    match the target variant.
    """
    params = init_params(cfgm, substream(seed, "init"), "supervised")
    if init_encoder is not None:
        enc_shapes = {k: v for k, v in param_shapes(cfgm, "supervised").items() if data2vec.is_encoder_param(k)}
        check_shapes(init_encoder, enc_shapes, "fine-tuning init")
        for name in enc_shapes:
            params[name] = init_encoder[name].astype(np.float32).copy()
    return params


def run_supervised(
    cfg: RunConfig,
    init_encoder: dict[str, np.ndarray] | None = None,
    init_source: str = "random",
    feat_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> dict:
    """Train with the supervised recipe; baseline when init_encoder is None.

    Per epoch: SpecAugmented training pass, then a validation pass; saves
    ckpt-last.bin every epoch and ckpt-best.bin at a new best validation
    accuracy. Emits one train and one val metrics row per epoch.
    """
    deterministic = resolve_deterministic(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    class_map = load_classes(cfg.data.classes_file)
    cfgm = cfg.model_config(n_classes=len(class_map))
    train_man = Manifest.load(cfg.data.train_manifest, class_map)
    val_man = Manifest.load(cfg.data.val_manifest, class_map)
    provider = _prepare_features(cfg, [train_man, val_man])

    if feat_stats is None:
        mean, std = feature_stats(provider.snapshot(train_man))
    else:
        mean, std = feat_stats

    params = assemble_supervised_params(cfgm, cfg.seed, init_encoder)
    opt_state = optim.init_optimizer(params)

    tcfg = cfg.train
    steps_per_epoch = math.ceil(len(train_man) / tcfg.batch_size)
    sched = optim.warmup_cosine_schedule(
        tcfg.eta_max, tcfg.warmup_epochs, tcfg.epochs, tcfg.batch_size, steps_per_epoch
    )

    _write_config_snapshot(cfg, out_dir, init_source, deterministic)
    metrics = MetricsWriter(out_dir / "metrics.csv", deterministic)
    best_val = -1.0
    global_step = 0
    try:
        for epoch in range(1, tcfg.epochs + 1):
            t0 = time.perf_counter()
            loss_sum = 0.0
            n_correct = 0
            n_seen = 0
            lr = 0.0
            for batch_idx, batch in enumerate(
                batches(train_man, tcfg.batch_size, cfg.seed, epoch, provider)
            ):
                x = standardize(batch.features, mean, std)
                if cfg.augment.enabled:
                    x = _augment_batch(x, cfg, epoch, batch_idx)
                lr = optim.schedule_lr(sched, global_step)
                loss, logits, grads = supervised_loss_grads(params, cfgm, x, batch.labels, tcfg.label_smoothing)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, step {global_step}")
                optim.adamw_step(params, grads, opt_state, lr, tcfg.weight_decay, "decoupled")
                b = len(batch.ids)
                loss_sum += loss * b
                n_correct += int((logits.argmax(axis=-1) == batch.labels).sum())
                n_seen += b
                global_step += 1
            metrics.row(epoch, "train", loss=loss_sum / n_seen, accuracy=n_correct / n_seen, lr=lr,
                        wall=time.perf_counter() - t0)

            t0 = time.perf_counter()
            val_loss, val_acc, _ = _eval_pass(
                params, cfgm, val_man, provider, mean, std, tcfg.batch_size, tcfg.label_smoothing
            )
            metrics.row(epoch, "val", loss=val_loss, accuracy=val_acc, wall=time.perf_counter() - t0)
            log.info("epoch %d/%d train_loss=%.4f val_acc=%.4f", epoch, tcfg.epochs, loss_sum / n_seen, val_acc)

            tensors = with_prefix("params.", params) | with_prefix("opt.m.", opt_state.m) | with_prefix("opt.v.", opt_state.v)
            header = _supervised_header(cfg, cfgm, class_map, mean, std, epoch, global_step, best_val, init_source)
            header["opt_step"] = opt_state.step
            save_checkpoint(out_dir / "ckpt-last.bin", header, tensors)
            if val_acc > best_val:
                best_val = val_acc
                header["best_val_accuracy"] = best_val
                save_checkpoint(out_dir / "ckpt-best.bin", header, tensors)
    finally:
        metrics.close()
    return {
        "best_checkpoint": out_dir / "ckpt-best.bin",
        "last_checkpoint": out_dir / "ckpt-last.bin",
        "metrics": out_dir / "metrics.csv",
        "best_val_accuracy": best_val,
    }


def pretrain_step(
    params: dict[str, np.ndarray],
    teacher: data2vec.TeacherState,
    cfgm: KwtConfig,
    x: np.ndarray,
    masks: np.ndarray,
    opt_state: optim.OptimizerState,
    lr: float,
    pcfg,
    tau_sched: data2vec.TauSchedule,
):
    """One pretraining update: teacher targets, student step, then the EMA.

    The teacher encodes the unmasked batch (no gradients), the student the
    masked one; gradients are clipped to pcfg.clip_norm before the optimizer;
    the EMA uses tau_at(update_count) and runs strictly after the student
    update. Returns (loss, tau, target_stats).
    """
    teacher_out, _ = encoder_forward(teacher.weights, cfgm, x)
    targets = data2vec.build_targets(teacher_out.hiddens, pcfg.top_k).targets.astype(x.dtype)
    tstats = data2vec.target_stats(targets)

    loss, _, grads = masked_prediction_loss_grads(params, cfgm, x, masks, targets)
    if not math.isfinite(loss):
        raise TrainingDivergedError("non-finite pretraining loss")
    if pcfg.clip_norm:
        optim.clip_global_norm(grads, pcfg.clip_norm)
    optim.adamw_step(params, grads, opt_state, lr, pcfg.weight_decay, pcfg.decay_mode)

    tau = data2vec.tau_at(teacher.update_count, tau_sched)
    data2vec.ema_update(teacher, params, tau)
    return loss, tau, tstats


def _pretrain_header(cfg, cfgm, mean, std, epoch, step, teacher_updates, opt_step):
    return {
        "kind": "pretrain",
        "variant": cfg.model.variant,
        "model": asdict_kwt(cfgm),
        "config": cfg.to_dict(),
        "epoch": epoch,
        "global_step": step,
        "seed": cfg.seed,
        "feat_mean": [float(v) for v in mean],
        "feat_std": [float(v) for v in std],
        "teacher_update_count": teacher_updates,
        "opt_step": opt_step,
    }


def run_pretrain(
    cfg: RunConfig, resume_from: str | Path | None = None, stop_after_epoch: int | None = None
) -> dict:
    """Masked-prediction pretraining over an unlabelled manifest.

    Saves ckpt-last.bin (student, optimizer, teacher, counters) per epoch;
    with resume_from, continues exactly where that checkpoint stopped (the
    schedule horizon stays cfg.pretrain.epochs, so a stopped-and-resumed run
    reproduces an uninterrupted one bit for bit). stop_after_epoch ends the
    run early without shortening the schedule. Logs tau and the
    target-variance collapse diagnostic every epoch and warns prominently on
    a sustained collapse signal.
    """
    deterministic = resolve_deterministic(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_classes = len(load_classes(cfg.data.classes_file)) if cfg.data.classes_file else max(cfg.model.n_classes, 1)
    cfgm = cfg.model_config(n_classes=max(n_classes, 1))
    man = Manifest.load(cfg.data.train_manifest)
    provider = _prepare_features(cfg, [man])

    pcfg = cfg.pretrain
    tau_sched = data2vec.TauSchedule(pcfg.tau0, pcfg.tau_end, pcfg.n_tau)
    steps_per_epoch = math.ceil(len(man) / pcfg.batch_size)
    sched = optim.one_cycle_schedule(pcfg.eta_peak, pcfg.epochs, steps_per_epoch)

    start_epoch = 1
    global_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.header.get("kind") != "pretrain":
            raise CheckpointError(f"{resume_from}: not a pretraining checkpoint")
        if ckpt.header.get("variant") != cfg.model.variant:
            raise CheckpointError(
                f"variant mismatch: checkpoint {ckpt.header.get('variant')!r} vs config {cfg.model.variant!r}"
            )
        params = strip_prefix("params.", ckpt.tensors)
        teacher = data2vec.TeacherState(
            weights=strip_prefix("teacher.", ckpt.tensors),
            update_count=int(ckpt.header["teacher_update_count"]),
        )
        opt_state = optim.init_optimizer(params)
        opt_state.m = strip_prefix("opt.m.", ckpt.tensors)
        opt_state.v = strip_prefix("opt.v.", ckpt.tensors)
        opt_state.step = int(ckpt.header["opt_step"])
        mean = np.array(ckpt.header["feat_mean"], dtype=np.float32)
        std = np.array(ckpt.header["feat_std"], dtype=np.float32)
        start_epoch = int(ckpt.header["epoch"]) + 1
        global_step = int(ckpt.header["global_step"])
        log.info("resuming pretraining from %s at epoch %d", resume_from, start_epoch)
    else:
        params = init_params(cfgm, substream(cfg.seed, "init"), "pretrain")
        teacher = data2vec.init_teacher(params)
        opt_state = optim.init_optimizer(params)
        mean, std = feature_stats(provider.snapshot(man))

    _write_config_snapshot(cfg, out_dir, "random" if resume_from is None else str(resume_from), deterministic)
    metrics = MetricsWriter(out_dir / "metrics.csv", deterministic, append=resume_from is not None)
    monitor = data2vec.CollapseMonitor()
    last_epoch = pcfg.epochs if stop_after_epoch is None else min(pcfg.epochs, stop_after_epoch)
    try:
        for epoch in range(start_epoch, last_epoch + 1):
            t0 = time.perf_counter()
            loss_sum = 0.0
            n_seen = 0
            var_sum = 0.0
            n_batches = 0
            tau = 0.0
            lr = 0.0
            for batch_idx, batch in enumerate(batches(man, pcfg.batch_size, cfg.seed, epoch, provider)):
                x = standardize(batch.features, mean, std)
                mask_rng = substream(cfg.seed, "mask", epoch, batch_idx)
                masks = np.stack(
                    [data2vec.sample_mask(cfgm.seq_len, pcfg.p_mask, pcfg.n_mask, mask_rng).masked
                     for _ in range(len(batch.ids))]
                )
                lr = optim.schedule_lr(sched, global_step)
                loss, tau, tstats = pretrain_step(
                    params, teacher, cfgm, x, masks, opt_state, lr, pcfg, tau_sched
                )
                b = len(batch.ids)
                loss_sum += loss * b
                var_sum += tstats["mean_variance"]
                n_seen += b
                n_batches += 1
                global_step += 1
            target_var = var_sum / n_batches
            metrics.row(epoch, "train", loss=loss_sum / n_seen, lr=lr, tau=tau,
                        target_variance=target_var, wall=time.perf_counter() - t0)
            log.info("pretrain epoch %d/%d loss=%.4f tau=%.6f target_var=%.4f",
                     epoch, pcfg.epochs, loss_sum / n_seen, tau, target_var)
            if monitor.update(target_var):
                log.warning(
                    "POSSIBLE REPRESENTATION COLLAPSE: target variance %.5f below %.2f for %d consecutive "
                    "epochs; continuing", target_var, monitor.threshold, monitor.patience,
                )

            tensors = (
                with_prefix("params.", params)
                | with_prefix("opt.m.", opt_state.m)
                | with_prefix("opt.v.", opt_state.v)
                | with_prefix("teacher.", teacher.weights)
            )
            header = _pretrain_header(cfg, cfgm, mean, std, epoch, global_step, teacher.update_count, opt_state.step)
            save_checkpoint(out_dir / "ckpt-last.bin", header, tensors)
    finally:
        metrics.close()
    return {
        "last_checkpoint": out_dir / "ckpt-last.bin",
        "metrics": out_dir / "metrics.csv",
    }


def run_finetune(cfg: RunConfig, ckpt_path: str | Path) -> dict:
    """Fine-tune from a pretraining checkpoint with the supervised recipe.

    Loads the student encoder weights (regression head, mask token and teacher
    are discarded), attaches a freshly initialized classification head, and
    inherits the pretraining feature-normalization stats. Aborts on a variant
    mismatch.
    """
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.header.get("kind") != "pretrain":
        raise CheckpointError(f"{ckpt_path}: expected a pretraining checkpoint, got kind={ckpt.header.get('kind')!r}")
    if ckpt.header.get("variant") != cfg.model.variant:
        raise CheckpointError(
            f"variant mismatch: checkpoint is {ckpt.header.get('variant')!r}, config wants {cfg.model.variant!r}"
        )
    student = strip_prefix("params.", ckpt.tensors)
    encoder = {k: v for k, v in student.items() if data2vec.is_encoder_param(k)}
    mean = np.array(ckpt.header["feat_mean"], dtype=np.float32)
    std = np.array(ckpt.header["feat_std"], dtype=np.float32)
    return run_supervised(cfg, init_encoder=encoder, init_source=str(ckpt_path), feat_stats=(mean, std))


def run_evaluate(
    ckpt_path: str | Path,
    manifest_path: str | Path,
    data_root: str | Path | None = None,
    classes_file: str | Path | None = None,
    report_path: str | Path | None = None,
    batch_size: int = 256,
) -> dict:
    """Evaluate a supervised checkpoint on a labelled manifest.

    Eval-mode forward only (no SpecAugment, no masking). Writes a per-class
    accuracy CSV and returns overall accuracy plus the per-class table.
    Aborts if the manifest's class map disagrees with the checkpoint's.
    """
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.header.get("kind") != "supervised":
        raise CheckpointError(f"{ckpt_path}: expected a supervised checkpoint, got kind={ckpt.header.get('kind')!r}")
    class_map = {k: int(v) for k, v in ckpt.header["class_map"].items()}
    if classes_file is not None:
        external = load_classes(classes_file)
        if external != class_map:
            raise CheckpointError("manifest class map disagrees with the checkpoint's class map")
    cfgm = kwt_from_dict(ckpt.header["model"])
    params = strip_prefix("params.", ckpt.tensors)
    snap = ckpt.header["config"]
    root = data_root if data_root is not None else snap["data"]["data_root"]
    provider = MfccFeatureProvider(root, MfccSection(**snap["mfcc"]).to_mfcc_config())
    manifest = Manifest.load(manifest_path, class_map)
    if any(r.label is None for r in manifest.rows):
        raise ValueError(f"{manifest_path}: evaluation needs a fully labelled manifest")
    mean = np.array(ckpt.header["feat_mean"], dtype=np.float32)
    std = np.array(ckpt.header["feat_std"], dtype=np.float32)
    loss, acc, per_class = _eval_pass(params, cfgm, manifest, provider, mean, std, batch_size, smoothing=0.0)

    names = sorted(class_map, key=class_map.get)
    if report_path is None:
        report_path = Path(ckpt_path).parent / "per_class_report.csv"
    with open(report_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("class,index,count,correct,accuracy\n")
        for idx, name in enumerate(names):
            count, correct = int(per_class[idx, 0]), int(per_class[idx, 1])
            cls_acc = correct / count if count else float("nan")
            fh.write(f"{name},{idx},{count},{correct},{repr(cls_acc)}\n")
        fh.write(f"__overall__,,{int(per_class[:, 0].sum())},{int(per_class[:, 1].sum())},{repr(acc)}\n")
    return {
        "accuracy": acc,
        "loss": loss,
        "per_class": {names[i]: (int(per_class[i, 0]), int(per_class[i, 1])) for i in range(len(names))},
        "report": Path(report_path),
    }
