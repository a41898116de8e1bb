"""End-to-end orchestration: baseline training, the compression co-design
loop (periodic PCA + partition refresh, soft-mixing fine-tuning with dynamic
bit-width search), policy freezing, evaluation, and parameter sweeps.

Every run is fully determined by (seed, config): all randomness flows from
one seeded generator, and outputs are written atomically.
"""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .config import RunConfig, config_hash, dump_config
from .data import DatasetSplit, load_dataset
from .losses import LossConfig, expected_average_bits, kd_loss, memory_loss, total_loss
from .model import ActivationCompressor, CompressionPoint, DeskCnn, FrozenCompressor
from .nn import accuracy, cross_entropy
from .partition import LayerSpectrum, build_partition, greedy_rank
from .policy import CompressionPolicy, GroupPolicy, LayerPolicy, load_policy, save_policy
from .search import DynamicBitSearch
from .tensor import SGD, Tensor, no_grad
from .transform import fit_pca

STEP_COLUMNS = ["step", "epoch", "memory_loss", "kd_loss", "total_loss",
                "expected_avg_bits"]
EPOCH_COLUMNS = ["epoch", "expected_avg_bits", "kd_loss"]
SHIFT_COLUMNS = ["step", "layer", "group", "old_bits", "new_bits"]
BITS_COLUMNS = ["layer", "group", "channels", "bits"]
SWEEP_COLUMNS = ["p", "groups", "avg_bits", "accuracy", "on_frontier"]


# ---------------------------------------------------------------------------
# data plumbing


def _norm_stats(split: DatasetSplit) -> dict[str, np.ndarray]:
    x = split.images.astype(np.float32) / 255.0
    return {"mean": x.mean(axis=(0, 2, 3)), "std": x.std(axis=(0, 2, 3)) + 1e-6}


def _normalize(images_u8: np.ndarray, stats: dict[str, np.ndarray]) -> np.ndarray:
    x = images_u8.astype(np.float32) / np.float32(255.0)
    return (x - stats["mean"][None, :, None, None]) / stats["std"][None, :, None, None]


def _batch_ranges(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def _eval_accuracy(net: DeskCnn, split: DatasetSplit, stats, batch_size: int,
                   compressor=None, limit: int | None = None) -> float:
    hits = 0
    total = 0
    n = len(split) if limit is None else min(limit, len(split))
    with no_grad():
        for idx in _batch_ranges(n, batch_size):
            x = Tensor(_normalize(split.images[idx], stats))
            logits = net.forward(x, training=False, compressor=compressor)
            hits += int(np.sum(np.argmax(logits.data, axis=1) == split.labels[idx]))
            total += len(idx)
    return 100.0 * hits / total


def _write_csv(path: Path, columns: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# baseline training


def run_train_baseline(config: RunConfig, out_dir: str | Path) -> dict:
    """Train the float CNN with cross-entropy, then fix its weights at 8 bits
    and record the resulting reference accuracy."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, evals = load_dataset(config.dataset_dir, config.dataset_format,
                                config.num_classes)
    stats = _norm_stats(train)
    rng = np.random.default_rng(config.seed)
    net = DeskCnn(in_channels=train.images.shape[1], num_classes=config.num_classes,
                  image_size=train.images.shape[2], rng=rng)
    opt = SGD(net.params(), lr=config.baseline_lr, momentum=config.momentum)
    last_loss = float("nan")
    for epoch in range(config.baseline_epochs):
        order = rng.permutation(len(train))
        for idx in _batch_ranges(len(train), config.batch_size):
            batch = order[idx]
            x = Tensor(_normalize(train.images[batch], stats))
            logits = net.forward(x, training=True)
            loss = cross_entropy(logits, train.labels[batch])
            last_loss = loss.item()
            if not np.isfinite(last_loss):
                raise RuntimeError(f"baseline training diverged: loss={last_loss} "
                                   f"at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    float_acc = _eval_accuracy(net, evals, stats, config.batch_size)
    net.quantize_weights = True
    baseline_acc = _eval_accuracy(net, evals, stats, config.batch_size)

    ckpt_path = out_dir / "baseline.ckpt"
    state = net.state_dict()
    state["norm.mean"] = stats["mean"]
    state["norm.std"] = stats["std"]
    state["meta.float_acc"] = np.asarray(float_acc, dtype=np.float32).reshape(())
    state["meta.baseline_acc"] = np.asarray(baseline_acc, dtype=np.float32).reshape(())
    save_tensors(ckpt_path, state)
    (out_dir / "config.cfg").write_text(dump_config(config))
    return {
        "checkpoint": str(ckpt_path),
        "float_accuracy": float_acc,
        "baseline_accuracy": baseline_acc,
        "epochs": config.baseline_epochs,
        "final_loss": last_loss,
    }


def _load_net(checkpoint_path: str | Path, config: RunConfig):
    state = load_tensors(checkpoint_path)
    in_ch = state["conv0.weight"].shape[1]
    num_classes = state["fc2.weight"].shape[0]
    feat = state["fc1.weight"].shape[1]
    spatial = int(np.sqrt(feat / DeskCnn.CHANNELS[-1]))
    pools = sum(DeskCnn.POOL)
    image_size = spatial * (2 ** pools)
    net = DeskCnn(in_channels=in_ch, num_classes=num_classes, image_size=image_size)
    net.load_state_dict(state)
    stats = {"mean": state["norm.mean"], "std": state["norm.std"]}
    meta = {k.split(".", 1)[1]: float(v) for k, v in state.items()
            if k.startswith("meta.")}
    return net, stats, meta


# ---------------------------------------------------------------------------
# the co-design loop


def _capture_activations(net: DeskCnn, compressor: ActivationCompressor,
                         images: np.ndarray, stats, batch_size: int) -> dict:
    compressor.capture = {}
    compressor.update_calib = False
    with no_grad():
        for idx in _batch_ranges(len(images), batch_size):
            x = Tensor(_normalize(images[idx], stats))
            net.forward(x, training=False, compressor=compressor)
    captured = {k: np.concatenate(v, axis=0) for k, v in compressor.capture.items()}
    compressor.capture = None
    return captured


def _prune_only_specs(transforms, kept: list[int]):
    """Frozen-compressor specs that only zero the pruned tail of each layer."""
    specs = []
    for tr, k in zip(transforms, kept):
        sizes = [k, tr.channels - k]
        specs.append((tr, sizes, [None]))
    return specs


def _probe_prune_thresholds(config: RunConfig, net: DeskCnn, transforms, spectra,
                            images, labels, stats) -> tuple[float, ...]:
    """Find the largest global prune count whose sample-set accuracy drop stays
    within the configured budget, then split the remainder evenly."""
    state = greedy_rank(spectra, sum(sp.channels - 1 for sp in spectra))
    log = state.removal_log
    total_channels = sum(sp.channels for sp in spectra)

    def acc_with_prefix(k: int) -> float:
        kept = [sp.channels for sp in spectra]
        for li, _ in log[:k]:
            kept[li] -= 1
        fz = FrozenCompressor(_prune_only_specs(transforms, kept))
        hits = 0
        with no_grad():
            for idx in _batch_ranges(len(images), config.batch_size):
                x = Tensor(_normalize(images[idx], stats))
                logits = net.forward(x, training=False, compressor=fz)
                hits += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        return 100.0 * hits / len(images)

    base = acc_with_prefix(0)
    lo, hi = 0, len(log)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if base - acc_with_prefix(mid) <= config.prune_accuracy_budget:
            lo = mid
        else:
            hi = mid - 1
    prune_fraction = lo / total_channels
    if prune_fraction <= 0.0:
        prune_fraction = 1e-9            # thresholds must stay positive
    rest = (1.0 - prune_fraction) / (config.groups - 1)
    return tuple(min(prune_fraction + j * rest, 1.0) for j in range(config.groups - 1))


def _refit(config: RunConfig, net: DeskCnn, compressor: ActivationCompressor,
           calib_images, calib_labels, stats) -> tuple[float, ...]:
    captured = _capture_activations(net, compressor, calib_images, stats,
                                    config.batch_size)
    transforms = [fit_pca(captured[pt.layer_id], layer_id=pt.layer_id)
                  for pt in compressor.points]
    spectra = [LayerSpectrum(tr.sigmas(), pt.height, pt.width)
               for tr, pt in zip(transforms, compressor.points)]
    thresholds = config.thresholds or _probe_prune_thresholds(
        config, net, transforms, spectra, calib_images, calib_labels, stats)
    part = build_partition(spectra, config.groups, list(thresholds))
    for i, (pt, tr) in enumerate(zip(compressor.points, transforms)):
        pt.set_partition(tr, part.group_sizes[i])
    return tuple(thresholds)


def _freeze_policy(compressor: ActivationCompressor, config: RunConfig,
                   seed: int) -> CompressionPolicy:
    layers = []
    for pt in compressor.points:
        groups = []
        for module in pt.modules:
            k = module.argmax_branch()
            lo, hi = module.calib.range()
            # store the exact float32 values that inference will use
            groups.append(GroupPolicy(bit_width=module.bits[k],
                                      lo=float(np.float32(lo)),
                                      hi=float(np.float32(hi))))
        layers.append(LayerPolicy(layer_id=pt.layer_id, height=pt.height,
                                  width=pt.width, group_sizes=list(pt.group_sizes),
                                  groups=groups, transform=pt.transform))
    policy = CompressionPolicy(layers=layers, num_groups=config.groups,
                               b_min=config.b_min, avg_bits=0.0, seed=seed,
                               config_hash=config_hash(config))
    policy.avg_bits = policy.average_bits()
    return policy.validate()


def run_compress(config: RunConfig, checkpoint_path: str | Path,
                 out_dir: str | Path) -> dict:
    """The three-step co-design loop: per refit period sort channels by PCA and
    partition them, then fine-tune with soft branch mixing under the
    memory + distillation objective while the dynamic search slides bit-widths
    down. Returns the frozen policy plus run metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, evals = load_dataset(config.dataset_dir, config.dataset_format,
                                config.num_classes)
    teacher, stats, meta = _load_net(checkpoint_path, config)
    teacher.quantize_weights = True
    student = teacher.clone()
    student.quantize_weights = True

    rng = np.random.default_rng(config.seed)
    n_fine = min(config.finetune_samples, len(train))
    fine_idx = rng.choice(len(train), size=n_fine, replace=False)
    n_calib = min(config.calib_samples, len(train))
    calib_idx = rng.choice(len(train), size=n_calib, replace=False)
    calib_images = train.images[calib_idx]
    calib_labels = train.labels[calib_idx]

    dims = student.compression_dims()
    points = [CompressionPoint(i, c, h, w, config.groups, config.init_bits,
                               config.ema_decay)
              for i, (c, h, w) in enumerate(dims)]
    compressor = ActivationCompressor(points, mode="soft")
    searches = [DynamicBitSearch(m, patience_limit=config.patience,
                                 min_bits=config.b_min,
                                 consecutive=config.patience_mode == "consecutive")
                for pt in points for m in pt.modules]

    # teacher outputs are frozen; cache them once for the fine-tune subset
    teacher_logits = np.zeros((n_fine, config.num_classes), dtype=np.float32)
    with no_grad():
        for idx in _batch_ranges(n_fine, config.batch_size):
            x = Tensor(_normalize(train.images[fine_idx[idx]], stats))
            teacher_logits[idx] = teacher.forward(x, training=False).data

    loss_cfg = LossConfig(penalty=config.p, normalizer=compressor.total_values())
    params = student.params() + [m.arch_params for pt in points for m in pt.modules]
    opt = SGD(params, lr=config.lr, momentum=config.momentum)

    step_rows: list[list] = []
    epoch_rows: list[list] = []
    thresholds_used: tuple[float, ...] = ()
    step = 0
    for epoch in range(config.epochs):
        if epoch % config.refit_every == 0:
            thresholds_used = _refit(config, student, compressor, calib_images,
                                     calib_labels, stats)
        order = rng.permutation(n_fine)
        kd_sum = 0.0
        nsteps = 0
        for idx in _batch_ranges(n_fine, config.batch_size):
            batch = fine_idx[order[idx]]
            x = Tensor(_normalize(train.images[batch], stats))
            compressor.mode = "soft"
            compressor.update_calib = True
            logits = student.forward(x, training=True, compressor=compressor)
            mem = memory_loss(list(compressor.iter_group_terms()), loss_cfg)
            kd = kd_loss(logits, Tensor(teacher_logits[order[idx]]))
            loss = total_loss(mem, kd)
            mem_v, kd_v, loss_v = mem.item(), kd.item(), loss.item()
            if not np.isfinite(loss_v):
                raise RuntimeError(f"compression fine-tune diverged at epoch {epoch} "
                                   f"step {step}: memory={mem_v} kd={kd_v}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            for search in searches:
                search.observe(step)
            ebits = expected_average_bits(list(compressor.iter_group_terms()),
                                          compressor.total_values())
            step_rows.append([step, epoch, f"{mem_v:.6f}", f"{kd_v:.6f}",
                              f"{loss_v:.6f}", f"{ebits:.6f}"])
            kd_sum += kd_v
            nsteps += 1
            step += 1
        compressor.update_calib = False
        ebits = expected_average_bits(list(compressor.iter_group_terms()),
                                      compressor.total_values())
        epoch_rows.append([epoch, f"{ebits:.6f}", f"{kd_sum / max(nsteps, 1):.6f}"])

    policy = _freeze_policy(compressor, config, config.seed)
    policy_path = out_dir / "policy.acpl"
    save_policy(policy_path, policy)

    ckpt_path = out_dir / "compressed.ckpt"
    state = student.state_dict()
    state["norm.mean"] = stats["mean"]
    state["norm.std"] = stats["std"]
    for key, val in meta.items():
        state[f"meta.{key}"] = np.asarray(val, dtype=np.float32).reshape(())
    save_tensors(ckpt_path, state)

    compressor.mode = "soft"
    compressor.update_calib = False
    soft_acc = _eval_accuracy(student, evals, stats, config.batch_size,
                              compressor=compressor)
    hard_acc = _eval_accuracy(student, evals, stats, config.batch_size,
                              compressor=FrozenCompressor(policy.frozen_layer_specs()))

    shift_rows = [[ev.step, ev.layer_id, ev.group_id,
                   "-".join(str(b) for b in ev.old_bits),
                   "-".join(str(b) for b in ev.new_bits)]
                  for search in searches for ev in search.events]
    shift_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    bits_rows = []
    for pt in points:
        for g, size in enumerate(pt.group_sizes):
            pruned = g == config.groups - 1
            bits = 0 if pruned else pt.modules[g].bits[pt.modules[g].argmax_branch()]
            bits_rows.append([pt.layer_id, g, size, bits])
    _write_csv(out_dir / "steps.csv", STEP_COLUMNS, step_rows)
    _write_csv(out_dir / "epochs.csv", EPOCH_COLUMNS, epoch_rows)
    _write_csv(out_dir / "shifts.csv", SHIFT_COLUMNS, shift_rows)
    _write_csv(out_dir / "final_bits.csv", BITS_COLUMNS, bits_rows)
    (out_dir / "config.cfg").write_text(dump_config(config))

    max_weights = [float(np.max(m.mixing_weights()))
                   for pt in points for m in pt.modules if pt.group_sizes[m.group_id] > 0]
    result = {
        "policy": str(policy_path),
        "checkpoint": str(ckpt_path),
        "avg_bits": policy.avg_bits,
        "soft_accuracy": soft_acc,
        "hard_accuracy": hard_acc,
        "baseline_accuracy": meta.get("baseline_acc"),
        "num_shifts": sum(1 for s in searches for e in s.events if e.note == ""),
        "min_dominant_weight": min(max_weights) if max_weights else 1.0,
        "thresholds": list(thresholds_used),
        "reports": {
            "steps": str(out_dir / "steps.csv"),
            "epochs": str(out_dir / "epochs.csv"),
            "shifts": str(out_dir / "shifts.csv"),
            "final_bits": str(out_dir / "final_bits.csv"),
        },
    }
    (out_dir / "compress_result.json").write_text(json.dumps(result, indent=2))
    return result


# ---------------------------------------------------------------------------
# evaluation and sweeps


def run_evaluate(policy_path: str | Path, checkpoint_path: str | Path,
                 config: RunConfig) -> dict:
    policy = load_policy(policy_path)
    _train, evals = load_dataset(config.dataset_dir, config.dataset_format,
                                 config.num_classes)
    net, stats, _meta = _load_net(checkpoint_path, config)
    net.quantize_weights = True
    dims = net.compression_dims()
    if len(dims) != len(policy.layers) or any(
            d != layer.channels for (d, _, _), layer in zip(dims, policy.layers)):
        raise ValueError(f"policy layer shapes "
                         f"{[layer.channels for layer in policy.layers]} do not match "
                         f"model compression points {[d for d, _, _ in dims]}")
    acc = _eval_accuracy(net, evals, stats, config.batch_size,
                         compressor=FrozenCompressor(policy.frozen_layer_specs()))
    return {
        "accuracy": acc,
        "avg_bits": policy.average_bits(),
        "layers": policy.summary()["layers"],
    }


def pareto_frontier(rows: list[dict]) -> list[bool]:
    """True for rows not dominated by any other (lower-or-equal bits and
    higher-or-equal accuracy, one strict)."""
    flags = []
    for a in rows:
        dominated = any(
            (b["avg_bits"] <= a["avg_bits"] and b["accuracy"] >= a["accuracy"]
             and (b["avg_bits"] < a["avg_bits"] or b["accuracy"] > a["accuracy"]))
            for b in rows)
        flags.append(not dominated)
    return flags


def run_sweep(config: RunConfig, p_values: list[float], group_values: list[int],
              checkpoint_path: str | Path, out_dir: str | Path) -> dict:
    """Compress + evaluate per grid cell against one shared baseline."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for groups in group_values:
        for p in p_values:
            cell_cfg = replace(config, p=p, groups=groups)
            if len(cell_cfg.thresholds) != groups - 1:
                cell_cfg = replace(cell_cfg, thresholds=())
            cell_dir = out_dir / f"cell_g{groups}_p{p:g}"
            res = run_compress(cell_cfg, checkpoint_path, cell_dir)
            rows.append({"p": p, "groups": groups, "avg_bits": res["avg_bits"],
                         "accuracy": res["hard_accuracy"]})
    flags = pareto_frontier(rows)
    csv_rows = [[f"{r['p']:g}", r["groups"], f"{r['avg_bits']:.6f}",
                 f"{r['accuracy']:.6f}", int(f)]
                for r, f in zip(rows, flags)]
    _write_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, csv_rows)
    for r, f in zip(rows, flags):
        r["on_frontier"] = bool(f)
    return {"csv": str(out_dir / "sweep.csv"), "rows": rows}


REPORT_SCHEMAS = {
    "steps.csv": STEP_COLUMNS,
    "epochs.csv": EPOCH_COLUMNS,
    "shifts.csv": SHIFT_COLUMNS,
    "final_bits.csv": BITS_COLUMNS,
}


def read_report(run_dir: str | Path) -> dict:
    """Validate a finished run directory: required CSVs present with the
    documented headers."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    files = {}
    for name, columns in REPORT_SCHEMAS.items():
        path = run_dir / name
        if not path.exists():
            raise FileNotFoundError(f"missing report file: {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, [])
            if header != columns:
                raise ValueError(f"{path}: header {header} does not match "
                                 f"expected {columns}")
            files[name] = {"columns": header, "rows": sum(1 for _ in reader)}
    sweep_path = run_dir / "sweep.csv"
    if sweep_path.exists():
        with open(sweep_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, [])
            if header != SWEEP_COLUMNS:
                raise ValueError(f"{sweep_path}: header {header} does not match "
                                 f"expected {SWEEP_COLUMNS}")
            files["sweep.csv"] = {"columns": header, "rows": sum(1 for _ in reader)}
    return {"run_dir": str(run_dir), "files": files}
