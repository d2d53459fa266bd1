"""Training schedule, checkpointing, prediction, evaluation, curve smoothing.

A run loads its manifest, resizes images to the network input shape with
trilinearly-downsampled soft targets, then performs epochs x
iterations_per_epoch single-batch Adam steps (adversarial steps for M4/M5).
Every eval_interval epochs each non-empty split is scored at full resolution
and appended to that split's metrics CSV; the latest and best-validation
checkpoints are saved.  Runs are deterministic given the seed.
"""

from __future__ import annotations

import json
import os
import struct
from contextlib import ExitStack
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .adversarial import Critic, CriticConfig, WganStepReport, build_critic, wgan_train_step
from .metrics import MetricsReport, average_annotations, evaluate_full
from .models import ARCHITECTURE_OF_VARIANT, Model, ModelConfig, build_model, forward
from .optim import AdamState, OptimConfig
from .resample import MaskVolume, Volume, resample_trilinear, threshold
from .tensor import Tensor, default_dtype, no_grad
from .volume_io import read_manifest, read_volume, write_volume


class TrainingError(RuntimeError):
    pass


METRICS_CSV_HEADER = "epoch,jaccard,dice,precision,recall,avd,ap,loss"
LOSSES_CSV_HEADER = "iteration,bce,adversarial,wasserstein,total"


def volume_to_tensor(v: Volume) -> Tensor:
    return Tensor(v.voxels[None, None], requires_grad=False)


def tensor_to_volume(t: Tensor) -> Volume:
    if t.data.ndim != 5 or t.data.shape[0] != 1 or t.data.shape[1] != 1:
        raise ValueError(f"expected a (1,1,D,H,W) tensor, got {tuple(t.data.shape)}")
    return Volume.from_voxels(np.ascontiguousarray(t.data[0, 0]))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"VSCK"
CKPT_VERSION = 1


class _CkptReader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise ValueError(f"truncated checkpoint {self.path} at byte {self.offset}: "
                             f"need {n} bytes for {what}, have {len(self.blob) - self.offset}")
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str, what: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def remaining(self) -> int:
        return len(self.blob) - self.offset


def save_checkpoint(path, config: dict, params: dict[str, Tensor],
                    bn_states: dict, optim_state: AdamState | None = None,
                    metadata: dict | None = None) -> None:
    """Binary layout: magic, version, JSON config echo, named f32 parameter
    tensors, batchnorm running statistics, optional Adam state."""
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    echo = json.dumps({"config": config, "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(echo)) + echo
    blob += struct.pack("<I", len(params))
    for name, t in params.items():
        nb = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f4")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    blob += struct.pack("<I", len(bn_states))
    for name, st in bn_states.items():
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<I", st.running_mean.size)
        blob += struct.pack("<dd", st.momentum, st.epsilon)
        blob += np.ascontiguousarray(st.running_mean, dtype="<f4").tobytes()
        blob += np.ascontiguousarray(st.running_var, dtype="<f4").tobytes()
    if optim_state is None:
        blob += struct.pack("<B", 0)
    else:
        blob += struct.pack("<B", 1)
        blob += struct.pack("<Q", optim_state.t)
        for name in params:
            blob += np.ascontiguousarray(optim_state.m[name], dtype="<f4").tobytes()
            blob += np.ascontiguousarray(optim_state.v[name], dtype="<f4").tobytes()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    path = os.fspath(path)
    with open(path, "rb") as f:
        r = _CkptReader(f.read(), path)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic at byte 0 in {path}: {magic!r} (want {CKPT_MAGIC!r})")
    (version,) = r.unpack("I", "version")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} in {path}")
    (echo_len,) = r.unpack("I", "config echo length")
    echo = json.loads(r.take(echo_len, "config echo").decode("utf-8"))
    (n_params,) = r.unpack("I", "parameter count")
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (nlen,) = r.unpack("H", "parameter name length")
        name = r.take(nlen, "parameter name").decode("utf-8")
        (rank,) = r.unpack("B", f"rank of {name!r}")
        shape = tuple(r.unpack(f"{rank}I", f"extents of {name!r}")) if rank else ()
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        params[name] = np.frombuffer(r.take(4 * count, f"data of {name!r}"), dtype="<f4").reshape(shape).copy()
    (n_bn,) = r.unpack("I", "batchnorm state count")
    bn: dict[str, dict] = {}
    for _ in range(n_bn):
        (nlen,) = r.unpack("H", "batchnorm name length")
        name = r.take(nlen, "batchnorm name").decode("utf-8")
        (channels,) = r.unpack("I", f"channels of {name!r}")
        momentum, epsilon = r.unpack("dd", f"constants of {name!r}")
        mean = np.frombuffer(r.take(4 * channels, f"running mean of {name!r}"), dtype="<f4").copy()
        var = np.frombuffer(r.take(4 * channels, f"running variance of {name!r}"), dtype="<f4").copy()
        bn[name] = {"momentum": momentum, "epsilon": epsilon, "running_mean": mean, "running_var": var}
    (has_adam,) = r.unpack("B", "optimizer flag")
    adam = None
    if has_adam:
        (t,) = r.unpack("Q", "optimizer step count")
        adam = {"t": int(t), "m": {}, "v": {}}
        for name, arr in params.items():
            adam["m"][name] = np.frombuffer(r.take(4 * arr.size, f"first moment of {name!r}"),
                                            dtype="<f4").reshape(arr.shape).copy()
            adam["v"][name] = np.frombuffer(r.take(4 * arr.size, f"second moment of {name!r}"),
                                            dtype="<f4").reshape(arr.shape).copy()
    if r.remaining:
        raise ValueError(f"trailing {r.remaining} bytes at offset {r.offset} in {path}")
    return {"config": echo["config"], "metadata": echo["metadata"], "params": params, "bn": bn, "adam": adam}


def _restore_adam(raw: dict, params: dict[str, Tensor]) -> AdamState | None:
    if raw["adam"] is None:
        return None
    state = AdamState(params)
    state.t = raw["adam"]["t"]
    for name in params:
        state.m[name] = raw["adam"]["m"][name].astype(default_dtype())
        state.v[name] = raw["adam"]["v"][name].astype(default_dtype())
    return state


def save_model(path, model: Model, optim_state: AdamState | None = None,
               metadata: dict | None = None) -> None:
    config = {"kind": "model", "model": asdict(model.config)}
    save_checkpoint(path, config, model.parameters, model.batchnorm_states, optim_state, metadata)


def load_model(path) -> tuple[Model, AdamState | None, dict]:
    raw = load_checkpoint(path)
    if raw["config"].get("kind") != "model":
        raise ValueError(f"checkpoint {path} holds {raw['config'].get('kind')!r}, not a model")
    cfg = ModelConfig(**raw["config"]["model"])
    model = build_model(cfg, seed=int(raw["metadata"].get("seed", 0)))
    if set(model.parameters) != set(raw["params"]):
        raise ValueError(f"checkpoint {path}: parameter names do not match the configured architecture")
    for name, arr in raw["params"].items():
        p = model.parameters[name]
        if p.data.shape != arr.shape:
            raise ValueError(f"checkpoint {path}: parameter {name!r} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr.astype(default_dtype())
    if set(model.batchnorm_states) != set(raw["bn"]):
        raise ValueError(f"checkpoint {path}: batchnorm state names do not match the architecture")
    for name, st in raw["bn"].items():
        state = model.batchnorm_states[name]
        state.running_mean = st["running_mean"].astype(default_dtype())
        state.running_var = st["running_var"].astype(default_dtype())
        state.momentum = st["momentum"]
        state.epsilon = st["epsilon"]
    return model, _restore_adam(raw, model.parameters), raw["metadata"]


def save_critic(path, critic: Critic, optim_state: AdamState | None = None,
                metadata: dict | None = None) -> None:
    config = {"kind": "critic", "critic": asdict(critic.config)}
    save_checkpoint(path, config, critic.parameters, {}, optim_state, metadata)


def load_critic(path) -> tuple[Critic, AdamState | None, dict]:
    raw = load_checkpoint(path)
    if raw["config"].get("kind") != "critic":
        raise ValueError(f"checkpoint {path} holds {raw['config'].get('kind')!r}, not a critic")
    cfg = CriticConfig(**raw["config"]["critic"])
    critic = build_critic(cfg, seed=int(raw["metadata"].get("seed", 0)))
    if set(critic.parameters) != set(raw["params"]):
        raise ValueError(f"checkpoint {path}: parameter names do not match the critic architecture")
    for name, arr in raw["params"].items():
        critic.parameters[name].data = arr.astype(default_dtype())
    return critic, _restore_adam(raw, critic.parameters), raw["metadata"]


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainRun:
    variant: str
    epochs: int
    manifest_path: str
    out_dir: str
    iterations_per_epoch: int = 10
    batch_size: int = 1
    seed: int = 0
    eval_interval: int = 10
    eval_train_limit: int = 8
    deterministic: bool = True
    lambda_adv: float = 0.01
    stop_at_train_jaccard: float | None = None

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in ARCHITECTURE_OF_VARIANT:
            raise ValueError(f"unknown variant {self.variant!r} (want M1..M5)")
        for name, low in (("epochs", 1), ("iterations_per_epoch", 1), ("batch_size", 1),
                          ("eval_interval", 1), ("eval_train_limit", 0)):
            if getattr(self, name) < low:
                raise ValueError(f"{name} must be >= {low}, got {getattr(self, name)}")
        if self.lambda_adv < 0:
            raise ValueError(f"lambda_adv must be >= 0, got {self.lambda_adv}")
        if self.stop_at_train_jaccard is not None and not 0.0 < self.stop_at_train_jaccard <= 1.0:
            raise ValueError(f"stop_at_train_jaccard must lie in (0,1], got {self.stop_at_train_jaccard}")


@dataclass
class _EvalItem:
    x: Tensor
    target: Tensor
    gt_full: MaskVolume
    full_dims: tuple[int, int, int]


@dataclass
class TrainResult:
    out_dir: str
    epochs_run: int
    csv_paths: dict[str, str]
    losses_path: str
    checkpoint_paths: dict[str, str]
    loss_history: list[WganStepReport]
    eval_history: dict[str, list]
    best_epoch: int | None
    best_jaccard: float
    peaks: dict[str, dict] = field(default_factory=dict)


def _load_entry(entry, net_dims):
    image = read_volume(entry.image_path)
    soft_full = average_annotations([read_volume(p) for p in entry.annotation_paths])
    x = volume_to_tensor(resample_trilinear(image, net_dims))
    target = volume_to_tensor(resample_trilinear(soft_full, net_dims))
    return x, target, soft_full


def _evaluate_splits(model: Model, eval_items: dict) -> dict[str, dict]:
    out = {}
    with no_grad():
        for split, items in eval_items.items():
            if not items:
                continue
            reports: list[MetricsReport] = []
            losses: list[float] = []
            for item in items:
                q = forward(model, item.x, "eval")
                losses.append(float(ops.bce_loss(q, item.target).data))
                reports.append(evaluate_full(tensor_to_volume(q), item.gt_full, item.full_dims))
            out[split] = {
                "jaccard": float(np.mean([r.jaccard for r in reports])),
                "dice": float(np.mean([r.dice for r in reports])),
                "precision": float(np.mean([r.precision for r in reports])),
                "recall": float(np.mean([r.recall for r in reports])),
                "avd": float(np.mean([r.absolute_volume_difference for r in reports])),
                "ap": float(np.mean([r.average_precision for r in reports])),
                "loss": float(np.mean(losses)),
            }
    return out


def _metrics_row(epoch: int, m: dict) -> str:
    return (f"{epoch},{m['jaccard']:.6f},{m['dice']:.6f},{m['precision']:.6f},"
            f"{m['recall']:.6f},{m['avd']:.6f},{m['ap']:.6f},{m['loss']:.6f}\n")


def train(run: TrainRun, model_cfg: ModelConfig, optim_cfg: OptimConfig,
          critic_cfg: CriticConfig | None = None) -> TrainResult:
    arch = ARCHITECTURE_OF_VARIANT[run.variant]
    if model_cfg.variant_tag != arch:
        raise ValueError(f"model variant_tag {model_cfg.variant_tag!r} does not match "
                         f"run variant {run.variant} (expects {arch!r})")
    manifest = read_manifest(run.manifest_path)
    net_dims = model_cfg.input_shape
    pairs: list[tuple[Tensor, Tensor]] = []
    eval_items: dict[str, list[_EvalItem]] = {"train": [], "validation": [], "test": []}
    for split in ("train", "validation", "test"):
        for entry in manifest.split(split):
            x, target, soft_full = _load_entry(entry, net_dims)
            if split == "train":
                pairs.append((x, target))
            gt_full = threshold(soft_full, 0.5)
            if np.any(gt_full.voxels):
                # entries with an empty ground truth train fine but cannot be
                # scored (average precision is undefined), so they are skipped
                eval_items[split].append(_EvalItem(x, target, gt_full, soft_full.dims))
    if not pairs:
        raise TrainingError(f"manifest {run.manifest_path} has no train entries")
    eval_items["train"] = eval_items["train"][:run.eval_train_limit]

    adversarial = run.variant in ("M4", "M5") and run.lambda_adv > 0
    model = build_model(model_cfg, run.seed)
    gen_state = AdamState(model.parameters)
    critic = critic_state = critic_opt = None
    if adversarial:
        ccfg = critic_cfg or CriticConfig()
        critic = build_critic(ccfg, seed=run.seed + 1)
        critic_state = AdamState(critic.parameters)
        critic_opt = OptimConfig(learning_rate=ccfg.learning_rate)

    os.makedirs(run.out_dir, exist_ok=True)
    echo = {"run": asdict(run), "model": asdict(model_cfg), "optim": asdict(optim_cfg),
            "adversarial": asdict(critic.config) if critic else None}
    with open(os.path.join(run.out_dir, "config_echo.json"), "w", encoding="utf-8") as f:
        json.dump(echo, f, sort_keys=True, indent=2)
        f.write("\n")

    csv_paths = {split: os.path.join(run.out_dir, f"metrics_{split}.csv")
                 for split, items in eval_items.items() if items}
    losses_path = os.path.join(run.out_dir, "losses.csv")
    ckpt_paths = {"latest": os.path.join(run.out_dir, "latest.ckpt"),
                  "best": os.path.join(run.out_dir, "best.ckpt")}
    if critic:
        ckpt_paths["critic_latest"] = os.path.join(run.out_dir, "critic_latest.ckpt")

    save_model(ckpt_paths["latest"], model, gen_state, {"seed": run.seed, "epoch": 0})
    if critic:
        save_critic(ckpt_paths["critic_latest"], critic, critic_state, {"seed": run.seed + 1, "epoch": 0})

    order_rng = np.random.default_rng(np.random.SeedSequence((run.seed, 0xB47C)))
    loss_history: list[WganStepReport] = []
    eval_history: dict[str, list] = {split: [] for split in csv_paths}
    best_jaccard = float("-inf")
    best_epoch = None
    global_iter = 0

    with ExitStack() as stack:
        losses_f = stack.enter_context(open(losses_path, "w", encoding="utf-8"))
        losses_f.write(LOSSES_CSV_HEADER + "\n")
        handles = {}
        for split, path in csv_paths.items():
            handles[split] = stack.enter_context(open(path, "w", encoding="utf-8"))
            handles[split].write(METRICS_CSV_HEADER + "\n")
        epochs_run = 0
        for epoch in range(1, run.epochs + 1):
            epochs_run = epoch
            for _ in range(run.iterations_per_epoch):
                idx = order_rng.integers(0, len(pairs), size=run.batch_size)
                batch = [pairs[int(i)] for i in idx]
                try:
                    report = wgan_train_step(
                        model, critic, batch, run.lambda_adv if adversarial else 0.0,
                        (gen_state, optim_cfg),
                        (critic_state, critic_opt) if adversarial else None)
                except (FloatingPointError, ValueError) as e:
                    raise TrainingError(f"epoch {epoch} iteration {global_iter + 1}: {e}") from e
                global_iter += 1
                loss_history.append(report)
                losses_f.write(f"{global_iter},{report.bce:.6f},{report.adversarial:.6f},"
                               f"{report.wasserstein:.6f},{report.total:.6f}\n")
            if epoch % run.eval_interval == 0 or epoch == run.epochs:
                split_means = _evaluate_splits(model, eval_items)
                for split, means in split_means.items():
                    handles[split].write(_metrics_row(epoch, means))
                    eval_history[split].append((epoch, means))
                save_model(ckpt_paths["latest"], model, gen_state, {"seed": run.seed, "epoch": epoch})
                if critic:
                    save_critic(ckpt_paths["critic_latest"], critic, critic_state,
                                {"seed": run.seed + 1, "epoch": epoch})
                ref = "validation" if eval_items["validation"] else "train"
                means = split_means.get(ref)
                if means is not None and means["jaccard"] > best_jaccard:
                    best_jaccard = means["jaccard"]
                    best_epoch = epoch
                    save_model(ckpt_paths["best"], model, gen_state, {"seed": run.seed, "epoch": epoch})
                if (run.stop_at_train_jaccard is not None
                        and split_means.get("train", {}).get("jaccard", 0.0) >= run.stop_at_train_jaccard):
                    break

    window_rows = max(1, 200 // run.eval_interval)
    peaks = {split: peak_jaccard(path, window_rows) for split, path in csv_paths.items()}
    return TrainResult(run.out_dir, epochs_run, csv_paths, losses_path, ckpt_paths,
                       loss_history, eval_history, best_epoch, best_jaccard, peaks)


# ---------------------------------------------------------------------------
# inference and offline evaluation

def predict(checkpoint_path, input_path, out_base) -> tuple[str, str]:
    """Eval-mode probabilities for one image: writes `<out>_net` at network
    resolution and `<out>_full` upscaled back to the input's dims."""
    model, _, _ = load_model(checkpoint_path)
    vol = read_volume(input_path)
    if isinstance(vol, MaskVolume):
        raise ValueError(f"{input_path} holds a mask, expected an image")
    net = resample_trilinear(vol, model.config.input_shape)
    with no_grad():
        q = forward(model, volume_to_tensor(net), "eval")
    prob_net = tensor_to_volume(q)
    prob_full = resample_trilinear(prob_net, vol.dims)
    out_base = os.fspath(out_base)
    write_volume(out_base + "_net", prob_net, kind="prob")
    write_volume(out_base + "_full", prob_full, kind="prob")
    return out_base + "_net", out_base + "_full"


def evaluate(pred_path, gt_paths, full_dims=None) -> str:
    """CSV: one row per ground-truth author, plus one row against the
    thresholded average of all authors."""
    if not gt_paths:
        raise ValueError("need at least one ground-truth path")
    prob = read_volume(pred_path)
    gts = [read_volume(p) for p in gt_paths]
    dims = gts[0].dims
    for path, gt in zip(gt_paths, gts):
        if gt.dims != dims:
            raise ValueError(f"ground truth dims differ: {path} has {gt.dims}, first has {dims}")
    if full_dims is None:
        full_dims = dims
    elif tuple(full_dims) != dims:
        raise ValueError(f"requested dims {tuple(full_dims)} do not match ground truth dims {dims}")
    lines = [MetricsReport.CSV_HEADER]
    for gt in gts:
        lines.append(evaluate_full(prob, gt, full_dims).csv_row())
    averaged = threshold(average_annotations(gts), 0.5)
    lines.append(evaluate_full(prob, averaged, full_dims).csv_row())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metric curves

def _read_numeric_csv(path) -> tuple[list[str], np.ndarray]:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].strip():
        raise ValueError(f"{path}:1: empty CSV")
    header = lines[0].split(",")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    data = np.array(rows, dtype=np.float64) if rows else np.empty((0, len(header)))
    return header, data


def smooth_curve(csv_in, csv_out, window: int = 200) -> None:
    """Non-overlapping window means per column; index columns (epoch or
    iteration) land on the window midpoint."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    header, data = _read_numeric_csv(csv_in)
    out_lines = [",".join(header)]
    for start in range(0, data.shape[0], window):
        means = data[start:start + window].mean(axis=0)
        out_lines.append(",".join(f"{v:.6f}" for v in means))
    with open(csv_out, "w", encoding="utf-8") as f:
        f.write("\n".join(out_lines) + "\n")


def peak_jaccard(csv_path, window_rows: int = 20) -> dict:
    """Peak of the raw Jaccard curve and of its window-averaged version.

    Both are reported because a single noisy eval point can dominate the raw
    peak; each entry is {'epoch': ..., 'jaccard': ...}."""
    header, data = _read_numeric_csv(csv_path)
    for col in ("epoch", "jaccard"):
        if col not in header:
            raise ValueError(f"{os.fspath(csv_path)}: no {col} column")
    if data.shape[0] == 0:
        raise ValueError(f"{os.fspath(csv_path)}: no data rows")
    e, j = header.index("epoch"), header.index("jaccard")
    raw_i = int(np.argmax(data[:, j]))
    out = {"raw": {"epoch": float(data[raw_i, e]), "jaccard": float(data[raw_i, j])}}
    mids, means = [], []
    for start in range(0, data.shape[0], window_rows):
        chunk = data[start:start + window_rows]
        mids.append(float(chunk[:, e].mean()))
        means.append(float(chunk[:, j].mean()))
    k = int(np.argmax(means))
    out["smoothed"] = {"epoch": mids[k], "jaccard": means[k]}
    return out
