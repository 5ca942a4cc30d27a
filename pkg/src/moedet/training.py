"""Training loops, checkpoints, configuration and the two-domain benchmark."""

from __future__ import annotations

import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .data import Scene, domain_spec, generate_dataset
from .evaluation import EvalResult, evaluate, format_report
from .expert import ConfigError, ExpertConfig, ParameterSet, expert_forward, init_params
from .geometry import IOU_THRESHOLD, MAX_DETECTIONS, SCORE_THRESHOLD, postprocess
from .losses import (LossWeights, assign_targets, detection_loss, load_balance_loss, routing_entropy,
                     routing_stats, total_loss)
from .router import RouterConfig, init_router_params, moe_forward

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MOEC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt or mismatched checkpoints."""


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 10.0
    epochs: int = 30
    batch_size: int = 16
    lambda_lb: float = 0.5
    seed: int = 0
    w_cls: float = 0.5
    w_box: float = 7.5
    w_dfl: float = 1.5
    hidden_channels: int = 16
    num_bins: int = 16
    num_classes: int = 4
    image_size: int = 64
    train_per_domain: int = 512
    val_per_domain: int = 64
    test_per_domain: int = 128
    freeze_experts: bool = False
    iou_threshold: float = IOU_THRESHOLD
    score_threshold: float = SCORE_THRESHOLD
    max_detections: int = MAX_DETECTIONS
    domain: str = "A"
    count: int = 64
    train_data: str = ""
    val_data: str = ""
    test_data: str = ""
    experts: str = ""
    checkpoint: str = ""
    output: str = ""

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lambda_lb < 0:
            raise ConfigError("lambda_lb must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_cls, self.w_box, self.w_dfl)

    @property
    def expert_config(self) -> ExpertConfig:
        return ExpertConfig(self.hidden_channels, self.num_bins, self.num_classes, self.image_size)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


def _coerce(kind, text: str):
    if kind in (bool, "bool"):
        lowered = text.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    for name, conv in (("int", int), ("float", float)):
        if kind in (name, conv):
            try:
                return conv(text)
            except ValueError as exc:
                raise ConfigError(f"not a {name}: {text!r}") from exc
    return text.strip()


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    raw = parse_config_text(Path(path).read_text()) if path else {}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    types = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(types[key], value) if isinstance(value, str) else value
    return TrainConfig(**kwargs)


# ------------------------------------------------------------------ models


class ModelOutputs(NamedTuple):
    box_logits: list[Tensor]
    cls_logits: list[Tensor]
    alphas: list[Tensor] | None


class ExpertModel:
    kind = "expert"

    def __init__(self, config: ExpertConfig, params: ParameterSet):
        self.expert_config = config
        self.params = params

    def parameters(self) -> ParameterSet:
        return self.params

    def trainable(self, freeze_experts: bool = False) -> ParameterSet:
        return self.params

    def forward(self, images: Tensor) -> ModelOutputs:
        out = expert_forward(images, self.params, self.expert_config)
        return ModelOutputs(out.box_logits, out.cls_logits, None)


class MoEModel:
    kind = "moe"

    def __init__(self, expert_config: ExpertConfig, router_config: RouterConfig,
                 experts: list[ParameterSet], router_params: ParameterSet):
        self.expert_config = expert_config
        self.router_config = router_config
        self.experts = experts
        self.router_params = router_params

    def parameters(self) -> ParameterSet:
        named = {f"experts.{e}.{k}": v for e, p in enumerate(self.experts) for k, v in p.items()}
        named.update({f"router.{k}": v for k, v in self.router_params.items()})
        return named

    def trainable(self, freeze_experts: bool = False) -> ParameterSet:
        if freeze_experts:
            return {f"router.{k}": v for k, v in self.router_params.items()}
        return self.parameters()

    def forward(self, images: Tensor) -> ModelOutputs:
        out = moe_forward(images, self.experts, self.router_params, self.expert_config, self.router_config)
        return ModelOutputs(out.box_logits, out.cls_logits, out.alphas)


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    kind: str
    expert_config: ExpertConfig
    params: dict[str, np.ndarray]
    router_config: RouterConfig | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, metadata: dict | None = None) -> "Checkpoint":
        params = {k: v.data.astype(np.float32) for k, v in model.parameters().items()}
        return cls(model.kind, model.expert_config, params,
                   getattr(model, "router_config", None), dict(metadata or {}))

    def to_model(self):
        dtype = ad.get_default_dtype()

        def tensors(prefix: str) -> ParameterSet:
            return {k[len(prefix):]: Tensor(v.astype(dtype), requires_grad=True)
                    for k, v in self.params.items() if k.startswith(prefix)}

        if self.kind == "expert":
            return ExpertModel(self.expert_config, tensors(""))
        if self.kind == "moe":
            E = self.router_config.num_experts
            return MoEModel(self.expert_config, self.router_config,
                            [tensors(f"experts.{e}.") for e in range(E)], tensors("router."))
        raise CheckpointError(f"unknown model kind {self.kind!r}")

    def expert_params(self) -> ParameterSet:
        if self.kind != "expert":
            raise CheckpointError("not an expert checkpoint")
        return self.to_model().params


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "kind": ckpt.kind,
        "expert_config": ckpt.expert_config.to_dict(),
        "router_config": ckpt.router_config.to_dict() if ckpt.router_config else None,
        "metadata": ckpt.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        encoded = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts += [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    try:
        Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    version, blob_len = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = 12
    header = json.loads(body[pos:pos + blob_len])
    pos += blob_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4:pos + 4 + n].decode()
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", body, pos)
        shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(shape)) * 4
        params[name] = np.frombuffer(body[pos:pos + size], dtype="<f4").reshape(shape).astype(np.float32)
        pos += size
    if pos != len(body):
        raise CheckpointError("checkpoint has trailing bytes")
    router = header.get("router_config")
    return Checkpoint(header["kind"], ExpertConfig.from_dict(header["expert_config"]), params,
                      RouterConfig.from_dict(router) if router else None, header.get("metadata", {}))


# ------------------------------------------------------------------ optimisation


def clip_factor(params: ParameterSet, max_norm: float | None) -> tuple[float, float]:
    """Global gradient norm and the factor that rescales it to at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values())))
    return norm, (max_norm / norm if max_norm and norm > max_norm else 1.0)


class SGD:
    """SGD with momentum and global gradient-norm clipping."""

    def __init__(self, params: ParameterSet, lr: float, momentum: float = 0.9, clip: float | None = 10.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.buffers = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> float:
        norm, factor = clip_factor(self.params, self.clip)
        for k, p in self.params.items():
            buf = self.buffers[k]
            buf *= self.momentum
            buf += p.grad * factor
            p.data -= self.lr * buf
        return norm


class Adam:
    """Adam with bias correction and global gradient-norm clipping."""

    def __init__(self, params: ParameterSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = 10.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> float:
        norm, factor = clip_factor(self.params, self.clip)
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad * factor
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def make_optimizer(params: ParameterSet, config: "TrainConfig"):
    if config.optimizer == "adam":
        return Adam(params, config.lr, clip=config.grad_clip)
    return SGD(params, config.lr, config.momentum, config.grad_clip)


def zero_all_grads(model) -> None:
    for p in model.parameters().values():
        p.zero_grad()


# ------------------------------------------------------------------ loops


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    step_losses: list[float]
    epoch_losses: list[float]
    val_maps: list[float]
    best_epoch: int


def _images(scenes: Sequence[Scene]) -> Tensor:
    return Tensor(np.stack([s.image for s in scenes]).astype(ad.get_default_dtype()))


def compute_loss(model, images: Tensor, assignments, config: TrainConfig, lambda_lb: float):
    """Pre-NMS training objective; returns (loss, parts)."""
    out = model.forward(images)
    l_det, parts = detection_loss(out.box_logits, out.cls_logits, assignments,
                                  model.expert_config, config.loss_weights)
    parts["det"] = l_det.item()
    if out.alphas is None:
        return l_det, parts
    l_lb = load_balance_loss(routing_stats(out.alphas), model.router_config.num_experts, len(out.alphas))
    parts["lb"] = l_lb.item()
    return total_loss(l_det, l_lb, lambda_lb), parts


@dataclass
class Predictions:
    detections: list
    alphas: list[np.ndarray] | None  # per level, (num_images, E)


def predict(model, scenes: Sequence[Scene], config: TrainConfig, batch_size: int = 32) -> Predictions:
    dets: list = []
    alphas: list[list[np.ndarray]] = []
    with ad.no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            out = model.forward(_images(chunk))
            dets += postprocess([t.data for t in out.box_logits], [t.data for t in out.cls_logits],
                                model.expert_config.strides, config.iou_threshold,
                                config.score_threshold, config.max_detections)
            if out.alphas is not None:
                alphas.append([a.data.astype(np.float64) for a in out.alphas])
    stacked = [np.concatenate([a[k] for a in alphas]) for k in range(len(alphas[0]))] if alphas else None
    return Predictions(dets, stacked)


def evaluate_model(model, scenes: Sequence[Scene], config: TrainConfig) -> EvalResult:
    preds = predict(model, scenes, config)
    return evaluate(preds.detections, [s.objects for s in scenes])


def fit(model, train: Sequence[Scene], val: Sequence[Scene], config: TrainConfig,
        lambda_lb: float = 0.0, on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Minibatch SGD; keeps the parameters of the best validation-mAP epoch."""
    if not train:
        raise ValueError("training set is empty")
    assignments = [assign_targets(s.objects, model.expert_config) for s in train]
    params = model.trainable(config.freeze_experts)
    opt = make_optimizer(params, config)
    step_losses, epoch_losses, val_maps = [], [], []
    best_map, best_epoch, best_state = -1.0, 0, None
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        running = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            zero_all_grads(model)
            loss, _ = compute_loss(model, _images([train[k] for k in idx]),
                                   [assignments[k] for k in idx], config, lambda_lb)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}")
            ad.backward(loss)
            opt.step()
            step_losses.append(value)
            running.append(value)
        epoch_losses.append(float(np.mean(running)))
        val_map = evaluate_model(model, val, config).mAP_50_95 if val else 0.0
        val_maps.append(val_map)
        if val_map > best_map:
            best_map, best_epoch = val_map, epoch + 1
            best_state = {k: p.data.copy() for k, p in model.parameters().items()}
        logger.info("epoch %d loss %.4f val mAP %.4f", epoch + 1, epoch_losses[-1], val_map)
        if on_epoch:
            on_epoch(epoch + 1, epoch_losses[-1], val_map)
    for k, p in model.parameters().items():
        p.data[...] = best_state[k]
    meta = {"epoch": best_epoch, "best_map": best_map, "seed": config.seed, "lambda_lb": lambda_lb}
    return TrainResult(Checkpoint.from_model(model, meta), step_losses, epoch_losses, val_maps, best_epoch)


def pretrain_expert(train: Sequence[Scene], val: Sequence[Scene], config: TrainConfig, **kw) -> TrainResult:
    """Train one expert on the detection loss alone."""
    model = ExpertModel(config.expert_config, init_params(config.expert_config, config.seed))
    return fit(model, train, val, config, lambda_lb=0.0, **kw)


def build_moe(expert_checkpoints: Sequence[Checkpoint], seed: int) -> MoEModel:
    if not expert_checkpoints:
        raise ConfigError("train_moe needs at least one expert checkpoint")
    for ck in expert_checkpoints:
        if ck.kind != "expert":
            raise ConfigError("MoE experts must come from expert checkpoints")
        if ck.expert_config != expert_checkpoints[0].expert_config:
            raise ConfigError("all expert checkpoints must share one ExpertConfig")
    cfg = expert_checkpoints[0].expert_config
    rc = RouterConfig(len(expert_checkpoints), cfg.hidden_channels)
    experts = [ck.expert_params() for ck in expert_checkpoints]
    return MoEModel(cfg, rc, experts, init_router_params(rc, cfg, seed))


def train_moe(expert_checkpoints: Sequence[Checkpoint], train: Sequence[Scene], val: Sequence[Scene],
              config: TrainConfig, **kw) -> TrainResult:
    """Experts start from their checkpoints, routers and fusion weights from scratch."""
    model = build_moe(expert_checkpoints, config.seed)
    return fit(model, train, val, config, lambda_lb=config.lambda_lb, **kw)


# ------------------------------------------------------------------ routing analysis


def inspect_routing(ckpt: Checkpoint, scenes: Sequence[Scene], config: TrainConfig | None = None) -> dict:
    """Per-level routing fractions, mean probabilities, entropy and domain affinity."""
    if ckpt.kind != "moe":
        raise CheckpointError("inspect-routing needs an MoE checkpoint")
    config = config or TrainConfig()
    model = ckpt.to_model()
    preds = predict(model, scenes, config)
    domains = np.array([s.domain for s in scenes])
    report: dict = {"levels": []}
    for k, alpha in enumerate(preds.alphas):
        stats = routing_stats([Tensor(alpha)])
        level = {
            "stride": model.expert_config.strides[k],
            "f": stats.f[0].tolist(),
            "P": stats.P[0].data.tolist(),
            "entropy": float(routing_entropy(alpha).mean()),
            "domain_mean_alpha": {d: alpha[domains == d].mean(axis=0).tolist()
                                  for d in sorted(set(domains)) if d},
        }
        if np.any(domains == "A"):
            level["domain_A_to_expert0"] = float(np.mean(np.argmax(alpha[domains == "A"], axis=1) == 0))
        if np.any(domains == "B") and alpha.shape[1] > 1:
            level["domain_B_to_expert1"] = float(np.mean(np.argmax(alpha[domains == "B"], axis=1) == 1))
        report["levels"].append(level)
    report["entropy"] = float(np.mean([lv["entropy"] for lv in report["levels"]]))
    return report


def mean_routing_entropy(alphas: Sequence[np.ndarray]) -> float:
    """Entropy averaged over levels and images."""
    return float(np.mean([routing_entropy(a).mean() for a in alphas]))


# ------------------------------------------------------------------ benchmark


@dataclass
class Splits:
    train: dict[str, list[Scene]]
    val: dict[str, list[Scene]]
    test: dict[str, list[Scene]]


def make_splits(config: TrainConfig) -> Splits:
    out: dict[str, dict[str, list[Scene]]] = {"train": {}, "val": {}, "test": {}}
    for name in ("A", "B"):
        spec = domain_spec(name, config.image_size)
        n_tr, n_va, n_te = config.train_per_domain, config.val_per_domain, config.test_per_domain
        out["train"][name] = generate_dataset(spec, config.seed, n_tr, config.image_size)
        out["val"][name] = generate_dataset(spec, config.seed, n_va, config.image_size, start=n_tr)
        out["test"][name] = generate_dataset(spec, config.seed, n_te, config.image_size, start=n_tr + n_va)
    return Splits(**out)


def _concat_scenes(a: Sequence[Scene], b: Sequence[Scene]) -> list[Scene]:
    return list(a) + list(b)


MODEL_ROWS = ("expert_A", "expert_B", "single_AB", "moe_AB")
TEST_SETS = ("A", "B", "combined")


@dataclass
class BenchmarkReport:
    metrics: dict[str, dict[str, float]]  # row -> "<test>_mAP" / "<test>_AR"
    routing: dict[str, float]
    seconds: float
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict, repr=False)

    def key_values(self) -> dict[str, float]:
        kv = {f"{row}.{col}": val for row, cols in self.metrics.items() for col, val in cols.items()}
        kv.update({f"routing.{k}": v for k, v in self.routing.items()})
        kv["seconds"] = self.seconds
        return kv

    def text(self) -> str:
        return format_report(self.metrics, "mAP@0.5:0.95 and AR@100 per test set")

    def moe_wins(self, row: str = "moe_AB") -> bool:
        best_single = max(self.metrics[r]["combined_mAP"] for r in ("expert_A", "expert_B", "single_AB"))
        return self.metrics[row]["combined_mAP"] >= best_single


def run_benchmark(config: TrainConfig, ablation: bool = False,
                  progress: Callable[[str], None] | None = None) -> BenchmarkReport:
    """Desk-scale grid: per-domain experts, a single model on A+B, and the MoE on A+B.

    With ``ablation`` an extra MoE row trained with lambda_lb = 0 is added.
    """
    t0 = time.perf_counter()
    say = progress or (lambda msg: logger.info(msg))
    splits = make_splits(config)
    train_ab = _concat_scenes(splits.train["A"], splits.train["B"])
    val_ab = _concat_scenes(splits.val["A"], splits.val["B"])
    tests = {"A": splits.test["A"], "B": splits.test["B"],
             "combined": _concat_scenes(splits.test["A"], splits.test["B"])}
    ckpts: dict[str, Checkpoint] = {}
    say("pretraining expert A")
    ckpts["expert_A"] = pretrain_expert(splits.train["A"], splits.val["A"], config).checkpoint
    say("pretraining expert B")
    ckpts["expert_B"] = pretrain_expert(splits.train["B"], splits.val["B"], config.replace(seed=config.seed + 1)).checkpoint
    say("training single model on A+B")
    ckpts["single_AB"] = pretrain_expert(train_ab, val_ab, config.replace(seed=config.seed + 2)).checkpoint
    experts = [ckpts["expert_A"], ckpts["expert_B"]]
    say(f"training MoE on A+B (lambda_lb={config.lambda_lb})")
    ckpts["moe_AB"] = train_moe(experts, train_ab, val_ab, config).checkpoint
    if ablation:
        say("training MoE on A+B (lambda_lb=0)")
        ckpts["moe_AB_lb0"] = train_moe(experts, train_ab, val_ab, config.replace(lambda_lb=0.0)).checkpoint
    metrics: dict[str, dict[str, float]] = {}
    routing: dict[str, float] = {}
    for row, ck in ckpts.items():
        model = ck.to_model()
        metrics[row] = {}
        for test_name, scenes in tests.items():
            preds = predict(model, scenes, config)
            res = evaluate(preds.detections, [s.objects for s in scenes])
            metrics[row][f"{test_name}_mAP"] = res.mAP_50_95
            metrics[row][f"{test_name}_AR"] = res.AR
            if test_name == "combined" and preds.alphas is not None:
                routing[f"{row}.entropy"] = mean_routing_entropy(preds.alphas)
                n_a = len(tests["A"])
                for k, alpha in enumerate(preds.alphas):
                    stride = model.expert_config.strides[k]
                    routing[f"{row}.s{stride}.A_to_expert0"] = float(np.mean(np.argmax(alpha[:n_a], axis=1) == 0))
    return BenchmarkReport(metrics, routing, time.perf_counter() - t0, ckpts)
