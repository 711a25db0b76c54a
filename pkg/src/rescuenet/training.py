"""SGD training loop, binary checkpoints and the ablation runner."""

from __future__ import annotations

import io
import json
import math
import os
import statistics
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .data import ScenePair, crop_batch, load_dataset, stack_pairs
from .losses import LossTargets, total_loss
from .metrics import ConfusionMatrix, EvalReport, accumulate, atomic_write, report_from_confusion
from .model import FUSIONS, ConfigError, ModelConfig, ModelParams, architecture, build_model, forward_pair, predict_masks
from .tensor import Tape, Tensor

MAGIC = b"RNET"
VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    def __init__(self, missing: list[str], unexpected: list[str]):
        self.missing = missing
        self.unexpected = unexpected
        parts = []
        if missing:
            parts.append("missing parameter paths: " + ", ".join(missing))
        if unexpected:
            parts.append("unknown parameter paths: " + ", ".join(unexpected))
        super().__init__("checkpoint does not match model config; " + "; ".join(parts))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch: int = 4
    crop: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_schedule: str = "constant"
    poly_power: float = 0.9
    seed: int = 0
    loss_mode: str = "locaware_dice"
    seg_head: str = "encoder_decoder"
    change_head: bool = True
    fusion: str = "mean_logprob"
    eval_every: int = 0
    augment: bool = True
    dice_weight: float = 1.0
    change_weight: float = 1.0

    def validate(self) -> None:
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if self.crop <= 0 or self.crop % 8:
            raise ConfigError(f"crop must be a positive multiple of 8, got {self.crop}")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'poly', got {self.lr_schedule!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.fusion == "change_only" and not self.change_head:
            raise ConfigError("fusion 'change_only' needs the change head")

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        base = base or ModelConfig()
        return replace(
            base,
            seg_head=self.seg_head,
            change_head_enabled=self.change_head,
            loss_mode=self.loss_mode,
            input_size=self.crop,
        )

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "poly" and self.steps > 0:
            return self.learning_rate * (1 - step / self.steps) ** self.poly_power
        return self.learning_rate

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    params: ModelParams
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    evals: list[tuple[int, EvalReport]]


# -- optimizer -------------------------------------------------------------

def sgd_step(
    params: ModelParams,
    grads: dict[str, np.ndarray] | None,
    momentum_buffers: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """v <- momentum*v + g ; p <- p - lr*v, in parameter-path order, in place.

    ``grads`` defaults to the ``.grad`` slots of the parameters.
    """
    for path in params.trainable():
        t = params[path]
        g = grads[path] if grads is not None else t.grad
        if g is None:
            raise TrainingError(f"missing gradient for trainable parameter {path}")
        v = momentum_buffers.get(path)
        if v is None:
            v = np.zeros_like(t.data)
        v = (v * t.dtype.type(momentum) + g).astype(t.dtype)
        momentum_buffers[path] = v
        t.data -= t.dtype.type(lr) * v


# -- checkpoints -----------------------------------------------------------

def _write_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_tensor(buf: io.BytesIO, path: str, arr: np.ndarray) -> None:
    _write_str(buf, path)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, ckpt.model_config.to_json())
    _write_str(buf, ckpt.train_config.to_json())
    items = [(p, ckpt.params[p].data) for p in ckpt.params]
    items += [(f"momentum:{p}", v) for p, v in ckpt.momentum.items()]
    buf.write(struct.pack("<I", len(items)))
    for path, arr in items:
        _write_tensor(buf, path, arr)
    buf.write(struct.pack("<QQ", ckpt.step, ckpt.rng_state & 0xFFFFFFFFFFFFFFFF))
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    atomic_write(os.fspath(path), checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt string in checkpoint: {exc}") from None


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"magic mismatch: expected {MAGIC!r}, found {magic!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"version mismatch: expected {VERSION}, found {version}")
    try:
        mcfg = ModelConfig.from_dict(json.loads(r.string()))
        tcfg = TrainConfig(**json.loads(r.string()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, Tensor] = {}
    momentum: dict[str, np.ndarray] = {}
    for _ in range(count):
        path = r.string()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        if path.startswith("momentum:"):
            momentum[path[len("momentum:"):]] = arr
        else:
            tensors[path] = Tensor(arr, requires_grad=not ModelParams.is_buffer(path), dtype=np.float32)
    step, rng_state = r.unpack("<QQ")
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after checkpoint payload")
    return Checkpoint(mcfg, tcfg, step, ModelParams(tensors), momentum, rng_state)


def load_checkpoint(path: str | os.PathLike, model_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``model_config`` also check the parameter paths match."""
    with open(path, "rb") as fh:
        ckpt = checkpoint_from_bytes(fh.read())
    if model_config is not None:
        check_compatible(ckpt.params, model_config)
    return ckpt


def check_compatible(params: ModelParams, config: ModelConfig) -> None:
    expected = {p: s for p, s in architecture(config)}
    missing = [p for p in expected if p not in params]
    unexpected = [p for p in params if p not in expected]
    if missing or unexpected:
        raise IncompatibleCheckpointError(missing, unexpected)
    for p, shape in expected.items():
        if params[p].shape != shape:
            raise CheckpointError(f"shape mismatch for {p}: checkpoint {params[p].shape} vs model {shape}")


# -- training --------------------------------------------------------------

def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1, np.uint32)[0])


def init_checkpoint(train_config: TrainConfig, model_config: ModelConfig | None = None) -> Checkpoint:
    train_config.validate()
    mcfg = train_config.model_config(model_config)
    params = build_model(mcfg, train_config.seed)
    return Checkpoint(mcfg, train_config, 0, params, {}, train_config.seed)


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    pairs: list[ScenePair],
    fusion: str = "mean_logprob",
    batch_size: int = 8,
) -> EvalReport:
    cm = ConfusionMatrix()
    for start in range(0, len(pairs), batch_size):
        b = stack_pairs(pairs[start : start + batch_size])
        pred = predict(params, config, b.pre, b.post, fusion)
        cm = accumulate(cm, b.mask, pred)
    return report_from_confusion(cm)


def predict(params: ModelParams, config: ModelConfig, pre: np.ndarray, post: np.ndarray, fusion: str) -> np.ndarray:
    out = forward_pair(params, config, Tensor(pre), Tensor(post), mode="eval")
    return predict_masks(out, fusion)


def unsupervised_prefixes(config: ModelConfig) -> tuple[str, ...]:
    """Parameter groups the configured loss never reaches."""
    if config.loss_mode == "ce" and config.change_head_enabled:
        return ("change.",)
    return ()


def _step_grads(params: ModelParams, config: ModelConfig) -> dict[str, np.ndarray | None]:
    skip = unsupervised_prefixes(config)
    grads = {}
    for path in params.trainable():
        g = params[path].grad
        if g is None and path.startswith(skip):
            g = np.zeros_like(params[path].data)
        grads[path] = g
    return grads


def train_on_pairs(
    pairs: list[ScenePair],
    train_config: TrainConfig,
    model_config: ModelConfig | None = None,
    eval_pairs: list[ScenePair] | None = None,
    resume: Checkpoint | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run forward -> loss -> backward -> SGD for ``train_config.steps`` steps.

    Batches are a pure function of (seed, step), so resuming from a
    checkpoint continues exactly where a single run would be.
    """
    cfg = train_config
    cfg.validate()
    ckpt = resume if resume is not None else init_checkpoint(cfg, model_config)
    if resume is not None:
        check_compatible(ckpt.params, ckpt.model_config)
        ckpt = replace(ckpt, train_config=cfg)
    mcfg = ckpt.model_config
    params = ckpt.params
    momentum = ckpt.momentum
    eval_pairs = eval_pairs if eval_pairs is not None else pairs
    losses: list[float] = []
    evals: list[tuple[int, EvalReport]] = []

    for step in range(ckpt.step, cfg.steps):
        batch = crop_batch(pairs, cfg.crop, cfg.batch, step_seed(cfg.seed, step), cfg.augment)
        targets = LossTargets.from_mask(batch.mask, mcfg.num_damage_classes)
        with Tape() as tape:
            out = forward_pair(params, mcfg, Tensor(batch.pre), Tensor(batch.post), mode="train")
            br = total_loss(out, targets, mcfg.loss_mode, cfg.dice_weight, cfg.change_weight)
        value = br.total.item()
        if not math.isfinite(value):
            raise TrainingError(
                f"non-finite loss {value} at step {step + 1}; batch scenes: {', '.join(batch.scene_ids)}; "
                f"terms: {br.as_dict()}"
            )
        tape.backward(br.total)
        lr = cfg.lr_at(step)
        sgd_step(params, _step_grads(params, mcfg), momentum, lr, cfg.momentum)
        params.zero_grads()
        losses.append(value)
        if log:
            terms = br.as_dict()
            log(
                f"step={step + 1} loss={value:.6f} loc={terms['loc']:.6f} damage={terms['damage']:.6f} "
                f"dice={terms['dice']:.6f} change={terms['change']:.6f} ce={terms['ce']:.6f} lr={lr:.6g}"
            )
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            report = evaluate(params, mcfg, eval_pairs, cfg.fusion)
            evals.append((step + 1, report))
            if log:
                log(f"eval step={step + 1} " + " ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in report.as_dict().items()))

    final = Checkpoint(mcfg, cfg, max(cfg.steps, ckpt.step), params, momentum, cfg.seed)
    return TrainResult(final, losses, evals)


def train(
    data_dir: str | os.PathLike,
    train_config: TrainConfig,
    model_config: ModelConfig | None = None,
    val_dir: str | os.PathLike | None = None,
    resume: Checkpoint | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train on every scene in ``data_dir``; evaluate on ``val_dir`` (default: training scenes)."""
    pairs = load_dataset(data_dir)
    if not pairs:
        raise TrainingError(f"no scenes found in {data_dir}")
    eval_pairs = load_dataset(val_dir) if val_dir is not None else None
    return train_on_pairs(pairs, train_config, model_config, eval_pairs, resume, log)


# -- ablations -------------------------------------------------------------

# (section, row label, loss_mode, seg_head, change_head)
def _ablation_fusion(fusion: str, loss_mode: str, change_head: bool) -> str:
    # plain CE never supervises the change head, so its logits are untrained noise
    if not change_head or loss_mode == "ce":
        return "seg_only"
    return fusion


ABLATION_ROWS = (
    ("Loss Function", "Cross-Entropy Loss", "ce", "encoder_decoder", True),
    ("Loss Function", "Localization Aware Loss", "locaware", "encoder_decoder", True),
    ("Loss Function", "Localization Aware Loss + Dice Loss", "locaware_dice", "encoder_decoder", True),
    ("Segmentation Head Architecture", "Simple (Convolution+Upscaling)", "locaware_dice", "simple", True),
    ("Segmentation Head Architecture", "Encoder-Decoder", "locaware_dice", "encoder_decoder", True),
    ("Change Detection Head", "Without change detection head", "locaware_dice", "encoder_decoder", False),
    ("Change Detection Head", "With change detection head", "locaware_dice", "encoder_decoder", True),
)


@dataclass
class AblationRow:
    section: str
    label: str
    loss_mode: str
    seg_head: str
    change_head: bool
    scores: list[float]

    @property
    def median(self) -> float:
        return statistics.median(self.scores)


@dataclass
class AblationReport:
    rows: list[AblationRow]
    seeds: list[int]

    def to_text(self) -> str:
        lines = []
        section = None
        width = max(len(r.label) for r in self.rows)
        for r in self.rows:
            if r.section != section:
                section = r.section
                lines.append(f"== {section} ==")
            per_seed = " ".join(f"{s:.4f}" for s in r.scores)
            lines.append(f"{r.label:<{width}}  median={r.median:.4f}  seeds=[{per_seed}]")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {"seeds": self.seeds, "rows": [{**asdict(r), "median": r.median} for r in self.rows]},
            indent=2,
        ) + "\n"

    def median_of(self, loss_mode: str, seg_head: str = "encoder_decoder", change_head: bool = True) -> float:
        for r in self.rows:
            if (r.loss_mode, r.seg_head, r.change_head) == (loss_mode, seg_head, change_head):
                return r.median
        raise KeyError((loss_mode, seg_head, change_head))


def run_ablations_on_pairs(
    train_pairs: list[ScenePair],
    eval_pairs: list[ScenePair],
    base_config: TrainConfig,
    seeds: list[int],
    model_config: ModelConfig | None = None,
    log: Callable[[str], None] | None = None,
) -> AblationReport:
    """Train and score each distinct configuration once per seed; one row per loss, head and change-head setting."""
    if not seeds:
        raise ValueError("need at least one seed")
    cache: dict[tuple, float] = {}
    rows = []
    for section, label, loss_mode, seg_head, change in ABLATION_ROWS:
        scores = []
        for seed in seeds:
            key = (loss_mode, seg_head, change, seed)
            if key not in cache:
                cfg = replace(base_config, loss_mode=loss_mode, seg_head=seg_head, change_head=change, seed=seed,
                              fusion=_ablation_fusion(base_config.fusion, loss_mode, change))
                result = train_on_pairs(train_pairs, cfg, model_config, eval_pairs)
                ck = result.checkpoint
                cache[key] = evaluate(ck.params, ck.model_config, eval_pairs, cfg.fusion).overall
                if log:
                    log(f"ablation loss={loss_mode} head={seg_head} change={'on' if change else 'off'} seed={seed} score={cache[key]:.6f}")
            scores.append(cache[key])
        rows.append(AblationRow(section, label, loss_mode, seg_head, change, scores))
    return AblationReport(rows, list(seeds))


def run_ablations(
    data_dir: str | os.PathLike,
    base_config: TrainConfig,
    seeds: list[int],
    val_dir: str | os.PathLike | None = None,
    model_config: ModelConfig | None = None,
    log: Callable[[str], None] | None = None,
) -> AblationReport:
    train_pairs = load_dataset(data_dir)
    eval_pairs = load_dataset(val_dir) if val_dir is not None else train_pairs
    return run_ablations_on_pairs(train_pairs, eval_pairs, base_config, seeds, model_config, log)
