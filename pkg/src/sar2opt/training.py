"""Reciprocal GAN losses, alternating updates and checkpoint persistence.

One :func:`train_step` performs three optimizer applications in order:
the optical discriminator, the SAR discriminator (both against detached
translations), then both translators jointly on the hybrid loss.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .networks import (
    DiscriminatorConfig,
    NetworkParams,
    TranslatorConfig,
    build_discriminator,
    build_translator,
    discriminator_forward,
    named_tensors,
    translator_forward,
)
from .tensor import ContractError, Node, abs_, backward, clamp_min, detach, log, mean

__all__ = [
    "BadMagicError",
    "Checkpoint",
    "CheckpointError",
    "ModelConfig",
    "NumericalError",
    "ReciprocalModel",
    "ShapeMismatchError",
    "StepReport",
    "TrainConfig",
    "TruncatedCheckpointError",
    "UnsupportedVersionError",
    "build_model",
    "discriminator_loss",
    "l1_loss",
    "load_checkpoint",
    "optimizer_update",
    "run_training",
    "save_checkpoint",
    "train_step",
    "translator_gan_loss",
    "translate_images",
    "translator_loss",
]

LOG_FLOOR = 1e-8
MAGIC = b"SOGR"
FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 20.0
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    total_steps: int = 1000
    seed: int = 0
    optimizer_kind: str = "adam"

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError("beta must be >= 0")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.optimizer_kind not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer_kind {self.optimizer_kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the four networks of the reciprocal pair."""

    sar_channels: int = 1
    image_size: int = 256
    depth: int = 6
    ngf: int = 50
    ndf: int = 64
    n_stride2: int = 3

    def translator(self, direction: str) -> TranslatorConfig:
        cin, cout = (self.sar_channels, 3) if direction == "s2o" else (3, self.sar_channels)
        return TranslatorConfig(cin, cout, self.ngf, self.depth, self.image_size)

    def discriminator(self, domain: str) -> DiscriminatorConfig:
        cin = 3 if domain == "opt" else self.sar_channels
        return DiscriminatorConfig(cin, self.ndf, self.n_stride2, self.image_size)


@dataclass
class ReciprocalModel:
    config: ModelConfig
    t_s2o: NetworkParams
    t_o2s: NetworkParams
    d_opt: NetworkParams
    d_sar: NetworkParams
    step: int = 0
    # optimizer moments keyed by parameter name: name -> {"m": arr, "v": arr}
    opt_state: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def networks(self) -> List[NetworkParams]:
        return [self.t_s2o, self.t_o2s, self.d_opt, self.d_sar]

    def parameters(self, *nets: NetworkParams) -> Dict[str, Node]:
        nets = nets or tuple(self.networks())
        return {name: node for net in nets for name, node in named_tensors(net)}

    def digest(self, *nets: NetworkParams) -> str:
        h = hashlib.sha256()
        for name, node in self.parameters(*nets).items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(node.value).tobytes())
        return h.hexdigest()


def build_model(config: ModelConfig, seed: int) -> ReciprocalModel:
    return ReciprocalModel(
        config=config,
        t_s2o=build_translator(config.translator("s2o"), seed, "T_s2o"),
        t_o2s=build_translator(config.translator("o2s"), seed, "T_o2s"),
        d_opt=build_discriminator(config.discriminator("opt"), seed, "D_opt"),
        d_sar=build_discriminator(config.discriminator("sar"), seed, "D_sar"),
    )


# -- losses -------------------------------------------------------------------


def _check_probabilities(p: Node, what: str) -> None:
    v = p.value
    if not np.isfinite(v).all():
        raise NumericalError(f"{what} contains non-finite values")
    if not np.all((v >= 0) & (v <= 1)):
        raise ContractError(f"{what} must hold probabilities in (0, 1)")


def _neg_mean_log(p: Node) -> Node:
    return -mean(log(clamp_min(p, LOG_FLOOR)))


def discriminator_loss(d_real: Node, d_fake: Node) -> Node:
    """Binary log-loss: real maps pushed to 1, translated maps to 0."""
    _check_probabilities(d_real, "d_real")
    _check_probabilities(d_fake, "d_fake")
    return _neg_mean_log(d_real) + _neg_mean_log(1.0 - d_fake)


def translator_gan_loss(d_fake_s2o: Node, d_fake_o2s: Node) -> Node:
    _check_probabilities(d_fake_s2o, "d_fake_s2o")
    _check_probabilities(d_fake_o2s, "d_fake_o2s")
    return _neg_mean_log(d_fake_s2o) + _neg_mean_log(d_fake_o2s)


def l1_loss(fake_opt: Node, real_opt: Node, fake_sar: Node, real_sar: Node) -> Node:
    if fake_opt.shape != real_opt.shape or fake_sar.shape != real_sar.shape:
        raise ContractError(
            f"l1_loss shape mismatch: {fake_opt.shape} vs {real_opt.shape}, {fake_sar.shape} vs {real_sar.shape}"
        )
    return mean(abs_(real_opt - fake_opt)) + mean(abs_(real_sar - fake_sar))


def translator_loss(gan: Node, l1: Node, beta: float) -> Node:
    return gan + beta * l1


# -- optimizer ---------------------------------------------------------------


def optimizer_update(
    params: Dict[str, Node],
    grads: Dict[str, np.ndarray],
    state: Dict[str, Dict[str, np.ndarray]],
    cfg: TrainConfig,
    step: int,
) -> None:
    """Apply one update in place; ``step`` is the 1-based Adam time step.

    Parameters without a gradient entry are treated as having zero gradient.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise ContractError(f"gradients for unknown parameters: {sorted(unknown)}")
    lr = np.float32(cfg.learning_rate)
    if cfg.optimizer_kind == "sgd":
        for name, node in params.items():
            g = grads.get(name)
            if g is not None:
                node.value = (node.value - lr * g).astype(np.float32)
        return

    b1, b2 = np.float32(cfg.adam_beta1), np.float32(cfg.adam_beta2)
    corr1 = np.float32(1 - cfg.adam_beta1 ** step)
    corr2 = np.float32(1 - cfg.adam_beta2 ** step)
    eps = np.float32(cfg.adam_eps)
    for name, node in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(node.value)
        slot = state.get(name)
        if slot is None:
            slot = state[name] = {"m": np.zeros_like(node.value), "v": np.zeros_like(node.value)}
        m = b1 * slot["m"] + (1 - b1) * g
        v = b2 * slot["v"] + (1 - b2) * (g * g)
        slot["m"], slot["v"] = m, v
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
        node.value = (node.value - update).astype(np.float32)


# -- training step ------------------------------------------------------------


@dataclass
class StepReport:
    step: int
    loss_d_opt: float
    loss_d_sar: float
    loss_gan: float
    loss_l1: float
    loss_t: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "step": self.step,
            "L_D_opt": self.loss_d_opt,
            "L_D_sar": self.loss_d_sar,
            "L_GAN_T": self.loss_gan,
            "L_L1_T": self.loss_l1,
            "L_T": self.loss_t,
        }


Batch = Tuple[np.ndarray, np.ndarray]  # (sar [N,Cs,H,W], optical [N,3,H,W]) in [-1, 1]


def _finite(node: Node, name: str) -> float:
    value = node.item()
    if not math.isfinite(value):
        raise NumericalError(f"loss term {name} is not finite ({value})")
    return value


def translate_batch(model: ReciprocalModel, batch: Batch) -> Tuple[Node, Node]:
    """Graph-attached (fake optical, fake SAR) for a batch."""
    sar, opt = batch
    return translator_forward(model.t_s2o, Node(sar)), translator_forward(model.t_o2s, Node(opt))


def discriminator_objective(model: ReciprocalModel, domain: str, batch: Batch, fake: Node) -> Node:
    """Discriminator log-loss for ``domain`` ("opt" or "sar") with ``fake`` detached."""
    sar, opt = batch
    net, real = (model.d_opt, opt) if domain == "opt" else (model.d_sar, sar)
    return discriminator_loss(discriminator_forward(net, Node(real)), discriminator_forward(net, detach(fake)))


def translator_objective(
    model: ReciprocalModel, batch: Batch, beta: float, fakes: Optional[Tuple[Node, Node]] = None
) -> Tuple[Node, Node, Node]:
    """(adversarial, L1, hybrid) translator losses."""
    sar, opt = batch
    fake_opt, fake_sar = fakes if fakes is not None else translate_batch(model, batch)
    gan = translator_gan_loss(discriminator_forward(model.d_opt, fake_opt), discriminator_forward(model.d_sar, fake_sar))
    l1 = l1_loss(fake_opt, Node(opt), fake_sar, Node(sar))
    return gan, l1, translator_loss(gan, l1, beta)


def _apply(model: ReciprocalModel, loss: Node, nets: Tuple[NetworkParams, ...], cfg: TrainConfig) -> None:
    params = model.parameters(*nets)
    grad_map = backward(loss)
    grads = {name: grad_map[node] for name, node in params.items() if node in grad_map}
    optimizer_update(params, grads, model.opt_state, cfg, model.step + 1)


@contextlib.contextmanager
def _naming(term: str):
    try:
        yield
    except NumericalError as exc:
        raise NumericalError(f"loss term {term}: {exc}") from None


StepCallback = Callable[[str, ReciprocalModel, Batch], None]


def train_step(
    model: ReciprocalModel, batch: Batch, cfg: TrainConfig, callback: Optional[StepCallback] = None
) -> StepReport:
    """One alternating min-max step.

    ``callback(stage, model, batch)`` fires after each sub-step with stage
    ``"d_opt"``, ``"d_sar"`` or ``"translators"``.
    """
    sar, opt = batch
    if sar.shape[0] == 0 or sar.shape[0] != opt.shape[0]:
        raise ContractError(f"batch must be non-empty and paired, got {sar.shape} and {opt.shape}")

    # translators are untouched until sub-step 3, so their graph is reused there
    fakes = translate_batch(model, batch)

    losses = {}
    for domain, net, fake in (("opt", model.d_opt, fakes[0]), ("sar", model.d_sar, fakes[1])):
        with _naming(f"L(D_{domain})"):
            loss = discriminator_objective(model, domain, batch, fake)
        losses[domain] = _finite(loss, f"L(D_{domain})")
        _apply(model, loss, (net,), cfg)
        if callback:
            callback(f"d_{domain}", model, batch)

    with _naming("L(T)"):
        gan, l1, total = translator_objective(model, batch, cfg.beta, fakes)
    gan_v, l1_v = _finite(gan, "L_GAN(T)"), _finite(l1, "L_L1(T)")
    _finite(total, "L(T)")
    _apply(model, total, (model.t_s2o, model.t_o2s), cfg)
    model.step += 1
    if callback:
        callback("translators", model, batch)
    return StepReport(model.step, losses["opt"], losses["sar"], gan_v, l1_v, gan_v + cfg.beta * l1_v)


# -- checkpoints --------------------------------------------------------------


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: ReciprocalModel
    train_config: TrainConfig


def _config_lines(model: ReciprocalModel, cfg: TrainConfig) -> str:
    items = [("step", model.step)]
    items += [(f"model.{k}", v) for k, v in asdict(model.config).items()]
    items += [(f"train.{k}", v) for k, v in asdict(cfg).items()]
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in items)


def _tensor_items(model: ReciprocalModel) -> Iterator[Tuple[str, np.ndarray]]:
    for name, node in model.parameters().items():
        yield name, node.value
    for name in sorted(model.opt_state):
        for slot in ("m", "v"):
            yield f"{name}#{slot}", model.opt_state[name][slot]


def checkpoint_bytes(model: ReciprocalModel, cfg: TrainConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    text = _config_lines(model, cfg).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    items = list(_tensor_items(model))
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: ReciprocalModel, cfg: TrainConfig, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, cfg))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _parse_config(block: bytes) -> Tuple[int, ModelConfig, TrainConfig]:
    try:
        raw = dict(line.split("=", 1) for line in block.decode("utf-8").splitlines() if line)
    except ValueError as exc:
        raise CheckpointError(f"malformed checkpoint config block: {exc}") from None
    if "step" not in raw:
        raise CheckpointError("checkpoint config lacks step")

    def build(cls, prefix):
        kwargs = {}
        for f in fields(cls):
            key = f"{prefix}.{f.name}"
            if key not in raw:
                raise CheckpointError(f"checkpoint config lacks {key}")
            default = getattr(cls(), f.name)
            kwargs[f.name] = type(default)(raw[key])
        return cls(**kwargs)

    try:
        return int(raw["step"]), build(ModelConfig, "model"), build(TrainConfig, "train")
    except (ValueError, ContractError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid checkpoint config: {exc}") from None


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path} is not a checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported")
    (n,) = r.unpack("<I", "config length")
    step, model_cfg, train_cfg = _parse_config(r.take(n, "config"))

    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "name length")
        name = r.take(ln, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        if rank == 0 or 0 in dims:
            raise ShapeMismatchError(f"tensor {name} declares invalid shape {dims}")
        nbytes = 4 * int(np.prod(dims))
        tensors[name] = np.frombuffer(r.take(nbytes, f"payload of {name}"), dtype="<f4").reshape(dims)
    if r.pos != len(data):
        raise ShapeMismatchError(f"{len(data) - r.pos} trailing bytes after the declared tensors")

    model = build_model(model_cfg, seed=0)
    model.step = step
    params = model.parameters()
    for name, node in params.items():
        if name not in tensors:
            raise ShapeMismatchError(f"checkpoint lacks parameter {name}")
        arr = tensors.pop(name)
        if arr.shape != node.shape:
            raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape}, architecture expects {node.shape}")
        node.value = arr.astype(np.float32)
    for key, arr in tensors.items():
        name, _, slot = key.rpartition("#")
        if name not in params or slot not in ("m", "v"):
            raise ShapeMismatchError(f"unexpected tensor {key} in checkpoint")
        if arr.shape != params[name].shape:
            raise ShapeMismatchError(f"{key}: checkpoint shape {arr.shape}, expected {params[name].shape}")
        model.opt_state.setdefault(name, {})[slot] = arr.astype(np.float32)
    for name, slot in model.opt_state.items():
        if set(slot) != {"m", "v"}:
            raise ShapeMismatchError(f"incomplete optimizer state for {name}")
    return Checkpoint(model, train_cfg)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})


def run_training(
    model: ReciprocalModel,
    pairs: Sequence,
    cfg: TrainConfig,
    steps: Optional[int] = None,
    on_step: Optional[Callable[[StepReport], None]] = None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
) -> List[StepReport]:
    """Train from ``model.step`` until ``steps`` (default ``cfg.total_steps``) total steps.

    Batches come from :func:`~sar2opt.data.batch_for_step`, so resuming a
    loaded checkpoint replays exactly the batches an uninterrupted run sees.
    """
    from .data import batch_for_step, to_batch

    target = cfg.total_steps if steps is None else steps
    reports = []
    while model.step < target:
        batch = to_batch(batch_for_step(pairs, cfg.batch_size, cfg.seed, model.step))
        report = train_step(model, batch, cfg)
        reports.append(report)
        if on_step:
            on_step(report)
        if checkpoint_path and checkpoint_every and model.step % checkpoint_every == 0:
            save_checkpoint(model, cfg, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(model, cfg, checkpoint_path)
    return reports


def translate_images(net: NetworkParams, images: Sequence[np.ndarray], batch_size: int = 8) -> List[np.ndarray]:
    """uint8 HWC images in, translated uint8 HWC images out."""
    from .data import denormalize, normalize

    out = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack([normalize(im).transpose(2, 0, 1) for im in images[start : start + batch_size]])
        y = translator_forward(net, Node(chunk)).value
        out.extend(denormalize(y[i]).transpose(1, 2, 0) for i in range(y.shape[0]))
    return out
