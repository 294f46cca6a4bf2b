"""Joint training of the filter banks and the segmentation U-Net.

The torch module here wires the two representation banks in front of the
U-Net so one optimizer updates both parameter sets under the combined
objective: sigmoid cross-entropy on labeled windows plus the two
discriminative bank losses on single-class exemplar patches, each scaled
by its lambda.

Determinism contract: every random draw comes from a numpy SeedSequence
keyed by purpose —

* parameter init:        SeedSequence([seed, crc32(param_name)])
* per-epoch batch order: SeedSequence([seed, 1, epoch])
* exemplar draw at step: SeedSequence([seed, step])   (via balanced_sample)

so two runs with the same config and data produce bit-identical loss
histories and checkpoints at threads=1, and the degenerate configurations
used for A/B comparisons (e.g. a bank-less network against the plain
baseline) share the exact same U-Net initialization.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import imagedata, lightunet, patches, reprlayer
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import CheckpointError, DataError, TrainingDiverged
from .imagedata import DatasetManifest
from .lightunet import LightUNet, Prediction
from .patches import PatchSpec, RepresentativePatchSet, balanced_sample
from .reprlayer import ReprLossCoefficients, RepresentationParams

__all__ = [
    "TrainConfig",
    "JointNet",
    "lr_at",
    "total_loss",
    "train",
    "evaluate",
    "predict_image",
    "build_network",
    "load_network",
    "init_weights",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "write_loss_csv",
]

MODES = ("dsrdn", "plain")


@dataclass(frozen=True)
class TrainConfig:
    """Flat run configuration; serializes to a key = value text file."""

    mode: str = "dsrdn"
    seed: int = 0
    # optimization schedule
    batch_size: int = 44
    epochs: int = 25
    base_lr: float = 1e-4
    lr_drop_factor: float = 0.1
    lr_drop_period: int = 8
    momentum: float = 0.0
    # combined-objective weights
    lambda1: float = 0.05
    lambda2: float = 0.05
    alpha: float = 0.5
    beta: float = 1e-5
    gamma: float = 0.5
    sigma: float = 1e-5
    zeta: float = 1e-5
    # representation banks
    k: int = 16
    filter_size: int = 3
    p: int = 8
    # patch pipeline
    window: int = 64
    stride: int = 16
    bone_min_fraction: float = 0.30
    dirt_min_fraction: float = 0.10
    other_max_fraction: float = 0.02
    max_per_class: int = 64
    # segmentation network
    depth: int = 4
    base_width: int = 16
    width_cap: int = 128
    include_raw_input: bool = False
    # execution
    dtype: str = "float32"
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 < self.lr_drop_factor <= 1:
            raise ValueError(f"lr_drop_factor must be in (0, 1], got {self.lr_drop_factor}")
        if self.lr_drop_period < 1:
            raise ValueError(f"lr_drop_period must be at least 1, got {self.lr_drop_period}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        for name in ("lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        self.coeffs()  # validates alpha..zeta
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError(f"filter_size must be odd and positive, got {self.filter_size}")
        if self.p < 1:
            raise ValueError(f"p must be at least 1, got {self.p}")
        PatchSpec(self.window, self.stride)  # validates window/stride
        if self.window % 2**self.depth:
            raise ValueError(
                f"window {self.window} must be divisible by 2^depth = {2**self.depth}"
            )
        if self.depth < 1 or self.base_width < 1 or self.width_cap < 1:
            raise ValueError("depth, base_width and width_cap must be positive")
        if self.mode == "dsrdn" and self.k == 0 and not self.include_raw_input:
            raise ValueError(
                "dsrdn mode with k=0 and include_raw_input off leaves the network without input"
            )
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.threads < 1:
            raise ValueError(f"threads must be at least 1, got {self.threads}")

    def coeffs(self) -> ReprLossCoefficients:
        return ReprLossCoefficients(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, sigma=self.sigma, zeta=self.zeta
        )

    def patch_spec(self) -> PatchSpec:
        return PatchSpec(self.window, self.stride)

    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for f in dataclasses.fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)!r}\n")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        field_types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise DataError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip().strip("'\"")
                if key not in field_types:
                    raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _parse_value(value, field_types[key], key, path, lineno)
        values.update(overrides)
        try:
            return cls(**values)
        except ValueError as exc:
            raise DataError(f"invalid config in {path}: {exc}") from exc


def _parse_value(text: str, type_name: str, key: str, path, lineno: int):
    try:
        if type_name == "bool":
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step-decayed rate: base_lr * drop_factor^floor(epoch / drop_period)."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.base_lr * config.lr_drop_factor ** (epoch // config.lr_drop_period)


class JointNet(nn.Module):
    """Representation banks feeding the U-Net, trained as one module.

    In dsrdn mode the U-Net input is the channel stack [bone bank responses,
    dirt bank responses, raw image if include_raw_input], in that order; in
    plain mode it is the raw image alone.
    """

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.mode = config.mode
        self.k = config.k if config.mode == "dsrdn" else 0
        self.include_raw_input = config.include_raw_input if config.mode == "dsrdn" else True
        if self.mode == "plain":
            in_ch = 1
        else:
            in_ch = 2 * self.k + (1 if self.include_raw_input else 0)
            if self.k > 0:
                pad = config.filter_size // 2
                self.conv_bone = nn.Conv2d(1, self.k, config.filter_size, padding=pad, bias=False)
                self.conv_dirt = nn.Conv2d(1, self.k, config.filter_size, padding=pad, bias=False)
        self.unet = LightUNet(
            in_channels=in_ch,
            depth=config.depth,
            base_width=config.base_width,
            width_cap=config.width_cap,
        )

    def features(self, x):
        """(B, 1, H, W) grayscale batch -> the U-Net input stack."""
        if self.mode == "plain":
            return x
        parts = []
        if self.k > 0:
            parts.append(self.conv_bone(x))
            parts.append(self.conv_dirt(x))
        if self.include_raw_input:
            parts.append(x)
        return torch.cat(parts, dim=1) if len(parts) > 1 else parts[0]

    def forward(self, x):
        return self.unet(self.features(x))

    def representation(self) -> RepresentationParams:
        """Current bank weights as plain float64 arrays."""
        if self.mode != "dsrdn" or self.k == 0:
            empty = np.zeros((0, 3, 3))
            return RepresentationParams(bone_filters=empty, dirt_filters=empty.copy())
        shape = self.conv_bone.weight.shape  # (K, 1, m, n)
        return RepresentationParams(
            bone_filters=self.conv_bone.weight.detach().numpy().astype(np.float64).reshape(
                shape[0], shape[2], shape[3]
            ),
            dirt_filters=self.conv_dirt.weight.detach().numpy().astype(np.float64).reshape(
                shape[0], shape[2], shape[3]
            ),
        )


def init_weights(net: JointNet, seed: int) -> None:
    """Deterministic init from per-parameter named streams.

    Conv weights draw uniform +-1/sqrt(fan_in); conv biases and norm shifts
    are zero; norm scales are one. Streams are keyed by parameter name, so
    parameters shared between configurations (e.g. the U-Net in plain mode
    and in a bank-less dsrdn configuration) initialize identically.
    """
    with torch.no_grad():
        for name, param in net.named_parameters():
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, zlib.crc32(name.encode())])
            )
            if param.ndim >= 2:  # convolution kernels
                fan_in = int(np.prod(param.shape[1:]))
                u = 1.0 / np.sqrt(fan_in)
                values = rng.uniform(-u, u, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values).to(param.dtype))
            elif name.endswith("bias"):
                param.zero_()
            else:  # batch-norm scale
                param.fill_(1.0)


def build_network(config: TrainConfig) -> JointNet:
    net = JointNet(config).to(config.torch_dtype())
    init_weights(net, config.seed)
    return net


def total_loss(
    pred: Prediction,
    target: np.ndarray,
    params: RepresentationParams,
    bone_patches: list[np.ndarray],
    dirt_patches: list[np.ndarray],
    config: TrainConfig,
) -> tuple[float, dict]:
    """Reference combined objective: CE + lambda1 * bank-bone + lambda2 * bank-dirt.

    Returns the scalar and its three components. The trainer's torch path
    computes the same quantity; this numpy form is the auditable contract.
    """
    if config.mode != "plain" and params.k > 0 and (not bone_patches or not dirt_patches):
        raise DataError("combined objective requires representative patches in dsrdn mode")
    ce = lightunet.cross_entropy_loss(pred, target)
    if config.mode == "plain" or params.k == 0:
        l_bone = 0.0
        l_dirt = 0.0
    else:
        coeffs = config.coeffs()
        l_bone = reprlayer.loss_bone(params, bone_patches, dirt_patches, coeffs)
        l_dirt = reprlayer.loss_dirt(params, bone_patches, dirt_patches, coeffs)
    total = ce + config.lambda1 * l_bone + config.lambda2 * l_dirt
    return total, {"ce": ce, "l_bone": l_bone, "l_dirt": l_dirt}


def _torch_ce(logits, target):
    """Batch mean over pixels of the true-channel sigmoid cross-entropy."""
    n_pixels = logits.shape[0] * logits.shape[2] * logits.shape[3]
    return torch.sum(F.softplus(-logits) * target) / n_pixels


def _torch_bank_losses(net: JointNet, bone_batch, dirt_batch, coeffs: ReprLossCoefficients):
    resp_b_on_d = net.conv_bone(dirt_batch)
    resp_b_on_b = net.conv_bone(bone_batch)
    l_bone = coeffs.alpha * torch.sum(resp_b_on_d**2) - coeffs.beta * torch.sum(resp_b_on_b**2)
    resp_d_on_b = net.conv_dirt(bone_batch)
    resp_d_on_d = net.conv_dirt(dirt_batch)
    l_dirt = (
        coeffs.gamma * torch.sum(resp_d_on_b**2)
        - coeffs.sigma * torch.sum(resp_d_on_d**2)
        + coeffs.zeta * torch.sum(torch.abs(resp_d_on_d))
    )
    return l_bone, l_dirt


def load_labeled_patches(manifest: DatasetManifest, config: TrainConfig):
    """All sliding-window patches from every manifest image, in manifest order."""
    spec = config.patch_spec()
    all_patches = []
    for entry in manifest:
        image, labels = imagedata.load_pair(entry.image_path, entry.label_path)
        all_patches.extend(patches.extract_patches(image, labels, spec, entry.identifier))
    if not all_patches:
        raise DataError("training manifest produced no patches")
    return all_patches


def _one_hot_batch(label_stack: np.ndarray, dtype) -> np.ndarray:
    classes = np.arange(imagedata.NUM_CLASSES, dtype=label_stack.dtype)
    return (label_stack[:, None, :, :] == classes[None, :, None, None]).astype(dtype)


def train(
    manifest: DatasetManifest,
    rep_set: RepresentativePatchSet | None,
    config: TrainConfig,
    checkpoint_path=None,
    loss_csv_path=None,
    log=None,
) -> Checkpoint:
    """Run the full schedule and return (and optionally write) the checkpoint.

    `log`, when given, is called once per epoch with a small status dict.
    Raises TrainingDiverged as soon as any step's total loss is non-finite.
    """
    torch.set_num_threads(config.threads)
    use_banks = config.mode == "dsrdn" and config.k > 0
    if use_banks and rep_set is None:
        raise DataError("dsrdn mode requires a representative patch set")

    training_patches = load_labeled_patches(manifest, config)
    np_dtype = np.float64 if config.dtype == "float64" else np.float32
    image_stack = np.stack([p.image for p in training_patches]).astype(np_dtype)[:, None]
    label_stack = np.stack([p.labels for p in training_patches])

    net = build_network(config)
    optimizer = torch.optim.SGD(net.parameters(), lr=config.base_lr, momentum=config.momentum)
    coeffs = config.coeffs()

    history = []
    step = 0
    net.train()
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng(
            np.random.SeedSequence([config.seed, 1, epoch])
        ).permutation(len(training_patches))
        epoch_total = 0.0
        epoch_steps = 0
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            x = torch.from_numpy(image_stack[batch_idx])
            y = torch.from_numpy(_one_hot_batch(label_stack[batch_idx], np_dtype))

            optimizer.zero_grad()
            logits = net(x)
            ce = _torch_ce(logits, y)
            if use_banks:
                bone_draw, dirt_draw = balanced_sample(rep_set, config.seed, step)
                bone_batch = torch.from_numpy(np.stack(bone_draw).astype(np_dtype)[:, None])
                dirt_batch = torch.from_numpy(np.stack(dirt_draw).astype(np_dtype)[:, None])
                l_bone, l_dirt = _torch_bank_losses(net, bone_batch, dirt_batch, coeffs)
                total = ce + config.lambda1 * l_bone + config.lambda2 * l_dirt
                lb, ld = float(l_bone.item()), float(l_dirt.item())
            else:
                total = ce
                lb, ld = 0.0, 0.0
            total_value = float(total.item())
            if not np.isfinite(total_value):
                raise TrainingDiverged(
                    f"non-finite total loss at step {step} (epoch {epoch}): "
                    f"ce={float(ce.item())!r}, l_bone={lb!r}, l_dirt={ld!r}"
                )
            total.backward()
            optimizer.step()

            history.append([step, epoch, lr, float(ce.item()), lb, ld, total_value])
            epoch_total += total_value
            epoch_steps += 1
            step += 1
        if log is not None:
            log(
                {
                    "epoch": epoch,
                    "lr": lr,
                    "steps": epoch_steps,
                    "mean_total": epoch_total / max(epoch_steps, 1),
                }
            )

    net.eval()
    ckpt = Checkpoint(
        epoch=config.epochs,
        config=config.to_dict(),
        weights=_state_arrays(net),
        momentum=_momentum_arrays(net, optimizer),
        loss_history=history,
    )
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    if loss_csv_path is not None:
        write_loss_csv(loss_csv_path, history)
    return ckpt


def _state_arrays(net: JointNet) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in net.state_dict().items():
        arr = tensor.detach().numpy()
        out[name] = arr.copy() if np.issubdtype(arr.dtype, np.integer) else arr.astype(np.float64)
    return out


def _momentum_arrays(net: JointNet, optimizer) -> dict[str, np.ndarray]:
    out = {}
    for name, param in net.named_parameters():
        state = optimizer.state.get(param, {})
        buf = state.get("momentum_buffer")
        if buf is not None:
            out[name] = buf.detach().numpy().astype(np.float64)
    return out


def write_loss_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,epoch,lr,ce,l_bone,l_dirt,total\n")
        for step, epoch, lr, ce, lb, ld, total in history:
            fh.write(f"{step},{epoch},{lr!r},{ce!r},{lb!r},{ld!r},{total!r}\n")


def load_network(ckpt: Checkpoint) -> tuple[JointNet, TrainConfig]:
    """Rebuild the network from a checkpoint's config echo and stored weights."""
    try:
        config = TrainConfig(**ckpt.config)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint config echo is invalid: {exc}") from exc
    net = JointNet(config).to(config.torch_dtype())
    state = {}
    reference = net.state_dict()
    for name, tensor in reference.items():
        if name not in ckpt.weights:
            raise CheckpointError(f"checkpoint is missing weight block '{name}'")
        arr = ckpt.weights[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"weight block '{name}' has shape {tuple(arr.shape)}, expected {tuple(tensor.shape)}"
            )
        state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(tensor.dtype)
    net.load_state_dict(state)
    net.eval()
    return net, config


def predict_image(net: JointNet, image: np.ndarray) -> Prediction:
    """Whole-slice inference (the network is fully convolutional)."""
    imagedata.validate_image(image)
    dtype = next(net.parameters()).dtype
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(image[None, None].astype(np.float64)).to(dtype)
            logits = net(x)
    finally:
        net.train(was_training)
    return Prediction(logits=logits.squeeze(0).numpy().astype(np.float64))


def evaluate(
    ckpt: Checkpoint,
    manifest: DatasetManifest,
    expected_mode: str | None = None,
):
    """Per-image and pooled F1 of a checkpoint over a manifest.

    Returns (pooled report, [(image id, report)], [(image id, predicted labels)]).
    """
    from . import metrics

    if expected_mode is not None and ckpt.config.get("mode") != expected_mode:
        raise CheckpointError(
            f"checkpoint was trained in {ckpt.config.get('mode')!r} mode but "
            f"evaluation requested {expected_mode!r} mode"
        )
    net, _ = load_network(ckpt)
    per_image = []
    predictions = []
    for entry in manifest:
        image, labels = imagedata.load_pair(entry.image_path, entry.label_path)
        predicted = lightunet.predict_labels(predict_image(net, image))
        per_image.append((entry.identifier, metrics.dice(predicted, labels)))
        predictions.append((entry.identifier, predicted))
    pooled = metrics.pool_reports([r for _, r in per_image])
    return pooled, per_image, predictions
