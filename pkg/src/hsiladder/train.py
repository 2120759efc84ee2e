"""Adam training loop over mixed labeled/unlabeled batches.

Each iteration draws ``batch_size`` labeled patches (with replacement from
the small labeled pool) and ``batch_size`` unlabeled patches, concatenates
them labeled-first, runs the ladder forward, and takes one Adam step on the
total cost.  The supervised cost sees only the labeled half; the
reconstruction cost sees the whole batch.  Modes:

    ladder           joint objective (the default)
    supervised-only  zero reconstruction weight, decoder skipped
    sdae-pretrain    greedy layer-wise denoising-autoencoder pretraining on
                     unlabeled data, then supervised fine-tuning of the stack

Runs are bit-reproducible from (config, data, seed) in double precision, and
checkpoints capture params, optimizer moments, running statistics and RNG
states so a resumed run continues bit-identically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from . import ops
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .ladder import CONV3X3, SOFTMAX_HEAD, LadderNetwork, LadderSpec
from .rng import Rng
from .tensor import GradTape, Tensor

MODES = ("ladder", "supervised-only", "sdae-pretrain")


@dataclass
class TrainConfig:
    ladder: LadderSpec
    learning_rate: float
    iterations: int
    seed: int
    batch_size: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: str = "none"  # "none" | "linear"
    lr_decay_fraction: float = 0.25
    mode: str = "ladder"
    precision: str = "f64"  # "f64" | "f32"
    grad_clip: float | None = None
    pretrain_iterations: int = 500
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_decay not in ("none", "linear"):
            raise ConfigError(f"lr_decay must be 'none' or 'linear', got {self.lr_decay!r}")
        if self.precision not in ("f64", "f32"):
            raise ConfigError(f"precision must be 'f64' or 'f32', got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class TrainReport:
    c_super: np.ndarray
    c_recon: np.ndarray
    c_total: np.ndarray
    oa: float
    aa: float
    per_class: np.ndarray
    confusion: np.ndarray
    seed: int
    seconds: float
    config_echo: dict

    def write(self, out_dir) -> None:
        """report.txt (key = value) plus losses.csv (per-iteration curve)."""
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.txt", "w") as f:
            f.write(f"seed = {self.seed}\n")
            f.write(f"oa = {self.oa:.6f}\n")
            f.write(f"aa = {self.aa:.6f}\n")
            for i, acc in enumerate(self.per_class, start=1):
                f.write(f"class_{i}_accuracy = {acc:.6f}\n")
            f.write(f"seconds = {self.seconds:.3f}\n")
            f.write(f"iterations = {len(self.c_total)}\n")
            f.write(f"final_c_super = {self.c_super[-1]:.6f}\n")
            f.write(f"final_c_recon = {self.c_recon[-1]:.6f}\n")
            f.write(f"final_c_total = {self.c_total[-1]:.6f}\n")
            for k, v in self.config_echo.items():
                f.write(f"config.{k} = {v}\n")
            f.write("confusion =\n")
            for row in self.confusion:
                f.write("  " + " ".join(str(int(v)) for v in row) + "\n")
        with open(out / "losses.csv", "w") as f:
            f.write("iteration,c_super,c_recon,c_total\n")
            for i, (s, r, t) in enumerate(zip(self.c_super, self.c_recon, self.c_total)):
                f.write(f"{i},{s!r},{r!r},{t!r}\n")


class Adam:
    """Bias-corrected adaptive-moment optimizer over named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
            elif not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g if isinstance(g, np.ndarray) else 0.0)
            update = (self.lr * lr_scale) * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def _lr_scale(config: TrainConfig, iteration: int) -> float:
    if config.lr_decay == "none":
        return 1.0
    start = int(config.iterations * (1.0 - config.lr_decay_fraction))
    if iteration < start:
        return 1.0
    return (config.iterations - iteration) / max(1, config.iterations - start)


def batch_input(patches: np.ndarray, input_shape: tuple, dtype) -> np.ndarray:
    """Reshape (n, w, w, c) patches to the model's input shape."""
    n = patches.shape[0]
    flat = int(np.prod(patches.shape[1:]))
    if len(input_shape) == 1:
        if flat != input_shape[0]:
            raise ShapeError(
                f"patches with {flat} values per sample do not fit input {input_shape}"
            )
        return patches.reshape(n, input_shape[0]).astype(dtype, copy=False)
    if patches.shape[1:] != input_shape:
        raise ShapeError(f"patch shape {patches.shape[1:]} does not match input {input_shape}")
    return patches.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def _checkpoint_entries(net: LadderNetwork, adam: Adam, noise_rng: Rng, batch_rng: Rng):
    entries: dict[str, np.ndarray] = {}
    for name, p in net.params.items():
        entries[f"param/{name}"] = p.data
    for l, rs in net.running.items():
        entries[f"running/{l}/mean"] = rs.mean
        entries[f"running/{l}/var"] = rs.var
        entries[f"running/{l}/init"] = np.array([1 if rs.initialized else 0], dtype=np.uint64)
    for name in net.params:
        entries[f"adam/m/{name}"] = adam.m[name]
        entries[f"adam/v/{name}"] = adam.v[name]
    entries["adam/t"] = np.array([adam.t], dtype=np.uint64)
    entries["rng/noise"] = noise_rng.state_words()
    entries["rng/batch"] = batch_rng.state_words()
    return entries


def save_checkpoint(path, net, adam, iteration, noise_rng, batch_rng) -> None:
    ckpt.save_entries(path, iteration, _checkpoint_entries(net, adam, noise_rng, batch_rng))


def load_checkpoint(path, net: LadderNetwork, adam: Adam, noise_rng: Rng, batch_rng: Rng) -> int:
    iteration, entries = ckpt.load_entries(path)
    for name, p in net.params.items():
        key = f"param/{name}"
        if key not in entries:
            raise DataError(f"checkpoint missing {key}")
        if entries[key].shape != p.data.shape:
            raise DataError(
                f"checkpoint {key} has shape {entries[key].shape}, model expects {p.data.shape}"
            )
        p.data = entries[key].astype(p.data.dtype)
    for l, rs in net.running.items():
        rs.mean = entries[f"running/{l}/mean"].astype(rs.mean.dtype)
        rs.var = entries[f"running/{l}/var"].astype(rs.var.dtype)
        rs.initialized = bool(entries[f"running/{l}/init"][0])
    for name in net.params:
        adam.m[name] = entries[f"adam/m/{name}"].astype(adam.m[name].dtype)
        adam.v[name] = entries[f"adam/v/{name}"].astype(adam.v[name].dtype)
    adam.t = int(entries["adam/t"][0])
    noise_rng.set_state_words(entries["rng/noise"])
    batch_rng.set_state_words(entries["rng/batch"])
    return iteration


# ---------------------------------------------------------------------------
# SDAE pretraining (layer-wise denoising autoencoders, then fine-tuning)
# ---------------------------------------------------------------------------


def _sdae_pretrain(net: LadderNetwork, config: TrainConfig, unlabeled: np.ndarray, rng: Rng):
    """Greedy layer-wise pretraining of the encoder weights on unlabeled data.

    Each non-head layer is trained as a denoising autoencoder (corrupt the
    layer input, encode, decode with a throwaway mirror weight, minimize the
    squared reconstruction error); the learned weights seed the encoder for
    the supervised fine-tuning stage.
    """
    spec = net.spec
    dtype = net.dtype

    def stack_forward(x: np.ndarray, depth: int) -> np.ndarray:
        h = Tensor(x, dtype=dtype)
        for l in range(1, depth + 1):
            layer = spec.layers[l - 1]
            w = net.params[f"enc{l}/W"]
            if layer.kind == CONV3X3:
                h = ops.relu(ops.conv2d(h, w))
            else:
                hin = ops.flatten(h) if h.data.ndim > 2 else h
                h = ops.relu(ops.matmul(hin, w))
        return h.data

    for depth, layer in enumerate(spec.layers, start=1):
        if layer.kind == SOFTMAX_HEAD:
            break
        w = net.params[f"enc{depth}/W"]
        if layer.kind == CONV3X3:
            dec_shape = (3, 3, layer.width, w.data.shape[2])
            fan = 9 * layer.width
        else:
            dec_shape = (layer.width, w.data.shape[0])
            fan = layer.width
        w_dec = Tensor(rng.normal(np.sqrt(2.0 / fan), dec_shape, dtype=dtype), requires_grad=True)
        opt = Adam(
            {"w": w, "w_dec": w_dec},
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        )
        for _ in range(config.pretrain_iterations):
            idx = rng.integers(0, len(unlabeled), config.batch_size)
            x = stack_forward(unlabeled[idx], depth - 1)
            with GradTape() as tape:
                xt = Tensor(x, dtype=dtype)
                noisy = ops.add_gaussian_noise(xt, spec.noise_std, rng)
                if layer.kind == CONV3X3:
                    enc = ops.relu(ops.conv2d(noisy, w))
                    dec = ops.conv2d_transpose(enc, w_dec)
                else:
                    hin = ops.flatten(noisy) if noisy.data.ndim > 2 else noisy
                    enc = ops.relu(ops.matmul(hin, w))
                    dec = ops.matmul(enc, w_dec)
                    if x.ndim > 2:
                        dec = ops.reshape(dec, x.shape)
                diff = ops.sub(dec, xt)
                loss = ops.scale(ops.sum_all(ops.square(diff)), 1.0 / x.size)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"SDAE pretraining diverged at layer {depth}")
            w.zero_grad()
            w_dec.zero_grad()
            tape.backward(loss)
            opt.step()


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


def train(
    config: TrainConfig,
    patchset,
    split,
    out_dir=None,
    resume=None,
) -> tuple[LadderNetwork, TrainReport]:
    spec = config.ladder
    dtype = config.dtype
    root = Rng(config.seed)
    init_rng, noise_rng, batch_rng, pretrain_rng = root.spawn(4)
    net = LadderNetwork(spec, init_rng, dtype=dtype)

    labeled = split.labeled_train
    unlabeled = split.unlabeled_train if len(split.unlabeled_train) else split.labeled_train
    if len(labeled) == 0:
        raise DataError("split has no labeled training points")
    x_labeled = batch_input(patchset.patches[labeled], spec.input_shape, dtype)
    y_labeled = patchset.labels[labeled]
    x_unlabeled = batch_input(patchset.patches[unlabeled], spec.input_shape, dtype)

    adam = Adam(
        net.params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps
    )
    start_iter = 0
    if resume is not None:
        start_iter = load_checkpoint(resume, net, adam, noise_rng, batch_rng)
    elif config.mode == "sdae-pretrain":
        _sdae_pretrain(net, config, x_unlabeled, pretrain_rng)

    use_decoder = config.mode == "ladder"
    lambdas = spec.lambdas if use_decoder else tuple(0.0 for _ in spec.lambdas)

    n_iter = config.iterations
    c_super_curve = np.zeros(n_iter)
    c_recon_curve = np.zeros(n_iter)
    c_total_curve = np.zeros(n_iter)
    t0 = time.perf_counter()
    last_ckpt = None
    from pathlib import Path

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    for it in range(start_iter, n_iter):
        li = batch_rng.integers(0, len(x_labeled), config.batch_size)
        ui = batch_rng.integers(0, len(x_unlabeled), config.batch_size)
        batch = np.concatenate([x_labeled[li], x_unlabeled[ui]], axis=0)
        targets = y_labeled[li]
        net.zero_grads()
        with GradTape() as tape:
            c_total, c_super, c_recon, _ = net.training_loss(
                batch,
                config.batch_size,
                targets,
                noise_rng,
                lambdas=lambdas,
                use_decoder=use_decoder,
            )
        total_val = c_total.item()
        if not np.isfinite(total_val):
            raise DivergenceError(
                f"loss became non-finite at iteration {it}"
                + (f"; last checkpoint retained at {last_ckpt}" if last_ckpt else "")
            )
        tape.backward(c_total)
        if config.grad_clip is not None:
            clip_gradients(net.params, config.grad_clip)
        adam.step(lr_scale=_lr_scale(config, it))
        c_super_curve[it] = c_super.item()
        c_recon_curve[it] = c_recon.item()
        c_total_curve[it] = total_val
        if (
            out_dir is not None
            and config.checkpoint_interval
            and (it + 1) % config.checkpoint_interval == 0
        ):
            last_ckpt = Path(out_dir) / "last.ckpt"
            save_checkpoint(last_ckpt, net, adam, it + 1, noise_rng, batch_rng)

    seconds = time.perf_counter() - t0
    metrics = evaluate(net, patchset, split.test)
    report = TrainReport(
        c_super=c_super_curve,
        c_recon=c_recon_curve,
        c_total=c_total_curve,
        oa=metrics["oa"],
        aa=metrics["aa"],
        per_class=metrics["per_class"],
        confusion=metrics["confusion"],
        seed=config.seed,
        seconds=seconds,
        config_echo={
            "mode": config.mode,
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "iterations": config.iterations,
            "noise_std": spec.noise_std,
            "lambdas": ",".join(repr(v) for v in spec.lambdas),
            "precision": config.precision,
        },
    )
    if out_dir is not None:
        report.write(out_dir)
        save_checkpoint(Path(out_dir) / "final.ckpt", net, adam, n_iter, noise_rng, batch_rng)
    return net, report


def evaluate(net: LadderNetwork, patchset, test_indices) -> dict:
    """Clean-encoder eval metrics: OA, AA, per-class recall, confusion."""
    test_indices = np.asarray(test_indices)
    if test_indices.size == 0:
        raise DataError("empty test set")
    x = batch_input(patchset.patches[test_indices], net.spec.input_shape, net.dtype)
    y_true = patchset.labels[test_indices]
    y_pred = net.predict(x)
    k = net.spec.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1
    return metrics_from_confusion(confusion)


def metrics_from_confusion(confusion: np.ndarray) -> dict:
    total = confusion.sum()
    if total == 0:
        raise DataError("confusion matrix is empty")
    oa = float(np.trace(confusion)) / float(total)
    row_sums = confusion.sum(axis=1)
    present = row_sums > 0
    per_class = np.zeros(len(confusion))
    per_class[present] = confusion.diagonal()[present] / row_sums[present]
    aa = float(per_class[present].mean())
    return {"oa": oa, "aa": aa, "per_class": per_class, "confusion": confusion}


def supervised_equivalent(config: TrainConfig) -> TrainConfig:
    """The supervised-only twin of a ladder config (same seed and schedule)."""
    return replace(config, mode="supervised-only")
