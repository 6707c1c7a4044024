"""Training objectives, learning-rate schedule, early-stopping loop and gradient checks."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .dataset import PatchPair, stack
from .errors import NumericError, ParameterError, VerificationError
from .network import Checkpoint, NetConfig, UNet, init, state_to_numpy
from .schedule import NoiseSchedule, make_linear

log = logging.getLogger(__name__)

FM_TIME_SCALE = 1000.0
_VAL_STREAM = 0x5EED_0001
_TRAIN_STREAM = 0x5EED_0002


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "noise"
    lr0: float = 1e-3
    lr_min: float = 1e-6
    max_epochs: int = 1500
    batch: int = 32
    patience: int = 200
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.objective not in ("noise", "velocity"):
            raise ParameterError(f"unknown objective {self.objective!r}")
        if not self.lr_min < self.lr0:
            raise ParameterError("lr_min must be below lr0")
        if self.max_epochs < 1 or not 1 <= self.patience <= self.max_epochs:
            raise ParameterError("need 1 <= patience <= max_epochs")
        if self.batch < 1:
            raise ParameterError("batch must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf

    def __len__(self) -> int:
        return len(self.val_loss)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for e, row in enumerate(zip(self.train_loss, self.val_loss, self.lr)):
                w.writerow([e, *(repr(float(v)) for v in row)])


def _arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        cond, target = batch
        return np.asarray(cond, np.float32), np.asarray(target, np.float32)
    batch = list(batch)
    if not batch:
        raise ParameterError("empty batch")
    if not isinstance(batch[0], PatchPair):
        raise ParameterError("batch must hold PatchPair items or a (cond, target) pair of arrays")
    return stack(batch)


def draw_noise_terms(rng: np.random.Generator, n: int, shape, T: int):
    t = rng.integers(1, T + 1, size=n)
    eps = rng.standard_normal((n, *shape)).astype(np.float32)
    return t, eps


def draw_velocity_terms(rng: np.random.Generator, n: int, shape):
    t = rng.random(n)
    eps = rng.standard_normal((n, *shape)).astype(np.float32)
    return t, eps


def noise_loss(net: Callable, sched: NoiseSchedule, x0, y, t, eps) -> torch.Tensor:
    """Mean squared error between predicted and injected noise at timesteps t."""
    dtype = x0.dtype
    ab = torch.as_tensor(sched.alpha_bar[np.asarray(t) - 1], dtype=dtype).reshape(-1, 1, 1, 1)
    x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    pred = net(x_t, y, torch.as_tensor(np.asarray(t), dtype=torch.float64))
    return ((pred - eps) ** 2).mean()


def velocity_loss(net: Callable, x0, y, t, eps) -> torch.Tensor:
    """Regress the straight-line velocity eps - x0 at x_t = (1-t) x0 + t eps."""
    tt = torch.as_tensor(np.asarray(t), dtype=x0.dtype).reshape(-1, 1, 1, 1)
    x_t = (1.0 - tt) * x0 + tt * eps
    pred = net(x_t, y, torch.as_tensor(np.asarray(t), dtype=torch.float64) * FM_TIME_SCALE)
    return ((pred - (eps - x0)) ** 2).mean()


def _objective_loss(net, objective, sched, x0, y, rng):
    shape = tuple(x0.shape[1:])
    if objective == "noise":
        t, eps = draw_noise_terms(rng, x0.shape[0], shape, sched.T)
        return noise_loss(net, sched, x0, y, t, torch.from_numpy(eps).to(x0.dtype))
    t, eps = draw_velocity_terms(rng, x0.shape[0], shape)
    return velocity_loss(net, x0, y, t, torch.from_numpy(eps).to(x0.dtype))


def _trainable(model) -> tuple[Callable, nn.Module | None]:
    if isinstance(model, Checkpoint):
        net = UNet(model.config)
        net.load_state_dict({k: torch.from_numpy(v.astype(np.float32)) for k, v in model.params.items()})
        return net, net
    if isinstance(model, nn.Module):
        return model, model
    return model, None


def _batch_loss(model, objective, sched, batch, rng):
    cond, target = _arrays(batch)
    fn, net = _trainable(model)
    if net is not None:
        net.zero_grad(set_to_none=True)
    loss = _objective_loss(fn, objective, sched, torch.from_numpy(target), torch.from_numpy(cond), rng)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = {}
    if net is not None and loss.requires_grad:
        loss.backward()
        grads = {
            k: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape), np.float32))
            for k, p in net.named_parameters()
        }
    return float(loss.detach()), grads


def diffusion_batch_loss(model, sched: NoiseSchedule, batch, rng: np.random.Generator):
    """Noise-prediction loss for one batch and its parameter gradients.

    ``model`` may be a Checkpoint, a torch module, or any callable
    ``(x_t, y, t) -> prediction`` (no gradients are returned for plain callables).
    """
    return _batch_loss(model, "noise", sched, batch, rng)


def fm_batch_loss(model, batch, rng: np.random.Generator):
    """Flow-matching velocity loss for one batch and its parameter gradients."""
    return _batch_loss(model, "velocity", None, batch, rng)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.max_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / cfg.max_epochs))


def make_optimizer(net: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(net.parameters(), lr=cfg.lr0, betas=cfg.betas, eps=cfg.eps)


def _validation_loss(net, objective, sched, cond, target, seed, batch) -> float:
    rng = np.random.default_rng([seed, _VAL_STREAM])
    total, n = 0.0, len(target)
    with torch.no_grad():
        for i in range(0, n, batch):
            x0 = torch.from_numpy(target[i:i + batch])
            y = torch.from_numpy(cond[i:i + batch])
            total += float(_objective_loss(net, objective, sched, x0, y, rng)) * len(x0)
    return total / n


def train(
    ckpt: Checkpoint,
    split,
    sched: NoiseSchedule | None,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    progress: Callable[[int, float, float], None] | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Adam with cosine-annealed learning rate and patience-based early stopping.

    Returns the parameter snapshot from the epoch with the lowest validation loss.
    """
    train_pairs, val_pairs = split
    if not len(train_pairs) or not len(val_pairs):
        raise ParameterError("training and validation sets must be nonempty")
    if cfg.objective == "noise" and sched is None:
        raise ParameterError("noise objective needs a schedule")
    tr_cond, tr_target = _arrays(train_pairs)
    va_cond, va_target = _arrays(val_pairs)

    net, _ = _trainable(ckpt)
    net.train()
    opt = make_optimizer(net, cfg)
    noise_rng = np.random.default_rng([cfg.seed, _TRAIN_STREAM])
    history = TrainHistory()
    best_state = copy.deepcopy(net.state_dict())

    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(tr_target))
        total = 0.0
        for i in range(0, len(order), cfg.batch):
            idx = order[i:i + cfg.batch]
            x0, y = torch.from_numpy(tr_target[idx]), torch.from_numpy(tr_cond[idx])
            opt.zero_grad(set_to_none=True)
            loss = _objective_loss(net, cfg.objective, sched, x0, y, noise_rng)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        val = _validation_loss(net, cfg.objective, sched, va_cond, va_target, cfg.seed, cfg.batch)
        if not math.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(total / len(order))
        history.val_loss.append(val)
        history.lr.append(lr)
        if val < history.best_val_loss:
            history.best_val_loss, history.best_epoch = val, epoch
            best_state = copy.deepcopy(net.state_dict())
        if progress is not None:
            progress(epoch, history.train_loss[-1], val)
        log.debug("epoch %d train %.5f val %.5f lr %.2e", epoch, history.train_loss[-1], val, lr)
        if epoch - history.best_epoch >= cfg.patience:
            break

    if log_path is not None:
        history.write_csv(log_path)
    net.load_state_dict(best_state)
    best = Checkpoint(
        ckpt.config,
        state_to_numpy(net),
        dict(ckpt.schedule),
        cfg.objective,
        {
            **ckpt.meta,
            "best_epoch": history.best_epoch,
            "best_val_loss": history.best_val_loss,
            "epochs_run": len(history),
            "train_seed": cfg.seed,
        },
    )
    return best, history


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    groups_checked: int
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-3


def compare_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    picks: list[tuple[str, int]],
    step: float = 1e-3,
    floor: float = 1e-8,
) -> tuple[float, str]:
    """Max relative error between autograd and central differences at the picked entries."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: p.grad.detach().clone().reshape(-1) for k, p in params.items()}
    worst, worst_name = 0.0, ""
    with torch.no_grad():
        for name, j in picks:
            flat = params[name].view(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            plus = loss_fn().item()
            flat[j] = orig - step
            minus = loss_fn().item()
            flat[j] = orig
            numeric = (plus - minus) / (2 * step)
            a = analytic[name][j].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if rel > worst:
                worst, worst_name = rel, f"{name}[{j}]"
    return worst, worst_name


def check_gradients(
    cfg_small: NetConfig,
    objective: str = "noise",
    rng: np.random.Generator | int = 0,
    n_params: int = 100,
    step: float = 1e-3,
    raise_on_failure: bool = True,
) -> GradCheckReport:
    """Finite-difference verification of the training loss gradients on a tiny U-Net.

    Every parameter tensor contributes at least one sampled entry; the rest are
    drawn uniformly. Runs in float64 so that the difference quotient is not
    swamped by rounding.
    """
    if cfg_small.base_width > 8:
        raise ParameterError("gradient check expects base_width <= 8")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    seed = int(rng.integers(2 ** 31))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet(cfg_small).double()
    sched = make_linear()
    n, p = 2, cfg_small.patch
    x0 = torch.from_numpy(rng.uniform(-1, 1, (n, 1, p, p)))
    y = torch.from_numpy(rng.uniform(-1, 1, (n, 1, p, p)))
    eps = torch.from_numpy(rng.standard_normal((n, 1, p, p)))
    if objective == "noise":
        t = rng.integers(1, sched.T + 1, size=n)

        def loss_fn():
            return noise_loss(net, sched, x0, y, t, eps)
    elif objective == "velocity":
        t = rng.random(n)

        def loss_fn():
            return velocity_loss(net, x0, y, t, eps)
    else:
        raise ParameterError(f"unknown objective {objective!r}")

    params = dict(net.named_parameters())
    picks = [(k, int(rng.integers(v.numel()))) for k, v in params.items()]
    sizes = np.array([v.numel() for v in params.values()], dtype=np.float64)
    names = list(params)
    for _ in range(max(0, n_params - len(picks))):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks.append((k, int(rng.integers(params[k].numel()))))
    worst, worst_name = compare_gradients(loss_fn, params, picks, step)
    report = GradCheckReport(worst, len(picks), len(params), worst_name)
    if raise_on_failure and not report.passed:
        raise VerificationError(f"max relative gradient error {worst:.3e} at {worst_name}")
    return report


def fresh_checkpoint(cfg: NetConfig, sched: NoiseSchedule, objective: str, seed: int) -> Checkpoint:
    return init(cfg, seed, schedule=sched.config(), objective=objective)
