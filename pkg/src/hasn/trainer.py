"""Adam training loop, multi-step schedule, and two-stage warm-start retraining."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImagePair, augment, pad_to_patch, sample_patch
from .metrics import LossWeights, evaluate_pair, l1_loss, stage2_loss
from .model import ModelConfig, check_params, forward, forward_taped, init_params
from .optim import AdamState, NonFiniteGradientError, adam_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "loss", "eval_psnr")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    total_iters: int = 500_000
    batch: int = 128
    lr0: float = 2e-4
    milestones: tuple = (250_000, 400_000, 450_000, 475_000)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    loss: str = "l1"
    alpha: float = 1.0
    beta: float = 1.0
    kl_epsilon: float = 1e-8
    warm_start_from: str | None = None
    pick_iter: int | None = None
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    patch_hr: int = 192
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        errors = []
        if self.stage not in (1, 2):
            errors.append(f"stage must be 1 or 2, got {self.stage}")
        if self.total_iters < 1:
            errors.append(f"total_iters must be >= 1, got {self.total_iters}")
        if self.batch < 1:
            errors.append(f"batch must be >= 1, got {self.batch}")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            errors.append(f"milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.total_iters:
            errors.append(f"milestones must be < total_iters ({self.total_iters}), got {ms}")
        if self.loss not in ("l1", "stage2"):
            errors.append(f"loss must be 'l1' or 'stage2', got {self.loss!r}")
        if self.stage == 2 and not self.warm_start_from:
            errors.append("stage 2 requires warm_start_from")
        if self.lr0 <= 0:
            errors.append("lr0 must be positive")
        if errors:
            raise ValueError("invalid TrainConfig: " + "; ".join(errors))
        LossWeights(self.alpha, self.beta, self.kl_epsilon)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.kl_epsilon)

    @property
    def loss_label(self) -> str:
        if self.loss == "l1":
            return "l1"
        return f"stage2(α={self.alpha:g},β={self.beta:g})"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def scaled_milestones(total_iters: int) -> tuple:
    """The 250k/400k/450k/475k-of-500k pattern rescaled to ``total_iters``.

    Milestones that coincide after rounding (very short runs) are merged.
    """
    points = {int(total_iters * f) for f in (0.5, 0.8, 0.9, 0.95)}
    return tuple(sorted(m for m in points if 0 < m < total_iters))


PROFILES = {
    "full": (ModelConfig(), TrainConfig()),
    "full-stage2": (
        ModelConfig(),
        TrainConfig(stage=2, total_iters=1_000_000, loss="stage2", warm_start_from="<stage1 checkpoint>", pick_iter=100_000),
    ),
    "desk-smoke": (
        ModelConfig(dim=16, num_blocks=2),
        TrainConfig(
            total_iters=200, batch=4, lr0=2e-3, milestones=scaled_milestones(200),
            patch_hr=64, eval_every=50, checkpoint_every=100,
        ),
    ),
}


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """``lr0`` halved once for every milestone <= ``iteration``."""
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    halvings = sum(1 for m in cfg.milestones if m <= iteration)
    return cfg.lr0 * 0.5**halvings


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    optimizer: AdamState
    iteration: int
    log_rows: list = field(default_factory=list)
    final_checkpoint: str | None = None


def make_batch(dataset: list, cfg: TrainConfig, iteration: int):
    """Batch for one step, drawn from a generator keyed on (seed, iteration).

    Keying on the iteration makes resumed runs draw exactly the batches the
    uninterrupted run would have drawn.
    """
    rng = np.random.default_rng([cfg.seed, iteration])
    lrs, hrs = [], []
    for _ in range(cfg.batch):
        pair = pad_to_patch(dataset[int(rng.integers(0, len(dataset)))], cfg.patch_hr)
        lr, hr = sample_patch(pair, cfg.patch_hr, rng)
        if cfg.augment:
            lr, hr = augment(lr, hr, rng)
        lrs.append(lr)
        hrs.append(hr)
    return np.concatenate(lrs).astype(np.float32), np.concatenate(hrs).astype(np.float32)


def evaluate(model_cfg: ModelConfig, params: dict, pairs: list, quantize: bool = False) -> tuple[float, float]:
    """Mean Y-channel (PSNR, SSIM) of the model on full images."""
    ps, ss = [], []
    for pair in pairs:
        sr = np.clip(forward(model_cfg, params, pair.lr), 0, 1)
        p, s = evaluate_pair(sr, pair.hr, model_cfg.scale, quantize)
        ps.append(p)
        ss.append(s)
    return float(np.mean(ps)), float(np.mean(ss))


def train_step(model_cfg: ModelConfig, cfg: TrainConfig, params: dict, state: AdamState, lr_batch, hr_batch, lr: float) -> float:
    tape = Tape()
    P = tape.params(params)
    sr = forward_taped(tape, P, model_cfg, tape.constant(lr_batch))
    loss = l1_loss(sr, hr_batch) if cfg.loss == "l1" else stage2_loss(sr, hr_batch, cfg.loss_weights)
    value = float(loss.value.reshape(()))
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    grads = tape.backward(loss)
    adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return value


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    dataset: list,
    out_dir=None,
    eval_set: list | None = None,
    params: dict | None = None,
    optimizer: AdamState | None = None,
    start_iter: int = 0,
    resume_from=None,
    header: dict | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run steps ``start_iter .. total_iters`` and return the final state.

    With ``out_dir`` the run writes ``train_log.csv``, ``ckpt_<iter>.hsnc``
    every ``checkpoint_every`` steps and ``ckpt_final.hsnc``. ``stop_at``
    interrupts the schedule early: the run stops after that iteration and
    writes ``ckpt_<stop_at>.hsnc`` instead of the final checkpoint, ready to be
    continued with ``resume_from``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    for pair in dataset:
        if pair.scale != model_cfg.scale:
            raise ValueError(f"{pair.source_path}: pair scale {pair.scale} != model scale {model_cfg.scale}")
    if resume_from is not None:
        ck_cfg, params, optimizer, start_iter = load_checkpoint(resume_from)
        if ck_cfg != model_cfg:
            raise ValueError(f"checkpoint config {ck_cfg} does not match model config {model_cfg}")
    if params is None:
        params = init_params(model_cfg, cfg.seed)
    params = {k: np.array(v, dtype=np.float32) for k, v in params.items()}
    check_params(model_cfg, params)
    if optimizer is None:
        optimizer = AdamState.zeros_like(params)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        if start_iter > 0 and log_path.exists():
            log_file = open(log_path, "a", encoding="utf-8")
        else:
            log_file = open(log_path, "w", encoding="utf-8")
            meta = {"stage": cfg.stage, "loss": cfg.loss_label, "seed": cfg.seed, **(header or {})}
            log_file.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
            log_file.write(",".join(LOG_COLUMNS) + "\n")
    end = cfg.total_iters if stop_at is None else stop_at
    if not start_iter <= end <= cfg.total_iters:
        raise ValueError(f"stop_at {stop_at} outside [{start_iter}, {cfg.total_iters}]")
    rows = []
    last_ckpt = None
    iteration = start_iter
    try:
        for it in range(start_iter, end):
            lr = lr_at(cfg, it)
            xb, yb = make_batch(dataset, cfg, it)
            try:
                loss = train_step(model_cfg, cfg, params, optimizer, xb, yb, lr)
            except (FloatingPointError, NonFiniteGradientError) as exc:
                if out is not None:
                    last_ckpt = str(out / f"ckpt_{iteration}.hsnc")
                    save_checkpoint(last_ckpt, model_cfg, params, optimizer, iteration)
                raise TrainingDiverged(f"training diverged at iteration {it}: {exc}", last_ckpt) from exc
            iteration = it + 1
            eval_psnr = None
            if eval_set and cfg.eval_every and (iteration % cfg.eval_every == 0 or iteration == cfg.total_iters):
                eval_psnr = evaluate(model_cfg, params, eval_set)[0]
            row = (iteration, lr, loss, eval_psnr)
            rows.append(row)
            if log_file is not None:
                log_file.write(f"{iteration},{_fmt(lr)},{_fmt(loss)},{_fmt(eval_psnr)}\n")
            if out is not None and cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
                last_ckpt = str(out / f"ckpt_{iteration}.hsnc")
                save_checkpoint(last_ckpt, model_cfg, params, optimizer, iteration)
        final = None
        if out is not None:
            name = "ckpt_final.hsnc" if iteration == cfg.total_iters else f"ckpt_{iteration}.hsnc"
            final = str(out / name)
            save_checkpoint(final, model_cfg, params, optimizer, iteration)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(params, optimizer, iteration, rows, final)


# --------------------------------------------------------------------------
# warm start
# --------------------------------------------------------------------------


def pick_checkpoint(source, pick_iter: int) -> Path:
    """Resolve a checkpoint file, or the latest ``ckpt_<i>.hsnc`` with i <= pick_iter in a directory."""
    source = Path(source)
    if source.is_file():
        return source
    if source.is_dir():
        found = []
        for p in source.glob("ckpt_*.hsnc"):
            tail = p.stem.split("_", 1)[1]
            if tail.isdigit() and int(tail) <= pick_iter:
                found.append((int(tail), p))
        if found:
            return max(found)[1]
        raise FileNotFoundError(f"no checkpoint at or before iteration {pick_iter} in {source}")
    raise FileNotFoundError(f"stage-1 checkpoint not found: {source}")


def warm_start(
    stage1_ckpt,
    pick_iter: int,
    stage2_cfg: TrainConfig,
    dataset: list,
    out_dir=None,
    model_cfg: ModelConfig | None = None,
    eval_set: list | None = None,
) -> TrainResult:
    """Second-stage retraining from partially converged stage-1 weights.

    Optimizer moments and the iteration counter are reset; the LR schedule
    starts again from ``lr0``.
    """
    if stage2_cfg.loss != "stage2":
        raise ValueError(f"warm start expects the stage2 loss, got {stage2_cfg.loss!r}")
    path = pick_checkpoint(stage1_ckpt, pick_iter)
    ck_cfg, params, _, ck_iter = load_checkpoint(path)
    if ck_iter > pick_iter:
        raise ValueError(f"{path} is at iteration {ck_iter}, after pick_iter {pick_iter}")
    if model_cfg is not None and model_cfg != ck_cfg:
        raise ValueError(f"checkpoint config {ck_cfg} does not match model config {model_cfg}")
    if stage2_cfg.stage != 2 or stage2_cfg.warm_start_from != str(stage1_ckpt):
        stage2_cfg = stage2_cfg.replace(stage=2, warm_start_from=str(stage1_ckpt), pick_iter=pick_iter)
    log.info("warm start from %s (iteration %d); optimizer state reset", path, ck_iter)
    header = {"warm_start_from": path.name, "stage1_iter": ck_iter, "optimizer": "reset"}
    return train(ck_cfg, stage2_cfg, dataset, out_dir, eval_set, params=params, header=header)
