"""
Training: label-smoothed cross-entropy with early stopping on validation
CIDEr-D, then optional self-critical fine-tuning with a mean-of-rollouts baseline.
"""

import csv
import logging
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from src.core.exceptions import ContractError, EmptyBatchError, InputError, TrainingDivergenceError
from src.core.rng import SeedStreams
from src.domain.caption_models import CaptionHypothesis, EpochLog, TrainState
from src.domain.run_models import RolloutKind, RunConfig
from src.domain.scene_models import PAD, Scene, Vocabulary
from src.infra.checkpoint_repo import Checkpoint, load_checkpoint, save_checkpoint
from src.infra.latgeo_core.factory import build_model
from src.infra.latgeo_core.model import LatgeoModel
from src.infra.numeric import ops
from src.infra.numeric.optim import Adam, noam_lr
from src.infra.numeric.tensor import Tensor, backward
from src.services.decode_service import allowed_tokens, beam_search, caption_scenes, sample
from src.services.metrics_service import CiderD
from src.services.vocab_service import encode_references, vocab_from_scenes

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
RL_BEST_CHECKPOINT = "rl_best.ckpt"
RL_LAST_CHECKPOINT = "rl_last.ckpt"
XE_LOG = "train_log.csv"
RL_LOG = "rl_log.csv"


class TrainResult(BaseModel):
    best_checkpoint: str
    last_checkpoint: str
    log_path: str
    epochs_run: int = Field(..., ge=0)
    best_cider_d: Optional[float] = None
    stopped_early: bool = False


class ScstOutcome(BaseModel):
    rewards: list[float]
    baseline: float
    coefficients: list[float]
    loss: float
    stepped: bool


# --- Losses ---

def xe_loss(
    logits: Tensor,
    targets: Sequence[int],
    smoothing: float = 0.0,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Mean over unmasked positions of cross-entropy against the smoothed target
    (1 - eps on the target id, eps / (V - 1) elsewhere).

    Args:
        mask: positions that count; default every non-PAD target

    Raises:
        EmptyBatchError: If no position counts
        ContractError: If a target id is outside [0, V)
    """
    t, vocab_size = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (t,):
        raise ContractError(f"xe_loss: {t} logit rows but {targets.shape[0]} targets")
    if np.any((targets < 0) | (targets >= vocab_size)):
        raise ContractError(f"xe_loss: targets must lie in [0, {vocab_size})")
    mask = targets != PAD if mask is None else np.asarray(mask, dtype=bool)
    counted = int(mask.sum())
    if counted == 0:
        raise EmptyBatchError("xe_loss: every target position is masked")

    q = np.full((t, vocab_size), smoothing / (vocab_size - 1))
    q[np.arange(t), targets] = 1.0 - smoothing
    q[~mask] = 0.0
    return ops.scale(ops.sum(ops.mul(Tensor(q), ops.log_softmax_rows(logits))), -1.0 / counted)


def token_accuracy(logits: Tensor, targets: Sequence[int]) -> tuple[int, int]:
    """(correct, counted) argmax predictions over non-PAD targets."""
    targets = np.asarray(targets)
    keep = targets != PAD
    correct = int((logits.data.argmax(axis=1)[keep] == targets[keep]).sum())
    return correct, int(keep.sum())


def teacher_forced(model: LatgeoModel, encoded, reference: Sequence[int]) -> tuple[Tensor, list[int]]:
    """Logits for reference[:-1] and the shifted targets reference[1:]."""
    return model.decode(encoded, list(reference[:-1])), list(reference[1:])


def sequence_log_prob(model: LatgeoModel, encoded, hyp: CaptionHypothesis) -> Tensor:
    """Differentiable sum of log p(token_t | prefix) over generated tokens, under the decode mask."""
    prefix, generated = hyp.tokens[:-1], hyp.tokens[1:]
    logits = model.decode(encoded, prefix)
    mask = np.broadcast_to(allowed_tokens(logits.shape[1]), logits.shape)
    log_probs = ops.log_softmax_rows(logits, mask)
    return ops.sum(ops.take(log_probs, range(len(generated)), generated))


# --- Corpus helpers ---

def split_corpus(scenes: Sequence[Scene], val_fraction: float, streams: SeedStreams) -> tuple[list[Scene], list[Scene]]:
    """Seeded train/val split; validation keeps at least 2 scenes for CIDEr-D."""
    if len(scenes) < 4:
        raise InputError(f"Need at least 4 scenes to split off a validation set, got {len(scenes)}")
    n_val = max(2, int(round(len(scenes) * val_fraction)))
    state = int(streams.get("split").integers(2 ** 31 - 1))
    train, val = train_test_split(list(scenes), test_size=n_val, random_state=state, shuffle=True)
    return list(train), list(val)


def references_of(scenes: Sequence[Scene]) -> dict[str, list[str]]:
    return {s.id: list(s.refs) for s in scenes}


def validation_cider(model: LatgeoModel, scenes: Sequence[Scene], beam_size: int = 1, sigma: float = 6.0) -> float:
    """Corpus CIDEr-D of decoded validation captions (greedy unless beam_size > 1)."""
    if len(scenes) < 2:
        raise InputError("Validation needs at least 2 scenes for CIDEr-D")
    model.eval()
    try:
        candidates = caption_scenes(model, scenes, model.vocab, beam_size)
    finally:
        model.train()
    refs = references_of(scenes)
    return CiderD(refs, sigma).score(candidates, refs).value


def teacher_forced_accuracy(model: LatgeoModel, scenes: Sequence[Scene], refs_per_scene: int = 1) -> float:
    model.eval()
    correct = counted = 0
    try:
        for scene in scenes:
            encoded = model.encode(scene)
            for ref in encode_references(scene, model.vocab, model.max_len, refs_per_scene):
                logits, targets = teacher_forced(model, encoded, ref)
                c, n = token_accuracy(logits, targets)
                correct, counted = correct + c, counted + n
    finally:
        model.train()
    return correct / counted if counted else 0.0


class EpochLogWriter:
    """Training CSV log, one row per epoch; rows past a resume point are dropped."""
    FIELDS = ["epoch", "split", "loss", "cider_d", "lr", "seconds"]

    def __init__(self, path: Path, resume_epoch: int = 0):
        self.path = Path(path)
        rows: list[dict] = []
        if resume_epoch and self.path.exists():
            with self.path.open(newline="", encoding="utf-8") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= resume_epoch]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.FIELDS)
            writer.writeheader()
            writer.writerows(rows)

    def append(self, row: EpochLog) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            csv.DictWriter(fh, fieldnames=self.FIELDS).writerow(row.model_dump())


def _checkpoint(
    model: LatgeoModel,
    cfg: RunConfig,
    state: TrainState,
    streams: SeedStreams,
    optimizer: Adam,
) -> Checkpoint:
    return Checkpoint(
        model=model.config,
        train=cfg.train,
        vocab=model.vocab,
        state=state.model_copy(),
        rng_state=streams.state(),
        parameters=model.state_dict(),
        optimizer=optimizer.state.model_copy(deep=True),
    )


def _record_validation(state: TrainState, score: float, epoch: int) -> bool:
    """Update best/patience counters; returns True on strict improvement."""
    state.epoch = epoch
    if state.best_cider_d is None or score > state.best_cider_d:
        state.best_cider_d, state.best_epoch = score, epoch
        state.epochs_without_improvement = 0
        return True
    state.epochs_without_improvement += 1
    return False


# --- Cross-entropy phase ---

def run_xe_epoch(
    model: LatgeoModel,
    optimizer: Adam,
    pairs: Sequence[tuple[Scene, list[int]]],
    cfg: RunConfig,
    state: TrainState,
    streams: SeedStreams,
    epoch: int,
) -> tuple[float, float, float]:
    """
    One pass over (scene, reference) pairs in shuffled mini-batches.

    Returns:
        (mean loss, token accuracy, last learning rate)
    """
    train_cfg = cfg.train
    order = streams.get("shuffle").permutation(len(pairs))
    batches = [order[i:i + train_cfg.batch_size] for i in range(0, len(order), train_cfg.batch_size)]
    total_loss, correct, counted, lr = 0.0, 0, 0, 0.0

    quiet = not logger.isEnabledFor(logging.INFO)
    with tqdm(desc=f"Epoch {epoch} - train", unit="it", total=len(batches), disable=quiet) as pbar:
        for it, batch in enumerate(batches):
            optimizer.zero_grad()
            batch_loss = 0.0
            for index in batch:
                scene, reference = pairs[index]
                logits, targets = teacher_forced(model, model.encode(scene), reference)
                loss = xe_loss(logits, targets, train_cfg.smoothing)
                if not np.isfinite(loss.item()):
                    raise TrainingDivergenceError(f"Non-finite XE loss on scene {scene.id} at epoch {epoch}")
                backward(ops.scale(loss, 1.0 / len(batch)))
                batch_loss += loss.item() / len(batch)
                c, n = token_accuracy(logits, targets)
                correct, counted = correct + c, counted + n

            lr = train_cfg.lr_factor * noam_lr(state.step + 1, model.config.d_model, train_cfg.warmup)
            optimizer.step(lr)
            state.step += 1
            total_loss += batch_loss
            pbar.set_postfix(loss=total_loss / (it + 1), lr=lr)
            pbar.update()

    return total_loss / max(len(batches), 1), correct / max(counted, 1), lr


def train_xe(
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    cfg: RunConfig,
    out_dir: Path,
    resume: Optional[Path] = None,
) -> TrainResult:
    """
    Cross-entropy training with the warmup schedule until `patience` epochs
    pass without a strictly better validation CIDEr-D, or max_epochs.

    Writes last.ckpt every epoch and best.ckpt on improvement.
    """
    out_dir = Path(out_dir)
    train_cfg = cfg.train
    streams = SeedStreams(train_cfg.seed)
    checkpoint = load_checkpoint(resume) if resume else None
    if checkpoint is not None and checkpoint.state.phase != "xe":
        raise InputError(f"{resume} is an RL checkpoint; resume it with the rl command")

    vocab = checkpoint.vocab if checkpoint else vocab_from_scenes(train_scenes, train_cfg.min_count)
    model = build_model(cfg.model, vocab, streams)
    optimizer = Adam(model, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps, train_cfg.max_grad_norm)
    state = TrainState(phase="xe")
    if checkpoint is not None:
        model.load_state_dict(checkpoint.parameters)
        if checkpoint.optimizer is not None:
            optimizer.state = checkpoint.optimizer
        state = checkpoint.state.model_copy()
        streams.restore(checkpoint.rng_state)
        logger.info(f"Resuming XE from {resume} after epoch {state.epoch}")

    pairs = [
        (scene, ref)
        for scene in train_scenes
        for ref in encode_references(scene, vocab, model.max_len, train_cfg.refs_per_scene)
    ]
    if not pairs:
        raise InputError("Training corpus has no reference captions")

    log = EpochLogWriter(out_dir / XE_LOG, state.epoch)
    best_path, last_path = out_dir / BEST_CHECKPOINT, out_dir / LAST_CHECKPOINT
    stopped_early = False
    first_epoch = state.epoch + 1

    for epoch in range(first_epoch, train_cfg.max_epochs + 1):
        if state.epochs_without_improvement >= train_cfg.patience:
            stopped_early = True
            break
        started = time.perf_counter()
        loss, accuracy, lr = run_xe_epoch(model, optimizer, pairs, cfg, state, streams, epoch)
        score = validation_cider(model, val_scenes, train_cfg.val_beam_size, train_cfg.cider_sigma)
        improved = _record_validation(state, score, epoch)

        snapshot = _checkpoint(model, cfg, state, streams, optimizer)
        save_checkpoint(last_path, snapshot)
        if improved:
            save_checkpoint(best_path, snapshot)
        seconds = time.perf_counter() - started
        log.append(EpochLog(epoch=epoch, loss=loss, cider_d=score, lr=lr, seconds=seconds))
        logger.info(
            f"XE epoch {epoch}: loss={loss:.4f} token_acc={accuracy:.3f} val_cider_d={score:.4f} "
            f"best={state.best_cider_d:.4f}@{state.best_epoch} lr={lr:.2e} ({seconds:.1f}s)"
        )
        if state.epochs_without_improvement >= train_cfg.patience:
            logger.info(f"Early stop after epoch {epoch}: {train_cfg.patience} epochs without improvement")
            stopped_early = True
            break

    return TrainResult(
        best_checkpoint=str(best_path),
        last_checkpoint=str(last_path),
        log_path=str(log.path),
        epochs_run=state.epoch - first_epoch + 1,
        best_cider_d=state.best_cider_d,
        stopped_early=stopped_early,
    )


# --- Self-critical phase ---

def rollouts(
    model: LatgeoModel,
    scene: Scene,
    cfg: RunConfig,
    rng: Optional[np.random.Generator] = None,
) -> list[CaptionHypothesis]:
    train_cfg = cfg.train
    if train_cfg.rl_rollout == RolloutKind.SAMPLE:
        if rng is None:
            raise ContractError("Sampled rollouts need the sampling generator")
        return sample(model, scene, train_cfg.beam_size, rng, train_cfg.temperature)
    return beam_search(model, scene, train_cfg.beam_size)


def scst_surrogate(
    model: LatgeoModel,
    scene: Scene,
    hypotheses: Sequence[CaptionHypothesis],
    rewards: Sequence[float],
) -> tuple[Optional[Tensor], list[float], float]:
    """
    Surrogate whose gradient is -(1/k) sum_j (r_j - b) grad log p(S_j), with b the mean reward.

    Returns:
        (loss or None when every reward is equal, coefficients, baseline)
    """
    k = len(hypotheses)
    if k == 0 or len(rewards) != k:
        raise ContractError(f"scst needs one reward per hypothesis, got {len(rewards)} for {k}")
    if max(rewards) == min(rewards):
        # The mean of equal floats can be off by an ulp
        return None, [0.0] * k, float(rewards[0])
    baseline = float(np.mean(rewards))
    coefficients = [-(r - baseline) / k for r in rewards]

    encoded = model.encode(scene)
    loss: Optional[Tensor] = None
    for hyp, coefficient in zip(hypotheses, coefficients):
        term = ops.scale(sequence_log_prob(model, encoded, hyp), coefficient)
        loss = term if loss is None else loss + term
    return loss, coefficients, baseline


def scst_step(
    model: LatgeoModel,
    scene: Scene,
    references: Sequence[str],
    scorer: CiderD,
    optimizer: Adam,
    cfg: RunConfig,
    rng: Optional[np.random.Generator] = None,
) -> ScstOutcome:
    """
    Decode k rollouts, reward each with CIDEr-D, baseline by their mean and take
    one Adam step at the RL learning rate. Equal rewards give no step at all.
    """
    model.eval()
    try:
        hypotheses = rollouts(model, scene, cfg, rng)
    finally:
        model.train()
    rewards = [scorer.score_one(model.vocab.decode(h.tokens), references) for h in hypotheses]

    optimizer.zero_grad()
    loss, coefficients, baseline = scst_surrogate(model, scene, hypotheses, rewards)
    if loss is None:
        logger.debug(f"Scene {scene.id}: equal rewards, no update")
        return ScstOutcome(rewards=rewards, baseline=baseline, coefficients=coefficients, loss=0.0, stepped=False)
    if not np.isfinite(loss.item()):
        raise TrainingDivergenceError(f"Non-finite SCST loss on scene {scene.id}")
    backward(loss)
    optimizer.step(cfg.train.rl_lr)
    return ScstOutcome(rewards=rewards, baseline=baseline, coefficients=coefficients, loss=loss.item(), stepped=True)


def train_rl(
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    cfg: RunConfig,
    checkpoint_path: Path,
    out_dir: Path,
) -> TrainResult:
    """
    Self-critical fine-tuning from an XE checkpoint (fresh Adam state, fixed
    RL learning rate) or resumption of an RL checkpoint, with the same early
    stopping rule. The CIDEr-D reward uses document frequencies of the
    training references, frozen for the whole phase.
    """
    out_dir = Path(out_dir)
    source = load_checkpoint(checkpoint_path)
    resuming = source.state.phase == "rl"
    streams = SeedStreams(cfg.train.seed)
    model = build_model(source.model, source.vocab, streams)
    model.load_state_dict(source.parameters)

    optimizer = Adam(model, cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps, cfg.train.max_grad_norm)
    state = TrainState(phase="rl")
    if resuming:
        if source.optimizer is not None:
            optimizer.state = source.optimizer
        state = source.state.model_copy()
        streams.restore(source.rng_state)
        logger.info(f"Resuming RL from {checkpoint_path} after epoch {state.epoch}")
    else:
        state.best_cider_d = validation_cider(model, val_scenes, cfg.train.val_beam_size, cfg.train.cider_sigma)
        logger.info(f"RL starts from XE checkpoint {checkpoint_path} (val CIDEr-D {state.best_cider_d:.4f})")

    train_refs = references_of(train_scenes)
    scorer = CiderD(train_refs, cfg.train.cider_sigma)
    log = EpochLogWriter(out_dir / RL_LOG, state.epoch)
    best_path, last_path = out_dir / RL_BEST_CHECKPOINT, out_dir / RL_LAST_CHECKPOINT
    if not resuming:
        save_checkpoint(best_path, _checkpoint(model, cfg, state, streams, optimizer))

    stopped_early = False
    first_epoch = state.epoch + 1
    for epoch in range(first_epoch, cfg.train.rl_max_epochs + 1):
        if state.epochs_without_improvement >= cfg.train.patience:
            stopped_early = True
            break
        started = time.perf_counter()
        order = streams.get("shuffle").permutation(len(train_scenes))
        losses, rewards = [], []
        quiet = not logger.isEnabledFor(logging.INFO)
        for index in tqdm(order, desc=f"Epoch {epoch} - scst", unit="it", disable=quiet):
            scene = train_scenes[index]
            outcome = scst_step(model, scene, train_refs[scene.id], scorer, optimizer, cfg, streams.get("sampling"))
            state.step += int(outcome.stepped)
            losses.append(outcome.loss)
            rewards.append(outcome.baseline)

        score = validation_cider(model, val_scenes, cfg.train.val_beam_size, cfg.train.cider_sigma)
        improved = _record_validation(state, score, epoch)
        snapshot = _checkpoint(model, cfg, state, streams, optimizer)
        save_checkpoint(last_path, snapshot)
        if improved:
            save_checkpoint(best_path, snapshot)
        seconds = time.perf_counter() - started
        mean_loss = float(np.mean(losses)) if losses else 0.0
        log.append(EpochLog(epoch=epoch, loss=mean_loss, cider_d=score, lr=cfg.train.rl_lr, seconds=seconds))
        logger.info(
            f"RL epoch {epoch}: surrogate={mean_loss:.4f} mean_reward={np.mean(rewards):.4f} "
            f"val_cider_d={score:.4f} best={state.best_cider_d:.4f}@{state.best_epoch} ({seconds:.1f}s)"
        )
        if state.epochs_without_improvement >= cfg.train.patience:
            stopped_early = True
            break

    return TrainResult(
        best_checkpoint=str(best_path),
        last_checkpoint=str(last_path),
        log_path=str(log.path),
        epochs_run=state.epoch - first_epoch + 1,
        best_cider_d=state.best_cider_d,
        stopped_early=stopped_early,
    )


def restore_model(checkpoint: Checkpoint, streams: Optional[SeedStreams] = None) -> LatgeoModel:
    """Rebuild a model from a checkpoint's config, vocabulary and parameters, in eval mode."""
    model = build_model(checkpoint.model, checkpoint.vocab, streams or SeedStreams(checkpoint.train.seed))
    model.load_state_dict(checkpoint.parameters)
    return model.eval()


def load_vocabulary(checkpoint_path: Path) -> Vocabulary:
    return load_checkpoint(checkpoint_path).vocab
