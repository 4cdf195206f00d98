"""Mini-batch training with Adam, a plateau learning-rate schedule and
bit-exact checkpoint/resume.

A batch is ``batch_size`` training videos together with all of their
queries. After every epoch the model is scored on a held-out slice of the
training videos; the learning rate halves after ``plateau_patience`` epochs
without a new best validation SumR, and the best parameters are kept.
"""
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import fileio
from .config import TrainConfig, canonical_json, config_hash, to_dict, train_config_from_dict
from .encoders import PRVRModel, pad_sequences
from .losses import BatchOutputs, total_loss
from .retrieval import evaluate

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PRVRCKPT"
CKPT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def num_threads() -> int:
    return int(os.environ.get("PRVR_NUM_THREADS", "1"))


# --- optimizer -----------------------------------------------------------

def adam_init(params) -> dict:
    return {"step": 0,
            "m": [torch.zeros_like(p) for p in params],
            "v": [torch.zeros_like(p) for p in params]}


@torch.no_grad()
def adam_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              names=None) -> None:
    """In-place Adam update with bias correction."""
    bad = [(names[i] if names else str(i)) for i, g in enumerate(grads)
           if not torch.isfinite(g).all()]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {', '.join(bad)}")
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


# --- learning-rate schedule ----------------------------------------------

@dataclass
class PlateauSchedule:
    lr: float
    patience: int = 3
    factor: float = 0.5
    floor: float = 1e-6
    best: float = -math.inf
    bad_epochs: int = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best, self.bad_epochs = metric, 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": _enc(self.best), "bad_epochs": self.bad_epochs}

    def load(self, state: dict) -> None:
        self.lr, self.best, self.bad_epochs = state["lr"], _dec(state["best"]), state["bad_epochs"]


def lr_schedule(schedule: PlateauSchedule, val_sumr: float) -> float:
    return schedule.step(val_sumr)


def _enc(x: float):
    return "-inf" if x == -math.inf else x


def _dec(x):
    return -math.inf if x == "-inf" else x


# --- checkpoints ---------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict  # name -> float64 array, state after the last epoch
    best_params: dict  # name -> float64 array, best validation SumR
    adam_m: dict
    adam_v: dict
    adam_step: int
    epoch: int  # completed epochs
    schedule: dict
    best_sumr: float
    best_epoch: int
    rng_state: dict
    history: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


_GROUPS = ("params", "best_params", "adam_m", "adam_v")


def save_checkpoint(ckpt: Checkpoint, path) -> int:
    names = list(ckpt.params)
    header = {
        "config": to_dict(ckpt.config),
        "config_hash": ckpt.config_hash,
        "tensors": [[n, list(ckpt.params[n].shape)] for n in names],
        "adam_step": ckpt.adam_step,
        "epoch": ckpt.epoch,
        "schedule": ckpt.schedule,
        "best_sumr": _enc(ckpt.best_sumr),
        "best_epoch": ckpt.best_epoch,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
    }
    blobs = [np.ascontiguousarray(getattr(ckpt, g)[n], dtype="<f8").tobytes() for g in _GROUPS for n in names]
    return fileio.write(path, CKPT_MAGIC, CKPT_VERSION, header, b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    header, payload = fileio.read(path, CKPT_MAGIC, CKPT_VERSION)
    config = train_config_from_dict(header["config"])
    if config_hash(config) != header["config_hash"]:
        raise fileio.CorruptFileError("stored config does not match its hash")
    flat = np.frombuffer(payload, dtype="<f8")
    groups, offset = {g: {} for g in _GROUPS}, 0
    for g in _GROUPS:
        for name, shape in header["tensors"]:
            n = int(np.prod(shape))
            if offset + n > flat.size:
                raise fileio.CorruptFileError("checkpoint payload shorter than its header describes")
            groups[g][name] = flat[offset:offset + n].reshape(shape).copy()
            offset += n
    if offset != flat.size:
        raise fileio.CorruptFileError("checkpoint payload longer than its header describes")
    return Checkpoint(config, groups["params"], groups["best_params"], groups["adam_m"], groups["adam_v"],
                      header["adam_step"], header["epoch"], header["schedule"], _dec(header["best_sumr"]),
                      header["best_epoch"], header["rng_state"], header["history"])


def model_from_checkpoint(ckpt: Checkpoint, best: bool = True) -> PRVRModel:
    model = PRVRModel(ckpt.config.model, seed=ckpt.config.seed)
    source = ckpt.best_params if best else ckpt.params
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(source[name]))
    return model


# --- training loop -------------------------------------------------------

def split_validation(corpus, fraction: float) -> tuple[list, list]:
    """Deterministic (train, val) partition of the corpus's training videos."""
    ids = corpus.video_ids("train")
    stride = max(1, round(1.0 / fraction))
    val = ids[::stride]
    train = [v for v in ids if v not in set(val)]
    if len(train) < 2 or not val:
        raise ValueError(f"need >= 2 training and >= 1 validation videos, have {len(ids)} train videos")
    return train, val


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list


class _Data:
    """Training videos and their queries, padded once up front."""

    def __init__(self, corpus, video_ids, cfg):
        by_id = {v.source_id: v for v in corpus.videos}
        by_video = corpus.queries_by_video()
        videos = [by_id[v] for v in video_ids]
        self.frames, self.lengths = pad_sequences(videos, cfg.max_frames, cfg.d_in_video)
        queries, owner = [], []
        for i, vid in enumerate(video_ids):
            qs = by_video[vid]
            if not qs:
                raise ValueError(f"training video {vid!r} has no queries")
            queries.extend(qs)
            owner.extend([i] * len(qs))
        self.words, word_lengths = pad_sequences(queries, cfg.max_words, cfg.d_in_text)
        self.word_valid = torch.arange(cfg.max_words) < word_lengths.unsqueeze(-1)
        self.owner = torch.tensor(owner)
        self.query_rows = [torch.nonzero(self.owner == i).flatten() for i in range(len(video_ids))]

    def batch(self, idx: np.ndarray):
        idx_t = torch.from_numpy(idx)
        rows = torch.cat([self.query_rows[i] for i in idx])
        positives = torch.cat([torch.full((len(self.query_rows[i]),), b) for b, i in enumerate(idx)])
        return self.frames[idx_t], self.lengths[idx_t], self.words[rows], self.word_valid[rows], positives


def _named_params(model):
    return [(n, p) for n, p in model.named_parameters()]


def train(config: TrainConfig, corpus, out_path=None, resume: Checkpoint | None = None,
          stop_after: int | None = None, on_epoch=None) -> TrainResult:
    """Train from scratch or from ``resume``; returns the final checkpoint.

    ``stop_after`` ends the run after that many completed epochs without
    changing the config, so a later ``resume`` continues the same trajectory.
    """
    torch.set_num_threads(num_threads())
    cfg = config.model
    model = PRVRModel(cfg, seed=config.seed)
    named = _named_params(model)
    names = [n for n, _ in named]
    params = [p for _, p in named]
    adam = adam_init(params)
    schedule = PlateauSchedule(config.lr, config.plateau_patience, config.lr_factor, config.lr_floor)
    rng = np.random.default_rng([config.seed, 1])
    history, start_epoch = [], 0
    best_sumr, best_epoch = -math.inf, -1
    best_params = {n: p.detach().numpy().copy() for n, p in named}

    if resume is not None:
        if config_hash(resume.config) != config_hash(config):
            raise ValueError("checkpoint was produced by a different config")
        with torch.no_grad():
            for i, (n, p) in enumerate(named):
                p.copy_(torch.from_numpy(resume.params[n]))
                adam["m"][i].copy_(torch.from_numpy(resume.adam_m[n]))
                adam["v"][i].copy_(torch.from_numpy(resume.adam_v[n]))
        adam["step"] = resume.adam_step
        schedule.load(resume.schedule)
        rng.bit_generator.state = resume.rng_state
        history = list(resume.history)
        start_epoch = resume.epoch
        best_sumr, best_epoch = resume.best_sumr, resume.best_epoch
        best_params = {n: a.copy() for n, a in resume.best_params.items()}

    train_ids, val_ids = split_validation(corpus, config.val_fraction)
    data = _Data(corpus, train_ids, cfg)
    n_batches = max(1, len(train_ids) // config.batch_size)
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)

    def snapshot(epoch):
        return Checkpoint(
            config,
            {n: p.detach().numpy().copy() for n, p in named},
            best_params,
            {n: m.numpy().copy() for n, m in zip(names, adam["m"])},
            {n: v.numpy().copy() for n, v in zip(names, adam["v"])},
            adam["step"], epoch, schedule.state(), best_sumr, best_epoch,
            rng.bit_generator.state, list(history),
        )

    ckpt = resume
    for epoch in range(start_epoch, last):
        t0 = time.perf_counter()
        model.train()
        perm = rng.permutation(len(train_ids))
        sums, count = {}, 0
        for idx in np.array_split(perm, n_batches):
            frames, lengths, words, word_valid, positives = data.batch(idx)
            emb = model.encode_videos(frames, lengths)
            q = model.encode_queries(words, word_valid)
            out = BatchOutputs(q, positives, emb.frame, emb.frame_valid if emb.frame is not None else None,
                               emb.clip)
            loss = total_loss(out, config.loss)
            if not torch.isfinite(loss.total):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}; last good checkpoint kept")
            model.zero_grad(set_to_none=False)
            loss.total.backward()
            try:
                adam_step(params, [p.grad for p in params], adam, schedule.lr, config.betas,
                          config.adam_eps, names)
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}") from exc
            sums["total"] = sums.get("total", 0.0) + float(loss.total.detach())
            for k, v in loss.terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            count += 1
        model.eval()
        val = evaluate(model, corpus, video_ids=val_ids)
        lr_used = schedule.lr
        schedule.step(val.sumr)
        if val.sumr > best_sumr:
            best_sumr, best_epoch = val.sumr, epoch
            best_params = {n: p.detach().numpy().copy() for n, p in named}
        record = {"epoch": epoch, "lr": lr_used, "train_loss": sums["total"] / count,
                  "terms": {k: v / count for k, v in sums.items() if k != "total"},
                  "val": val.as_dict()}
        history.append(record)
        log.info("epoch %d loss %.4f val SumR %.2f lr %.2e (%.1fs)", epoch, record["train_loss"],
                 val.sumr, lr_used, time.perf_counter() - t0)
        ckpt = snapshot(epoch + 1)
        if out_path is not None:
            save_checkpoint(ckpt, out_path)
        if on_epoch is not None:
            on_epoch(record, time.perf_counter() - t0)
    if ckpt is None:
        ckpt = snapshot(start_epoch)
    return TrainResult(ckpt, history)


def config_summary(config: TrainConfig) -> str:
    return canonical_json(config)
