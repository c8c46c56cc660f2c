"""Episode loss and the episodic SGD training loop."""

import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from dcp.augment import augment_episode
from dcp.checkpoint import load_into, read_checkpoint, save_checkpoint
from dcp.config import RunConfig
from dcp.data import open_dataset
from dcp.episodes import Episode, EpisodeSampler, make_split, training_seed
from dcp.errors import CheckpointError, NumericalError, ValidationError
from dcp.network import build_model, episode_tensors

log = logging.getLogger(__name__)

EPS = 1e-7


def bce_two_channel(logits, target, eps=EPS):
    """Mean BCE of the softmax foreground probability of a 2-channel logit map."""
    prob = torch.softmax(logits, dim=1)[:, 1].clamp(eps, 1 - eps)
    target = target.to(prob.dtype)
    return -(target * torch.log(prob) + (1 - target) * torch.log(1 - prob)).mean()


def loss_terms(output, support_masks, query_masks, lambda1=1.0, lambda2=1.0):
    """Return ``(total, {"main", "aux1", "aux2"})`` from batched tensors.

    support_masks ``B x K x S x S`` and query_masks ``B x S x S`` at image size.
    """
    b, k, _, h, w = output.support_aux_logits.shape
    dtype = output.logits.dtype
    s_small = F.interpolate(support_masks.reshape(b * k, 1, *support_masks.shape[2:]).to(dtype),
                            size=(h, w), mode="nearest").view(b, k, h, w)
    q_small = F.interpolate(query_masks[:, None].to(dtype), size=(h, w), mode="nearest")[:, 0]

    main = bce_two_channel(output.logits_full, query_masks)
    aux1 = torch.stack([bce_two_channel(output.support_aux_logits[:, j], s_small[:, j]) for j in range(k)]).mean()
    aux2 = bce_two_channel(output.query_aux_logits, q_small)
    total = main + lambda1 * aux1 + lambda2 * aux2
    return total, {"main": main, "aux1": aux1, "aux2": aux2}


def query_mask_tensor(episodes, size):
    masks = []
    for ep in episodes:
        if ep.query_mask is None:
            raise ValidationError("episode has no query mask; the loss needs one")
        t = torch.from_numpy(np.asarray(ep.query_mask, dtype=np.float32))
        if tuple(t.shape) != (size, size):
            t = F.interpolate(t[None, None], size=(size, size), mode="nearest")[0, 0]
        masks.append(t)
    return torch.stack(masks)


def episode_loss(output, episodes, config):
    """Weighted main plus self-reasoning loss for one episode or a batch of episodes."""
    if isinstance(episodes, Episode):
        episodes = [episodes]
    size = output.logits_full.shape[-1]
    dtype = output.logits.dtype
    q = query_mask_tensor(episodes, size).to(dtype)
    _, s, _ = episode_tensors(episodes, size, dtype)
    return loss_terms(output, s, q, config.lambda1, config.lambda2)


# ---------------------------------------------------------------- training loop


def make_sampler(run_config, dataset=None):
    data = run_config.data
    split = make_split(data.dataset, data.fold)
    if dataset is None:
        dataset = open_dataset(data.dataset, data.root, data.synthetic_images_per_class, data.synthetic_seed,
                           data.synthetic_companion_prob)
    return EpisodeSampler(dataset, split, data.min_fg_area)


def _optimizer(model, cfg):
    params = [p for _, p in model.trainable_parameters()]
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


class Trainer:
    """Owns the model, optimiser and sampler for one training run."""

    def __init__(self, run_config: RunConfig, run_dir, dataset=None, sampler=None):
        self.config = run_config
        self.run_dir = Path(run_dir)
        self.sampler = sampler or make_sampler(run_config, dataset)
        tcfg = run_config.train
        torch.manual_seed(tcfg.seed)
        self.model = build_model(run_config.model, seed=tcfg.seed)
        self.model.train()
        self.optimizer = _optimizer(self.model, tcfg)
        self.step = 0

    @property
    def seeds(self):
        return {"train": self.config.train.seed, "model_init": self.config.train.seed,
                "backbone": self.config.model.backbone_seed}

    def resume(self, path):
        ckpt = read_checkpoint(path)
        if ckpt.config.model != self.config.model:
            raise CheckpointError(f"{path}: model config differs from the current run")
        load_into(self.model, ckpt, self.optimizer)
        self.step = ckpt.step
        return self

    def batch(self, step):
        tcfg = self.config.train
        episodes = []
        for j in range(tcfg.batch_episodes):
            seed = training_seed(tcfg.seed, step, j)
            ep = self.sampler.sample("train", tcfg.k_shot, seed)
            episodes.append(augment_episode(ep, seed + 1) if tcfg.augment else ep)
        return episodes

    def train_step(self):
        tcfg = self.config.train
        episodes = self.batch(self.step)
        size = self.config.model.image_size
        dtype = next(self.model.parameters()).dtype
        s_img, s_msk, q_img = episode_tensors(episodes, size, dtype)
        q_msk = query_mask_tensor(episodes, size).to(dtype)
        out = self.model(s_img, s_msk, q_img)
        total, parts = loss_terms(out, s_msk, q_msk, tcfg.lambda1, tcfg.lambda2)
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite loss at step {self.step}", step=self.step)
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        record = {
            "step": self.step,
            "total": total.item(),
            "main": parts["main"].item(),
            "aux1": parts["aux1"].item(),
            "aux2": parts["aux2"].item(),
            "lr": self.optimizer.param_groups[0]["lr"],
        }
        self.step += 1
        return record

    def save(self, name=None):
        path = self.run_dir / "checkpoints" / (name or f"step{self.step:06d}.ckpt")
        save_checkpoint(path, self.config, self.model, self.optimizer, self.step, self.seeds)
        return path

    def run(self, max_steps=None, log_file=None):
        """Train up to the configured step count (or ``max_steps``); return the final checkpoint."""
        tcfg = self.config.train
        end = tcfg.total_steps if max_steps is None else min(tcfg.total_steps, max_steps)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        log_path = Path(log_file) if log_file else self.run_dir / "train_log.jsonl"
        last = None
        t0 = time.time()
        with open(log_path, "a") as fh:
            while self.step < end:
                try:
                    record = self.train_step()
                except NumericalError as exc:
                    fh.write(json.dumps({"step": exc.step, "error": "non-finite loss"}) + "\n")
                    raise
                if tcfg.log_every and record["step"] % tcfg.log_every == 0:
                    fh.write(json.dumps(record) + "\n")
                    fh.flush()
                if tcfg.checkpoint_every and self.step % tcfg.checkpoint_every == 0:
                    last = self.save()
                if record["step"] % 50 == 0:
                    log.info("step %d/%d total=%.4f (%.1fs)", record["step"], end, record["total"], time.time() - t0)
        final = self.save("final.ckpt")
        return final if final is not None else last


def train(split, model_config, train_config, run_dir, dataset=None, data_config=None, resume_from=None,
          max_steps=None):
    """Train on ``split`` and return the path of the final checkpoint."""
    from dcp.config import DataConfig

    data_config = data_config or DataConfig(dataset=split.dataset, fold=split.fold_index)
    cfg = RunConfig(model=model_config, train=train_config, data=data_config)
    sampler = None
    if dataset is not None:
        sampler = EpisodeSampler(dataset, split, data_config.min_fg_area)
    trainer = Trainer(cfg, run_dir, sampler=sampler)
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer.run(max_steps=max_steps)


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def moving_average(values, window):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v[:0]
    return np.convolve(v, np.ones(window) / window, mode="valid")


def is_finite_record(record):
    return all(math.isfinite(record[k]) for k in ("total", "main", "aux1", "aux2"))
