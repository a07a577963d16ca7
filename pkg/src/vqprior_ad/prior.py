"""Stage 2: bidirectional masked-token transformer over H x W token grids."""

from __future__ import annotations

import copy
import math
import time

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PriorConfig, TrainConfig
from .errors import ConfigError, ShapeError, TrainingDivergence, WallClockExceeded
from .tokenizer import TrainLog


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int, dropout: float):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        B, N, C = x.shape
        q, k, v = self.qkv(self.norm1(x)).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // self.heads)
        h = (att.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, N, C)
        x = x + self.drop(self.proj(h))
        return x + self.drop(self.mlp(self.norm2(x)))


class PriorModel(nn.Module):
    """Predicts logits over the K codes at every grid cell given a partially masked grid.

    Vocabulary is K codes plus the MASK id ``K``. Grids are flattened row-major
    over (h, w) and get a learned position embedding per cell.
    """

    def __init__(self, cfg: PriorConfig, n_codes: int, height: int, width: int):
        super().__init__()
        self.cfg = cfg
        self.n_codes = n_codes
        self.mask_id = n_codes
        self.height, self.width = height, width
        d = cfg.width
        self.tok_emb = nn.Embedding(n_codes + 1, d)
        self.pos_emb = nn.Parameter(torch.zeros(height * width, d))
        nn.init.trunc_normal_(self.pos_emb, std=0.02)
        nn.init.trunc_normal_(self.tok_emb.weight, std=0.02)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.LayerNorm(d), nn.Linear(d, n_codes))

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.num_embeddings

    def forward(self, s_m: torch.Tensor) -> torch.Tensor:
        squeeze = s_m.ndim == 2
        if squeeze:
            s_m = s_m[None]
        B, H, W = s_m.shape
        if (H, W) != (self.height, self.width):
            raise ShapeError(f"grid {H}x{W} != model grid {self.height}x{self.width}")
        if s_m.min() < 0 or s_m.max() > self.mask_id:
            raise ValueError(f"token ids must lie in [0, {self.mask_id}]")
        h = self.drop(self.tok_emb(s_m.reshape(B, H * W)) + self.pos_emb)
        for blk in self.blocks:
            h = blk(h)
        u = self.head(self.norm(h)).reshape(B, H, W, self.n_codes)
        return u[0] if squeeze else u


def apply_mask(s: torch.Tensor, keep: torch.Tensor, mask_id: int) -> torch.Tensor:
    """Keep tokens where ``keep`` is 1, substitute ``mask_id`` where it is 0."""
    s = torch.as_tensor(s)
    keep = torch.as_tensor(keep)
    if s.shape != keep.shape:
        raise ShapeError(f"token grid {tuple(s.shape)} and mask {tuple(keep.shape)} differ in shape")
    return torch.where(keep.bool(), s, torch.full_like(s, mask_id))


@torch.no_grad()
def predict_logits(s_m: torch.Tensor, model: PriorModel) -> torch.Tensor:
    was = model.training
    model.eval()
    u = model(torch.as_tensor(s_m))
    model.train(was)
    return u


def token_log_prob(u: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """log p of the true token at each cell, via a stabilized log-softmax."""
    K = u.shape[-1]
    if (s >= K).any() or (s < 0).any():
        raise ValueError("ground-truth grid contains MASK or out-of-range ids")
    return torch.log_softmax(u, dim=-1).gather(-1, s.unsqueeze(-1)).squeeze(-1)


def token_probability(u: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    return token_log_prob(u, s).exp()


def masked_token_loss(u: torch.Tensor, s: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked cells only (``keep == 0``); zero if nothing is masked."""
    masked = ~keep.bool()
    n = masked.sum()
    if n == 0:
        return u.sum() * 0.0
    nll = -token_log_prob(u, s)
    return torch.where(masked, nll, torch.zeros_like(nll)).sum() / n


def sample_keep_mask(batch: int, height: int, width: int, generator: torch.Generator, schedule: str = "uniform"):
    """Random keep-masks: each grid masks ceil(r * H * W) uniformly chosen cells."""
    n_cells = height * width
    r = torch.rand(batch, generator=generator)
    if schedule == "cosine":
        r = torch.cos(0.5 * math.pi * r)
    elif schedule != "uniform":
        raise ConfigError(f"unknown mask schedule {schedule!r}")
    n_mask = torch.ceil(r * n_cells).long()
    ranks = torch.rand(batch, n_cells, generator=generator).argsort(dim=1).argsort(dim=1)
    keep = ranks >= n_mask[:, None]
    return keep.reshape(batch, height, width)


def train_stage2(
    token_grids,
    cfg: PriorConfig,
    train: TrainConfig,
    n_codes: int,
    seed: int = 0,
    resume: dict | None = None,
    deadline: float | None = None,
    progress=None,
) -> tuple[PriorModel, TrainLog]:
    """Masked-token training on grids produced by a frozen tokenizer."""
    s = torch.as_tensor(np.asarray(token_grids), dtype=torch.long)
    if s.ndim != 3 or len(s) == 0:
        raise ValueError("train_stage2 needs a non-empty (N, H, W) array of token grids")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    N, H, W = s.shape
    n_hold = int(N * train.holdout_fraction)
    s_train, s_hold = (s[:-n_hold], s[-n_hold:]) if 0 < n_hold < N else (s, s)

    model = PriorModel(cfg, n_codes, H, W)
    opt = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=train.weight_decay)
    batch = min(train.batch_size, len(s_train))
    steps_per_epoch = math.ceil(len(s_train) / batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, train.stage2_epochs * steps_per_epoch))
    log = TrainLog()
    if resume is not None:
        model.load_state_dict(resume["model"])
        opt.load_state_dict(resume["optimizer"])
        sched.load_state_dict(resume["scheduler"])
        log = copy.deepcopy(resume["log"])
    hold_gen = torch.Generator().manual_seed(seed + 7919)
    hold_keep = sample_keep_mask(len(s_hold), H, W, hold_gen, cfg.mask_schedule)

    def snapshot():
        return {
            "model": copy.deepcopy(model.state_dict()),
            "optimizer": copy.deepcopy(opt.state_dict()),
            "scheduler": copy.deepcopy(sched.state_dict()),
            "log": copy.deepcopy(log),
        }

    good = snapshot()
    for epoch in range(log.epochs_done, train.stage2_epochs):
        model.train()
        # per-epoch reseeds (shuffle, masks, dropout) keep resumed runs on the same stream
        gen.manual_seed(seed + 1 + epoch)
        torch.manual_seed(seed + 1 + epoch)
        perm = torch.randperm(len(s_train), generator=gen)
        tot, cnt = 0.0, 0
        for i in range(0, len(s_train), batch):
            sb = s_train[perm[i : i + batch]]
            keep = sample_keep_mask(len(sb), H, W, gen, cfg.mask_schedule)
            if keep.all():
                continue
            u = model(apply_mask(sb, keep, model.mask_id))
            loss = masked_token_loss(u, sb, keep)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"stage 2 diverged at epoch {epoch}", state=good, log=log)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            tot += loss.item() * len(sb)
            cnt += len(sb)
        log.train_loss.append(tot / max(cnt, 1))
        model.eval()
        with torch.no_grad():
            u = model(apply_mask(s_hold, hold_keep, model.mask_id))
            log.holdout_loss.append(masked_token_loss(u, s_hold, hold_keep).item())
        log.epochs_done = epoch + 1
        good = snapshot()
        if progress is not None:
            progress(epoch, log)
        if deadline is not None and time.monotonic() > deadline and log.epochs_done < train.stage2_epochs:
            raise WallClockExceeded(f"stage 2 stopped at epoch {log.epochs_done}", state=good, log=log)
    model.eval()
    model.snapshot = good
    return model, log


# ------------------------------------------------------------ sampling


def _cosine_remaining(n0: torch.Tensor, step: int, steps: int) -> torch.Tensor:
    return torch.floor(n0.double() * math.cos(0.5 * math.pi * (step + 1) / steps)).long()


@torch.no_grad()
def iterative_decode(
    s_m: torch.Tensor,
    model: PriorModel,
    steps: int = 20,
    temperature: float = 1.0,
    seed: int = 0,
    return_history: bool = False,
):
    """Fill every MASK cell over at most ``steps`` rounds, committing the most confident first.

    With ``temperature > 0`` candidate tokens are sampled and confidences get
    Gumbel noise annealed linearly to zero; ``temperature == 0`` is greedy and
    deterministic. Cells that are not MASK on input are never changed.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    squeeze = s_m.ndim == 2
    s = torch.as_tensor(s_m).clone()
    if squeeze:
        s = s[None]
    mask_id = model.mask_id
    masked = s == mask_id
    if not masked.any(dim=(1, 2)).all():
        raise ValueError("every grid needs at least one MASK cell to sample")
    gen = torch.Generator().manual_seed(seed)
    was = model.training
    model.eval()
    B = s.shape[0]
    n0 = masked.flatten(1).sum(1)
    history = [n0.clone()]
    for t in range(steps):
        n_cur = masked.flatten(1).sum(1)
        if (n_cur == 0).all():
            break
        u = model(s)
        logp = torch.log_softmax(u, dim=-1).flatten(1, 2)  # (B, HW, K)
        if temperature > 0:
            sampled = torch.multinomial(logp.exp().reshape(-1, logp.shape[-1]), 1, generator=gen).reshape(B, -1)
        else:
            sampled = logp.argmax(-1)
        conf = logp.gather(-1, sampled.unsqueeze(-1)).squeeze(-1)
        anneal = temperature * (1.0 - (t + 1) / steps)
        if anneal > 0:
            g = -torch.log(-torch.log(torch.rand(conf.shape, generator=gen, dtype=conf.dtype).clamp_min(1e-20)))
            conf = conf + anneal * g
        flat_mask = masked.flatten(1)
        conf = torch.where(flat_mask, conf, torch.full_like(conf, float("inf")))
        if t == steps - 1:
            target = torch.zeros_like(n_cur)
        else:
            target = torch.minimum(_cosine_remaining(n0, t, steps), (n_cur - 1).clamp_min(0))
        rank = conf.argsort(dim=1, stable=True).argsort(dim=1)
        still = flat_mask & (rank < target[:, None])
        commit = flat_mask & ~still
        flat_s = s.flatten(1)
        flat_s[commit] = sampled[commit]
        s = flat_s.reshape(s.shape)
        masked = still.reshape(masked.shape)
        history.append(masked.flatten(1).sum(1))
    model.train(was)
    out = s[0] if squeeze else s
    if return_history:
        return out, [h[0].item() if squeeze else h.tolist() for h in history]
    return out
