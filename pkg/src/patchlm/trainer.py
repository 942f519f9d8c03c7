"""Two-stage training: a patch-compressed stage for the first fraction of the
budget, parameter-only transfer, then token-level continuation. Also owns the
cost model and the metrics sink.

Compute accounting is exact: token counts are integers, lambda is a Fraction,
and patch-stage steps contribute tokens/K effective units, so the two-stage
total divided by the all-token total reproduces the cost ratio identically.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .config import RunConfig, TrainConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BlockStream, cycle_batches, load_corpus, pack_blocks
from .evaluate import eval_nll
from .model import ModelConfig, TransformerParams, embed, forward, init_params, param_count
from .optim import AdamWState, LrSchedule, adamw_step, clip_grad_global, lr_at
from .patching import (AuxProjections, PatchConfig, apply_input_proj, apply_output_proj,
                       init_aux, mixup_loss, next_patch_loss, output_proj_loss,
                       patch_embed, strip_aux)
from .perf import tune_malloc
from .tensor import Tape, backward, mean_axis

__all__ = [
    "cost_ratio",
    "cost_ratio_exact",
    "flops_estimate",
    "epoch_plan",
    "TrainPlan",
    "RunState",
    "MetricsRecord",
    "MetricsLog",
    "export_curves",
    "train_step",
    "run_stage",
    "transfer",
    "TransferResult",
    "Trainer",
    "train_run",
]


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def cost_ratio_exact(patch_size: int, lam) -> Fraction:
    """lambda/K + 1 - lambda as an exact rational."""
    if patch_size < 1:
        raise ValueError("patch size must be >= 1")
    lam = lam if isinstance(lam, Fraction) else Fraction(lam)
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    return lam / patch_size + 1 - lam


def cost_ratio(patch_size: int, lam) -> float:
    """Two-stage compute relative to all-token-level training."""
    return float(cost_ratio_exact(patch_size, lam))


def flops_estimate(n_params: int, d_tokens: int):
    """Training compute of the 6*N*D rule-of-thumb."""
    if n_params < 0 or d_tokens < 0:
        raise ValueError("inputs must be non-negative")
    return 6 * n_params * d_tokens


def epoch_plan(n_epochs: int, lam) -> tuple[float, float]:
    """Split an epoch budget into (patch epochs, token epochs), exactly."""
    if n_epochs < 1:
        raise ValueError("need at least one epoch")
    lam = lam if isinstance(lam, Fraction) else Fraction(lam)
    patch = n_epochs * lam
    return float(patch), float(n_epochs - patch)


# ---------------------------------------------------------------------------
# plan / state / metrics
# ---------------------------------------------------------------------------


@dataclass
class TrainPlan:
    patch_steps: int
    token_steps: int
    lam: Fraction
    patch_size: int
    tokens_per_batch: int

    @property
    def total_steps(self) -> int:
        return self.patch_steps + self.token_steps

    @classmethod
    def from_steps(cls, total_steps: int, lam, patch_size: int, tokens_per_batch: int) -> "TrainPlan":
        """Step-count split: floor(N * lambda) patch steps, remainder token."""
        lam = lam if isinstance(lam, Fraction) else Fraction(lam)
        patch_steps = int(total_steps * lam)
        return cls(patch_steps, total_steps - patch_steps, lam, patch_size, tokens_per_batch)

    @classmethod
    def from_epochs(cls, n_epochs: int, lam, patch_size: int, tokens_per_batch: int,
                    patch_steps_per_epoch: int, token_steps_per_epoch: int) -> "TrainPlan":
        """Epoch budget: N*lambda patch epochs then N*(1-lambda) token epochs,
        fractional epochs realized as partial passes by step count."""
        lam = lam if isinstance(lam, Fraction) else Fraction(lam)
        patch_ep, token_ep = Fraction(n_epochs) * lam, Fraction(n_epochs) * (1 - lam)
        return cls(int(patch_ep * patch_steps_per_epoch), int(token_ep * token_steps_per_epoch),
                   lam, patch_size, tokens_per_batch)

    def compute_units(self, n_params: int) -> Fraction:
        """Exact effective compute of the two-stage plan."""
        patch_tokens = Fraction(self.patch_steps * self.tokens_per_batch, self.patch_size)
        return 6 * n_params * (patch_tokens + self.token_steps * self.tokens_per_batch)

    def baseline_units(self, n_params: int) -> int:
        """Compute of the same step budget run entirely at token level."""
        return flops_estimate(n_params, self.total_steps * self.tokens_per_batch)


@dataclass
class RunState:
    """Stage progress: step counters plus cumulative data/compute accounting.

    step_in_stage doubles as the schedule position; it is 0 right after a
    stage transition, when the optimizer moments are also freshly zeroed.
    """

    stage: str
    step_in_stage: int = 0
    global_step: int = 0
    tokens_consumed: int = 0
    compute_units: Fraction = Fraction(0)
    last_loss: float | None = None


@dataclass
class MetricsRecord:
    stage: str
    step: int
    tokens: int
    compute_units: float
    loss: float
    wall_seconds: float | None = None
    kind: str = "train"


class MetricsLog:
    """JSON-lines sink: one record per line, optionally mirrored to a file."""

    def __init__(self, path=None, log_wall_time: bool = True):
        self.records: list[MetricsRecord] = []
        self.log_wall_time = log_wall_time
        self._file = open(path, "w", encoding="utf-8") if path else None
        self._t0 = time.perf_counter()

    def log(self, stage: str, step: int, tokens: int, compute_units, loss: float,
            kind: str = "train") -> MetricsRecord:
        wall = time.perf_counter() - self._t0 if self.log_wall_time else None
        rec = MetricsRecord(stage, step, int(tokens), float(compute_units), float(loss),
                            wall, kind)
        self.records.append(rec)
        if self._file is not None:
            payload = {"kind": rec.kind, "stage": rec.stage, "step": rec.step,
                       "tokens": rec.tokens, "compute_units": rec.compute_units,
                       "loss": rec.loss}
            if wall is not None:
                payload["wall_seconds"] = wall
            self._file.write(json.dumps(payload, sort_keys=True) + "\n")
            self._file.flush()
        return rec

    def eval_records(self) -> list[MetricsRecord]:
        return [r for r in self.records if r.kind == "eval"]

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


def export_curves(jsonl_path, csv_path) -> int:
    """Convert a JSON-lines metrics log to `stage,step,tokens,compute_units,loss`
    CSV (training records only). Returns the number of rows written."""
    rows = 0
    with open(jsonl_path, "r", encoding="utf-8") as src, open(csv_path, "w", encoding="utf-8") as dst:
        dst.write("stage,step,tokens,compute_units,loss\n")
        for line in src:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind", "train") != "train":
                continue
            dst.write(f"{rec['stage']},{rec['step']},{rec['tokens']},{rec['compute_units']},{rec['loss']}\n")
            rows += 1
    return rows


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def train_step(params: TransformerParams, aux: AuxProjections | None,
               patch_cfg: PatchConfig, stage: str, tokens: np.ndarray):
    """One forward pass and loss for a [B, L] token batch; returns (loss, tape)."""
    k = patch_cfg.patch_size
    with Tape() as tape:
        if stage == "patch" and patch_cfg.strategy == "mixup":
            b_mix, rem = divmod(tokens.shape[0], k)
            if rem:
                raise ValueError(f"mixup batch of {tokens.shape[0]} sequences not divisible by K={k}")
            grouped = tokens.reshape(b_mix, k, -1)
            x = mean_axis(embed(params, grouped), 1)  # position-wise mean of k samples
            logits = forward(params, x, np.arange(x.shape[1]))
            loss = mixup_loss(logits, grouped)
        elif stage == "patch":
            emb = embed(params, tokens)
            if aux is not None and patch_cfg.input_proj_enabled:
                x = apply_input_proj(emb, aux.w_in, k)
            else:
                x = patch_embed(emb, k)
            positions = np.arange(x.shape[1])
            if aux is not None and patch_cfg.output_proj_enabled:
                hidden = forward(params, x, positions, head=False)
                logits4 = apply_output_proj(hidden, aux.w_out, params["head.weight"])
                loss = output_proj_loss(logits4, tokens, k)
            else:
                loss = next_patch_loss(forward(params, x, positions), tokens, k)
        elif stage == "token":
            emb = embed(params, tokens)
            logits = forward(params, emb, np.arange(tokens.shape[1]))
            loss = next_patch_loss(logits, tokens, 1)
        else:
            raise ValueError(f"unknown stage {stage!r}")
    return loss, tape


def _dump_diagnostics(dump_dir, state: RunState, loss_value: float,
                      trainable: list, names: list[str]) -> str:
    path = os.path.join(str(dump_dir) if dump_dir else ".", f"nan_dump_{state.stage}_{state.global_step}.json")
    info = {
        "stage": state.stage,
        "step_in_stage": state.step_in_stage,
        "global_step": state.global_step,
        "loss": loss_value,
        "tensors": {
            name: {
                "param_norm": float(np.linalg.norm(t.data)),
                "grad_norm": float(np.linalg.norm(t.grad)) if t.grad is not None else None,
                "finite": bool(np.all(np.isfinite(t.data))),
            }
            for name, t in zip(names, trainable)
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(info, f, indent=1)
    return path


def run_stage(params: TransformerParams, aux: AuxProjections | None,
              patch_cfg: PatchConfig, train_cfg: TrainConfig, stage: str,
              n_steps: int, batches, opt_state: AdamWState, schedule: LrSchedule,
              state: RunState | None = None, metrics: MetricsLog | None = None,
              n_params: int | None = None, eval_cb=None, eval_interval: int = 0,
              checkpoint_cb=None, dump_dir=None) -> RunState:
    """Run one stage for n_steps: embed -> (patch compression) -> forward ->
    stage loss -> backward -> clip -> AdamW with the scheduled LR.

    The batch iterator must yield [B, L] token batches whose L matches the
    stage (K*T or T full/reduced for patch, T for token). A non-finite loss
    aborts with a diagnostic state dump. Returns the updated RunState.
    """
    if state is None:
        state = RunState(stage=stage)
    if state.stage != stage:
        raise ValueError(f"state is for stage {state.stage!r}, not {stage!r}")
    if n_params is None:
        n_params = param_count(params.config)
    k = patch_cfg.patch_size if stage == "patch" else 1
    trainable = params.all() + (aux.all() if aux is not None else [])
    names = [n for n, _ in params.named()] + ([n for n, _ in aux.named()] if aux else [])

    if eval_cb is not None:
        start_nll = eval_cb()
        if metrics is not None:
            metrics.log(stage, state.global_step, state.tokens_consumed,
                        state.compute_units, start_nll, kind="eval")

    batches = iter(batches)
    for i in range(n_steps):
        batch = next(batches)
        loss, tape = train_step(params, aux, patch_cfg, stage, batch.tokens)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            path = _dump_diagnostics(dump_dir, state, loss_value, trainable, names)
            raise FloatingPointError(f"non-finite loss at {stage} step {state.step_in_stage}; "
                                     f"diagnostics written to {path}")
        backward(loss, tape)
        clip_grad_global(trainable, train_cfg.clip)
        lr = lr_at(schedule, state.step_in_stage + 1)
        adamw_step(trainable, opt_state, lr)
        for t in trainable:
            t.grad = None

        state.step_in_stage += 1
        state.global_step += 1
        state.tokens_consumed += batch.tokens.size
        state.compute_units += 6 * n_params * Fraction(batch.tokens.size, k)
        state.last_loss = loss_value

        final = i + 1 == n_steps
        if metrics is not None and (final or state.step_in_stage % train_cfg.log_interval == 0):
            metrics.log(stage, state.global_step, state.tokens_consumed,
                        state.compute_units, loss_value)
        if eval_cb is not None and (final or (eval_interval and state.step_in_stage % eval_interval == 0)):
            nll = eval_cb()
            if metrics is not None:
                metrics.log(stage, state.global_step, state.tokens_consumed,
                            state.compute_units, nll, kind="eval")
        if checkpoint_cb is not None and not final and train_cfg.checkpoint_interval \
                and state.step_in_stage % train_cfg.checkpoint_interval == 0:
            checkpoint_cb(state)
    return state


# ---------------------------------------------------------------------------
# stage transfer
# ---------------------------------------------------------------------------


@dataclass
class TransferResult:
    params: TransformerParams
    opt_state: AdamWState
    schedule_step: int
    patch_config: PatchConfig


def transfer(checkpoint_path, expected_config: ModelConfig | None = None,
             beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
             weight_decay: float = 0.1) -> TransferResult:
    """Initialize the token stage from a stage-one checkpoint.

    Backbone tensors come through bit-identical, projection tensors are
    dropped, optimizer moments are zero, and the schedule restarts at step 0
    with a fresh warmup. An architecture mismatch is refused with a
    field-level diff.
    """
    params, patch_cfg, aux = load_checkpoint(checkpoint_path)
    if expected_config is not None and params.config != expected_config:
        diffs = []
        for name in ModelConfig.__dataclass_fields__:
            got, want = getattr(params.config, name), getattr(expected_config, name)
            if got != want:
                diffs.append(f"  {name}: checkpoint={got} expected={want}")
        raise ValueError("checkpoint architecture does not match:\n" + "\n".join(diffs))
    params = strip_aux(params, aux)
    opt_state = AdamWState.for_params(params.all(), beta1=beta1, beta2=beta2,
                                      eps=eps, weight_decay=weight_decay)
    return TransferResult(params=params, opt_state=opt_state, schedule_step=0,
                          patch_config=patch_cfg)


# ---------------------------------------------------------------------------
# two-stage driver
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: TransformerParams
    plan: TrainPlan
    state: RunState
    metrics: MetricsLog
    checkpoints: dict = field(default_factory=dict)


class Trainer:
    """Owns parameters, data streams, plan, and the metrics sink for one run."""

    def __init__(self, cfg: RunConfig, corpus_ids: np.ndarray | None = None,
                 out_dir=None, metrics_path=None):
        tune_malloc()
        self.cfg = cfg
        self.out_dir = out_dir
        if corpus_ids is None:
            if not cfg.data.path:
                raise ValueError("no corpus: set data.path or pass corpus_ids")
            corpus_ids, vocab = load_corpus(cfg.data.path, cfg.data.kind)
            if vocab > cfg.model.vocab_size:
                raise ValueError(f"corpus vocab {vocab} exceeds model vocab {cfg.model.vocab_size}")
        corpus_ids = np.asarray(corpus_ids, dtype=np.int32)

        tr = cfg.train
        n_eval = int(len(corpus_ids) * tr.eval_fraction)
        self.eval_blocks = None
        if n_eval > 0:
            eval_ids = corpus_ids[len(corpus_ids) - n_eval:]
            corpus_ids = corpus_ids[: len(corpus_ids) - n_eval]
            blocks = pack_blocks(eval_ids, cfg.patch.context_tokens)
            if len(blocks) == 0:
                raise ValueError("eval_fraction leaves no full evaluation block")
            self.eval_blocks = blocks[: tr.eval_blocks]
        self.train_ids = corpus_ids

        t_ctx = cfg.patch.context_tokens
        patch_block = cfg.patch.patch_block_length
        if cfg.model.max_context < max(t_ctx, patch_block):
            raise ValueError(f"max_context {cfg.model.max_context} is below the "
                             f"patch-stage context of {patch_block} tokens")
        if tr.tokens_per_batch % t_ctx or tr.tokens_per_batch % patch_block:
            raise ValueError(f"tokens_per_batch {tr.tokens_per_batch} must be divisible by "
                             f"block lengths {t_ctx} and {patch_block}")
        self.b_token = tr.tokens_per_batch // t_ctx
        self.b_patch = tr.tokens_per_batch // patch_block
        if cfg.patch.strategy == "mixup" and self.b_patch % cfg.patch.patch_size:
            raise ValueError("mixup needs the patch batch size divisible by K")
        self.token_stream = BlockStream(self.train_ids, t_ctx, seed=tr.seed)
        self.patch_stream = BlockStream(self.train_ids, patch_block, seed=tr.seed)

        self.plan = self._build_plan()
        self.n_params = param_count(cfg.model)
        self.params = init_params(cfg.model, tr.seed)
        self.aux = (init_aux(cfg.model.hidden_size, cfg.patch, tr.seed + 1)
                    if (cfg.patch.input_proj_enabled or cfg.patch.output_proj_enabled) else None)
        self.metrics = MetricsLog(metrics_path, log_wall_time=tr.log_wall_time)

    def _build_plan(self) -> TrainPlan:
        cfg, tr = self.cfg, self.cfg.train
        if tr.steps is not None:
            return TrainPlan.from_steps(tr.steps, cfg.patch.lam, cfg.patch.patch_size,
                                        tr.tokens_per_batch)
        spe_patch = self.patch_stream.n_blocks // self.b_patch
        spe_token = self.token_stream.n_blocks // self.b_token
        return TrainPlan.from_epochs(tr.epochs, cfg.patch.lam, cfg.patch.patch_size,
                                     tr.tokens_per_batch, spe_patch, spe_token)

    def _opt_state(self, trainable) -> AdamWState:
        tr = self.cfg.train
        return AdamWState.for_params(trainable, beta1=tr.beta1, beta2=tr.beta2,
                                     eps=tr.eps, weight_decay=tr.weight_decay)

    def _schedule(self, n_steps: int) -> LrSchedule:
        tr = self.cfg.train
        return LrSchedule(total_steps=n_steps, peak_lr=tr.lr, warmup_steps=tr.warmup,
                          floor_fraction=tr.floor_fraction)

    def _eval_cb(self):
        if self.eval_blocks is None:
            return None
        batch = max(1, self.cfg.train.tokens_per_batch // self.cfg.patch.context_tokens)
        return lambda: eval_nll(self.params, self.eval_blocks, batch_size=batch)

    def _save(self, tag: str, with_aux: bool) -> str | None:
        if self.out_dir is None:
            return None
        path = os.path.join(str(self.out_dir), f"checkpoint_{tag}.bin")
        save_checkpoint(path, self.params, self.cfg.patch, self.aux if with_aux else None)
        return path

    def train(self) -> TrainResult:
        cfg, tr, plan = self.cfg, self.cfg.train, self.plan
        checkpoints = {}
        state = RunState(stage="patch")
        if plan.token_steps == 0 and plan.patch_steps > 0:
            warnings.warn("lambda = 1 leaves no token-level stage; the resulting model "
                          "is not aligned with token-level inference")

        if plan.patch_steps > 0:
            batches = cycle_batches(self.patch_stream, self.b_patch, plan.patch_steps,
                                    stage="patch")
            opt = self._opt_state(self.params.all() + (self.aux.all() if self.aux else []))
            ckpt_cb = (lambda st: self._save(f"patch_{st.step_in_stage}", True)) if self.out_dir else None
            state = run_stage(self.params, self.aux, cfg.patch, tr, "patch",
                              plan.patch_steps, batches, opt, self._schedule(plan.patch_steps),
                              state=state, metrics=self.metrics, n_params=self.n_params,
                              eval_cb=self._eval_cb(), eval_interval=tr.eval_interval,
                              checkpoint_cb=ckpt_cb, dump_dir=self.out_dir)
            path = self._save("patch_final", with_aux=True)
            if path:
                checkpoints["patch_final"] = path

        # Parameter-only transfer: backbone carried over unchanged, projections
        # dropped, optimizer and schedule rebuilt from zero.
        self.params = strip_aux(self.params, self.aux)
        self.aux = None

        if plan.token_steps > 0:
            skip = 0
            if tr.data_mode == "split" and plan.patch_steps > 0:
                per_epoch = self.token_stream.n_blocks // self.b_token
                skip = plan.patch_steps % per_epoch
            batches = cycle_batches(self.token_stream, self.b_token, plan.token_steps,
                                    stage="token", skip_batches=skip)
            opt = self._opt_state(self.params.all())
            token_state = RunState(stage="token", global_step=state.global_step,
                                   tokens_consumed=state.tokens_consumed,
                                   compute_units=state.compute_units)
            ckpt_cb = (lambda st: self._save(f"token_{st.step_in_stage}", False)) if self.out_dir else None
            state = run_stage(self.params, None, cfg.patch, tr, "token",
                              plan.token_steps, batches, opt, self._schedule(plan.token_steps),
                              state=token_state, metrics=self.metrics, n_params=self.n_params,
                              eval_cb=self._eval_cb(), eval_interval=tr.eval_interval,
                              checkpoint_cb=ckpt_cb, dump_dir=self.out_dir)
            path = self._save("token_final", with_aux=False)
            if path:
                checkpoints["token_final"] = path

        self.metrics.close()
        return TrainResult(params=self.params, plan=plan, state=state,
                           metrics=self.metrics, checkpoints=checkpoints)


def train_run(cfg: RunConfig, corpus_ids: np.ndarray | None = None,
              out_dir=None, metrics_path=None) -> TrainResult:
    """Build a Trainer and run the full two-stage plan."""
    return Trainer(cfg, corpus_ids=corpus_ids, out_dir=out_dir,
                   metrics_path=metrics_path).train()
