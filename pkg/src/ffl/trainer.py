"""Simultaneous training of sub-networks and fusion head, evaluation, persistence."""

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .config import VANILLA, Config
from .data import iterate, load_dataset
from .errors import CheckpointError, NonFiniteLossError
from .losses import total_loss
from .model import FFLModel, VanillaModel, build_ffl, build_vanilla

logger = logging.getLogger(__name__)

NON_FINITE_LIMIT = 3


class SGD:
    """SGD with heavy-ball momentum and decoupled-from-bn weight decay.

    Decay applies only to parameters flagged ``decay`` (conv and linear
    weights). Buffer update: ``buf = momentum * buf + (grad + wd * w)``,
    initialised to the first gradient.
    """

    def __init__(self, named_params, lr, momentum=0.9, weight_decay=5e-4):
        self.params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        lr = np.float32(self.lr)
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + np.float32(self.weight_decay) * p.data
            if self.momentum:
                buf = self.buffers.get(name)
                if buf is None:
                    buf = g.astype(np.float32, copy=True)
                else:
                    buf = np.float32(self.momentum) * buf + g
                self.buffers[name] = buf
                g = buf
            p.data -= lr * g

    def state_dict(self):
        return {name: buf.copy() for name, buf in self.buffers.items()}

    def load_state_dict(self, state):
        known = {name for name, _ in self.params}
        unknown = set(state) - known
        if unknown:
            raise CheckpointError(f"optimizer state for unknown parameters: {sorted(unknown)[:3]}")
        self.buffers = {name: np.array(buf, dtype=np.float32) for name, buf in state.items()}


def lr_at(epoch, base_lr, milestones, decay):
    """Step decay: multiply by ``decay`` at every milestone epoch reached."""
    return base_lr * decay ** sum(epoch >= m for m in milestones)


@dataclass
class MetricsRecord:
    epoch: int
    branch_err: list
    ensemble_err: float
    fused_err: float = None
    losses: dict = field(default_factory=dict)
    lr: float = float("nan")
    seconds: float = 0.0

    @property
    def mean_branch_err(self):
        return float(np.mean(self.branch_err))

    def csv_row(self):
        fmt = lambda v: "" if v is None else repr(float(v))
        row = [str(self.epoch)] + [fmt(e) for e in self.branch_err]
        row += [fmt(self.ensemble_err), fmt(self.fused_err)]
        row += [fmt(self.losses.get(k)) for k in LOSS_COLUMNS]
        row += [fmt(self.lr), f"{self.seconds:.3f}"]
        return row


LOSS_COLUMNS = ("ce_sub_sum", "ce_fused", "ekd", "fkd", "total")


def csv_header(n):
    return ["epoch"] + [f"branch{k}_err" for k in range(n)] + ["ensemble_err", "fused_err", *LOSS_COLUMNS, "lr", "seconds"]


def top1_error(logits, labels):
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) != labels))


def evaluate(model, dataset, batch_size=256):
    """Top-1 error (%) of every branch, the logit ensemble and the fused head.

    Runs in eval mode (batchnorm running statistics) without recording a
    graph, and restores the previous mode afterwards.
    """
    was_training = model.training
    model.eval()
    branch, ens, fused = [], [], []
    with T.no_grad():
        for batch in iterate(dataset, batch_size):
            ls = model(batch.images)
            branch.append(np.stack([z.data for z in ls.z]))
            ens.append(ls.z_e.data)
            if ls.z_f is not None:
                fused.append(ls.z_f.data)
    model.train(was_training)
    branch = np.concatenate(branch, axis=1)
    labels = dataset.labels
    return MetricsRecord(
        epoch=-1,
        branch_err=[top1_error(z, labels) for z in branch],
        ensemble_err=top1_error(np.concatenate(ens), labels),
        fused_err=top1_error(np.concatenate(fused), labels) if fused else None,
    )


def build_model(config, rng=None):
    if rng is None:
        rng = np.random.default_rng(config.train.seed)
    specs = config.network_specs()
    if config.model.mode == VANILLA:
        return build_vanilla(specs[0], rng)
    return build_ffl(
        config.topology(), specs, config.image_size, rng,
        fusion_mode=config.fusion.mode, batchnorm=config.fusion.batchnorm,
        use_fm=config.train.use_fm, adapter=config.fusion.adapter,
    )


def train_step(model, batch, optimizer, distill, use_ekd=True, use_fkd=True):
    """One forward, one backward of the total loss, one update of every parameter.

    Returns the LossBreakdown. A non-finite loss skips the update.
    """
    model.train()
    breakdown = total_loss(model(batch.images), batch.onehot, distill, use_ekd, use_fkd)
    if not breakdown.is_finite():
        return breakdown
    optimizer.zero_grad()
    breakdown.loss.backward()
    optimizer.step()
    return breakdown


@dataclass
class TrainResult:
    model: object
    optimizer: SGD
    history: list
    epoch: int
    step: int

    @property
    def final(self):
        return self.history[-1] if self.history else None


def make_checkpoint(config, model, optimizer, epoch, step):
    return ckpt_io.Checkpoint(
        config=config.to_dict(),
        digest=config.digest(),
        tensors=model.state_dict(),
        optimizer=optimizer.state_dict(),
        epoch=epoch,
        step=step,
        rng_state={"seed": config.train.seed, "epoch": epoch,
                   "bit_generator": np.random.default_rng([config.train.seed, epoch]).bit_generator.state},
    )


def _save(ckpt, path):
    try:
        ckpt_io.save_checkpoint(ckpt, path)
    except OSError as exc:
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc


def train(config, train_set=None, test_set=None, out_dir=None, resume=None, on_step=None):
    """Run (or resume) training as described by ``config``.

    Writes ``metrics.csv``, ``final.ckpt`` and optional ``epoch_<k>.ckpt``
    into ``out_dir`` when given. ``on_step(step, breakdown)`` is called
    after every step.
    """
    if train_set is None:
        train_set = load_dataset(config.dataset_spec("train"))
    if test_set is None:
        test_set = load_dataset(config.dataset_spec("test"))
    t = config.train
    model = build_model(config)
    named = list(model.named_parameters())
    optimizer = SGD(named, t.lr, t.momentum, t.weight_decay)
    distill = config.distill_config()
    use_ekd = t.use_ekd and config.model.mode != VANILLA
    use_fkd = t.use_fkd and config.model.mode != VANILLA

    start_epoch, step = 0, 0
    if resume is not None:
        if resume.digest != config.digest():
            raise CheckpointError("config digest mismatch: refusing to resume under a different config")
        model.load_state_dict(resume.tensors)
        optimizer.load_state_dict(resume.optimizer)
        start_epoch, step = resume.epoch, resume.step

    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "metrics.csv"
        if not (resume is not None and csv_path.exists()):
            with open(csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(csv_header(model.n))

    history = []
    non_finite = 0
    for epoch in range(start_epoch, t.epochs):
        started = time.perf_counter()
        optimizer.lr = lr_at(epoch, t.lr, t.milestones, t.decay)
        sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
        seen = 0
        for batch in iterate(train_set, config.data.batch_size, shuffle=True,
                             augment=config.data.augment, seed=t.seed, epoch=epoch):
            bd = train_step(model, batch, optimizer, distill, use_ekd, use_fkd)
            step += 1
            if not bd.is_finite():
                non_finite += 1
                logger.warning("non-finite loss at step %d: %s", step, bd)
                if non_finite >= NON_FINITE_LIMIT:
                    raise NonFiniteLossError(
                        f"{non_finite} consecutive non-finite losses at step {step}: "
                        f"ce_sub={bd.ce_sub} ce_fused={bd.ce_fused} ekd={bd.ekd} fkd={bd.fkd} total={bd.total}"
                    )
                continue
            non_finite = 0
            if on_step is not None:
                on_step(step, bd)
            for key in LOSS_COLUMNS:
                sums[key] += getattr(bd, key) * len(batch)
            seen += len(batch)

        done = epoch + 1
        if done % t.eval_every == 0 or done == t.epochs:
            record = evaluate(model, test_set)
            record.epoch = done
            record.losses = {k: v / max(seen, 1) for k, v in sums.items()}
            record.lr = optimizer.lr
            record.seconds = time.perf_counter() - started
            history.append(record)
            logger.info("epoch %d: branch err %s fused err %s", done, record.branch_err, record.fused_err)
            if csv_path is not None:
                with open(csv_path, "a", newline="") as fh:
                    csv.writer(fh).writerow(record.csv_row())
        if out_dir is not None and t.checkpoint_every and done % t.checkpoint_every == 0:
            _save(make_checkpoint(config, model, optimizer, done, step), out_dir / f"epoch_{done}.ckpt")

    final_epoch = max(start_epoch, t.epochs)
    if out_dir is not None:
        _save(make_checkpoint(config, model, optimizer, final_epoch, step), out_dir / "final.ckpt")
    return TrainResult(model, optimizer, history, final_epoch, step)


# --- restore and export -----------------------------------------------------------


def restore_model(ckpt, config=None):
    """Rebuild the model described by a checkpoint and load its tensors."""
    config = Config.from_dict(ckpt.config) if config is None else config
    model = build_model(config)
    model.load_state_dict(ckpt.tensors)
    return model, config


def export_branch(ckpt, index):
    """Checkpoint holding only sub-network ``index`` as a vanilla network."""
    model, config = restore_model(ckpt)
    if isinstance(model, VanillaModel):
        raise CheckpointError("checkpoint already holds a single network")
    net = model.export_branch(index)
    spec = net.spec
    exported = copy.deepcopy(config)
    m = exported.model
    m.mode, m.n = VANILLA, 1
    m.stages, m.blocks, m.strides = list(spec.stages), list(spec.blocks), list(spec.strides)
    m.branch_stages, m.branch_strides, m.branch_blocks = [], [], []
    exported.ablation = ""
    single = VanillaModel(net)
    return ckpt_io.Checkpoint(exported.to_dict(), exported.digest(), single.state_dict(),
                              epoch=ckpt.epoch, step=ckpt.step)


def export_fused(ckpt):
    """Checkpoint for the fused classifier path: all model tensors, no optimizer."""
    model, config = restore_model(ckpt)
    if not isinstance(model, FFLModel):
        raise CheckpointError("checkpoint has no fused classifier")
    return ckpt_io.Checkpoint(config.to_dict(), config.digest(), model.state_dict(),
                              epoch=ckpt.epoch, step=ckpt.step)
