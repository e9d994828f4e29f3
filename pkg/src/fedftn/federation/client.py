"""Client side: local training between deployments, and site adaptation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..autodiff import Tensor
from ..errors import ConfigError, ProtocolError
from ..evaluation import dataset_recon_loss, evaluate_samples, level_means
from ..losses import LossWeights, objective_terms, recon_loss
from ..optim import AdamState, adam_step
from ..params import ParamTree
from ..phantom import augment
from ..strategy import StrategyId
from ..unet import DenoiserModel, partition
from .server import check_payload_names
from .wire import Message, MessageKind, decode_message, encode_message

log = logging.getLogger(__name__)


@dataclass
class ClientState:
    site_id: int
    model: DenoiserModel
    adam: AdamState
    train: list
    strategy: StrategyId = StrategyId.FEDFTN
    P: int = 1
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 3
    crop: Optional[int] = 16
    flip: bool = True
    anchor: Optional[ParamTree] = None
    q: int = 0
    reset_adam: bool = False
    eval_sets: dict = field(default_factory=dict)
    eval_every: int = 1
    rows: list = field(default_factory=list)
    last_stats: tuple = (math.nan, math.nan)

    def __post_init__(self):
        self.strategy = StrategyId.parse(self.strategy)

    def shared(self) -> ParamTree:
        return partition(self.model, self.strategy)[0]


def make_batches(samples: Sequence, order, batch_size: int, crop, flip: bool, rng,
                 divisor: int) -> list:
    batches = []
    for start in range(0, len(order), batch_size):
        batch = []
        for i in order[start:start + batch_size]:
            s = samples[i]
            c = crop if crop else min(np.shape(s.x))
            x, y = augment(s.x, s.y, c, rng, flip, divisor)
            batch.append((x, y, s.d))
        batches.append(batch)
    return batches


def run_local_epochs(client: ClientState, P: int, q: int) -> ParamTree:
    """``P`` full passes over the site's training set; returns the upload."""
    if not client.train:
        raise ConfigError(f"site {client.site_id} has no training samples")
    client.q = q
    params = client.model.trainable()
    divisor = client.model.config.divisor
    recon, penalty = [], []
    for _ in range(P):
        order = client.rng.permutation(len(client.train))
        for batch in make_batches(client.train, order, client.batch_size, client.crop,
                                  client.flip, client.rng, divisor):
            terms = objective_terms(client.model, batch, client.anchor, client.weights, q,
                                    client.strategy, track_stats=True)
            terms.total.backward()
            adam_step(params, client.adam)
            recon.append(terms.recon.item())
            if terms.penalty is not None:
                penalty.append(terms.penalty.item())
    client.last_stats = (float(np.mean(recon)) if recon else math.nan,
                         float(np.mean(penalty)) if penalty else math.nan)
    return client.shared().snapshot()


def apply_deployment(client: ClientState, payload: ParamTree) -> None:
    check_payload_names(list(payload), client.strategy, list(client.shared()))
    client.model.params.assign(payload)
    client.anchor = ParamTree((n, Tensor(client.model.params[n].data.copy())) for n in payload)
    if client.reset_adam:
        client.adam.reset(client.model.trainable())


def evaluate_epoch(client: ClientState, epoch: int, run_id: str = "run") -> list:
    rows = []
    for split in sorted(client.eval_sets):
        samples = client.eval_sets[split]
        if not samples:
            continue
        for d, m in level_means(evaluate_samples(client.model, samples)).items():
            rows.append({"run_id": run_id, "epoch": epoch, "site": client.site_id, "split": split,
                         "count_level": d, "psnr": m["psnr"], "nmse": m["nmse"], "ssim": m["ssim"],
                         "recon_loss": m["recon_loss"], "gwc_loss": client.last_stats[1]})
    client.rows.extend(rows)
    return rows


def run_client(endpoint, client: ClientState, timeout: Optional[float] = None,
               run_id: str = "run") -> None:
    """Drive one client through a full run over ``endpoint``."""
    endpoint.send(encode_message(Message(MessageKind.REGISTER, client.site_id, 0)))
    evaluated = set()

    def maybe_evaluate(epoch, force=False):
        if epoch >= 1 and epoch not in evaluated and (force or epoch % client.eval_every == 0):
            evaluate_epoch(client, epoch, run_id)
            evaluated.add(epoch)

    while True:
        msg = decode_message(endpoint.recv(timeout))
        if msg.site_id != client.site_id:
            raise ProtocolError(f"site {client.site_id} received a message for site {msg.site_id}")
        if msg.kind is MessageKind.DEPLOY:
            apply_deployment(client, msg.payload)
            maybe_evaluate(msg.global_epoch - 1)
            upload = run_local_epochs(client, client.P, msg.global_epoch)
            endpoint.send(encode_message(
                Message(MessageKind.UPLOAD, client.site_id, msg.global_epoch, upload)))
        elif msg.kind is MessageKind.FINISH:
            apply_deployment(client, msg.payload)
            maybe_evaluate(msg.global_epoch, force=True)
            endpoint.send(encode_message(Message(MessageKind.ACK, client.site_id, msg.global_epoch)))
            return
        else:
            raise ProtocolError(f"client cannot handle a {msg.kind.name} message")


def site_adaptation(model: DenoiserModel, samples: Sequence, epochs: int = 10, lr: float = 2e-5,
                    batch_size: int = 3, crop: Optional[int] = 16, flip: bool = True, seed=0,
                    history: Optional[list] = None) -> DenoiserModel:
    """Fine-tune every trainable parameter locally with a fresh optimizer.

    The input model is left untouched and running statistics stay frozen.
    When ``history`` is given, the whole-volume training loss is appended to
    it before the first epoch and after every epoch.
    """
    if not samples:
        raise ConfigError("site adaptation needs training samples")
    adapted = model.snapshot()
    params = adapted.trainable()
    adam = AdamState.create(params, lr=lr)
    rng = np.random.default_rng(seed)
    if history is not None:
        history.append(dataset_recon_loss(adapted, samples))
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for batch in make_batches(samples, order, batch_size, crop, flip, rng,
                                  adapted.config.divisor):
            recon_loss(adapted, batch).backward()
            adam_step(params, adam)
        if history is not None:
            history.append(dataset_recon_loss(adapted, samples))
    return adapted
