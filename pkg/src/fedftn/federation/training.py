"""Run orchestration: one server, N concurrently training clients."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, FedFTNError, TransportError
from ..losses import LossWeights
from ..optim import AdamState
from ..params import ParamTree
from ..strategy import StrategyId
from ..unet import DenoiserModel, UNetConfig, partition
from .client import ClientState, run_client
from .server import ServerState, run_server
from .transport import (InProcTransport, SocketClientEndpoint, SocketServer, TrafficLog,
                        parse_address)

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    strategy: str = "fedftn"
    Q: int = 1
    P: int = 1
    lr: float = 1e-4
    batch: int = 3
    lambda_gwc: float = 0.001
    mu: float = 0.01
    crop: Optional[int] = 16
    flip: bool = True
    seed: int = 0
    precision: str = "f32"
    unet: UNetConfig = field(default_factory=UNetConfig)
    reset_adam: bool = False
    eval_every: int = 1
    eval_splits: tuple = ("val", "test")
    timeout: Optional[float] = 3600.0

    def __post_init__(self):
        self.strategy = StrategyId.parse(self.strategy)
        if self.Q < 1 or self.P < 0 or self.batch < 1 or self.eval_every < 1:
            raise ConfigError(f"invalid schedule Q={self.Q} P={self.P} batch={self.batch} "
                              f"eval_every={self.eval_every}")

    def weights(self) -> LossWeights:
        return LossWeights(lambda_gwc=self.lambda_gwc, mu_fedprox=self.mu)


@dataclass
class FederatedResult:
    models: dict
    rows: list
    aggregated: ParamTree
    rounds: list = field(default_factory=list)
    traffic: Optional[TrafficLog] = None


def init_model(settings: TrainSettings) -> DenoiserModel:
    return DenoiserModel.init(settings.unet, seed=settings.seed, precision=settings.precision)


def make_client(dataset, settings: TrainSettings, rng_seed=None) -> ClientState:
    model = init_model(settings)
    site = dataset.profile.site_id
    seed = [settings.seed, site] if rng_seed is None else rng_seed
    return ClientState(
        site_id=site, model=model,
        adam=AdamState.create(model.trainable(), lr=settings.lr),
        train=list(dataset.train), strategy=settings.strategy, P=settings.P,
        rng=np.random.default_rng(seed), weights=settings.weights(),
        batch_size=settings.batch, crop=settings.crop, flip=settings.flip,
        reset_adam=settings.reset_adam,
        eval_sets={s: list(dataset.split(s)) for s in settings.eval_splits},
        eval_every=settings.eval_every)


def run_federated_training(datasets: Sequence, settings: TrainSettings, transport: str = "inproc",
                           traffic: Optional[TrafficLog] = None, client_seeds=None,
                           keep_rounds: bool = False, run_id: str = "run") -> FederatedResult:
    """Train every site for ``Q`` global epochs and return personalized models.

    ``transport`` is ``"inproc"``, ``"socket"`` (ephemeral localhost port) or
    ``"socket:HOST:PORT"``.
    """
    if not datasets:
        raise ConfigError("at least one site is required")
    sites = [d.profile.site_id for d in datasets]
    if len(set(sites)) != len(sites):
        raise ConfigError(f"site ids must be unique, got {sites}")
    seeds = client_seeds or [None] * len(datasets)
    clients = [make_client(d, settings, s) for d, s in zip(datasets, seeds)]
    initial = partition(init_model(settings), settings.strategy)[0].snapshot()
    state = ServerState(settings.strategy, settings.Q, len(clients))

    if transport == "inproc":
        hub = InProcTransport(len(clients), traffic)
        endpoint_for = hub.client
    elif transport == "socket" or transport.startswith("socket:"):
        host, port = ("127.0.0.1", 0) if transport == "socket" else parse_address(transport[7:])
        hub = SocketServer(len(clients), host, port, traffic)
        if traffic is not None:
            traffic.framed = True

        def endpoint_for(i):
            return SocketClientEndpoint(hub.address, traffic, i, settings.timeout)
    else:
        raise ConfigError(f"unknown transport {transport!r}")

    errors: list = []   # in order of occurrence; the first is the root cause

    def worker(i: int, client: ClientState) -> None:
        endpoint = None
        try:
            endpoint = endpoint_for(i)
            run_client(endpoint, client, settings.timeout, run_id)
        except BaseException as exc:   # reported after the join below
            errors.append((client.site_id, exc))
            log.error("site %d failed: %s", client.site_id, exc)
        finally:
            if endpoint is not None:
                endpoint.close()

    threads = [threading.Thread(target=worker, args=(i, c), name=f"site-{c.site_id}", daemon=True)
               for i, c in enumerate(clients)]
    for t in threads:
        t.start()
    server_error = None
    try:
        aggregated = run_server(hub, state, initial, timeout=settings.timeout,
                                keep_rounds=keep_rounds)
    except FedFTNError as exc:
        server_error = exc
    finally:
        for t in threads:
            t.join()
        hub.close()
    if server_error is not None and not isinstance(server_error, TransportError):
        raise server_error
    if errors:
        site, exc = errors[0]
        if isinstance(exc, TransportError):
            raise TransportError(f"site {site} dropped out: {exc}") from exc
        raise exc
    if server_error is not None:
        raise server_error

    rows = sorted((r for c in clients for r in c.rows),
                  key=lambda r: (r["epoch"], r["site"], r["split"], r["count_level"]))
    return FederatedResult({c.site_id: c.model for c in clients}, rows, aggregated,
                           state.history, traffic)
