"""Synchronous aggregation server."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..autodiff import Tensor
from ..errors import ContractError, ProtocolError, TransportError
from ..params import ParamTree
from ..strategy import StrategyId, is_shared
from .wire import Message, MessageKind, decode_message, encode_message

log = logging.getLogger(__name__)


def aggregate(uploads: Sequence[ParamTree]) -> ParamTree:
    """Elementwise mean of congruent trees.

    Values are sorted across uploads before summing in f64, so the result
    does not depend on the order in which uploads arrived.
    """
    if not uploads:
        raise ContractError("cannot aggregate an empty list of uploads")
    first = uploads[0]
    for other in uploads[1:]:
        first.check_congruent(other, ProtocolError)
    out = ParamTree()
    n = len(uploads)
    for name in first:
        stack = np.stack([np.asarray(u[name].data, dtype=np.float64) for u in uploads])
        if n > 2:
            stack.sort(axis=0)
        mean = stack.sum(axis=0) / n
        dtype = np.result_type(*[u[name].data.dtype for u in uploads])
        out[name] = Tensor(mean.astype(dtype))
    return out


class Phase(enum.Enum):
    AWAIT_REGISTRATION = "await_registration"
    DEPLOYED = "deployed"
    COLLECTING = "collecting"
    AGGREGATING = "aggregating"
    DONE = "done"


@dataclass
class ServerState:
    strategy: StrategyId
    Q: int
    n_sites: int
    global_epoch: int = 0
    registered_sites: dict = field(default_factory=dict)   # site id -> transport index
    pending_uploads: dict = field(default_factory=dict)
    aggregated: Optional[ParamTree] = None
    phase: Phase = Phase.AWAIT_REGISTRATION
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.strategy = StrategyId.parse(self.strategy)
        if self.Q < 1 or self.n_sites < 1:
            raise ContractError(f"need Q >= 1 and at least one site, got Q={self.Q}, N={self.n_sites}")


def check_payload_names(names, strategy, expected=None) -> None:
    """Every exchanged name must belong to the shared partition."""
    leaked = [n for n in names if not is_shared(n, strategy)]
    if leaked:
        raise ProtocolError(f"payload carries non-shared parameters: {leaked[:3]}")
    if expected is not None and list(names) != list(expected):
        missing = sorted(set(expected) ^ set(names))
        raise ProtocolError(f"payload names differ from the deployed partition: {missing[:3]}")


class Server:
    def __init__(self, transport, state: ServerState, initial: ParamTree,
                 timeout: Optional[float] = None, keep_rounds: bool = False,
                 on_aggregate: Optional[Callable] = None):
        check_payload_names(list(initial), state.strategy)
        self.transport = transport
        self.state = state
        self.initial = initial
        self.timeout = timeout
        self.keep_rounds = keep_rounds
        self.on_aggregate = on_aggregate
        self.finished: set = set()

    def _send(self, site_id: int, kind: MessageKind, payload: ParamTree) -> None:
        msg = Message(kind, site_id, self.state.global_epoch, payload)
        self.transport.send(self.state.registered_sites[site_id], encode_message(msg))

    def _recv(self) -> tuple:
        while True:
            index, blob = self.transport.recv(self.timeout)
            if blob is not None:
                return index, decode_message(blob)
            if index not in self.finished:
                raise TransportError(f"client connection {index} closed before the run finished")

    def _broadcast(self, kind: MessageKind, payload: ParamTree) -> None:
        for site in sorted(self.state.registered_sites):
            self._send(site, kind, payload)

    def _await_registration(self) -> None:
        st = self.state
        while len(st.registered_sites) < st.n_sites:
            index, msg = self._recv()
            if msg.kind is not MessageKind.REGISTER:
                raise ProtocolError(f"expected Register, got {msg.kind.name} from connection {index}")
            if msg.site_id in st.registered_sites or index in st.registered_sites.values():
                raise ProtocolError(f"site {msg.site_id} registered twice")
            st.registered_sites[msg.site_id] = index
            log.info("site %d registered", msg.site_id)

    def _collect(self) -> None:
        st = self.state
        st.phase = Phase.COLLECTING
        expected = list(st.aggregated)
        owner = {i: s for s, i in st.registered_sites.items()}
        while len(st.pending_uploads) < st.n_sites:
            index, msg = self._recv()
            if msg.kind is not MessageKind.UPLOAD:
                raise ProtocolError(f"expected Upload, got {msg.kind.name}")
            if owner.get(index) != msg.site_id:
                raise ProtocolError(f"site id {msg.site_id} does not own connection {index}")
            if msg.global_epoch != st.global_epoch:
                raise ProtocolError(f"site {msg.site_id} uploaded for epoch {msg.global_epoch}, "
                                    f"server is at {st.global_epoch}")
            if msg.site_id in st.pending_uploads:
                raise ProtocolError(f"site {msg.site_id} uploaded twice in epoch {st.global_epoch}")
            check_payload_names(list(msg.payload), st.strategy, expected)
            st.pending_uploads[msg.site_id] = msg.payload

    def _aggregate(self) -> None:
        st = self.state
        st.phase = Phase.AGGREGATING
        if set(st.pending_uploads) != set(st.registered_sites):
            raise ContractError("aggregation attempted without every site's upload")
        uploads = [st.pending_uploads[s] for s in sorted(st.pending_uploads)]
        st.aggregated = aggregate(uploads) if uploads[0] else ParamTree()
        st.pending_uploads = {}
        if self.keep_rounds:
            st.history.append(st.aggregated.snapshot())
        if self.on_aggregate:
            self.on_aggregate(st.global_epoch, st.aggregated)
        log.info("epoch %d aggregated over %d sites", st.global_epoch, len(uploads))

    def run(self) -> ParamTree:
        st = self.state
        self.transport.accept(self.timeout)
        self._await_registration()
        st.aggregated = self.initial
        st.global_epoch = 1
        self._broadcast(MessageKind.DEPLOY, st.aggregated)
        st.phase = Phase.DEPLOYED
        while True:
            self._collect()
            self._aggregate()
            if st.global_epoch == st.Q:
                break
            st.global_epoch += 1
            self._broadcast(MessageKind.DEPLOY, st.aggregated)
            st.phase = Phase.DEPLOYED
        self._broadcast(MessageKind.FINISH, st.aggregated)
        acked = set()
        while len(acked) < st.n_sites:
            index, msg = self._recv()
            if msg.kind is not MessageKind.ACK:
                raise ProtocolError(f"expected Ack, got {msg.kind.name}")
            acked.add(msg.site_id)
            self.finished.add(index)
        st.phase = Phase.DONE
        return st.aggregated


def run_server(transport, state: ServerState, initial: ParamTree, **kwargs) -> ParamTree:
    server = Server(transport, state, initial, **kwargs)
    try:
        return server.run()
    except BaseException:
        transport.close()
        raise
