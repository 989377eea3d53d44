"""Synchronous federated rounds with an interception point.

Each round the server broadcasts the global parameters, every client computes
its mean cross-entropy gradient on one local batch, applies its defense, and
the server averages the transmitted updates (FedAvg, weights proportional to
client data size) and takes one SGD step.  The :class:`RoundRecord` holds
exactly what crossed the simulated wire, which is all an eavesdropper sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from . import data
from .defenses import DefenseConfig, apply_defense, derive_seed
from .nn import GradientUpdate, ModelSpec, ParamSet, loss_and_grad
from .optim import sgd_step


@dataclass
class ClientState:
    client_id: int
    local_data: list  # (image, label) pairs
    defense: DefenseConfig | None = None

    def __post_init__(self):
        if len(self.local_data) == 0:
            raise ValueError(f"client {self.client_id} has no local data")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    shared_updates: Mapping[int, GradientUpdate]
    global_params_before: ParamSet
    global_params_after: ParamSet
    batches: Mapping[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "shared_updates", MappingProxyType(dict(self.shared_updates)))
        object.__setattr__(self, "batches", MappingProxyType(dict(self.batches)))


def client_update(client: ClientState, params: ParamSet, spec: ModelSpec,
                  batch: Sequence[int], round_idx: int = 0) -> GradientUpdate:
    """The update a client transmits: mean batch gradient, then its defense.

    The undefended gradient never leaves this function.
    """
    batch = [int(i) for i in batch]
    if not batch:
        raise ValueError("empty batch")
    n = len(client.local_data)
    for i in batch:
        if not 0 <= i < n:
            raise IndexError(f"batch index {i} out of range for {n} local samples")
    xs = np.stack([np.asarray(client.local_data[i][0]) for i in batch])
    ys = [client.local_data[i][1] for i in batch]
    _, raw = loss_and_grad(params, spec, xs if len(batch) > 1 else xs[0],
                           ys if len(batch) > 1 else ys[0])
    if client.defense is None or client.defense.kind == "none":
        return raw
    seed = derive_seed(client.defense.seed, client.client_id, round_idx, *batch)
    return apply_defense(raw, client.defense, seed)


def fedavg_aggregate(updates: Sequence[tuple[GradientUpdate, float]]) -> GradientUpdate:
    """Weighted mean of updates.

    Per-entry contributions are sorted before summation, so the result does not
    depend on the order of ``updates``.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    first = updates[0][0]
    for u, w in updates:
        if not w > 0:
            raise ValueError(f"aggregation weight must be > 0, got {w}")
        if u.names != first.names or any(a.shape != b.shape for a, b in zip(u.tensors, first.tensors)):
            raise ValueError("updates have inconsistent parameter shapes")
    total = float(sum(w for _, w in updates))
    out = []
    for k, ref in enumerate(first.tensors):
        terms = np.stack([(w / total) * u.tensors[k].astype(np.float64) for u, w in updates])
        out.append(np.sort(terms, axis=0).sum(axis=0).astype(ref.dtype))
    return GradientUpdate(tuple(zip(first.names, out)), sum(u.batch_size for u, _ in updates))


def round_batch(client: ClientState, round_idx: int, batch_size: int) -> tuple[int, ...]:
    """Cyclic pass over the client's data: round t uses items t*B .. t*B+B-1 (mod n)."""
    n = len(client.local_data)
    return tuple((round_idx * batch_size + j) % n for j in range(batch_size))


def run_round(clients: Sequence[ClientState], params: ParamSet, spec: ModelSpec, lr: float,
              round_idx: int, seed: int = 0, batch_size: int = 1) -> tuple[ParamSet, RoundRecord]:
    """One synchronous round with full participation.

    ``seed`` is folded into every client's defense seed so reruns reproduce the
    transmitted updates exactly.
    """
    if not clients:
        raise ValueError("a round needs at least one client")
    shared, batches = {}, {}
    for c in clients:
        if c.client_id in shared:
            raise ValueError(f"duplicate client id {c.client_id}")
        batch = round_batch(c, round_idx, batch_size)
        if c.defense is not None and c.defense.kind != "none":
            c = ClientState(c.client_id, c.local_data,
                            _reseeded(c.defense, seed))
        shared[c.client_id] = client_update(c, params, spec, batch, round_idx)
        batches[c.client_id] = batch
    agg = fedavg_aggregate([(shared[c.client_id], len(c.local_data)) for c in clients])
    new_params = sgd_step(params, agg, lr)
    return new_params, RoundRecord(round_idx, shared, params, new_params, batches)


def _reseeded(defense: DefenseConfig, seed: int) -> DefenseConfig:
    return replace(defense, seed=derive_seed(seed, defense.seed))


def intercept(record: RoundRecord, client_id: int) -> GradientUpdate:
    """What an eavesdropper on client ``client_id``'s link captured this round."""
    try:
        return record.shared_updates[client_id]
    except KeyError:
        raise KeyError(f"client {client_id} did not participate in round {record.round}") from None


# ---------------------------------------------------------------- persistence


def save_params(params: ParamSet, root) -> Path:
    return data.write_named_tensors(root, params.entries, {"step_count": params.step_count})


def load_params(root) -> ParamSet:
    entries, meta = data.read_named_tensors(root)
    return ParamSet(tuple(entries), int(meta.get("step_count", 0)))


def save_round(record: RoundRecord, root) -> Path:
    """MPFT tensors per client plus a JSON index, for offline attack replay."""
    root = Path(root)
    save_params(record.global_params_before, root / "params_before")
    save_params(record.global_params_after, root / "params_after")
    clients = []
    for cid, u in sorted(record.shared_updates.items()):
        data.write_named_tensors(root / f"client_{cid}", u.entries, {"batch_size": u.batch_size})
        clients.append({"client_id": cid, "dir": f"client_{cid}",
                        "batch": list(record.batches.get(cid, ()))})
    (root / "round.json").write_text(json.dumps({"round": record.round, "clients": clients},
                                                indent=2))
    return root


def load_round(root) -> RoundRecord:
    root = Path(root)
    doc = json.loads((root / "round.json").read_text())
    shared, batches = {}, {}
    for c in doc["clients"]:
        entries, meta = data.read_named_tensors(root / c["dir"])
        shared[int(c["client_id"])] = GradientUpdate(tuple(entries), int(meta.get("batch_size", 1)))
        batches[int(c["client_id"])] = tuple(c.get("batch", ()))
    return RoundRecord(int(doc["round"]), shared, load_params(root / "params_before"),
                       load_params(root / "params_after"), batches)
