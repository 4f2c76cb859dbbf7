"""Sufficient factors, the communication cost model, and the protocol selector.

A fully-connected layer's batch gradient is a sum of rank-one terms,
``dW = scale * sum_k u_k v_k^T`` with ``u_k`` the error arriving at the
layer's output for sample ``k`` and ``v_k`` the layer's input activation.
Shipping the ``K`` vector pairs costs ``K(M+N)`` floats instead of ``MN``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UnsupportedLayerError
from .network import BackwardRecord, LayerKind, LayerParams, LayerProfile


class Strategy(str, enum.Enum):
    FULL_MATRIX_PS = "full-ps"
    SF_PS = "sf-ps"
    SF_BROADCAST = "sfb"

    @property
    def uses_factors(self) -> bool:
        return self is not Strategy.FULL_MATRIX_PS

    @property
    def uses_server(self) -> bool:
        return self is not Strategy.SF_BROADCAST


@dataclass(frozen=True)
class SufficientFactorSet:
    """``K`` factor pairs for one layer, one worker and one clock.

    ``us`` is ``(K, M)`` and ``vs`` is ``(K, N)``. The optional bias factor is
    the pair ``(bias_u, [1])``; only ``bias_u`` is stored.
    """

    layer_id: int
    clock: int
    worker_id: int
    us: np.ndarray
    vs: np.ndarray
    scale: float
    bias_u: np.ndarray | None = None

    def __post_init__(self):
        if self.us.ndim != 2 or self.vs.ndim != 2:
            raise ShapeError("factor stacks must be 2-D")
        if self.us.shape[0] != self.vs.shape[0]:
            raise ShapeError(f"{self.us.shape[0]} u-vectors but {self.vs.shape[0]} v-vectors")
        if self.bias_u is not None and self.bias_u.shape != (self.us.shape[1],):
            raise ShapeError("bias factor length must equal M")

    @property
    def K(self) -> int:
        return self.us.shape[0]

    @property
    def M(self) -> int:
        return self.us.shape[1]

    @property
    def N(self) -> int:
        return self.vs.shape[1]

    @property
    def pairs(self) -> list:
        out = list(zip(self.us, self.vs))
        if self.bias_u is not None:
            out.append((self.bias_u, np.ones(1, dtype=self.bias_u.dtype)))
        return out

    @property
    def float_count(self) -> int:
        # the bias pair's v=[1] is implied, never serialized
        n = self.us.size + self.vs.size
        if self.bias_u is not None:
            n += self.bias_u.size
        return n


def decompose(record: BackwardRecord, clock: int = 0, worker_id: int = 0) -> SufficientFactorSet:
    """Package a fully-connected layer's per-sample vectors as factors.

    The gradient matrix is not needed; only the retained per-sample error and
    activation stacks are used.
    """
    if record.kind is not LayerKind.FULLY_CONNECTED:
        raise UnsupportedLayerError(f"layer {record.layer_id} ({record.kind.value}) has no sufficient factors")
    bias_u = None
    if record.bias_grad is not None:
        bias_u = record.bias_grad
    return SufficientFactorSet(
        record.layer_id, clock, worker_id, record.error_out, record.activation_in, record.scale, bias_u
    )


def reconstruct(sfs: SufficientFactorSet) -> LayerParams:
    """Rebuild ``LayerParams(weight_grad, bias_grad)`` from a factor set."""
    if sfs.us.shape[0] != sfs.vs.shape[0]:
        raise ShapeError("factor count mismatch")
    dt = sfs.us.dtype.type
    weight = dt(sfs.scale) * (sfs.us.T @ sfs.vs)
    bias = None if sfs.bias_u is None else sfs.bias_u.copy()
    return LayerParams(weight, bias)


def reconstruct_by_outer(sfs: SufficientFactorSet) -> np.ndarray:
    """Reference path: explicit sum of outer products, one pair at a time."""
    acc = np.zeros((sfs.M, sfs.N), dtype=np.float64)
    for u, v in zip(sfs.us, sfs.vs):
        acc += np.outer(u.astype(np.float64), v.astype(np.float64))
    return sfs.scale * acc


@dataclass(frozen=True)
class CommCost:
    strategy: Strategy
    floats: int


def cost(strategy: Strategy, P: int, K: int, M: int, N: int) -> CommCost:
    """Floats moved per iteration for one ``M x N`` layer across the cluster."""
    if min(P, K, M, N) <= 0:
        raise ValueError("counts must be positive")
    strategy = Strategy(strategy)
    if strategy is Strategy.FULL_MATRIX_PS:
        floats = 2 * P * M * N
    elif strategy is Strategy.SF_BROADCAST:
        floats = (P - 1) ** 2 * K * (M + N)
    else:
        floats = P * K * (M + N) + P * M * N
    return CommCost(strategy, floats)


def broadcast_unicast_floats(P: int, K: int, M: int, N: int) -> int:
    """Floats actually put on the wire when broadcast is P-1 unicasts per worker."""
    return P * (P - 1) * K * (M + N)


def sacp_decide(layer: LayerProfile, P: int, K: int) -> Strategy:
    if layer.kind is not LayerKind.FULLY_CONNECTED:
        return Strategy.FULL_MATRIX_PS
    sfb = cost(Strategy.SF_BROADCAST, P, K, layer.M, layer.N).floats
    sfps = cost(Strategy.SF_PS, P, K, layer.M, layer.N).floats
    # ties go to broadcast
    return Strategy.SF_BROADCAST if sfb <= sfps else Strategy.SF_PS


def crossover_P(K: int, M: int, N: int, p_max: int = 1 << 16) -> int | None:
    """Smallest P at which the selector stops choosing broadcast, if any."""
    for P in range(1, p_max + 1):
        if (P - 1) ** 2 * K * (M + N) > P * K * (M + N) + P * M * N:
            return P
    return None
