"""Per-iteration communication cost tables for one M x N FC layer."""
from __future__ import annotations

import csv
import io

from ..errors import ConfigError
from ..factors import Strategy, broadcast_unicast_floats, cost, sacp_decide
from ..network import LayerKind, LayerProfile

COLUMNS = ["P", "K", "M", "N", "strategy", "floats", "decision", "broadcast_unicast_floats"]


def _fc_profile(M: int, N: int) -> LayerProfile:
    return LayerProfile(0, LayerKind.FULLY_CONNECTED, M, N, M * N, 2 * M * N, False, (N,), (M,))


def bench_rows(Ps, Ks, M: int, N: int) -> list[dict]:
    Ps, Ks = list(Ps), list(Ks)
    if not Ps or not Ks:
        raise ConfigError("P and K ranges must be nonempty")
    prof = _fc_profile(M, N)
    rows = []
    for P in Ps:
        for K in Ks:
            decision = sacp_decide(prof, P, K).value
            unicast = broadcast_unicast_floats(P, K, M, N)
            for st in Strategy:
                rows.append(
                    {
                        "P": P,
                        "K": K,
                        "M": M,
                        "N": N,
                        "strategy": st.value,
                        "floats": cost(st, P, K, M, N).floats,
                        "decision": decision,
                        "broadcast_unicast_floats": unicast,
                    }
                )
    return rows


def bench_comm(Ps, Ks, M: int, N: int, out=None) -> str:
    """Write the table as CSV to ``out`` (a text stream) and return the CSV text."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(bench_rows(Ps, Ks, M, N))
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def parse_range(text: str) -> list[int]:
    """``"4"``, ``"2,4,8"`` or ``"2-64"`` (inclusive)."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"bad range {text!r}") from None
    if not out or min(out) <= 0:
        raise ConfigError(f"range {text!r} must list positive integers")
    return out
