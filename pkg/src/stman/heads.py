"""Decoders: role-masked attention USE head, per-utterance SA head, and
the task discriminator that tries to tell the two feature streams apart.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = [
    "N_SAT",
    "N_SENT",
    "N_TASKS",
    "param_specs",
    "use_decode_steps",
    "use_decode",
    "sa_decode_step",
    "sa_decode",
    "discriminate_steps",
    "discriminate",
]

N_SAT = 3
N_SENT = 3
N_TASKS = 2  # feature-origin classes: 0 = satisfaction stream, 1 = sentiment stream

_GATES = ("r", "z", "h")


def param_specs(K: int, H: int, use_aux: bool,
                use_td: bool) -> list[tuple[str, tuple[int, int]]]:
    specs = [
        ("use.W_u", (K, H)),
        ("use.b_u", (1, H)),
        ("use.U_u", (H, 1)),
        ("use.W_o", (2 * K, N_SAT)),
        ("use.b_o", (1, N_SAT)),
    ]
    if use_aux:
        specs += [("sa.W", (K, N_SENT)), ("sa.b", (1, N_SENT))]
    if use_td:
        for g in _GATES:
            specs += [(f"td.W_{g}", (K, K)), (f"td.U_{g}", (K, K)),
                      (f"td.b_{g}", (1, K))]
        specs += [("td.W_o", (K, N_TASKS)), ("td.b_o", (1, N_TASKS))]
    return specs


def use_decode_steps(P: dict, H_m: list, keep: np.ndarray,
                     last_onehot: np.ndarray):
    """Attention-pooled satisfaction distribution for a batch.

    H_m: per-step (B, K) nodes. keep: (B, L) positions eligible for
    attention (user-only when the role mask is on, every real utterance
    otherwise; padding never). last_onehot: (B, L) with a single 1 at each
    dialogue's final real utterance. Returns (p_m (B,3), alpha (B,L)).
    """
    scores = ad.hstack([
        ad.matmul(ad.tanh(ad.add_bias(ad.matmul(h, P["use.W_u"]), P["use.b_u"])),
                  P["use.U_u"])
        for h in H_m
    ])
    alpha = ad.masked_softmax(scores, keep)
    pooled = None
    last = None
    for t, h in enumerate(H_m):
        p_term = ad.scale_columns(h, ad.slice_cols(alpha, t, t + 1))
        l_term = ad.scale_columns(h, ad.constant(last_onehot[:, t : t + 1]))
        pooled = p_term if pooled is None else ad.add(pooled, p_term)
        last = l_term if last is None else ad.add(last, l_term)
    o = ad.hconcat(pooled, last)
    p_m = ad.softmax_rows(ad.add_bias(ad.matmul(o, P["use.W_o"]), P["use.b_o"]))
    return p_m, alpha


def use_decode(P: dict, H_m: list, roles, use_mask: bool = True):
    """Single-dialogue wrapper: H_m is the per-utterance state list,
    roles the matching speaker strings."""
    L = len(H_m)
    if len(roles) != L or L < 1:
        raise ad.ShapeError(f"use_decode: {L} states vs {len(roles)} roles")
    if use_mask:
        keep = np.array([[r == "user" for r in roles]])
    else:
        keep = np.ones((1, L), dtype=bool)
    last = np.zeros((1, L))
    last[0, L - 1] = 1.0
    return use_decode_steps(P, H_m, keep, last)


def sa_decode_step(P: dict, h_a: ad.Node) -> ad.Node:
    return ad.softmax_rows(ad.add_bias(ad.matmul(h_a, P["sa.W"]), P["sa.b"]))


def sa_decode(P: dict, H_a: list) -> list:
    return [sa_decode_step(P, h) for h in H_a]


def _td_gru_step(P: dict, x: ad.Node, h_prev: ad.Node) -> ad.Node:
    def gate(g):
        return ad.add_bias(ad.add(ad.matmul(x, P[f"td.W_{g}"]),
                                  ad.matmul(h_prev, P[f"td.U_{g}"])),
                           P[f"td.b_{g}"])

    r = ad.sigmoid(gate("r"))
    z = ad.sigmoid(gate("z"))
    hh = ad.tanh(ad.add_bias(
        ad.add(ad.matmul(x, P["td.W_h"]),
               ad.matmul(ad.hadamard(h_prev, r), P["td.U_h"])),
        P["td.b_h"]))
    return ad.add(ad.sub(h_prev, ad.hadamard(z, h_prev)), ad.hadamard(z, hh))


def discriminate_steps(P: dict, X: ad.Node, B: int, L: int, K: int) -> list:
    """GRU over one task-feature stream (position-major X), per-step
    softmax over the two task classes. Returns L nodes of shape (B, 2)."""
    h = ad.constant(np.zeros((B, K)))
    probs = []
    for t in range(L):
        h = _td_gru_step(P, ad.slice_rows(X, t * B, (t + 1) * B), h)
        probs.append(ad.softmax_rows(ad.add_bias(ad.matmul(h, P["td.W_o"]),
                                                 P["td.b_o"])))
    return probs


def discriminate(P: dict, X: ad.Node, K: int) -> list:
    """Single-dialogue wrapper: X is (L, K), one utterance per row."""
    return discriminate_steps(P, X, 1, X.value.shape[0], K)
